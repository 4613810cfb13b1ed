//! Encoder–decoder that maps a window of multichannel electrograms to one
//! membrane-potential frame.
//!
//! ```text
//! [20 × W] ─ per-channel temporal convs (shared) ─ flatten ─ dense ─ latent
//!          ─ dense ─ reshape [16 × G/4 × G/4] ─ 2 × transposed conv ─ sigmoid
//! ```

pub mod layers;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{load_json, save_json, WeightArchive};
use crate::error::{DeapError, Result};
pub use layers::{ConvTranspose2d, Dense, Param, TemporalConv};
use layers::{sigmoid, tanh_backward, tanh_inplace};

pub const WEIGHTS_FILE: &str = "model.bin";
pub const MANIFEST_FILE: &str = "model.json";
pub const MAX_PARAMS: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub window: usize,
    pub grid: usize,
    pub conv_channels: [usize; 3],
    pub conv_kernels: [usize; 3],
    pub conv_stride: usize,
    pub latent: usize,
    pub decoder_channels: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_channels: 20,
            window: 96,
            grid: 32,
            conv_channels: [8, 16, 16],
            conv_kernels: [7, 5, 5],
            conv_stride: 2,
            latent: 256,
            decoder_channels: [16, 8],
        }
    }
}

impl ModelConfig {
    fn conv_lengths(&self) -> [usize; 4] {
        let mut l = [self.window, 0, 0, 0];
        for i in 0..3 {
            if l[i] < self.conv_kernels[i] {
                return [l[0], 0, 0, 0];
            }
            l[i + 1] = (l[i] - self.conv_kernels[i]) / self.conv_stride + 1;
        }
        l
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(DeapError::param("n_channels", "must be > 0"));
        }
        if self.grid < 4 || self.grid % 4 != 0 {
            return Err(DeapError::param("grid", "must be a positive multiple of 4"));
        }
        if self.conv_stride == 0 || self.conv_lengths()[3] == 0 {
            return Err(DeapError::param("window", "too short for the temporal convolution stack"));
        }
        if self.latent == 0 || self.latent > 512 {
            return Err(DeapError::param("latent", "must be in 1..=512"));
        }
        if self.conv_channels.contains(&0) || self.decoder_channels.contains(&0) {
            return Err(DeapError::param("channels", "must be > 0"));
        }
        Ok(())
    }

    pub fn flat_features(&self) -> usize {
        self.conv_channels[2] * self.n_channels * self.conv_lengths()[3]
    }

    pub fn input_len(&self) -> usize {
        self.n_channels * self.window
    }

    pub fn output_len(&self) -> usize {
        self.grid * self.grid
    }
}

/// Per-channel z-score statistics applied to raw electrogram windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(n: usize) -> Self {
        Normalization {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }
}

/// Training record stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingRecord {
    pub seed: u64,
    pub split_seed: u64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub epochs: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub config: ModelConfig,
    pub normalization: Normalization,
    pub n_params: usize,
    pub training: TrainingRecord,
    pub git_describe: String,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub normalization: Normalization,
    pub training: TrainingRecord,
    conv: [TemporalConv; 3],
    dense1: Dense,
    dense2: Dense,
    deconv1: ConvTranspose2d,
    deconv2: ConvTranspose2d,
    cache: Cache,
}

/// Post-activation outputs kept for the backward pass.
#[derive(Debug, Clone, Default)]
struct Cache {
    batch: usize,
    conv_out: [Vec<f64>; 3],
    h1: Vec<f64>,
    h2: Vec<f64>,
    d1: Vec<f64>,
    out: Vec<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = config.conv_channels;
        let [k1, k2, k3] = config.conv_kernels;
        let s = config.conv_stride;
        let conv = [
            TemporalConv::new("conv1", 1, c1, k1, s, &mut rng),
            TemporalConv::new("conv2", c1, c2, k2, s, &mut rng),
            TemporalConv::new("conv3", c2, c3, k3, s, &mut rng),
        ];
        let base = config.grid / 4;
        let [dc1, dc2] = config.decoder_channels;
        let dense1 = Dense::new("dense1", config.flat_features(), config.latent, &mut rng);
        let dense2 = Dense::new("dense2", config.latent, dc1 * base * base, &mut rng);
        let deconv1 = ConvTranspose2d::new("deconv1", dc1, dc2, &mut rng);
        let deconv2 = ConvTranspose2d::new("deconv2", dc2, 1, &mut rng);
        let n = config.n_channels;
        let model = Model {
            normalization: Normalization::identity(n),
            training: TrainingRecord::default(),
            config,
            conv,
            dense1,
            dense2,
            deconv1,
            deconv2,
            cache: Cache::default(),
        };
        if model.n_params() > MAX_PARAMS {
            return Err(DeapError::param("config", format!("{} parameters exceed {MAX_PARAMS}", model.n_params())));
        }
        Ok(model)
    }

    /// Zeroes the output layer so every prediction is exactly 0.5.
    pub fn zero_output_layer(&mut self) {
        self.deconv2.weight.value.fill(0.0);
        self.deconv2.bias.value.fill(0.0);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let [a, b, c] = &mut self.conv;
        let mut out: Vec<&mut Param> = Vec::new();
        out.extend(a.params_mut());
        out.extend(b.params_mut());
        out.extend(c.params_mut());
        out.extend(self.dense1.params_mut());
        out.extend(self.dense2.params_mut());
        out.extend(self.deconv1.params_mut());
        out.extend(self.deconv2.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        for c in &self.conv {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        for p in [
            &self.dense1.weight,
            &self.dense1.bias,
            &self.dense2.weight,
            &self.dense2.bias,
            &self.deconv1.weight,
            &self.deconv1.bias,
            &self.deconv2.weight,
            &self.deconv2.bias,
        ] {
            out.push(p);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Forward pass on already-normalised inputs, row-major
    /// `[batch, channels, window]`; returns `[batch, grid, grid]` in `[0, 1]`.
    pub fn forward(&mut self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if batch == 0 || x.len() != batch * cfg.input_len() {
            return Err(DeapError::ShapeMismatch {
                expected: format!("{batch} × {} × {}", cfg.n_channels, cfg.window),
                got: format!("{} values", x.len()),
            });
        }
        let e = cfg.n_channels;
        let lens = cfg.conv_lengths();
        let n = batch * e;
        // Input is already [1, n, window] in channel-major layout.
        let mut h = x.to_vec();
        for (i, layer) in self.conv.iter_mut().enumerate() {
            let mut y = layer.forward(&h, n, lens[i]);
            tanh_inplace(&mut y);
            self.cache.conv_out[i] = y.clone();
            h = y;
        }
        // [c, b·e, l] → [b, c·e·l]
        let (c3, l3) = (cfg.conv_channels[2], lens[3]);
        let flat_len = c3 * e * l3;
        let mut flat = vec![0.0; batch * flat_len];
        for c in 0..c3 {
            for b in 0..batch {
                for ch in 0..e {
                    let src = &h[(c * n + b * e + ch) * l3..][..l3];
                    flat[b * flat_len + (c * e + ch) * l3..][..l3].copy_from_slice(src);
                }
            }
        }
        let mut h1 = self.dense1.forward(&flat, batch);
        tanh_inplace(&mut h1);
        let mut h2 = self.dense2.forward(&h1, batch);
        tanh_inplace(&mut h2);
        // [b, c·s] → [c, b, s]
        let base = cfg.grid / 4;
        let dc1 = cfg.decoder_channels[0];
        let spatial = base * base;
        let mut z = vec![0.0; h2.len()];
        for b in 0..batch {
            for c in 0..dc1 {
                z[(c * batch + b) * spatial..][..spatial].copy_from_slice(&h2[b * dc1 * spatial + c * spatial..][..spatial]);
            }
        }
        let mut d1 = self.deconv1.forward(&z, batch, base, base);
        tanh_inplace(&mut d1);
        let mut out = self.deconv2.forward(&d1, batch, 2 * base, 2 * base);
        out.iter_mut().for_each(|v| *v = sigmoid(*v));
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(DeapError::Precondition(format!("non-finite output at index {i}")));
        }
        self.cache.batch = batch;
        self.cache.h1 = h1;
        self.cache.h2 = h2;
        self.cache.d1 = d1;
        self.cache.out = out.clone();
        Ok(out)
    }

    /// Accumulates parameter gradients given `dL/d(output)` for the batch of
    /// the last forward call.
    pub fn backward(&mut self, dout: &[f64]) {
        let cfg = self.config.clone();
        let batch = self.cache.batch;
        let e = cfg.n_channels;
        let n = batch * e;
        let lens = cfg.conv_lengths();
        let base = cfg.grid / 4;
        let spatial = base * base;
        let dc1 = cfg.decoder_channels[0];

        let g: Vec<f64> = dout
            .iter()
            .zip(&self.cache.out)
            .map(|(d, y)| d * y * (1.0 - y))
            .collect();
        let mut g = self.deconv2.backward(&g);
        tanh_backward(&self.cache.d1, &mut g);
        let gz = self.deconv1.backward(&g);
        let mut g2 = vec![0.0; gz.len()];
        for b in 0..batch {
            for c in 0..dc1 {
                g2[b * dc1 * spatial + c * spatial..][..spatial].copy_from_slice(&gz[(c * batch + b) * spatial..][..spatial]);
            }
        }
        tanh_backward(&self.cache.h2, &mut g2);
        let mut g1 = self.dense2.backward(&g2);
        tanh_backward(&self.cache.h1, &mut g1);
        let gflat = self.dense1.backward(&g1);
        let (c3, l3) = (cfg.conv_channels[2], lens[3]);
        let flat_len = c3 * e * l3;
        let mut gh = vec![0.0; c3 * n * l3];
        for c in 0..c3 {
            for b in 0..batch {
                for ch in 0..e {
                    gh[(c * n + b * e + ch) * l3..][..l3].copy_from_slice(&gflat[b * flat_len + (c * e + ch) * l3..][..l3]);
                }
            }
        }
        for i in (0..3).rev() {
            tanh_backward(&self.cache.conv_out[i], &mut gh);
            gh = self.conv[i].backward(&gh);
        }
    }

    /// Normalises one raw `[channels × window]` window in place.
    pub fn normalize(&self, window: &mut [f64]) {
        let w = self.config.window;
        for (c, chunk) in window.chunks_mut(w).enumerate() {
            let (m, s) = (self.normalization.mean[c], self.normalization.std[c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }

    /// Predicts frames for raw (unnormalised) windows.
    pub fn predict(&mut self, raw: &[f64], batch: usize) -> Result<Vec<f64>> {
        if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
            return Err(DeapError::Precondition(format!("non-finite input at index {i}")));
        }
        let mut x = raw.to_vec();
        for w in x.chunks_mut(self.config.input_len()) {
            self.normalize(w);
        }
        self.forward(&x, batch)
    }

    pub fn manifest(&self, git_describe: &str) -> ModelManifest {
        ModelManifest {
            config: self.config.clone(),
            normalization: self.normalization.clone(),
            n_params: self.n_params(),
            training: self.training.clone(),
            git_describe: git_describe.to_string(),
        }
    }

    pub fn to_archive(&self) -> WeightArchive {
        WeightArchive {
            blobs: self
                .params()
                .into_iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn from_parts(manifest: &ModelManifest, archive: &WeightArchive) -> Result<Self> {
        let mut model = Model::new(manifest.config.clone(), 0)?;
        let n = manifest.config.n_channels;
        if manifest.normalization.mean.len() != n || manifest.normalization.std.len() != n {
            return Err(DeapError::ShapeMismatch {
                expected: format!("{n} normalisation channels"),
                got: format!("{}", manifest.normalization.mean.len()),
            });
        }
        model.normalization = manifest.normalization.clone();
        model.training = manifest.training.clone();
        for p in model.params_mut() {
            let blob = archive.get(&p.name).ok_or_else(|| DeapError::Format {
                context: "weights".into(),
                reason: format!("missing blob {}", p.name),
            })?;
            if blob.len() != p.len() {
                return Err(DeapError::ShapeMismatch {
                    expected: format!("{} values for {}", p.len(), p.name),
                    got: blob.len().to_string(),
                });
            }
            p.value.copy_from_slice(blob);
        }
        Ok(model)
    }

    pub fn save(&self, dir: &Path, git_describe: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| DeapError::io(dir, e))?;
        self.to_archive().save(&dir.join(WEIGHTS_FILE))?;
        save_json(&dir.join(MANIFEST_FILE), &self.manifest(git_describe))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: ModelManifest = load_json(&dir.join(MANIFEST_FILE))?;
        let archive = WeightArchive::load(&dir.join(WEIGHTS_FILE))?;
        Model::from_parts(&manifest, &archive)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                p.value[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    (loss / n, grad)
}
