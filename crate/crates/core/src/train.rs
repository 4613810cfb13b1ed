//! Supervised training with Adam and early stopping on validation loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Subset, WindowRef};
use crate::error::{DeapError, Result};
use crate::nn::{mse, Adam, Model, Param};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Optional cap on training windows drawn per epoch (after shuffling).
    pub max_windows_per_epoch: Option<usize>,
    /// Reflect each training window left-right with probability 1/2 when
    /// the array is mirror-symmetric.
    pub mirror_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            max_windows_per_epoch: None,
            mirror_augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DeapError::param("learning_rate", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(DeapError::param("batch_size", "must be > 0"));
        }
        if self.max_epochs == 0 {
            return Err(DeapError::param("max_epochs", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// One optimisation step on a prepared batch; returns the batch loss.
pub fn train_step(model: &mut Model, opt: &mut Adam, x: &[f64], y: &[f64], batch: usize) -> Result<f64> {
    model.zero_grad();
    let pred = model.forward(x, batch)?;
    let (loss, grad) = mse(&pred, y);
    if !loss.is_finite() {
        return Err(DeapError::NonFiniteLoss { epoch: 0, batch: 0, loss });
    }
    model.backward(&grad);
    opt.step(model.params_mut());
    Ok(loss)
}

/// Mean loss over windows, evaluated in fixed-size chunks.
pub fn evaluate(model: &mut Model, data: &Dataset, refs: &[WindowRef], chunk: usize) -> Result<f64> {
    if refs.is_empty() {
        return Ok(f64::NAN);
    }
    let (mut x, mut y) = (Vec::new(), Vec::new());
    let mut total = 0.0;
    for c in refs.chunks(chunk.max(1)) {
        data.fill_batch(c, &mut x, &mut y);
        let pred = model.forward(&x, c.len())?;
        total += mse(&pred, &y).0 * c.len() as f64;
    }
    Ok(total / refs.len() as f64)
}

fn snapshot(model: &Model) -> Vec<Vec<f64>> {
    model.params().iter().map(|p| p.value.clone()).collect()
}

fn restore(model: &mut Model, snap: &[Vec<f64>]) {
    for (p, v) in model.params_mut().into_iter().zip(snap) {
        p.value.copy_from_slice(v);
    }
}

/// Trains `model` on the dataset's train split, early-stopping on validation
/// loss. The best-validation weights are restored before returning.
///
/// `on_epoch` is called after each epoch, e.g. for progress logging.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    config.validate()?;
    model.normalization = data.normalization.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.learning_rate);
    let mut train_refs = data.windows(Subset::Train);
    let val_refs = data.windows(Subset::Val);
    if train_refs.is_empty() {
        return Err(DeapError::Precondition("training split has no windows".into()));
    }
    let initial_val_loss = evaluate(model, data, &val_refs, 64)?;
    let mut best = (0usize, initial_val_loss, snapshot(model));
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for epoch in 1..=config.max_epochs {
        let start = std::time::Instant::now();
        train_refs.shuffle(&mut rng);
        let used = config
            .max_windows_per_epoch
            .map_or(train_refs.len(), |m| m.min(train_refs.len()));
        if config.mirror_augment {
            for r in &mut train_refs[..used] {
                r.mirrored = data.mirrors[r.episode].is_some() && rng.random_bool(0.5);
            }
        }
        let mut total = 0.0;
        for (b, chunk) in train_refs[..used].chunks(config.batch_size).enumerate() {
            data.fill_batch(chunk, &mut x, &mut y);
            let loss = train_step(model, &mut opt, &x, &y, chunk.len()).map_err(|e| match e {
                DeapError::NonFiniteLoss { loss, .. } => DeapError::NonFiniteLoss { epoch, batch: b, loss },
                other => other,
            })?;
            total += loss * chunk.len() as f64;
        }
        let val_loss = evaluate(model, data, &val_refs, 64)?;
        let rec = EpochRecord {
            epoch,
            train_loss: total / used as f64,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        epochs.push(rec);
        // NaN validation loss (empty split) never counts as an improvement.
        if val_loss < best.1 || (best.1.is_nan() && !val_loss.is_nan()) {
            best = (epoch, val_loss, snapshot(model));
        } else if epoch - best.0 >= config.patience {
            stopped_early = true;
            break;
        }
    }
    restore(model, &best.2);
    let last = epochs.last().expect("at least one epoch");
    model.training.seed = config.seed;
    model.training.split_seed = data.split.seed;
    model.training.train_ids = data.split.train.clone();
    model.training.val_ids = data.split.val.clone();
    model.training.test_ids = data.split.test.clone();
    model.training.epochs = epochs.len();
    model.training.best_epoch = best.0;
    model.training.final_train_loss = last.train_loss;
    model.training.final_val_loss = last.val_loss;
    model.training.best_val_loss = best.1;
    Ok(TrainHistory {
        initial_val_loss,
        best_epoch: best.0,
        best_val_loss: best.1,
        epochs,
        stopped_early,
    })
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: (String, usize),
}

/// Relative error with a floor on the denominator, so that gradients that are
/// zero up to rounding do not dominate.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central-difference gradient check on `n_samples` randomly chosen
/// parameters (spread across every tensor).
pub fn gradient_check(model: &mut Model, x: &[f64], y: &[f64], batch: usize, n_samples: usize, h: f64, seed: u64) -> Result<GradCheck> {
    use rand::Rng;
    model.zero_grad();
    let pred = model.forward(x, batch)?;
    let (_, grad) = mse(&pred, y);
    model.backward(&grad);
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<(usize, usize)> = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        // Round-robin over tensors so small ones are covered too.
        let t = i % sizes.len();
        picks.push((t, rng.random_range(0..sizes[t])));
    }
    let loss_at = |model: &mut Model, t: usize, k: usize, v: f64| -> Result<f64> {
        let mut params = model.params_mut();
        let p: &mut Param = &mut params[t];
        let old = p.value[k];
        p.value[k] = v;
        let pred = model.forward(x, batch);
        model.params_mut()[t].value[k] = old;
        Ok(mse(&pred?, y).0)
    };
    let mut out = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: (String::new(), 0),
    };
    for (t, k) in picks {
        let v = model.params()[t].value[k];
        let plus = loss_at(model, t, k, v + h)?;
        let minus = loss_at(model, t, k, v - h)?;
        let numeric = (plus - minus) / (2.0 * h);
        // Below 1e-6 the central difference at h = 1e-5 is dominated by roundoff
        // in the loss (about 1e-12 absolute), so the denominator is floored there.
        let err = relative_error(analytic[t][k], numeric, 1e-6);
        if err > out.max_rel_error {
            out.max_rel_error = err;
            out.worst = (names[t].clone(), k);
        }
        out.checked += 1;
    }
    Ok(out)
}
