//! Supervised window samples for the reconstruction model.
//!
//! Each episode is reduced to what training and scoring need: its electrogram
//! recording and the ground-truth movie resampled onto the catheter's square
//! region of interest. The full-resolution movie is dropped early so a corpus
//! of dozens of episodes fits in memory.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DeapError, Result};
use crate::grid::{GridSpec, VmMovie};
use crate::nn::Normalization;
use crate::sensing::{forward_egm, register, EgmRecording, ElectrodeArray, NoiseSpec};
use crate::tissue::{Episode, EpisodeLabel, FibrillationRecipe, ModelParams};

pub const MIN_EPISODES: usize = 10;
pub const TRAIN_STRIDE: usize = 4;
pub const EVAL_STRIDE: usize = 1;
pub const VAL_FRACTION: f64 = 0.15;
pub const TEST_FRACTION: f64 = 0.15;

/// One episode reduced to its recording and ROI ground truth.
#[derive(Debug, Clone)]
pub struct EpisodeSample {
    pub id: String,
    pub label: EpisodeLabel,
    pub cycle_length_ms: Option<f64>,
    pub recording: EgmRecording,
    /// Ground truth on the ROI grid, same frame timing as the recording.
    pub target: VmMovie,
    /// Footprint disc on the ROI grid.
    pub mask: Vec<bool>,
}

impl EpisodeSample {
    pub fn roi(&self) -> GridSpec {
        self.target.grid
    }
}

/// Senses an episode and resamples its truth onto the array ROI.
pub fn prepare_episode(episode: &Episode, recording: EgmRecording, grid_cells: usize) -> Result<EpisodeSample> {
    if recording.meta.episode_id != episode.meta.id {
        return Err(DeapError::Precondition(format!(
            "recording {} does not belong to episode {}",
            recording.meta.episode_id, episode.meta.id
        )));
    }
    if recording.n_samples() != episode.vm.n_frames {
        return Err(DeapError::ShapeMismatch {
            expected: format!("{} samples", episode.vm.n_frames),
            got: recording.n_samples().to_string(),
        });
    }
    let array = &recording.meta.array;
    register(array, &episode.vm.grid)?;
    let roi = array.roi(grid_cells);
    let mut target = episode.vm.resample(&roi);
    target.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let (c, r) = array.footprint();
    let mask = roi.disc_mask(c, r);
    Ok(EpisodeSample {
        id: episode.meta.id.clone(),
        label: episode.meta.label,
        cycle_length_ms: episode.meta.cycle_length_ms,
        recording,
        target,
        mask,
    })
}

/// Recipe for a synthetic fibrillation corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_episodes: usize,
    pub seed: u64,
    pub nx: usize,
    pub ny: usize,
    pub dx_mm: f64,
    pub duration_ms: usize,
    pub grid_cells: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_episodes: 40,
            seed: 1,
            nx: 128,
            ny: 128,
            dx_mm: 0.25,
            duration_ms: 1500,
            grid_cells: 32,
        }
    }
}

impl CorpusSpec {
    pub fn episode_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }

    pub fn episode_id(&self, i: usize) -> String {
        format!("ep{:04}", i)
    }

    /// Simulates and senses episode `i`.
    pub fn simulate(&self, i: usize, params: &ModelParams) -> Result<Episode> {
        let seed = self.episode_seed(i);
        FibrillationRecipe::sample(seed, self.nx, self.ny).run(
            self.episode_id(i),
            params,
            self.nx,
            self.ny,
            self.dx_mm,
            seed,
            self.duration_ms,
        )
    }

    /// Simulates, senses and reduces episode `i`.
    pub fn sample(&self, i: usize, params: &ModelParams, array: &ElectrodeArray, noise: &NoiseSpec) -> Result<EpisodeSample> {
        let ep = self.simulate(i, params)?;
        let rec = forward_egm(ep.id(), &ep.vm, array, noise, self.episode_seed(i) ^ 0xE6)?;
        prepare_episode(&ep, rec, self.grid_cells)
    }
}

/// Episode-level assignment to train/validation/test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub excluded: Vec<String>,
    pub train_stride: usize,
    pub eval_stride: usize,
}

impl DatasetSplit {
    /// Deterministic 70/15/15 split; validation and test sizes are floored.
    pub fn new(ids: &[String], seed: u64) -> Result<Self> {
        let unique: BTreeSet<&String> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(DeapError::Precondition("duplicate episode ids".into()));
        }
        if ids.len() < MIN_EPISODES {
            return Err(DeapError::TooFewEpisodes {
                found: ids.len(),
                required: MIN_EPISODES,
            });
        }
        let mut order: Vec<String> = unique.into_iter().cloned().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = order.len();
        let n_val = (n as f64 * VAL_FRACTION).floor() as usize;
        let n_test = (n as f64 * TEST_FRACTION).floor() as usize;
        let test = order.split_off(n - n_test);
        let val = order.split_off(n - n_test - n_val);
        let mut split = DatasetSplit {
            seed,
            train: order,
            val,
            test,
            excluded: Vec::new(),
            train_stride: TRAIN_STRIDE,
            eval_stride: EVAL_STRIDE,
        };
        split.train.sort();
        split.val.sort();
        split.test.sort();
        Ok(split)
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .all(|id| seen.insert(id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Val,
    Test,
}

/// Position of one window: episode index into [`Dataset::episodes`] and the
/// first sample of the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub episode: usize,
    pub start: usize,
    /// Present the window reflected about the ROI's vertical axis.
    pub mirrored: bool,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: DatasetSplit,
    pub episodes: Vec<EpisodeSample>,
    pub normalization: Normalization,
    pub window: usize,
    /// Per episode: channel permutation realising the left-right reflection
    /// of the tissue, if the array is symmetric under it.
    pub mirrors: Vec<Option<Vec<usize>>>,
}

/// Channel permutation induced by reflecting the tissue about the ROI's
/// vertical centre line, or `None` if the electrodes do not map onto each
/// other.
pub fn mirror_permutation(positions: &[[f64; 2]], roi: &GridSpec) -> Option<Vec<usize>> {
    let axis = 0.5 * (roi.cell_center(0, 0)[0] + roi.cell_center(0, roi.nx - 1)[0]);
    positions
        .iter()
        .map(|p| {
            let m = [2.0 * axis - p[0], p[1]];
            positions
                .iter()
                .position(|q| (q[0] - m[0]).hypot(q[1] - m[1]) < 1e-6)
        })
        .collect()
}

/// Builds a dataset from reduced episodes.
///
/// Only episodes labelled fibrillation are kept; the rest are listed in
/// `split.excluded`. Normalisation statistics come from the training
/// episodes only.
pub fn build_dataset(samples: Vec<EpisodeSample>, split_seed: u64, window: usize) -> Result<Dataset> {
    let mut excluded = Vec::new();
    let mut kept = Vec::new();
    for s in samples {
        if s.label == EpisodeLabel::Fibrillation {
            kept.push(s);
        } else {
            excluded.push(s.id.clone());
        }
    }
    let ids: Vec<String> = kept.iter().map(|s| s.id.clone()).collect();
    let mut split = DatasetSplit::new(&ids, split_seed)?;
    split.excluded = excluded;
    kept.sort_by(|a, b| a.id.cmp(&b.id));
    let n_channels = kept[0].recording.n_channels();
    for s in &kept {
        if s.recording.n_channels() != n_channels {
            return Err(DeapError::ShapeMismatch {
                expected: format!("{n_channels} channels"),
                got: format!("{} in {}", s.recording.n_channels(), s.id),
            });
        }
        if s.recording.n_samples() < window {
            return Err(DeapError::Precondition(format!(
                "episode {} has {} samples, shorter than the {window}-sample window",
                s.id,
                s.recording.n_samples()
            )));
        }
    }
    let mut sum = vec![0.0; n_channels];
    let mut sum2 = vec![0.0; n_channels];
    let mut count = 0usize;
    for s in kept.iter().filter(|s| split.train.contains(&s.id)) {
        for (c, trace) in s.recording.traces.iter().enumerate() {
            for &v in trace {
                sum[c] += v as f64;
                sum2[c] += (v as f64) * (v as f64);
            }
        }
        count += s.recording.n_samples();
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sum2
        .iter()
        .zip(&mean)
        .map(|(s2, m)| {
            let var = (s2 / n - m * m).max(0.0);
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mirrors = kept
        .iter()
        .map(|s| mirror_permutation(&s.recording.meta.array.posed_positions(), &s.roi()))
        .collect();
    Ok(Dataset {
        split,
        episodes: kept,
        normalization: Normalization { mean, std },
        window,
        mirrors,
    })
}

impl Dataset {
    pub fn ids(&self, subset: Subset) -> &[String] {
        match subset {
            Subset::Train => &self.split.train,
            Subset::Val => &self.split.val,
            Subset::Test => &self.split.test,
        }
    }

    pub fn episode(&self, id: &str) -> Option<&EpisodeSample> {
        self.episodes.iter().find(|e| e.id == id)
    }

    /// Window positions of a subset at the subset's stride, in episode-id order.
    pub fn windows(&self, subset: Subset) -> Vec<WindowRef> {
        let stride = match subset {
            Subset::Train => self.split.train_stride,
            _ => self.split.eval_stride,
        };
        let ids = self.ids(subset);
        let mut out = Vec::new();
        for (e, ep) in self.episodes.iter().enumerate() {
            if !ids.contains(&ep.id) {
                continue;
            }
            let last = ep.recording.n_samples() - self.window;
            out.extend((0..=last).step_by(stride).map(|start| WindowRef {
                episode: e,
                start,
                mirrored: false,
            }));
        }
        out
    }

    /// Fills normalised inputs `[batch, channels, window]` and targets
    /// `[batch, G, G]` for the given windows. The target is the frame at the
    /// window centre.
    ///
    /// Panics if a mirrored window refers to an episode without a mirror
    /// permutation.
    pub fn fill_batch(&self, refs: &[WindowRef], x: &mut Vec<f64>, y: &mut Vec<f64>) {
        x.clear();
        y.clear();
        for r in refs {
            let ep = &self.episodes[r.episode];
            let traces = &ep.recording.traces;
            let perm = r
                .mirrored
                .then(|| self.mirrors[r.episode].as_ref().expect("episode has a mirror"));
            for c in 0..traces.len() {
                let trace = &traces[perm.map_or(c, |p| p[c])];
                let (m, s) = (self.normalization.mean[c], self.normalization.std[c]);
                x.extend(trace[r.start..r.start + self.window].iter().map(|&v| (v as f64 - m) / s));
            }
            let frame = ep.target.frame(r.start + self.window / 2);
            match perm {
                None => y.extend(frame.iter().map(|&v| v as f64)),
                Some(_) => {
                    let nx = ep.target.grid.nx;
                    for row in frame.chunks(nx) {
                        y.extend(row.iter().rev().map(|&v| v as f64));
                    }
                }
            }
        }
    }
}
