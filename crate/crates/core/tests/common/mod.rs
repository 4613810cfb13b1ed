#![allow(dead_code)]

use deap_core::dataset::EpisodeSample;
use deap_core::sensing::{EgmMeta, EgmRecording, ElectrodeArray, NoiseSpec};
use deap_core::tissue::{run_episode, Episode, EpisodeLabel, ModelParams, StimulusProtocol, TissueGrid};
use deap_core::VmMovie;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N: usize = 128;
pub const DX: f64 = 0.25;

pub fn plane_wave(duration_ms: usize) -> Episode {
    let grid = TissueGrid::new(N, N, DX).unwrap();
    run_episode("plane", &StimulusProtocol::s1_plane(N, N), &ModelParams::default(), grid, 0, duration_ms).unwrap()
}

pub fn run(protocol: &StimulusProtocol, grid: TissueGrid, duration_ms: usize) -> Episode {
    run_episode("test", protocol, &ModelParams::default(), grid, 0, duration_ms).unwrap()
}

/// First upward crossing of `level` at or after frame `from`, linearly
/// interpolated, in ms from the movie start.
pub fn crossing(vm: &VmMovie, cell: usize, level: f32, from: usize) -> Option<f64> {
    let n = vm.grid.len();
    (from.max(1)..vm.n_frames).find_map(|f| {
        let a = vm.data[(f - 1) * n + cell];
        let b = vm.data[f * n + cell];
        (a < level && b >= level).then(|| (f as f64 - 1.0 + ((level - a) / (b - a)) as f64) * vm.dt_ms)
    })
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Fibrillation-labelled sample with random traces and a banded target,
/// for exercising the data and training plumbing without simulating.
pub fn synthetic_sample(id: usize, n: usize, seed: u64) -> EpisodeSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id as u64);
    let array = ElectrodeArray::pentagon();
    let roi = array.roi(32);
    let traces: Vec<Vec<f32>> = (0..array.len())
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let target = VmMovie::from_fn(roi, n, 1.0, |t, r, c| (((t + r + c) % 17) as f32) / 16.0);
    EpisodeSample {
        id: format!("s{id:02}"),
        label: EpisodeLabel::Fibrillation,
        cycle_length_ms: Some(150.0),
        recording: EgmRecording {
            meta: EgmMeta {
                episode_id: format!("s{id:02}"),
                array,
                noise: NoiseSpec::clean(),
                noise_seed: 0,
                fs_hz: 1000.0,
                n_samples: n,
            },
            traces,
        },
        target,
        mask: vec![true; roi.len()],
    }
}
