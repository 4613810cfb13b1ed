//! Phase analysis of membrane-potential movies.
//!
//! Phase is the argument of the analytic signal of each mean-subtracted cell
//! trace. Phase variance is the local circular variance of phase over a disc
//! of radius `r` cells, averaged over time. Singularities are 2x2 plaquettes
//! around which the wrapped phase winds by ±2π.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{DeapError, Result};
use crate::grid::{GridSpec, VmMovie};

/// Frames at each end of a phase movie that are marked invalid.
pub const EDGE_MS: f64 = 50.0;
pub const MIN_PHASE_MS: f64 = 512.0;
pub const DEFAULT_PVI_RADIUS: usize = 3;
/// Normalized Vm level that marks activation for isochrones.
pub const ISOCHRONE_LEVEL: f32 = 0.5;
pub const TACHYCARDIA_CL_MS: f64 = 200.0;
pub const CL_PEAK_MIN: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct PhaseMovie {
    pub grid: GridSpec,
    pub n_frames: usize,
    pub dt_ms: f64,
    pub t0_ms: f64,
    /// Phase in (-π, π]; zero outside the mask.
    pub theta: Vec<f64>,
    pub mask: Vec<bool>,
    /// Valid frames are `valid.0..valid.1`.
    pub valid: (usize, usize),
}

impl PhaseMovie {
    #[inline]
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.grid.len();
        &self.theta[t * n..(t + 1) * n]
    }

    /// Builds a phase movie directly from phase values, with every frame valid.
    pub fn from_phases(grid: GridSpec, n_frames: usize, theta: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if theta.len() != grid.len() * n_frames || mask.len() != grid.len() {
            return Err(DeapError::ShapeMismatch {
                expected: format!("{} phases and {} mask cells", grid.len() * n_frames, grid.len()),
                got: format!("{} and {}", theta.len(), mask.len()),
            });
        }
        Ok(PhaseMovie {
            grid,
            n_frames,
            dt_ms: 1.0,
            t0_ms: 0.0,
            theta,
            mask,
            valid: (0, n_frames),
        })
    }
}

/// Wraps an angle into (-π, π].
#[inline]
pub fn wrap(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Imaginary part of the analytic signal of a real sequence.
pub fn hilbert(x: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    // One-sided spectrum: keep DC and Nyquist, double positive bins.
    let half = n / 2;
    for (k, b) in buf.iter_mut().enumerate() {
        let gain = if k == 0 || (n % 2 == 0 && k == half) {
            1.0
        } else if k <= (n - 1) / 2 {
            2.0
        } else {
            0.0
        };
        *b *= gain;
    }
    inv.process(&mut buf);
    buf.iter().map(|c| c.im / n as f64).collect()
}

/// Per-cell analytic-signal phase of a movie.
///
/// Cells outside `mask` (when given), with any non-finite sample, or with a
/// constant trace are excluded from the result mask.
pub fn compute_phase(vm: &VmMovie, mask: Option<&[bool]>) -> Result<PhaseMovie> {
    let duration = vm.n_frames as f64 * vm.dt_ms;
    if duration < MIN_PHASE_MS {
        return Err(DeapError::Precondition(format!(
            "phase analysis needs >= {MIN_PHASE_MS} ms of frames, got {duration}"
        )));
    }
    let n = vm.grid.len();
    let nf = vm.n_frames;
    let mut out_mask = vm.defined_mask();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(DeapError::ShapeMismatch {
                expected: format!("{n} mask cells"),
                got: m.len().to_string(),
            });
        }
        for (o, &mi) in out_mask.iter_mut().zip(m) {
            *o &= mi;
        }
    }
    let mut theta = vec![0.0; n * nf];
    let mut planner = FftPlanner::new();
    for cell in 0..n {
        if !out_mask[cell] {
            continue;
        }
        let mut trace = vm.trace(cell);
        let mean = trace.iter().sum::<f64>() / nf as f64;
        trace.iter_mut().for_each(|v| *v -= mean);
        let var = trace.iter().map(|v| v * v).sum::<f64>() / nf as f64;
        if var <= 1e-18 {
            out_mask[cell] = false;
            continue;
        }
        let h = hilbert(&trace, &mut planner);
        for t in 0..nf {
            theta[t * n + cell] = wrap(h[t].atan2(trace[t]));
        }
    }
    let edge = (EDGE_MS / vm.dt_ms).round() as usize;
    Ok(PhaseMovie {
        grid: vm.grid,
        n_frames: nf,
        dt_ms: vm.dt_ms,
        t0_ms: vm.t0_ms,
        theta,
        mask: out_mask,
        valid: (edge.min(nf), nf.saturating_sub(edge)),
    })
}

/// Offsets `(drow, dcol)` of the disc of radius `r` cells, centre included.
pub fn disc_offsets(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    let mut v = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            if dr * dr + dc * dc <= r * r {
                v.push((dr, dc));
            }
        }
    }
    v
}

/// Time-averaged phase variance map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PviMap {
    pub grid: GridSpec,
    pub radius_cells: usize,
    /// Frame range averaged over.
    pub window: (usize, usize),
    /// `NaN` where undefined.
    pub values: Vec<f64>,
}

impl PviMap {
    pub fn defined(&self) -> Vec<bool> {
        self.values.iter().map(|v| v.is_finite()).collect()
    }

    /// Cell of the largest defined value within `mask`.
    pub fn argmax(&self, mask: Option<&[bool]>) -> Option<(usize, usize)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.values.iter().enumerate() {
            if !v.is_finite() || mask.is_some_and(|m| !m[i]) {
                continue;
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| (i / self.grid.nx, i % self.grid.nx))
    }
}

/// Phase variance index: `1 - |mean of exp(iθ) over the disc|`, averaged over
/// `window_ms` (frame range relative to the movie start; defaults to the
/// valid span).
pub fn phase_variance_index(phase: &PhaseMovie, radius_cells: usize, window: Option<(usize, usize)>) -> Result<PviMap> {
    let (t0, t1) = window.unwrap_or(phase.valid);
    if t0 >= t1 || t1 > phase.n_frames {
        return Err(DeapError::Precondition(format!(
            "window {t0}..{t1} invalid for {} frames",
            phase.n_frames
        )));
    }
    let g = phase.grid;
    let n = g.len();
    let offsets = disc_offsets(radius_cells);
    // Neighbour lists restricted to in-mask cells.
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let (row, col) = ((i / g.nx) as isize, (i % g.nx) as isize);
            offsets
                .iter()
                .filter_map(|&(dr, dc)| {
                    let (r, c) = (row + dr, col + dc);
                    if r < 0 || c < 0 || r >= g.ny as isize || c >= g.nx as isize {
                        return None;
                    }
                    let j = r as usize * g.nx + c as usize;
                    phase.mask[j].then_some(j)
                })
                .collect()
        })
        .collect();

    // Unit phasors once per frame, then the disc sums.
    let mut acc = vec![0.0; n];
    let mut cos = vec![0.0; n];
    let mut sin = vec![0.0; n];
    for t in t0..t1 {
        let frame = phase.frame(t);
        for i in 0..n {
            let (s, c) = frame[i].sin_cos();
            cos[i] = c;
            sin[i] = s;
        }
        for (i, nb) in neighbours.iter().enumerate() {
            if nb.is_empty() {
                continue;
            }
            let (mut sc, mut ss) = (0.0, 0.0);
            for &j in nb {
                sc += cos[j];
                ss += sin[j];
            }
            let m = nb.len() as f64;
            let r = (sc * sc + ss * ss).sqrt() / m;
            acc[i] += (1.0 - r).clamp(0.0, 1.0);
        }
    }
    let frames = (t1 - t0) as f64;
    let values = acc
        .iter()
        .zip(&neighbours)
        .map(|(&a, nb)| if nb.is_empty() { f64::NAN } else { a / frames })
        .collect();
    Ok(PviMap {
        grid: g,
        radius_cells,
        window: (t0, t1),
        values,
    })
}

/// One phase singularity in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Singularity {
    pub t: usize,
    /// Plaquette centre in continuous cell coordinates.
    pub row: f64,
    pub col: f64,
    pub chirality: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsTrack {
    pub chirality: i8,
    pub points: Vec<Singularity>,
}

impl PsTrack {
    pub fn first_t(&self) -> usize {
        self.points[0].t
    }

    pub fn last_t(&self) -> usize {
        self.points[self.points.len() - 1].t
    }

    /// Lifetime in frames, inclusive of both ends.
    pub fn lifetime(&self) -> usize {
        self.last_t() - self.first_t() + 1
    }

    pub fn mean_position(&self) -> (f64, f64) {
        let n = self.points.len() as f64;
        let r = self.points.iter().map(|p| p.row).sum::<f64>() / n;
        let c = self.points.iter().map(|p| p.col).sum::<f64>() / n;
        (r, c)
    }
}

pub const PS_MAX_GAP_FRAMES: usize = 2;
pub const PS_MAX_JUMP_CELLS: f64 = 3.0;

/// Singularities of one frame of phase values.
pub fn frame_singularities(grid: &GridSpec, theta: &[f64], mask: &[bool], t: usize) -> Vec<Singularity> {
    let mut out = Vec::new();
    for row in 0..grid.ny.saturating_sub(1) {
        for col in 0..grid.nx.saturating_sub(1) {
            // Counter-clockwise loop in (x = col, y = row).
            let loop_idx = [
                grid.index(row, col),
                grid.index(row, col + 1),
                grid.index(row + 1, col + 1),
                grid.index(row + 1, col),
            ];
            if loop_idx.iter().any(|&i| !mask[i]) {
                continue;
            }
            let mut winding = 0.0;
            for k in 0..4 {
                let a = theta[loop_idx[k]];
                let b = theta[loop_idx[(k + 1) % 4]];
                winding += wrap(b - a);
            }
            if winding.abs() > PI {
                out.push(Singularity {
                    t,
                    row: row as f64 + 0.5,
                    col: col as f64 + 0.5,
                    chirality: if winding > 0.0 { 1 } else { -1 },
                });
            }
        }
    }
    out
}

/// Singularities in every valid frame, linked into tracks by greedy nearest
/// neighbour (same chirality, gap of at most 2 frames, jump of at most 3 cells).
pub fn find_singularities(phase: &PhaseMovie) -> (Vec<Vec<Singularity>>, Vec<PsTrack>) {
    let per_frame: Vec<Vec<Singularity>> = (phase.valid.0..phase.valid.1)
        .map(|t| frame_singularities(&phase.grid, phase.frame(t), &phase.mask, t))
        .collect();
    let tracks = link_tracks(&per_frame);
    (per_frame, tracks)
}

pub fn link_tracks(per_frame: &[Vec<Singularity>]) -> Vec<PsTrack> {
    let mut tracks: Vec<PsTrack> = Vec::new();
    for frame in per_frame {
        let Some(t) = frame.first().map(|s| s.t) else {
            continue;
        };
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, track) in tracks.iter().enumerate() {
            let last = track.points.last().expect("non-empty track");
            if t - last.t > PS_MAX_GAP_FRAMES + 1 {
                continue;
            }
            for (si, s) in frame.iter().enumerate() {
                if s.chirality != track.chirality {
                    continue;
                }
                let d = ((s.row - last.row).powi(2) + (s.col - last.col).powi(2)).sqrt();
                if d <= PS_MAX_JUMP_CELLS {
                    candidates.push((d, ti, si));
                }
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; tracks.len()];
        let mut ps_used = vec![false; frame.len()];
        for (_, ti, si) in candidates {
            if track_used[ti] || ps_used[si] {
                continue;
            }
            track_used[ti] = true;
            ps_used[si] = true;
            tracks[ti].points.push(frame[si]);
        }
        for (si, s) in frame.iter().enumerate() {
            if !ps_used[si] {
                tracks.push(PsTrack {
                    chirality: s.chirality,
                    points: vec![*s],
                });
            }
        }
    }
    tracks
}

/// Track with the longest lifetime.
pub fn dominant_track(tracks: &[PsTrack]) -> Option<&PsTrack> {
    tracks.iter().max_by(|a, b| {
        a.lifetime()
            .cmp(&b.lifetime())
            .then(b.first_t().cmp(&a.first_t()))
    })
}

/// Net topological charge per frame.
pub fn net_charge(per_frame: &[Vec<Singularity>]) -> Vec<i32> {
    per_frame
        .iter()
        .map(|f| f.iter().map(|s| s.chirality as i32).sum())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IsochronalMap {
    pub grid: GridSpec,
    pub window_ms: (f64, f64),
    pub step_ms: f64,
    pub level: f32,
    /// Activation time (ms from movie start) per cell, `NaN` if none.
    pub activation_ms: Vec<f64>,
    /// Band index `floor((t_act - t0) / step)`, `None` where undefined.
    pub bands: Vec<Option<u32>>,
}

/// Activation-time contour map over `[t0, t1]` (ms from the movie start).
pub fn isochronal_map(vm: &VmMovie, window_ms: (f64, f64), step_ms: f64, mask: Option<&[bool]>) -> Result<IsochronalMap> {
    let (t0, t1) = window_ms;
    if t1 - t0 < 50.0 {
        return Err(DeapError::Precondition(format!(
            "isochrone window must span >= 50 ms, got {}",
            t1 - t0
        )));
    }
    if !(step_ms > 0.0) {
        return Err(DeapError::param("step_ms", "must be > 0"));
    }
    let f0 = (t0 / vm.dt_ms).floor().max(0.0) as usize;
    let f1 = ((t1 / vm.dt_ms).ceil() as usize).min(vm.n_frames.saturating_sub(1));
    let n = vm.grid.len();
    let mut activation_ms = vec![f64::NAN; n];
    for (cell, act) in activation_ms.iter_mut().enumerate() {
        if mask.is_some_and(|m| !m[cell]) {
            continue;
        }
        for f in f0 + 1..=f1 {
            let a = vm.data[(f - 1) * n + cell];
            let b = vm.data[f * n + cell];
            if a < ISOCHRONE_LEVEL && b >= ISOCHRONE_LEVEL {
                let frac = ((ISOCHRONE_LEVEL - a) / (b - a)) as f64;
                let t = (f as f64 - 1.0 + frac) * vm.dt_ms;
                if t >= t0 && t <= t1 {
                    *act = t;
                    break;
                }
            }
        }
    }
    let bands = activation_ms
        .iter()
        .map(|&t| t.is_finite().then(|| ((t - t0) / step_ms).floor() as u32))
        .collect();
    Ok(IsochronalMap {
        grid: vm.grid,
        window_ms,
        step_ms,
        level: ISOCHRONE_LEVEL,
        activation_ms,
        bands,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum CycleClass {
    Fibrillation { cycle_length_ms: f64 },
    Tachycardia { cycle_length_ms: f64 },
    Unclassifiable,
}

impl CycleClass {
    pub fn cycle_length_ms(&self) -> Option<f64> {
        match *self {
            CycleClass::Fibrillation { cycle_length_ms } | CycleClass::Tachycardia { cycle_length_ms } => {
                Some(cycle_length_ms)
            }
            CycleClass::Unclassifiable => None,
        }
    }
}

/// Dominant cycle length of the spatial-mean signal.
///
/// Returns `None` when the normalized autocorrelation has no local maximum
/// of at least [`CL_PEAK_MIN`] after its first zero crossing.
pub fn dominant_cycle_ms(signal: &[f64], dt_ms: f64) -> Option<f64> {
    let n = signal.len();
    let mean = signal.iter().sum::<f64>() / n as f64;
    let s: Vec<f64> = signal.iter().map(|v| v - mean).collect();
    let energy: f64 = s.iter().map(|v| v * v).sum();
    if !(energy > 1e-12 * n as f64) {
        return None;
    }
    let ac: Vec<f64> = (0..n)
        .map(|lag| s[..n - lag].iter().zip(&s[lag..]).map(|(a, b)| a * b).sum::<f64>() / energy)
        .collect();
    let start = ac.iter().position(|&v| v < 0.0)?;
    (start.max(1)..n - 1)
        .find(|&l| ac[l] >= CL_PEAK_MIN && ac[l] >= ac[l - 1] && ac[l] > ac[l + 1])
        .map(|l| {
            // Parabolic refinement of the peak lag.
            let (a, b, c) = (ac[l - 1], ac[l], ac[l + 1]);
            let denom = a - 2.0 * b + c;
            let shift = if denom.abs() > 1e-15 { 0.5 * (a - c) / denom } else { 0.0 };
            (l as f64 + shift.clamp(-0.5, 0.5)) * dt_ms
        })
}

/// Classifies an episode as fibrillation (cycle length <= 200 ms) or
/// tachycardia (> 200 ms) from the spatial-mean membrane potential.
pub fn cycle_length_filter(vm: &VmMovie) -> Result<CycleClass> {
    if vm.duration_ms() < 1000.0 {
        return Err(DeapError::Precondition(format!(
            "cycle-length filter needs >= 1 s of frames, got {} ms",
            vm.duration_ms()
        )));
    }
    let n = vm.grid.len();
    let signal: Vec<f64> = vm
        .data
        .chunks(n)
        .map(|frame| {
            let (sum, count) = frame
                .iter()
                .filter(|v| v.is_finite())
                .fold((0.0, 0usize), |(s, c), &v| (s + v as f64, c + 1));
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect();
    Ok(match dominant_cycle_ms(&signal, vm.dt_ms) {
        Some(cl) if cl > TACHYCARDIA_CL_MS => CycleClass::Tachycardia { cycle_length_ms: cl },
        Some(cl) => CycleClass::Fibrillation { cycle_length_ms: cl },
        None => CycleClass::Unclassifiable,
    })
}

/// Bundle of phase products for one movie.
#[derive(Debug, Clone)]
pub struct PhaseProducts {
    pub phase: PhaseMovie,
    pub pvi: PviMap,
    pub ps_tracks: Vec<PsTrack>,
    pub isochrones: Option<IsochronalMap>,
}

pub fn analyze(vm: &VmMovie, mask: Option<&[bool]>, radius_cells: usize, isochrone_window: Option<(f64, f64)>, step_ms: f64) -> Result<PhaseProducts> {
    let phase = compute_phase(vm, mask)?;
    let pvi = phase_variance_index(&phase, radius_cells, None)?;
    let (_, ps_tracks) = find_singularities(&phase);
    let isochrones = isochrone_window
        .map(|w| isochronal_map(vm, w, step_ms, Some(&phase.mask)))
        .transpose()?;
    Ok(PhaseProducts {
        phase,
        pvi,
        ps_tracks,
        isochrones,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_phase(grid: GridSpec, n_frames: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> PhaseMovie {
        let mut theta = Vec::with_capacity(grid.len() * n_frames);
        for t in 0..n_frames {
            for r in 0..grid.ny {
                for c in 0..grid.nx {
                    theta.push(wrap(f(t, r, c)));
                }
            }
        }
        PhaseMovie::from_phases(grid, n_frames, theta, vec![true; grid.len()]).unwrap()
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap(PI), PI);
        assert_eq!(wrap(-PI), PI);
        assert!((wrap(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap(-7.0) - (-7.0 + 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn sinusoid_phase_advances_linearly() {
        let g = GridSpec::centered(1, 1, 1.0);
        let f = 5.0 / 1000.0;
        let movie = VmMovie::from_fn(g, 1000, 1.0, |t, _, _| (0.5 + 0.4 * (2.0 * PI * f * t as f64).sin()) as f32);
        let ph = compute_phase(&movie, None).unwrap();
        assert_eq!(ph.valid, (50, 950));
        let mut unwrapped = vec![ph.theta[50]];
        for t in 51..950 {
            let d = wrap(ph.theta[t] - ph.theta[t - 1]);
            unwrapped.push(unwrapped.last().unwrap() + d);
        }
        let slope = (unwrapped[unwrapped.len() - 1] - unwrapped[0]) / (unwrapped.len() - 1) as f64;
        let expect = 2.0 * PI * f;
        assert!((slope - expect).abs() / expect < 0.01, "slope {slope} vs {expect}");
    }

    #[test]
    fn constant_trace_is_masked_out() {
        let g = GridSpec::centered(2, 1, 1.0);
        let movie = VmMovie::from_fn(g, 600, 1.0, |t, _, c| if c == 0 { 0.3 } else { (t as f32 * 0.05).sin() });
        let ph = compute_phase(&movie, None).unwrap();
        assert_eq!(ph.mask, vec![false, true]);
        let short = VmMovie::zeros(g, 500, 1.0);
        assert!(compute_phase(&short, None).is_err());
    }

    #[test]
    fn uniform_phase_has_zero_variance() {
        let g = GridSpec::centered(12, 12, 1.0);
        let ph = uniform_phase(g, 20, |t, _, _| 0.3 * t as f64);
        let pvi = phase_variance_index(&ph, 3, None).unwrap();
        assert!(pvi.values.iter().all(|v| v.abs() < 1e-12));
    }

    /// Mean circular variance of n i.i.d. uniform phases, by Monte Carlo.
    fn circular_variance_oracle(n: usize, trials: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = 0.0;
        for _ in 0..trials {
            let (mut c, mut s) = (0.0, 0.0);
            for _ in 0..n {
                let th: f64 = rng.random_range(-PI..PI);
                c += th.cos();
                s += th.sin();
            }
            acc += 1.0 - (c * c + s * s).sqrt() / n as f64;
        }
        acc / trials as f64
    }

    #[test]
    fn random_phases_match_monte_carlo_band() {
        assert_eq!(disc_offsets(3).len(), 29);
        let oracle = circular_variance_oracle(29, 20_000, 11);
        assert!(oracle > 0.75 && oracle < 0.95, "oracle {oracle}");
        let g = GridSpec::centered(40, 40, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ph = uniform_phase(g, 30, |_, _, _| rng.random_range(-PI..PI));
        let pvi = phase_variance_index(&ph, 3, None).unwrap();
        // Interior cells only: full 29-cell neighbourhoods.
        let mut interior = Vec::new();
        for r in 3..37 {
            for c in 3..37 {
                interior.push(pvi.values[r * 40 + c]);
            }
        }
        let mean = interior.iter().sum::<f64>() / interior.len() as f64;
        assert!(mean > 0.75 && mean < 0.95);
        assert!((mean - oracle).abs() < 0.01, "mean {mean} vs oracle {oracle}");
    }

    #[test]
    fn synthetic_vortex_is_located() {
        let g = GridSpec::centered(32, 32, 1.0);
        let (y0, x0) = (14.3, 17.6);
        let ph = uniform_phase(g, 10, |t, r, c| (r as f64 - y0).atan2(c as f64 - x0) + 0.2 * t as f64);
        let (per_frame, tracks) = find_singularities(&ph);
        for f in &per_frame {
            assert_eq!(f.len(), 1);
            assert_eq!(f[0].chirality, 1);
            assert!((f[0].row - y0).abs() <= 1.0 && (f[0].col - x0).abs() <= 1.0);
        }
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].lifetime(), 10);
        // Mirror image winds the other way.
        let ph = uniform_phase(g, 1, |_, r, c| -(r as f64 - y0).atan2(c as f64 - x0));
        let (pf, _) = find_singularities(&ph);
        assert_eq!(pf[0][0].chirality, -1);
    }

    #[test]
    fn plane_wave_has_no_singularities() {
        let g = GridSpec::centered(24, 24, 1.0);
        let ph = uniform_phase(g, 5, |t, _, c| 0.4 * c as f64 - 0.1 * t as f64);
        let (per_frame, tracks) = find_singularities(&ph);
        assert!(per_frame.iter().all(|f| f.is_empty()));
        assert!(tracks.is_empty());
    }

    #[test]
    fn linking_respects_gap_and_jump() {
        let s = |t, row, col| Singularity {
            t,
            row,
            col,
            chirality: 1,
        };
        let frames = vec![
            vec![s(0, 5.5, 5.5)],
            vec![],
            vec![],
            vec![s(3, 6.5, 6.5)],
            vec![s(4, 12.5, 12.5)],
        ];
        let tracks = link_tracks(&frames);
        assert_eq!(tracks.len(), 2);
        assert_eq!(tracks[0].lifetime(), 4);
        let frames = vec![vec![s(0, 5.5, 5.5)], vec![], vec![], vec![], vec![s(4, 5.5, 5.5)]];
        assert_eq!(link_tracks(&frames).len(), 2);
    }

    #[test]
    fn isochrones_of_simultaneous_activation_form_one_band() {
        let g = GridSpec::centered(16, 16, 1.0);
        let vm = VmMovie::from_fn(g, 200, 1.0, |t, _, _| if t >= 60 { 1.0 } else { 0.0 });
        let iso = isochronal_map(&vm, (20.0, 120.0), 10.0, None).unwrap();
        let bands: std::collections::BTreeSet<_> = iso.bands.iter().flatten().collect();
        assert_eq!(bands.len(), 1);
        assert!(iso.activation_ms.iter().all(|&t| (t - 59.5).abs() < 1e-9));
        assert!(isochronal_map(&vm, (20.0, 60.0), 10.0, None).is_err());
    }

    fn paced_movie(cycle: f64, frames: usize) -> VmMovie {
        let g = GridSpec::centered(4, 4, 1.0);
        VmMovie::from_fn(g, frames, 1.0, |t, _, c| {
            let phase = (t as f64 - 2.0 * c as f64).rem_euclid(cycle);
            (-phase / 40.0).exp() as f32
        })
    }

    #[test]
    fn cycle_length_rule() {
        match cycle_length_filter(&paced_movie(250.0, 1500)).unwrap() {
            CycleClass::Tachycardia { cycle_length_ms } => assert!((cycle_length_ms - 250.0).abs() < 2.0),
            other => panic!("{other:?}"),
        }
        match cycle_length_filter(&paced_movie(140.0, 1500)).unwrap() {
            CycleClass::Fibrillation { cycle_length_ms } => assert!((cycle_length_ms - 140.0).abs() < 2.0),
            other => panic!("{other:?}"),
        }
        let flat = VmMovie::zeros(GridSpec::centered(4, 4, 1.0), 1000, 1.0);
        assert_eq!(cycle_length_filter(&flat).unwrap(), CycleClass::Unclassifiable);
        assert!(cycle_length_filter(&VmMovie::zeros(GridSpec::centered(4, 4, 1.0), 999, 1.0)).is_err());
    }

    #[test]
    fn time_dilation_doubles_cycle_length() {
        let base = paced_movie(120.0, 1200);
        let slow = paced_movie(240.0, 2400);
        let a = cycle_length_filter(&base).unwrap().cycle_length_ms().unwrap();
        let b = cycle_length_filter(&slow).unwrap().cycle_length_ms().unwrap();
        assert!((b / a - 2.0).abs() < 0.1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn pvi_is_bounded_and_offset_invariant(seed in any::<u64>(), offset in -10.0f64..10.0) {
            let g = GridSpec::centered(10, 10, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<f64> = (0..g.len() * 6).map(|_| rng.random_range(-PI..PI)).collect();
            let mask: Vec<bool> = (0..g.len()).map(|_| rng.random_bool(0.9)).collect();
            let a = PhaseMovie::from_phases(g, 6, raw.clone(), mask.clone()).unwrap();
            let b = PhaseMovie::from_phases(g, 6, raw.iter().map(|t| t + offset).collect(), mask).unwrap();
            let pa = phase_variance_index(&a, 2, None).unwrap();
            let pb = phase_variance_index(&b, 2, None).unwrap();
            for (x, y) in pa.values.iter().zip(&pb.values) {
                if x.is_finite() {
                    prop_assert!((0.0..=1.0).contains(x));
                    prop_assert!((x - y).abs() < 1e-12);
                } else {
                    prop_assert!(y.is_nan());
                }
            }
        }

        #[test]
        fn pvi_rotates_with_the_movie(seed in any::<u64>()) {
            let n = 12;
            let g = GridSpec::centered(n, n, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<f64> = (0..g.len() * 4).map(|_| rng.random_range(-PI..PI)).collect();
            // Rotate by 90°: (r, c) -> (c, n - 1 - r).
            let mut rot = vec![0.0; raw.len()];
            for t in 0..4 {
                for r in 0..n {
                    for c in 0..n {
                        rot[t * n * n + c * n + (n - 1 - r)] = raw[t * n * n + r * n + c];
                    }
                }
            }
            let a = phase_variance_index(&PhaseMovie::from_phases(g, 4, raw, vec![true; n * n]).unwrap(), 3, None).unwrap();
            let b = phase_variance_index(&PhaseMovie::from_phases(g, 4, rot, vec![true; n * n]).unwrap(), 3, None).unwrap();
            for r in 0..n {
                for c in 0..n {
                    prop_assert!((a.values[r * n + c] - b.values[c * n + (n - 1 - r)]).abs() < 1e-12);
                }
            }
        }
    }
}
