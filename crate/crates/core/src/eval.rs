//! Scoring of reconstructed movies against ground truth.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{activation_movie, detect_activations, ApTemplate};
use crate::container::save_json;
use crate::dataset::EpisodeSample;
use crate::error::{DeapError, Result};
use crate::grid::{GridSpec, VmMovie};
use crate::nn::Model;
use crate::phase::{compute_phase, dominant_track, find_singularities, phase_variance_index, PviMap, DEFAULT_PVI_RADIUS};
use crate::sensing::EgmRecording;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_MIN_CELLS: usize = 100;
const INFER_CHUNK: usize = 64;

/// Mean local SSIM over the cells of `mask`.
///
/// Local statistics use an 11×11 Gaussian window (σ = 1.5) whose weights are
/// restricted to in-mask cells and renormalised; only windows centred inside
/// the mask contribute. Dynamic range is 1.
pub fn ssim(a: &[f64], b: &[f64], nx: usize, ny: usize, mask: &[bool]) -> Result<f64> {
    let n = nx * ny;
    for (what, len) in [("a", a.len()), ("b", b.len()), ("mask", mask.len())] {
        if len != n {
            return Err(DeapError::ShapeMismatch {
                expected: format!("{n} cells"),
                got: format!("{len} in {what}"),
            });
        }
    }
    let cells = mask.iter().filter(|&&m| m).count();
    if cells < SSIM_MIN_CELLS {
        return Err(DeapError::DegenerateMask {
            cells,
            required: SSIM_MIN_CELLS,
        });
    }
    if let Some(i) = (0..n).find(|&i| mask[i] && !(a[i].is_finite() && b[i].is_finite())) {
        return Err(DeapError::Precondition(format!("non-finite value at cell {i} inside the mask")));
    }
    let half = (SSIM_WINDOW / 2) as isize;
    let kernel: Vec<f64> = (-half..=half)
        .map(|d| (-(d * d) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for row in 0..ny as isize {
        for col in 0..nx as isize {
            if !mask[row as usize * nx + col as usize] {
                continue;
            }
            let (mut sw, mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dr in -half..=half {
                let r = row + dr;
                if r < 0 || r >= ny as isize {
                    continue;
                }
                for dc in -half..=half {
                    let c = col + dc;
                    if c < 0 || c >= nx as isize {
                        continue;
                    }
                    let i = r as usize * nx + c as usize;
                    if !mask[i] {
                        continue;
                    }
                    let w = kernel[(dr + half) as usize] * kernel[(dc + half) as usize];
                    sw += w;
                    ma += w * a[i];
                    mb += w * b[i];
                    saa += w * a[i] * a[i];
                    sbb += w * b[i] * b[i];
                    sab += w * a[i] * b[i];
                }
            }
            let (ma, mb) = (ma / sw, mb / sw);
            let va = (saa / sw - ma * ma).max(0.0);
            let vb = (sbb / sw - mb * mb).max(0.0);
            let cov = sab / sw - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / cells as f64)
}

/// Sliding-window inference on the ROI grid at 1 ms stride.
///
/// Frame `k` is the estimate at sample `k + W/2`; the movie's `t0_ms` is set
/// accordingly.
pub fn infer_roi(model: &mut Model, rec: &EgmRecording) -> Result<VmMovie> {
    let w = model.config.window;
    let ch = model.config.n_channels;
    let g = model.config.grid;
    if rec.n_channels() != ch {
        return Err(DeapError::ShapeMismatch {
            expected: format!("{ch} channels"),
            got: rec.n_channels().to_string(),
        });
    }
    let n = rec.n_samples();
    if n < w {
        return Err(DeapError::Precondition(format!("recording has {n} samples, window needs {w}")));
    }
    let roi = rec.meta.array.roi(g);
    let n_frames = n - w + 1;
    let mut data = Vec::with_capacity(n_frames * g * g);
    let mut x = Vec::with_capacity(INFER_CHUNK * ch * w);
    let starts: Vec<usize> = (0..n_frames).collect();
    for chunk in starts.chunks(INFER_CHUNK) {
        x.clear();
        for &s in chunk {
            for trace in &rec.traces {
                x.extend(trace[s..s + w].iter().map(|&v| v as f64));
            }
        }
        let y = model.predict(&x, chunk.len())?;
        data.extend(y.iter().map(|&v| v as f32));
    }
    let dt = 1000.0 / rec.meta.fs_hz;
    VmMovie::new(roi, n_frames, dt, (w / 2) as f64 * dt, data)
}

/// Inference resampled onto `tissue`; cells outside the catheter footprint
/// are `NaN`.
pub fn infer_movie(model: &mut Model, rec: &EgmRecording, tissue: &GridSpec) -> Result<VmMovie> {
    let roi_movie = infer_roi(model, rec)?;
    let mut out = roi_movie.resample(tissue);
    let (c, r) = rec.meta.array.footprint();
    out.apply_mask(&tissue.disc_mask(c, r));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub rmse: f64,
    /// Mean over frames of the Pearson correlation inside the mask; frames
    /// where either map is flat are skipped.
    pub correlation: f64,
}

pub fn frame_metrics(truth: &VmMovie, est: &VmMovie, mask: &[bool]) -> Result<FrameMetrics> {
    if truth.grid != est.grid || truth.n_frames != est.n_frames {
        return Err(DeapError::ShapeMismatch {
            expected: format!("{}×{} × {} frames", truth.grid.ny, truth.grid.nx, truth.n_frames),
            got: format!("{}×{} × {} frames", est.grid.ny, est.grid.nx, est.n_frames),
        });
    }
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let m = idx.len() as f64;
    let (mut se, mut corr_sum, mut corr_n) = (0.0, 0.0, 0usize);
    for t in 0..truth.n_frames {
        let (a, b) = (truth.frame(t), est.frame(t));
        let (mut sa, mut sb) = (0.0, 0.0);
        for &i in &idx {
            let d = a[i] as f64 - b[i] as f64;
            se += d * d;
            sa += a[i] as f64;
            sb += b[i] as f64;
        }
        let (ma, mb) = (sa / m, sb / m);
        let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let (x, y) = (a[i] as f64 - ma, b[i] as f64 - mb);
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
        if saa > 1e-12 && sbb > 1e-12 {
            corr_sum += sab / (saa * sbb).sqrt();
            corr_n += 1;
        }
    }
    Ok(FrameMetrics {
        rmse: (se / (m * truth.n_frames as f64)).sqrt(),
        correlation: if corr_n > 0 { corr_sum / corr_n as f64 } else { f64::NAN },
    })
}

/// PVI map of a movie restricted to `mask`, with undefined cells inside the
/// mask set to 0 (no measurable phase dispersion).
pub fn pvi_of(movie: &VmMovie, mask: &[bool], radius: usize) -> Result<PviMap> {
    let phase = compute_phase(movie, Some(mask))?;
    let mut pvi = phase_variance_index(&phase, radius, None)?;
    for (v, &m) in pvi.values.iter_mut().zip(mask) {
        if m && !v.is_finite() {
            *v = 0.0;
        }
    }
    Ok(pvi)
}

fn dominant_position(movie: &VmMovie, mask: &[bool]) -> Result<Option<(f64, f64)>> {
    let phase = compute_phase(movie, Some(mask))?;
    let (_, tracks) = find_singularities(&phase);
    Ok(dominant_track(&tracks).map(|t| t.mean_position()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateScore {
    pub pvi_ssim: f64,
    pub rmse: f64,
    pub correlation: f64,
    /// Distance in ROI cells between the dominant phase-singularity tracks of
    /// estimate and truth; `None` if either has no track.
    pub ps_error_cells: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub id: String,
    pub cycle_length_ms: Option<f64>,
    pub n_frames: usize,
    pub mask_cells: usize,
    pub deap: Option<EstimateScore>,
    pub baseline: Option<EstimateScore>,
    pub error: Option<String>,
}

impl EpisodeRow {
    pub fn failed(id: &str, cause: String) -> Self {
        EpisodeRow {
            id: id.to_string(),
            cycle_length_ms: None,
            n_frames: 0,
            mask_cells: 0,
            deap: None,
            baseline: None,
            error: Some(cause),
        }
    }

    pub fn deap_wins(&self) -> Option<bool> {
        Some(self.deap.as_ref()?.pvi_ssim > self.baseline.as_ref()?.pvi_ssim)
    }
}

/// Scores two estimates of the same frames against the truth, all on one
/// grid and mask.
pub fn score_movies(id: &str, truth: &VmMovie, deap: &VmMovie, baseline: &VmMovie, mask: &[bool], radius: usize) -> Result<EpisodeRow> {
    let truth_pvi = pvi_of(truth, mask, radius)?;
    let truth_ps = dominant_position(truth, mask)?;
    let g = truth.grid;
    let score = |est: &VmMovie| -> Result<EstimateScore> {
        let pvi = pvi_of(est, mask, radius)?;
        let fm = frame_metrics(truth, est, mask)?;
        let ps = dominant_position(est, mask)?;
        Ok(EstimateScore {
            pvi_ssim: ssim(&pvi.values, &truth_pvi.values, g.nx, g.ny, mask)?,
            rmse: fm.rmse,
            correlation: fm.correlation,
            ps_error_cells: match (ps, truth_ps) {
                (Some(a), Some(b)) => Some((a.0 - b.0).hypot(a.1 - b.1)),
                _ => None,
            },
        })
    };
    Ok(EpisodeRow {
        id: id.to_string(),
        cycle_length_ms: None,
        n_frames: truth.n_frames,
        mask_cells: mask.iter().filter(|&&m| m).count(),
        deap: Some(score(deap)?),
        baseline: Some(score(baseline)?),
        error: None,
    })
}

/// How the two estimates are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    /// Model inference and the activation-map baseline.
    Pipelines,
    /// Ground truth substituted for both estimates.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pvi_radius: usize,
    pub template: ApTemplate,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pvi_radius: DEFAULT_PVI_RADIUS,
            template: ApTemplate::default(),
        }
    }
}

/// Runs both pipelines on one held-out episode.
pub fn compare_episode(model: &mut Model, sample: &EpisodeSample, config: &EvalConfig, source: EstimateSource) -> Result<EpisodeRow> {
    let w = model.config.window;
    let n = sample.recording.n_samples();
    if n < w {
        return Err(DeapError::Precondition(format!("episode {} shorter than one window", sample.id)));
    }
    let first = w / 2;
    let n_frames = n - w + 1;
    if sample.target.grid.nx != model.config.grid {
        return Err(DeapError::ShapeMismatch {
            expected: format!("{} ROI cells", model.config.grid),
            got: sample.target.grid.nx.to_string(),
        });
    }
    let truth = sample.target.slice(first, first + n_frames)?;
    let (deap, baseline) = match source {
        EstimateSource::Truth => (truth.clone(), truth.clone()),
        EstimateSource::Pipelines => {
            let deap = infer_roi(model, &sample.recording)?;
            let field = detect_activations(&sample.recording)?;
            let dt = 1000.0 / sample.recording.meta.fs_hz;
            let base = activation_movie(&field, &config.template, &truth.grid, first as f64 * dt, dt, n_frames)?;
            (deap, base)
        }
    };
    let mut row = score_movies(&sample.id, &truth, &deap, &baseline, &sample.mask, config.pvi_radius)?;
    row.cycle_length_ms = sample.cycle_length_ms;
    Ok(row)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    /// Linear-interpolation quartiles; `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Quartiles {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub n_rows: usize,
    pub n_failed: usize,
    pub mean_ssim_deap: f64,
    pub mean_ssim_baseline: f64,
    pub win_rate: f64,
    pub deap_wins_all: bool,
    pub quartiles_deap: Option<Quartiles>,
    pub quartiles_baseline: Option<Quartiles>,
    pub mean_rmse_deap: f64,
    pub mean_rmse_baseline: f64,
    pub mean_corr_deap: f64,
    pub mean_corr_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub source: EstimateSource,
    pub pvi_radius: usize,
    pub rows: Vec<EpisodeRow>,
    pub summary: ReportSummary,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl ComparisonReport {
    pub fn from_rows(rows: Vec<EpisodeRow>, source: EstimateSource, pvi_radius: usize) -> Self {
        let ok: Vec<&EpisodeRow> = rows.iter().filter(|r| r.deap.is_some() && r.baseline.is_some()).collect();
        let pick = |f: &dyn Fn(&EpisodeRow) -> f64| -> Vec<f64> { ok.iter().map(|r| f(r)).collect() };
        let sd = pick(&|r| r.deap.as_ref().unwrap().pvi_ssim);
        let sb = pick(&|r| r.baseline.as_ref().unwrap().pvi_ssim);
        let wins = ok.iter().filter(|r| r.deap_wins() == Some(true)).count();
        let finite = |v: Vec<f64>| -> Vec<f64> { v.into_iter().filter(|x| x.is_finite()).collect() };
        let summary = ReportSummary {
            n_rows: rows.len(),
            n_failed: rows.len() - ok.len(),
            mean_ssim_deap: mean(&sd),
            mean_ssim_baseline: mean(&sb),
            win_rate: if ok.is_empty() { f64::NAN } else { wins as f64 / ok.len() as f64 },
            deap_wins_all: !ok.is_empty() && wins == ok.len(),
            quartiles_deap: Quartiles::of(&sd),
            quartiles_baseline: Quartiles::of(&sb),
            mean_rmse_deap: mean(&pick(&|r| r.deap.as_ref().unwrap().rmse)),
            mean_rmse_baseline: mean(&pick(&|r| r.baseline.as_ref().unwrap().rmse)),
            mean_corr_deap: mean(&finite(pick(&|r| r.deap.as_ref().unwrap().correlation))),
            mean_corr_baseline: mean(&finite(pick(&|r| r.baseline.as_ref().unwrap().correlation))),
        };
        ComparisonReport {
            source,
            pvi_radius,
            rows,
            summary,
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }

    /// One row per episode; empty fields for failed rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "id",
            "ssim_deap",
            "ssim_baseline",
            "rmse_deap",
            "rmse_baseline",
            "corr_deap",
            "corr_baseline",
            "ps_error_deap",
            "ps_error_baseline",
            "cycle_length_ms",
            "error",
        ])?;
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            let d = r.deap.as_ref();
            let b = r.baseline.as_ref();
            wr.write_record([
                r.id.clone(),
                f(d.map(|s| s.pvi_ssim)),
                f(b.map(|s| s.pvi_ssim)),
                f(d.map(|s| s.rmse)),
                f(b.map(|s| s.rmse)),
                f(d.map(|s| s.correlation)),
                f(b.map(|s| s.correlation)),
                f(d.and_then(|s| s.ps_error_cells)),
                f(b.and_then(|s| s.ps_error_cells)),
                f(r.cycle_length_ms),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        wr.flush().map_err(|e| DeapError::io("<csv>", e))?;
        Ok(())
    }
}

/// Scores every episode, in parallel over episodes. Failures become rows
/// with a cause; rows keep the input order.
pub fn compare_pipelines(model: &Model, samples: &[EpisodeSample], config: &EvalConfig, source: EstimateSource) -> ComparisonReport {
    let rows: Vec<EpisodeRow> = samples
        .par_iter()
        .map(|s| {
            let mut m = model.clone();
            compare_episode(&mut m, s, config, source).unwrap_or_else(|e| EpisodeRow::failed(&s.id, e.to_string()))
        })
        .collect();
    ComparisonReport::from_rows(rows, source, config.pvi_radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(nx: usize, ny: usize) -> Vec<f64> {
        (0..nx * ny)
            .map(|i| ((i % nx) as f64 / nx as f64 + 0.3 * ((i / nx) as f64 * 0.4).sin()).clamp(0.0, 1.0))
            .collect()
    }

    #[test]
    fn identity_and_anticorrelation() {
        let (nx, ny) = (16, 16);
        let a = ramp(nx, ny);
        let mask = vec![true; nx * ny];
        assert!((ssim(&a, &a, nx, ny, &mask).unwrap() - 1.0).abs() < 1e-12);
        let inv: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&a, &inv, nx, ny, &mask).unwrap() < 0.0);
    }

    #[test]
    fn degenerate_mask_is_rejected() {
        let a = ramp(16, 16);
        let mut mask = vec![false; 256];
        mask[..99].iter_mut().for_each(|m| *m = true);
        assert!(matches!(
            ssim(&a, &a, 16, 16, &mask),
            Err(DeapError::DegenerateMask { cells: 99, required: 100 })
        ));
    }

    #[test]
    fn quartiles_interpolate() {
        let q = Quartiles::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((q.min, q.q1, q.median, q.q3, q.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        assert!(Quartiles::of(&[]).is_none());
    }

    /// Two-pass oracle: explicit window lists and centred moments.
    fn ssim_oracle(a: &[f64], b: &[f64], nx: usize, ny: usize, mask: &[bool]) -> f64 {
        let mut vals = Vec::new();
        for r in 0..ny as i64 {
            for c in 0..nx as i64 {
                if !mask[(r * nx as i64 + c) as usize] {
                    continue;
                }
                let mut cells = Vec::new();
                for rr in (r - 5).max(0)..=(r + 5).min(ny as i64 - 1) {
                    for cc in (c - 5).max(0)..=(c + 5).min(nx as i64 - 1) {
                        let i = (rr * nx as i64 + cc) as usize;
                        if mask[i] {
                            let d2 = ((rr - r).pow(2) + (cc - c).pow(2)) as f64;
                            cells.push((i, (-d2 / 4.5).exp()));
                        }
                    }
                }
                let sw: f64 = cells.iter().map(|c| c.1).sum();
                let ma = cells.iter().map(|&(i, w)| w * a[i]).sum::<f64>() / sw;
                let mb = cells.iter().map(|&(i, w)| w * b[i]).sum::<f64>() / sw;
                let va = cells.iter().map(|&(i, w)| w * (a[i] - ma).powi(2)).sum::<f64>() / sw;
                let vb = cells.iter().map(|&(i, w)| w * (b[i] - mb).powi(2)).sum::<f64>() / sw;
                let cv = cells.iter().map(|&(i, w)| w * (a[i] - ma) * (b[i] - mb)).sum::<f64>() / sw;
                let (c1, c2) = (1e-4, 9e-4);
                vals.push(((2.0 * ma * mb + c1) * (2.0 * cv + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn matches_two_pass_oracle() {
        let (nx, ny) = (19, 15);
        let a: Vec<f64> = (0..nx * ny).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let b: Vec<f64> = (0..nx * ny).map(|i| 0.5 * a[i] + ((i * 53) % 97) as f64 / 194.0).collect();
        let mask: Vec<bool> = (0..nx * ny).map(|i| (i % nx) as f64 + 0.7 * (i / nx) as f64 > 3.0).collect();
        let got = ssim(&a, &b, nx, ny, &mask).unwrap();
        assert!((got - ssim_oracle(&a, &b, nx, ny, &mask)).abs() < 1e-10, "{got}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn symmetric_and_bounded(seed in any::<u64>(), frac in 0.5f64..1.0) {
            let (nx, ny) = (14, 12);
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 11) as f64 / (1u64 << 53) as f64 };
            let a: Vec<f64> = (0..nx * ny).map(|_| next()).collect();
            let b: Vec<f64> = (0..nx * ny).map(|_| next()).collect();
            let mask: Vec<bool> = (0..nx * ny).map(|_| next() < frac).collect();
            prop_assume!(mask.iter().filter(|&&m| m).count() >= 100);
            let ab = ssim(&a, &b, nx, ny, &mask).unwrap();
            let ba = ssim(&b, &a, nx, ny, &mask).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
