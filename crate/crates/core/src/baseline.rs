//! Classical activation mapping from unipolar electrograms.
//!
//! Activations are marked at the steepest negative slope of each trace,
//! elapsed time since the last activation is interpolated between electrodes
//! with a thin-plate spline, and a stereotyped action potential turns the
//! elapsed-time map into a pseudo membrane-potential movie.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DeapError, Result};
use crate::grid::{GridSpec, VmMovie};
use crate::sensing::EgmRecording;

pub const BLANKING_MS: f64 = 50.0;
pub const THRESHOLD_FRACTION: f64 = 0.4;
/// Segment length over which per-segment slope maxima are collected before
/// taking their median.
pub const SEGMENT_MS: f64 = 500.0;
pub const SILENT_MS: f64 = 500.0;
pub const MIN_TRACE_MS: f64 = 200.0;
/// Gaussian smoothing applied before differentiation.
pub const SMOOTH_MS: f64 = 2.0;
pub const METHOD: &str = "unipolar max negative slope";

/// Per-electrode activation times plus the geometry needed to map them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationField {
    /// Activation times in ms from the start of the recording.
    pub times_ms: Vec<Vec<f64>>,
    pub blanking_ms: f64,
    pub silent: Vec<bool>,
    /// Tissue-frame electrode positions, mm.
    pub positions: Vec<[f64; 2]>,
    pub footprint_center: [f64; 2],
    pub footprint_radius: f64,
    pub method: String,
}

/// Gaussian smoothing with clamped edges.
fn smooth(x: &[f32], sigma: f64) -> Vec<f64> {
    let n = x.len() as isize;
    let half = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    (0..n)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * x[(i + k as isize - half).clamp(0, n - 1) as usize] as f64)
                .sum::<f64>()
                / norm
        })
        .collect()
}

/// Central-difference derivative with clamped edges, units per sample.
fn derivative(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| 0.5 * (x[(i + 1).min(n - 1)] - x[i.saturating_sub(1)]))
        .collect()
}

/// Median of the largest `|dφ/dt|` in consecutive segments.
fn robust_max(slope: &[f64], segment: usize) -> f64 {
    let n = slope.len();
    let n_seg = (n / segment).max(1);
    let mut maxima: Vec<f64> = (0..n_seg)
        .map(|s| {
            let start = s * segment;
            let end = if s + 1 == n_seg { n } else { start + segment };
            slope[start..end].iter().fold(0.0f64, |m, v| m.max(v.abs()))
        })
        .collect();
    maxima.sort_by(f64::total_cmp);
    let mid = maxima.len() / 2;
    if maxima.len() % 2 == 1 {
        maxima[mid]
    } else {
        0.5 * (maxima[mid - 1] + maxima[mid])
    }
}

/// Activation sample indices of one trace.
///
/// The trace is smoothed (Gaussian, σ = [`SMOOTH_MS`]) before
/// differentiation. Threshold segments start at the first sample that
/// departs from the initial value, so prepending a constant run shifts the
/// detections by exactly its length.
pub fn detect_trace(trace: &[f32], fs_hz: f64, blanking_ms: f64) -> Vec<usize> {
    if trace.len() < 3 {
        return Vec::new();
    }
    let Some(onset) = trace.iter().position(|&v| v != trace[0]) else {
        return Vec::new();
    };
    let per_ms = fs_hz / 1000.0;
    let slope = derivative(&smooth(trace, SMOOTH_MS * per_ms));
    let segment = ((SEGMENT_MS * per_ms) as usize).max(1);
    let threshold = THRESHOLD_FRACTION * robust_max(&slope[onset..], segment);
    if !(threshold > 0.0) {
        return Vec::new();
    }
    let mut candidates: Vec<usize> = (onset.max(1)..slope.len() - 1)
        .filter(|&i| -slope[i] > threshold && slope[i] < slope[i - 1] && slope[i] <= slope[i + 1])
        .collect();
    // Strongest first; ties resolved by earlier sample.
    candidates.sort_by(|&a, &b| slope[a].total_cmp(&slope[b]).then(a.cmp(&b)));
    let blank = blanking_ms * per_ms;
    let mut accepted: Vec<usize> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|&a| (a as f64 - c as f64).abs() >= blank) {
            accepted.push(c);
        }
    }
    accepted.sort_unstable();
    accepted
}

/// Detects activations on every channel of a recording.
pub fn detect_activations(rec: &EgmRecording) -> Result<ActivationField> {
    let fs = rec.meta.fs_hz;
    let len_ms = rec.n_samples() as f64 * 1000.0 / fs;
    if len_ms < MIN_TRACE_MS {
        return Err(DeapError::Precondition(format!(
            "activation detection needs >= {MIN_TRACE_MS} ms, got {len_ms}"
        )));
    }
    let times_ms: Vec<Vec<f64>> = rec
        .traces
        .iter()
        .map(|tr| {
            detect_trace(tr, fs, BLANKING_MS)
                .into_iter()
                .map(|s| s as f64 * 1000.0 / fs)
                .collect()
        })
        .collect();
    let silent = times_ms
        .iter()
        .map(|t| t.is_empty() && len_ms > SILENT_MS)
        .collect();
    let (footprint_center, footprint_radius) = rec.meta.array.footprint();
    Ok(ActivationField {
        times_ms,
        blanking_ms: BLANKING_MS,
        silent,
        positions: rec.meta.array.posed_positions(),
        footprint_center,
        footprint_radius,
        method: METHOD.to_string(),
    })
}

impl ActivationField {
    /// Elapsed time since the latest activation at or before `t_ms`, per
    /// electrode.
    pub fn elapsed_at(&self, t_ms: f64) -> Vec<Option<f64>> {
        self.times_ms
            .iter()
            .map(|times| {
                times
                    .iter()
                    .rev()
                    .find(|&&a| a <= t_ms)
                    .map(|&a| t_ms - a)
            })
            .collect()
    }

    /// Activation table as CSV rows `(electrode, time_ms)`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["electrode", "time_ms"])?;
        for (e, times) in self.times_ms.iter().enumerate() {
            for t in times {
                wr.write_record([e.to_string(), format!("{t}")])?;
            }
        }
        wr.flush().map_err(|e| DeapError::io("<csv>", e))?;
        Ok(())
    }
}

/// Thin-plate spline `f(p) = sum w_i r_i² ln r_i + c0 + c1 x + c2 y`.
#[derive(Debug, Clone)]
pub struct ThinPlateSpline {
    centers: Vec<[f64; 2]>,
    weights: Vec<f64>,
    affine: [f64; 3],
}

#[inline]
fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

impl ThinPlateSpline {
    pub fn fit(centers: &[[f64; 2]], values: &[f64]) -> Result<Self> {
        let n = centers.len();
        if n < 3 || values.len() != n {
            return Err(DeapError::InsufficientSupport { valid: n });
        }
        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        let mut b = DVector::<f64>::zeros(m);
        for i in 0..n {
            for j in 0..n {
                let r2 = (centers[i][0] - centers[j][0]).powi(2) + (centers[i][1] - centers[j][1]).powi(2);
                a[(i, j)] = tps_kernel(r2);
            }
            let row = [1.0, centers[i][0], centers[i][1]];
            for (k, v) in row.iter().enumerate() {
                a[(i, n + k)] = *v;
                a[(n + k, i)] = *v;
            }
            b[i] = values[i];
        }
        let sol = a.lu().solve(&b).ok_or(DeapError::Singular)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(DeapError::Singular);
        }
        Ok(ThinPlateSpline {
            centers: centers.to_vec(),
            weights: sol.rows(0, n).iter().copied().collect(),
            affine: [sol[n], sol[n + 1], sol[n + 2]],
        })
    }

    pub fn eval(&self, p: [f64; 2]) -> f64 {
        let mut v = self.affine[0] + self.affine[1] * p[0] + self.affine[2] * p[1];
        for (c, w) in self.centers.iter().zip(&self.weights) {
            let r2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            v += w * tps_kernel(r2);
        }
        v
    }
}

/// Convex hull (counter-clockwise, no collinear points) by monotone chain.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

pub fn in_hull(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    if hull.len() < 3 {
        return false;
    }
    (0..hull.len()).all(|i| {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= -1e-9
    })
}

/// Elapsed-time map at `t_ms` on `grid`.
///
/// Inside the convex hull of the valid electrodes the thin-plate spline is
/// used; between the hull and the footprint disc the nearest valid electrode's
/// value is copied; outside the disc the map is `NaN`. Negative spline
/// overshoot is clipped to zero.
pub fn interpolate_elapsed(field: &ActivationField, grid: &GridSpec, t_ms: f64) -> Result<Vec<f64>> {
    let elapsed = field.elapsed_at(t_ms);
    let (sites, values): (Vec<[f64; 2]>, Vec<f64>) = field
        .positions
        .iter()
        .zip(&elapsed)
        .filter_map(|(p, e)| e.map(|v| (*p, v)))
        .unzip();
    if sites.len() < 4 {
        return Err(DeapError::InsufficientSupport { valid: sites.len() });
    }
    let spline = ThinPlateSpline::fit(&sites, &values)?;
    let hull = convex_hull(&sites);
    let r2 = field.footprint_radius * field.footprint_radius;
    let c = field.footprint_center;
    let mut out = Vec::with_capacity(grid.len());
    for row in 0..grid.ny {
        for col in 0..grid.nx {
            let p = grid.cell_center(row, col);
            if (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) > r2 {
                out.push(f64::NAN);
            } else if in_hull(&hull, p) {
                out.push(spline.eval(p).max(0.0));
            } else {
                let nearest = sites
                    .iter()
                    .zip(&values)
                    .min_by(|(a, _), (b, _)| {
                        let da = (a[0] - p[0]).powi(2) + (a[1] - p[1]).powi(2);
                        let db = (b[0] - p[0]).powi(2) + (b[1] - p[1]).powi(2);
                        da.total_cmp(&db)
                    })
                    .map(|(_, v)| *v)
                    .expect("at least four sites");
                out.push(nearest);
            }
        }
    }
    Ok(out)
}

/// Stereotyped action potential indexed by elapsed time since activation:
/// peak 1.0 at activation, exponential repolarization with APD90 of
/// `apd90_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApTemplate {
    pub apd90_ms: f64,
}

impl Default for ApTemplate {
    fn default() -> Self {
        ApTemplate { apd90_ms: 120.0 }
    }
}

impl ApTemplate {
    pub fn value(&self, elapsed_ms: f64) -> f64 {
        let tau = self.apd90_ms / std::f64::consts::LN_10;
        (-elapsed_ms.max(0.0) / tau).exp()
    }
}

/// Pseudo membrane-potential movie at times `t0_ms + k * dt_ms`.
///
/// Frames without enough valid electrodes, and cells outside the footprint,
/// are 0.
pub fn activation_movie(
    field: &ActivationField,
    template: &ApTemplate,
    grid: &GridSpec,
    t0_ms: f64,
    dt_ms: f64,
    n_frames: usize,
) -> Result<VmMovie> {
    let mut data = Vec::with_capacity(grid.len() * n_frames);
    for k in 0..n_frames {
        let t = t0_ms + k as f64 * dt_ms;
        match interpolate_elapsed(field, grid, t) {
            Ok(map) => data.extend(map.iter().map(|&e| {
                if e.is_finite() {
                    template.value(e) as f32
                } else {
                    0.0
                }
            })),
            Err(DeapError::InsufficientSupport { .. }) | Err(DeapError::Singular) => {
                data.extend(std::iter::repeat_n(0.0f32, grid.len()));
            }
            Err(e) => return Err(e),
        }
    }
    let mut movie = VmMovie::new(*grid, n_frames, dt_ms, 0.0, data)?;
    movie.t0_ms = t0_ms;
    Ok(movie)
}
