//! Spatial grids and membrane-potential movies.
//!
//! All geometry is expressed in a tissue frame measured in millimetres. A
//! [`GridSpec`] maps cell indices to that frame, so movies on the simulation
//! grid and on the smaller reconstruction grid can be compared directly.

use serde::{Deserialize, Serialize};

use crate::error::{DeapError, Result};

/// Regular square-cell grid placed in the tissue frame.
///
/// Cell `(row, col)` has its centre at `origin_mm + (col, row) * dx_mm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub dx_mm: f64,
    pub origin_mm: [f64; 2],
}

impl GridSpec {
    /// Grid whose centre coincides with the tissue-frame origin.
    pub fn centered(nx: usize, ny: usize, dx_mm: f64) -> Self {
        GridSpec {
            nx,
            ny,
            dx_mm,
            origin_mm: [
                -0.5 * (nx as f64 - 1.0) * dx_mm,
                -0.5 * (ny as f64 - 1.0) * dx_mm,
            ],
        }
    }

    /// `g x g` grid tiling the square of side `side_mm` centred on `center_mm`.
    pub fn square(center_mm: [f64; 2], side_mm: f64, g: usize) -> Self {
        let dx = side_mm / g as f64;
        GridSpec {
            nx: g,
            ny: g,
            dx_mm: dx,
            origin_mm: [
                center_mm[0] - 0.5 * side_mm + 0.5 * dx,
                center_mm[1] - 0.5 * side_mm + 0.5 * dx,
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.nx + col
    }

    #[inline]
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin_mm[0] + col as f64 * self.dx_mm,
            self.origin_mm[1] + row as f64 * self.dx_mm,
        ]
    }

    /// Continuous `(row, col)` coordinates of a tissue-frame point.
    #[inline]
    pub fn to_grid(&self, p: [f64; 2]) -> (f64, f64) {
        (
            (p[1] - self.origin_mm[1]) / self.dx_mm,
            (p[0] - self.origin_mm[0]) / self.dx_mm,
        )
    }

    #[inline]
    pub fn to_tissue(&self, row: f64, col: f64) -> [f64; 2] {
        [
            self.origin_mm[0] + col * self.dx_mm,
            self.origin_mm[1] + row * self.dx_mm,
        ]
    }

    /// Outer edges of the sheet as `([x_min, y_min], [x_max, y_max])`.
    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let h = 0.5 * self.dx_mm;
        (
            [self.origin_mm[0] - h, self.origin_mm[1] - h],
            [
                self.origin_mm[0] + (self.nx as f64 - 0.5) * self.dx_mm,
                self.origin_mm[1] + (self.ny as f64 - 0.5) * self.dx_mm,
            ],
        )
    }

    /// Cells whose centre lies within `radius_mm` of `center_mm`.
    pub fn disc_mask(&self, center_mm: [f64; 2], radius_mm: f64) -> Vec<bool> {
        let r2 = radius_mm * radius_mm;
        let mut mask = Vec::with_capacity(self.len());
        for row in 0..self.ny {
            for col in 0..self.nx {
                let c = self.cell_center(row, col);
                let d2 = (c[0] - center_mm[0]).powi(2) + (c[1] - center_mm[1]).powi(2);
                mask.push(d2 <= r2);
            }
        }
        mask
    }
}

/// Membrane-potential frames on a grid, sampled every `dt_ms`.
///
/// Values are normalized to `[0, 1]`; `NaN` marks cells where the movie is
/// undefined (outside a reconstruction footprint, for instance).
#[derive(Debug, Clone, PartialEq)]
pub struct VmMovie {
    pub grid: GridSpec,
    pub n_frames: usize,
    pub dt_ms: f64,
    /// Time of frame 0 relative to the start of the source recording.
    pub t0_ms: f64,
    pub data: Vec<f32>,
}

impl VmMovie {
    pub fn new(grid: GridSpec, n_frames: usize, dt_ms: f64, t0_ms: f64, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() * n_frames {
            return Err(DeapError::ShapeMismatch {
                expected: format!("{} values ({}x{}x{})", grid.len() * n_frames, n_frames, grid.ny, grid.nx),
                got: format!("{} values", data.len()),
            });
        }
        Ok(VmMovie {
            grid,
            n_frames,
            dt_ms,
            t0_ms,
            data,
        })
    }

    pub fn zeros(grid: GridSpec, n_frames: usize, dt_ms: f64) -> Self {
        VmMovie {
            grid,
            n_frames,
            dt_ms,
            t0_ms: 0.0,
            data: vec![0.0; grid.len() * n_frames],
        }
    }

    /// Builds a movie by evaluating `f(frame, row, col)` everywhere.
    pub fn from_fn(grid: GridSpec, n_frames: usize, dt_ms: f64, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(grid.len() * n_frames);
        for t in 0..n_frames {
            for row in 0..grid.ny {
                for col in 0..grid.nx {
                    data.push(f(t, row, col));
                }
            }
        }
        VmMovie {
            grid,
            n_frames,
            dt_ms,
            t0_ms: 0.0,
            data,
        }
    }

    #[inline]
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.grid.len();
        &self.data[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.grid.len();
        &mut self.data[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn at(&self, t: usize, row: usize, col: usize) -> f32 {
        self.data[t * self.grid.len() + self.grid.index(row, col)]
    }

    /// Time series of one cell.
    pub fn trace(&self, cell: usize) -> Vec<f64> {
        let n = self.grid.len();
        (0..self.n_frames).map(|t| self.data[t * n + cell] as f64).collect()
    }

    pub fn duration_ms(&self) -> f64 {
        self.n_frames as f64 * self.dt_ms
    }

    /// Frames `start..end` as a new movie.
    pub fn slice(&self, start: usize, end: usize) -> Result<VmMovie> {
        if start > end || end > self.n_frames {
            return Err(DeapError::Precondition(format!(
                "frame range {start}..{end} outside 0..{}",
                self.n_frames
            )));
        }
        let n = self.grid.len();
        Ok(VmMovie {
            grid: self.grid,
            n_frames: end - start,
            dt_ms: self.dt_ms,
            t0_ms: self.t0_ms + start as f64 * self.dt_ms,
            data: self.data[start * n..end * n].to_vec(),
        })
    }

    /// Bilinear sample of frame `t` at a tissue-frame point, clamped to the
    /// outermost cell centres.
    pub fn sample(&self, t: usize, p: [f64; 2]) -> f32 {
        bilinear(self.frame(t), &self.grid, p)
    }

    /// Resamples every frame onto `target` with bilinear interpolation.
    pub fn resample(&self, target: &GridSpec) -> VmMovie {
        let taps = bilinear_taps(&self.grid, target);
        let mut data = Vec::with_capacity(target.len() * self.n_frames);
        for t in 0..self.n_frames {
            let frame = self.frame(t);
            data.extend(taps.iter().map(|tap| tap.apply(frame)));
        }
        VmMovie {
            grid: *target,
            n_frames: self.n_frames,
            dt_ms: self.dt_ms,
            t0_ms: self.t0_ms,
            data,
        }
    }

    /// Sets every cell outside `mask` to `NaN` in all frames.
    pub fn apply_mask(&mut self, mask: &[bool]) {
        let n = self.grid.len();
        for frame in self.data.chunks_mut(n) {
            for (v, &m) in frame.iter_mut().zip(mask) {
                if !m {
                    *v = f32::NAN;
                }
            }
        }
    }

    /// Cells that carry a finite value in every frame.
    pub fn defined_mask(&self) -> Vec<bool> {
        let n = self.grid.len();
        let mut mask = vec![true; n];
        for frame in self.data.chunks(n) {
            for (m, v) in mask.iter_mut().zip(frame) {
                *m &= v.is_finite();
            }
        }
        mask
    }
}

/// Precomputed bilinear stencil for one target cell.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearTap {
    idx: [usize; 4],
    w: [f32; 4],
}

impl BilinearTap {
    #[inline]
    pub(crate) fn apply(&self, frame: &[f32]) -> f32 {
        self.idx
            .iter()
            .zip(&self.w)
            .map(|(&i, &w)| frame[i] * w)
            .sum()
    }
}

pub(crate) fn bilinear_tap(grid: &GridSpec, p: [f64; 2]) -> BilinearTap {
    let (r, c) = grid.to_grid(p);
    let r = r.clamp(0.0, (grid.ny - 1) as f64);
    let c = c.clamp(0.0, (grid.nx - 1) as f64);
    let r0 = (r.floor() as usize).min(grid.ny.saturating_sub(2));
    let c0 = (c.floor() as usize).min(grid.nx.saturating_sub(2));
    let fr = (r - r0 as f64) as f32;
    let fc = (c - c0 as f64) as f32;
    BilinearTap {
        idx: [
            grid.index(r0, c0),
            grid.index(r0, c0 + 1),
            grid.index(r0 + 1, c0),
            grid.index(r0 + 1, c0 + 1),
        ],
        w: [
            (1.0 - fr) * (1.0 - fc),
            (1.0 - fr) * fc,
            fr * (1.0 - fc),
            fr * fc,
        ],
    }
}

pub(crate) fn bilinear_taps(source: &GridSpec, target: &GridSpec) -> Vec<BilinearTap> {
    let mut taps = Vec::with_capacity(target.len());
    for row in 0..target.ny {
        for col in 0..target.nx {
            taps.push(bilinear_tap(source, target.cell_center(row, col)));
        }
    }
    taps
}

pub fn bilinear(frame: &[f32], grid: &GridSpec, p: [f64; 2]) -> f32 {
    bilinear_tap(grid, p).apply(frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_grid_maps_origin_to_middle() {
        let g = GridSpec::centered(128, 128, 0.25);
        let (r, c) = g.to_grid([0.0, 0.0]);
        assert!((r - 63.5).abs() < 1e-12 && (c - 63.5).abs() < 1e-12);
        let (lo, hi) = g.bounds();
        assert!((lo[0] + 16.0).abs() < 1e-12 && (hi[1] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn resample_preserves_linear_ramps() {
        let g = GridSpec::centered(32, 32, 0.5);
        let movie = VmMovie::from_fn(g, 1, 1.0, |_, _, col| col as f32 / 31.0);
        let roi = GridSpec::square([1.0, -2.0], 8.0, 16);
        let out = movie.resample(&roi);
        for row in 0..16 {
            for col in 0..16 {
                let x = roi.cell_center(row, col)[0];
                let expect = (g.to_grid([x, 0.0]).1 / 31.0) as f32;
                assert!((out.at(0, row, col) - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn slice_tracks_time_origin() {
        let g = GridSpec::centered(16, 16, 1.0);
        let m = VmMovie::from_fn(g, 10, 1.0, |t, _, _| t as f32);
        let s = m.slice(3, 7).unwrap();
        assert_eq!(s.n_frames, 4);
        assert_eq!(s.t0_ms, 3.0);
        assert_eq!(s.at(0, 5, 5), 3.0);
        assert!(m.slice(5, 11).is_err());
    }
}
