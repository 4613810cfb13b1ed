//! Aliev–Panfilov excitable sheet used as the ground-truth generator.
//!
//! The sheet is integrated with explicit Euler and a five-point flux
//! discretization of `div(D grad u)` with no-flux boundaries. Stimuli clamp
//! `u` from below inside a region for their duration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, FrameHeader};
use crate::error::{DeapError, Result};
use crate::grid::{GridSpec, VmMovie};
use crate::phase::{self, CycleClass};

/// Bounds every accepted step must respect.
pub const U_MIN: f64 = -0.1;
pub const U_MAX: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub k: f64,
    pub a: f64,
    pub eps0: f64,
    pub mu1: f64,
    pub mu2: f64,
    /// Baseline diffusivity in mm² per dimensionless time unit.
    pub d0: f64,
    pub time_scale_ms: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            k: 8.0,
            a: 0.15,
            eps0: 0.002,
            mu1: 0.2,
            mu2: 0.3,
            d0: 0.1,
            time_scale_ms: 4.0,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("eps0", self.eps0),
            ("mu1", self.mu1),
            ("mu2", self.mu2),
            ("d0", self.d0),
            ("time_scale_ms", self.time_scale_ms),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(DeapError::param(field, format!("must be finite and > 0, got {v}")));
            }
        }
        if !(self.a > 0.0 && self.a < 0.5) {
            return Err(DeapError::param("a", format!("must lie in (0, 0.5), got {}", self.a)));
        }
        Ok(())
    }

    /// Largest admissible dimensionless time step for cell pitch `dx_mm`.
    pub fn stability_bound(&self, dx_mm: f64) -> f64 {
        0.5 * dx_mm * dx_mm / (4.0 * self.d0)
    }

    /// Number of Euler sub-steps per millisecond so that every step respects
    /// the stability bound.
    pub fn steps_per_ms(&self, dx_mm: f64) -> usize {
        let per_ms = 1.0 / (self.time_scale_ms * self.stability_bound(dx_mm));
        (per_ms.ceil() as usize).max(1)
    }
}

#[derive(Debug, Clone)]
pub struct TissueGrid {
    pub nx: usize,
    pub ny: usize,
    pub dx_mm: f64,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub diffusion: Vec<f64>,
    steps: u64,
    du: Vec<f64>,
}

impl TissueGrid {
    pub fn new(nx: usize, ny: usize, dx_mm: f64) -> Result<Self> {
        if nx < 16 || ny < 16 {
            return Err(DeapError::param("grid", format!("need nx, ny >= 16, got {nx}x{ny}")));
        }
        if !(dx_mm.is_finite() && dx_mm > 0.0) {
            return Err(DeapError::param("dx_mm", format!("must be > 0, got {dx_mm}")));
        }
        let n = nx * ny;
        Ok(TissueGrid {
            nx,
            ny,
            dx_mm,
            u: vec![0.0; n],
            w: vec![0.0; n],
            diffusion: vec![1.0; n],
            steps: 0,
            du: vec![0.0; n],
        })
    }

    pub fn with_diffusion(mut self, map: Vec<f64>) -> Result<Self> {
        if map.len() != self.nx * self.ny {
            return Err(DeapError::ShapeMismatch {
                expected: format!("{} diffusion values", self.nx * self.ny),
                got: map.len().to_string(),
            });
        }
        if let Some(bad) = map.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DeapError::param("diffusion_map", format!("value {bad} outside [0, 1]")));
        }
        self.diffusion = map;
        Ok(self)
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec::centered(self.nx, self.ny, self.dx_mm)
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Advances the sheet by one forward-Euler step of size `dt`
    /// (dimensionless time).
    pub fn step(&mut self, params: &ModelParams, dt: f64) -> Result<()> {
        let bound = params.stability_bound(self.dx_mm);
        if !(dt > 0.0 && dt <= bound) {
            return Err(DeapError::Unstable { dt, bound });
        }
        let (nx, ny) = (self.nx, self.ny);
        let scale = params.d0 / (self.dx_mm * self.dx_mm);
        let u = &self.u;
        let d = &self.diffusion;
        let du = &mut self.du;
        du.iter_mut().for_each(|v| *v = 0.0);

        // Face fluxes; boundary faces carry none.
        for row in 0..ny {
            let base = row * nx;
            for col in 0..nx - 1 {
                let i = base + col;
                let f = 0.5 * (d[i] + d[i + 1]) * (u[i + 1] - u[i]);
                du[i] += f;
                du[i + 1] -= f;
            }
        }
        for row in 0..ny - 1 {
            let base = row * nx;
            for col in 0..nx {
                let i = base + col;
                let j = i + nx;
                let f = 0.5 * (d[i] + d[j]) * (u[j] - u[i]);
                du[i] += f;
                du[j] -= f;
            }
        }

        let ModelParams {
            k, a, eps0, mu1, mu2, ..
        } = *params;
        self.steps += 1;
        for i in 0..nx * ny {
            let ui = self.u[i];
            let wi = self.w[i];
            let dudt = scale * du[i] - k * ui * (ui - a) * (ui - 1.0) - ui * wi;
            let dwdt = (eps0 + mu1 * wi / (ui + mu2)) * (-wi - k * ui * (ui - a - 1.0));
            let un = ui + dt * dudt;
            let wn = wi + dt * dwdt;
            if !(un.is_finite() && wn.is_finite()) {
                return Err(DeapError::NonFinite {
                    step: self.steps,
                    row: i / nx,
                    col: i % nx,
                });
            }
            if !(U_MIN..=U_MAX).contains(&un) || wn < 0.0 {
                let value = if wn < 0.0 { wn } else { un };
                return Err(DeapError::OutOfBounds {
                    step: self.steps,
                    row: i / nx,
                    col: i % nx,
                    value,
                });
            }
            self.u[i] = un;
            self.w[i] = wn;
        }
        Ok(())
    }

    fn clamp_region(&mut self, region: &Region, amplitude: f64) {
        let spec = self.spec();
        for row in 0..self.ny {
            for col in 0..self.nx {
                if region.contains(&spec, row, col) {
                    let i = row * self.nx + col;
                    self.u[i] = self.u[i].max(amplitude);
                }
            }
        }
    }
}

/// Set of grid cells a stimulus acts on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    /// Half-open cell rectangle.
    Rect {
        row0: usize,
        row1: usize,
        col0: usize,
        col1: usize,
    },
    /// Disc in continuous cell coordinates.
    Disc { row: f64, col: f64, radius: f64 },
}

impl Region {
    pub fn contains(&self, _spec: &GridSpec, row: usize, col: usize) -> bool {
        match *self {
            Region::Rect {
                row0,
                row1,
                col0,
                col1,
            } => (row0..row1).contains(&row) && (col0..col1).contains(&col),
            Region::Disc {
                row: r,
                col: c,
                radius,
            } => {
                let dr = row as f64 - r;
                let dc = col as f64 - c;
                dr * dr + dc * dc <= radius * radius
            }
        }
    }

    /// Applies one of the eight symmetries of a square grid (`op & 1` flips
    /// rows, `op & 2` flips columns, `op & 4` transposes).
    pub fn transform(&self, op: u8, nx: usize, ny: usize) -> Region {
        let flip = |lo: usize, hi: usize, n: usize| (n - hi, n - lo);
        match *self {
            Region::Rect {
                mut row0,
                mut row1,
                mut col0,
                mut col1,
            } => {
                if op & 1 != 0 {
                    (row0, row1) = flip(row0, row1, ny);
                }
                if op & 2 != 0 {
                    (col0, col1) = flip(col0, col1, nx);
                }
                if op & 4 != 0 {
                    std::mem::swap(&mut row0, &mut col0);
                    std::mem::swap(&mut row1, &mut col1);
                }
                Region::Rect {
                    row0,
                    row1,
                    col0,
                    col1,
                }
            }
            Region::Disc {
                mut row,
                mut col,
                radius,
            } => {
                if op & 1 != 0 {
                    row = (ny - 1) as f64 - row;
                }
                if op & 2 != 0 {
                    col = (nx - 1) as f64 - col;
                }
                if op & 4 != 0 {
                    std::mem::swap(&mut row, &mut col);
                }
                Region::Disc { row, col, radius }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StimKind {
    S1Plane,
    S2CrossField,
    Burst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StimulusEvent {
    pub onset_ms: f64,
    pub duration_ms: f64,
    pub region: Region,
    pub amplitude: f64,
    pub kind: StimKind,
}

impl StimulusEvent {
    fn active(&self, t_ms: f64) -> bool {
        t_ms >= self.onset_ms && t_ms < self.onset_ms + self.duration_ms
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StimulusProtocol {
    pub events: Vec<StimulusEvent>,
}

/// Width, in cells, of the band an S1 plane stimulus excites.
const S1_BAND: usize = 3;
const STIM_MS: f64 = 2.0;

impl StimulusProtocol {
    pub fn none() -> Self {
        StimulusProtocol::default()
    }

    fn left_band(nx: usize, ny: usize) -> Region {
        let _ = nx;
        Region::Rect {
            row0: 0,
            row1: ny,
            col0: 0,
            col1: S1_BAND,
        }
    }

    /// Single plane wave launched from the left edge at t = 0.
    pub fn s1_plane(nx: usize, ny: usize) -> Self {
        Self::paced_plane(nx, ny, f64::INFINITY, 1.0)
    }

    /// Plane waves from the left edge every `cycle_ms` until `until_ms`.
    pub fn paced_plane(nx: usize, ny: usize, cycle_ms: f64, until_ms: f64) -> Self {
        let mut events = Vec::new();
        let mut t = 0.0;
        while t < until_ms {
            events.push(StimulusEvent {
                onset_ms: t,
                duration_ms: STIM_MS,
                region: Self::left_band(nx, ny),
                amplitude: 1.0,
                kind: StimKind::S1Plane,
            });
            if !cycle_ms.is_finite() {
                break;
            }
            t += cycle_ms;
        }
        StimulusProtocol { events }
    }

    /// S1 plane wave followed by a cross-field S2 over `s2_region`.
    pub fn s1s2(nx: usize, ny: usize, s2_onset_ms: f64, s2_region: Region) -> Self {
        let mut p = Self::s1_plane(nx, ny);
        p.events.push(StimulusEvent {
            onset_ms: s2_onset_ms,
            duration_ms: STIM_MS,
            region: s2_region,
            amplitude: 1.0,
            kind: StimKind::S2CrossField,
        });
        p
    }

    /// Default cross-field protocol: S2 over the lower-left quadrant.
    pub fn s1s2_default(nx: usize, ny: usize) -> Self {
        Self::s1s2(
            nx,
            ny,
            145.0,
            Region::Rect {
                row0: 0,
                row1: ny / 2,
                col0: 0,
                col1: nx / 2,
            },
        )
    }

    /// High-frequency pacing from a small site.
    pub fn burst(site: Region, start_ms: f64, cycle_ms: f64, count: usize) -> Self {
        let events = (0..count)
            .map(|i| StimulusEvent {
                onset_ms: start_ms + i as f64 * cycle_ms,
                duration_ms: STIM_MS,
                region: site,
                amplitude: 1.0,
                kind: StimKind::Burst,
            })
            .collect();
        StimulusProtocol { events }
    }

    pub fn transform(&self, op: u8, nx: usize, ny: usize) -> Self {
        StimulusProtocol {
            events: self
                .events
                .iter()
                .map(|e| StimulusEvent {
                    region: e.region.transform(op, nx, ny),
                    ..*e
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for pair in self.events.windows(2) {
            if pair[1].onset_ms < pair[0].onset_ms {
                return Err(DeapError::param("protocol", "stimulus onsets must be non-decreasing"));
            }
        }
        for e in &self.events {
            if !(e.amplitude > 0.0 && e.amplitude <= U_MAX) {
                return Err(DeapError::param(
                    "protocol",
                    format!("stimulus amplitude {} outside (0, {U_MAX}]", e.amplitude),
                ));
            }
            if !(e.duration_ms > 0.0 && e.onset_ms >= 0.0) {
                return Err(DeapError::param("protocol", "stimulus timing must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeLabel {
    Sinus,
    Fibrillation,
    Tachycardia,
    NonCapture,
}

/// Everything about an episode except its frames; stored as the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub id: String,
    pub seed: u64,
    pub params: ModelParams,
    pub grid: GridSpec,
    pub protocol: StimulusProtocol,
    pub label: EpisodeLabel,
    pub non_capture: bool,
    pub cycle_length_ms: Option<f64>,
    /// Raw `u` range used for min-max normalization.
    pub u_range: [f64; 2],
    pub steps_per_ms: usize,
    /// Simulated time discarded before frame 0.
    pub warmup_ms: usize,
    pub diffusion_map: Option<DiffusionSpec>,
}

/// Recipe for a heterogeneity map, recorded so the map can be rebuilt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSpec {
    pub seed: u64,
    pub n_patches: usize,
    pub severity: f64,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub meta: EpisodeMeta,
    /// Normalized membrane potential, one frame per millisecond.
    pub vm: VmMovie,
}

impl Episode {
    pub fn id(&self) -> &str {
        &self.meta.id
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        let header = FrameHeader {
            nx: self.vm.grid.nx as u32,
            ny: self.vm.grid.ny as u32,
            n_frames: self.vm.n_frames as u32,
            dt_ms: self.vm.dt_ms as f32,
            dx_mm: self.vm.grid.dx_mm as f32,
        };
        container::save_frames(&dir.join(format!("{}.bin", self.meta.id)), &header, &self.vm.data)?;
        container::save_json(&dir.join(format!("{}.json", self.meta.id)), &self.meta)
    }

    pub fn load(dir: &std::path::Path, id: &str) -> Result<Episode> {
        let meta: EpisodeMeta = container::load_json(&dir.join(format!("{id}.json")))?;
        let path = dir.join(format!("{id}.bin"));
        let (header, data) = container::load_frames(&path)?;
        if header.nx as usize != meta.grid.nx || header.ny as usize != meta.grid.ny {
            return Err(DeapError::Format {
                context: path.display().to_string(),
                reason: "frame header disagrees with sidecar grid".into(),
            });
        }
        let vm = VmMovie::new(meta.grid, header.n_frames as usize, header.dt_ms as f64, 0.0, data)?;
        Ok(Episode { meta, vm })
    }
}

/// Runs a protocol on `grid` for `duration_ms` and records one normalized
/// frame per millisecond.
pub fn run_episode(
    id: impl Into<String>,
    protocol: &StimulusProtocol,
    params: &ModelParams,
    grid: TissueGrid,
    seed: u64,
    duration_ms: usize,
) -> Result<Episode> {
    run_episode_after(id, protocol, params, grid, seed, 0, duration_ms)
}

/// Like [`run_episode`], but simulates `warmup_ms` first and records only
/// the following `duration_ms`. Stimulus onsets count from the start of the
/// warm-up.
pub fn run_episode_after(
    id: impl Into<String>,
    protocol: &StimulusProtocol,
    params: &ModelParams,
    mut grid: TissueGrid,
    seed: u64,
    warmup_ms: usize,
    duration_ms: usize,
) -> Result<Episode> {
    params.validate()?;
    protocol.validate()?;
    if duration_ms < 500 {
        return Err(DeapError::Precondition(format!(
            "episode duration must be >= 500 ms, got {duration_ms}"
        )));
    }
    let spec = grid.spec();
    let n_cells = spec.len();
    let substeps = params.steps_per_ms(grid.dx_mm);
    let dt = 1.0 / (params.time_scale_ms * substeps as f64);

    let first = protocol.events.first().copied();
    let first_region: Vec<bool> = match &first {
        Some(e) => (0..spec.ny)
            .flat_map(|r| (0..spec.nx).map(move |c| (r, c)))
            .map(|(r, c)| e.region.contains(&spec, r, c))
            .collect(),
        None => vec![false; n_cells],
    };
    let mut captured = first.is_none();

    let mut raw = Vec::with_capacity(n_cells * duration_ms);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for ms in 0..warmup_ms + duration_ms {
        if ms >= warmup_ms {
            for &v in &grid.u {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            raw.extend(grid.u.iter().map(|&v| v as f32));
        }
        if !captured {
            let e = first.as_ref().expect("first event");
            if ms as f64 >= e.onset_ms + e.duration_ms {
                captured = grid
                    .u
                    .iter()
                    .zip(&first_region)
                    .any(|(&v, &inside)| !inside && v > 0.5);
            }
        }
        for s in 0..substeps {
            let t = ms as f64 + s as f64 / substeps as f64;
            for e in protocol.events.iter().filter(|e| e.active(t)) {
                grid.clamp_region(&e.region, e.amplitude);
            }
            grid.step(params, dt)?;
        }
    }

    let range = hi - lo;
    let data: Vec<f32> = if range > 1e-12 {
        raw.iter()
            .map(|&v| ((v as f64 - lo) / range) as f32)
            .collect()
    } else {
        raw.iter().map(|&v| (v as f64 - lo) as f32).collect()
    };
    let vm = VmMovie::new(spec, duration_ms, 1.0, 0.0, data)?;

    let (label, cycle_length_ms) = if !captured {
        (EpisodeLabel::NonCapture, None)
    } else if duration_ms >= 1000 {
        match phase::cycle_length_filter(&vm)? {
            CycleClass::Fibrillation { cycle_length_ms } => (EpisodeLabel::Fibrillation, Some(cycle_length_ms)),
            CycleClass::Tachycardia { cycle_length_ms } => (EpisodeLabel::Tachycardia, Some(cycle_length_ms)),
            CycleClass::Unclassifiable => (EpisodeLabel::Sinus, None),
        }
    } else {
        (EpisodeLabel::Sinus, None)
    };

    Ok(Episode {
        meta: EpisodeMeta {
            id: id.into(),
            seed,
            params: *params,
            grid: spec,
            protocol: protocol.clone(),
            label,
            non_capture: !captured,
            cycle_length_ms,
            u_range: [lo, hi],
            steps_per_ms: substeps,
            warmup_ms,
            diffusion_map: None,
        },
        vm,
    })
}

/// Smooth random patches of reduced diffusivity.
///
/// Each patch is a disc with a logistic edge; inside the patches the scale
/// falls to `1 - severity`.
pub fn make_heterogeneity(seed: u64, n_patches: usize, severity: f64, nx: usize, ny: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(DeapError::param("severity", format!("must lie in [0, 1], got {severity}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches: Vec<(f64, f64, f64)> = (0..n_patches)
        .map(|_| {
            let r = rng.random_range(0.0..ny as f64);
            let c = rng.random_range(0.0..nx as f64);
            let radius = rng.random_range(0.06..0.14) * nx.min(ny) as f64;
            (r, c, radius)
        })
        .collect();
    const EDGE: f64 = 1.5;
    let mut map = Vec::with_capacity(nx * ny);
    for row in 0..ny {
        for col in 0..nx {
            let mut g: f64 = 0.0;
            for &(r, c, radius) in &patches {
                let d = ((row as f64 - r).powi(2) + (col as f64 - c).powi(2)).sqrt();
                g = g.max(1.0 / (1.0 + ((d - radius) / EDGE).exp()));
            }
            map.push((1.0 - severity * g).clamp(0.0, 1.0));
        }
    }
    Ok(map)
}

/// Induction time discarded before recording fibrillation episodes.
pub const FIBRILLATION_WARMUP_MS: usize = 500;

/// Randomized S1–S2 induction on patchy tissue, used to build the
/// fibrillation corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FibrillationRecipe {
    pub protocol: StimulusProtocol,
    pub heterogeneity: DiffusionSpec,
}

impl FibrillationRecipe {
    pub fn sample(seed: u64, nx: usize, ny: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_F1B0);
        let rows = (rng.random_range(0.40..0.60) * ny as f64) as usize;
        let cols = (rng.random_range(0.40..0.55) * nx as f64) as usize;
        let onset = rng.random_range(135.0..165.0);
        let op: u8 = if nx == ny {
            rng.random_range(0..8)
        } else {
            rng.random_range(0..4)
        };
        let protocol = StimulusProtocol::s1s2(
            nx,
            ny,
            onset,
            Region::Rect {
                row0: 0,
                row1: rows,
                col0: 0,
                col1: cols,
            },
        )
        .transform(op, nx, ny);
        let heterogeneity = DiffusionSpec {
            seed: rng.random(),
            n_patches: rng.random_range(0..5),
            severity: rng.random_range(0.2..0.6),
        };
        FibrillationRecipe {
            protocol,
            heterogeneity,
        }
    }

    pub fn run(
        &self,
        id: impl Into<String>,
        params: &ModelParams,
        nx: usize,
        ny: usize,
        dx_mm: f64,
        seed: u64,
        duration_ms: usize,
    ) -> Result<Episode> {
        let h = self.heterogeneity;
        let map = make_heterogeneity(h.seed, h.n_patches, h.severity, nx, ny)?;
        let grid = TissueGrid::new(nx, ny, dx_mm)?.with_diffusion(map)?;
        let mut ep = run_episode_after(id, &self.protocol, params, grid, seed, FIBRILLATION_WARMUP_MS, duration_ms)?;
        ep.meta.diffusion_map = Some(h);
        Ok(ep)
    }
}
