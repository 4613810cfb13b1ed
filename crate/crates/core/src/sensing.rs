//! Catheter electrode arrays and the unipolar electrogram forward model.
//!
//! Each electrode sees `phi = kappa * sum(lap(u) / r) * dx^2` where `r` is the
//! 3D distance from the electrode (raised `height_mm` above the sheet) to
//! the cell centre. Outward membrane current, proportional to `lap(u)`, acts
//! as the extracellular source, so an approaching wavefront reads positive
//! and local activation shows up as a sharp negative downstroke.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{self, FrameHeader};
use crate::error::{DeapError, Result};
use crate::grid::{GridSpec, VmMovie};

pub const N_ELECTRODES: usize = 20;
pub const FS_HZ: f64 = 1000.0;
pub const DEFAULT_HEIGHT_MM: f64 = 1.0;
/// Required clearance between every electrode and the sheet edge.
pub const MARGIN_MM: f64 = 2.0;
/// Scale of the forward model, calibrated so that a plane wave on the
/// default sheet gives a unit peak-to-peak deflection at 1 mm height.
pub const KAPPA: f64 = 0.509;

pub const PENTAGON_RADII_MM: [f64; 4] = [3.0, 6.0, 9.0, 12.0];
pub const SPIRAL_R0_MM: f64 = 2.0;
pub const SPIRAL_PITCH_MM_PER_RAD: f64 = 1.2;
pub const SPIRAL_R_MAX_MM: f64 = 12.0;

/// Rigid transform from the array frame to the tissue frame: rotation about
/// the array origin followed by translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub rotation_deg: f64,
    pub tx_mm: f64,
    pub ty_mm: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Pose {
            rotation_deg: 0.0,
            tx_mm: 0.0,
            ty_mm: 0.0,
        }
    }
}

impl Pose {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        [c * p[0] - s * p[1] + self.tx_mm, s * p[0] + c * p[1] + self.ty_mm]
    }

    pub fn invert(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (x, y) = (q[0] - self.tx_mm, q[1] - self.ty_mm);
        [c * x + s * y, -s * x + c * y]
    }

    pub fn inverse(&self) -> Pose {
        let t = Pose {
            rotation_deg: -self.rotation_deg,
            tx_mm: 0.0,
            ty_mm: 0.0,
        }
        .apply([-self.tx_mm, -self.ty_mm]);
        Pose {
            rotation_deg: -self.rotation_deg,
            tx_mm: t[0],
            ty_mm: t[1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayKind {
    Pentagon,
    Spiral,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeArray {
    pub name: ArrayKind,
    /// Array-frame positions in mm.
    pub positions: Vec<[f64; 2]>,
    pub height_mm: f64,
    pub pose: Pose,
}

impl ElectrodeArray {
    /// Five spines at 90° + k·72°, four electrodes per spine.
    pub fn pentagon() -> Self {
        let mut positions = Vec::with_capacity(N_ELECTRODES);
        for spine in 0..5 {
            let angle = (90.0 + 72.0 * spine as f64).to_radians();
            for r in PENTAGON_RADII_MM {
                positions.push([r * angle.cos(), r * angle.sin()]);
            }
        }
        ElectrodeArray {
            name: ArrayKind::Pentagon,
            positions,
            height_mm: DEFAULT_HEIGHT_MM,
            pose: Pose::default(),
        }
    }

    /// Archimedean spiral `r = 2 + 1.2·φ` mm from 2 to 12 mm, electrodes
    /// equally spaced in arc length.
    pub fn spiral() -> Self {
        let b = SPIRAL_PITCH_MM_PER_RAD;
        // Arc length as a function of radius: ds = sqrt(r² + b²) dr / b.
        let arc = |r: f64| (r * (r * r + b * b).sqrt() + b * b * (r / b).asinh()) / (2.0 * b);
        let s0 = arc(SPIRAL_R0_MM);
        let total = arc(SPIRAL_R_MAX_MM) - s0;
        let positions = (0..N_ELECTRODES)
            .map(|i| {
                let target = s0 + total * i as f64 / (N_ELECTRODES - 1) as f64;
                let (mut lo, mut hi) = (SPIRAL_R0_MM, SPIRAL_R_MAX_MM);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if arc(mid) < target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let r = 0.5 * (lo + hi);
                let phi = (r - SPIRAL_R0_MM) / b;
                [r * phi.cos(), r * phi.sin()]
            })
            .collect();
        ElectrodeArray {
            name: ArrayKind::Spiral,
            positions,
            height_mm: DEFAULT_HEIGHT_MM,
            pose: Pose::default(),
        }
    }

    pub fn custom(positions: Vec<[f64; 2]>) -> Self {
        ElectrodeArray {
            name: ArrayKind::Custom,
            positions,
            height_mm: DEFAULT_HEIGHT_MM,
            pose: Pose::default(),
        }
    }

    pub fn by_kind(kind: ArrayKind) -> Result<Self> {
        match kind {
            ArrayKind::Pentagon => Ok(Self::pentagon()),
            ArrayKind::Spiral => Ok(Self::spiral()),
            ArrayKind::Custom => Err(DeapError::param("array", "custom arrays need explicit positions")),
        }
    }

    pub fn with_pose(mut self, pose: Pose) -> Self {
        self.pose = pose;
        self
    }

    pub fn with_height(mut self, height_mm: f64) -> Self {
        self.height_mm = height_mm;
        self
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Tissue-frame positions.
    pub fn posed_positions(&self) -> Vec<[f64; 2]> {
        self.positions.iter().map(|&p| self.pose.apply(p)).collect()
    }

    pub fn center_mm(&self) -> [f64; 2] {
        self.pose.apply([0.0, 0.0])
    }

    pub fn max_radius_mm(&self) -> f64 {
        self.positions
            .iter()
            .map(|p| p[0].hypot(p[1]))
            .fold(0.0, f64::max)
    }

    /// Catheter footprint disc: array centre, max electrode radius + 2 mm.
    pub fn footprint(&self) -> ([f64; 2], f64) {
        (self.center_mm(), self.max_radius_mm() + MARGIN_MM)
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.name, ArrayKind::Pentagon | ArrayKind::Spiral) && self.positions.len() != N_ELECTRODES {
            return Err(DeapError::param(
                "array",
                format!("{:?} design needs {N_ELECTRODES} electrodes, got {}", self.name, self.positions.len()),
            ));
        }
        if !(self.height_mm.is_finite() && self.height_mm > 0.0) {
            return Err(DeapError::param("height_mm", "must be > 0"));
        }
        Ok(())
    }

    /// Square region of interest: the footprint bounding square plus 10%.
    pub fn roi(&self, g: usize) -> GridSpec {
        let posed = self.posed_positions();
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &posed {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let side = (hi[0] - lo[0]).max(hi[1] - lo[1]) * 1.1;
        GridSpec::square([0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])], side, g)
    }
}

/// Electrode positions expressed on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    /// Continuous `(row, col)` per electrode.
    pub coords: Vec<(f64, f64)>,
    pub pose: Pose,
    pub inverse: Pose,
}

/// Maps the posed array onto `grid`, rejecting electrodes closer than
/// [`MARGIN_MM`] to the sheet edge.
pub fn register(array: &ElectrodeArray, grid: &GridSpec) -> Result<Registration> {
    array.validate()?;
    let (lo, hi) = grid.bounds();
    let mut coords = Vec::with_capacity(array.len());
    for (i, p) in array.posed_positions().into_iter().enumerate() {
        let inside = p[0] >= lo[0] + MARGIN_MM
            && p[0] <= hi[0] - MARGIN_MM
            && p[1] >= lo[1] + MARGIN_MM
            && p[1] <= hi[1] - MARGIN_MM;
        if !inside {
            return Err(DeapError::FootprintOutside {
                electrode: i,
                x_mm: p[0],
                y_mm: p[1],
            });
        }
        coords.push(grid.to_grid(p));
    }
    Ok(Registration {
        coords,
        pose: array.pose,
        inverse: array.pose.inverse(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Signal-to-noise ratio of additive white Gaussian noise; `None` for none.
    pub snr_db: Option<f64>,
    /// Amplitude of 50 Hz line interference (0 disables it).
    pub line_amplitude: f64,
    pub line_hz: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            snr_db: Some(20.0),
            line_amplitude: 0.0,
            line_hz: 50.0,
        }
    }
}

impl NoiseSpec {
    pub fn clean() -> Self {
        NoiseSpec {
            snr_db: None,
            line_amplitude: 0.0,
            line_hz: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgmMeta {
    pub episode_id: String,
    pub array: ElectrodeArray,
    pub noise: NoiseSpec,
    pub noise_seed: u64,
    pub fs_hz: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgmRecording {
    pub meta: EgmMeta,
    /// `traces[electrode][sample]`.
    pub traces: Vec<Vec<f32>>,
}

impl EgmRecording {
    pub fn n_samples(&self) -> usize {
        self.traces.first().map_or(0, Vec::len)
    }

    pub fn n_channels(&self) -> usize {
        self.traces.len()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let id = &self.meta.episode_id;
        let header = FrameHeader {
            nx: self.n_samples() as u32,
            ny: self.n_channels() as u32,
            n_frames: 1,
            dt_ms: (1000.0 / self.meta.fs_hz) as f32,
            dx_mm: 0.0,
        };
        let data: Vec<f32> = self.traces.concat();
        container::save_frames(&dir.join(format!("{id}.egm.bin")), &header, &data)?;
        container::save_json(&dir.join(format!("{id}.egm.json")), &self.meta)
    }

    pub fn load(dir: &Path, id: &str) -> Result<Self> {
        let meta: EgmMeta = container::load_json(&dir.join(format!("{id}.egm.json")))?;
        let path = dir.join(format!("{id}.egm.bin"));
        let (header, data) = container::load_frames(&path)?;
        if header.nx as usize != meta.n_samples || header.n_frames != 1 {
            return Err(DeapError::Format {
                context: path.display().to_string(),
                reason: "recording header disagrees with sidecar".into(),
            });
        }
        let traces = data.chunks(header.nx as usize).map(<[f32]>::to_vec).collect();
        Ok(EgmRecording { meta, traces })
    }

    /// One column per electrode, one row per sample.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t_ms".to_string()];
        header.extend((0..self.n_channels()).map(|e| format!("e{e}")));
        wr.write_record(&header)?;
        let dt = 1000.0 / self.meta.fs_hz;
        for s in 0..self.n_samples() {
            let mut row = vec![format!("{}", s as f64 * dt)];
            row.extend(self.traces.iter().map(|tr| tr[s].to_string()));
            wr.write_record(&row)?;
        }
        wr.flush().map_err(|e| DeapError::io("<csv>", e))?;
        Ok(())
    }
}

/// Five-point Laplacian with mirrored (no-flux) boundaries, per mm².
pub fn laplacian(frame: &[f32], grid: &GridSpec, out: &mut [f64]) {
    let (nx, ny) = (grid.nx, grid.ny);
    let inv = 1.0 / (grid.dx_mm * grid.dx_mm);
    for row in 0..ny {
        for col in 0..nx {
            let i = row * nx + col;
            let u = frame[i] as f64;
            let mut acc = 0.0;
            if col > 0 {
                acc += frame[i - 1] as f64 - u;
            }
            if col + 1 < nx {
                acc += frame[i + 1] as f64 - u;
            }
            if row > 0 {
                acc += frame[i - nx] as f64 - u;
            }
            if row + 1 < ny {
                acc += frame[i + nx] as f64 - u;
            }
            out[i] = acc * inv;
        }
    }
}

/// Noise-free electrograms of a movie as seen by `array`.
pub fn clean_egm(vm: &VmMovie, array: &ElectrodeArray) -> Result<Vec<Vec<f64>>> {
    register(array, &vm.grid)?;
    let g = vm.grid;
    let area = g.dx_mm * g.dx_mm;
    let h2 = array.height_mm * array.height_mm;
    let weights: Vec<Vec<f64>> = array
        .posed_positions()
        .iter()
        .map(|e| {
            let mut w = Vec::with_capacity(g.len());
            for row in 0..g.ny {
                for col in 0..g.nx {
                    let c = g.cell_center(row, col);
                    let d2 = (c[0] - e[0]).powi(2) + (c[1] - e[1]).powi(2) + h2;
                    w.push(area / d2.sqrt());
                }
            }
            w
        })
        .collect();
    let mut lap = vec![0.0; g.len()];
    let mut traces = vec![Vec::with_capacity(vm.n_frames); array.len()];
    for t in 0..vm.n_frames {
        laplacian(vm.frame(t), &g, &mut lap);
        for (trace, w) in traces.iter_mut().zip(&weights) {
            let s: f64 = lap.iter().zip(w).map(|(l, wi)| l * wi).sum();
            trace.push(KAPPA * s);
        }
    }
    Ok(traces)
}

/// Adds white Gaussian noise at the requested SNR (relative to the mean
/// power of all clean traces) and optional line interference.
pub fn add_noise(clean: &[Vec<f64>], noise: &NoiseSpec, seed: u64, fs_hz: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count: usize = clean.iter().map(Vec::len).sum();
    let power = if count == 0 {
        0.0
    } else {
        clean.iter().flatten().map(|v| v * v).sum::<f64>() / count as f64
    };
    let sigma = noise
        .snr_db
        .map(|snr| (power / 10f64.powf(snr / 10.0)).sqrt())
        .unwrap_or(0.0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    clean
        .iter()
        .map(|trace| {
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            trace
                .iter()
                .enumerate()
                .map(|(s, &v)| {
                    let mut x = v;
                    if sigma > 0.0 {
                        x += sigma * normal.sample(&mut rng);
                    }
                    if noise.line_amplitude != 0.0 {
                        let t = s as f64 / fs_hz;
                        x += noise.line_amplitude * (2.0 * PI * noise.line_hz * t + phase).sin();
                    }
                    x
                })
                .collect()
        })
        .collect()
}

/// Synthesizes the unipolar recording of an episode movie.
pub fn forward_egm(
    episode_id: &str,
    vm: &VmMovie,
    array: &ElectrodeArray,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<EgmRecording> {
    if (vm.dt_ms - 1000.0 / FS_HZ).abs() > 1e-9 {
        return Err(DeapError::Precondition(format!(
            "episode must be sampled at 1 kHz, got dt = {} ms",
            vm.dt_ms
        )));
    }
    let clean = clean_egm(vm, array)?;
    let noisy = add_noise(&clean, noise, seed, FS_HZ);
    let traces: Vec<Vec<f32>> = noisy
        .iter()
        .map(|t| t.iter().map(|&v| v as f32).collect())
        .collect();
    if traces.iter().flatten().any(|v| !v.is_finite()) {
        return Err(DeapError::Precondition("non-finite electrogram sample".into()));
    }
    Ok(EgmRecording {
        meta: EgmMeta {
            episode_id: episode_id.to_string(),
            array: array.clone(),
            noise: *noise,
            noise_seed: seed,
            fs_hz: FS_HZ,
            n_samples: vm.n_frames,
        },
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairwise(points: &[[f64; 2]]) -> Vec<f64> {
        let mut d = Vec::new();
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                d.push((points[i][0] - points[j][0]).hypot(points[i][1] - points[j][1]));
            }
        }
        d
    }

    #[test]
    fn pentagon_geometry() {
        let a = ElectrodeArray::pentagon();
        assert_eq!(a.len(), 20);
        assert!((a.max_radius_mm() - 12.0).abs() < 1e-12);
        // Rotating by 72° maps the point set onto itself.
        let rot = Pose {
            rotation_deg: 72.0,
            ..Default::default()
        };
        for p in &a.positions {
            let q = rot.apply(*p);
            let nearest = a
                .positions
                .iter()
                .map(|o| (o[0] - q[0]).hypot(o[1] - q[1]))
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 1e-9);
        }
        // Footprint fits the default 32 mm sheet.
        register(&a, &GridSpec::centered(128, 128, 0.25)).unwrap();
    }

    #[test]
    fn spiral_geometry() {
        let a = ElectrodeArray::spiral();
        assert_eq!(a.len(), 20);
        let radii: Vec<f64> = a.positions.iter().map(|p| p[0].hypot(p[1])).collect();
        assert!(radii.windows(2).all(|w| w[1] > w[0]));
        assert!((radii[0] - 2.0).abs() < 1e-9 && (radii[19] - 12.0).abs() < 1e-9);
        let min = pairwise(&a.positions).into_iter().fold(f64::INFINITY, f64::min);
        // Oracle: trapezoidal arc-length integration with 2e6 panels.
        assert!((min - 2.92523).abs() < 1e-3, "min spacing {min}");
    }

    #[test]
    fn identity_pose_centres_the_array() {
        let g = GridSpec::centered(128, 128, 0.25);
        let a = ElectrodeArray::custom(vec![[0.0, 0.0]]);
        let reg = register(&a, &g).unwrap();
        assert_eq!(reg.coords[0], (63.5, 63.5));
    }

    #[test]
    fn pose_round_trip_and_rigidity() {
        let pose = Pose {
            rotation_deg: 10.0,
            tx_mm: 1.5,
            ty_mm: -2.25,
        };
        let a = ElectrodeArray::spiral();
        let posed: Vec<_> = a.positions.iter().map(|&p| pose.apply(p)).collect();
        for (p, q) in a.positions.iter().zip(&posed) {
            let back = pose.invert(*q);
            assert!((back[0] - p[0]).abs() < 1e-9 && (back[1] - p[1]).abs() < 1e-9);
            let back2 = pose.inverse().apply(*q);
            assert!((back2[0] - p[0]).abs() < 1e-9 && (back2[1] - p[1]).abs() < 1e-9);
        }
        for (d0, d1) in pairwise(&a.positions).iter().zip(pairwise(&posed)) {
            assert!((d0 - d1).abs() < 1e-9);
        }
    }

    #[test]
    fn footprint_outside_is_rejected() {
        let g = GridSpec::centered(128, 128, 0.25);
        let a = ElectrodeArray::pentagon().with_pose(Pose {
            rotation_deg: 0.0,
            tx_mm: 5.0,
            ty_mm: 0.0,
        });
        match register(&a, &g) {
            Err(DeapError::FootprintOutside { electrode, .. }) => {
                assert!(a.posed_positions()[electrode][0] > 14.0);
            }
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn uniform_field_gives_zero_egm() {
        let g = GridSpec::centered(64, 64, 0.5);
        let vm = VmMovie::from_fn(g, 20, 1.0, |t, _, _| (t as f32 * 0.1).sin().abs());
        let traces = clean_egm(&vm, &ElectrodeArray::pentagon()).unwrap();
        assert!(traces.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_hits_requested_snr() {
        let clean: Vec<Vec<f64>> = (0..20)
            .map(|e| (0..2000).map(|s| ((s + 7 * e) as f64 * 0.03).sin()).collect())
            .collect();
        let noisy = add_noise(&clean, &NoiseSpec::default(), 3, FS_HZ);
        let (mut ps, mut pn) = (0.0, 0.0);
        for (c, n) in clean.iter().zip(&noisy) {
            for (a, b) in c.iter().zip(n) {
                ps += a * a;
                pn += (b - a) * (b - a);
            }
        }
        let snr = 10.0 * (ps / pn).log10();
        assert!((snr - 20.0).abs() < 1.0, "measured {snr} dB");
        assert_eq!(noisy, add_noise(&clean, &NoiseSpec::default(), 3, FS_HZ));
        assert_eq!(add_noise(&clean, &NoiseSpec::clean(), 3, FS_HZ), clean);
    }

    #[test]
    fn csv_export_has_one_column_per_electrode() {
        let g = GridSpec::centered(64, 64, 0.5);
        let vm = VmMovie::from_fn(g, 3, 1.0, |_, r, c| ((r + c) % 7) as f32 / 7.0);
        let rec = forward_egm("ep", &vm, &ElectrodeArray::pentagon(), &NoiseSpec::clean(), 0).unwrap();
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].split(',').count(), 21);
    }
}
