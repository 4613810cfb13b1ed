//! Run configuration: TOML file, documented defaults, flag overrides.

use std::path::{Path, PathBuf};

use deap_core::dataset::CorpusSpec;
use deap_core::eval::EvalConfig;
use deap_core::nn::ModelConfig;
use deap_core::sensing::{ArrayKind, ElectrodeArray, NoiseSpec, Pose};
use deap_core::tissue::ModelParams;
use deap_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Randomized S1–S2 induction on patchy tissue.
    Fibrillation,
    /// Fixed S1–S2 with the S2 in the lower-left quadrant.
    S1s2,
    /// Single S1 plane wave.
    Plane,
    /// Plane waves paced at `paced_cycle_ms`.
    Paced,
    /// No stimulus.
    Rest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub n_episodes: usize,
    pub protocol: Protocol,
    pub nx: usize,
    pub ny: usize,
    pub dx_mm: f64,
    pub duration_ms: usize,
    pub paced_cycle_ms: f64,
    pub params: ModelParams,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            n_episodes: 40,
            protocol: Protocol::Fibrillation,
            nx: 128,
            ny: 128,
            dx_mm: 0.25,
            duration_ms: 1500,
            paced_cycle_ms: 250.0,
            params: ModelParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArraySection {
    pub kind: ArrayKind,
    pub rotation_deg: f64,
    pub tx_mm: f64,
    pub ty_mm: f64,
    pub height_mm: f64,
}

impl Default for ArraySection {
    fn default() -> Self {
        ArraySection {
            kind: ArrayKind::Pentagon,
            rotation_deg: 0.0,
            tx_mm: 0.0,
            ty_mm: 0.0,
            height_mm: deap_core::sensing::DEFAULT_HEIGHT_MM,
        }
    }
}

impl ArraySection {
    pub fn build(&self) -> Result<ElectrodeArray, CliError> {
        let array = ElectrodeArray::by_kind(self.kind)?
            .with_pose(Pose {
                rotation_deg: self.rotation_deg,
                tx_mm: self.tx_mm,
                ty_mm: self.ty_mm,
            })
            .with_height(self.height_mm);
        array.validate()?;
        Ok(array)
    }
}

/// Noise settings; `snr_db = inf` disables white noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub snr_db: f64,
    pub line_amplitude: f64,
    pub line_hz: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let n = NoiseSpec::default();
        NoiseSection {
            snr_db: n.snr_db.unwrap_or(f64::INFINITY),
            line_amplitude: n.line_amplitude,
            line_hz: n.line_hz,
        }
    }
}

impl NoiseSection {
    pub fn spec(&self) -> NoiseSpec {
        NoiseSpec {
            snr_db: self.snr_db.is_finite().then_some(self.snr_db),
            line_amplitude: self.line_amplitude,
            line_hz: self.line_hz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub split_seed: u64,
    pub grid: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { split_seed: 7, grid: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub simulate: SimulateSection,
    pub array: ArraySection,
    pub noise: NoiseSection,
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            simulate: SimulateSection::default(),
            array: ArraySection::default(),
            noise: NoiseSection::default(),
            dataset: DatasetSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering, ignoring `out_dir` (where
    /// results go does not change them).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hex(&Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn corpus(&self) -> CorpusSpec {
        CorpusSpec {
            n_episodes: self.simulate.n_episodes,
            seed: self.seed,
            nx: self.simulate.nx,
            ny: self.simulate.ny,
            dx_mm: self.simulate.dx_mm,
            duration_ms: self.simulate.duration_ms,
            grid_cells: self.dataset.grid,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.simulate.params.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.dataset.grid != self.model.grid {
            return Err(CliError::Config(format!(
                "dataset.grid ({}) must equal model.grid ({})",
                self.dataset.grid, self.model.grid
            )));
        }
        self.array.build()?;
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
