//! Experiment configuration: one TOML file with a table per module.
//!
//! ```toml
//! mode = "sim"
//! seed = 42
//! runs = 50
//! oc = "both"
//! out = "results"
//!
//! [filter]
//! theta_noise = 0.05
//!
//! [filter.initial_std]
//! yaw = 0.1745
//!
//! [trajectory]
//! duration = 8.0
//!
//! [geometry]
//! order = 1
//! rows = 5
//! cols = 6
//! pitch = 0.03
//! ```
//!
//! Every key is optional. Relative paths resolve against the directory of
//! the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::FilterConfig;
use crate::magfield::{ArrayGeometry, ArrayModel, PolynomialFieldModel};
use crate::simulator::{EnvironmentConfig, FilterSelection, NoiseConfig, TrajectoryConfig};

/// Monte-Carlo runs in simulation when `runs` is not given.
pub const DEFAULT_SIM_RUNS: usize = 50;
/// Re-initializations over a recorded dataset when `runs` is not given.
pub const DEFAULT_REAL_RUNS: usize = 12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Sim,
    Real,
}

/// Magnetometer array layout and field model order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub order: usize,
    pub rows: usize,
    pub cols: usize,
    /// Grid spacing (m).
    pub pitch: f64,
    /// Sensor positions, one `x y z` line each; replaces the grid when set.
    pub file: Option<PathBuf>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { order: 1, rows: 5, cols: 6, pitch: 0.03, file: None }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> Result<Arc<ArrayModel>> {
        let geometry = match &self.file {
            Some(path) => ArrayGeometry::from_file(path)?,
            None => ArrayGeometry::planar_grid(self.rows, self.cols, self.pitch)?,
        };
        Ok(Arc::new(ArrayModel::new(PolynomialFieldModel::new(self.order)?, geometry)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Monte-Carlo runs (sim) or re-initializations (real).
    pub runs: Option<usize>,
    pub oc: FilterSelection,
    pub out: PathBuf,
    /// Directory with `imu.csv`, `mag.csv` and optionally `gt.csv` (real mode).
    pub dataset: Option<PathBuf>,
    /// Record per-step constraint diagnostics.
    pub diagnostics: bool,
    pub filter: FilterConfig,
    pub trajectory: TrajectoryConfig,
    pub noise: NoiseConfig,
    pub environment: EnvironmentConfig,
    pub geometry: GeometryConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Sim,
            seed: 42,
            runs: None,
            oc: FilterSelection::Both,
            out: PathBuf::from("results"),
            dataset: None,
            diagnostics: true,
            filter: FilterConfig::default(),
            trajectory: TrajectoryConfig::default(),
            noise: NoiseConfig::default(),
            environment: EnvironmentConfig::default(),
            geometry: GeometryConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            Error::Parse { path: path.to_path_buf(), line, message: e.message().to_string() }
        })
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        if let Some(d) = self.dataset.as_mut() {
            fix(d);
        }
        if let Some(f) = self.geometry.file.as_mut() {
            fix(f);
        }
    }

    pub fn runs(&self) -> usize {
        self.runs.unwrap_or(match self.mode {
            Mode::Sim => DEFAULT_SIM_RUNS,
            Mode::Real => DEFAULT_REAL_RUNS,
        })
    }

    /// In simulation the filter runs at the trajectory rate.
    pub fn sync_sample_time(&mut self) {
        if self.mode == Mode::Sim {
            self.filter.ts = self.trajectory.ts();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs() == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        self.filter.validate()?;
        match self.mode {
            Mode::Sim => {
                self.trajectory.validate()?;
                self.noise.validate()?;
                self.environment.validate()?;
            }
            Mode::Real => {
                let dir = self.dataset.as_ref().ok_or_else(|| Error::Config("real mode needs a dataset directory".into()))?;
                if !dir.is_dir() {
                    return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())));
                }
            }
        }
        if let Some(f) = &self.geometry.file {
            if !f.is_file() {
                return Err(Error::Config(format!("geometry file {} does not exist", f.display())));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }
}
