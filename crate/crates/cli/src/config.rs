//! Run configuration read from a TOML file.
//!
//! Every section and key is optional; missing values take the defaults below
//! and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use neurocontrol::openloop::{AllAtOnceConfig, STEP_RANGE};
use neurocontrol::training::TrainConfig;
use neurocontrol::{CostWeights, HHParams, ParamOverrides, Shock, State, TimeGrid};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for every random draw of a run. Copied into `train.seed`.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub plant: PlantConfig,
    /// Evaluation grid for `solve`, `sweep` and `shock`.
    pub grid: GridConfig,
    pub cost: CostWeights,
    pub simulate: SimulateConfig,
    pub solve: SolveConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub shock: ShockConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            plant: PlantConfig::default(),
            grid: GridConfig::default(),
            cost: CostWeights::default(),
            simulate: SimulateConfig::default(),
            solve: SolveConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            shock: ShockConfig::default(),
        }
    }
}

/// Parameter changes relative to the textbook HH values. The reference
/// (target) uses `normal`, the controlled neuron uses `pathological`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    pub normal: ParamOverrides,
    pub pathological: ParamOverrides,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            normal: ParamOverrides::default(),
            pathological: ParamOverrides {
                g_na: Some(HHParams::pathological().g_na),
                ..ParamOverrides::default()
            },
        }
    }
}

impl PlantConfig {
    pub fn normal(&self) -> HHParams {
        HHParams::normal().with_overrides(&self.normal)
    }

    pub fn pathological(&self) -> HHParams {
        HHParams::normal().with_overrides(&self.pathological)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub t0: f64,
    pub t_end: f64,
    pub n_steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            t0: 0.0,
            t_end: 20.0,
            n_steps: 2000,
        }
    }
}

impl GridConfig {
    pub fn grid(&self) -> neurocontrol::Result<TimeGrid> {
        TimeGrid::new(self.t0, self.t_end, self.n_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub grid: GridConfig,
    /// Spike detection threshold (mV).
    pub spike_threshold: f64,
    /// Minimum spacing between counted spikes (ms).
    pub refractory: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            grid: GridConfig {
                t0: 0.0,
                t_end: 50.0,
                n_steps: 5000,
            },
            spike_threshold: 50.0,
            refractory: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    /// Initial state `(V, m, n, h)` of the controlled neuron.
    pub initial_state: State,
    pub solver: AllAtOnceConfig,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            initial_state: State::ZERO,
            solver: AllAtOnceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub xi_min: f64,
    pub xi_max: f64,
    pub count: usize,
    /// Range of initial voltages seen in training; rows inside it are tagged.
    pub trained_min: f64,
    pub trained_max: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            xi_min: -40.0,
            xi_max: 40.0,
            count: 100,
            trained_min: -10.0,
            trained_max: 10.0,
        }
    }
}

impl SweepConfig {
    /// Evenly spaced initial voltages, both ends included.
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.xi_min];
        }
        let step = (self.xi_max - self.xi_min) / (self.count - 1) as f64;
        (0..self.count).map(|i| self.xi_min + step * i as f64).collect()
    }

    pub fn in_range(&self, xi: f64) -> bool {
        (self.trained_min..=self.trained_max).contains(&xi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShockConfig {
    /// Shock time (ms). Unset means the middle of the evaluation grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    pub delta: State,
}

impl Default for ShockConfig {
    fn default() -> Self {
        ShockConfig {
            time: None,
            delta: State::new(10.0, 0.0, 0.0, 0.0),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn bad(key: &str, err: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {err}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies command-line overrides, fills derived defaults and checks
    /// every section.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<Self, CliError> {
        if let Some(dir) = &overrides.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        self.train.seed = self.seed;
        let grid = self.grid.grid().map_err(|e| bad("grid", e))?;
        if self.shock.time.is_none() {
            self.shock.time = Some(grid.t0 + 0.5 * (grid.t_end - grid.t0));
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.plant.normal().validate().map_err(|e| bad("plant.normal", e))?;
        self.plant
            .pathological()
            .validate()
            .map_err(|e| bad("plant.pathological", e))?;
        let grid = self.grid.grid().map_err(|e| bad("grid", e))?;
        if !STEP_RANGE.contains(&grid.n_steps) {
            return Err(bad(
                "grid.n_steps",
                format!("{} outside {}..={}", grid.n_steps, STEP_RANGE.start(), STEP_RANGE.end()),
            ));
        }
        self.cost.validate().map_err(|e| bad("cost", e))?;
        let sim = &self.simulate;
        sim.grid.grid().map_err(|e| bad("simulate.grid", e))?;
        if !(sim.spike_threshold > 0.0 && sim.spike_threshold < 120.0) {
            return Err(bad("simulate.spike_threshold", "must lie in (0, 120) mV"));
        }
        if !(sim.refractory > 0.0 && sim.refractory.is_finite()) {
            return Err(bad("simulate.refractory", "must be positive"));
        }
        if !self.solve.initial_state.is_finite() {
            return Err(bad("solve.initial_state", "must be finite"));
        }
        self.train.validate().map_err(|e| bad("train", e))?;
        let sw = &self.sweep;
        if sw.count == 0 {
            return Err(bad("sweep.count", "must be at least 1"));
        }
        if !(sw.xi_min.is_finite() && sw.xi_max.is_finite() && sw.xi_min <= sw.xi_max) {
            return Err(bad("sweep", "need finite xi_min <= xi_max"));
        }
        if !(sw.trained_min <= sw.trained_max) {
            return Err(bad("sweep", "need trained_min <= trained_max"));
        }
        self.shock_spec()?.node(&grid).map_err(|e| bad("shock", e))?;
        Ok(())
    }

    pub fn shock_spec(&self) -> Result<Shock, CliError> {
        let time = self
            .shock
            .time
            .ok_or_else(|| bad("shock.time", "unresolved"))?;
        Ok(Shock {
            time,
            delta: self.shock.delta,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }
}
