//! Scenario files.
//!
//! A scenario is one JSON document describing the network, the simulated
//! disturbances and noise, the terminal-voltage controller and the
//! estimators. Unknown keys are rejected and the whole file is validated
//! before anything runs. Covariances are written either as a list of
//! variances (diagonal) or as a full row-major matrix.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::discretize::DiscretizationMethod;
use crate::error::{Error, Result};
use crate::estimation::EstimatorSettings;
use crate::frames::DqSample;
use crate::kalman::{check_covariance, NoiseSpec};
use crate::models::{DguParams, LineParams, MicrogridTopology};
use crate::sim::{
    EventSchedule, InitialState, LoadEvent, PlantNoise, RegulatorConfig, SimConfig, TerminalVoltageControl,
};

/// Bundled three-bus scenario.
pub const TABLE1_JSON: &str = include_str!("../configs/table1.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Covariance {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Covariance {
    pub fn to_matrix(&self, field: &str, dim: usize) -> Result<DMatrix<f64>> {
        let m = match self {
            Covariance::Diagonal(d) => {
                if d.len() != dim {
                    return Err(Error::invalid(field, format!("expected {dim} variances, got {}", d.len())));
                }
                DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d))
            }
            Covariance::Full(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::invalid(field, format!("expected a {dim}x{dim} matrix")));
                }
                DMatrix::from_fn(dim, dim, |i, j| rows[i][j])
            }
        };
        check_covariance(field, &m)?;
        Ok(m)
    }

    fn zeros(dim: usize) -> Self {
        Covariance::Diagonal(vec![0.0; dim])
    }
}

/// Noise for one subsystem: process `q`, measurement `r`, input `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub q: Covariance,
    pub r: Covariance,
    #[serde(default)]
    pub m: Option<Covariance>,
}

impl NoiseConfig {
    fn to_spec(&self, field: &str, dim: usize) -> Result<NoiseSpec> {
        let q = self.q.to_matrix(&format!("{field}.q"), dim)?;
        let r = self.r.to_matrix(&format!("{field}.r"), dim)?;
        let m = self
            .m
            .clone()
            .unwrap_or_else(|| Covariance::zeros(dim))
            .to_matrix(&format!("{field}.m"), dim)?;
        NoiseSpec::new(q, r, m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialStateConfig {
    #[default]
    Equilibrium,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub duration: f64,
    pub plant_step: f64,
    pub seed: u64,
    #[serde(default)]
    pub initial_state: InitialStateConfig,
    /// Load current per bus before any event, A.
    pub initial_loads: Vec<DqSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventConfig {
    pub time: f64,
    pub bus: usize,
    pub load_delta: DqSample,
}

/// Terminal-voltage PI regulator. The reference is derived from the
/// nominal line voltage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub kp: f64,
    pub ki: f64,
    pub droop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantNoiseConfig {
    pub dgus: Vec<NoiseConfig>,
    pub lines: Vec<NoiseConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalNoiseConfig {
    pub q: Covariance,
    pub r: Covariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub local_rate: f64,
    pub global_rate: f64,
    pub discretization: DiscretizationMethod,
    pub local_noise: Vec<NoiseConfig>,
    pub global_noise: GlobalNoiseConfig,
    #[serde(default = "default_true")]
    pub parallel: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub frequency_hz: f64,
    /// Nominal line-to-line RMS voltage, V.
    pub line_voltage_rms: f64,
    pub dgus: Vec<DguParams>,
    pub lines: Vec<LineParams>,
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub events: Vec<EventConfig>,
    pub controller: ControllerConfig,
    pub plant_noise: PlantNoiseConfig,
    pub estimator: EstimatorConfig,
    pub output: OutputConfig,
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub duration: Option<f64>,
    /// Moves the scenario's single load event.
    pub event_time: Option<f64>,
    pub discretization: Option<DiscretizationMethod>,
    pub output_directory: Option<PathBuf>,
}

/// Everything needed to run simulation and estimation, fully validated.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub sim: SimConfig,
    pub estimator: EstimatorSettings,
    pub output_directory: PathBuf,
    pub event_times: Vec<f64>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    pub fn table1() -> Self {
        Self::from_json(TABLE1_JSON, Path::new("table1.json")).expect("bundled config parses")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.simulation.seed = seed;
        }
        if let Some(d) = o.duration {
            self.simulation.duration = d;
        }
        if let Some(t) = o.event_time {
            match self.events.as_mut_slice() {
                [only] => only.time = t,
                _ => {
                    return Err(Error::invalid(
                        "event_time",
                        format!("override needs exactly one event, config has {}", self.events.len()),
                    ))
                }
            }
        }
        if let Some(m) = o.discretization {
            self.estimator.discretization = m;
        }
        if let Some(dir) = &o.output_directory {
            self.output.directory = dir.clone();
        }
        Ok(())
    }

    /// Peak phase voltage corresponding to the nominal line RMS voltage.
    pub fn nominal_phase_peak(&self) -> f64 {
        self.line_voltage_rms * (2.0f64 / 3.0).sqrt()
    }

    pub fn omega(&self) -> f64 {
        2.0 * PI * self.frequency_hz
    }

    /// Validates every field and builds the runtime configuration.
    pub fn build(&self) -> Result<Scenario> {
        positive("frequency_hz", self.frequency_hz)?;
        positive("line_voltage_rms", self.line_voltage_rms)?;
        let topology = MicrogridTopology::new(self.dgus.clone(), self.lines.clone(), self.omega())?;
        let (nb, nl) = (topology.n_buses(), topology.lines().len());

        let sim_cfg = &self.simulation;
        if sim_cfg.initial_loads.len() != nb {
            return Err(Error::invalid(
                "simulation.initial_loads",
                format!("expected {nb} entries, got {}", sim_cfg.initial_loads.len()),
            ));
        }
        if self.plant_noise.dgus.len() != nb {
            return Err(Error::invalid("plant_noise.dgus", format!("expected {nb} entries")));
        }
        if self.plant_noise.lines.len() != nl {
            return Err(Error::invalid("plant_noise.lines", format!("expected {nl} entries")));
        }
        if self.estimator.local_noise.len() != nb {
            return Err(Error::invalid("estimator.local_noise", format!("expected {nb} entries")));
        }
        let noise = PlantNoise {
            dgus: (self.plant_noise.dgus.iter().enumerate())
                .map(|(i, n)| n.to_spec(&format!("plant_noise.dgus[{i}]"), 4))
                .collect::<Result<_>>()?,
            lines: (self.plant_noise.lines.iter().enumerate())
                .map(|(i, n)| n.to_spec(&format!("plant_noise.lines[{i}]"), 2))
                .collect::<Result<_>>()?,
        };
        let events = EventSchedule::new(
            self.events
                .iter()
                .map(|e| LoadEvent { time: e.time, bus: e.bus, load_delta: e.load_delta })
                .collect(),
        )?;
        let sim = SimConfig {
            topology: topology.clone(),
            duration: sim_cfg.duration,
            plant_step: sim_cfg.plant_step,
            noise,
            seed: sim_cfg.seed,
            events,
            control: TerminalVoltageControl::Regulated(RegulatorConfig {
                v_nominal: self.nominal_phase_peak(),
                kp: self.controller.kp,
                ki: self.controller.ki,
                droop: self.controller.droop,
            }),
            initial_loads: sim_cfg.initial_loads.clone(),
            initial_state: match sim_cfg.initial_state {
                InitialStateConfig::Equilibrium => InitialState::Equilibrium,
                InitialStateConfig::Zero => InitialState::Zero,
            },
        };
        sim.validate()?;

        let est = &self.estimator;
        let plant_rate = 1.0 / sim_cfg.plant_step;
        crate::sim::rate_stride(plant_rate, est.local_rate)?;
        crate::sim::rate_stride(est.local_rate, est.global_rate)?;
        let estimator = EstimatorSettings {
            local_rate: est.local_rate,
            global_rate: est.global_rate,
            method: est.discretization,
            local_noise: (est.local_noise.iter().enumerate())
                .map(|(i, n)| n.to_spec(&format!("estimator.local_noise[{i}]"), 4))
                .collect::<Result<_>>()?,
            global_q: est.global_noise.q.to_matrix("estimator.global_noise.q", 2 * nl)?,
            global_r: est.global_noise.r.to_matrix("estimator.global_noise.r", 2 * nl)?,
            parallel: est.parallel,
        };
        Ok(Scenario {
            sim,
            estimator,
            output_directory: self.output.directory.clone(),
            event_times: self.events.iter().map(|e| e.time).collect(),
        })
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be positive, got {v}")))
    }
}
