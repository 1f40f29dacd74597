//! Scenario files.
//!
//! A scenario is a TOML document naming the plant, its growth bound, the
//! sets of the control problem, the quantization and the run options.
//! Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::abstraction::{AbstractionOptions, QuantParams};
use crate::dynamics::{builtin_system, ControlSystem, ExactFlow, SystemParams, DEFAULT_SUBSTEPS};
use crate::error::{Error, Result};
use crate::geometry::{AxisBox, BoxUnion};
use crate::growth::{affine_bound, from_lyapunov, linear_bounds, GrowthBound, LyapunovSpec};
use crate::synthesis::SpecProblem;

pub const CONFIG_VERSION: u32 = 1;

/// The bundled vehicle scenario.
pub const VEHICLE_SCENARIO: &str = include_str!("../scenarios/vehicle.toml");

/// A planar single-integrator scenario small enough for quick runs.
pub const PLANE_SCENARIO: &str = include_str!("../scenarios/plane.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub system: SystemSection,
    pub growth: GrowthSpec,
    pub quantization: QuantParams,
    #[serde(default)]
    pub abstraction: AbstractionSection,
    pub sets: SetsSection,
    #[serde(default)]
    pub synthesis: SynthesisSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub outputs: OutputsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub name: String,
    #[serde(default)]
    pub params: SystemParams,
}

/// How to obtain the growth bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GrowthSpec {
    /// `beta(r, t) = (c0 + c1 t) r`, no input term.
    Affine {
        c0: f64,
        c1: f64,
    },
    /// Closed form for linear plants; matrices come from the system.
    Linear {
        #[serde(default)]
        horizon: Option<f64>,
        #[serde(default = "default_quad_steps")]
        quad_steps: usize,
    },
    Lyapunov(LyapunovSpec),
}

fn default_quad_steps() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractionSection {
    #[serde(default)]
    pub finite_input_mode: bool,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_substeps() -> usize {
    DEFAULT_SUBSTEPS
}

impl Default for AbstractionSection {
    fn default() -> Self {
        AbstractionSection {
            finite_input_mode: false,
            substeps: DEFAULT_SUBSTEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetsSection {
    pub domain: BoxUnion,
    pub target: BoxUnion,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub obstacles: Vec<AxisBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSection {
    #[serde(default = "default_stay_horizon")]
    pub stay_horizon: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_stay_horizon() -> usize {
    100
}

fn default_max_steps() -> usize {
    2000
}

impl Default for SynthesisSection {
    fn default() -> Self {
        SynthesisSection {
            stay_horizon: default_stay_horizon(),
            max_steps: default_max_steps(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default)]
    pub initial_conditions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_bound_trials")]
    pub bound_trials: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_trials() -> usize {
    10_000
}

fn default_bound_trials() -> usize {
    1000
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            trials: default_trials(),
            bound_trials: default_bound_trials(),
            seed: 0,
        }
    }
}

/// File names, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsSection {
    #[serde(default = "default_dir")]
    pub dir: String,
    #[serde(default = "default_system_file")]
    pub system: String,
    #[serde(default = "default_controller_file")]
    pub controller: String,
}

fn default_dir() -> String {
    "out".into()
}

fn default_system_file() -> String {
    "system.bin".into()
}

fn default_controller_file() -> String {
    "controller.txt".into()
}

impl Default for OutputsSection {
    fn default() -> Self {
        OutputsSection {
            dir: default_dir(),
            system: default_system_file(),
            controller: default_controller_file(),
        }
    }
}

impl Config {
    /// Parses and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Config::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn build_system(&self) -> Result<ControlSystem> {
        builtin_system(&self.system.name, &self.system.params)
    }

    pub fn growth_bound(&self, sys: &ControlSystem) -> Result<GrowthBound> {
        match &self.growth {
            GrowthSpec::Affine { c0, c1 } => affine_bound(*c0, *c1),
            GrowthSpec::Linear {
                horizon,
                quad_steps,
            } => match sys.exact_flow() {
                Some(ExactFlow::Linear(m)) => linear_bounds(
                    &m.a,
                    &m.b,
                    horizon.unwrap_or(self.quantization.tau),
                    *quad_steps,
                ),
                _ => Err(Error::Config(format!(
                    "linear growth bound needs a linear system, got '{}'",
                    sys.name()
                ))),
            },
            GrowthSpec::Lyapunov(spec) => from_lyapunov(spec),
        }
    }

    pub fn abstraction_options(&self) -> AbstractionOptions {
        AbstractionOptions {
            finite_input_mode: self.abstraction.finite_input_mode,
            substeps: self.abstraction.substeps,
            radius_override: None,
        }
    }

    pub fn spec(&self) -> Result<SpecProblem> {
        let avoid = if self.sets.obstacles.is_empty() {
            None
        } else {
            Some(BoxUnion::new(self.sets.obstacles.clone())?)
        };
        SpecProblem::new(self.sets.target.clone(), avoid)
    }

    /// Schema version, set dimensions, quantization constraints, target
    /// inside the domain and disjoint from every obstacle.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let sys = self.build_system()?;
        let n = sys.state_dim();
        for b in &self.sets.obstacles {
            b.validate()?;
        }
        let dims = [
            ("domain", self.sets.domain.dim()),
            ("target", self.sets.target.dim()),
        ]
        .into_iter()
        .chain(self.sets.obstacles.iter().map(|b| ("obstacle", b.dim())));
        for (what, d) in dims {
            if d != n {
                return Err(Error::Config(format!(
                    "{what} has dimension {d}, system state has {n}"
                )));
            }
        }
        self.quantization
            .validate(sys.input_set(), &self.sets.domain)?;
        for t in self.sets.target.boxes() {
            let inside = self
                .sets
                .domain
                .boxes()
                .iter()
                .any(|d| (0..n).all(|i| d.lower[i] <= t.lower[i] && t.upper[i] <= d.upper[i]));
            if !inside {
                return Err(Error::Config(format!(
                    "target box {:?}..{:?} is not inside a domain box",
                    t.lower, t.upper
                )));
            }
            for o in &self.sets.obstacles {
                if (0..n).all(|i| t.lower[i] < o.upper[i] && o.lower[i] < t.upper[i]) {
                    return Err(Error::Config(format!(
                        "target box {:?}..{:?} overlaps obstacle {:?}..{:?}",
                        t.lower, t.upper, o.lower, o.upper
                    )));
                }
            }
        }
        for x in &self.simulation.initial_conditions {
            if x.len() != n {
                return Err(Error::Config(format!(
                    "initial condition {x:?} does not have dimension {n}"
                )));
            }
        }
        if self.synthesis.stay_horizon == 0 {
            return Err(Error::Config("stay_horizon must be at least 1".into()));
        }
        if self.abstraction.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        // Build the bound once so that bad parameters surface at load time.
        self.growth_bound(&sys)?;
        Ok(())
    }
}
