//! Network-hosted control laws `u = g(Y, X)`.
//!
//! A controller owns a subset of the plant's input channels. It is ticked on
//! a fixed cadence and holds its command in between; configuration records
//! arrive as events and may change its behaviour.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::ltv::FrozenSystem;
use crate::wmn::ConfigRecord;

pub mod lqg;
pub mod markov;
pub mod mpc;
pub mod pid;
pub mod riccati;

pub use lqg::{BayesianLqg, LqgConfig};
pub use markov::MealMarkovModel;
pub use mpc::{Mpc, MpcConfig};
pub use pid::{Pid, PidConfig};

pub struct TickContext<'a> {
    pub t: f64,
    /// Plant state as seen by the engine.
    pub state: &'a DVector<f64>,
    /// Uncontrolled input levels at `t`.
    pub exogenous: &'a DVector<f64>,
    /// Plant model the engine is using at `t`.
    pub model: &'a FrozenSystem,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub ticks: usize,
    pub model_rebuilds: usize,
    pub ridge_fallbacks: usize,
    pub riccati_failures: usize,
}

pub trait Controller: Send {
    fn kind(&self) -> &'static str;

    /// Input channels this controller writes.
    fn channels(&self) -> &[usize];

    /// Schema check for a configuration record.
    fn validate(&self, record: &ConfigRecord) -> Result<()>;

    fn apply(&mut self, record: &ConfigRecord) -> Result<()>;

    /// Commands for [`Controller::channels`].
    fn tick(&mut self, ctx: &TickContext<'_>) -> DVector<f64>;

    fn diagnostics(&self) -> Diagnostics {
        Diagnostics::default()
    }
}

pub(crate) fn reject(kind: &str, record: &ConfigRecord) -> SimError {
    SimError::Config(format!("{kind} controller does not accept {record:?}"))
}

/// Passes the exogenous input through unchanged.
#[derive(Debug, Clone, Default)]
pub struct OpenLoop;

impl Controller for OpenLoop {
    fn kind(&self) -> &'static str {
        "open_loop"
    }

    fn channels(&self) -> &[usize] {
        &[]
    }

    fn validate(&self, record: &ConfigRecord) -> Result<()> {
        match record {
            ConfigRecord::Noop => Ok(()),
            other => Err(reject(self.kind(), other)),
        }
    }

    fn apply(&mut self, record: &ConfigRecord) -> Result<()> {
        self.validate(record)
    }

    fn tick(&mut self, _ctx: &TickContext<'_>) -> DVector<f64> {
        DVector::zeros(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Pid,
    Mpc,
    BayesianLqg,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::Pid, ControllerKind::Mpc, ControllerKind::BayesianLqg];

    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::Pid => "PID",
            ControllerKind::Mpc => "MPC",
            ControllerKind::BayesianLqg => "Bayesian",
        }
    }
}

/// Per-kind configuration blocks of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ControllerSettings {
    pub pid: PidConfig,
    pub mpc: MpcConfig,
    pub bayesian_lqg: LqgConfig,
}

impl ControllerSettings {
    /// Instantiate a controller for a patient with basal delivery `basal`
    /// and initial state `x0`.
    pub fn build(
        &self,
        kind: ControllerKind,
        basal: f64,
        x0: &DVector<f64>,
        meal_history: &[crate::wmn::MealSize],
    ) -> Result<Box<dyn Controller>> {
        Ok(match kind {
            ControllerKind::Pid => Box::new(Pid::new(PidConfig { basal, ..self.pid.clone() })?),
            ControllerKind::Mpc => Box::new(Mpc::new(MpcConfig { basal, ..self.mpc.clone() })?),
            ControllerKind::BayesianLqg => Box::new(BayesianLqg::new(
                LqgConfig { basal, ..self.bayesian_lqg.clone() },
                x0.clone(),
                meal_history,
            )?),
        })
    }
}
