//! Receding-horizon MPC on the zero-order-hold discretised plant model.
//!
//! Cost over `Np` prediction steps and `Nc` free moves (held afterwards):
//! `sum Q (G_k - sp)^2 + sum R (u_j - basal)^2`, solved in closed form and
//! clamped to the actuator range. Prediction matrices are cached and only
//! rebuilt when the model the engine hands over changes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::pid::check_setpoint;
use super::{reject, Controller, Diagnostics, TickContext};
use crate::ap::{GLUCOSE, INSULIN_INPUT};
use crate::error::{Result, SimError};
use crate::linalg::discretize_zoh;
use crate::ltv::FrozenSystem;
use crate::wmn::ConfigRecord;

const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Minutes.
    pub prediction_horizon: f64,
    /// Minutes.
    pub control_horizon: f64,
    /// Prediction step (minutes); the controller tick period.
    pub step: f64,
    pub setpoint: f64,
    /// Weight on squared glucose error ((mg/dL)^-2).
    pub q: f64,
    /// Weight on squared deviation from basal (command units^-2).
    pub r: f64,
    pub basal: f64,
    pub u_max: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            prediction_horizon: 60.0,
            control_horizon: 30.0,
            step: 5.0,
            setpoint: 120.0,
            q: 1.0,
            r: 2000.0,
            basal: 0.15,
            u_max: 1.0,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || self.prediction_horizon < self.step {
            return Err(SimError::Config("MPC step must be positive and fit the horizon".into()));
        }
        if self.control_horizon > self.prediction_horizon || self.control_horizon < self.step {
            return Err(SimError::Config(format!(
                "MPC control horizon {} must lie in [step, prediction horizon {}]",
                self.control_horizon, self.prediction_horizon
            )));
        }
        if !(self.q > 0.0) || !(self.r > 0.0) {
            return Err(SimError::Config("MPC weights must be positive".into()));
        }
        check_setpoint(self.setpoint)?;
        if !(self.u_max > 0.0) || self.basal < 0.0 {
            return Err(SimError::Config("MPC needs u_max > 0 and basal >= 0".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> (usize, usize) {
        (
            (self.prediction_horizon / self.step).round() as usize,
            (self.control_horizon / self.step).round() as usize,
        )
    }
}

/// Stacked prediction for one model.
#[derive(Debug, Clone)]
struct Prediction {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    ad: DMatrix<f64>,
    bd: DMatrix<f64>,
    free: DMatrix<f64>,
    moves: DMatrix<f64>,
    disturbance: DMatrix<f64>,
    /// `(Q Φ'Φ + R I)^{-1} Q Φ'`.
    gain: DMatrix<f64>,
}

/// Unconstrained MPC solver, independent of the controller plumbing.
#[derive(Debug, Clone)]
pub struct MpcCore {
    pub np: usize,
    pub nc: usize,
    pub q: f64,
    pub r: f64,
    pub step: f64,
    pub control: usize,
    pub output: usize,
    cache: Option<Prediction>,
    pub rebuilds: usize,
    pub ridge_fallbacks: usize,
}

impl MpcCore {
    pub fn new(np: usize, nc: usize, q: f64, r: f64, step: f64, control: usize, output: usize) -> Self {
        Self {
            np,
            nc,
            q,
            r,
            step,
            control,
            output,
            cache: None,
            rebuilds: 0,
            ridge_fallbacks: 0,
        }
    }

    pub fn set_weights(&mut self, q: f64, r: f64) {
        self.q = q;
        self.r = r;
        self.cache = None;
    }

    /// Rebuild the stacked prediction if the model changed. Returns whether a
    /// rebuild happened.
    pub fn prepare(&mut self, model: &FrozenSystem) -> bool {
        if let Some(c) = &self.cache {
            if c.a == model.a && c.b == model.b {
                return false;
            }
        }
        let (ad, bd) = discretize_zoh(&model.a, &model.b, self.step);
        let n = ad.nrows();
        let m = bd.ncols();
        let bu = bd.column(self.control).into_owned();
        let mut bw = bd.clone();
        bw.column_mut(self.control).fill(0.0);

        // rows c' Ad^k, k = 0..np
        let mut powers = Vec::with_capacity(self.np + 1);
        let mut row = DMatrix::zeros(1, n);
        row[(0, self.output)] = 1.0;
        for _ in 0..=self.np {
            powers.push(row.clone());
            row = &row * &ad;
        }
        let mut free = DMatrix::zeros(self.np, n);
        let mut moves = DMatrix::zeros(self.np, self.nc);
        let mut disturbance = DMatrix::zeros(self.np, m);
        for k in 1..=self.np {
            free.row_mut(k - 1).copy_from(&powers[k]);
            for j in 0..k {
                let cp = &powers[k - 1 - j];
                moves[(k - 1, j.min(self.nc - 1))] += (cp * &bu)[(0, 0)];
                let dw = cp * &bw;
                for c in 0..m {
                    disturbance[(k - 1, c)] += dw[(0, c)];
                }
            }
        }
        let mut h = moves.transpose() * &moves * self.q;
        for i in 0..self.nc {
            h[(i, i)] += self.r;
        }
        let rhs = moves.transpose() * self.q;
        let gain = match h.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                self.ridge_fallbacks += 1;
                for i in 0..self.nc {
                    h[(i, i)] += RIDGE;
                }
                h.lu().solve(&rhs).unwrap_or_else(|| DMatrix::zeros(self.nc, self.np))
            }
        };
        self.cache = Some(Prediction {
            a: model.a.clone(),
            b: model.b.clone(),
            ad,
            bd,
            free,
            moves,
            disturbance,
            gain,
        });
        self.rebuilds += 1;
        true
    }

    pub fn discretized(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        self.cache.as_ref().map(|c| (&c.ad, &c.bd))
    }

    /// Optimal move sequence (absolute commands) before clamping.
    pub fn solve(&self, x0: &DVector<f64>, exogenous: &DVector<f64>, setpoint: f64, basal: f64) -> DVector<f64> {
        let c = self.cache.as_ref().expect("prepare() before solve()");
        let mut w = exogenous.clone();
        w[self.control] = 0.0;
        let free = &c.free * x0 + &c.moves * DVector::from_element(self.nc, basal) + &c.disturbance * w;
        let err = free.add_scalar(-setpoint);
        let delta = -(&c.gain * err);
        delta.add_scalar(basal)
    }

    /// Cost of a move sequence from the stacked prediction.
    pub fn cost(
        &self,
        x0: &DVector<f64>,
        exogenous: &DVector<f64>,
        setpoint: f64,
        basal: f64,
        moves: &DVector<f64>,
    ) -> f64 {
        let c = self.cache.as_ref().expect("prepare() before cost()");
        let mut w = exogenous.clone();
        w[self.control] = 0.0;
        let g = &c.free * x0 + &c.moves * moves + &c.disturbance * w;
        let track: f64 = g.iter().map(|v| (v - setpoint).powi(2)).sum();
        let effort: f64 = moves.iter().map(|v| (v - basal).powi(2)).sum();
        self.q * track + self.r * effort
    }
}

#[derive(Debug, Clone)]
pub struct Mpc {
    cfg: MpcConfig,
    core: MpcCore,
    ticks: usize,
}

impl Mpc {
    pub fn new(cfg: MpcConfig) -> Result<Self> {
        cfg.validate()?;
        let (np, nc) = cfg.steps();
        let core = MpcCore::new(np, nc, cfg.q, cfg.r, cfg.step, INSULIN_INPUT, GLUCOSE);
        Ok(Self { cfg, core, ticks: 0 })
    }

    pub fn core(&self) -> &MpcCore {
        &self.core
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    /// Command for a state and model, without touching tick bookkeeping.
    pub fn command(&mut self, state: &DVector<f64>, exogenous: &DVector<f64>, model: &FrozenSystem) -> f64 {
        self.core.prepare(model);
        let v = self.core.solve(state, exogenous, self.cfg.setpoint, self.cfg.basal);
        v[0].clamp(0.0, self.cfg.u_max)
    }
}

impl Controller for Mpc {
    fn kind(&self) -> &'static str {
        "mpc"
    }

    fn channels(&self) -> &[usize] {
        &[INSULIN_INPUT]
    }

    fn validate(&self, record: &ConfigRecord) -> Result<()> {
        match record {
            ConfigRecord::Setpoint { value } => check_setpoint(*value),
            ConfigRecord::MpcWeights { q, r } if *q > 0.0 && *r > 0.0 => Ok(()),
            ConfigRecord::MealAnnouncement { .. } | ConfigRecord::Noop => Ok(()),
            other => Err(reject(self.kind(), other)),
        }
    }

    fn apply(&mut self, record: &ConfigRecord) -> Result<()> {
        self.validate(record)?;
        match record {
            ConfigRecord::Setpoint { value } => self.cfg.setpoint = *value,
            ConfigRecord::MpcWeights { q, r } => {
                self.cfg.q = *q;
                self.cfg.r = *r;
                self.core.set_weights(*q, *r);
            }
            _ => {}
        }
        Ok(())
    }

    fn tick(&mut self, ctx: &TickContext<'_>) -> DVector<f64> {
        self.ticks += 1;
        DVector::from_element(1, self.command(ctx.state, ctx.exogenous, ctx.model))
    }

    fn diagnostics(&self) -> Diagnostics {
        Diagnostics {
            ticks: self.ticks,
            model_rebuilds: self.core.rebuilds,
            ridge_fallbacks: self.core.ridge_fallbacks,
            riccati_failures: 0,
        }
    }
}
