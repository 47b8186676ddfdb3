use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{reject, Controller, Diagnostics, TickContext};
use crate::ap::{GLUCOSE, INSULIN_INPUT};
use crate::error::{Result, SimError};
use crate::wmn::ConfigRecord;

/// Gains are in insulin-command units per mg/dL (per mg/dL·min for `ki`,
/// per mg/dL/min for `kd`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// mg/dL
    pub setpoint: f64,
    /// Command at zero error.
    pub basal: f64,
    pub u_max: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            kp: 0.002,
            ki: 1.5e-5,
            kd: 0.05,
            setpoint: 120.0,
            basal: 0.15,
            u_max: 1.0,
        }
    }
}

impl PidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kp < 0.0 || self.ki < 0.0 || self.kd < 0.0 {
            return Err(SimError::Config(format!(
                "PID gains must be non-negative: kp = {}, ki = {}, kd = {}",
                self.kp, self.ki, self.kd
            )));
        }
        check_setpoint(self.setpoint)?;
        if !(self.u_max > 0.0) || self.basal < 0.0 {
            return Err(SimError::Config("PID needs u_max > 0 and basal >= 0".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_setpoint(sp: f64) -> Result<()> {
    if !(sp > 70.0 && sp < 180.0) {
        return Err(SimError::Config(format!("setpoint {sp} outside (70, 180) mg/dL")));
    }
    Ok(())
}

/// Output of one PID evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidOutput {
    /// Before clamping.
    pub raw: f64,
    pub command: f64,
}

#[derive(Debug, Clone)]
pub struct Pid {
    cfg: PidConfig,
    integral: f64,
    prev_error: Option<f64>,
    last_t: Option<f64>,
    diag: Diagnostics,
}

impl Pid {
    pub fn new(cfg: PidConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            integral: 0.0,
            prev_error: None,
            last_t: None,
            diag: Diagnostics::default(),
        })
    }

    pub fn config(&self) -> &PidConfig {
        &self.cfg
    }

    /// One controller update with sample spacing `dt`. Trapezoidal integral,
    /// backward-difference derivative; the integral is frozen while the
    /// output saturates.
    pub fn step(&mut self, glucose: f64, dt: f64) -> PidOutput {
        let e = glucose - self.cfg.setpoint;
        let (candidate, deriv) = match self.prev_error {
            Some(prev) if dt > 0.0 => (self.integral + 0.5 * (e + prev) * dt, (e - prev) / dt),
            _ => (self.integral, 0.0),
        };
        let raw = self.cfg.basal + self.cfg.kp * e + self.cfg.ki * candidate + self.cfg.kd * deriv;
        let command = raw.clamp(0.0, self.cfg.u_max);
        if command == raw {
            self.integral = candidate;
        }
        self.prev_error = Some(e);
        PidOutput { raw, command }
    }
}

impl Controller for Pid {
    fn kind(&self) -> &'static str {
        "pid"
    }

    fn channels(&self) -> &[usize] {
        &[INSULIN_INPUT]
    }

    fn validate(&self, record: &ConfigRecord) -> Result<()> {
        match record {
            ConfigRecord::Setpoint { value } => check_setpoint(*value),
            ConfigRecord::PidGains { kp, ki, kd } => PidConfig {
                kp: *kp,
                ki: *ki,
                kd: *kd,
                ..self.cfg.clone()
            }
            .validate(),
            ConfigRecord::MealAnnouncement { .. } | ConfigRecord::Noop => Ok(()),
            other => Err(reject(self.kind(), other)),
        }
    }

    fn apply(&mut self, record: &ConfigRecord) -> Result<()> {
        self.validate(record)?;
        match record {
            ConfigRecord::Setpoint { value } => self.cfg.setpoint = *value,
            ConfigRecord::PidGains { kp, ki, kd } => {
                self.cfg.kp = *kp;
                self.cfg.ki = *ki;
                self.cfg.kd = *kd;
            }
            _ => {}
        }
        Ok(())
    }

    fn tick(&mut self, ctx: &TickContext<'_>) -> DVector<f64> {
        let dt = self.last_t.map_or(0.0, |t| ctx.t - t);
        self.last_t = Some(ctx.t);
        self.diag.ticks += 1;
        let out = self.step(ctx.state[GLUCOSE], dt);
        DVector::from_element(1, out.command)
    }

    fn diagnostics(&self) -> Diagnostics {
        self.diag
    }
}
