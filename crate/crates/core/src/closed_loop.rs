//! Shared closed-loop driver. Every engine advances the plant between
//! "stops" (controller ticks, configuration events, exogenous input edges
//! and engine-specific boundaries) with the input held constant.

use std::time::Instant;

use nalgebra::DVector;

use crate::controllers::{Controller, TickContext};
use crate::error::{Result, SimError};
use crate::ltv::{FrozenSystem, InputSignal, TimeVaryingLinearSystem, Trace};
use crate::solvers::{is_finite, uniform_grid};
use crate::wmn::WmnEventSchedule;

/// Everything an engine needs besides the controller.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub sys: TimeVaryingLinearSystem,
    /// Full input vector before the controller overrides its channels.
    pub exogenous: InputSignal,
    pub schedule: WmnEventSchedule,
    pub x0: DVector<f64>,
    pub span: (f64, f64),
    pub q_sim: f64,
    /// Controller sampling period (minutes).
    pub tick_period: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let (t0, t1) = self.span;
        if !(self.q_sim > 0.0) || !(self.tick_period >= self.q_sim) {
            return Err(SimError::Config(format!(
                "need 0 < q_sim <= tick_period, got q_sim = {}, tick = {}",
                self.q_sim, self.tick_period
            )));
        }
        if t1 - t0 < self.q_sim {
            return Err(SimError::Config(format!("span [{t0}, {t1}] too short")));
        }
        if self.x0.len() != self.sys.n() {
            return Err(SimError::Shape(format!(
                "x0 has {} entries, plant has {} states",
                self.x0.len(),
                self.sys.n()
            )));
        }
        if self.exogenous.m() != self.sys.m() {
            return Err(SimError::Shape(format!(
                "input has {} channels, plant expects {}",
                self.exogenous.m(),
                self.sys.m()
            )));
        }
        self.exogenous.segment_index(t1)?;
        self.exogenous.validate_width(self.q_sim)?;
        self.schedule.check_within(self.span)
    }

    pub fn grid(&self) -> Vec<f64> {
        uniform_grid(self.span.0, self.span.1, self.q_sim)
    }

    pub fn tick_times(&self) -> Vec<f64> {
        uniform_grid(self.span.0, self.span.1, self.tick_period)
            .into_iter()
            .filter(|&t| t < self.span.1)
            .collect()
    }

    pub(crate) fn grid_index(&self, t: f64) -> Result<usize> {
        let k = ((t - self.span.0) / self.q_sim).round();
        let on_grid = (self.span.0 + k * self.q_sim - t).abs() < 1e-6 || (t - self.span.1).abs() < 1e-9;
        if !on_grid || k < 0.0 {
            return Err(SimError::Config(format!(
                "time {t} does not fall on the q_sim = {} grid",
                self.q_sim
            )));
        }
        let last = self.grid().len() - 1;
        Ok(if (t - self.span.1).abs() < 1e-9 { last } else { (k as usize).min(last) })
    }
}

pub(crate) trait Engine {
    fn label(&self) -> String;

    /// Extra grid-aligned boundaries.
    fn stops(&self, _scn: &Scenario) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }

    /// Plant model handed to the controller at a tick.
    fn controller_model(&mut self, scn: &Scenario, t: f64) -> Result<FrozenSystem>;

    /// Advance from `t0` to `t1` with input `u`, pushing the state at each of
    /// `samples` (grid points in `(t0, t1]`).
    #[allow(clippy::too_many_arguments)]
    fn advance(
        &mut self,
        scn: &Scenario,
        t0: f64,
        x: &DVector<f64>,
        t1: f64,
        u: &DVector<f64>,
        samples: &[f64],
        out: &mut Vec<DVector<f64>>,
    ) -> Result<DVector<f64>>;
}

pub(crate) fn drive<E: Engine>(
    scn: &Scenario,
    controller: &mut dyn Controller,
    engine: &mut E,
) -> Result<Trace> {
    scn.validate()?;
    for ev in scn.schedule.events() {
        controller.validate(&ev.record)?;
        scn.grid_index(ev.time)?;
    }
    let grid = scn.grid();
    let last = grid.len() - 1;

    let mut stops = vec![0, last];
    let mut ticks = vec![false; grid.len()];
    for t in scn.tick_times() {
        let k = scn.grid_index(t)?;
        ticks[k] = true;
        stops.push(k);
    }
    for t in scn.schedule.times() {
        stops.push(scn.grid_index(t)?);
    }
    for &b in scn.exogenous.breakpoints() {
        if b > scn.span.0 && b < scn.span.1 {
            stops.push(scn.grid_index(b)?);
        }
    }
    for t in engine.stops(scn)? {
        if t > scn.span.0 && t < scn.span.1 {
            stops.push(scn.grid_index(t)?);
        }
    }
    stops.sort_unstable();
    stops.dedup();

    let channels = controller.channels().to_vec();
    let mut states = Vec::with_capacity(grid.len());
    let mut inputs = Vec::with_capacity(grid.len());
    let mut x = scn.x0.clone();
    states.push(x.clone());
    let mut command = DVector::zeros(channels.len());

    let started = Instant::now();
    for w in stops.windows(2) {
        let (ka, kb) = (w[0], w[1]);
        let t = grid[ka];
        for ev in scn.schedule.at(t) {
            controller.apply(&ev.record)?;
        }
        let exo = scn.exogenous.evaluate(t)?;
        if ticks[ka] {
            let model = engine.controller_model(scn, t)?;
            command = controller.tick(&TickContext {
                t,
                state: &x,
                exogenous: exo,
                model: &model,
            });
            if !is_finite(&command) || command.len() != channels.len() {
                return Err(SimError::Divergence { t });
            }
        }
        let mut u = exo.clone();
        for (c, &ch) in channels.iter().enumerate() {
            u[ch] = command[c];
        }
        x = engine.advance(scn, t, &x, grid[kb], &u, &grid[ka + 1..=kb], &mut states)?;
        inputs.extend(std::iter::repeat_n(u, kb - ka));
    }
    let elapsed = started.elapsed().as_secs_f64();

    // last sample carries the input that would apply next
    let mut u_end = scn.exogenous.evaluate(grid[last])?.clone();
    for (c, &ch) in channels.iter().enumerate() {
        u_end[ch] = command[c];
    }
    inputs.push(u_end);

    Ok(Trace {
        times: grid,
        states,
        inputs,
        event_times: scn.schedule.times(),
        engine: engine.label(),
        wall_clock_seconds: Some(elapsed),
    })
}
