//! Reference engine: the full time-varying dynamics integrated with adaptive
//! Dormand–Prince, restarted at every tick, event, input edge and
//! coefficient discontinuity.

use nalgebra::DVector;

use crate::closed_loop::{drive, Engine, Scenario};
use crate::controllers::Controller;
use crate::error::Result;
use crate::ltv::{linear_rhs, zero_order_hold, FrozenSystem, Trace};
use crate::solvers::{Rk45, SolverConfig};

pub const ORACLE_LABEL: &str = "oracle";

struct OracleEngine {
    solver: Rk45,
}

impl Engine for OracleEngine {
    fn label(&self) -> String {
        ORACLE_LABEL.into()
    }

    fn controller_model(&mut self, scn: &Scenario, t: f64) -> Result<FrozenSystem> {
        zero_order_hold(&scn.sys, t)
    }

    fn advance(
        &mut self,
        scn: &Scenario,
        t0: f64,
        x: &DVector<f64>,
        t1: f64,
        u: &DVector<f64>,
        samples: &[f64],
        out: &mut Vec<DVector<f64>>,
    ) -> Result<DVector<f64>> {
        let sys = &scn.sys;
        let rhs = |t: f64, y: &DVector<f64>| linear_rhs(&sys.a(t), &sys.b(t), y, u);
        let mut cuts: Vec<f64> = sys
            .discontinuities()
            .iter()
            .copied()
            .filter(|&d| d > t0 + 1e-9 && d < t1 - 1e-9)
            .collect();
        cuts.push(t1);
        let mut start = t0;
        let mut state = x.clone();
        let mut s = 0;
        for end in cuts {
            let s_end = s + samples[s..].partition_point(|&v| v <= end + 1e-12);
            state = self.solver.integrate(rhs, start, &state, end, &samples[s..s_end], out)?;
            s = s_end;
            start = end;
        }
        Ok(state)
    }
}

/// Simulate the closed loop on the exact time-varying plant.
pub fn oracle_simulate(scn: &Scenario, controller: &mut dyn Controller, cfg: &SolverConfig) -> Result<Trace> {
    cfg.validate()?;
    let mut engine = OracleEngine {
        solver: Rk45::new(SolverConfig { q_sim: scn.q_sim, ..*cfg }),
    };
    drive(scn, controller, &mut engine)
}
