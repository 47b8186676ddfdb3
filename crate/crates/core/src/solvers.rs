//! Integration kernels: fixed-step explicit Euler and the Dormand–Prince
//! 5(4) embedded pair with dense output.
//!
//! Both produce samples on the same uniform grid `t_start + k * q_sim`
//! (with a final shortened step landing on `t_end`), so traces from
//! different engines can be compared sample by sample.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Result, SimError};
use crate::ltv::{InputSignal, Trace};

pub type RhsFn = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
pub struct OdeProblem {
    pub rhs: RhsFn,
    pub input: InputSignal,
    pub x0: DVector<f64>,
    pub span: (f64, f64),
}

impl OdeProblem {
    pub fn new<F>(rhs: F, input: InputSignal, x0: DVector<f64>, span: (f64, f64)) -> Self
    where
        F: Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            rhs: Arc::new(rhs),
            input,
            x0,
            span,
        }
    }

    fn validate(&self, q_sim: f64) -> Result<()> {
        let (t0, t1) = self.span;
        if !(q_sim > 0.0) {
            return Err(SimError::Config(format!("q_sim must be positive, got {q_sim}")));
        }
        if t1 - t0 < q_sim - 1e-12 {
            return Err(SimError::Config(format!(
                "span [{t0}, {t1}] shorter than one step {q_sim}"
            )));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Divergence { t: t0 });
        }
        self.input.segment_index(t0)?;
        self.input.segment_index(t1)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Fixed output/Euler step (minutes).
    pub q_sim: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Largest adaptive step (minutes).
    pub max_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            q_sim: 1.0,
            rel_tol: 1e-6,
            abs_tol: 1e-8,
            max_step: 60.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_sim > 0.0 && self.rel_tol > 0.0 && self.abs_tol > 0.0 && self.max_step > 0.0) {
            return Err(SimError::Config(format!(
                "solver settings must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Sample times `t0 + k q` strictly before `t1`, followed by `t1`.
pub fn uniform_grid(t0: f64, t1: f64, q: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(((t1 - t0) / q).ceil() as usize + 1);
    let mut k = 0usize;
    loop {
        let t = t0 + k as f64 * q;
        if t >= t1 - 1e-9 * q {
            break;
        }
        out.push(t);
        k += 1;
    }
    out.push(t1);
    out
}

#[inline]
pub(crate) fn euler_step(x: &DVector<f64>, dx: &DVector<f64>, h: f64) -> DVector<f64> {
    x + dx * h
}

pub(crate) fn is_finite(x: &DVector<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Forward Euler at fixed step `q_sim` with `u` sampled at each step start.
pub fn euler_fixed(problem: &OdeProblem, q_sim: f64) -> Result<Trace> {
    problem.validate(q_sim)?;
    let (t0, t1) = problem.span;
    let grid = uniform_grid(t0, t1, q_sim);
    let mut trace = Trace::new("euler");
    let mut x = problem.x0.clone();
    for w in grid.windows(2) {
        let (t, next) = (w[0], w[1]);
        let u = problem.input.evaluate(t)?;
        let dx = (problem.rhs)(t, &x, u);
        let x_next = euler_step(&x, &dx, next - t);
        trace.push(t, x, u.clone());
        if !is_finite(&x_next) {
            return Err(SimError::Divergence { t: next });
        }
        x = x_next;
    }
    let u = problem.input.evaluate(t1)?.clone();
    trace.push(t1, x, u);
    Ok(trace)
}

// Dormand–Prince 5(4) coefficients.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// continuous extension
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;
const PI_BETA: f64 = 0.04;
const H_MIN: f64 = 1e-10;
const MAX_STEPS: usize = 10_000_000;

/// Adaptive Dormand–Prince integrator. Keeps the last accepted step as the
/// starting guess for the next segment.
#[derive(Debug, Clone)]
pub struct Rk45 {
    cfg: SolverConfig,
    h_hint: Option<f64>,
    pub accepted: usize,
    pub rejected: usize,
}

impl Rk45 {
    pub fn new(cfg: SolverConfig) -> Self {
        Self {
            cfg,
            h_hint: None,
            accepted: 0,
            rejected: 0,
        }
    }

    fn error_norm(&self, err: &DVector<f64>, y0: &DVector<f64>, y1: &DVector<f64>) -> f64 {
        let n = err.len().max(1) as f64;
        let s: f64 = err
            .iter()
            .zip(y0.iter().zip(y1.iter()))
            .map(|(e, (a, b))| {
                let sc = self.cfg.abs_tol + self.cfg.rel_tol * a.abs().max(b.abs());
                (e / sc).powi(2)
            })
            .sum();
        (s / n).sqrt()
    }

    fn initial_step<F>(&self, f: &F, t0: f64, x0: &DVector<f64>, f0: &DVector<f64>, span: f64) -> f64
    where
        F: Fn(f64, &DVector<f64>) -> DVector<f64>,
    {
        let scale = |v: &DVector<f64>| {
            let n = v.len().max(1) as f64;
            (v.iter()
                .zip(x0.iter())
                .map(|(a, x)| (a / (self.cfg.abs_tol + self.cfg.rel_tol * x.abs())).powi(2))
                .sum::<f64>()
                / n)
                .sqrt()
        };
        let d0 = scale(x0);
        let d1 = scale(f0);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span);
        let x1 = x0 + f0 * h0;
        let f1 = f(t0 + h0, &x1);
        let d2 = scale(&(&f1 - f0)) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(1.0 / 5.0)
        };
        (100.0 * h0).min(h1).min(span).min(self.cfg.max_step)
    }

    /// Integrate `dx/dt = f(t, x)` from `t0` to `t1`, writing the state at each
    /// of `sample_times` (ascending, within `(t0, t1]`) into `out`.
    pub fn integrate<F>(
        &mut self,
        f: F,
        t0: f64,
        x0: &DVector<f64>,
        t1: f64,
        sample_times: &[f64],
        out: &mut Vec<DVector<f64>>,
    ) -> Result<DVector<f64>>
    where
        F: Fn(f64, &DVector<f64>) -> DVector<f64>,
    {
        let span = t1 - t0;
        if span <= 0.0 {
            return Ok(x0.clone());
        }
        let mut t = t0;
        let mut y = x0.clone();
        let mut k1 = f(t, &y);
        let mut h = match self.h_hint {
            Some(h) => h.min(span).min(self.cfg.max_step),
            None => self.initial_step(&f, t0, x0, &k1, span),
        };
        let mut err_prev: f64 = 1e-4;
        let mut next_sample = 0usize;
        let mut steps = 0usize;

        while t < t1 {
            steps += 1;
            if steps > MAX_STEPS {
                return Err(SimError::Stiffness { t, h });
            }
            let mut last = false;
            if t + h >= t1 - 1e-12 * span.max(1.0) {
                h = t1 - t;
                last = true;
            }
            if h < H_MIN {
                return Err(SimError::Stiffness { t, h });
            }
            let k2 = f(t + C2 * h, &(&y + &k1 * (h * A21)));
            let k3 = f(t + C3 * h, &(&y + (&k1 * A31 + &k2 * A32) * h));
            let k4 = f(t + C4 * h, &(&y + (&k1 * A41 + &k2 * A42 + &k3 * A43) * h));
            let k5 = f(
                t + C5 * h,
                &(&y + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h),
            );
            let k6 = f(
                t + h,
                &(&y + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h),
            );
            let y_new = &y + (&k1 * A71 + &k3 * A73 + &k4 * A74 + &k5 * A75 + &k6 * A76) * h;
            let t_new = if last { t1 } else { t + h };
            let k7 = f(t_new, &y_new);
            let err_vec = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
            let err = self.error_norm(&err_vec, &y, &y_new);
            if !err.is_finite() || !is_finite(&y_new) {
                if h * 0.5 < H_MIN {
                    return Err(SimError::Divergence { t });
                }
                h *= 0.5;
                self.rejected += 1;
                continue;
            }

            if err <= 1.0 {
                // dense output for samples inside (t, t_new]
                while next_sample < sample_times.len() && sample_times[next_sample] <= t_new + 1e-12 {
                    let s = sample_times[next_sample];
                    if (s - t_new).abs() <= 1e-12 {
                        out.push(y_new.clone());
                    } else {
                        let theta = (s - t) / h;
                        let theta1 = 1.0 - theta;
                        let r2 = &y_new - &y;
                        let r3 = &k1 * h - &r2;
                        let r4 = &r2 - &k7 * h - &r3;
                        let r5 = (&k1 * D1 + &k3 * D3 + &k4 * D4 + &k5 * D5 + &k6 * D6 + &k7 * D7) * h;
                        out.push(&y + (r2 + (r3 + (r4 + r5 * theta1) * theta) * theta1) * theta);
                    }
                    next_sample += 1;
                }
                let fac = if err == 0.0 {
                    FAC_MAX
                } else {
                    (SAFETY * err.powf(-(0.2 - 0.75 * PI_BETA)) * err_prev.powf(PI_BETA))
                        .clamp(FAC_MIN, FAC_MAX)
                };
                err_prev = err.max(1e-4);
                self.accepted += 1;
                if !last {
                    self.h_hint = Some(h);
                }
                t = t_new;
                y = y_new;
                k1 = k7;
                h = (h * fac).min(self.cfg.max_step);
            } else {
                self.rejected += 1;
                let fac = (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, 1.0);
                h *= fac;
            }
        }
        Ok(y)
    }
}

/// Adaptive Dormand–Prince over the problem span, restarting at every input
/// breakpoint and resampling onto the `q_sim` grid.
pub fn rk45_adaptive(problem: &OdeProblem, cfg: &SolverConfig) -> Result<Trace> {
    cfg.validate()?;
    problem.validate(cfg.q_sim)?;
    let (t0, t1) = problem.span;
    let grid = uniform_grid(t0, t1, cfg.q_sim);
    let mut cuts: Vec<f64> = problem
        .input
        .breakpoints()
        .iter()
        .copied()
        .filter(|&b| b > t0 && b < t1)
        .collect();
    cuts.push(t1);

    let mut states = Vec::with_capacity(grid.len());
    states.push(problem.x0.clone());
    let mut solver = Rk45::new(*cfg);
    let mut x = problem.x0.clone();
    let mut seg_start = t0;
    let mut g = 1usize;
    for &seg_end in &cuts {
        let u = problem.input.evaluate(seg_start)?.clone();
        let g_end = grid[g..].partition_point(|&s| s <= seg_end + 1e-12) + g;
        let rhs = &problem.rhs;
        x = solver.integrate(
            |t, y| rhs(t, y, &u),
            seg_start,
            &x,
            seg_end,
            &grid[g..g_end],
            &mut states,
        )?;
        g = g_end;
        seg_start = seg_end;
    }
    let mut trace = Trace::new("rk45");
    for (t, s) in grid.iter().zip(states) {
        let u = problem.input.evaluate(*t)?.clone();
        trace.push(*t, s, u);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn decay(x0: f64, span: (f64, f64)) -> OdeProblem {
        OdeProblem::new(
            |_, x, _| -x,
            InputSignal::constant(dvector![], span.1),
            dvector![x0],
            span,
        )
    }

    #[test]
    fn grid_shortens_last_step() {
        assert_eq!(uniform_grid(0.0, 2.5, 1.0), vec![0.0, 1.0, 2.0, 2.5]);
        assert_eq!(uniform_grid(0.0, 2.0, 1.0), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn euler_zero_dynamics() {
        let p = OdeProblem::new(
            |_, x, _| x * 0.0,
            InputSignal::constant(dvector![], 10.0),
            dvector![7.0],
            (0.0, 10.0),
        );
        let tr = euler_fixed(&p, 1.0).unwrap();
        assert_eq!(tr.len(), 11);
        assert!(tr.states.iter().all(|s| s[0] == 7.0));
    }

    #[test]
    fn euler_single_step() {
        let tr = euler_fixed(&decay(1.0, (0.0, 0.1)), 0.1).unwrap();
        assert!((tr.states[1][0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn euler_exponential_accuracy() {
        let tr = euler_fixed(&decay(1.0, (0.0, 1.0)), 0.001).unwrap();
        assert!((tr.last_state().unwrap()[0] - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn euler_divergence_is_reported() {
        let p = OdeProblem::new(
            |_, x, _| x * 1e200,
            InputSignal::constant(dvector![], 10.0),
            dvector![1e200],
            (0.0, 10.0),
        );
        assert!(matches!(euler_fixed(&p, 1.0), Err(SimError::Divergence { .. })));
    }

    #[test]
    fn rk45_exponential() {
        let cfg = SolverConfig {
            q_sim: 0.1,
            rel_tol: 1e-8,
            abs_tol: 1e-12,
            ..Default::default()
        };
        let tr = rk45_adaptive(&decay(1.0, (0.0, 1.0)), &cfg).unwrap();
        assert!((tr.last_state().unwrap()[0] - (-1.0f64).exp()).abs() < 1e-7);
        // dense output on the interior grid
        for (t, s) in tr.times.iter().zip(&tr.states) {
            assert!((s[0] - (-t).exp()).abs() < 1e-7, "t = {t}");
        }
    }

    #[test]
    fn rk45_rotation_returns() {
        let a = dmatrix![0.0, 1.0; -1.0, 0.0];
        let p = OdeProblem::new(
            move |_, x, _| &a * x,
            InputSignal::constant(dvector![], 2.0 * std::f64::consts::PI),
            dvector![1.0, 0.0],
            (0.0, 2.0 * std::f64::consts::PI),
        );
        let cfg = SolverConfig {
            q_sim: 0.1,
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            ..Default::default()
        };
        let end = rk45_adaptive(&p, &cfg).unwrap().last_state().unwrap().clone();
        assert!((end - dvector![1.0, 0.0]).norm() < 1e-6);
    }

    #[test]
    fn rk45_zero_dynamics() {
        let p = OdeProblem::new(
            |_, x, _| x * 0.0,
            InputSignal::constant(dvector![], 10.0),
            dvector![3.0],
            (0.0, 10.0),
        );
        for tol in [1e-3, 1e-9] {
            let cfg = SolverConfig {
                rel_tol: tol,
                ..Default::default()
            };
            let tr = rk45_adaptive(&p, &cfg).unwrap();
            assert!(tr.states.iter().all(|s| s[0] == 3.0));
        }
    }

    #[test]
    fn rk45_respects_breakpoints() {
        // dx/dt = u - x with a step in u at t = 3.5
        let input =
            InputSignal::new(vec![0.0, 3.5], vec![dvector![0.0], dvector![1.0]], 8.0).unwrap();
        let p = OdeProblem::new(|_, x, u| u - x, input, dvector![1.0], (0.0, 8.0));
        let cfg = SolverConfig {
            q_sim: 0.5,
            rel_tol: 1e-9,
            abs_tol: 1e-12,
            ..Default::default()
        };
        let tr = rk45_adaptive(&p, &cfg).unwrap();
        for (t, s) in tr.times.iter().zip(&tr.states) {
            let exact = if *t < 3.5 {
                (-t).exp()
            } else {
                let xb = (-3.5f64).exp();
                1.0 + (xb - 1.0) * (-(t - 3.5)).exp()
            };
            assert!((s[0] - exact).abs() < 1e-8, "t = {t}");
        }
    }

    #[test]
    fn step_underflow_is_stiffness() {
        let cfg = SolverConfig {
            rel_tol: 1e-14,
            abs_tol: 1e-300,
            ..Default::default()
        };
        // finite-time blow-up at t = 1
        let p = OdeProblem::new(
            |_, x, _| x.map(|v| v * v),
            InputSignal::constant(dvector![], 2.0),
            dvector![1.0],
            (0.0, 2.0),
        );
        assert!(matches!(
            rk45_adaptive(&p, &cfg),
            Err(SimError::Stiffness { .. }) | Err(SimError::Divergence { .. })
        ));
    }
}
