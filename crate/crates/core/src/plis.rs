//! Piecewise linear invariant simulation.
//!
//! The horizon is cut into intervals on which `A(t)` and `B(t)` are frozen at
//! their start values. Each interval's freezing error is bounded by
//! simulating an extended system that carries the worst-case coefficient
//! drift `ν` as a second state block, and the interval width `q_inv` is
//! shrunk until every interval and the whole trace meet their budgets.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::closed_loop::{drive, Engine, Scenario};
use crate::controllers::Controller;
use crate::error::{Result, SimError};
use crate::ltv::{
    check_finite, freeze_interval, linear_rhs, max_of, FrozenSystem, InputSignal, TimeVaryingLinearSystem, Trace,
};
use crate::solvers::{euler_step, is_finite, uniform_grid};

pub const PLIS_LABEL: &str = "plis";

const RMS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    /// Per-interval (trajectory) budget, as a fraction.
    pub eps_p: f64,
    /// Whole-trace budget, as a fraction.
    pub psi_p: f64,
}

impl ErrorBudget {
    pub fn new(eps_p: f64, psi_p: f64) -> Result<Self> {
        if !(eps_p > 0.0 && eps_p <= psi_p && psi_p < 1.0) {
            return Err(SimError::Parameter(format!(
                "need 0 < eps_p <= psi_p < 1, got eps_p = {eps_p}, psi_p = {psi_p}"
            )));
        }
        Ok(Self { eps_p, psi_p })
    }
}

/// Per-entry worst-case coefficient change over one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeEstimate {
    pub nu_a: DMatrix<f64>,
    pub nu_b: DMatrix<f64>,
}

impl SlopeEstimate {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            nu_a: DMatrix::zeros(n, n),
            nu_b: DMatrix::zeros(n, m),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.nu_a.iter().chain(self.nu_b.iter()).all(|&v| v == 0.0)
    }
}

/// `H = [X_p; μ]` with `dH/dt = A_ex H + B_ex u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedSystem {
    pub a_ex: DMatrix<f64>,
    pub b_ex: DMatrix<f64>,
}

impl ExtendedSystem {
    pub fn n(&self) -> usize {
        self.a_ex.nrows() / 2
    }

    pub fn initial_state(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut h = DVector::zeros(2 * x.len());
        h.rows_mut(0, x.len()).copy_from(x);
        h
    }
}

fn keep_extreme(best: &mut f64, v: f64) {
    if v.abs() > best.abs() {
        *best = v;
    }
}

/// Signed derivative of largest magnitude on the `q_sim` grid of
/// `[start, end)`, times `q_inv`.
pub fn estimate_nu(
    sys: &TimeVaryingLinearSystem,
    interval: (f64, f64),
    q_inv: f64,
    q_sim: f64,
) -> Result<SlopeEstimate> {
    let (start, end) = interval;
    sys.check_time(start)?;
    if end > start {
        sys.check_time(end)?;
    }
    let (n, m) = (sys.n(), sys.m());
    let mut nu = SlopeEstimate::zeros(n, m);
    let mut samples: Vec<f64> = uniform_grid(start, end, q_sim);
    samples.retain(|&t| t < end - 1e-9);
    if samples.is_empty() {
        samples.push(start);
    }
    for t in samples {
        let da = sys.da_dt(t);
        let db = sys.db_dt(t);
        check_finite("dA/dt", &da, t)?;
        check_finite("dB/dt", &db, t)?;
        for (best, v) in nu.nu_a.iter_mut().zip(da.iter()) {
            keep_extreme(best, *v);
        }
        for (best, v) in nu.nu_b.iter_mut().zip(db.iter()) {
            keep_extreme(best, *v);
        }
    }
    nu.nu_a *= q_inv;
    nu.nu_b *= q_inv;
    Ok(nu)
}

pub fn build_extended_system(frozen: &FrozenSystem, nu: &SlopeEstimate) -> Result<ExtendedSystem> {
    let (n, m) = (frozen.n(), frozen.m());
    if nu.nu_a.shape() != (n, n) || nu.nu_b.shape() != (n, m) {
        return Err(SimError::Shape(format!(
            "slope estimate {:?}/{:?} does not match a system with n = {n}, m = {m}",
            nu.nu_a.shape(),
            nu.nu_b.shape()
        )));
    }
    let mut a_ex = DMatrix::zeros(2 * n, 2 * n);
    a_ex.view_mut((0, 0), (n, n)).copy_from(&(&frozen.a + &nu.nu_a));
    a_ex.view_mut((0, n), (n, n)).copy_from(&frozen.a);
    a_ex.view_mut((n, 0), (n, n)).copy_from(&nu.nu_a);
    let mut b_ex = DMatrix::zeros(2 * n, m);
    b_ex.view_mut((0, 0), (n, m)).copy_from(&(&frozen.b + &nu.nu_b));
    b_ex.view_mut((n, 0), (n, m)).copy_from(&nu.nu_b);
    Ok(ExtendedSystem { a_ex, b_ex })
}

/// Paired Euler runs of the frozen and extended systems over one interval.
struct IntervalRun {
    /// Sample times, both ends included.
    times: Vec<f64>,
    frozen: Vec<DVector<f64>>,
    bounded: Vec<DVector<f64>>,
}

fn run_interval(
    frozen: &FrozenSystem,
    ext: &ExtendedSystem,
    x_start: &DVector<f64>,
    input: &InputSignal,
    q_sim: f64,
) -> Result<IntervalRun> {
    let n = frozen.n();
    let times = uniform_grid(frozen.start, frozen.end, q_sim);
    let mut xp = x_start.clone();
    let mut h = ext.initial_state(x_start);
    let mut out_f = Vec::with_capacity(times.len());
    let mut out_b = Vec::with_capacity(times.len());
    out_f.push(xp.clone());
    out_b.push(h.rows(0, n).into_owned());
    for w in times.windows(2) {
        let (t, next) = (w[0], w[1]);
        let u = input.evaluate(t)?;
        xp = euler_step(&xp, &linear_rhs(&frozen.a, &frozen.b, &xp, u), next - t);
        h = euler_step(&h, &linear_rhs(&ext.a_ex, &ext.b_ex, &h, u), next - t);
        if !is_finite(&xp) || !is_finite(&h) {
            return Err(SimError::Divergence { t: next });
        }
        out_f.push(xp.clone());
        out_b.push(h.rows(0, n).into_owned());
    }
    Ok(IntervalRun {
        times,
        frozen: out_f,
        bounded: out_b,
    })
}

fn relative_rmse(a: &[DVector<f64>], b: &[DVector<f64>]) -> Vec<f64> {
    crate::ltv::per_state_relative_rmse(a, b, b)
}

/// Bound on the freezing error over the interval of `frozen`, starting
/// from `x_start`. Returns the maximum and the per-state relative RMSE.
pub fn interval_error_bound(
    frozen: &FrozenSystem,
    nu: &SlopeEstimate,
    x_start: &DVector<f64>,
    input: &InputSignal,
    q_sim: f64,
) -> Result<(f64, Vec<f64>)> {
    if frozen.end - frozen.start < q_sim - 1e-9 {
        return Err(SimError::Parameter(format!(
            "interval [{}, {}] narrower than q_sim = {q_sim}",
            frozen.start, frozen.end
        )));
    }
    let ext = build_extended_system(frozen, nu)?;
    let run = run_interval(frozen, &ext, x_start, input, q_sim)?;
    let per_state = relative_rmse(&run.bounded, &run.frozen);
    Ok((max_of(&per_state), per_state))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceErrorMode {
    /// Relative RMSE over the concatenated trace.
    #[default]
    TraceRmse,
    /// Sum of the interval bounds.
    Alg1Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanOptions {
    pub initial_q_inv: f64,
    pub decrement: f64,
    pub q_sim: f64,
    pub mode: TraceErrorMode,
    /// Force boundaries where a coefficient derivative changes sign.
    pub split_monotone: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            initial_q_inv: 60.0,
            decrement: 1.0,
            q_sim: 1.0,
            mode: TraceErrorMode::TraceRmse,
            split_monotone: true,
        }
    }
}

impl PlanOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_sim > 0.0) || !(self.decrement > 0.0) || self.initial_q_inv < self.q_sim {
            return Err(SimError::Parameter(format!(
                "need q_sim > 0, decrement > 0 and initial q_inv >= q_sim, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanInterval {
    pub start: f64,
    pub end: f64,
    pub frozen: FrozenSystem,
    pub nu: SlopeEstimate,
    pub r_max: f64,
    pub per_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantStepPlan {
    pub q_inv: f64,
    pub q_sim: f64,
    pub span: (f64, f64),
    pub intervals: Vec<PlanInterval>,
    /// Trace error in the selected mode.
    pub trace_error: f64,
    pub trace_error_rmse: f64,
    pub trace_error_sum: f64,
    pub mode: TraceErrorMode,
    pub budget: ErrorBudget,
    pub converged: bool,
    /// Number of `q_inv` values tried.
    pub iterations: usize,
}

impl InvariantStepPlan {
    pub fn max_interval_error(&self) -> f64 {
        self.intervals.iter().map(|i| i.r_max).fold(0.0, f64::max)
    }

    pub fn boundaries(&self) -> Vec<f64> {
        self.intervals.iter().map(|i| i.start).collect()
    }

    pub fn interval_at(&self, t: f64) -> usize {
        let k = self.intervals.partition_point(|i| i.start <= t + 1e-9);
        k.saturating_sub(1)
    }
}

fn snap(t: f64, t0: f64, q_sim: f64) -> f64 {
    t0 + ((t - t0) / q_sim).round() * q_sim
}

/// Grid times where some coefficient derivative changes sign, plus the
/// declared coefficient discontinuities.
pub fn forced_boundaries(
    sys: &TimeVaryingLinearSystem,
    span: (f64, f64),
    q_sim: f64,
    split_monotone: bool,
) -> Result<Vec<f64>> {
    let (t0, t1) = span;
    let mut out: Vec<f64> = sys
        .discontinuities()
        .iter()
        .map(|&d| snap(d, t0, q_sim))
        .filter(|&d| d > t0 + 1e-9 && d < t1 - 1e-9)
        .collect();
    if split_monotone {
        let (n, m) = (sys.n(), sys.m());
        let mut signs = vec![0.0f64; n * n + n * m];
        for t in uniform_grid(t0, t1, q_sim) {
            if t >= t1 - 1e-9 {
                break;
            }
            let da = sys.da_dt(t);
            let db = sys.db_dt(t);
            check_finite("dA/dt", &da, t)?;
            check_finite("dB/dt", &db, t)?;
            let mut changed = false;
            for (s, v) in signs.iter_mut().zip(da.iter().chain(db.iter())) {
                if *v != 0.0 {
                    let sign = v.signum();
                    if *s != 0.0 && *s != sign {
                        changed = true;
                    }
                    *s = sign;
                }
            }
            if changed && t > t0 + 1e-9 {
                out.push(t);
            }
        }
    }
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    Ok(out)
}

/// Interval starts for a given `q_inv`: each forced segment is cut into
/// `q_inv` pieces with a shorter remainder.
pub fn partition(span: (f64, f64), forced: &[f64], q_inv: f64) -> Vec<(f64, f64)> {
    let mut edges = vec![span.0];
    edges.extend_from_slice(forced);
    edges.push(span.1);
    let mut out = Vec::new();
    for w in edges.windows(2) {
        let mut s = w[0];
        while s < w[1] - 1e-9 {
            let e = (s + q_inv).min(w[1]);
            let e = if w[1] - e < 1e-9 { w[1] } else { e };
            out.push((s, e));
            s = e;
        }
    }
    out
}

struct Attempt {
    intervals: Vec<PlanInterval>,
    passed: bool,
    rmse: f64,
    sum: f64,
}

#[allow(clippy::too_many_arguments)]
fn attempt(
    sys: &TimeVaryingLinearSystem,
    input: &InputSignal,
    x0: &DVector<f64>,
    span: (f64, f64),
    forced: &[f64],
    q_inv: f64,
    q_sim: f64,
    eps_p: f64,
    stop_early: bool,
) -> Result<Attempt> {
    let n = sys.n();
    let mut intervals = Vec::new();
    let mut x = x0.clone();
    let mut err_sq = vec![0.0; n];
    let mut ref_sq = vec![0.0; n];
    let mut count = 0usize;
    let mut passed = true;
    for (j, (s, e)) in partition(span, forced, q_inv).into_iter().enumerate() {
        let frozen = freeze_interval(sys, s, e)?;
        let nu = estimate_nu(sys, (s, e), q_inv, q_sim)?;
        let ext = build_extended_system(&frozen, &nu)?;
        let run = run_interval(&frozen, &ext, &x, input, q_sim)?;
        let per_state = relative_rmse(&run.bounded, &run.frozen);
        let r_max = max_of(&per_state);
        let skip = usize::from(j > 0);
        for (hb, xf) in run.bounded.iter().zip(&run.frozen).skip(skip) {
            for i in 0..n {
                err_sq[i] += (hb[i] - xf[i]).powi(2);
                ref_sq[i] += xf[i] * xf[i];
            }
            count += 1;
        }
        debug_assert!(run.times.len() == run.frozen.len());
        x = run.frozen.last().expect("non-empty interval").clone();
        intervals.push(PlanInterval {
            start: s,
            end: e,
            frozen,
            nu,
            r_max,
            per_state,
        });
        if r_max > eps_p {
            passed = false;
            if stop_early {
                break;
            }
        }
    }
    let c = count.max(1) as f64;
    let rmse = (0..n)
        .map(|i| (err_sq[i] / c).sqrt() / (ref_sq[i] / c).sqrt().max(RMS_FLOOR))
        .fold(0.0, f64::max);
    let sum = intervals.iter().map(|i| i.r_max).sum();
    Ok(Attempt {
        intervals,
        passed,
        rmse,
        sum,
    })
}

/// Search for the largest invariant step meeting `budget`, shrinking from
/// `opts.initial_q_inv` by `opts.decrement` down to `opts.q_sim`.
pub fn compute_invariant_step(
    sys: &TimeVaryingLinearSystem,
    input: &InputSignal,
    x0: &DVector<f64>,
    span: (f64, f64),
    budget: ErrorBudget,
    opts: &PlanOptions,
) -> Result<InvariantStepPlan> {
    ErrorBudget::new(budget.eps_p, budget.psi_p)?;
    opts.validate()?;
    if x0.len() != sys.n() {
        return Err(SimError::Shape(format!("x0 has {} entries, plant has {}", x0.len(), sys.n())));
    }
    if input.m() != sys.m() {
        return Err(SimError::Shape(format!("input has {} channels, plant has {}", input.m(), sys.m())));
    }
    sys.check_time(span.0)?;
    sys.check_time(span.1)?;
    input.segment_index(span.1)?;
    let q_sim = opts.q_sim;
    let forced = forced_boundaries(sys, span, q_sim, opts.split_monotone)?;

    let mut q_inv = snap(opts.initial_q_inv, 0.0, q_sim).max(q_sim);
    let mut iterations = 0;
    loop {
        iterations += 1;
        let at_floor = q_inv <= q_sim + 1e-9;
        let run = attempt(sys, input, x0, span, &forced, q_inv, q_sim, budget.eps_p, !at_floor)?;
        let trace_error = match opts.mode {
            TraceErrorMode::TraceRmse => run.rmse,
            TraceErrorMode::Alg1Sum => run.sum,
        };
        let converged = run.passed && trace_error <= budget.psi_p;
        if converged || at_floor {
            return Ok(InvariantStepPlan {
                q_inv,
                q_sim,
                span,
                intervals: run.intervals,
                trace_error,
                trace_error_rmse: run.rmse,
                trace_error_sum: run.sum,
                mode: opts.mode,
                budget,
                converged,
                iterations,
            });
        }
        q_inv = snap(q_inv - opts.decrement, 0.0, q_sim).max(q_sim);
    }
}

struct PlisEngine<'p> {
    plan: &'p InvariantStepPlan,
    cursor: usize,
}

impl PlisEngine<'_> {
    fn locate(&mut self, t: f64) -> &FrozenSystem {
        let iv = &self.plan.intervals;
        if !(iv[self.cursor].start <= t + 1e-9 && t < iv[self.cursor].end - 1e-9) {
            self.cursor = self.plan.interval_at(t);
        }
        &iv[self.cursor].frozen
    }
}

impl Engine for PlisEngine<'_> {
    fn label(&self) -> String {
        PLIS_LABEL.into()
    }

    fn stops(&self, _scn: &Scenario) -> Result<Vec<f64>> {
        Ok(self.plan.boundaries())
    }

    fn controller_model(&mut self, _scn: &Scenario, t: f64) -> Result<FrozenSystem> {
        Ok(self.locate(t).clone())
    }

    fn advance(
        &mut self,
        _scn: &Scenario,
        t0: f64,
        x: &DVector<f64>,
        _t1: f64,
        u: &DVector<f64>,
        samples: &[f64],
        out: &mut Vec<DVector<f64>>,
    ) -> Result<DVector<f64>> {
        let f = self.locate(t0);
        let (a, b) = (&f.a, &f.b);
        let mut t = t0;
        let mut state = x.clone();
        for &s in samples {
            state = euler_step(&state, &linear_rhs(a, b, &state, u), s - t);
            if !is_finite(&state) {
                return Err(SimError::Divergence { t: s });
            }
            out.push(state.clone());
            t = s;
        }
        Ok(state)
    }
}

/// Closed-loop simulation on the plan's frozen systems with Euler at
/// `scn.q_sim`.
pub fn plis_simulate(scn: &Scenario, controller: &mut dyn Controller, plan: &InvariantStepPlan) -> Result<Trace> {
    if (plan.q_sim - scn.q_sim).abs() > 1e-12 {
        return Err(SimError::Parameter(format!(
            "plan built for q_sim = {}, scenario uses {}",
            plan.q_sim, scn.q_sim
        )));
    }
    let covers = plan.intervals.first().is_some_and(|i| i.start <= scn.span.0 + 1e-9)
        && plan.intervals.last().is_some_and(|i| i.end >= scn.span.1 - 1e-9);
    if !covers {
        return Err(SimError::Parameter(format!(
            "plan over {:?} does not cover the scenario span {:?}",
            plan.span, scn.span
        )));
    }
    let mut engine = PlisEngine { plan, cursor: 0 };
    drive(scn, controller, &mut engine)
}
