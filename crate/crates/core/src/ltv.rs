//! Linear time-varying plants `dx/dt = A(t) x + B(t) u`, piecewise-constant
//! inputs, simulation traces and the distances used to compare them.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SimError};

pub type CoefficientFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// Step used for central-difference coefficient derivatives when the plant
/// does not supply analytic ones (minutes).
pub const FD_STEP: f64 = 0.01;

/// A plant whose coefficient matrices are evaluable functions of time.
#[derive(Clone)]
pub struct TimeVaryingLinearSystem {
    n: usize,
    m: usize,
    a: CoefficientFn,
    b: CoefficientFn,
    da_dt: Option<CoefficientFn>,
    db_dt: Option<CoefficientFn>,
    horizon: f64,
    discontinuities: Vec<f64>,
}

impl fmt::Debug for TimeVaryingLinearSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TimeVaryingLinearSystem")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("analytic_derivatives", &self.da_dt.is_some())
            .field("horizon", &self.horizon)
            .finish()
    }
}

impl TimeVaryingLinearSystem {
    pub fn new<FA, FB>(n: usize, m: usize, a: FA, b: FB) -> Self
    where
        FA: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
        FB: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            n,
            m,
            a: Arc::new(a),
            b: Arc::new(b),
            da_dt: None,
            db_dt: None,
            horizon: f64::INFINITY,
            discontinuities: Vec::new(),
        }
    }

    /// Time-invariant plant.
    pub fn constant(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        let (n, m) = (a.nrows(), b.ncols());
        let (za, zb) = (DMatrix::zeros(n, n), DMatrix::zeros(n, m));
        Self::new(n, m, move |_| a.clone(), move |_| b.clone()).with_derivatives(
            move |_| za.clone(),
            move |_| zb.clone(),
        )
    }

    pub fn with_derivatives<FA, FB>(mut self, da_dt: FA, db_dt: FB) -> Self
    where
        FA: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
        FB: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.da_dt = Some(Arc::new(da_dt));
        self.db_dt = Some(Arc::new(db_dt));
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    /// Times where a coefficient jumps. Engines treat them as breakpoints.
    pub fn with_discontinuities(mut self, mut times: Vec<f64>) -> Self {
        times.sort_by(f64::total_cmp);
        times.dedup();
        self.discontinuities = times;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn discontinuities(&self) -> &[f64] {
        &self.discontinuities
    }

    pub fn has_analytic_derivatives(&self) -> bool {
        self.da_dt.is_some()
    }

    pub fn a(&self, t: f64) -> DMatrix<f64> {
        (self.a)(t)
    }

    pub fn b(&self, t: f64) -> DMatrix<f64> {
        (self.b)(t)
    }

    pub fn da_dt(&self, t: f64) -> DMatrix<f64> {
        match &self.da_dt {
            Some(f) => f(t),
            None => central_difference(&self.a, t),
        }
    }

    pub fn db_dt(&self, t: f64) -> DMatrix<f64> {
        match &self.db_dt {
            Some(f) => f(t),
            None => central_difference(&self.b, t),
        }
    }

    /// `A(t) x + B(t) u`.
    pub fn rhs(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        linear_rhs(&self.a(t), &self.b(t), x, u)
    }

    pub(crate) fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(SimError::OutOfRange {
                t,
                start: 0.0,
                end: self.horizon,
            });
        }
        Ok(())
    }
}

fn central_difference(f: &CoefficientFn, t: f64) -> DMatrix<f64> {
    (f(t + FD_STEP) - f(t - FD_STEP)) / (2.0 * FD_STEP)
}

/// Shared by every engine so that frozen and unfrozen evaluations of the
/// same matrices round identically.
#[inline]
pub(crate) fn linear_rhs(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> DVector<f64> {
    let mut dx = a * x;
    if b.ncols() > 0 {
        dx += b * u;
    }
    dx
}

pub(crate) fn check_finite(matrix: &'static str, m: &DMatrix<f64>, t: f64) -> Result<()> {
    for (idx, v) in m.iter().enumerate() {
        if !v.is_finite() {
            // column-major storage
            let (row, col) = (idx % m.nrows(), idx / m.nrows());
            return Err(SimError::Evaluation { matrix, row, col, t });
        }
    }
    Ok(())
}

/// Coefficients held at their value at the start of an interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub start: f64,
    pub end: f64,
}

impl FrozenSystem {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        linear_rhs(&self.a, &self.b, x, u)
    }

    /// Lift back to a (constant) time-varying system.
    pub fn to_system(&self) -> TimeVaryingLinearSystem {
        TimeVaryingLinearSystem::constant(self.a.clone(), self.b.clone())
    }
}

/// Zero-order hold of the plant coefficients at `tau`.
pub fn zero_order_hold(sys: &TimeVaryingLinearSystem, tau: f64) -> Result<FrozenSystem> {
    freeze_interval(sys, tau, tau)
}

/// Zero-order hold over `[start, end]`, evaluated at `start`.
pub fn freeze_interval(sys: &TimeVaryingLinearSystem, start: f64, end: f64) -> Result<FrozenSystem> {
    sys.check_time(start)?;
    let a = sys.a(start);
    let b = sys.b(start);
    if a.shape() != (sys.n, sys.n) || b.shape() != (sys.n, sys.m) {
        return Err(SimError::Shape(format!(
            "coefficients at t = {start} are {:?} and {:?}, expected ({n}, {n}) and ({n}, {m})",
            a.shape(),
            b.shape(),
            n = sys.n,
            m = sys.m
        )));
    }
    check_finite("A", &a, start)?;
    check_finite("B", &b, start)?;
    Ok(FrozenSystem { a, b, start, end })
}

/// Right-continuous piecewise-constant input `u(t)` on `[0, end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSignal {
    breakpoints: Vec<f64>,
    values: Vec<DVector<f64>>,
    end: f64,
}

impl InputSignal {
    pub fn new(breakpoints: Vec<f64>, values: Vec<DVector<f64>>, end: f64) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(SimError::InvalidSignal(format!(
                "{} breakpoints for {} segment values",
                breakpoints.len(),
                values.len()
            )));
        }
        if breakpoints[0] != 0.0 {
            return Err(SimError::InvalidSignal(format!(
                "first breakpoint must be 0, got {}",
                breakpoints[0]
            )));
        }
        if let Some(w) = breakpoints.windows(2).find(|w| w[1] <= w[0]) {
            return Err(SimError::InvalidSignal(format!(
                "breakpoints not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        if end < *breakpoints.last().unwrap() {
            return Err(SimError::InvalidSignal(format!(
                "horizon {end} ends before the last breakpoint"
            )));
        }
        let m = values[0].len();
        if values.iter().any(|v| v.len() != m) {
            return Err(SimError::InvalidSignal("segments have differing widths".into()));
        }
        if values.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(SimError::InvalidSignal("non-finite input level".into()));
        }
        Ok(Self {
            breakpoints,
            values,
            end,
        })
    }

    pub fn constant(value: DVector<f64>, end: f64) -> Self {
        Self {
            breakpoints: vec![0.0],
            values: vec![value],
            end,
        }
    }

    /// Build a signal from per-sample levels on a uniform grid, merging runs
    /// of identical values.
    pub fn from_samples(times: &[f64], values: &[DVector<f64>], end: f64) -> Result<Self> {
        let mut bps = Vec::new();
        let mut vals: Vec<DVector<f64>> = Vec::new();
        for (t, v) in times.iter().zip(values) {
            if vals.last() != Some(v) {
                bps.push(*t);
                vals.push(v.clone());
            }
        }
        Self::new(bps, vals, end)
    }

    pub fn m(&self) -> usize {
        self.values[0].len()
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    /// Every segment must be at least one simulation step wide.
    pub fn validate_width(&self, q_sim: f64) -> Result<()> {
        let mut edges = self.breakpoints.clone();
        edges.push(self.end);
        for w in edges.windows(2) {
            if w[1] - w[0] < q_sim - 1e-9 && w[1] < self.end {
                return Err(SimError::InvalidSignal(format!(
                    "segment [{}, {}] narrower than q_sim = {q_sim}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    pub fn segment_index(&self, t: f64) -> Result<usize> {
        if !(0.0..=self.end).contains(&t) {
            return Err(SimError::OutOfRange {
                t,
                start: 0.0,
                end: self.end,
            });
        }
        Ok(self.breakpoints.partition_point(|&b| b <= t) - 1)
    }

    pub fn evaluate(&self, t: f64) -> Result<&DVector<f64>> {
        Ok(&self.values[self.segment_index(t)?])
    }
}

/// Timestamped states produced by one engine.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Input applied from each sample until the next.
    pub inputs: Vec<DVector<f64>>,
    pub event_times: Vec<f64>,
    pub engine: String,
    pub wall_clock_seconds: Option<f64>,
}

impl Trace {
    pub fn new(engine: impl Into<String>) -> Self {
        Self {
            times: Vec::new(),
            states: Vec::new(),
            inputs: Vec::new(),
            event_times: Vec::new(),
            engine: engine.into(),
            wall_clock_seconds: None,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn push(&mut self, t: f64, x: DVector<f64>, u: DVector<f64>) {
        self.times.push(t);
        self.states.push(x);
        self.inputs.push(u);
    }

    pub fn last_state(&self) -> Option<&DVector<f64>> {
        self.states.last()
    }

    /// Column of one state variable.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[i]).collect()
    }

    pub fn index_of(&self, t: f64) -> Option<usize> {
        let idx = self.times.partition_point(|&s| s < t - 1e-9);
        (idx < self.times.len() && (self.times[idx] - t).abs() <= 1e-9).then_some(idx)
    }

    /// Sub-trace covering samples `[from, to)`.
    pub fn slice(&self, from: usize, to: usize) -> Trace {
        let (t0, t1) = (
            self.times.get(from).copied().unwrap_or(f64::INFINITY),
            if to < self.times.len() {
                self.times[to]
            } else {
                f64::INFINITY
            },
        );
        Trace {
            times: self.times[from..to].to_vec(),
            states: self.states[from..to].to_vec(),
            inputs: self.inputs[from..to.min(self.inputs.len())].to_vec(),
            event_times: self
                .event_times
                .iter()
                .copied()
                .filter(|&e| e >= t0 && e < t1)
                .collect(),
            engine: self.engine.clone(),
            wall_clock_seconds: None,
        }
    }

    /// Split into trajectories at the configuration-change events. The event
    /// sample opens the following trajectory.
    pub fn trajectories(&self) -> Vec<Trace> {
        let mut cuts: Vec<usize> = self
            .event_times
            .iter()
            .filter_map(|&e| self.index_of(e))
            .filter(|&i| i > 0)
            .collect();
        cuts.dedup();
        let mut out = Vec::with_capacity(cuts.len() + 1);
        let mut start = 0;
        for c in cuts {
            out.push(self.slice(start, c));
            start = c;
        }
        out.push(self.slice(start, self.len()));
        out
    }

    pub fn concat(parts: &[Trace]) -> Trace {
        let mut out = Trace::new(parts.first().map_or("", |p| p.engine.as_str()));
        for p in parts {
            out.times.extend_from_slice(&p.times);
            out.states.extend_from_slice(&p.states);
            out.inputs.extend_from_slice(&p.inputs);
            out.event_times.extend_from_slice(&p.event_times);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Relative RMSE per state over the whole trace, maximum over states.
    #[default]
    RelativeRmse,
    /// Maximum over trajectories of the per-trajectory relative RMSE.
    PerTrajectoryMax,
}

const RMS_FLOOR: f64 = 1e-9;

/// Per-state RMSE of `a - b` normalised by the RMS of `reference`.
pub fn per_state_relative_rmse(
    a: &[DVector<f64>],
    b: &[DVector<f64>],
    reference: &[DVector<f64>],
) -> Vec<f64> {
    let n = reference.first().map_or(0, |s| s.len());
    let len = a.len().max(1) as f64;
    (0..n)
        .map(|i| {
            let err: f64 = a.iter().zip(b).map(|(x, y)| (x[i] - y[i]).powi(2)).sum();
            let rms: f64 = reference.iter().map(|r| r[i] * r[i]).sum();
            (err / len).sqrt() / (rms / len).sqrt().max(RMS_FLOOR)
        })
        .collect()
}

pub(crate) fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

fn check_aligned(a: &Trace, b: &Trace) -> Result<()> {
    if a.len() != b.len() {
        return Err(SimError::Alignment(format!(
            "{} samples vs {} samples",
            a.len(),
            b.len()
        )));
    }
    if a.n() != b.n() {
        return Err(SimError::Alignment(format!("{} states vs {}", a.n(), b.n())));
    }
    if let Some(k) = (0..a.len()).find(|&k| (a.times[k] - b.times[k]).abs() > 1e-9) {
        return Err(SimError::Alignment(format!(
            "sample {k} at t = {} vs t = {}",
            a.times[k], b.times[k]
        )));
    }
    Ok(())
}

/// Distance of `a` from the reference trace `b`.
pub fn trace_distance(a: &Trace, b: &Trace, mode: DistanceMode) -> Result<f64> {
    trace_distance_normalized(a, b, b, mode)
}

/// Like [`trace_distance`] with the per-state scale taken from `reference`.
/// For a fixed reference this is a pseudometric in `(a, b)`.
pub fn trace_distance_normalized(
    a: &Trace,
    b: &Trace,
    reference: &Trace,
    mode: DistanceMode,
) -> Result<f64> {
    check_aligned(a, b)?;
    check_aligned(b, reference)?;
    match mode {
        DistanceMode::RelativeRmse => Ok(max_of(&per_state_relative_rmse(
            &a.states,
            &b.states,
            &reference.states,
        ))),
        DistanceMode::PerTrajectoryMax => {
            let r = reference.trajectories();
            let mut worst: f64 = 0.0;
            let mut start = 0;
            for traj in &r {
                let end = start + traj.len();
                let d = per_state_relative_rmse(
                    &a.states[start..end],
                    &b.states[start..end],
                    &reference.states[start..end],
                );
                worst = worst.max(max_of(&d));
                start = end;
            }
            Ok(worst)
        }
    }
}
