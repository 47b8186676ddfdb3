//! Delay-embedded DMD surrogate of the plant and its closed-loop simulator.
//!
//! The lifted state stacks the current plant state with delayed copies of
//! selected coordinates until it reaches the requested order; a discrete
//! linear model `z' = A_k z + B_k u` is fitted by least squares over lifted
//! snapshot pairs.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::closed_loop::{drive, Engine, Scenario};
use crate::controllers::Controller;
use crate::error::{Result, SimError};
use crate::linalg::pinv;
use crate::ltv::{zero_order_hold, FrozenSystem, Trace};
use crate::solvers::is_finite;

pub const KOOPMAN_LABEL: &str = "koopman";
pub const DEFAULT_ORDER: usize = 13;
/// Singular values below this fraction of the largest are discarded.
pub const SVD_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub n: usize,
    pub m: usize,
    pub n_k: usize,
    /// Coordinates copied at each delay level, in order.
    pub delay_order: Vec<usize>,
    pub a_k: DMatrix<f64>,
    pub b_k: DMatrix<f64>,
    /// Relative Frobenius residual of the one-step prediction of the
    /// original coordinates on the training data.
    pub fit_error: f64,
    /// Number of singular values discarded by the pseudo-inverse.
    pub truncated: usize,
    /// Sampling step (minutes).
    pub step: f64,
}

/// One uniformly sampled training run.
#[derive(Debug, Clone)]
pub struct Snapshots {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl From<&Trace> for Snapshots {
    fn from(t: &Trace) -> Self {
        Self {
            states: t.states.clone(),
            inputs: t.inputs.clone(),
        }
    }
}

/// Default delay order: coordinates from last to first.
pub fn reversed_order(n: usize) -> Vec<usize> {
    (0..n).rev().collect()
}

fn delay_depth(n: usize, n_k: usize, order_len: usize) -> usize {
    if n_k <= n {
        0
    } else {
        (n_k - n).div_ceil(order_len)
    }
}

/// Lift the window ending at `history[k]`, holding `history[0]` for times
/// before the start.
pub fn lift_at(history: &[DVector<f64>], k: usize, n_k: usize, order: &[usize]) -> DVector<f64> {
    let n = history[k].len();
    let mut z = DVector::zeros(n_k);
    z.rows_mut(0, n).copy_from(&history[k]);
    let mut idx = n;
    let mut level = 1;
    while idx < n_k {
        let past = &history[k.saturating_sub(level)];
        for &c in order {
            if idx == n_k {
                break;
            }
            z[idx] = past[c];
            idx += 1;
        }
        level += 1;
    }
    z
}

impl KoopmanModel {
    pub fn depth(&self) -> usize {
        delay_depth(self.n, self.n_k, self.delay_order.len())
    }

    /// Lift the most recent window (last element is the current state).
    pub fn lift(&self, history: &[DVector<f64>]) -> DVector<f64> {
        lift_at(history, history.len() - 1, self.n_k, &self.delay_order)
    }

    pub fn unlift(&self, z: &DVector<f64>) -> DVector<f64> {
        z.rows(0, self.n).into_owned()
    }

    pub fn step_lifted(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut next = &self.a_k * z;
        if self.m > 0 {
            next += &self.b_k * u;
        }
        next
    }

    pub fn spectral_radius(&self) -> f64 {
        self.a_k
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }

    /// Plain-text container: a header line, the delay order, then each
    /// matrix as `rows cols` followed by its rows.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "koopman n={} m={} n_k={} step={} fit_error={} truncated={}",
            self.n, self.m, self.n_k, self.step, self.fit_error, self.truncated
        );
        let order: Vec<String> = self.delay_order.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "delay_order {}", order.join(" "));
        for (name, mat) in [("A", &self.a_k), ("B", &self.b_k)] {
            let _ = writeln!(s, "{name} {} {}", mat.nrows(), mat.ncols());
            // a zero-column matrix has no row lines
            for r in 0..mat.nrows() * usize::from(mat.ncols() > 0) {
                let row: Vec<String> = (0..mat.ncols()).map(|c| format!("{:?}", mat[(r, c)])).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| SimError::Config(format!("koopman model file: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("koopman") {
            return Err(bad("missing 'koopman' header".into()));
        }
        let mut get = |key: &str| -> Result<String> {
            let f = fields.next().ok_or_else(|| bad(format!("missing {key}")))?;
            f.strip_prefix(&format!("{key}="))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected {key}=..., found {f}")))
        };
        let parse_usize = |v: String, key: &str| v.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
        let parse_f64 = |v: String, key: &str| v.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
        let n = parse_usize(get("n")?, "n")?;
        let m = parse_usize(get("m")?, "m")?;
        let n_k = parse_usize(get("n_k")?, "n_k")?;
        let step = parse_f64(get("step")?, "step")?;
        let fit_error = parse_f64(get("fit_error")?, "fit_error")?;
        let truncated = parse_usize(get("truncated")?, "truncated")?;

        let order_line = lines.next().ok_or_else(|| bad("missing delay_order".into()))?;
        let mut parts = order_line.split_whitespace();
        if parts.next() != Some("delay_order") {
            return Err(bad("expected delay_order line".into()));
        }
        let delay_order = parts
            .map(|p| p.parse::<usize>().map_err(|e| bad(format!("delay_order: {e}"))))
            .collect::<Result<Vec<_>>>()?;

        let mut read_matrix = |name: &str, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            let head = lines.next().ok_or_else(|| bad(format!("missing matrix {name}")))?;
            let dims: Vec<&str> = head.split_whitespace().collect();
            if dims != [name, &rows.to_string(), &cols.to_string()] {
                return Err(bad(format!("expected '{name} {rows} {cols}', found '{head}'")));
            }
            let mut values = Vec::with_capacity(rows * cols);
            for r in 0..rows * usize::from(cols > 0) {
                let line = lines.next().ok_or_else(|| bad(format!("{name}: missing row {r}")))?;
                let row = line
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|e| bad(format!("{name} row {r}: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                if row.len() != cols {
                    return Err(bad(format!("{name} row {r} has {} values, expected {cols}", row.len())));
                }
                values.extend(row);
            }
            Ok(DMatrix::from_row_slice(rows, cols, &values))
        };
        let a_k = read_matrix("A", n_k, n_k)?;
        let b_k = read_matrix("B", n_k, m)?;
        let model = Self {
            n,
            m,
            n_k,
            delay_order,
            a_k,
            b_k,
            fit_error,
            truncated,
            step,
        };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        if self.n_k < self.n || self.n == 0 {
            return Err(SimError::Fit(format!("lifted order {} below state dimension {}", self.n_k, self.n)));
        }
        if self.n_k > self.n && self.delay_order.is_empty() {
            return Err(SimError::Fit("delay coordinates requested without a delay order".into()));
        }
        if self.delay_order.iter().any(|&c| c >= self.n) {
            return Err(SimError::Fit(format!("delay order {:?} out of range", self.delay_order)));
        }
        if !(self.step > 0.0) {
            return Err(SimError::Fit(format!("step must be positive, got {}", self.step)));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Fit `z' = A_k z + B_k u` over all lifted snapshot pairs.
pub fn dmd_fit(data: &[Snapshots], n_k: usize, delay_order: &[usize], step: f64) -> Result<KoopmanModel> {
    let first = data
        .iter()
        .find(|d| !d.states.is_empty())
        .ok_or_else(|| SimError::Fit("no training data".into()))?;
    let n = first.states[0].len();
    let m = first.inputs.first().map_or(0, |u| u.len());
    let mut model = KoopmanModel {
        n,
        m,
        n_k,
        delay_order: delay_order.to_vec(),
        a_k: DMatrix::zeros(n_k, n_k),
        b_k: DMatrix::zeros(n_k, m),
        fit_error: 0.0,
        truncated: 0,
        step,
    };
    model.check()?;

    let pairs: usize = data.iter().map(|d| d.states.len().saturating_sub(1)).sum();
    if pairs < 10 * n_k {
        return Err(SimError::Fit(format!(
            "{pairs} snapshot pairs, need at least {} for order {n_k}",
            10 * n_k
        )));
    }
    let rows = n_k + m;
    let mut x = DMatrix::zeros(rows, pairs);
    let mut y = DMatrix::zeros(n_k, pairs);
    let mut col = 0;
    for d in data {
        if d.inputs.len() != d.states.len() {
            return Err(SimError::Fit("states and inputs differ in length".into()));
        }
        for k in 0..d.states.len().saturating_sub(1) {
            if d.states[k].len() != n || d.inputs[k].len() != m {
                return Err(SimError::Fit("inconsistent snapshot dimensions".into()));
            }
            let z = lift_at(&d.states, k, n_k, delay_order);
            let z_next = lift_at(&d.states, k + 1, n_k, delay_order);
            x.view_mut((0, col), (n_k, 1)).copy_from(&z);
            x.view_mut((n_k, col), (m, 1)).copy_from(&d.inputs[k]);
            y.set_column(col, &z_next);
            col += 1;
        }
    }
    if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
        return Err(SimError::Fit("training data contain non-finite values".into()));
    }
    let (x_pinv, truncated) = pinv(&x, SVD_CUTOFF);
    let g = &y * x_pinv;
    model.a_k = g.view((0, 0), (n_k, n_k)).into_owned();
    model.b_k = g.view((0, n_k), (n_k, m)).into_owned();
    model.truncated = truncated;
    let pred = &g * &x;
    let resid = (pred.rows(0, n) - y.rows(0, n)).norm();
    let scale = y.rows(0, n).norm();
    model.fit_error = if scale > 0.0 { resid / scale } else { resid };
    Ok(model)
}

struct KoopmanEngine<'m> {
    model: &'m KoopmanModel,
    z: Option<DVector<f64>>,
}

impl Engine for KoopmanEngine<'_> {
    fn label(&self) -> String {
        KOOPMAN_LABEL.into()
    }

    fn controller_model(&mut self, scn: &Scenario, t: f64) -> Result<FrozenSystem> {
        zero_order_hold(&scn.sys, t)
    }

    fn advance(
        &mut self,
        _scn: &Scenario,
        _t0: f64,
        x: &DVector<f64>,
        _t1: f64,
        u: &DVector<f64>,
        samples: &[f64],
        out: &mut Vec<DVector<f64>>,
    ) -> Result<DVector<f64>> {
        let model = self.model;
        let mut z = self.z.take().unwrap_or_else(|| model.lift(std::slice::from_ref(x)));
        for &s in samples {
            z = model.step_lifted(&z, u);
            if !is_finite(&z) {
                return Err(SimError::Divergence { t: s });
            }
            out.push(model.unlift(&z));
        }
        let state = model.unlift(&z);
        self.z = Some(z);
        Ok(state)
    }
}

/// Closed-loop simulation of the surrogate. The initial window holds `x0`
/// constant; the controller sees the unlifted state.
pub fn koopman_simulate(scn: &Scenario, controller: &mut dyn Controller, model: &KoopmanModel) -> Result<Trace> {
    if model.n != scn.sys.n() || model.m != scn.sys.m() {
        return Err(SimError::Shape(format!(
            "model is {}x{}, plant is {}x{}",
            model.n,
            model.m,
            scn.sys.n(),
            scn.sys.m()
        )));
    }
    if (model.step - scn.q_sim).abs() > 1e-12 {
        return Err(SimError::Parameter(format!(
            "model step {} differs from q_sim {}",
            model.step, scn.q_sim
        )));
    }
    let mut engine = KoopmanEngine { model, z: None };
    drive(scn, controller, &mut engine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::OpenLoop;
    use crate::ltv::{InputSignal, TimeVaryingLinearSystem};
    use crate::wmn::WmnEventSchedule;
    use nalgebra::{dmatrix, dvector};

    fn scalar_data(len: usize) -> Vec<Snapshots> {
        let mut states = vec![dvector![1.0]];
        for _ in 1..len {
            let x = states.last().unwrap()[0] * 0.9;
            states.push(dvector![x]);
        }
        let inputs = vec![DVector::zeros(0); len];
        vec![Snapshots { states, inputs }]
    }

    #[test]
    fn scalar_decay_is_recovered() {
        let m = dmd_fit(&scalar_data(40), 1, &[], 1.0).unwrap();
        assert!((m.a_k[(0, 0)] - 0.9).abs() < 1e-10);
        assert!(m.fit_error < 1e-12);
    }

    #[test]
    fn insufficient_data() {
        assert!(matches!(dmd_fit(&scalar_data(5), 1, &[], 1.0), Err(SimError::Fit(_))));
        assert!(matches!(dmd_fit(&[], 1, &[], 1.0), Err(SimError::Fit(_))));
    }

    #[test]
    fn rotation_eigenvalues() {
        let th = 0.3f64;
        let r = dmatrix![th.cos(), -th.sin(); th.sin(), th.cos()];
        let mut states = vec![dvector![1.0, 0.5]];
        for _ in 1..50 {
            let x = &r * states.last().unwrap();
            states.push(x);
        }
        let data = vec![Snapshots {
            inputs: vec![DVector::zeros(0); states.len()],
            states,
        }];
        let m = dmd_fit(&data, 2, &[], 1.0).unwrap();
        for ev in m.a_k.complex_eigenvalues().iter() {
            assert!((ev.norm() - 1.0).abs() < 1e-8);
            assert!((ev.im.abs() - th.sin()).abs() < 1e-8);
            assert!((ev.re - th.cos()).abs() < 1e-8);
        }
    }

    #[test]
    fn lift_pads_and_orders_delays() {
        let h = vec![dvector![1.0, 2.0, 3.0], dvector![4.0, 5.0, 6.0]];
        let z = lift_at(&h, 1, 8, &[2, 1, 0]);
        assert_eq!(z.as_slice(), &[4.0, 5.0, 6.0, 3.0, 2.0, 1.0, 3.0, 2.0]);
        assert_eq!(delay_depth(3, 13, 3), 4);
        let model = KoopmanModel {
            n: 3,
            m: 0,
            n_k: 8,
            delay_order: vec![2, 1, 0],
            a_k: DMatrix::zeros(8, 8),
            b_k: DMatrix::zeros(8, 0),
            fit_error: 0.0,
            truncated: 0,
            step: 1.0,
        };
        assert_eq!(model.unlift(&model.lift(&h)), h[1]);
    }

    #[test]
    fn text_round_trip() {
        let mut m = dmd_fit(&scalar_data(40), 3, &[0], 1.0).unwrap();
        m.a_k[(0, 1)] = 1.0 / 3.0;
        let back = KoopmanModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.txt");
        m.save(&p).unwrap();
        assert_eq!(KoopmanModel::load(&p).unwrap(), m);
        assert!(KoopmanModel::from_text("koopman n=1").is_err());
        assert!(KoopmanModel::from_text(&m.to_text().replace("A 3 3", "A 2 3")).is_err());
    }

    fn scalar_scenario(span: f64) -> Scenario {
        Scenario {
            sys: TimeVaryingLinearSystem::constant(dmatrix![-0.1], DMatrix::zeros(1, 0)),
            exogenous: InputSignal::constant(DVector::zeros(0), span),
            schedule: WmnEventSchedule::empty(),
            x0: dvector![1.0],
            span: (0.0, span),
            q_sim: 1.0,
            tick_period: 5.0,
        }
    }

    #[test]
    fn simulate_scalar_power() {
        let m = dmd_fit(&scalar_data(40), 1, &[], 1.0).unwrap();
        let tr = koopman_simulate(&scalar_scenario(10.0), &mut OpenLoop, &m).unwrap();
        assert!((tr.states[10][0] - 0.9f64.powi(10)).abs() < 1e-9);
        assert_eq!(tr.engine, KOOPMAN_LABEL);
    }

    #[test]
    fn null_dynamics_decay_to_zero() {
        let m = KoopmanModel {
            n: 1,
            m: 0,
            n_k: 3,
            delay_order: vec![0],
            a_k: DMatrix::zeros(3, 3),
            b_k: DMatrix::zeros(3, 0),
            fit_error: 0.0,
            truncated: 0,
            step: 1.0,
        };
        let tr = koopman_simulate(&scalar_scenario(10.0), &mut OpenLoop, &m).unwrap();
        assert!(tr.states[m.depth() + 1..].iter().all(|x| x[0] == 0.0));
    }

    #[test]
    fn step_mismatch_is_rejected() {
        let m = dmd_fit(&scalar_data(40), 1, &[], 2.0).unwrap();
        assert!(koopman_simulate(&scalar_scenario(10.0), &mut OpenLoop, &m).is_err());
    }

    #[test]
    fn unstable_model_diverges() {
        let mut m = dmd_fit(&scalar_data(40), 1, &[], 1.0).unwrap();
        m.a_k[(0, 0)] = 1e200;
        assert!(matches!(
            koopman_simulate(&scalar_scenario(10.0), &mut OpenLoop, &m),
            Err(SimError::Divergence { .. })
        ));
    }
}
