//! Meal-predicting LQG controller.
//!
//! A Markov chain over announced meal sizes predicts the next meal; the
//! glucose excursion that meal would cause without a bolus sets how low the
//! controller aims. Between meals a Kalman filter estimates the latent
//! insulin states from glucose alone and a steady-state LQR drives the
//! estimate to the equilibrium for the current setpoint.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::markov::MealMarkovModel;
use super::pid::check_setpoint;
use super::riccati::solve_dare;
use super::{reject, Controller, Diagnostics, TickContext};
use crate::ap::{MealModel, GLUCOSE, INSULIN_INPUT, MEAL_INPUT};
use crate::error::{Result, SimError};
use crate::linalg::{discretize_zoh, solve_vec};
use crate::ltv::FrozenSystem;
use crate::wmn::{ConfigRecord, MealSize};

/// Innovation variance below which the measurement update is skipped.
const DEGENERATE_INNOVATION: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LqgConfig {
    /// Initial setpoint, used until the first meal prediction (mg/dL).
    pub setpoint: f64,
    /// Weight on squared glucose deviation.
    pub q_glucose: f64,
    /// Weight on squared command deviation.
    pub r: f64,
    /// Kalman process noise variance per state.
    pub process_noise: f64,
    /// Glucose measurement noise variance ((mg/dL)^2).
    pub measurement_noise: f64,
    /// Markov smoothing constant.
    pub alpha: f64,
    /// Window over which the unbolused meal excursion is simulated (min).
    pub excursion_window: f64,
    /// Upper glucose bound the predicted meal should stay below.
    pub ceiling: f64,
    /// Lowest setpoint the meal rule may choose.
    pub floor: f64,
    pub meal_model: MealModel,
    pub basal: f64,
    pub u_max: f64,
}

impl Default for LqgConfig {
    fn default() -> Self {
        Self {
            setpoint: 120.0,
            q_glucose: 1.0,
            r: 2000.0,
            process_noise: 1e-4,
            measurement_noise: 1.0,
            alpha: 1.0,
            excursion_window: 300.0,
            ceiling: 180.0,
            floor: 90.0,
            meal_model: MealModel::default(),
            basal: 0.15,
            u_max: 1.0,
        }
    }
}

impl LqgConfig {
    pub fn validate(&self) -> Result<()> {
        check_setpoint(self.setpoint)?;
        if !(self.q_glucose > 0.0) || !(self.r > 0.0) {
            return Err(SimError::Config("LQG weights must be positive".into()));
        }
        if self.process_noise < 0.0 || self.measurement_noise < 0.0 || self.alpha < 0.0 {
            return Err(SimError::Config("LQG noise variances and alpha must be non-negative".into()));
        }
        if !(self.excursion_window > 0.0) || !(self.floor < self.ceiling) {
            return Err(SimError::Config("LQG excursion window and setpoint bounds are invalid".into()));
        }
        if !(self.u_max > 0.0) || self.basal < 0.0 {
            return Err(SimError::Config("LQG needs u_max > 0 and basal >= 0".into()));
        }
        Ok(())
    }
}

/// Setpoint rule: aim low enough that the excursion stays under the ceiling.
pub fn meal_setpoint(excursion: f64, ceiling: f64, floor: f64) -> f64 {
    (ceiling - excursion).max(floor)
}

/// Largest glucose rise from a meal pulse on the frozen model with insulin
/// held at its current level, sampled every minute over `window`.
pub fn unbolused_excursion(model: &FrozenSystem, meal: &MealModel, grams: f64, window: f64) -> f64 {
    let (ad, bd) = discretize_zoh(&model.a, &model.b, 1.0);
    let drive = bd.column(MEAL_INPUT) * meal.height(grams);
    let mut x = DVector::zeros(model.n());
    let mut peak: f64 = 0.0;
    let steps = window.round() as usize;
    for k in 0..steps {
        x = &ad * x;
        if (k as f64) < meal.width {
            x += &drive;
        }
        peak = peak.max(x[GLUCOSE]);
    }
    peak
}

#[derive(Debug, Clone)]
struct Design {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    dt: f64,
    ad: DMatrix<f64>,
    bd: DMatrix<f64>,
    /// `None` when the Riccati solve failed.
    gain: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct BayesianLqg {
    cfg: LqgConfig,
    setpoint: f64,
    markov: MealMarkovModel,
    history: Vec<MealSize>,
    pending_prediction: bool,
    predicted: Option<MealSize>,
    estimate: DVector<f64>,
    covariance: DMatrix<f64>,
    last: Option<(f64, f64, DVector<f64>)>,
    design: Option<Design>,
    diag: Diagnostics,
}

impl BayesianLqg {
    pub fn new(cfg: LqgConfig, x0: DVector<f64>, history: &[MealSize]) -> Result<Self> {
        cfg.validate()?;
        let n = x0.len();
        Ok(Self {
            setpoint: cfg.setpoint,
            markov: MealMarkovModel::from_history(history, cfg.alpha),
            history: history.to_vec(),
            pending_prediction: false,
            predicted: None,
            estimate: x0,
            covariance: DMatrix::zeros(n, n),
            last: None,
            design: None,
            diag: Diagnostics::default(),
            cfg,
        })
    }

    pub fn setpoint(&self) -> f64 {
        self.setpoint
    }

    pub fn estimate(&self) -> &DVector<f64> {
        &self.estimate
    }

    pub fn predicted_meal(&self) -> Option<MealSize> {
        self.predicted
    }

    pub fn markov(&self) -> &MealMarkovModel {
        &self.markov
    }

    fn prepare(&mut self, model: &FrozenSystem, dt: f64) {
        if let Some(d) = &self.design {
            if d.a == model.a && d.b == model.b && d.dt == dt {
                return;
            }
        }
        let (ad, bd) = discretize_zoh(&model.a, &model.b, dt);
        let n = ad.nrows();
        let bu = bd.columns(INSULIN_INPUT, 1).into_owned();
        let mut q = DMatrix::zeros(n, n);
        q[(GLUCOSE, GLUCOSE)] = self.cfg.q_glucose;
        let r = DMatrix::from_element(1, 1, self.cfg.r);
        let gain = match solve_dare(&ad, &bu, &q, &r) {
            Ok(s) => Some(s.k),
            Err(_) => {
                self.diag.riccati_failures += 1;
                None
            }
        };
        self.design = Some(Design {
            a: model.a.clone(),
            b: model.b.clone(),
            dt,
            ad,
            bd,
            gain,
        });
        self.diag.model_rebuilds += 1;
    }

    /// Equilibrium `(x*, u*)` of the frozen model with glucose at the
    /// setpoint and the uncontrolled inputs at `exogenous`.
    pub fn target(model: &FrozenSystem, exogenous: &DVector<f64>, setpoint: f64) -> Result<(DVector<f64>, f64)> {
        let n = model.n();
        let mut w = exogenous.clone();
        w[INSULIN_INPUT] = 0.0;
        let mut lhs = DMatrix::zeros(n + 1, n + 1);
        lhs.view_mut((0, 0), (n, n)).copy_from(&model.a);
        lhs.view_mut((0, n), (n, 1)).copy_from(&model.b.column(INSULIN_INPUT));
        lhs[(n, GLUCOSE)] = 1.0;
        let mut rhs = DVector::zeros(n + 1);
        rhs.rows_mut(0, n).copy_from(&(-(&model.b * w)));
        rhs[n] = setpoint;
        let sol = solve_vec(&lhs, &rhs)?;
        Ok((sol.rows(0, n).into_owned(), sol[n]))
    }

    fn kalman(&mut self, glucose: f64, dt: f64) {
        let d = self.design.as_ref().expect("design prepared");
        if let Some((_, u_prev, w_prev)) = &self.last {
            let mut u = w_prev.clone();
            u[INSULIN_INPUT] = *u_prev;
            self.estimate = &d.ad * &self.estimate + &d.bd * u;
            let n = self.estimate.len();
            self.covariance = &d.ad * &self.covariance * d.ad.transpose()
                + DMatrix::<f64>::identity(n, n) * (self.cfg.process_noise * dt);
        }
        let s = self.covariance[(GLUCOSE, GLUCOSE)] + self.cfg.measurement_noise;
        if s <= DEGENERATE_INNOVATION {
            return;
        }
        let k = self.covariance.column(GLUCOSE) / s;
        let innovation = glucose - self.estimate[GLUCOSE];
        self.estimate += &k * innovation;
        let kc = &k * self.covariance.row(GLUCOSE);
        self.covariance -= kc;
    }

    fn update_setpoint(&mut self, model: &FrozenSystem) {
        self.pending_prediction = false;
        let Some((size, _)) = self.markov.predict(&self.history) else {
            return;
        };
        self.predicted = Some(size);
        let rise = unbolused_excursion(model, &self.cfg.meal_model, size.default_grams(), self.cfg.excursion_window);
        self.setpoint = meal_setpoint(rise, self.cfg.ceiling, self.cfg.floor);
    }

    /// One control update; returns the clamped command.
    pub fn step(&mut self, t: f64, glucose: f64, exogenous: &DVector<f64>, model: &FrozenSystem) -> f64 {
        self.diag.ticks += 1;
        if self.pending_prediction {
            self.update_setpoint(model);
        }
        let dt = self.last.as_ref().map_or(5.0, |(tl, _, _)| t - tl);
        let dt = if dt > 0.0 { dt } else { 5.0 };
        self.prepare(model, dt);
        self.kalman(glucose, dt);
        let gain = self.design.as_ref().and_then(|d| d.gain.clone());
        let raw = match (gain, Self::target(model, exogenous, self.setpoint)) {
            (Some(k), Ok((xs, us))) => us - (k * (&self.estimate - xs))[(0, 0)],
            _ => self.cfg.basal,
        };
        let command = if raw.is_finite() {
            raw.clamp(0.0, self.cfg.u_max)
        } else {
            self.cfg.basal
        };
        self.last = Some((t, command, exogenous.clone()));
        command
    }
}

impl Controller for BayesianLqg {
    fn kind(&self) -> &'static str {
        "bayesian_lqg"
    }

    fn channels(&self) -> &[usize] {
        &[INSULIN_INPUT]
    }

    fn validate(&self, record: &ConfigRecord) -> Result<()> {
        match record {
            ConfigRecord::Setpoint { value } => check_setpoint(*value),
            ConfigRecord::MealAnnouncement { grams, .. } if *grams >= 0.0 => Ok(()),
            ConfigRecord::Noop => Ok(()),
            other => Err(reject(self.kind(), other)),
        }
    }

    fn apply(&mut self, record: &ConfigRecord) -> Result<()> {
        self.validate(record)?;
        match record {
            ConfigRecord::Setpoint { value } => self.setpoint = *value,
            ConfigRecord::MealAnnouncement { size, .. } => {
                if let Some(&prev) = self.history.last() {
                    self.markov.observe(prev, *size);
                }
                self.history.push(*size);
                self.pending_prediction = true;
            }
            _ => {}
        }
        Ok(())
    }

    fn tick(&mut self, ctx: &TickContext<'_>) -> DVector<f64> {
        DVector::from_element(1, self.step(ctx.t, ctx.state[GLUCOSE], ctx.exogenous, ctx.model))
    }

    fn diagnostics(&self) -> Diagnostics {
        self.diag
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ap::{bmm_system, generate_cohort, CohortSpec, VirtualPatient};
    use crate::controllers::riccati::dare_residual;
    use crate::ltv::zero_order_hold;

    fn patient() -> (VirtualPatient, FrozenSystem) {
        let p = generate_cohort(&CohortSpec::default()).unwrap().remove(0);
        let f = zero_order_hold(&bmm_system(&p, 1440.0), 0.0).unwrap();
        (p, f)
    }

    #[test]
    fn setpoint_rule() {
        assert_eq!(meal_setpoint(40.0, 180.0, 90.0), 140.0);
        assert_eq!(meal_setpoint(150.0, 180.0, 90.0), 90.0);
    }

    #[test]
    fn excursion_grows_with_meal_size() {
        let (_, model) = patient();
        let mm = MealModel::default();
        let small = unbolused_excursion(&model, &mm, 30.0, 300.0);
        let large = unbolused_excursion(&model, &mm, 90.0, 300.0);
        assert!(small > 0.0);
        assert!((large - 3.0 * small).abs() < 1e-9 * large);
    }

    #[test]
    fn estimate_at_target_gives_equilibrium_command() {
        let (p, model) = patient();
        let x = p.fasting_equilibrium();
        let w = DVector::from_vec(vec![p.bmm.i_b, p.bmm.egp]);
        let cfg = LqgConfig {
            setpoint: x[GLUCOSE],
            basal: p.bmm.i_b,
            ..Default::default()
        };
        let (xs, us) = BayesianLqg::target(&model, &w, x[GLUCOSE]).unwrap();
        assert!((us - p.bmm.i_b).abs() < 1e-10);
        assert!((&xs - &x).norm() < 1e-8);
        let mut c = BayesianLqg::new(cfg, x.clone(), &[]).unwrap();
        for k in 0..5 {
            let u = c.step(5.0 * k as f64, x[GLUCOSE], &w, &model);
            assert!((u - p.bmm.i_b).abs() < 1e-8, "{u}");
        }
    }

    #[test]
    fn lqr_gain_satisfies_riccati() {
        let (_, model) = patient();
        let (ad, bd) = discretize_zoh(&model.a, &model.b, 5.0);
        let bu = bd.columns(0, 1).into_owned();
        let mut q = DMatrix::zeros(3, 3);
        q[(2, 2)] = 1.0;
        let r = DMatrix::from_element(1, 1, 2000.0);
        let s = solve_dare(&ad, &bu, &q, &r).unwrap();
        let res = dare_residual(&ad, &bu, &q, &r, &s.p).norm() / s.p.norm().max(1.0);
        assert!(res <= 1e-8, "{res}");
    }

    #[test]
    fn noiseless_filter_tracks_discrete_plant() {
        let (p, model) = patient();
        let mut x = p.fasting_equilibrium();
        x[GLUCOSE] += 40.0;
        let cfg = LqgConfig {
            process_noise: 0.0,
            measurement_noise: 0.0,
            basal: p.bmm.i_b,
            ..Default::default()
        };
        let mut c = BayesianLqg::new(cfg, x.clone(), &[]).unwrap();
        let (ad, bd) = discretize_zoh(&model.a, &model.b, 5.0);
        let w = DVector::from_vec(vec![0.0, p.bmm.egp]);
        for k in 0..50 {
            let u = c.step(5.0 * k as f64, x[GLUCOSE], &w, &model);
            assert!((c.estimate() - &x).norm() <= 1e-9 * x.norm());
            assert!(u >= 0.0);
            x = &ad * x + &bd * DVector::from_vec(vec![u, p.bmm.egp]);
        }
    }

    #[test]
    fn meal_announcements_lower_the_setpoint() {
        let (p, model) = patient();
        let x = p.fasting_equilibrium();
        let w = DVector::from_vec(vec![p.bmm.i_b, p.bmm.egp]);
        let mut c = BayesianLqg::new(
            LqgConfig {
                basal: p.bmm.i_b,
                ..Default::default()
            },
            x.clone(),
            &[MealSize::Large, MealSize::Large],
        )
        .unwrap();
        c.apply(&ConfigRecord::MealAnnouncement {
            size: MealSize::Large,
            grams: 90.0,
        })
        .unwrap();
        c.step(0.0, x[GLUCOSE], &w, &model);
        assert_eq!(c.predicted_meal(), Some(MealSize::Large));
        let rise = unbolused_excursion(&model, &MealModel::default(), 90.0, 300.0);
        assert_eq!(c.setpoint(), meal_setpoint(rise, 180.0, 90.0));
    }

    #[test]
    fn riccati_failure_falls_back_to_basal() {
        // an unstabilisable mode: unstable and not reachable from the input
        let model = FrozenSystem {
            a: DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, -0.1]),
            b: DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
            start: 0.0,
            end: 5.0,
        };
        let x = DVector::from_vec(vec![1.0, 1.0, 120.0]);
        let mut c = BayesianLqg::new(LqgConfig::default(), x.clone(), &[]).unwrap();
        let u = c.step(0.0, 150.0, &DVector::from_vec(vec![0.0, 0.0]), &model);
        assert!(u >= 0.0 && u.is_finite());
    }

    #[test]
    fn rejects_foreign_records() {
        let c = BayesianLqg::new(LqgConfig::default(), DVector::zeros(3), &[]).unwrap();
        assert!(c.validate(&ConfigRecord::MpcWeights { q: 1.0, r: 1.0 }).is_err());
        assert!(LqgConfig {
            r: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
