//! Artificial-pancreas case study: Bergman minimal model with
//! cortisol-dependent insulin sensitivity, meal inputs and a synthetic
//! virtual-patient cohort.
//!
//! Units: glucose mg/dL, insulin μU/mL, time minutes. Cortisol in ng/dL.
//!
//! State vector `[i, i_s, G]`, input vector `[insulin delivery, glucose
//! appearance]` where glucose appearance is endogenous production plus meals.

use nalgebra::{dmatrix, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::ltv::{InputSignal, TimeVaryingLinearSystem};
use crate::wmn::MealSize;

pub const INSULIN: usize = 0;
pub const INTERSTITIAL: usize = 1;
pub const GLUCOSE: usize = 2;
pub const INSULIN_INPUT: usize = 0;
pub const MEAL_INPUT: usize = 1;

pub const DAY: f64 = 1440.0;

/// Minimal-model coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmmParameters {
    /// Interstitial insulin decay (1/min).
    pub p1: f64,
    /// Plasma to interstitial transfer (1/min).
    pub p2: f64,
    /// Insulin input gain; also scales `p3` through the sensitivity regression.
    pub p4: f64,
    /// Plasma insulin clearance `n` (1/min).
    pub n_decay: f64,
    /// Basal glucose used in the insulin-action term (mg/dL).
    pub g_b: f64,
    /// Distribution volume product; glucose appearance enters as `u2 / vo_i`.
    pub vo_i: f64,
    /// Basal insulin delivery `i_b` (μU/mL/min).
    pub i_b: f64,
    /// Endogenous glucose appearance added to the meal channel (mg/dL/min).
    pub egp: f64,
}

impl Default for BmmParameters {
    fn default() -> Self {
        let mut p = Self {
            p1: 0.028,
            p2: 0.025,
            p4: 0.01,
            n_decay: 0.09,
            g_b: 80.0,
            vo_i: 1.5,
            i_b: 0.0,
            egp: 3.6,
        };
        p.i_b = p.basal_for_fasting(120.0, 1.0);
        p
    }
}

impl BmmParameters {
    fn check(&self) -> Result<()> {
        let fields = [
            ("p1", self.p1),
            ("p2", self.p2),
            ("p4", self.p4),
            ("n_decay", self.n_decay),
            ("g_b", self.g_b),
            ("vo_i", self.vo_i),
            ("i_b", self.i_b),
            ("egp", self.egp),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Insulin-action rate at steady state per unit insulin delivery.
    fn action_gain(&self) -> f64 {
        self.g_b * (self.p2 / self.p1) * (self.p4 / self.n_decay)
    }

    /// Basal delivery that puts fasting glucose at `target` when the
    /// sensitivity factor `eta*C + beta` equals `sensitivity`.
    pub fn basal_for_fasting(&self, target: f64, sensitivity: f64) -> f64 {
        let p3 = self.p4 * sensitivity;
        (self.egp / self.vo_i - p3 * target) / self.action_gain()
    }

    /// Steady state `[i, i_s, G]` under constant delivery and appearance.
    pub fn equilibrium(&self, p3: f64, insulin: f64, appearance: f64) -> DVector<f64> {
        let i = self.p4 * insulin / self.n_decay;
        let is = self.p2 * i / self.p1;
        let g = (appearance / self.vo_i - self.g_b * is) / p3;
        DVector::from_vec(vec![i, is, g])
    }
}

/// Cortisol response to stress events; each event contributes a two-pole,
/// one-zero impulse response with a delayed derivative term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CortisolProfile {
    /// Gain (ng/dL).
    pub k_p: f64,
    pub t_p1: f64,
    pub t_p2: f64,
    pub t_z: f64,
    pub t_d: f64,
    /// Stress events, minutes from midnight.
    pub stress_event_times: Vec<f64>,
    /// Repeat the events every day of the horizon.
    #[serde(default = "yes")]
    pub repeat_daily: bool,
}

fn yes() -> bool {
    true
}

impl Default for CortisolProfile {
    fn default() -> Self {
        Self {
            k_p: 1.215,
            t_p1: 150.0,
            t_p2: 300.0,
            t_z: 90.0,
            t_d: 15.0,
            stress_event_times: vec![480.0, 870.0],
            repeat_daily: true,
        }
    }
}

impl CortisolProfile {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k_p", self.k_p),
            ("t_p1", self.t_p1),
            ("t_p2", self.t_p2),
            ("t_z", self.t_z),
            ("t_d", self.t_d),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.t_p1 == self.t_p2 {
            return Err(SimError::Parameter("t_p1 and t_p2 must differ".into()));
        }
        if self.stress_event_times.iter().any(|&t| !(0.0..DAY).contains(&t)) {
            return Err(SimError::Parameter("stress events must fall within one day".into()));
        }
        Ok(())
    }

    /// Event onsets up to `t`.
    fn onsets(&self, t: f64) -> impl Iterator<Item = f64> + '_ {
        let days = if self.repeat_daily { (t / DAY).floor().max(0.0) as usize + 1 } else { 1 };
        (0..days).flat_map(move |d| {
            self.stress_event_times
                .iter()
                .map(move |e| e + d as f64 * DAY)
        })
    }

    fn scale(&self) -> f64 {
        self.k_p / (self.t_p2 - self.t_p1)
    }

    /// `h(s) = e^{-s/T_p2} - e^{-s/T_p1}` and its first two derivatives.
    fn h(&self, s: f64) -> (f64, f64, f64) {
        let (e1, e2) = ((-s / self.t_p1).exp(), (-s / self.t_p2).exp());
        (
            e2 - e1,
            -e2 / self.t_p2 + e1 / self.t_p1,
            e2 / (self.t_p2 * self.t_p2) - e1 / (self.t_p1 * self.t_p1),
        )
    }

    fn single(&self, s: f64) -> (f64, f64) {
        if s <= 0.0 {
            return (0.0, 0.0);
        }
        let (h, dh, _) = self.h(s);
        let (mut c, mut dc) = (h, dh);
        let sd = s - self.t_d;
        if sd >= 0.0 {
            let (_, dh_d, ddh_d) = self.h(sd);
            let w = self.t_z / self.t_d;
            c += w * dh_d;
            dc += w * ddh_d;
        }
        (self.scale() * c, self.scale() * dc)
    }

    /// Cortisol concentration (ng/dL).
    pub fn at(&self, t: f64) -> f64 {
        self.onsets(t).map(|e| self.single(t - e).0).sum()
    }

    /// Analytic `dC/dt` (right derivative at the delay jump).
    pub fn derivative(&self, t: f64) -> f64 {
        self.onsets(t).map(|e| self.single(t - e).1).sum()
    }

    /// Times in `[0, horizon]` where the delayed term switches on.
    pub fn jump_times(&self, horizon: f64) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .onsets(horizon)
            .map(|e| e + self.t_d)
            .filter(|&t| t <= horizon)
            .collect();
        out.sort_by(f64::total_cmp);
        out
    }

    /// Maximum over a 0.1-minute grid on `[0, horizon]`: `(value, time)`.
    pub fn peak(&self, horizon: f64) -> (f64, f64) {
        let steps = (horizon / 0.1).round() as usize;
        (0..=steps)
            .map(|k| {
                let t = k as f64 * 0.1;
                (self.at(t), t)
            })
            .fold((f64::NEG_INFINITY, 0.0), |acc, v| if v.0 > acc.0 { v } else { acc })
    }
}

/// Evaluate a cortisol profile (free-function form).
pub fn cortisol_at(profile: &CortisolProfile, t: f64) -> f64 {
    profile.at(t)
}

/// `p3(t) = p4 (eta C(t) + beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRegression {
    /// 1/(ng/dL)
    pub eta: f64,
    pub beta: f64,
}

/// Fractional drop of insulin sensitivity at peak cortisol.
pub const DEFAULT_SI_DEPRESSION: f64 = 0.5;
/// Window over which the cortisol peak is located when calibrating `eta`.
pub const CALIBRATION_WINDOW: f64 = 3.0 * DAY;

impl SensitivityRegression {
    /// Choose `eta` so the global cortisol peak lowers sensitivity by
    /// `depression` relative to zero cortisol.
    pub fn calibrated(profile: &CortisolProfile, depression: f64, beta: f64) -> Self {
        let (c_peak, _) = profile.peak(CALIBRATION_WINDOW);
        Self {
            eta: -depression * beta / c_peak,
            beta,
        }
    }

    pub fn factor(&self, c: f64) -> f64 {
        self.eta * c + self.beta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meal {
    /// Minutes from the start of the simulation.
    pub time: f64,
    pub size: MealSize,
    pub grams: f64,
}

/// Meal-to-appearance conversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MealModel {
    /// Total glucose rise per gram of carbohydrate (mg/dL per g).
    pub factor: f64,
    /// Rectangular pulse width (min).
    pub width: f64,
}

impl Default for MealModel {
    fn default() -> Self {
        Self {
            factor: 4.5,
            width: 30.0,
        }
    }
}

impl MealModel {
    pub fn height(&self, grams: f64) -> f64 {
        grams * self.factor / self.width
    }
}

/// Glucose appearance from meals at time `t` (mg/dL/min); pulses superpose.
pub fn meal_to_input(meals: &[Meal], model: &MealModel, t: f64) -> f64 {
    meals
        .iter()
        .filter(|m| t >= m.time && t < m.time + model.width)
        .map(|m| model.height(m.grams))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualPatient {
    pub id: String,
    pub bmm: BmmParameters,
    pub cortisol: CortisolProfile,
    pub sensitivity: SensitivityRegression,
    #[serde(default)]
    pub meal_model: MealModel,
    pub meals: Vec<Meal>,
    /// Initial `[i, i_s, G]`.
    pub x0: Vec<f64>,
}

impl VirtualPatient {
    pub fn validate(&self, q_sim: f64) -> Result<()> {
        self.bmm.check()?;
        self.cortisol.validate()?;
        let (c_peak, _) = self.cortisol.peak(CALIBRATION_WINDOW);
        if self.sensitivity.factor(c_peak) <= 0.0 || self.sensitivity.factor(0.0) <= 0.0 {
            return Err(SimError::Parameter(format!(
                "patient {}: p3 becomes non-positive (eta = {}, beta = {})",
                self.id, self.sensitivity.eta, self.sensitivity.beta
            )));
        }
        if self.meals.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(SimError::Parameter(format!("patient {}: meals out of order", self.id)));
        }
        if self.meal_model.width <= q_sim {
            return Err(SimError::Parameter(format!(
                "patient {}: meal pulse width {} must exceed q_sim {q_sim}",
                self.id, self.meal_model.width
            )));
        }
        if self.meals.iter().any(|m| !(m.grams >= 0.0) || !(m.time >= 0.0)) {
            return Err(SimError::Parameter(format!("patient {}: invalid meal", self.id)));
        }
        if self.x0.len() != 3 || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Parameter(format!("patient {}: x0 must have 3 finite entries", self.id)));
        }
        Ok(())
    }

    pub fn p3_at(&self, t: f64) -> f64 {
        self.bmm.p4 * self.sensitivity.factor(self.cortisol.at(t))
    }

    pub fn dp3_dt(&self, t: f64) -> f64 {
        self.bmm.p4 * self.sensitivity.eta * self.cortisol.derivative(t)
    }

    /// Fasting equilibrium at basal delivery with zero cortisol.
    pub fn fasting_equilibrium(&self) -> DVector<f64> {
        self.bmm.equilibrium(
            self.bmm.p4 * self.sensitivity.beta,
            self.bmm.i_b,
            self.bmm.egp,
        )
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x0)
    }

    pub fn meals_until(&self, horizon: f64) -> Vec<Meal> {
        self.meals.iter().filter(|m| m.time < horizon).cloned().collect()
    }

    /// Exogenous input `[i_b, egp + meals]` on `[0, horizon]`.
    pub fn exogenous_input(&self, horizon: f64) -> Result<InputSignal> {
        let meals = self.meals_until(horizon);
        let mut edges = vec![0.0];
        for m in &meals {
            edges.push(m.time);
            edges.push(m.time + self.meal_model.width);
        }
        edges.retain(|&t| t < horizon);
        edges.sort_by(f64::total_cmp);
        edges.dedup();
        let values = edges
            .iter()
            .map(|&t| {
                DVector::from_vec(vec![
                    self.bmm.i_b,
                    self.bmm.egp + meal_to_input(&meals, &self.meal_model, t),
                ])
            })
            .collect::<Vec<_>>();
        let times: Vec<f64> = edges.clone();
        InputSignal::from_samples(&times, &values, horizon)
    }
}

/// `p3` at time `t` for a patient.
pub fn p3_at(patient: &VirtualPatient, t: f64) -> f64 {
    patient.p3_at(t)
}

/// The time-varying minimal model of a patient, valid on `[0, horizon]`.
pub fn bmm_system(patient: &VirtualPatient, horizon: f64) -> TimeVaryingLinearSystem {
    let b = &patient.bmm;
    let (p1, p2, n, gb) = (b.p1, b.p2, b.n_decay, b.g_b);
    let p_a = patient.clone();
    let p_d = patient.clone();
    let b_mat = dmatrix![b.p4, 0.0; 0.0, 0.0; 0.0, 1.0 / b.vo_i];
    let jumps = if patient.sensitivity.eta != 0.0 {
        patient.cortisol.jump_times(horizon)
    } else {
        Vec::new()
    };
    TimeVaryingLinearSystem::new(
        3,
        2,
        move |t| {
            dmatrix![
                -n, 0.0, 0.0;
                p2, -p1, 0.0;
                0.0, -gb, -p_a.p3_at(t)
            ]
        },
        move |_| b_mat.clone(),
    )
    .with_derivatives(
        move |t| {
            let mut d = DMatrix::zeros(3, 3);
            d[(2, 2)] = -p_d.dp3_dt(t);
            d
        },
        |_| DMatrix::zeros(3, 2),
    )
    .with_horizon(horizon)
    .with_discontinuities(jumps)
}

/// Cohort generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub seed: u64,
    pub count: usize,
    /// Days of meals generated per patient.
    pub days: usize,
    /// Uniform relative perturbation of the default coefficients.
    pub spread: f64,
    /// Fasting glucose targets used to titrate basal delivery (mg/dL).
    pub fasting_range: (f64, f64),
    /// Meal times, minutes from midnight.
    pub meal_times: Vec<f64>,
    pub si_depression: f64,
    pub beta: f64,
    pub meal_model: MealModel,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            count: 12,
            days: 3,
            spread: 0.2,
            fasting_range: (100.0, 140.0),
            meal_times: vec![450.0, 750.0, 1140.0],
            si_depression: DEFAULT_SI_DEPRESSION,
            beta: 1.0,
            meal_model: MealModel::default(),
        }
    }
}

const MAX_REDRAWS: usize = 100;

/// Deterministic synthetic cohort.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<VirtualPatient>> {
    if spec.count == 0 {
        return Err(SimError::Config("cohort count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cortisol = CortisolProfile::default();
    let sensitivity = SensitivityRegression::calibrated(&cortisol, spec.si_depression, spec.beta);
    let base = BmmParameters::default();
    let mut out = Vec::with_capacity(spec.count);
    for idx in 0..spec.count {
        let mut tries = 0;
        let patient = loop {
            tries += 1;
            if tries > MAX_REDRAWS {
                return Err(SimError::Parameter(format!(
                    "could not draw a valid patient {idx} in {MAX_REDRAWS} attempts"
                )));
            }
            let mut jitter = |v: f64| v * (1.0 + rng.gen_range(-spec.spread..=spec.spread));
            let mut bmm = BmmParameters {
                p1: jitter(base.p1),
                p2: jitter(base.p2),
                p4: jitter(base.p4),
                n_decay: jitter(base.n_decay),
                g_b: jitter(base.g_b),
                vo_i: jitter(base.vo_i),
                egp: jitter(base.egp),
                i_b: 0.0,
            };
            let target = rng.gen_range(spec.fasting_range.0..=spec.fasting_range.1);
            bmm.i_b = bmm.basal_for_fasting(target, sensitivity.beta);

            // per-patient meal-size preference
            let weights: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = weights.iter().sum();
            let mut meals = Vec::new();
            for day in 0..spec.days {
                for &mt in &spec.meal_times {
                    let mut r = rng.gen_range(0.0..total);
                    let mut k = 0;
                    while k < 2 && r >= weights[k] {
                        r -= weights[k];
                        k += 1;
                    }
                    let size = MealSize::from_index(k);
                    meals.push(Meal {
                        time: day as f64 * DAY + mt,
                        size,
                        grams: size.default_grams(),
                    });
                }
            }
            let mut p = VirtualPatient {
                id: format!("P{:02}", idx + 1),
                bmm,
                cortisol: cortisol.clone(),
                sensitivity,
                meal_model: spec.meal_model,
                meals,
                x0: Vec::new(),
            };
            p.x0 = p.fasting_equilibrium().as_slice().to_vec();
            if p.validate(1.0).is_ok() && {
                let g = p.x0[GLUCOSE];
                (70.0..=180.0).contains(&g)
            } {
                break p;
            }
        };
        out.push(patient);
    }
    Ok(out)
}
