//! Cohort × controller × engine × budget experiment matrix.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ap::{bmm_system, generate_cohort, CohortSpec, VirtualPatient, DAY, GLUCOSE, INSULIN_INPUT};
use crate::closed_loop::Scenario;
use crate::controllers::{ControllerKind, ControllerSettings, Diagnostics};
use crate::error::{Result, SimError};
use crate::koopman::{dmd_fit, koopman_simulate, KoopmanModel, Snapshots, DEFAULT_ORDER};
use crate::ltv::{trace_distance, DistanceMode, InputSignal, Trace};
use crate::metrics::{glycemic, median, optimality, speedup_of, GlycemicReport};
use crate::oracle::oracle_simulate;
use crate::plis::{compute_invariant_step, plis_simulate, ErrorBudget, InvariantStepPlan, PlanOptions};
use crate::solvers::SolverConfig;
use crate::wmn::{ConfigRecord, WmnEvent, WmnEventSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Oracle,
    Plis,
    Koopman,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetPair {
    pub eps: f64,
    pub psi: f64,
}

impl BudgetPair {
    pub fn budget(&self) -> Result<ErrorBudget> {
        ErrorBudget::new(self.eps, self.psi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KoopmanSettings {
    pub order: usize,
    /// Length of the ORACLE run the surrogate is trained on (days).
    pub training_days: f64,
}

impl Default for KoopmanSettings {
    fn default() -> Self {
        Self {
            order: DEFAULT_ORDER,
            training_days: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cohort: CohortSpec,
    pub controllers: Vec<ControllerKind>,
    pub engines: Vec<EngineKind>,
    pub budgets: Vec<BudgetPair>,
    /// Simulated minutes.
    pub horizon: f64,
    pub q_sim: f64,
    /// Controller sampling period (minutes).
    pub tick_period: f64,
    /// Timed repetitions per run, after one discarded warm-up.
    pub reps: usize,
    pub out_dir: PathBuf,
    pub write_traces: bool,
    pub solver: SolverConfig,
    pub plan: PlanOptions,
    pub koopman: KoopmanSettings,
    pub controller: ControllerSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cohort: CohortSpec::default(),
            controllers: ControllerKind::ALL.to_vec(),
            engines: vec![EngineKind::Oracle, EngineKind::Plis, EngineKind::Koopman],
            budgets: vec![
                BudgetPair { eps: 0.03, psi: 0.05 },
                BudgetPair { eps: 0.05, psi: 0.10 },
                BudgetPair { eps: 0.10, psi: 0.15 },
            ],
            horizon: 2.0 * DAY,
            q_sim: 1.0,
            tick_period: 5.0,
            reps: 5,
            out_dir: PathBuf::from("results"),
            write_traces: true,
            solver: SolverConfig::default(),
            plan: PlanOptions::default(),
            koopman: KoopmanSettings::default(),
            controller: ControllerSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SimError::Config(e.to_string()))
    }

    /// Recover the configuration echoed in a run manifest.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        let config = value
            .get("config")
            .ok_or_else(|| SimError::Config(format!("{}: no config entry", path.display())))?;
        serde_json::from_value(config.clone()).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SimError::Config(msg));
        if self.controllers.is_empty() {
            return fail("at least one controller is required".into());
        }
        if self.engines.is_empty() {
            return fail("at least one engine is required".into());
        }
        if self.engines.contains(&EngineKind::Plis) && self.budgets.is_empty() {
            return fail("the PLIS engine needs at least one budget pair".into());
        }
        for b in &self.budgets {
            b.budget()?;
        }
        if !(self.q_sim > 0.0) || !(self.tick_period >= self.q_sim) {
            return fail(format!(
                "need 0 < q_sim <= tick_period, got {} and {}",
                self.q_sim, self.tick_period
            ));
        }
        let steps = self.horizon / self.q_sim;
        if !(self.horizon >= self.q_sim) || (steps - steps.round()).abs() > 1e-9 {
            return fail(format!(
                "horizon {} must be a positive multiple of q_sim {}",
                self.horizon, self.q_sim
            ));
        }
        if self.reps == 0 {
            return fail("reps must be at least 1".into());
        }
        if self.cohort.count == 0 {
            return fail("cohort count must be at least 1".into());
        }
        if !(self.koopman.training_days > 0.0) || self.koopman.order < 3 {
            return fail("Koopman needs training_days > 0 and order >= 3".into());
        }
        self.solver.validate()?;
        PlanOptions {
            q_sim: self.q_sim,
            ..self.plan
        }
        .validate()?;
        self.controller.pid.validate()?;
        self.controller.mpc.validate()?;
        self.controller.bayesian_lqg.validate()?;
        Ok(())
    }

    /// Cohort with enough days of meals for the horizon and training runs.
    pub fn cohort_spec(&self) -> CohortSpec {
        let needed = (self.horizon.max(self.koopman.training_days * DAY) / DAY).ceil() as usize;
        CohortSpec {
            days: self.cohort.days.max(needed),
            ..self.cohort.clone()
        }
    }
}

/// Which engine (and budget) produced a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "engine", rename_all = "snake_case")]
pub enum Approach {
    Oracle,
    Plis { eps: f64, psi: f64 },
    Koopman,
}

fn pct(x: f64) -> String {
    format!("{}", (x * 1e4).round() / 1e2)
}

impl Approach {
    pub fn label(&self) -> String {
        match self {
            Approach::Oracle => "ORACLE".into(),
            Approach::Plis { eps, psi } => format!("PLIS (eps={}%, psi={}%)", pct(*eps), pct(*psi)),
            Approach::Koopman => "Koopman".into(),
        }
    }

    pub fn tag(&self) -> String {
        match self {
            Approach::Oracle => "oracle".into(),
            Approach::Plis { eps, psi } => format!("plis_eps{}_psi{}", pct(*eps), pct(*psi)),
            Approach::Koopman => "koopman".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub trace: Trace,
    pub glycemic: GlycemicReport,
    /// Against the cell's ORACLE run.
    pub rho: Option<f64>,
    pub trace_error: Option<f64>,
    pub s_p: Option<f64>,
    /// Timed repetitions (seconds), warm-up excluded.
    pub seconds: Vec<f64>,
    pub median_seconds: f64,
    pub plan: Option<InvariantStepPlan>,
    pub plan_seconds: Option<f64>,
    pub koopman: Option<KoopmanModel>,
    pub min_command: f64,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub patient: usize,
    pub controller: ControllerKind,
    pub approach: Approach,
    /// Position among identical approaches of the same cell.
    pub replica: usize,
    pub outcome: std::result::Result<RunMetrics, String>,
}

impl RunRecord {
    pub fn label(&self) -> String {
        if self.replica == 0 {
            self.approach.label()
        } else {
            format!("{}#{}", self.approach.label(), self.replica + 1)
        }
    }

    pub fn tag(&self) -> String {
        if self.replica == 0 {
            self.approach.tag()
        } else {
            format!("{}_{}", self.approach.tag(), self.replica + 1)
        }
    }

    pub fn metrics(&self) -> Option<&RunMetrics> {
        self.outcome.as_ref().ok()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub patients: Vec<VirtualPatient>,
    pub records: Vec<RunRecord>,
    pub elapsed_seconds: f64,
}

impl ExperimentResults {
    pub fn failures(&self) -> Vec<&RunRecord> {
        self.records.iter().filter(|r| r.outcome.is_err()).collect()
    }

    pub fn find(&self, patient: usize, controller: ControllerKind, approach: &Approach) -> Option<&RunRecord> {
        self.records
            .iter()
            .find(|r| r.patient == patient && r.controller == controller && &r.approach == approach && r.replica == 0)
    }
}

/// Closed-loop scenario of one patient: meal announcements as events.
pub fn patient_scenario(p: &VirtualPatient, horizon: f64, q_sim: f64, tick_period: f64) -> Result<Scenario> {
    p.validate(q_sim)?;
    let events = p
        .meals_until(horizon)
        .into_iter()
        .filter(|m| m.time < horizon)
        .map(|m| WmnEvent {
            time: m.time,
            record: ConfigRecord::MealAnnouncement {
                size: m.size,
                grams: m.grams,
            },
        })
        .collect();
    Ok(Scenario {
        sys: bmm_system(p, horizon),
        exogenous: p.exogenous_input(horizon)?,
        schedule: WmnEventSchedule::new(events)?,
        x0: p.x0(),
        span: (0.0, horizon),
        q_sim,
        tick_period,
    })
}

/// Run `f` once as warm-up, then `reps` timed times. Returns the warm-up
/// trace and the timed wall-clock seconds.
pub fn timed<F>(reps: usize, mut f: F) -> Result<(Trace, Vec<f64>)>
where
    F: FnMut() -> Result<Trace>,
{
    let trace = f()?;
    let mut seconds = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = f()?;
        seconds.push(t.wall_clock_seconds.unwrap_or(0.0));
    }
    Ok((trace, seconds))
}

fn min_command(trace: &Trace) -> f64 {
    trace.inputs.iter().map(|u| u[INSULIN_INPUT]).fold(f64::INFINITY, f64::min)
}

struct Cell<'a> {
    cfg: &'a ExperimentConfig,
    patient: &'a VirtualPatient,
    kind: ControllerKind,
    scn: Scenario,
}

impl Cell<'_> {
    fn run_engine(&self, f: impl Fn(&mut dyn crate::controllers::Controller) -> Result<Trace>) -> Result<(Trace, Vec<f64>, Diagnostics)> {
        let mut diag = Diagnostics::default();
        let (trace, seconds) = timed(self.cfg.reps, || {
            let mut c = self.build_controller()?;
            let t = f(c.as_mut())?;
            diag = c.diagnostics();
            Ok(t)
        })?;
        Ok((trace, seconds, diag))
    }

    fn build_controller(&self) -> Result<Box<dyn crate::controllers::Controller>> {
        self.cfg
            .controller
            .build(self.kind, self.patient.bmm.i_b, &self.patient.x0(), &[])
    }

    fn metrics(
        &self,
        trace: Trace,
        seconds: Vec<f64>,
        diagnostics: Diagnostics,
        oracle: Option<&RunMetrics>,
    ) -> Result<RunMetrics> {
        let glycemic = glycemic(&trace)?;
        let median_seconds = median(&seconds).unwrap_or(0.0);
        let (rho, trace_error, s_p) = match oracle {
            Some(o) => (
                Some(optimality(&trace, &o.trace)?),
                Some(trace_distance(&trace, &o.trace, DistanceMode::RelativeRmse)?),
                speedup_of(median_seconds, o.median_seconds).ok(),
            ),
            None => (None, None, None),
        };
        Ok(RunMetrics {
            min_command: min_command(&trace),
            trace,
            glycemic,
            rho,
            trace_error,
            s_p,
            seconds,
            median_seconds,
            plan: None,
            plan_seconds: None,
            koopman: None,
            diagnostics,
        })
    }

    fn oracle(&self) -> Result<RunMetrics> {
        let solver = SolverConfig {
            q_sim: self.cfg.q_sim,
            ..self.cfg.solver
        };
        let (trace, seconds, diag) = self.run_engine(|c| oracle_simulate(&self.scn, c, &solver))?;
        self.metrics(trace, seconds, diag, None)
    }

    fn plan(&self, budget: ErrorBudget, oracle: Option<&RunMetrics>) -> Result<(InvariantStepPlan, f64)> {
        let input = match oracle {
            Some(o) => InputSignal::from_samples(&o.trace.times, &o.trace.inputs, self.cfg.horizon)?,
            None => self.scn.exogenous.clone(),
        };
        let opts = PlanOptions {
            q_sim: self.cfg.q_sim,
            ..self.cfg.plan
        };
        let started = std::time::Instant::now();
        let plan = compute_invariant_step(&self.scn.sys, &input, &self.scn.x0, self.scn.span, budget, &opts)?;
        Ok((plan, started.elapsed().as_secs_f64()))
    }

    fn plis(&self, pair: BudgetPair, oracle: Option<&RunMetrics>) -> Result<RunMetrics> {
        let (plan, plan_seconds) = self.plan(pair.budget()?, oracle)?;
        let (trace, seconds, diag) = self.run_engine(|c| plis_simulate(&self.scn, c, &plan))?;
        let mut m = self.metrics(trace, seconds, diag, oracle)?;
        m.plan = Some(plan);
        m.plan_seconds = Some(plan_seconds);
        Ok(m)
    }

    fn koopman(&self, oracle: Option<&RunMetrics>) -> Result<RunMetrics> {
        let training_horizon = self.cfg.koopman.training_days * DAY;
        let training_scn = patient_scenario(self.patient, training_horizon, self.cfg.q_sim, self.cfg.tick_period)?;
        let solver = SolverConfig {
            q_sim: self.cfg.q_sim,
            ..self.cfg.solver
        };
        let mut c = self.build_controller()?;
        let training = oracle_simulate(&training_scn, c.as_mut(), &solver)?;
        let model = dmd_fit(
            &[Snapshots::from(&training)],
            self.cfg.koopman.order,
            &AP_DELAY_ORDER,
            self.cfg.q_sim,
        )?;
        let (trace, seconds, diag) = self.run_engine(|c| koopman_simulate(&self.scn, c, &model))?;
        let mut m = self.metrics(trace, seconds, diag, oracle)?;
        m.koopman = Some(model);
        Ok(m)
    }
}

/// Delay coordinates of the AP plant: glucose, then interstitial, then
/// plasma insulin.
pub const AP_DELAY_ORDER: [usize; 3] = [GLUCOSE, crate::ap::INTERSTITIAL, crate::ap::INSULIN];

/// Execute the full matrix. Engine failures are recorded per run and never
/// abort the experiment; `progress` receives one line per finished run.
pub fn run_experiment(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<ExperimentResults> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let patients = generate_cohort(&cfg.cohort_spec())?;
    let mut records = Vec::new();
    for (pi, patient) in patients.iter().enumerate() {
        for &kind in &cfg.controllers {
            let scn = match patient_scenario(patient, cfg.horizon, cfg.q_sim, cfg.tick_period) {
                Ok(s) => s,
                Err(e) => {
                    for approach in approaches(cfg) {
                        records.push(RunRecord {
                            patient: pi,
                            controller: kind,
                            approach,
                            replica: 0,
                            outcome: Err(e.to_string()),
                        });
                    }
                    continue;
                }
            };
            let cell = Cell {
                cfg,
                patient,
                kind,
                scn,
            };
            let mut oracle: Option<RunMetrics> = None;
            let mut seen: Vec<Approach> = Vec::new();
            for approach in approaches(cfg) {
                let replica = seen.iter().filter(|a| **a == approach).count();
                seen.push(approach);
                let outcome = match approach {
                    Approach::Oracle if replica == 0 => cell.oracle(),
                    Approach::Oracle => cell.oracle().and_then(|m| {
                        cell.metrics(m.trace, m.seconds, m.diagnostics, oracle.as_ref())
                    }),
                    Approach::Plis { eps, psi } => cell.plis(BudgetPair { eps, psi }, oracle.as_ref()),
                    Approach::Koopman => cell.koopman(oracle.as_ref()),
                };
                let outcome = outcome.map_err(|e| e.to_string());
                progress(&format!(
                    "{} {} {}: {}",
                    patient.id,
                    kind.label(),
                    approach.label(),
                    match &outcome {
                        Ok(m) => format!("TIR {:.1}% median {:.4}s", m.glycemic.tir, m.median_seconds),
                        Err(e) => format!("FAILED ({e})"),
                    }
                ));
                if approach == Approach::Oracle && replica == 0 {
                    if let Ok(m) = &outcome {
                        oracle = Some(m.clone());
                    }
                }
                records.push(RunRecord {
                    patient: pi,
                    controller: kind,
                    approach,
                    replica,
                    outcome,
                });
            }
        }
    }
    Ok(ExperimentResults {
        config: cfg.clone(),
        patients,
        records,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Approaches in run order: ORACLE first so the others can be compared.
fn approaches(cfg: &ExperimentConfig) -> Vec<Approach> {
    let mut out = Vec::new();
    let oracle_count = cfg.engines.iter().filter(|e| **e == EngineKind::Oracle).count();
    out.extend(std::iter::repeat_n(Approach::Oracle, oracle_count));
    for e in &cfg.engines {
        match e {
            EngineKind::Oracle => {}
            EngineKind::Plis => out.extend(cfg.budgets.iter().map(|b| Approach::Plis { eps: b.eps, psi: b.psi })),
            EngineKind::Koopman => out.push(Approach::Koopman),
        }
    }
    out
}

/// PLIS plan for one patient and controller, built on that cell's ORACLE
/// inputs.
pub fn plan_for(
    cfg: &ExperimentConfig,
    patient: usize,
    controller: ControllerKind,
    budget: ErrorBudget,
) -> Result<InvariantStepPlan> {
    cfg.validate()?;
    let patients = generate_cohort(&cfg.cohort_spec())?;
    let p = patients
        .get(patient)
        .ok_or_else(|| SimError::Config(format!("cohort has {} patients", patients.len())))?;
    let cell = Cell {
        cfg,
        patient: p,
        kind: controller,
        scn: patient_scenario(p, cfg.horizon, cfg.q_sim, cfg.tick_period)?,
    };
    let solver = SolverConfig {
        q_sim: cfg.q_sim,
        ..cfg.solver
    };
    let mut c = cell.build_controller()?;
    let trace = oracle_simulate(&cell.scn, c.as_mut(), &solver)?;
    let oracle = cell.metrics(trace, vec![], Diagnostics::default(), None)?;
    Ok(cell.plan(budget, Some(&oracle))?.0)
}
