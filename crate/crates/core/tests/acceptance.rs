//! End-to-end acceptance checks. Every criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use plis::ap::{bmm_system, generate_cohort, CohortSpec, CortisolProfile, SensitivityRegression, INSULIN_INPUT};
use plis::closed_loop::Scenario;
use plis::controllers::mpc::MpcCore;
use plis::controllers::riccati::{dare_residual, solve_care, solve_dare};
use plis::controllers::{ControllerKind, OpenLoop};
use plis::experiment::{run_experiment, Approach, BudgetPair, EngineKind, ExperimentConfig, ExperimentResults};
use plis::koopman::{dmd_fit, Snapshots};
use plis::ltv::{trace_distance, DistanceMode, FrozenSystem, InputSignal, Trace};
use plis::metrics::{glycemic_of, optimality};
use plis::plis::{compute_invariant_step, plis_simulate, ErrorBudget, PlanOptions};
use plis::report::emit_reports;
use plis::solvers::{euler_fixed, rk45_adaptive, OdeProblem, Rk45, SolverConfig};
use plis::wmn::WmnEventSchedule;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Per-interval and whole-trace comparison of every converged plan.
fn soundness_violations(results: &ExperimentResults, out: &mut Vec<String>) -> (usize, usize) {
    let mut checked = 0;
    let mut violations = 0;
    for r in &results.records {
        let (Approach::Plis { psi, .. }, Some(m)) = (r.approach, r.metrics()) else {
            continue;
        };
        let plan = m.plan.as_ref().unwrap();
        let Some(oracle) = results.find(r.patient, r.controller, &Approach::Oracle).and_then(|o| o.metrics()) else {
            continue;
        };
        if !plan.converged {
            continue;
        }
        let q = plan.q_sim;
        for iv in &plan.intervals {
            let (a, b) = ((iv.start / q).round() as usize, (iv.end / q).round() as usize);
            let d = trace_distance(&m.trace.slice(a, b), &oracle.trace.slice(a, b), DistanceMode::RelativeRmse)
                .unwrap();
            checked += 1;
            if d > iv.r_max + 1e-4 {
                violations += 1;
                if out.len() < 5 {
                    out.push(format!(
                        "{} {} {} [{}, {}): measured {d:.2e} > r_max {:.2e}",
                        results.patients[r.patient].id,
                        r.controller.label(),
                        r.label(),
                        iv.start,
                        iv.end,
                        iv.r_max
                    ));
                }
            }
        }
        let whole = m.trace_error.unwrap();
        checked += 1;
        if whole > psi {
            violations += 1;
            out.push(format!(
                "{} {} {}: trace error {whole:.3e} > psi {psi}",
                results.patients[r.patient].id,
                r.controller.label(),
                r.label()
            ));
        }
    }
    (checked, violations)
}

fn criterion_1(default: &ExperimentResults, seconds: f64) -> Verdict {
    let mean_sp = |eps: f64, psi: f64| {
        let v: Vec<f64> = default
            .records
            .iter()
            .filter(|r| r.controller == ControllerKind::Mpc && r.approach == Approach::Plis { eps, psi })
            .filter_map(|r| r.metrics().and_then(|m| m.s_p))
            .collect();
        (v.iter().sum::<f64>() / v.len() as f64, v.len())
    };
    let (s3, n3) = mean_sp(0.03, 0.05);
    let (s10, n10) = mean_sp(0.10, 0.15);
    let n = default.patients.len();
    verdict(
        n3 == n && n10 == n && s3 >= 1.5 && s10 > s3 && seconds < 900.0,
        format!("MPC S_p(3%) = {s3:.2}, S_p(10%) = {s10:.2}, matrix took {seconds:.1} s"),
    )
}

fn criterion_2(runs: &[&ExperimentResults]) -> Verdict {
    let mut examples = Vec::new();
    let (mut checked, mut violations) = (0, 0);
    for r in runs {
        let (c, v) = soundness_violations(r, &mut examples);
        checked += c;
        violations += v;
    }
    let mut detail = format!("{violations} violations in {checked} checks");
    for e in examples {
        detail.push_str("\n      ");
        detail.push_str(&e);
    }
    verdict(violations == 0 && checked > 0, detail)
}

const LADDER: [f64; 4] = [0.10, 0.05, 0.03, 0.01];

/// (eps, q_inv, trace error, rho)
type LadderStep = (f64, f64, f64, f64);

/// Per (patient, controller), in ladder order.
fn ladder_rows(ladder: &ExperimentResults) -> BTreeMap<(usize, ControllerKind), Vec<LadderStep>> {
    let mut rows: BTreeMap<_, Vec<_>> = BTreeMap::new();
    for r in &ladder.records {
        if let (Approach::Plis { eps, .. }, Some(m)) = (r.approach, r.metrics()) {
            rows.entry((r.patient, r.controller)).or_default().push((
                eps,
                m.plan.as_ref().unwrap().q_inv,
                m.trace_error.unwrap(),
                m.rho.unwrap(),
            ));
        }
    }
    rows
}

fn criterion_3(ladder: &ExperimentResults) -> Verdict {
    let rows = ladder_rows(ladder);
    let mut bad = Vec::new();
    for ((p, c), v) in &rows {
        let ok = v.len() == LADDER.len() && v.windows(2).all(|w| w[1].1 <= w[0].1 && w[1].2 <= w[0].2);
        if !ok {
            bad.push(format!("{} {}: {:?}", ladder.patients[*p].id, c.label(), v));
        }
    }
    let expected = ladder.patients.len() * ladder.config.controllers.len();
    verdict(
        bad.is_empty() && rows.len() == expected,
        format!("{} of {expected} patient/controller ladders monotone {}", rows.len() - bad.len(), bad.join("; ")),
    )
}

fn criterion_4() -> Verdict {
    let mut p = generate_cohort(&CohortSpec {
        count: 1,
        ..Default::default()
    })
    .unwrap()
    .remove(0);
    p.sensitivity = SensitivityRegression {
        eta: 0.0,
        beta: p.sensitivity.beta,
    };
    let horizon = 2880.0;
    let sys = bmm_system(&p, horizon);
    let input = p.exogenous_input(horizon).unwrap();
    let opts = PlanOptions::default();
    let plan = compute_invariant_step(
        &sys,
        &input,
        &p.x0(),
        (0.0, horizon),
        ErrorBudget::new(0.03, 0.05).unwrap(),
        &opts,
    )
    .unwrap();
    let scn = Scenario {
        sys: sys.clone(),
        exogenous: input.clone(),
        schedule: WmnEventSchedule::empty(),
        x0: p.x0(),
        span: (0.0, horizon),
        q_sim: 1.0,
        tick_period: 5.0,
    };
    let plis = plis_simulate(&scn, &mut OpenLoop, &plan).unwrap();
    let euler = euler_fixed(
        &OdeProblem::new(move |t, x, u| sys.rhs(t, x, u), input, p.x0(), (0.0, horizon)),
        1.0,
    )
    .unwrap();
    let bitwise = plis.states == euler.states && plis.times == euler.times;
    let zero_r = plan.intervals.iter().all(|i| i.r_max == 0.0);
    verdict(
        bitwise && zero_r && plan.q_inv == opts.initial_q_inv,
        format!(
            "bitwise {bitwise}, all r_max = 0 {zero_r}, q_inv {} (initial {})",
            plan.q_inv, opts.initial_q_inv
        ),
    )
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = dmatrix![0.9, 0.1, 0.0; -0.05, 0.85, 0.02; 0.0, 0.03, 0.7];
    let b = dmatrix![1.0, 0.0; 0.2, 0.5; 0.0, 0.3];
    let run = |rng: &mut ChaCha8Rng, len: usize| {
        let mut x = dvector![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let (mut states, mut inputs) = (Vec::new(), Vec::new());
        for _ in 0..len {
            let u = dvector![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            states.push(x.clone());
            inputs.push(u.clone());
            x = &a * &x + &b * &u;
        }
        Snapshots { states, inputs }
    };
    let train = run(&mut rng, 200);
    let model = dmd_fit(&[train], 3, &[], 1.0).unwrap();
    let mut truth: Vec<_> = a.complex_eigenvalues().iter().copied().collect();
    let mut fitted: Vec<_> = model.a_k.complex_eigenvalues().iter().copied().collect();
    let key = |c: &nalgebra::Complex<f64>| (c.re, c.im);
    truth.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
    fitted.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
    let eig_err = truth.iter().zip(&fitted).map(|(t, f)| (t - f).norm()).fold(0.0, f64::max);

    let held = run(&mut rng, 100);
    let mut z = model.lift(&held.states[..1]);
    let mut predicted = vec![model.unlift(&z)];
    for k in 0..held.states.len() - 1 {
        z = model.step_lifted(&z, &held.inputs[k]);
        predicted.push(model.unlift(&z));
    }
    let rmse = plis::ltv::per_state_relative_rmse(&predicted, &held.states, &held.states)
        .into_iter()
        .fold(0.0, f64::max);
    verdict(
        eig_err <= 1e-8 && rmse <= 1e-6,
        format!("eigenvalue error {eig_err:.2e}, held-out relative RMSE {rmse:.2e}"),
    )
}

fn decay_problem(t1: f64) -> OdeProblem {
    OdeProblem::new(
        |_, x, _| -x,
        InputSignal::constant(DVector::zeros(0), t1),
        dvector![1.0],
        (0.0, t1),
    )
}

fn criterion_6() -> Verdict {
    let err = |h: f64| {
        let tr = euler_fixed(&decay_problem(1.0), h).unwrap();
        (tr.states.last().unwrap()[0] - (-1.0f64).exp()).abs()
    };
    let ratio = err(0.01) / err(0.005);

    let cfg = SolverConfig {
        q_sim: 0.5,
        ..Default::default()
    };
    // short enough that the state stays far above abs_tol
    let tr = rk45_adaptive(&decay_problem(1.0), &cfg).unwrap();
    let exact = (-1.0f64).exp();
    let rk_err = (tr.states.last().unwrap()[0] - exact).abs() / exact;

    let rot = dmatrix![0.0, 1.0; -1.0, 0.0];
    let mut solver = Rk45::new(SolverConfig {
        rel_tol: 1e-10,
        abs_tol: 1e-12,
        ..Default::default()
    });
    let x0 = dvector![1.0, 0.0];
    let end = solver
        .integrate(|_, x| &rot * x, 0.0, &x0, 2.0 * std::f64::consts::PI, &[], &mut Vec::new())
        .unwrap();
    let closure = (end - &x0).norm();
    verdict(
        (1.8..=2.2).contains(&ratio) && rk_err <= 10.0 * cfg.rel_tol && closure <= 1e-6,
        format!("Euler ratio {ratio:.4}, RK45 relative error {rk_err:.2e}, rotation closure {closure:.2e}"),
    )
}

/// Minimum of a quadratic recovered from cost evaluations alone.
fn brute_force_minimum(n: usize, cost: impl Fn(&DVector<f64>) -> f64, centre: &DVector<f64>) -> f64 {
    let f0 = cost(centre);
    let e = |i: usize| {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        v
    };
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for i in 0..n {
        let (fp, fm) = (cost(&(centre + e(i))), cost(&(centre - e(i))));
        g[i] = 0.5 * (fp - fm);
        h[(i, i)] = fp + fm - 2.0 * f0;
    }
    for i in 0..n {
        for j in 0..i {
            let fij = cost(&(centre + e(i) + e(j)));
            let v = fij - f0 - g[i] - g[j] - 0.5 * (h[(i, i)] + h[(j, j)]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    let step = h.lu().solve(&(-g)).unwrap();
    cost(&(centre + step))
}

fn criterion_7(runs: &[&ExperimentResults]) -> Verdict {
    let a = dmatrix![0.9, 0.2, 0.0; 0.0, 0.8, 0.1; 0.05, 0.0, 0.95];
    let b = dmatrix![0.0; 0.1; 1.0];
    let q = DMatrix::identity(3, 3);
    let r = dmatrix![0.5];
    let sol = solve_dare(&a, &b, &q, &r).unwrap();
    let residual = dare_residual(&a, &b, &q, &r, &sol.p).norm();

    let care = solve_care(&dmatrix![-1.0], &dmatrix![1.0], &dmatrix![1.0], &dmatrix![1.0]).unwrap();
    let gain_err = (care.k[(0, 0)] - (2f64.sqrt() - 1.0)).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mpc_gap: f64 = 0.0;
    let mut instances = 0;
    for np in 1..=5 {
        for nc in 1..=np {
            let model = FrozenSystem {
                a: dmatrix![-0.05, 0.0; 0.02, -0.03],
                b: dmatrix![rng.gen_range(0.5..2.0), 0.0; 0.0, 0.01],
                start: 0.0,
                end: 1.0,
            };
            let mut core = MpcCore::new(np, nc, 1.0, rng.gen_range(0.1..10.0), 2.0, 0, 1);
            assert!(core.prepare(&model));
            let x0 = dvector![rng.gen_range(-1.0..1.0), rng.gen_range(80.0..200.0)];
            let w = dvector![0.0, rng.gen_range(0.0..5.0)];
            let (sp, basal) = (120.0, 0.3);
            let moves = core.solve(&x0, &w, sp, basal);
            let cost = |m: &DVector<f64>| core.cost(&x0, &w, sp, basal, m);
            let best = brute_force_minimum(nc, cost, &DVector::from_element(nc, basal));
            let found = cost(&moves);
            mpc_gap = mpc_gap.max((found - best).abs() / best.abs().max(1.0));
            instances += 1;
        }
    }

    let mut negative = 0;
    let mut commands = 0;
    for res in runs {
        for rec in &res.records {
            if let Some(m) = rec.metrics() {
                for u in &m.trace.inputs {
                    commands += 1;
                    let c = u[INSULIN_INPUT];
                    if !(c >= 0.0 && c.is_finite()) {
                        negative += 1;
                    }
                }
            }
        }
    }
    verdict(
        residual <= 1e-8 && gain_err <= 1e-6 && mpc_gap <= 1e-6 && negative == 0 && commands > 0,
        format!(
            "DARE residual {residual:.2e}, scalar gain error {gain_err:.2e}, \
             MPC cost gap {mpc_gap:.2e} over {instances} instances, {negative} bad of {commands} commands"
        ),
    )
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.gen_range(1..500);
        let g: Vec<f64> = (0..len).map(|_| rng.gen_range(20.0..400.0)).collect();
        let r = glycemic_of(&g).unwrap();
        worst = worst.max((r.tir + r.tar + r.tbr - 100.0).abs());
    }
    let mut t = Trace::new("x");
    for k in 0..50 {
        let s = k as f64;
        t.push(s, dvector![0.1 + 0.01 * s, 0.05, 100.0 + s], dvector![0.0, 0.0]);
    }
    let mut scaled = t.clone();
    for x in &mut scaled.states {
        *x *= 2.0;
    }
    let rho_c = optimality(&scaled, &t).unwrap();
    let rho_1 = optimality(&t, &t).unwrap();
    verdict(
        worst <= 1e-9 && rho_c == 2.0 && rho_1 == 1.0,
        format!("max |sum - 100| = {worst:.1e}, rho(2x, x) = {rho_c}, rho(x, x) = {rho_1}"),
    )
}

fn criterion_9(ladder: &ExperimentResults) -> Verdict {
    let rows = ladder_rows(ladder);
    let mut bad = Vec::new();
    let mut worst: f64 = 0.0;
    for ((p, c), v) in &rows {
        let at = |eps: f64| v.iter().find(|r| r.0 == eps).map(|r| (r.3 - 1.0).abs());
        let (Some(fine), Some(coarse)) = (at(0.01), at(0.10)) else {
            bad.push(format!("{} {}: missing run", ladder.patients[*p].id, c.label()));
            continue;
        };
        worst = worst.max(fine);
        if !(fine < coarse && fine <= 0.05) {
            bad.push(format!(
                "{} {}: |rho-1| {fine:.2e} at 1% vs {coarse:.2e} at 10%",
                ladder.patients[*p].id,
                c.label()
            ));
        }
    }
    verdict(
        bad.is_empty() && !rows.is_empty(),
        format!("max |rho-1| at 1% = {worst:.2e} {}", bad.join("; ")),
    )
}

fn criterion_10() -> Verdict {
    let base = CortisolProfile::default();
    let (k_p, t_p2) = (base.k_p, base.t_p2);
    let params_ok = base.k_p == 1.215 && base.t_p1 == 150.0 && base.t_p2 == 300.0 && base.t_z == 90.0 && base.t_d == 15.0;
    let onset_zero = base.stress_event_times.iter().all(|&e| {
        let single = CortisolProfile {
            stress_event_times: vec![e],
            repeat_daily: false,
            ..base.clone()
        };
        single.at(e) == 0.0
    });
    let min = (0..=14400).map(|k| base.at(k as f64 * 0.1)).fold(f64::INFINITY, f64::min);
    let single = CortisolProfile {
        stress_event_times: vec![0.0],
        repeat_daily: false,
        ..base.clone()
    };
    let tail = single.at(20.0 * t_p2).abs();
    verdict(
        params_ok && onset_zero && min >= 0.0 && tail < 1e-6 * k_p,
        format!("C(onset) = 0 {onset_zero}, min over day {min:.3e}, C(20 T_p2) = {tail:.3e}"),
    )
}

fn csv_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            csv_files(&p, out);
        } else if p.extension().is_some_and(|x| x == "csv") {
            out.push(p);
        }
    }
}

fn criterion_11(first: &Path, second: &Path) -> Verdict {
    let mut files = Vec::new();
    csv_files(first, &mut files);
    let mut compared = 0;
    let mut differing = Vec::new();
    for f in files {
        let name = f.file_name().unwrap().to_string_lossy().to_string();
        if name == "speedup.csv" || name == "timing.csv" {
            continue;
        }
        let rel = f.strip_prefix(first).unwrap();
        let other = std::fs::read(second.join(rel)).unwrap_or_default();
        compared += 1;
        if std::fs::read(&f).unwrap() != other {
            differing.push(rel.display().to_string());
        }
    }
    verdict(
        differing.is_empty() && compared > 0,
        format!("{compared} CSV files compared, differing: {differing:?}"),
    )
}

fn ladder_config() -> ExperimentConfig {
    ExperimentConfig {
        engines: vec![EngineKind::Oracle, EngineKind::Plis],
        budgets: LADDER.iter().map(|&eps| BudgetPair { eps, psi: 1.5 * eps }).collect(),
        reps: 1,
        write_traces: false,
        ..Default::default()
    }
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();

    let started = Instant::now();
    let default = run_experiment(&cfg, &mut |_| {}).unwrap();
    emit_reports(&default, &dir.path().join("first")).unwrap();
    let default_seconds = started.elapsed().as_secs_f64();

    let again = run_experiment(&cfg, &mut |_| {}).unwrap();
    emit_reports(&again, &dir.path().join("second")).unwrap();
    let ladder = run_experiment(&ladder_config(), &mut |_| {}).unwrap();

    let verdicts = [
        ("speedup headline", criterion_1(&default, default_seconds)),
        ("error-bound soundness", criterion_2(&[&default, &ladder])),
        ("budget monotonicity", criterion_3(&ladder)),
        ("zero-variance collapse", criterion_4()),
        ("Koopman oracle equivalence", criterion_5()),
        ("solver orders", criterion_6()),
        ("controller certificates", criterion_7(&[&default, &ladder])),
        ("metric identities", criterion_8()),
        ("optimality convergence", criterion_9(&ladder)),
        ("cortisol model fidelity", criterion_10()),
        ("end-to-end determinism", criterion_11(&dir.path().join("first"), &dir.path().join("second"))),
    ];
    let mut failed = Vec::new();
    for (k, (name, v)) in verdicts.iter().enumerate() {
        println!(
            "criterion {:>2} {:<28} {}  {}",
            k + 1,
            name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !v.pass {
            failed.push(k + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
