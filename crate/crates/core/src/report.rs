//! CSV, text and JSON outputs of an experiment.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;

use crate::ap::{p3_at, GLUCOSE, INSULIN, INSULIN_INPUT, INTERSTITIAL, MEAL_INPUT};
use crate::controllers::ControllerKind;
use crate::error::{Result, SimError};
use crate::experiment::{ExperimentResults, RunRecord};
use crate::ltv::Trace;
use crate::metrics::{cohort_glycemic, mean_sd, MeanSd};

pub const TRACE_HEADER: [&str; 7] = ["time", "i", "i_s", "G", "u_insulin", "u_meal", "p3"];

/// Create `dir` if needed and make sure files can be written into it.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(".write-check");
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> SimError {
    SimError::Io(e.to_string())
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(csv_err)
}

fn num(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}

/// One row group: a controller and an approach label, in run order.
struct Group<'a> {
    controller: ControllerKind,
    label: String,
    runs: Vec<&'a RunRecord>,
}

fn groups(results: &ExperimentResults) -> Vec<Group<'_>> {
    let mut out: Vec<Group> = Vec::new();
    for r in &results.records {
        let label = r.label();
        match out.iter_mut().find(|g| g.controller == r.controller && g.label == label) {
            Some(g) => g.runs.push(r),
            None => out.push(Group {
                controller: r.controller,
                label,
                runs: vec![r],
            }),
        }
    }
    out
}

impl Group<'_> {
    fn values(&self, f: impl Fn(&crate::experiment::RunMetrics) -> Option<f64>) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.metrics()).filter_map(f).collect()
    }
}

fn write_stat(row: &mut Vec<String>, s: Option<MeanSd>) {
    row.push(num(s.map(|s| s.mean)));
    row.push(num(s.map(|s| s.sd)));
}

fn write_aggregates(dir: &Path, groups: &[Group]) -> Result<()> {
    let mut gly = writer(&dir.join("glycemic.csv"))?;
    gly.write_record([
        "approach",
        "control_method",
        "n",
        "tir_mean",
        "tir_sd",
        "tar_mean",
        "tar_sd",
        "tbr_mean",
        "tbr_sd",
    ])
    .map_err(csv_err)?;
    let mut opt = writer(&dir.join("optimality.csv"))?;
    opt.write_record(["approach", "control_method", "n", "rho_mean", "rho_sd"]).map_err(csv_err)?;
    let mut spd = writer(&dir.join("speedup.csv"))?;
    spd.write_record(["approach", "control_method", "n", "speedup_mean", "speedup_sd"]).map_err(csv_err)?;

    for g in groups {
        let reports: Vec<_> = g.runs.iter().filter_map(|r| r.metrics()).map(|m| m.glycemic).collect();
        let c = cohort_glycemic(&reports);
        let mut row = vec![g.label.clone(), g.controller.label().into(), reports.len().to_string()];
        write_stat(&mut row, c.map(|c| c.tir));
        write_stat(&mut row, c.map(|c| c.tar));
        write_stat(&mut row, c.map(|c| c.tbr));
        gly.write_record(&row).map_err(csv_err)?;

        let rho = g.values(|m| m.rho);
        if !rho.is_empty() {
            let mut row = vec![g.label.clone(), g.controller.label().into(), rho.len().to_string()];
            write_stat(&mut row, mean_sd(&rho));
            opt.write_record(&row).map_err(csv_err)?;
        }
        let s_p = g.values(|m| m.s_p);
        if !s_p.is_empty() {
            let mut row = vec![g.label.clone(), g.controller.label().into(), s_p.len().to_string()];
            write_stat(&mut row, mean_sd(&s_p));
            spd.write_record(&row).map_err(csv_err)?;
        }
    }
    gly.flush()?;
    opt.flush()?;
    spd.flush()?;
    Ok(())
}

fn write_runs(dir: &Path, results: &ExperimentResults) -> Result<()> {
    let mut w = writer(&dir.join("runs.csv"))?;
    w.write_record([
        "patient",
        "control_method",
        "approach",
        "status",
        "tir",
        "tar",
        "tbr",
        "rho",
        "trace_error",
        "q_inv",
        "intervals",
        "plan_trace_error",
        "plan_converged",
        "koopman_fit_error",
        "ticks",
        "model_rebuilds",
        "min_command",
        "error",
    ])
    .map_err(csv_err)?;
    for r in &results.records {
        let id = results.patients[r.patient].id.clone();
        let row = match &r.outcome {
            Ok(m) => vec![
                id,
                r.controller.label().into(),
                r.label(),
                "ok".into(),
                format!("{}", m.glycemic.tir),
                format!("{}", m.glycemic.tar),
                format!("{}", m.glycemic.tbr),
                num(m.rho),
                num(m.trace_error),
                num(m.plan.as_ref().map(|p| p.q_inv)),
                m.plan.as_ref().map(|p| p.intervals.len().to_string()).unwrap_or_default(),
                num(m.plan.as_ref().map(|p| p.trace_error)),
                m.plan.as_ref().map(|p| p.converged.to_string()).unwrap_or_default(),
                num(m.koopman.as_ref().map(|k| k.fit_error)),
                m.diagnostics.ticks.to_string(),
                m.diagnostics.model_rebuilds.to_string(),
                format!("{}", m.min_command),
                String::new(),
            ],
            Err(e) => {
                let mut row = vec![id, r.controller.label().into(), r.label(), "failed".into()];
                row.extend(std::iter::repeat_n(String::new(), 13));
                row.push(e.clone());
                row
            }
        };
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_timing(dir: &Path, results: &ExperimentResults) -> Result<()> {
    let mut w = writer(&dir.join("timing.csv"))?;
    w.write_record([
        "patient",
        "control_method",
        "approach",
        "median_seconds",
        "rep_seconds",
        "plan_seconds",
        "speedup",
    ])
    .map_err(csv_err)?;
    for r in &results.records {
        if let Ok(m) = &r.outcome {
            let reps: Vec<String> = m.seconds.iter().map(|s| format!("{s}")).collect();
            w.write_record([
                results.patients[r.patient].id.clone(),
                r.controller.label().into(),
                r.label(),
                format!("{}", m.median_seconds),
                reps.join(";"),
                num(m.plan_seconds),
                num(m.s_p),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Path of the trace file of one run.
pub fn trace_path(dir: &Path, results: &ExperimentResults, r: &RunRecord) -> PathBuf {
    let controller = r.controller.label().to_lowercase().replace([' ', '-'], "_");
    dir.join("traces").join(format!(
        "{}_{}_{}.csv",
        results.patients[r.patient].id,
        controller,
        r.tag()
    ))
}

pub fn write_trace_csv(path: &Path, trace: &Trace, p3: impl Fn(f64) -> f64) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(TRACE_HEADER).map_err(csv_err)?;
    for k in 0..trace.len() {
        let (t, x, u) = (trace.times[k], &trace.states[k], &trace.inputs[k]);
        let ch = |i: usize| u.get(i).copied().unwrap_or(0.0);
        w.write_record(
            [t, x[INSULIN], x[INTERSTITIAL], x[GLUCOSE], ch(INSULIN_INPUT), ch(MEAL_INPUT), p3(t)]
                .map(|v| format!("{v}")),
        )
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a trace written by [`write_trace_csv`]. Columns are located by name.
pub fn read_trace_csv(path: &Path) -> Result<Trace> {
    let bad = |msg: String| SimError::Config(format!("{}: {msg}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(format!("missing column {name}")))
    };
    let idx = [col("time")?, col("i")?, col("i_s")?, col("G")?, col("u_insulin")?, col("u_meal")?];
    let mut trace = Trace::new("file");
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let mut v = [0.0; 6];
        for (slot, &i) in v.iter_mut().zip(&idx) {
            let field = rec.get(i).unwrap_or("");
            *slot = field
                .parse()
                .map_err(|_| bad(format!("row {}: cannot parse {field:?}", line + 2)))?;
        }
        let mut x = DVector::zeros(3);
        x[INSULIN] = v[1];
        x[INTERSTITIAL] = v[2];
        x[GLUCOSE] = v[3];
        let mut u = DVector::zeros(2);
        u[INSULIN_INPUT] = v[4];
        u[MEAL_INPUT] = v[5];
        trace.push(v[0], x, u);
    }
    if trace.is_empty() {
        return Err(bad("no rows".into()));
    }
    Ok(trace)
}

fn cell(s: Option<MeanSd>, digits: usize) -> String {
    match s {
        Some(s) => format!("{:.*} ± {:.*}", digits, s.mean, digits, s.sd),
        None => "n/a".into(),
    }
}

/// Human-readable cohort tables, one block per controller.
pub fn summary_text(results: &ExperimentResults) -> String {
    let groups = groups(results);
    let mut out = String::new();
    let cfg = &results.config;
    let _ = writeln!(
        out,
        "cohort of {} patients, horizon {} min, q_sim {} min, {} timed reps",
        results.patients.len(),
        cfg.horizon,
        cfg.q_sim,
        cfg.reps
    );
    for &kind in &cfg.controllers {
        let _ = writeln!(out, "\n{}", kind.label());
        let _ = writeln!(
            out,
            "{:<28} {:>16} {:>16} {:>16} {:>18} {:>16}",
            "approach", "TIR %", "TAR %", "TBR %", "rho", "speedup"
        );
        for g in groups.iter().filter(|g| g.controller == kind) {
            let reports: Vec<_> = g.runs.iter().filter_map(|r| r.metrics()).map(|m| m.glycemic).collect();
            let c = cohort_glycemic(&reports);
            let rho = mean_sd(&g.values(|m| m.rho));
            let s_p = mean_sd(&g.values(|m| m.s_p));
            let _ = writeln!(
                out,
                "{:<28} {:>16} {:>16} {:>16} {:>18} {:>16}",
                g.label,
                cell(c.map(|c| c.tir), 1),
                cell(c.map(|c| c.tar), 1),
                cell(c.map(|c| c.tbr), 1),
                cell(rho, 4),
                cell(s_p, 2)
            );
        }
    }
    let failures = results.failures();
    if !failures.is_empty() {
        let _ = writeln!(out, "\n{} failed runs:", failures.len());
        for r in failures {
            let _ = writeln!(
                out,
                "  {} {} {}: {}",
                results.patients[r.patient].id,
                r.controller.label(),
                r.label(),
                r.outcome.as_ref().err().map(String::as_str).unwrap_or("")
            );
        }
    }
    out
}

#[derive(Serialize)]
struct TimingEntry {
    patient: String,
    controller: &'static str,
    approach: String,
    median_seconds: f64,
    rep_seconds: Vec<f64>,
    plan_seconds: Option<f64>,
}

fn manifest(results: &ExperimentResults) -> Result<serde_json::Value> {
    let timing: Vec<TimingEntry> = results
        .records
        .iter()
        .filter_map(|r| {
            r.metrics().map(|m| TimingEntry {
                patient: results.patients[r.patient].id.clone(),
                controller: r.controller.label(),
                approach: r.label(),
                median_seconds: m.median_seconds,
                rep_seconds: m.seconds.clone(),
                plan_seconds: m.plan_seconds,
            })
        })
        .collect();
    let failures: Vec<_> = results
        .failures()
        .iter()
        .map(|r| {
            json!({
                "patient": results.patients[r.patient].id,
                "controller": r.controller.label(),
                "approach": r.label(),
                "error": r.outcome.as_ref().err(),
            })
        })
        .collect();
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    Ok(json!({
        "config": serde_json::to_value(&results.config).map_err(|e| SimError::Config(e.to_string()))?,
        "seed": results.config.cohort.seed,
        "patients": results.patients.iter().map(|p| &p.id).collect::<Vec<_>>(),
        "host": {
            "os": std::env::consts::OS,
            "arch": std::env::consts::ARCH,
            "cpus": cpus,
        },
        "timing_protocol": format!(
            "one discarded warm-up, then {} timed repetitions per run; the median is reported; \
             PLIS plan construction is timed separately and excluded from the speedup",
            results.config.reps
        ),
        "elapsed_seconds": results.elapsed_seconds,
        "timing": timing,
        "failures": failures,
    }))
}

/// Write every output file into `dir`. With no successful runs only the
/// manifest is written.
pub fn emit_reports(results: &ExperimentResults, dir: &Path) -> Result<()> {
    prepare_output_dir(dir)?;
    let text = serde_json::to_string_pretty(&manifest(results)?).map_err(|e| SimError::Config(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text)?;
    if results.records.iter().all(|r| r.outcome.is_err()) {
        return Ok(());
    }
    let groups = groups(results);
    write_aggregates(dir, &groups)?;
    write_runs(dir, results)?;
    write_timing(dir, results)?;
    fs::write(dir.join("summary.txt"), summary_text(results))?;
    if results.config.write_traces {
        fs::create_dir_all(dir.join("traces"))?;
        for r in &results.records {
            if let Ok(m) = &r.outcome {
                let patient = &results.patients[r.patient];
                write_trace_csv(&trace_path(dir, results, r), &m.trace, |t| p3_at(patient, t))?;
            }
        }
    }
    Ok(())
}
