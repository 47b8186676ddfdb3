use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn plis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plis")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("exp.toml");
    let out = dir.join("out");
    fs::write(
        &path,
        format!(
            "horizon = 300.0\nreps = 1\ncontrollers = [\"pid\"]\nengines = [\"oracle\", \"plis\"]\n\
             budgets = [{{ eps = 0.10, psi = 0.15 }}]\nout_dir = {:?}\n{extra}\n[cohort]\ncount = 1\n",
            out.to_str().unwrap()
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn validate_accepts_a_good_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = plis(&["validate", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn validate_reports_the_offending_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "horizon = 300.0\nreps = \"many\"\n").unwrap();
    let o = plis(&["validate", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn validate_rejects_inconsistent_budget() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "budgets = [{ eps = 0.2, psi = 0.1 }]\n").unwrap();
    assert_eq!(code(&plis(&["validate", path.to_str().unwrap()])), 1);
}

#[test]
fn missing_config_is_an_io_error() {
    assert_eq!(code(&plis(&["validate", "/nonexistent/exp.toml"])), 3);
}

#[test]
fn run_writes_reports_and_traces_feed_fit_koopman() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = plis(&["run", &cfg, "--quiet"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    for f in ["glycemic.csv", "optimality.csv", "speedup.csv", "runs.csv", "summary.txt", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let traces: Vec<_> = fs::read_dir(out.join("traces")).unwrap().collect();
    assert_eq!(traces.len(), 2);

    let model = dir.path().join("model.txt");
    let o = plis(&[
        "fit-koopman",
        out.join("traces").to_str().unwrap(),
        "--order",
        "6",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(model.exists());
}

#[test]
fn overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let alt = dir.path().join("alt");
    let o = plis(&["run", &cfg, "--quiet", "--out", alt.to_str().unwrap(), "--horizon", "120", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(alt.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 3"));
    assert!(manifest.contains("\"horizon\": 120.0"));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let cfg = write_config(dir.path(), "");
    let o = plis(&["run", &cfg, "--quiet", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn failed_cells_give_partial_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[solver]\nmax_step = 1e-12\n");
    let o = plis(&["run", &cfg, "--quiet"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn plan_prints_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = plis(&["plan", &cfg, "--eps", "0.1", "--psi", "0.15", "--controller", "pid"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("q_inv") && text.contains("converged        true"), "{text}");
}

#[test]
fn fit_koopman_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&plis(&["fit-koopman", dir.path().to_str().unwrap()])), 1);
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["default.toml", "quick.toml"] {
        let o = plis(&["validate", root.join(name).to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}
