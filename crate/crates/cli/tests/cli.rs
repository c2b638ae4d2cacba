use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const LQ: &str = r#"
seed = 1
[dynamics]
a = [[0.0]]
b = [[1.0]]
horizon = 1.0
[grid]
steps = 40
[model]
q_terminal = [[1.0]]
[m0]
points = [[-1.0], [1.0]]
[diagnostics]
centers = 20
[pde]
tests = 6
hjb_samples = 30
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn pathmfg(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathmfg"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn report_of(out: &Output) -> (PathBuf, Value) {
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    let path = PathBuf::from(stdout.trim());
    let value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    (path.parent().unwrap().to_path_buf(), value)
}

#[test]
fn equilibrium_writes_converged_report_and_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lq.toml", LQ);
    let out = pathmfg(&["equilibrium"], &cfg, &tmp.path().join("runs"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let (dir, report) = report_of(&out);
    assert_eq!(report["converged"], Value::Bool(true));
    assert_eq!(report["passed"], Value::Bool(true));
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    assert!(report["apriori_bounds"]["kappa"].as_f64().unwrap() > 0.0);
    let flow = fs::read_to_string(dir.join("flow.csv")).unwrap();
    let mut lines = flow.lines();
    assert_eq!(lines.next(), Some("t,w,x1"));
    // Two particles at each of the 41 nodes.
    assert_eq!(lines.count(), 82);
}

#[test]
fn diagnose_on_resting_population_reports_zero_holder_constant() {
    let tmp = tempfile::tempdir().unwrap();
    let text = LQ.replace("q_terminal = [[1.0]]", "");
    let cfg = write_config(tmp.path(), "rest.toml", &text);
    let out = pathmfg(&["diagnose"], &cfg, tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let (dir, report) = report_of(&out);
    assert_eq!(report["holder_constant"].as_f64(), Some(0.0));
    assert!(dir.join("holder_pairs.csv").exists());
    assert!(dir.join("semiconcavity.csv").exists());
}

#[test]
fn anti_monotone_coupling_fails_the_monotonicity_check() {
    let tmp = tempfile::tempdir().unwrap();
    let text = LQ.replace(
        "q_terminal = [[1.0]]",
        "q_terminal = [[1.0]]\ncoupling = { kind = \"mean_field\", strength = -1.0 }",
    );
    let cfg = write_config(tmp.path(), "anti.toml", &text);
    let out = pathmfg(&["check-monotone"], &cfg, tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let (_, report) = report_of(&out);
    assert_eq!(report["running"]["monotone"], Value::Bool(false));
    assert!(report["running"]["min_pairing"].as_f64().unwrap() < 0.0);

    let monotone = write_config(tmp.path(), "lq.toml", LQ);
    assert_eq!(pathmfg(&["check-monotone"], &monotone, tmp.path()).status.code(), Some(0));
}

#[test]
fn configuration_errors_exit_with_two_and_name_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let text = LQ.replace("b = [[1.0]]", "b = [[1.0, 0.0], [2.0, 0.0]]").replace("seed = 1", "sede = 1");
    let cfg = write_config(tmp.path(), "bad.toml", &text);
    let out = pathmfg(&["solve-ocp"], &cfg, tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("dynamics.b"), "{stderr}");
    assert!(stderr.contains("sede"), "{stderr}");

    let missing = pathmfg(&["solve-ocp"], &tmp.path().join("nope.toml"), tmp.path());
    assert_eq!(missing.status.code(), Some(2));
    let unknown = pathmfg(&["solve-everything"], &cfg, tmp.path());
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lq.toml", LQ);
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let out = pathmfg(&["solve-ocp"], &cfg, &blocker.join("runs"));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn reruns_get_fresh_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lq.toml", LQ);
    let runs = tmp.path().join("runs");
    let a = report_of(&pathmfg(&["solve-ocp"], &cfg, &runs)).0;
    let b = report_of(&pathmfg(&["solve-ocp"], &cfg, &runs)).0;
    assert_ne!(a, b);
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    let path = fs::read_to_string(a.join("path.csv")).unwrap();
    assert!(path.starts_with("t,x1,u1\n"));
    // The final node carries no control.
    assert!(path.trim_end().ends_with(','));
}

#[test]
fn seed_flag_changes_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lq.toml", LQ);
    let hash = |seed: &str| {
        let out = pathmfg(&["solve-ocp", "--seed", seed], &cfg, tmp.path());
        report_of(&out).1["config_hash"].as_str().unwrap().to_string()
    };
    assert_ne!(hash("1"), hash("2"));
    assert_eq!(hash("1"), hash("1"));
}

#[test]
fn lipschitz_flag_adds_the_certificate() {
    let tmp = tempfile::tempdir().unwrap();
    let text = LQ.replace("q_terminal = [[1.0]]", "q_terminal = [[1.0]]\nh1 = { c3 = 0.0, c4 = 0.0 }");
    let cfg = write_config(tmp.path(), "lip.toml", &text);
    let out = pathmfg(&["equilibrium", "--lipschitz", "--threads", "2"], &cfg, tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, report) = report_of(&out);
    assert_eq!(report["lipschitz_mode"], Value::Bool(true));
    assert_eq!(report["lipschitz"]["certified"], Value::Bool(true));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            pathmfg_cli::load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 4);
}
