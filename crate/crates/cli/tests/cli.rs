use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pnas")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn worker_script() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/fake_worker.py")
}

/// A fast three-level search into `dir`.
fn small_search(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "search",
        "--out",
        dir.to_str().unwrap(),
        "-B",
        "3",
        "-K",
        "4",
        "--predictor",
        "mlp",
        "--embed-dim",
        "8",
        "--hidden",
        "8",
    ];
    args.extend_from_slice(extra);
    pnas(&args)
}

#[test]
fn count_prints_exact_sizes() {
    let o = pnas(&["count", "-B", "5"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().any(|l| l == "raw 556627761561600"));
    let o = pnas(&["count", "-B", "1"]);
    assert!(stdout(&o).lines().any(|l| l == "unique 136"));
    assert_eq!(pnas(&["count", "-B", "11"]).status.code(), Some(1));
}

#[test]
fn build_writes_a_graph_document() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g.json");
    let o = pnas(&["build", "--cell", "1|0,4,0,4", "-N", "1", "-F", "8", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["cell"], "1|0,4,0,4");
    assert!(doc["nodes"].as_array().unwrap().len() > 3);
    assert!(stdout(&o).contains("params "));
}

#[test]
fn malformed_cell_key_names_the_segment() {
    let o = pnas(&["build", "--cell", "2|0,4,0,4;0,9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("0,9"), "{}", stderr(&o));
}

#[test]
fn random_search_with_one_sample_evaluates_once() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pnas(&["search", "--strategy", "random", "--count", "1", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = fs::read_to_string(tmp.path().join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().filter(|l| l.contains("\"event\":\"eval\"")).count(), 1);
    assert!(stdout(&o).lines().any(|l| l.starts_with("best 5|")));
}

#[test]
fn reruns_and_replays_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert!(small_search(&a, &[]).status.success());
    assert!(small_search(&b, &[]).status.success());
    let o = pnas(&["replay", a.to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ta = fs::read(a.join("trace.jsonl")).unwrap();
    assert!(!ta.is_empty());
    assert_eq!(ta, fs::read(b.join("trace.jsonl")).unwrap());
    assert_eq!(ta, fs::read(c.join("trace.jsonl")).unwrap());
    for f in ["summary.csv", "levels.csv", "records.csv", "graphs/level-3.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(c.join(f)).unwrap(), "{f}");
    }
    assert!(!a.join(".lock").exists());
}

#[test]
fn manifest_records_the_resolved_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("run.conf");
    fs::write(&conf, "# small run\nbeam = 3\nseed = 9\nepochs=5\n").unwrap();
    let dir = tmp.path().join("run");
    let o = small_search(&dir, &["--config", conf.to_str().unwrap(), "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "ok");
    // flag > file > default; the -K flag from small_search beats beam=3
    assert_eq!(m["config"]["beam"], "4");
    assert_eq!(m["config"]["seed"], "4");
    assert_eq!(m["config"]["epochs"], "5");
    assert_eq!(m["config"]["filters"], "24");
    assert_eq!(m["seeds"]["master"], 4);
    assert!(m["finished_at"].is_string());
    let levels = fs::read_to_string(dir.join("levels.csv")).unwrap();
    assert_eq!(levels.lines().count(), 4);

    fs::write(&conf, "bogus = 1\n").unwrap();
    let o = small_search(&tmp.path().join("x"), &["--config", conf.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn table_dumped_from_a_run_reproduces_its_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(small_search(&a, &[]).status.success());
    let table = a.join("records.csv");
    let o = small_search(&b, &["--evaluator", "tabular", "--table", table.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(a.join("trace.jsonl")).unwrap(), fs::read(b.join("trace.jsonl")).unwrap());
}

#[test]
fn harness_reports_one_row_per_predictor() {
    let tmp = tempfile::tempdir().unwrap();
    let base = [
        "harness", "-T", "2", "-K", "8", "-R", "16", "-B", "3", "--embed-dim", "8", "--hidden", "8",
    ];
    let dir = tmp.path().join("h");
    let mut args = base.to_vec();
    args.extend(["--out", dir.to_str().unwrap()]);
    let o = pnas(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.join("correlation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "predictor,rho_hat_1,rho_tilde_2,rho_hat_2,rho_tilde_3");
    assert_eq!(lines.len(), 5);
    assert_eq!(stdout(&o), csv);

    let dir = tmp.path().join("p");
    let mut args = base.to_vec();
    args.extend(["--perfect", "--out", dir.to_str().unwrap()]);
    let o = pnas(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().nth(1), Some("perfect,1,1,1,1"));
}

#[test]
fn exit_codes_separate_config_and_evaluator_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let out = out.to_str().unwrap();
    assert_eq!(pnas(&["search", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(pnas(&["search", "--out", out, "--strategy", "greedy"]).status.code(), Some(1));
    assert_eq!(pnas(&["search", "--out", out, "-K", "0"]).status.code(), Some(1));
    assert_eq!(pnas(&["search", "-B", "2"]).status.code(), Some(1)); // no --out
    assert_eq!(pnas(&["--help"]).status.code(), Some(0));

    // a table that lacks most cells
    let table = tmp.path().join("t.csv");
    fs::write(&table, "cell_key,seed,accuracy\n\"1|0,0,0,0\",1,0.5\n").unwrap();
    let dir = tmp.path().join("tab");
    let o = small_search(&dir, &["--evaluator", &format!("tabular:{}", table.display())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "failed");
    assert!(dir.join("trace.jsonl").exists());
}

#[test]
fn external_worker_runs_and_crashes_map_to_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let script = worker_script();
    let echo = format!("python3 {} echo", script.display());
    let dir = tmp.path().join("ok");
    let o = small_search(&dir, &["--evaluator", "external", "--worker", &echo, "--workers", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = fs::read_to_string(dir.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().filter(|l| l.contains("\"event\":\"eval\"")).count(), 136 + 2 * 4);

    let crash = format!("python3 {} crash", script.display());
    let o = small_search(&tmp.path().join("bad"), &["--evaluator", "external", "--worker", &crash, "--retries", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn a_locked_run_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join(".lock"), "1\n").unwrap();
    let o = small_search(tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("in use"));
    assert!(!tmp.path().join("trace.jsonl").exists());
}
