use std::path::PathBuf;

use pnas::cell::{one_block_cells, CellSpec};
use pnas::eval::{
    write_table, EvalError, EvalRequest, Evaluator, ExternalConfig, ExternalEvaluator, SyntheticOracle,
    SyntheticOracleConfig, TabularEvaluator,
};
use pnas::net::StackPlan;

fn request(cells: Vec<CellSpec>, seed: u64) -> EvalRequest {
    EvalRequest {
        cells,
        epochs: 20,
        plan: StackPlan::cifar(2, 24),
        seed,
    }
}

fn worker(mode: &str, extra: &[String]) -> ExternalEvaluator {
    let script = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fake_worker.py");
    let mut command = vec!["python3".to_owned(), script.display().to_string(), mode.to_owned()];
    command.extend_from_slice(extra);
    ExternalEvaluator::new(ExternalConfig::new(command))
}

fn cells(n: usize) -> Vec<CellSpec> {
    one_block_cells().into_iter().take(n).collect()
}

#[test]
fn table_lookup_returns_stored_accuracy() {
    let key = one_block_cells()[0].key();
    let csv = format!("cell_key,seed,accuracy\n\"{key}\",0,0.91\n");
    let table = TabularEvaluator::from_reader(csv.as_bytes()).unwrap();
    let recs = table.evaluate_all(&request(cells(1), 5)).unwrap();
    assert_eq!(recs[0].accuracy, 0.91);
    assert_eq!(recs[0].backend, "tabular");
}

#[test]
fn table_seed_selects_modulo_stored_seeds() {
    let key = one_block_cells()[0].key();
    let csv = format!("cell_key,seed,accuracy\n\"{key}\",9,0.3\n\"{key}\",2,0.2\n\"{key}\",4,0.4\n");
    let table = TabularEvaluator::from_reader(csv.as_bytes()).unwrap();
    // sorted seeds 2, 4, 9
    assert_eq!(table.lookup(&key, 0), Some(0.2));
    assert_eq!(table.lookup(&key, 4), Some(0.4));
    assert_eq!(table.lookup(&key, 5), Some(0.3));
}

#[test]
fn missing_key_fails_the_whole_batch() {
    let key = one_block_cells()[0].key();
    let csv = format!("cell_key,seed,accuracy\n\"{key}\",0,0.91\n");
    let table = TabularEvaluator::from_reader(csv.as_bytes()).unwrap();
    let missing = one_block_cells()[1].key();
    match table.evaluate(&request(cells(2), 0)) {
        Err(EvalError::Lookup(k)) => assert_eq!(k, missing),
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_table_reports_line() {
    let key = one_block_cells()[0].key();
    let csv = format!("cell_key,seed,accuracy\n\"{key}\",0,0.91\n\"{key}\",1,abc\n");
    match TabularEvaluator::from_reader(csv.as_bytes()) {
        Err(EvalError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let csv = format!("cell_key,seed,accuracy\n\"{key}\",0,1.5\n");
    assert!(matches!(TabularEvaluator::from_reader(csv.as_bytes()), Err(EvalError::Parse { line: 2, .. })));
    assert!(matches!(
        TabularEvaluator::from_reader("key,seed,acc\n".as_bytes()),
        Err(EvalError::Parse { line: 1, .. })
    ));
}

#[test]
fn synthetic_dump_round_trips_through_a_table() {
    let oracle = SyntheticOracle::new(SyntheticOracleConfig::with_noise(0.01, 4));
    let req = request(one_block_cells(), 77);
    let recs = oracle.evaluate_all(&req).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table.csv");
    write_table(&recs, std::fs::File::create(&path).unwrap()).unwrap();
    let table = TabularEvaluator::from_path(&path).unwrap();
    assert_eq!(table.len(), 136);
    let again = table.evaluate_all(&req).unwrap();
    for (a, b) in recs.iter().zip(&again) {
        assert_eq!(a.cell_key, b.cell_key);
        assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
    }
}

#[test]
fn echo_worker_returns_half() {
    let recs = worker("echo", &[]).evaluate_all(&request(cells(10), 1)).unwrap();
    assert_eq!(recs.len(), 10);
    assert!(recs.iter().all(|r| r.accuracy == 0.5 && r.backend == "external"));
}

#[test]
fn request_fields_reach_the_worker() {
    let recs = worker("fields", &[]).evaluate_all(&request(cells(3), 42)).unwrap();
    assert!(recs.iter().all(|r| r.accuracy == 0.42));
}

#[test]
fn out_of_order_answers_are_matched_by_id() {
    let req = request(cells(7), 1);
    let recs = worker("reverse", &[]).evaluate_all(&req).unwrap();
    for (i, (r, c)) in recs.iter().zip(&req.cells).enumerate() {
        assert_eq!(r.cell_key, c.key());
        assert_eq!(r.accuracy, (i + 1) as f64 / 100.0);
    }
}

#[test]
fn several_workers_share_a_batch() {
    let mut ev = worker("reverse", &[]);
    ev.config.workers = 3;
    let req = request(cells(10), 1);
    let recs = ev.evaluate_all(&req).unwrap();
    for (r, c) in recs.iter().zip(&req.cells) {
        assert_eq!(r.cell_key, c.key());
    }
}

#[test]
fn bad_accuracy_fails_only_its_record() {
    let out = worker("range", &[]).evaluate(&request(cells(3), 1)).unwrap();
    assert!(matches!(&out[0], Err(EvalError::Range { accuracy, .. }) if *accuracy == 1.3));
    assert!(out[1..].iter().all(|r| r.as_ref().unwrap().accuracy == 0.7));
}

#[test]
fn worker_error_fails_only_its_record() {
    let out = worker("error", &[]).evaluate(&request(cells(3), 1)).unwrap();
    assert!(matches!(&out[1], Err(EvalError::Worker { message, .. }) if message == "out of memory"));
    assert!(out[0].is_ok() && out[2].is_ok());
}

#[test]
fn protocol_violation_names_the_line() {
    match worker("garbage", &[]).evaluate(&request(cells(2), 1)) {
        Err(EvalError::Protocol { line, .. }) => assert_eq!(line, "this is not json"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        worker("unknown-id", &[]).evaluate(&request(cells(2), 1)),
        Err(EvalError::Protocol { .. })
    ));
}

#[test]
fn crashed_worker_is_retried_for_outstanding_ids() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("crashed").display().to_string();
    let recs = worker("crash-once", &[state]).evaluate_all(&request(cells(4), 1)).unwrap();
    assert_eq!(recs[0].accuracy, 0.25);
    assert!(recs[1..].iter().all(|r| r.accuracy == 0.75));
}

#[test]
fn persistent_crash_is_a_transport_error() {
    let mut ev = worker("crash", &[]);
    ev.config.retries = 1;
    assert!(matches!(ev.evaluate(&request(cells(2), 1)), Err(EvalError::Transport(_))));
    let missing = ExternalEvaluator::new(ExternalConfig::new(vec!["/nonexistent/worker".into()]));
    assert!(matches!(missing.evaluate(&request(cells(1), 1)), Err(EvalError::Transport(_))));
}
