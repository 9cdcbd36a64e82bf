//! Worker-process backend.
//!
//! The client writes one JSON request per line to the worker's stdin,
//!
//! ```text
//! {"id": 0, "cell": "<cell_key>", "epochs": 20, "n": 2, "f": 24, "seed": 7}
//! ```
//!
//! then `{"done": true}`, and reads one response per line from its stdout,
//! in any order: `{"id": 0, "accuracy": 0.91}` or `{"id": 0, "error": "..."}`.
//! A worker that dies before answering everything is restarted for the
//! outstanding ids up to `retries` times.
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::time::Instant;

use serde_json::{json, Value};

use super::{check_range, EvalError, EvalRecord, EvalRequest, Evaluator, RecordResult};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalConfig {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    /// Worker processes per batch; requests are dealt round-robin.
    pub workers: usize,
    /// Restarts allowed after a transport failure.
    pub retries: usize,
}

impl ExternalConfig {
    pub fn new(command: Vec<String>) -> ExternalConfig {
        ExternalConfig {
            command,
            workers: 1,
            retries: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExternalEvaluator {
    pub config: ExternalConfig,
}

struct Attempt {
    answers: HashMap<u64, RecordResult>,
    failure: Option<String>,
}

impl ExternalEvaluator {
    pub fn new(config: ExternalConfig) -> ExternalEvaluator {
        ExternalEvaluator { config }
    }

    fn run_worker(&self, req: &EvalRequest, ids: &[u64], keys: &[String]) -> Result<Attempt, EvalError> {
        let (program, args) = self
            .config
            .command
            .split_first()
            .ok_or_else(|| EvalError::Request("empty worker command".into()))?;
        let start = Instant::now();
        let mut child = match Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
        {
            Ok(c) => c,
            Err(e) => {
                return Ok(Attempt {
                    answers: HashMap::new(),
                    failure: Some(format!("cannot start {program}: {e}")),
                })
            }
        };
        let mut stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let lines: Vec<String> = ids
            .iter()
            .map(|&id| {
                json!({
                    "id": id,
                    "cell": keys[id as usize],
                    "epochs": req.epochs,
                    "n": req.plan.repeats,
                    "f": req.plan.filters,
                    "seed": req.seed,
                })
                .to_string()
            })
            .collect();

        let mut answers = HashMap::new();
        let outcome = std::thread::scope(|scope| {
            // a worker that stops reading must not block the reader below
            scope.spawn(move || {
                for line in &lines {
                    if writeln!(stdin, "{line}").is_err() {
                        return;
                    }
                }
                let _ = writeln!(stdin, "{}", json!({"done": true}));
            });
            for line in BufReader::new(stdout).lines() {
                let line = match line {
                    Ok(l) => l,
                    Err(e) => return Ok(Some(format!("reading worker output: {e}"))),
                };
                if line.trim().is_empty() {
                    continue;
                }
                let (id, result) = parse_response(&line, ids, &answers, keys, req)?;
                answers.insert(id, result);
            }
            Ok(None)
        });
        let read_failure = match outcome {
            Ok(f) => f,
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(e);
            }
        };
        let status = child.wait().map_err(|e| EvalError::Transport(e.to_string()))?;
        let elapsed = start.elapsed().as_secs_f64() / ids.len().max(1) as f64;
        for r in answers.values_mut().flatten() {
            r.wall_time = elapsed;
        }
        let failure = read_failure.or_else(|| {
            if !status.success() {
                Some(format!("worker exited with {status}"))
            } else if answers.len() < ids.len() {
                Some(format!("worker answered {} of {} requests", answers.len(), ids.len()))
            } else {
                None
            }
        });
        Ok(Attempt { answers, failure })
    }

    fn run_shard(&self, req: &EvalRequest, ids: Vec<u64>, keys: &[String]) -> Result<HashMap<u64, RecordResult>, EvalError> {
        let mut done = HashMap::new();
        let mut pending = ids;
        let mut last_failure = String::new();
        for _ in 0..=self.config.retries {
            let attempt = self.run_worker(req, &pending, keys)?;
            pending.retain(|id| !attempt.answers.contains_key(id));
            done.extend(attempt.answers);
            match attempt.failure {
                None if pending.is_empty() => return Ok(done),
                None => last_failure = format!("{} requests unanswered", pending.len()),
                Some(f) => last_failure = f,
            }
            if pending.is_empty() {
                return Ok(done);
            }
        }
        Err(EvalError::Transport(format!(
            "{last_failure} (after {} attempts)",
            self.config.retries + 1
        )))
    }
}

fn parse_response(
    line: &str,
    ids: &[u64],
    answered: &HashMap<u64, RecordResult>,
    keys: &[String],
    req: &EvalRequest,
) -> Result<(u64, RecordResult), EvalError> {
    let violation = |message: &str| EvalError::Protocol {
        line: line.to_owned(),
        message: message.to_owned(),
    };
    let value: Value = serde_json::from_str(line).map_err(|_| violation("not JSON"))?;
    let id = value.get("id").and_then(Value::as_u64).ok_or_else(|| violation("missing integer id"))?;
    if !ids.contains(&id) {
        return Err(violation("unknown id"));
    }
    if answered.contains_key(&id) {
        return Err(violation("duplicate id"));
    }
    let key = &keys[id as usize];
    let result = match (value.get("accuracy"), value.get("error")) {
        (Some(acc), None) => {
            let accuracy = acc.as_f64().ok_or_else(|| violation("accuracy is not a number"))?;
            check_range(key, accuracy).map(|()| EvalRecord {
                cell_key: key.clone(),
                accuracy,
                seed: req.seed,
                epochs: req.epochs,
                backend: "external".into(),
                wall_time: 0.0,
            })
        }
        (None, Some(err)) => Err(EvalError::Worker {
            cell_key: key.clone(),
            message: err.as_str().map_or_else(|| err.to_string(), str::to_owned),
        }),
        _ => return Err(violation("expected exactly one of accuracy or error")),
    };
    Ok((id, result))
}

impl Evaluator for ExternalEvaluator {
    fn backend(&self) -> &str {
        "external"
    }

    fn evaluate(&self, req: &EvalRequest) -> Result<Vec<RecordResult>, EvalError> {
        req.validate()?;
        let keys: Vec<String> = req.cells.iter().map(|c| c.key()).collect();
        let workers = self.config.workers.clamp(1, keys.len().max(1));
        let shards: Vec<Vec<u64>> = (0..workers)
            .map(|w| (w..keys.len()).step_by(workers).map(|i| i as u64).collect())
            .collect();
        let results: Vec<Result<HashMap<u64, RecordResult>, EvalError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = shards
                .into_iter()
                .filter(|s| !s.is_empty())
                .map(|shard| scope.spawn(|| self.run_shard(req, shard, &keys)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("shard thread")).collect()
        });
        let mut all = HashMap::new();
        for r in results {
            all.extend(r?);
        }
        Ok((0..keys.len() as u64)
            .map(|id| all.remove(&id).expect("every id answered"))
            .collect())
    }
}
