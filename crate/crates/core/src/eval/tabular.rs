use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{check_range, EvalError, EvalRecord, EvalRequest, Evaluator, RecordResult};

/// Precomputed accuracies keyed by cell. A request with seed `s` reads the
/// `(s mod n)`-th of the `n` stored seeds of a cell, in ascending seed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TabularEvaluator {
    entries: HashMap<String, Vec<(u64, f64)>>,
}

impl TabularEvaluator {
    pub fn from_path(path: &Path) -> Result<TabularEvaluator, EvalError> {
        let file = std::fs::File::open(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<TabularEvaluator, EvalError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers().map_err(|e| EvalError::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        if header.iter().collect::<Vec<_>>() != ["cell_key", "seed", "accuracy"] {
            return Err(EvalError::Parse {
                line: 1,
                message: format!("expected header cell_key,seed,accuracy, got {}", header.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut entries: HashMap<String, Vec<(u64, f64)>> = HashMap::new();
        for row in rdr.records() {
            let row = row.map_err(|e| EvalError::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = row.position().map_or(0, |p| p.line());
            let bad = |message: String| EvalError::Parse { line, message };
            let key = row.get(0).unwrap_or_default().to_owned();
            let seed: u64 = row
                .get(1)
                .unwrap_or_default()
                .trim()
                .parse()
                .map_err(|e| bad(format!("seed: {e}")))?;
            let accuracy: f64 = row
                .get(2)
                .unwrap_or_default()
                .trim()
                .parse()
                .map_err(|e| bad(format!("accuracy: {e}")))?;
            if !(0.0..=1.0).contains(&accuracy) {
                return Err(bad(format!("accuracy {accuracy} is outside [0, 1]")));
            }
            let seeds = entries.entry(key).or_default();
            if seeds.iter().any(|(s, _)| *s == seed) {
                return Err(bad(format!("duplicate seed {seed} for {}", row.get(0).unwrap_or_default())));
            }
            seeds.push((seed, accuracy));
        }
        for seeds in entries.values_mut() {
            seeds.sort_by_key(|(s, _)| *s);
        }
        Ok(TabularEvaluator { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, cell_key: &str, seed: u64) -> Option<f64> {
        let seeds = self.entries.get(cell_key)?;
        Some(seeds[(seed % seeds.len() as u64) as usize].1)
    }
}

impl Evaluator for TabularEvaluator {
    fn backend(&self) -> &str {
        "tabular"
    }

    /// All-or-nothing: a missing key fails the whole batch.
    fn evaluate(&self, req: &EvalRequest) -> Result<Vec<RecordResult>, EvalError> {
        req.validate()?;
        req.cells
            .iter()
            .map(|cell| {
                let key = cell.key();
                let accuracy = self.lookup(&key, req.seed).ok_or_else(|| EvalError::Lookup(key.clone()))?;
                check_range(&key, accuracy)?;
                Ok(Ok(EvalRecord {
                    cell_key: key,
                    accuracy,
                    seed: req.seed,
                    epochs: req.epochs,
                    backend: "tabular".into(),
                    wall_time: 0.0,
                }))
            })
            .collect()
    }
}

/// Writes records as a table readable by [`TabularEvaluator`]. Accuracies
/// use the shortest round-trip decimal form, so reloading is exact.
pub fn write_table<W: Write>(records: &[EvalRecord], writer: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| EvalError::Io(e.to_string());
    w.write_record(["cell_key", "seed", "accuracy"]).map_err(io)?;
    for r in records {
        w.write_record([r.cell_key.clone(), r.seed.to_string(), r.accuracy.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| EvalError::Io(e.to_string()))
}
