//! Progressive search, the random baseline and the predictor harness.
//!
//! [`pnas_search`] starts from every one-block cell, then alternates between
//! expanding the beam by one block, ranking the children with a
//! [`Predictor`], evaluating the top `K`, and refitting the predictor from
//! scratch on everything measured so far.
use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{expand_cell, one_block_cells, raw_children, sample_cell, CellError, CellSpec, MAX_BLOCKS};
use crate::eval::{EvalError, EvalRecord, EvalRequest, Evaluator};
use crate::net::{NetError, StackPlan};
use crate::seed;
use crate::surrogate::{Predictor, SurrogateError};

mod harness;
mod stats;

pub use harness::{predictor_harness, CorrelationReport, HarnessConfig, PredictorChoice, PredictorCorrelation};
pub use stats::{
    aggregate_curves, average_ranks, compute_cost, pearson, spearman, top_m_curve, CurvePoint, StatError, TopMPoint,
};

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Predictor(#[from] SurrogateError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Stat(#[from] StatError),
    #[error("trace output failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Which predictions go to the trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionLog {
    /// Only the cells that make the beam.
    Selected,
    /// Every deduplicated candidate (large: ~300k events per level at K=256).
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub max_blocks: usize,
    pub epochs: u32,
    pub filters: usize,
    pub beam: usize,
    pub repeats: usize,
    pub seed: u64,
    /// SGD examples per proxy-trained model, for cost accounting.
    pub examples_per_model: u64,
    pub prediction_log: PredictionLog,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_blocks: 5,
            epochs: 20,
            filters: 24,
            beam: 256,
            repeats: 2,
            seed: 0,
            examples_per_model: 900_000,
            prediction_log: PredictionLog::Selected,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.beam == 0 {
            return Err(SearchError::Config("beam size K must be at least 1".into()));
        }
        if self.max_blocks == 0 || self.max_blocks > MAX_BLOCKS {
            return Err(SearchError::Config(format!("B must be in 1..={MAX_BLOCKS}, got {}", self.max_blocks)));
        }
        if self.epochs == 0 {
            return Err(SearchError::Config("E must be positive".into()));
        }
        self.plan().validate()?;
        Ok(())
    }

    pub fn plan(&self) -> StackPlan {
        StackPlan::cifar(self.repeats, self.filters)
    }

    /// Seed of every evaluation request in the run.
    pub fn eval_seed(&self) -> u64 {
        seed::derive(self.seed, "eval", 0)
    }
}

/// One line of the trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub event: String,
    pub level: usize,
    pub cell_key: Option<String>,
    pub value: Option<f64>,
    pub seed: u64,
}

impl TraceEvent {
    fn new(event: &str, level: usize, cell_key: Option<String>, value: Option<f64>, seed: u64) -> TraceEvent {
        TraceEvent {
            event: event.to_owned(),
            level,
            cell_key,
            value,
            seed,
        }
    }
}

/// Receives trace events in order; `flush` marks a level barrier.
pub trait TraceSink {
    fn emit(&mut self, event: &TraceEvent) -> std::io::Result<()>;
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl TraceSink for Vec<TraceEvent> {
    fn emit(&mut self, event: &TraceEvent) -> std::io::Result<()> {
        self.push(event.clone());
        Ok(())
    }
}

/// Discards events.
pub struct NullSink;

impl TraceSink for NullSink {
    fn emit(&mut self, _event: &TraceEvent) -> std::io::Result<()> {
        Ok(())
    }
}

/// JSON-lines writer.
pub struct JsonlSink<W: Write> {
    out: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        JsonlSink { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> TraceSink for JsonlSink<W> {
    fn emit(&mut self, event: &TraceEvent) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, event)?;
        self.out.write_all(b"\n")
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub cell_key: String,
    /// `None` for the exhaustively evaluated first level.
    pub predicted: Option<f64>,
    pub measured: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    pub level: usize,
    /// Parents times every raw block tuple, before symmetry is removed.
    pub raw_candidates: u64,
    /// Distinct canonical candidates that were scored by the predictor.
    pub unique_candidates: u64,
    /// The evaluated set `S_b`, sorted by cell key.
    pub selected: Vec<Candidate>,
    /// Number of predictor fits performed before this level was ranked.
    pub predictor_fits: usize,
    pub best: Candidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub levels: Vec<LevelResult>,
    /// Every evaluation, in evaluation order.
    pub records: Vec<EvalRecord>,
    pub m1: u64,
    pub e1: u64,
    pub m2: u64,
    pub e2: u64,
    /// Best measured cell of the last level.
    pub best: Option<Candidate>,
}

impl SearchTrace {
    pub fn cost(&self) -> num_bigint::BigUint {
        compute_cost(self.m1, self.e1, self.m2, self.e2)
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.accuracy).collect()
    }
}

fn best_of(cands: &[Candidate]) -> Candidate {
    // highest accuracy; on ties the smaller key
    cands
        .iter()
        .min_by(|a, b| b.measured.total_cmp(&a.measured).then_with(|| a.cell_key.cmp(&b.cell_key)))
        .expect("nonempty level")
        .clone()
}

fn evaluate_sorted(
    evaluator: &dyn Evaluator,
    cfg: &SearchConfig,
    cells: Vec<CellSpec>,
) -> Result<Vec<EvalRecord>, SearchError> {
    let req = EvalRequest {
        cells,
        epochs: cfg.epochs,
        plan: cfg.plan(),
        seed: cfg.eval_seed(),
    };
    let mut records = evaluator.evaluate_all(&req)?;
    records.sort_by(|a, b| a.cell_key.cmp(&b.cell_key));
    Ok(records)
}

/// Indices of the `k` highest predictions; ties go to the smaller key.
pub fn top_k(keys: &[String], predictions: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| {
        predictions[b]
            .total_cmp(&predictions[a])
            .then_with(|| keys[a].cmp(&keys[b]))
    });
    idx.truncate(k);
    idx
}

/// Progressive search. Every level is flushed to `sink` before the next
/// evaluation starts, so a failing evaluator leaves the trace of all
/// completed steps behind.
pub fn pnas_search(
    cfg: &SearchConfig,
    evaluator: &dyn Evaluator,
    predictor: &mut dyn Predictor,
    sink: &mut dyn TraceSink,
) -> Result<SearchTrace, SearchError> {
    cfg.validate()?;
    let eval_seed = cfg.eval_seed();
    let mut levels: Vec<LevelResult> = Vec::new();
    let mut all_records: Vec<EvalRecord> = Vec::new();
    let mut data: Vec<(CellSpec, f64)> = Vec::new();
    let mut fits = 0;

    let s1 = one_block_cells();
    let by_key: BTreeMap<String, CellSpec> = s1.iter().map(|c| (c.key(), c.clone())).collect();
    let records = evaluate_sorted(evaluator, cfg, by_key.values().cloned().collect())?;
    let mut selected = Vec::with_capacity(records.len());
    for r in &records {
        sink.emit(&TraceEvent::new("eval", 1, Some(r.cell_key.clone()), Some(r.accuracy), eval_seed))?;
        data.push((by_key[&r.cell_key].clone(), r.accuracy));
        selected.push(Candidate {
            cell_key: r.cell_key.clone(),
            predicted: None,
            measured: r.accuracy,
        });
    }
    all_records.extend(records);
    predictor.fit(&data, 1)?;
    fits += 1;
    sink.emit(&TraceEvent::new("fit", 1, None, Some(data.len() as f64), cfg.seed))?;
    sink.flush()?;
    levels.push(LevelResult {
        level: 1,
        raw_candidates: raw_children(1)? as u64,
        unique_candidates: s1.len() as u64,
        best: best_of(&selected),
        selected,
        predictor_fits: 0,
    });
    let mut beam: Vec<CellSpec> = by_key.into_values().collect();

    for b in 2..=cfg.max_blocks {
        let raw = (beam.len() * raw_children(b)?) as u64;
        let mut children: BTreeMap<String, CellSpec> = BTreeMap::new();
        for parent in &beam {
            for child in expand_cell(parent, cfg.max_blocks)? {
                children.insert(child.key(), child);
            }
        }
        let unique = children.len() as u64;
        let (keys, cells): (Vec<String>, Vec<CellSpec>) = children.into_iter().unzip();
        let predictions = predictor.predict(&cells)?;
        let chosen = {
            let mut c = top_k(&keys, &predictions, cfg.beam);
            c.sort_unstable(); // key order
            c
        };
        if cfg.prediction_log == PredictionLog::All {
            for (k, p) in keys.iter().zip(&predictions) {
                sink.emit(&TraceEvent::new("predict", b, Some(k.clone()), Some(*p), cfg.seed))?;
            }
        } else {
            for &i in &chosen {
                sink.emit(&TraceEvent::new("predict", b, Some(keys[i].clone()), Some(predictions[i]), cfg.seed))?;
            }
        }
        for &i in &chosen {
            sink.emit(&TraceEvent::new("select", b, Some(keys[i].clone()), Some(predictions[i]), cfg.seed))?;
        }
        sink.flush()?;

        let chosen_cells: Vec<CellSpec> = chosen.iter().map(|&i| cells[i].clone()).collect();
        let predicted: BTreeMap<&str, f64> = chosen.iter().map(|&i| (keys[i].as_str(), predictions[i])).collect();
        let records = evaluate_sorted(evaluator, cfg, chosen_cells.clone())?;
        let mut selected = Vec::with_capacity(records.len());
        for (r, cell) in records.iter().zip(&chosen_cells) {
            debug_assert_eq!(r.cell_key, cell.key());
            sink.emit(&TraceEvent::new("eval", b, Some(r.cell_key.clone()), Some(r.accuracy), eval_seed))?;
            data.push((cell.clone(), r.accuracy));
            selected.push(Candidate {
                cell_key: r.cell_key.clone(),
                predicted: Some(predicted[r.cell_key.as_str()]),
                measured: r.accuracy,
            });
        }
        all_records.extend(records);
        predictor.fit(&data, b)?;
        sink.emit(&TraceEvent::new("fit", b, None, Some(data.len() as f64), cfg.seed))?;
        sink.flush()?;
        levels.push(LevelResult {
            level: b,
            raw_candidates: raw,
            unique_candidates: unique,
            best: best_of(&selected),
            selected,
            predictor_fits: fits,
        });
        fits += 1;
        beam = chosen_cells;
    }

    let best = levels.last().map(|l| l.best.clone());
    Ok(SearchTrace {
        levels,
        m1: all_records.len() as u64,
        records: all_records,
        e1: cfg.examples_per_model,
        m2: 0,
        e2: 0,
        best,
    })
}

/// Uniform random search over cells of exactly `cfg.max_blocks` blocks.
/// Evaluation order is sampling order.
pub fn random_search(
    count: usize,
    cfg: &SearchConfig,
    evaluator: &dyn Evaluator,
    sink: &mut dyn TraceSink,
) -> Result<SearchTrace, SearchError> {
    cfg.validate()?;
    if count == 0 {
        return Err(SearchError::Config("random search needs at least one sample".into()));
    }
    let b = cfg.max_blocks;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "random-search", 0));
    let cells: Vec<CellSpec> = (0..count)
        .map(|_| sample_cell(b, &mut rng))
        .collect::<Result<_, _>>()?;
    let eval_seed = cfg.eval_seed();
    let req = EvalRequest {
        cells,
        epochs: cfg.epochs,
        plan: cfg.plan(),
        seed: eval_seed,
    };
    let records = evaluator.evaluate_all(&req)?;
    let mut selected = Vec::with_capacity(records.len());
    for r in &records {
        sink.emit(&TraceEvent::new("eval", b, Some(r.cell_key.clone()), Some(r.accuracy), eval_seed))?;
        selected.push(Candidate {
            cell_key: r.cell_key.clone(),
            predicted: None,
            measured: r.accuracy,
        });
    }
    sink.flush()?;
    let level = LevelResult {
        level: b,
        raw_candidates: count as u64,
        unique_candidates: count as u64,
        best: best_of(&selected),
        selected,
        predictor_fits: 0,
    };
    Ok(SearchTrace {
        best: Some(level.best.clone()),
        levels: vec![level],
        m1: records.len() as u64,
        records,
        e1: cfg.examples_per_model,
        m2: 0,
        e2: 0,
    })
}

#[cfg(test)]
mod tests;
