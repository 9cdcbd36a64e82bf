//! Rank-quality harness for predictors.
//!
//! For each level `b < B` and trial `t`: draw `K` cells from the level-`b`
//! pool, fit a fresh predictor on them, and record the Spearman correlation
//! of its predictions with the measured accuracies on that same sample (ρ̂_b)
//! and on the whole level-`b+1` pool (ρ̃_{b+1}). The level-1 pool is the 136
//! one-block cells; deeper pools hold `R` distinct random cells.
use std::collections::{BTreeSet, HashMap};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{spearman, SearchError};
use crate::cell::{one_block_cells, sample_cell, CellSpec, MAX_BLOCKS};
use crate::eval::{EvalRequest, Evaluator};
use crate::net::StackPlan;
use crate::seed;
use crate::surrogate::{Predictor, PredictorConfig, PredictorKind, Surrogate, SurrogateError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PredictorChoice {
    Mlp,
    Rnn,
    MlpEnsemble,
    RnnEnsemble,
    /// Returns the measured accuracy itself.
    Perfect,
}

impl PredictorChoice {
    pub fn name(self) -> &'static str {
        match self {
            PredictorChoice::Mlp => "mlp",
            PredictorChoice::Rnn => "rnn",
            PredictorChoice::MlpEnsemble => "mlp-ens",
            PredictorChoice::RnnEnsemble => "rnn-ens",
            PredictorChoice::Perfect => "perfect",
        }
    }

    /// A learned predictor built from `template` with this kind and `seed`;
    /// `None` for [`PredictorChoice::Perfect`].
    pub fn build(self, template: &PredictorConfig, seed: u64) -> Option<Surrogate> {
        let cfg = |kind| PredictorConfig {
            kind,
            seed,
            ..template.clone()
        };
        match self {
            PredictorChoice::Mlp => Some(Surrogate::single(cfg(PredictorKind::Mlp))),
            PredictorChoice::Rnn => Some(Surrogate::single(cfg(PredictorKind::Rnn))),
            PredictorChoice::MlpEnsemble => Some(Surrogate::ensemble(cfg(PredictorKind::Mlp))),
            PredictorChoice::RnnEnsemble => Some(Surrogate::ensemble(cfg(PredictorKind::Rnn))),
            PredictorChoice::Perfect => None,
        }
    }
}

impl FromStr for PredictorChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "mlp" => Ok(PredictorChoice::Mlp),
            "rnn" => Ok(PredictorChoice::Rnn),
            "mlp-ens" => Ok(PredictorChoice::MlpEnsemble),
            "rnn-ens" => Ok(PredictorChoice::RnnEnsemble),
            "perfect" => Ok(PredictorChoice::Perfect),
            other => Err(format!("unknown predictor {other:?} (expected mlp, rnn, mlp-ens, rnn-ens or perfect)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub trials: usize,
    /// Training sample size per trial (capped at 136 on level 1).
    pub sample_size: usize,
    /// Pool size per level for `b >= 2`.
    pub pool_size: usize,
    pub max_blocks: usize,
    pub predictors: Vec<PredictorChoice>,
    pub predictor_template: PredictorConfig,
    pub epochs: u32,
    pub plan: StackPlan,
    pub seed: u64,
}

impl HarnessConfig {
    /// Desk-scale defaults: T=5, K=64, R=1000, B=5.
    pub fn desk(seed: u64) -> HarnessConfig {
        HarnessConfig {
            trials: 5,
            sample_size: 64,
            pool_size: 1000,
            max_blocks: 5,
            predictors: vec![
                PredictorChoice::Mlp,
                PredictorChoice::Rnn,
                PredictorChoice::MlpEnsemble,
                PredictorChoice::RnnEnsemble,
            ],
            predictor_template: PredictorConfig::mlp(seed),
            epochs: 20,
            plan: StackPlan::cifar(2, 24),
            seed,
        }
    }

    /// The published scale: T=20, K=256, R=10000.
    pub fn full(seed: u64) -> HarnessConfig {
        HarnessConfig {
            trials: 20,
            sample_size: 256,
            pool_size: 10_000,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.sample_size > self.pool_size {
            return Err(SearchError::Config(format!(
                "sample size K={} exceeds pool size R={}",
                self.sample_size, self.pool_size
            )));
        }
        if self.trials == 0 || self.sample_size < 2 {
            return Err(SearchError::Config("need at least one trial and K >= 2".into()));
        }
        if self.max_blocks < 2 || self.max_blocks > MAX_BLOCKS {
            return Err(SearchError::Config(format!("B must be in 2..={MAX_BLOCKS}")));
        }
        if self.predictors.is_empty() {
            return Err(SearchError::Config("no predictors to compare".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorCorrelation {
    pub predictor: String,
    /// Mean over trials of ρ̂_b, for b = 1..B-1.
    pub rho_hat: Vec<f64>,
    /// Mean over trials of ρ̃_{b+1}, for b = 1..B-1.
    pub rho_tilde: Vec<f64>,
    /// `[b-1][t] = (ρ̂, ρ̃)`.
    pub per_trial: Vec<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub max_blocks: usize,
    pub rows: Vec<PredictorCorrelation>,
}

impl CorrelationReport {
    /// CSV with one row per predictor: `predictor,rho_hat_1,rho_tilde_2,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("predictor");
        for b in 1..self.max_blocks {
            out.push_str(&format!(",rho_hat_{b},rho_tilde_{}", b + 1));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.predictor);
            for (h, t) in row.rho_hat.iter().zip(&row.rho_tilde) {
                out.push_str(&format!(",{h},{t}"));
            }
            out.push('\n');
        }
        out
    }
}

struct Pool {
    cells: Vec<CellSpec>,
    accuracies: Vec<f64>,
}

struct Lookup(HashMap<String, f64>);

impl Predictor for Lookup {
    fn fit(&mut self, _data: &[(CellSpec, f64)], _level: usize) -> Result<(), SurrogateError> {
        Ok(())
    }

    fn predict(&self, cells: &[CellSpec]) -> Result<Vec<f64>, SurrogateError> {
        cells
            .iter()
            .map(|c| {
                self.0
                    .get(&c.key())
                    .copied()
                    .ok_or_else(|| SurrogateError::Validation(format!("cell {} was never measured", c.key())))
            })
            .collect()
    }
}

fn build_pools(cfg: &HarnessConfig, evaluator: &dyn Evaluator) -> Result<Vec<Pool>, SearchError> {
    let eval_seed = seed::derive(cfg.seed, "eval", 0);
    let mut pools = Vec::with_capacity(cfg.max_blocks);
    for b in 1..=cfg.max_blocks {
        let cells = if b == 1 {
            one_block_cells()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "harness-pool", b as u64));
            let mut seen = BTreeSet::new();
            let mut cells = Vec::with_capacity(cfg.pool_size);
            while cells.len() < cfg.pool_size {
                let c = sample_cell(b, &mut rng)?;
                if seen.insert(c.key()) {
                    cells.push(c);
                }
            }
            cells
        };
        let req = EvalRequest {
            cells,
            epochs: cfg.epochs,
            plan: cfg.plan.clone(),
            seed: eval_seed,
        };
        let accuracies = evaluator.evaluate_all(&req)?.into_iter().map(|r| r.accuracy).collect();
        pools.push(Pool {
            cells: req.cells,
            accuracies,
        });
    }
    Ok(pools)
}

pub fn predictor_harness(cfg: &HarnessConfig, evaluator: &dyn Evaluator) -> Result<CorrelationReport, SearchError> {
    cfg.validate()?;
    let pools = build_pools(cfg, evaluator)?;
    let measured: HashMap<String, f64> = pools
        .iter()
        .flat_map(|p| p.cells.iter().map(|c| c.key()).zip(p.accuracies.iter().copied()))
        .collect();

    let mut rows = Vec::with_capacity(cfg.predictors.len());
    for (pi, &choice) in cfg.predictors.iter().enumerate() {
        let mut per_trial = Vec::with_capacity(cfg.max_blocks - 1);
        for b in 1..cfg.max_blocks {
            let pool = &pools[b - 1];
            let next = &pools[b];
            let k = cfg.sample_size.min(pool.cells.len());
            let mut trials = Vec::with_capacity(cfg.trials);
            for t in 0..cfg.trials {
                // same sample for every predictor
                let draw = (b * cfg.trials + t) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "harness-sample", draw));
                let mut idx = sample(&mut rng, pool.cells.len(), k).into_vec();
                idx.sort_unstable();
                let train: Vec<(CellSpec, f64)> =
                    idx.iter().map(|&i| (pool.cells[i].clone(), pool.accuracies[i])).collect();
                let mut predictor: Box<dyn Predictor> = match choice.build(
                    &cfg.predictor_template,
                    seed::derive(cfg.seed, "harness-predictor", draw * 64 + pi as u64),
                ) {
                    Some(s) => Box::new(s),
                    None => Box::new(Lookup(measured.clone())),
                };
                predictor.fit(&train, b)?;
                let train_cells: Vec<CellSpec> = train.iter().map(|(c, _)| c.clone()).collect();
                let train_acc: Vec<f64> = train.iter().map(|(_, a)| *a).collect();
                let rho_hat = spearman(&predictor.predict(&train_cells)?, &train_acc)?;
                let rho_tilde = spearman(&predictor.predict(&next.cells)?, &next.accuracies)?;
                trials.push((rho_hat, rho_tilde));
            }
            per_trial.push(trials);
        }
        let mean = |f: fn(&(f64, f64)) -> f64| -> Vec<f64> {
            per_trial
                .iter()
                .map(|ts| ts.iter().map(f).sum::<f64>() / ts.len() as f64)
                .collect()
        };
        rows.push(PredictorCorrelation {
            predictor: choice.name().to_owned(),
            rho_hat: mean(|p| p.0),
            rho_tilde: mean(|p| p.1),
            per_trial,
        });
    }
    Ok(CorrelationReport {
        max_blocks: cfg.max_blocks,
        rows,
    })
}
