//! Accuracy predictors.
//!
//! Two regressors map the token encoding of a cell to a predicted accuracy in
//! `(0, 1)`: an MLP over block-averaged embeddings ([`mlp`]) and an LSTM over
//! the token sequence ([`lstm`]). Both share one embedding table for input
//! tokens and one for operator tokens, finish with a sigmoid unit whose bias
//! starts at 1.8, and are trained full-batch with Adam on the mean absolute
//! error. An [`Ensemble`] fits five members from scratch, each on the data
//! minus one fifth.
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{CellSpec, MAX_BLOCKS, NUM_OPERATORS};
use crate::seed;

mod adam;
mod gradcheck;
pub mod lstm;
pub mod mlp;
mod tokens;

pub use adam::Adam;
pub use gradcheck::{gradient_check, GradCheckReport};
pub use tokens::{encode_tokens, TokenSequence};

use lstm::LstmModel;
use mlp::MlpModel;

/// Members per ensemble.
pub const ENSEMBLE_SIZE: usize = 5;

/// Version of the checkpoint layout.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Mlp,
    Rnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub embed_dim: usize,
    pub hidden: usize,
    pub mlp_layers: usize,
    /// Bias of the output unit at initialization; `sigmoid(1.8) ≈ 0.86`, the
    /// mean accuracy of one-block cells.
    pub final_bias_init: f64,
    pub lr_first_level: f64,
    pub lr_later_levels: f64,
    /// Full-batch Adam steps when fitting at level 1.
    pub steps_first_level: usize,
    pub steps_later_levels: usize,
    pub seed: u64,
    /// Sizes the input vocabulary (`max_blocks + 1` ids).
    pub max_blocks: usize,
}

impl PredictorConfig {
    pub fn new(kind: PredictorKind, seed: u64) -> PredictorConfig {
        PredictorConfig {
            kind,
            embed_dim: 100,
            hidden: 100,
            mlp_layers: 2,
            final_bias_init: 1.8,
            lr_first_level: 0.01,
            lr_later_levels: 0.002,
            steps_first_level: 200,
            steps_later_levels: 100,
            seed,
            max_blocks: MAX_BLOCKS,
        }
    }

    pub fn mlp(seed: u64) -> PredictorConfig {
        Self::new(PredictorKind::Mlp, seed)
    }

    pub fn rnn(seed: u64) -> PredictorConfig {
        Self::new(PredictorKind::Rnn, seed)
    }

    pub fn learning_rate(&self, level: usize) -> f64 {
        if level <= 1 {
            self.lr_first_level
        } else {
            self.lr_later_levels
        }
    }

    pub fn steps(&self, level: usize) -> usize {
        if level <= 1 {
            self.steps_first_level
        } else {
            self.steps_later_levels
        }
    }

    fn with_seed(&self, seed: u64) -> PredictorConfig {
        PredictorConfig { seed, ..self.clone() }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Subgradient of `|p - y|` with respect to `p`; zero at the kink.
pub(crate) fn l1_upstream(p: f64, y: f64) -> f64 {
    if p > y {
        1.0
    } else if p < y {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (inputs + outputs) as f64).sqrt();
    Array2::from_shape_fn((inputs, outputs), |_| rng.random_range(-bound..bound))
}

/// Token embeddings: one table for input ids, one for operator ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    pub inputs: Array2<f64>,
    pub ops: Array2<f64>,
}

impl Embeddings {
    fn new<R: Rng>(cfg: &PredictorConfig, rng: &mut R) -> Embeddings {
        let mut uniform = |rows| Array2::from_shape_fn((rows, cfg.embed_dim), |_| rng.random_range(-0.1..0.1));
        let inputs = uniform(cfg.max_blocks + 1);
        let ops = uniform(NUM_OPERATORS);
        Embeddings { inputs, ops }
    }

    /// Table used by token slot `slot` (0..4) of a block.
    pub fn table(&self, slot: usize) -> &Array2<f64> {
        if slot % 4 < 2 {
            &self.inputs
        } else {
            &self.ops
        }
    }

    fn table_mut(&mut self, slot: usize) -> &mut Array2<f64> {
        if slot % 4 < 2 {
            &mut self.inputs
        } else {
            &mut self.ops
        }
    }

    fn zeros_like(&self) -> Embeddings {
        Embeddings {
            inputs: Array2::zeros(self.inputs.raw_dim()),
            ops: Array2::zeros(self.ops.raw_dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Network {
    Mlp(MlpModel),
    Rnn(LstmModel),
}

/// Training curve of one fit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitReport {
    /// Mean absolute error before each Adam step.
    pub losses: Vec<f64>,
    /// Mean absolute error after the last step.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub config: PredictorConfig,
    pub network: Network,
}

impl PredictorModel {
    /// Freshly initialized model seeded from `config.seed`.
    pub fn new(config: &PredictorConfig) -> PredictorModel {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let network = match config.kind {
            PredictorKind::Mlp => Network::Mlp(MlpModel::new(config, &mut rng)),
            PredictorKind::Rnn => Network::Rnn(LstmModel::new(config, &mut rng)),
        };
        PredictorModel {
            config: config.clone(),
            network,
        }
    }

    fn check_tokens(&self, seq: &TokenSequence) -> Result<(), SurrogateError> {
        let b = seq.num_blocks();
        if seq.tokens.len() % 4 != 0 || b == 0 || b > self.config.max_blocks {
            return Err(SurrogateError::Validation(format!(
                "token sequence of length {} does not describe 1..={} blocks",
                seq.tokens.len(),
                self.config.max_blocks
            )));
        }
        for (p, &t) in seq.tokens.iter().enumerate() {
            let ok = if TokenSequence::is_input_slot(p) {
                (t as usize) <= p / 4 + 1
            } else {
                (t as usize) < NUM_OPERATORS
            };
            if !ok {
                return Err(SurrogateError::Validation(format!(
                    "token {t} at position {p} is outside its vocabulary"
                )));
            }
        }
        Ok(())
    }

    pub fn predict_tokens(&self, seqs: &[TokenSequence]) -> Result<Vec<f64>, SurrogateError> {
        for s in seqs {
            self.check_tokens(s)?;
        }
        let batch: Vec<&[u8]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
        Ok(self.predict_raw(&batch))
    }

    pub(crate) fn predict_raw(&self, batch: &[&[u8]]) -> Vec<f64> {
        match &self.network {
            Network::Mlp(m) => m.predict_tokens(batch),
            Network::Rnn(m) => m.predict_tokens(batch),
        }
    }

    /// Predictions and the on/off state of every piecewise-linear piece
    /// (ReLU units, and the side of each L1 residual). Two parameter settings
    /// with the same pattern lie on the same smooth piece of the loss.
    pub(crate) fn predict_with_pattern(&self, batch: &[&[u8]], targets: &[f64]) -> (Vec<f64>, Vec<bool>) {
        let (p, mut pattern) = match &self.network {
            Network::Mlp(m) => m.predict_with_pattern(batch),
            Network::Rnn(m) => (m.predict_tokens(batch), Vec::new()),
        };
        pattern.extend(p.iter().zip(targets).map(|(p, y)| p > y));
        (p, pattern)
    }

    pub fn predict(&self, cells: &[CellSpec]) -> Result<Vec<f64>, SurrogateError> {
        let seqs: Vec<TokenSequence> = cells.iter().map(encode_tokens).collect();
        self.predict_tokens(&seqs)
    }

    /// Mean L1 loss and its gradient, in parameter order.
    pub fn loss_grad(&self, batch: &[&[u8]], targets: &[f64]) -> (f64, Vec<Array2<f64>>) {
        match &self.network {
            Network::Mlp(m) => {
                let (l, g) = m.loss_grad(batch, targets);
                (l, g.params().into_iter().map(|(_, a)| a.clone()).collect())
            }
            Network::Rnn(m) => {
                let (l, g) = m.loss_grad(batch, targets);
                (l, g.params().into_iter().map(|(_, a)| a.clone()).collect())
            }
        }
    }

    pub fn param_groups(&self) -> Vec<(String, &Array2<f64>)> {
        match &self.network {
            Network::Mlp(m) => m.params(),
            Network::Rnn(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        match &mut self.network {
            Network::Mlp(m) => m.params_mut(),
            Network::Rnn(m) => m.params_mut(),
        }
    }

    /// Trains in place with full-batch Adam on the mean absolute error.
    /// The learning rate and step count depend on `level`.
    pub fn fit(&mut self, data: &[(TokenSequence, f64)], level: usize) -> Result<FitReport, SurrogateError> {
        if data.is_empty() {
            return Err(SurrogateError::Validation("no training data".into()));
        }
        for (seq, y) in data {
            if !(0.0..=1.0).contains(y) {
                return Err(SurrogateError::Validation(format!("accuracy {y} is outside [0, 1]")));
            }
            self.check_tokens(seq)?;
        }
        let batch: Vec<&[u8]> = data.iter().map(|(s, _)| s.tokens.as_slice()).collect();
        let targets: Vec<f64> = data.iter().map(|(_, y)| *y).collect();
        let steps = self.config.steps(level);
        let mut adam = Adam::new(self.config.learning_rate(level));
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (loss, grads) = self.loss_grad(&batch, &targets);
            losses.push(loss);
            let grad_refs: Vec<&Array2<f64>> = grads.iter().collect();
            adam.step(self.params_mut(), &grad_refs);
        }
        let final_loss = mean_abs_error(&self.predict_raw(&batch), &targets);
        Ok(FitReport { losses, final_loss })
    }
}

pub fn mean_abs_error(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, y)| (p - y).abs()).sum::<f64>() / pred.len().max(1) as f64
}

/// Indices omitted by each of the five members: a seeded shuffle cut into
/// five contiguous folds (some empty when there are fewer than five points).
pub fn fold_partition(n: usize, seed: u64) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (0..ENSEMBLE_SIZE)
        .map(|m| idx[m * n / ENSEMBLE_SIZE..(m + 1) * n / ENSEMBLE_SIZE].to_vec())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub members: Vec<PredictorModel>,
}

impl Ensemble {
    /// Fits five members from scratch. Member `m` is seeded with
    /// `derive(config.seed, "member", m)` and skips fold `m` of
    /// [`fold_partition`]; a member whose training set would be empty
    /// trains on everything.
    pub fn fit(data: &[(TokenSequence, f64)], config: &PredictorConfig, level: usize) -> Result<Ensemble, SurrogateError> {
        if data.is_empty() {
            return Err(SurrogateError::Validation("no training data".into()));
        }
        let folds = fold_partition(data.len(), seed::derive(config.seed, "folds", level as u64));
        let members = (0..ENSEMBLE_SIZE)
            .into_par_iter()
            .map(|m| {
                let mut omit = vec![false; data.len()];
                for &i in &folds[m] {
                    omit[i] = true;
                }
                let mut subset: Vec<(TokenSequence, f64)> = data
                    .iter()
                    .zip(&omit)
                    .filter(|(_, &o)| !o)
                    .map(|(d, _)| d.clone())
                    .collect();
                if subset.is_empty() {
                    subset = data.to_vec();
                }
                let mut model = PredictorModel::new(&config.with_seed(seed::derive(config.seed, "member", m as u64)));
                model.fit(&subset, level)?;
                Ok(model)
            })
            .collect::<Result<Vec<_>, SurrogateError>>()?;
        Ok(Ensemble { members })
    }

    pub fn from_members(members: Vec<PredictorModel>) -> Ensemble {
        Ensemble { members }
    }

    /// Arithmetic mean of the member predictions.
    pub fn predict(&self, cells: &[CellSpec]) -> Result<Vec<f64>, SurrogateError> {
        let seqs: Vec<TokenSequence> = cells.iter().map(encode_tokens).collect();
        let per_member = self
            .members
            .par_iter()
            .map(|m| m.predict_tokens(&seqs))
            .collect::<Result<Vec<_>, _>>()?;
        let k = self.members.len() as f64;
        Ok((0..cells.len())
            .map(|i| per_member.iter().map(|p| p[i]).sum::<f64>() / k)
            .collect())
    }
}

/// Anything that can be fit on measured cells and rank new ones.
pub trait Predictor: Send + Sync {
    /// Refits on `data`, the accumulated measurements up to `level`.
    fn fit(&mut self, data: &[(CellSpec, f64)], level: usize) -> Result<(), SurrogateError>;

    fn predict(&self, cells: &[CellSpec]) -> Result<Vec<f64>, SurrogateError>;
}

/// A learned predictor, single model or five-member ensemble, refit from
/// scratch on every call to [`Predictor::fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Surrogate {
    Single { model: PredictorModel },
    Ensemble { config: PredictorConfig, ensemble: Ensemble },
}

impl Surrogate {
    pub fn single(config: PredictorConfig) -> Surrogate {
        Surrogate::Single {
            model: PredictorModel::new(&config),
        }
    }

    pub fn ensemble(config: PredictorConfig) -> Surrogate {
        let members = (0..ENSEMBLE_SIZE)
            .map(|m| PredictorModel::new(&config.with_seed(seed::derive(config.seed, "member", m as u64))))
            .collect();
        Surrogate::Ensemble {
            config,
            ensemble: Ensemble { members },
        }
    }

    pub fn to_checkpoint(&self) -> String {
        let doc = CheckpointDoc {
            format: "pnas-surrogate".into(),
            version: CHECKPOINT_VERSION,
            predictor: self.clone(),
        };
        serde_json::to_string(&doc).expect("checkpoint serializes")
    }

    pub fn from_checkpoint(json: &str) -> Result<Surrogate, SurrogateError> {
        let doc: CheckpointDoc = serde_json::from_str(json).map_err(|e| SurrogateError::Checkpoint(e.to_string()))?;
        if doc.format != "pnas-surrogate" || doc.version != CHECKPOINT_VERSION {
            return Err(SurrogateError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                doc.format, doc.version
            )));
        }
        Ok(doc.predictor)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    predictor: Surrogate,
}

impl Predictor for Surrogate {
    fn fit(&mut self, data: &[(CellSpec, f64)], level: usize) -> Result<(), SurrogateError> {
        let seqs: Vec<(TokenSequence, f64)> = data.iter().map(|(c, y)| (encode_tokens(c), *y)).collect();
        match self {
            Surrogate::Single { model } => {
                let mut fresh = PredictorModel::new(&model.config);
                fresh.fit(&seqs, level)?;
                *model = fresh;
            }
            Surrogate::Ensemble { config, ensemble } => {
                *ensemble = Ensemble::fit(&seqs, config, level)?;
            }
        }
        Ok(())
    }

    fn predict(&self, cells: &[CellSpec]) -> Result<Vec<f64>, SurrogateError> {
        match self {
            Surrogate::Single { model } => model.predict(cells),
            Surrogate::Ensemble { ensemble, .. } => ensemble.predict(cells),
        }
    }
}
