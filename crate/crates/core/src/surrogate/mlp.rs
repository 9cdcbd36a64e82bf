//! Averaged-embedding MLP regressor.
//!
//! Each block is embedded as the concatenation of its four token embeddings
//! (`4D` values) and the block vectors are averaged, so whole-block
//! permutations do not change the prediction. The averaged vector feeds
//! ReLU layers and a sigmoid output unit.
//!
//! The first layer is evaluated through per-slot projection tables
//! `P_s = E_s W1_s` (`E_s` the embedding table of slot `s`, `W1_s` the rows of
//! the first weight matrix belonging to that slot). Since the averaging is
//! linear this is the same function, with the first layer costing `4b`
//! row additions per cell.
use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{glorot, l1_upstream, sigmoid, Embeddings, PredictorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `inputs x outputs`
    pub w: Array2<f64>,
    /// `1 x outputs`
    pub b: Array2<f64>,
}

impl Dense {
    pub(crate) fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Dense {
        Dense {
            w: glorot(inputs, outputs, rng),
            b: Array2::zeros((1, outputs)),
        }
    }

    fn zeros_like(&self) -> Dense {
        Dense {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub emb: Embeddings,
    pub hidden: Vec<Dense>,
    pub out: Dense,
}

struct Cache {
    /// Pre-activations and activations of every hidden layer.
    z: Vec<Array2<f64>>,
    a: Vec<Array2<f64>>,
    p: Vec<f64>,
}

impl MlpModel {
    pub fn new<R: Rng>(cfg: &PredictorConfig, rng: &mut R) -> MlpModel {
        let emb = Embeddings::new(cfg, rng);
        let mut hidden = Vec::with_capacity(cfg.mlp_layers);
        let mut width = 4 * cfg.embed_dim;
        for _ in 0..cfg.mlp_layers {
            hidden.push(Dense::glorot(width, cfg.hidden, rng));
            width = cfg.hidden;
        }
        let mut out = Dense::glorot(width, 1, rng);
        out.b.fill(cfg.final_bias_init);
        MlpModel { emb, hidden, out }
    }

    fn embed_dim(&self) -> usize {
        self.emb.inputs.ncols()
    }

    fn slot_projections(&self) -> [Array2<f64>; 4] {
        let d = self.embed_dim();
        let (first, proj) = match self.hidden.first() {
            Some(layer) => (&layer.w, true),
            None => (&self.out.w, false),
        };
        debug_assert!(proj || first.nrows() == 4 * d);
        std::array::from_fn(|slot| {
            self.emb
                .table(slot)
                .dot(&first.slice(s![slot * d..(slot + 1) * d, ..]))
        })
    }

    fn forward(&self, batch: &[&[u8]]) -> Cache {
        let proj = self.slot_projections();
        let first_bias = match self.hidden.first() {
            Some(layer) => &layer.b,
            None => &self.out.b,
        };
        let mut z = Array2::zeros((batch.len(), first_bias.ncols()));
        for (r, tokens) in batch.iter().enumerate() {
            let scale = 4.0 / tokens.len() as f64;
            let mut row = z.row_mut(r);
            row += &first_bias.row(0);
            for (pos, &tok) in tokens.iter().enumerate() {
                row.scaled_add(scale, &proj[pos % 4].row(tok as usize));
            }
        }
        let mut cache = Cache {
            z: Vec::with_capacity(self.hidden.len()),
            a: Vec::with_capacity(self.hidden.len()),
            p: Vec::new(),
        };
        if self.hidden.is_empty() {
            cache.p = z.column(0).iter().map(|&v| sigmoid(v)).collect();
            return cache;
        }
        let mut a = z.mapv(|v| v.max(0.0));
        cache.z.push(z);
        for layer in &self.hidden[1..] {
            let z = a.dot(&layer.w) + &layer.b;
            cache.a.push(a);
            a = z.mapv(|v| v.max(0.0));
            cache.z.push(z);
        }
        let logits = a.dot(&self.out.w) + &self.out.b;
        cache.a.push(a);
        cache.p = logits.column(0).iter().map(|&v| sigmoid(v)).collect();
        cache
    }

    /// Predictions plus the sign of every ReLU pre-activation.
    pub fn predict_with_pattern(&self, batch: &[&[u8]]) -> (Vec<f64>, Vec<bool>) {
        let cache = self.forward(batch);
        let pattern = cache.z.iter().flat_map(|z| z.iter().map(|&v| v > 0.0)).collect();
        (cache.p, pattern)
    }

    pub fn predict_tokens(&self, batch: &[&[u8]]) -> Vec<f64> {
        const CHUNK: usize = 4096;
        batch
            .chunks(CHUNK)
            .flat_map(|chunk| self.forward(chunk).p)
            .collect()
    }

    /// Mean L1 loss over `batch` and its gradient.
    pub fn loss_grad(&self, batch: &[&[u8]], targets: &[f64]) -> (f64, MlpModel) {
        let cache = self.forward(batch);
        let n = batch.len() as f64;
        let loss = cache.p.iter().zip(targets).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
        let mut grads = self.zeros_like();

        // d loss / d logit
        let dlogit: Vec<f64> = cache
            .p
            .iter()
            .zip(targets)
            .map(|(&p, &y)| l1_upstream(p, y) / n * p * (1.0 - p))
            .collect();
        let mut dz = Array2::from_shape_vec((batch.len(), 1), dlogit).expect("column shape");

        if !self.hidden.is_empty() {
            let last = cache.a.last().expect("hidden activations");
            grads.out.w = last.t().dot(&dz);
            grads.out.b = dz.sum_axis(Axis(0)).insert_axis(Axis(0));
            let mut da = dz.dot(&self.out.w.t());
            for l in (0..self.hidden.len()).rev() {
                let mut d = da;
                ndarray::Zip::from(&mut d)
                    .and(&cache.z[l])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
                grads.hidden[l].b = d.sum_axis(Axis(0)).insert_axis(Axis(0));
                if l > 0 {
                    grads.hidden[l].w = cache.a[l - 1].t().dot(&d);
                    da = d.dot(&self.hidden[l].w.t());
                } else {
                    dz = d;
                    da = Array2::zeros((0, 0));
                }
            }
        } else {
            grads.out.b = dz.sum_axis(Axis(0)).insert_axis(Axis(0));
        }

        // dz is now the gradient of the first (projection-table) layer.
        let d = self.embed_dim();
        let width = dz.ncols();
        let mut dproj: [Array2<f64>; 4] = std::array::from_fn(|slot| {
            Array2::zeros((self.emb.table(slot).nrows(), width))
        });
        for (r, tokens) in batch.iter().enumerate() {
            let scale = 4.0 / tokens.len() as f64;
            for (pos, &tok) in tokens.iter().enumerate() {
                dproj[pos % 4]
                    .row_mut(tok as usize)
                    .scaled_add(scale, &dz.row(r));
            }
        }
        let first_w = match self.hidden.first() {
            Some(layer) => &layer.w,
            None => &self.out.w,
        };
        let mut dfirst = Array2::zeros(first_w.raw_dim());
        for (slot, dp) in dproj.iter().enumerate() {
            let w_slot = first_w.slice(s![slot * d..(slot + 1) * d, ..]);
            dfirst
                .slice_mut(s![slot * d..(slot + 1) * d, ..])
                .assign(&self.emb.table(slot).t().dot(dp));
            let demb = dp.dot(&w_slot.t());
            *grads.emb.table_mut(slot) += &demb;
        }
        match grads.hidden.first_mut() {
            Some(layer) => layer.w = dfirst,
            None => grads.out.w = dfirst,
        }
        (loss, grads)
    }

    pub fn zeros_like(&self) -> MlpModel {
        MlpModel {
            emb: self.emb.zeros_like(),
            hidden: self.hidden.iter().map(Dense::zeros_like).collect(),
            out: self.out.zeros_like(),
        }
    }

    pub fn params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut v = vec![
            ("emb_inputs".to_owned(), &self.emb.inputs),
            ("emb_ops".to_owned(), &self.emb.ops),
        ];
        for (l, layer) in self.hidden.iter().enumerate() {
            v.push((format!("hidden{l}.w"), &layer.w));
            v.push((format!("hidden{l}.b"), &layer.b));
        }
        v.push(("out.w".to_owned(), &self.out.w));
        v.push(("out.b".to_owned(), &self.out.b));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = vec![&mut self.emb.inputs, &mut self.emb.ops];
        for layer in &mut self.hidden {
            v.push(&mut layer.w);
            v.push(&mut layer.b);
        }
        v.push(&mut self.out.w);
        v.push(&mut self.out.b);
        v
    }
}
