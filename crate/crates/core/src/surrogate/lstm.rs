//! LSTM regressor over the token sequence.
//!
//! Gates are laid out `[input | forget | cell | output]`, each `H` wide:
//!
//! ```text
//! g_t = x_t Wx + h_{t-1} Wh + b
//! c_t = f ⊙ c_{t-1} + i ⊙ tanh(g)      h_t = o ⊙ tanh(c_t)
//! ```
//!
//! with sigmoid input/forget/output gates. The final hidden state goes through
//! one dense unit and a sigmoid. Tokens are looked up in the input or operator
//! embedding table depending on their slot, and `x_t Wx` is read from the
//! precomputed tables `E Wx`.
use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::Dense;
use super::{glorot, l1_upstream, sigmoid, Embeddings, PredictorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    pub emb: Embeddings,
    /// `D x 4H`
    pub w_x: Array2<f64>,
    /// `H x 4H`
    pub w_h: Array2<f64>,
    /// `1 x 4H`
    pub b: Array2<f64>,
    pub out: Dense,
}

struct Step {
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
}

impl LstmModel {
    pub fn new<R: Rng>(cfg: &PredictorConfig, rng: &mut R) -> LstmModel {
        let (d, h) = (cfg.embed_dim, cfg.hidden);
        let bound = 1.0 / (h as f64).sqrt();
        let mut uniform = |rows, cols| Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        let w_x = uniform(d, 4 * h);
        let w_h = uniform(h, 4 * h);
        let mut b = Array2::zeros((1, 4 * h));
        b.slice_mut(s![.., h..2 * h]).fill(1.0);
        let emb = Embeddings::new(cfg, rng);
        let mut out = Dense {
            w: glorot(h, 1, rng),
            b: Array2::zeros((1, 1)),
        };
        out.b.fill(cfg.final_bias_init);
        LstmModel { emb, w_x, w_h, b, out }
    }

    fn width(&self) -> usize {
        self.w_h.nrows()
    }

    fn token_tables(&self) -> [Array2<f64>; 2] {
        [self.emb.inputs.dot(&self.w_x), self.emb.ops.dot(&self.w_x)]
    }

    /// Runs `tokens` (all the same length, a whole number of blocks) from the
    /// given states.
    fn run(
        &self,
        tables: &[Array2<f64>; 2],
        tokens: &[&[u8]],
        mut h: Array2<f64>,
        mut c: Array2<f64>,
        mut steps: Option<&mut Vec<Step>>,
        mut hs: Option<&mut Vec<Array2<f64>>>,
    ) -> (Array2<f64>, Array2<f64>) {
        let n = tokens.len();
        let hw = self.width();
        let len = tokens.first().map_or(0, |t| t.len());
        for t in 0..len {
            let table = &tables[if t % 4 < 2 { 0 } else { 1 }];
            let mut gates = h.dot(&self.w_h) + &self.b;
            for (r, seq) in tokens.iter().enumerate() {
                let mut row = gates.row_mut(r);
                row += &table.row(seq[t] as usize);
            }
            let i = gates.slice(s![.., 0..hw]).mapv(sigmoid);
            let f = gates.slice(s![.., hw..2 * hw]).mapv(sigmoid);
            let g = gates.slice(s![.., 2 * hw..3 * hw]).mapv(f64::tanh);
            let o = gates.slice(s![.., 3 * hw..]).mapv(sigmoid);
            let c_next = &f * &c + &i * &g;
            let tanh_c = c_next.mapv(f64::tanh);
            let h_next = &o * &tanh_c;
            if let Some(hs) = hs.as_deref_mut() {
                hs.push(h);
            }
            if let Some(steps) = steps.as_deref_mut() {
                steps.push(Step {
                    i,
                    f,
                    g,
                    o,
                    c: c_next.clone(),
                    tanh_c,
                });
            }
            debug_assert_eq!(h_next.nrows(), n);
            h = h_next;
            c = c_next;
        }
        (h, c)
    }

    fn head(&self, h: &Array2<f64>) -> Vec<f64> {
        (h.dot(&self.out.w) + &self.out.b)
            .column(0)
            .iter()
            .map(|&v| sigmoid(v))
            .collect()
    }

    /// Predictions for arbitrary-length sequences. Sequences sharing all but
    /// their last block reuse the prefix state.
    pub fn predict_tokens(&self, batch: &[&[u8]]) -> Vec<f64> {
        const CHUNK: usize = 4096;
        let tables = self.token_tables();
        let hw = self.width();
        let mut out = vec![0.0; batch.len()];

        // prefix -> rows
        let mut groups: HashMap<&[u8], Vec<usize>> = HashMap::new();
        for (r, seq) in batch.iter().enumerate() {
            let cut = seq.len().saturating_sub(4);
            groups.entry(&seq[..cut]).or_default().push(r);
        }
        let mut prefixes: Vec<&[u8]> = groups.keys().copied().collect();
        prefixes.sort_unstable();

        let mut by_len: std::collections::BTreeMap<usize, Vec<&[u8]>> = Default::default();
        for p in &prefixes {
            by_len.entry(p.len()).or_default().push(p);
        }
        let mut prefix_state: HashMap<&[u8], usize> = HashMap::new();
        let mut states_h: Vec<Array2<f64>> = Vec::new();
        let mut states_c: Vec<Array2<f64>> = Vec::new();
        for (_, group) in by_len {
            for chunk in group.chunks(CHUNK) {
                let zeros = Array2::zeros((chunk.len(), hw));
                let (h, c) = self.run(&tables, chunk, zeros.clone(), zeros, None, None);
                for (k, p) in chunk.iter().enumerate() {
                    prefix_state.insert(p, states_h.len());
                    states_h.push(h.slice(s![k..k + 1, ..]).to_owned());
                    states_c.push(c.slice(s![k..k + 1, ..]).to_owned());
                }
            }
        }

        let mut suffix_groups: Vec<(usize, Vec<usize>)> = prefixes
            .iter()
            .map(|p| (p.len(), groups[p].clone()))
            .collect();
        suffix_groups.sort_by_key(|(len, _)| *len);
        let mut pending: Vec<usize> = Vec::new();
        let flush = |rows: &mut Vec<usize>, out: &mut Vec<f64>| {
            if rows.is_empty() {
                return;
            }
            let mut h0 = Array2::zeros((rows.len(), hw));
            let mut c0 = Array2::zeros((rows.len(), hw));
            for (k, &r) in rows.iter().enumerate() {
                let seq = batch[r];
                let cut = seq.len().saturating_sub(4);
                let idx = prefix_state[&seq[..cut]];
                h0.row_mut(k).assign(&states_h[idx].row(0));
                c0.row_mut(k).assign(&states_c[idx].row(0));
            }
            let suffixes: Vec<&[u8]> = rows
                .iter()
                .map(|&r| {
                    let seq = batch[r];
                    &seq[seq.len().saturating_sub(4)..]
                })
                .collect();
            let (h, _) = self.run(&tables, &suffixes, h0, c0, None, None);
            for (k, p) in self.head(&h).into_iter().enumerate() {
                out[rows[k]] = p;
            }
            rows.clear();
        };
        for (_, rows) in suffix_groups {
            for r in rows {
                pending.push(r);
                if pending.len() == CHUNK {
                    flush(&mut pending, &mut out);
                }
            }
        }
        flush(&mut pending, &mut out);
        out
    }

    /// Mean L1 loss over `batch` and its gradient.
    pub fn loss_grad(&self, batch: &[&[u8]], targets: &[f64]) -> (f64, LstmModel) {
        let n_total = batch.len() as f64;
        let mut grads = self.zeros_like();
        let mut by_len: HashMap<usize, Vec<usize>> = HashMap::new();
        for (r, seq) in batch.iter().enumerate() {
            by_len.entry(seq.len()).or_default().push(r);
        }
        let mut lens: Vec<usize> = by_len.keys().copied().collect();
        lens.sort_unstable();

        let tables = self.token_tables();
        let hw = self.width();
        let mut dtables = [
            Array2::<f64>::zeros(tables[0].raw_dim()),
            Array2::<f64>::zeros(tables[1].raw_dim()),
        ];
        let mut loss = 0.0;
        for len in lens {
            let rows = &by_len[&len];
            let seqs: Vec<&[u8]> = rows.iter().map(|&r| batch[r]).collect();
            let n = seqs.len();
            let mut steps = Vec::with_capacity(len);
            let mut hs = Vec::with_capacity(len);
            let zeros = Array2::zeros((n, hw));
            let (h_last, _) = self.run(
                &tables,
                &seqs,
                zeros.clone(),
                zeros.clone(),
                Some(&mut steps),
                Some(&mut hs),
            );
            let p = self.head(&h_last);
            let dlogit: Vec<f64> = rows
                .iter()
                .zip(&p)
                .map(|(&r, &p)| {
                    loss += (p - targets[r]).abs();
                    l1_upstream(p, targets[r]) / n_total * p * (1.0 - p)
                })
                .collect();
            let dlogit = Array2::from_shape_vec((n, 1), dlogit).expect("column shape");
            grads.out.w += &h_last.t().dot(&dlogit);
            grads.out.b += &dlogit.sum_axis(Axis(0)).insert_axis(Axis(0));

            let mut dh = dlogit.dot(&self.out.w.t());
            let mut dc: Array2<f64> = Array2::zeros((n, hw));
            let mut dgates = Array2::zeros((n, 4 * hw));
            for t in (0..len).rev() {
                let st = &steps[t];
                let c_prev: ArrayView2<f64> = if t > 0 { steps[t - 1].c.view() } else { zeros.view() };
                ndarray::Zip::from(&mut dc)
                    .and(&dh)
                    .and(&st.o)
                    .and(&st.tanh_c)
                    .for_each(|dc, &dh, &o, &tc| *dc += dh * o * (1.0 - tc * tc));
                {
                    let (mut di, rest) = dgates.view_mut().split_at(Axis(1), hw);
                    let (mut df, rest) = rest.split_at(Axis(1), hw);
                    let (mut dg, mut do_) = rest.split_at(Axis(1), hw);
                    ndarray::Zip::from(&mut di)
                        .and(&dc)
                        .and(&st.i)
                        .and(&st.g)
                        .for_each(|d, &dc, &i, &g| *d = dc * g * i * (1.0 - i));
                    ndarray::Zip::from(&mut df)
                        .and(&dc)
                        .and(&st.f)
                        .and(&c_prev)
                        .for_each(|d, &dc, &f, &cp| *d = dc * cp * f * (1.0 - f));
                    ndarray::Zip::from(&mut dg)
                        .and(&dc)
                        .and(&st.i)
                        .and(&st.g)
                        .for_each(|d, &dc, &i, &g| *d = dc * i * (1.0 - g * g));
                    ndarray::Zip::from(&mut do_)
                        .and(&dh)
                        .and(&st.tanh_c)
                        .and(&st.o)
                        .for_each(|d, &dh, &tc, &o| *d = dh * tc * o * (1.0 - o));
                }
                grads.w_h += &hs[t].t().dot(&dgates);
                grads.b += &dgates.sum_axis(Axis(0)).insert_axis(Axis(0));
                let table = if t % 4 < 2 { 0 } else { 1 };
                for (r, seq) in seqs.iter().enumerate() {
                    let mut row = dtables[table].row_mut(seq[t] as usize);
                    row += &dgates.row(r);
                }
                dh = dgates.dot(&self.w_h.t());
                dc = &dc * &st.f;
            }
        }
        // tables = E Wx
        grads.w_x = self.emb.inputs.t().dot(&dtables[0]) + self.emb.ops.t().dot(&dtables[1]);
        grads.emb.inputs = dtables[0].dot(&self.w_x.t());
        grads.emb.ops = dtables[1].dot(&self.w_x.t());
        (loss / n_total, grads)
    }

    pub fn zeros_like(&self) -> LstmModel {
        LstmModel {
            emb: self.emb.zeros_like(),
            w_x: Array2::zeros(self.w_x.raw_dim()),
            w_h: Array2::zeros(self.w_h.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
            out: Dense {
                w: Array2::zeros(self.out.w.raw_dim()),
                b: Array2::zeros(self.out.b.raw_dim()),
            },
        }
    }

    pub fn params(&self) -> Vec<(String, &Array2<f64>)> {
        vec![
            ("emb_inputs".to_owned(), &self.emb.inputs),
            ("emb_ops".to_owned(), &self.emb.ops),
            ("w_x".to_owned(), &self.w_x),
            ("w_h".to_owned(), &self.w_h),
            ("b".to_owned(), &self.b),
            ("out.w".to_owned(), &self.out.w),
            ("out.b".to_owned(), &self.out.b),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![
            &mut self.emb.inputs,
            &mut self.emb.ops,
            &mut self.w_x,
            &mut self.w_h,
            &mut self.b,
            &mut self.out.w,
            &mut self.out.b,
        ]
    }
}
