use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut Array2<f64>>, grads: &[&Array2<f64>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(*g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Array2::from_elem((1, 2), 1.0);
        let g = Array2::from_shape_vec((1, 2), vec![0.5, -3.0]).unwrap();
        let mut adam = Adam::new(0.01);
        adam.step(vec![&mut p], &[&g]);
        assert!((p[[0, 0]] - 0.99).abs() < 1e-9);
        assert!((p[[0, 1]] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Array2::from_elem((1, 1), 5.0);
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let g = p.mapv(|x| 2.0 * (x - 2.0));
            adam.step(vec![&mut p], &[&g]);
        }
        assert!((p[[0, 0]] - 2.0).abs() < 1e-2);
    }
}
