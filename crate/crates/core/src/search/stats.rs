//! Rank correlation, top-M curves and search-cost arithmetic.
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum StatError {
    #[error("need two equally long samples of at least 2 values, got {0} and {1}")]
    Length(usize, usize),
    #[error("rank correlation is undefined when one sample is constant")]
    ZeroVariance,
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(StatError::Length(x.len(), y.len()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of the average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(StatError::Length(x.len(), y.len()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopMPoint {
    /// Models evaluated so far.
    pub models: usize,
    pub m: usize,
    /// Mean accuracy of the best `m` of them.
    pub mean: f64,
}

/// Running mean of the best `m` accuracies after each evaluation, for every
/// `m` in `ms`. Prefixes shorter than `m` contribute no point.
pub fn top_m_curve(accuracies: &[f64], ms: &[usize]) -> Vec<TopMPoint> {
    let cap = ms.iter().copied().max().unwrap_or(0);
    let mut best: Vec<f64> = Vec::with_capacity(cap + 1);
    let mut out = Vec::new();
    for (i, &a) in accuracies.iter().enumerate() {
        let pos = best.partition_point(|&b| b >= a);
        if pos < cap {
            best.insert(pos, a);
            best.truncate(cap);
        }
        for &m in ms {
            if m >= 1 && m <= i + 1 {
                out.push(TopMPoint {
                    models: i + 1,
                    m,
                    mean: best[..m].iter().sum::<f64>() / m as f64,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub models: usize,
    pub m: usize,
    pub mean: f64,
    /// Standard error of the mean across trials (0 for a single trial).
    pub stderr: f64,
    pub trials: usize,
}

/// Mean and standard error across trials of each `(models, m)` point.
pub fn aggregate_curves(curves: &[Vec<TopMPoint>]) -> Vec<CurvePoint> {
    let mut groups: std::collections::BTreeMap<(usize, usize), Vec<f64>> = Default::default();
    for curve in curves {
        for p in curve {
            groups.entry((p.models, p.m)).or_default().push(p.mean);
        }
    }
    groups
        .into_iter()
        .map(|((models, m), xs)| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let stderr = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                0.0
            };
            CurvePoint {
                models,
                m,
                mean,
                stderr,
                trials: xs.len(),
            }
        })
        .collect()
}

/// Examples processed by SGD: `m1·e1 + m2·e2`, exactly.
pub fn compute_cost(m1: u64, e1: u64, m2: u64, e2: u64) -> BigUint {
    BigUint::from(m1) * e1 + BigUint::from(m2) * e2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn spearman_basic_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert_eq!(spearman(&[1.0], &[1.0]), Err(StatError::Length(1, 1)));
        assert_eq!(spearman(&[1.0, 2.0], &[1.0]), Err(StatError::Length(2, 1)));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(StatError::ZeroVariance));
    }

    #[test]
    fn top_m_skips_short_prefixes() {
        let pts = top_m_curve(&[0.5, 0.7, 0.6], &[1, 2, 5]);
        let m2: Vec<f64> = pts.iter().filter(|p| p.m == 2).map(|p| p.mean).collect();
        assert_eq!(m2.len(), 2);
        assert!((m2[0] - 0.6).abs() < 1e-12 && (m2[1] - 0.65).abs() < 1e-12);
        assert!(pts.iter().all(|p| p.m != 5));
        let m1: Vec<f64> = pts.iter().filter(|p| p.m == 1).map(|p| p.mean).collect();
        assert_eq!(m1, vec![0.5, 0.7, 0.7]);
    }

    #[test]
    fn aggregation_reports_standard_error() {
        let a = top_m_curve(&[0.5], &[1]);
        let b = top_m_curve(&[0.7], &[1]);
        let agg = aggregate_curves(&[a, b]);
        assert_eq!(agg.len(), 1);
        assert!((agg[0].mean - 0.6).abs() < 1e-12);
        assert!((agg[0].stderr - 0.1).abs() < 1e-12);
    }

    #[test]
    fn cost_is_exact() {
        assert_eq!(compute_cost(1160, 900_000, 0, 0), BigUint::from(1_044_000_000u64));
        assert_eq!(compute_cost(3, 4, 0, 0), BigUint::from(12u32));
    }
}
