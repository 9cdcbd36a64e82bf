use std::collections::BTreeMap;

use super::*;
use crate::eval::{OraclePredictor, SyntheticOracle, SyntheticOracleConfig};

fn oracle(noise: f64) -> SyntheticOracle {
    SyntheticOracle::new(SyntheticOracleConfig::with_noise(noise, 5))
}

fn perfect(o: &SyntheticOracle, cfg: &SearchConfig) -> OraclePredictor {
    OraclePredictor {
        oracle: o.clone(),
        seed: Some(cfg.eval_seed()),
    }
}

#[test]
fn top_k_breaks_ties_by_key() {
    let keys: Vec<String> = ["c", "a", "b", "d"].iter().map(|s| s.to_string()).collect();
    assert_eq!(top_k(&keys, &[0.5, 0.5, 0.9, 0.5], 3), vec![2, 1, 0]);
    assert_eq!(top_k(&keys[..2], &[0.1, 0.2], 10), vec![1, 0]);
}

#[test]
fn one_level_search_is_exhaustive() {
    let o = oracle(0.01);
    let cfg = SearchConfig {
        max_blocks: 1,
        ..Default::default()
    };
    let mut p = perfect(&o, &cfg);
    let trace = pnas_search(&cfg, &o, &mut p, &mut NullSink).unwrap();
    assert_eq!(trace.m1, 136);
    let best = trace.records.iter().map(|r| r.accuracy).fold(f64::MIN, f64::max);
    assert_eq!(trace.best.unwrap().measured, best);
}

#[test]
fn budget_identity_and_trace_layout() {
    let o = oracle(0.01);
    let cfg = SearchConfig {
        max_blocks: 3,
        beam: 8,
        ..Default::default()
    };
    let mut p = perfect(&o, &cfg);
    let mut events: Vec<TraceEvent> = Vec::new();
    let trace = pnas_search(&cfg, &o, &mut p, &mut events).unwrap();
    assert_eq!(trace.m1, 136 + 2 * 8);
    assert_eq!((trace.m2, trace.e2), (0, 0));
    assert_eq!(trace.levels[1].raw_candidates, 136 * 576);
    assert_eq!(trace.levels[1].unique_candidates, 136 * 300);
    assert_eq!(trace.levels[2].raw_candidates, 8 * 1024);
    assert_eq!(trace.levels[2].unique_candidates, 8 * 528);
    let count = |e: &str| events.iter().filter(|x| x.event == e).count();
    assert_eq!((count("eval"), count("select"), count("predict"), count("fit")), (152, 16, 16, 3));
    // ordered by level, then by key within each event kind
    for w in events.windows(2) {
        assert!(w[0].level <= w[1].level);
        if w[0].event == w[1].event && w[0].level == w[1].level {
            assert!(w[0].cell_key < w[1].cell_key);
        }
    }
}

#[test]
fn perfect_predictor_finds_the_beam_tree_argmax() {
    let o = oracle(0.0);
    let cfg = SearchConfig {
        max_blocks: 3,
        beam: 8,
        ..Default::default()
    };
    let mut p = perfect(&o, &cfg);
    let trace = pnas_search(&cfg, &o, &mut p, &mut NullSink).unwrap();

    // brute force: score every child with the oracle, keep the best 8
    let mut beam: Vec<CellSpec> = one_block_cells();
    for _ in 2..=3 {
        let mut children: BTreeMap<String, (f64, CellSpec)> = BTreeMap::new();
        for parent in &beam {
            for child in expand_cell(parent, 3).unwrap() {
                children.insert(child.key(), (o.score(&child), child));
            }
        }
        let mut ranked: Vec<(String, f64, CellSpec)> = children.into_iter().map(|(k, (s, c))| (k, s, c)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        beam = ranked.into_iter().take(8).map(|(_, _, c)| c).collect();
    }
    let best = beam
        .iter()
        .max_by(|a, b| o.score(a).total_cmp(&o.score(b)).then_with(|| b.key().cmp(&a.key())))
        .unwrap();
    assert_eq!(trace.best.unwrap().cell_key, best.key());
}

#[test]
fn random_search_counts_and_repeats() {
    let o = oracle(0.01);
    let cfg = SearchConfig::default();
    let one = random_search(1, &cfg, &o, &mut NullSink).unwrap();
    assert_eq!(one.m1, 1);
    assert_eq!(one.best.as_ref().unwrap().measured, one.records[0].accuracy);
    let mut a = JsonlSink::new(Vec::new());
    let mut b = JsonlSink::new(Vec::new());
    random_search(50, &cfg, &o, &mut a).unwrap();
    random_search(50, &cfg, &o, &mut b).unwrap();
    assert_eq!(a.into_inner(), b.into_inner());
    assert!(matches!(random_search(0, &cfg, &o, &mut NullSink), Err(SearchError::Config(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let o = oracle(0.0);
    for cfg in [
        SearchConfig {
            beam: 0,
            ..Default::default()
        },
        SearchConfig {
            max_blocks: 11,
            ..Default::default()
        },
        SearchConfig {
            epochs: 0,
            ..Default::default()
        },
    ] {
        let mut p = perfect(&o, &cfg);
        assert!(matches!(pnas_search(&cfg, &o, &mut p, &mut NullSink), Err(SearchError::Config(_))));
    }
}

#[test]
fn harness_with_a_perfect_predictor_is_exact() {
    let cfg = HarnessConfig {
        trials: 2,
        sample_size: 20,
        pool_size: 40,
        max_blocks: 3,
        predictors: vec![PredictorChoice::Perfect],
        ..HarnessConfig::desk(1)
    };
    let report = predictor_harness(&cfg, &oracle(0.0)).unwrap();
    assert_eq!(report.rows[0].rho_hat, vec![1.0, 1.0]);
    assert_eq!(report.rows[0].rho_tilde, vec![1.0, 1.0]);
    let csv = report.to_csv();
    assert_eq!(csv.lines().next().unwrap(), "predictor,rho_hat_1,rho_tilde_2,rho_hat_2,rho_tilde_3");
    assert_eq!(csv.lines().nth(1).unwrap(), "perfect,1,1,1,1");
}

#[test]
fn harness_rejects_sample_larger_than_pool() {
    let cfg = HarnessConfig {
        sample_size: 100,
        pool_size: 50,
        ..HarnessConfig::desk(1)
    };
    assert!(matches!(predictor_harness(&cfg, &oracle(0.0)), Err(SearchError::Config(_))));
}

#[test]
fn predictor_names_round_trip() {
    for c in [
        PredictorChoice::Mlp,
        PredictorChoice::Rnn,
        PredictorChoice::MlpEnsemble,
        PredictorChoice::RnnEnsemble,
        PredictorChoice::Perfect,
    ] {
        assert_eq!(c.name().parse::<PredictorChoice>().unwrap(), c);
    }
    assert!("lstm".parse::<PredictorChoice>().is_err());
}
