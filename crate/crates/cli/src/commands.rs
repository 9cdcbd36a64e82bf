use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use pnas::cell::{count_space, CellSpec};
use pnas::eval::{
    write_table, Evaluator, ExternalConfig, ExternalEvaluator, OraclePredictor, SyntheticOracle, SyntheticOracleConfig,
    TabularEvaluator,
};
use pnas::net::{build_network, count_costs, export_graph, pnasnet5_cell, StackPlan};
use pnas::search::{
    aggregate_curves, pnas_search, predictor_harness, random_search, top_m_curve, HarnessConfig, JsonlSink,
    PredictionLog, PredictorChoice, SearchConfig, SearchTrace, TraceSink,
};
use pnas::surrogate::{Predictor, PredictorConfig};

use crate::run_dir::{Manifest, RunDir};
use crate::settings::{read_file, Settings};
use crate::{BuildArgs, CliError, EvalArgs, HarnessArgs, SearchArgs};

/// The M values reported in summary.csv.
pub const TOP_M: [usize; 3] = [1, 5, 25];

const EVAL_DEFAULTS: [(&str, &str); 7] = [
    ("evaluator", "synthetic"),
    ("noise", "0.01"),
    ("oracle-seed", "0"),
    ("table", ""),
    ("worker", ""),
    ("workers", "1"),
    ("retries", "2"),
];

const SEARCH_DEFAULTS: [(&str, &str); 15] = [
    ("out", ""),
    ("strategy", "pnas"),
    ("max-blocks", "5"),
    ("beam", "256"),
    ("count", "1000"),
    ("epochs", "20"),
    ("filters", "24"),
    ("repeats", "2"),
    ("seed", "0"),
    ("trials", "1"),
    ("predictor", "mlp-ens"),
    ("embed-dim", "100"),
    ("hidden", "100"),
    ("log-predictions", "selected"),
    ("examples-per-model", "900000"),
];

const HARNESS_DEFAULTS: [(&str, &str); 13] = [
    ("out", ""),
    ("predictors", "mlp,rnn,mlp-ens,rnn-ens"),
    ("perfect", "false"),
    ("trials", "5"),
    ("sample-size", "64"),
    ("pool-size", "1000"),
    ("max-blocks", "5"),
    ("epochs", "20"),
    ("filters", "24"),
    ("repeats", "2"),
    ("seed", "0"),
    ("embed-dim", "100"),
    ("hidden", "100"),
];

fn defaults(command: &[(&'static str, &'static str)]) -> Vec<(&'static str, &'static str)> {
    command
        .iter()
        .chain(EVAL_DEFAULTS.iter())
        .copied()
        .collect()
}

fn eval_flags(e: &EvalArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("evaluator", e.evaluator.clone()),
        ("noise", e.noise.clone()),
        ("oracle-seed", e.oracle_seed.clone()),
        ("table", e.table.clone()),
        ("worker", e.worker.clone()),
        ("workers", e.workers.clone()),
        ("retries", e.retries.clone()),
    ]
}

fn config_file(path: &Option<std::path::PathBuf>) -> Result<Option<std::collections::BTreeMap<String, String>>, CliError> {
    path.as_deref().map(read_file).transpose()
}

pub fn search(a: &SearchArgs) -> Result<(), CliError> {
    let mut flags = vec![
        ("out", a.out.clone()),
        ("strategy", a.strategy.clone()),
        ("max-blocks", a.max_blocks.clone()),
        ("beam", a.beam.clone()),
        ("count", a.count.clone()),
        ("epochs", a.epochs.clone()),
        ("filters", a.filters.clone()),
        ("repeats", a.repeats.clone()),
        ("seed", a.seed.clone()),
        ("trials", a.trials.clone()),
        ("predictor", a.predictor.clone()),
        ("embed-dim", a.embed_dim.clone()),
        ("hidden", a.hidden.clone()),
        ("log-predictions", a.log_predictions.clone()),
        ("examples-per-model", a.examples_per_model.clone()),
    ];
    flags.extend(eval_flags(&a.eval));
    let s = Settings::layered(&defaults(&SEARCH_DEFAULTS), config_file(&a.config)?, flags)?;
    run_search(&s)
}

pub fn harness(a: &HarnessArgs) -> Result<(), CliError> {
    let mut flags = vec![
        ("out", a.out.clone()),
        ("predictors", a.predictors.clone()),
        ("perfect", a.perfect.then(|| "true".to_string())),
        ("trials", a.trials.clone()),
        ("sample-size", a.sample_size.clone()),
        ("pool-size", a.pool_size.clone()),
        ("max-blocks", a.max_blocks.clone()),
        ("epochs", a.epochs.clone()),
        ("filters", a.filters.clone()),
        ("repeats", a.repeats.clone()),
        ("seed", a.seed.clone()),
        ("embed-dim", a.embed_dim.clone()),
        ("hidden", a.hidden.clone()),
    ];
    flags.extend(eval_flags(&a.eval));
    let s = Settings::layered(&defaults(&HARNESS_DEFAULTS), config_file(&a.config)?, flags)?;
    run_harness(&s)
}

pub fn replay(run: &Path, out: &Path) -> Result<(), CliError> {
    let m = Manifest::read(run)?;
    let out = Some(out.to_string_lossy().into_owned());
    match m.command.as_str() {
        "search" => run_search(&Settings::layered(&defaults(&SEARCH_DEFAULTS), Some(m.config), vec![("out", out)])?),
        "harness" => run_harness(&Settings::layered(&defaults(&HARNESS_DEFAULTS), Some(m.config), vec![("out", out)])?),
        other => Err(CliError::Config(format!("cannot replay a {other:?} run"))),
    }
}

pub fn count(max_blocks: usize) -> Result<(), CliError> {
    let size = count_space(max_blocks).map_err(|e| CliError::Config(e.to_string()))?;
    println!("max_blocks {max_blocks}");
    println!("raw {}", size.raw);
    println!("unique {}", size.unique);
    Ok(())
}

pub fn parse_cell(key: &str) -> Result<CellSpec, CliError> {
    match key {
        "pnasnet-5" | "pnasnet5" => Ok(pnasnet5_cell()),
        _ => CellSpec::parse_key(key).map_err(|e| CliError::Config(format!("cell {key:?}: {e}"))),
    }
}

pub fn build(a: &BuildArgs) -> Result<(), CliError> {
    let cell = parse_cell(&a.cell)?;
    let plan = if a.imagenet {
        StackPlan::imagenet(a.repeats, a.filters, a.hw)
    } else {
        StackPlan::cifar(a.repeats, a.filters)
    };
    let net_err = |e: pnas::net::NetError| CliError::Config(e.to_string());
    let graph = build_network(&cell, &plan).map_err(net_err)?;
    let cost = count_costs(&graph).map_err(net_err)?;
    println!("cell {}", cell.key());
    println!("nodes {}", graph.nodes.len());
    println!("params {}", cost.params);
    println!("mult_adds {}", cost.mult_adds);
    if let Some(out) = &a.out {
        let doc = export_graph(&cell, &plan, &graph).map_err(net_err)?;
        fs::write(out, doc + "\n").map_err(|e| CliError::Config(format!("cannot write {}: {e}", out.display())))?;
    }
    Ok(())
}

fn make_evaluator(s: &Settings) -> Result<(Box<dyn Evaluator>, Option<SyntheticOracle>), CliError> {
    let kind = s.raw("evaluator");
    let (kind, table) = match kind.split_once(':') {
        Some(("tabular", path)) => ("tabular", path.to_owned()),
        _ => (kind, s.raw("table").to_owned()),
    };
    match kind {
        "synthetic" => {
            let noise: f64 = s.get("noise")?;
            if !noise.is_finite() || noise < 0.0 {
                return Err(CliError::Config(format!("noise must be a nonnegative number, got {noise}")));
            }
            let oracle = SyntheticOracle::new(SyntheticOracleConfig::with_noise(noise, s.get("oracle-seed")?));
            Ok((Box::new(oracle.clone()), Some(oracle)))
        }
        "tabular" => {
            if table.is_empty() {
                return Err(CliError::Config("the tabular evaluator needs table=PATH".into()));
            }
            let t = TabularEvaluator::from_path(Path::new(&table)).map_err(|e| CliError::Eval(format!("{table}: {e}")))?;
            Ok((Box::new(t), None))
        }
        "external" => {
            let command: Vec<String> = s.raw("worker").split_whitespace().map(str::to_owned).collect();
            if command.is_empty() {
                return Err(CliError::Config("the external evaluator needs worker=COMMAND".into()));
            }
            let workers: usize = s.get("workers")?;
            if workers == 0 {
                return Err(CliError::Config("workers must be at least 1".into()));
            }
            let cfg = ExternalConfig {
                command,
                workers,
                retries: s.get("retries")?,
            };
            Ok((Box::new(ExternalEvaluator::new(cfg)), None))
        }
        other => Err(CliError::Config(format!(
            "unknown evaluator {other:?} (expected synthetic, tabular or external)"
        ))),
    }
}

fn predictor_template(s: &Settings) -> Result<PredictorConfig, CliError> {
    let template = PredictorConfig {
        embed_dim: s.get("embed-dim")?,
        hidden: s.get("hidden")?,
        ..PredictorConfig::mlp(s.get("seed")?)
    };
    if template.embed_dim == 0 || template.hidden == 0 {
        return Err(CliError::Config("embed-dim and hidden must be positive".into()));
    }
    Ok(template)
}

fn io_err(what: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Config(format!("cannot write {}: {e}", what.display()))
}

/// Runs `body` between two manifest writes, so a failed run still leaves a
/// manifest that says why.
fn with_run_dir(
    s: &Settings,
    command: &str,
    seeds: Vec<(String, u64)>,
    body: impl FnOnce(&RunDir, &mut Manifest) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let out = s.raw("out");
    if out.is_empty() {
        return Err(CliError::Config("an output directory is required (--out DIR)".into()));
    }
    let dir = RunDir::claim(Path::new(out))?;
    let mut manifest = Manifest::start(command, s.values().clone());
    manifest.seeds = seeds.into_iter().collect();
    dir.write_manifest(&manifest)?;
    let outcome = body(&dir, &mut manifest);
    manifest.finish(&outcome);
    dir.write_manifest(&manifest)?;
    outcome
}

fn run_search(s: &Settings) -> Result<(), CliError> {
    let strategy = s.raw("strategy").to_owned();
    if strategy != "pnas" && strategy != "random" {
        return Err(CliError::Config(format!("unknown strategy {strategy:?} (expected pnas or random)")));
    }
    let prediction_log = match s.raw("log-predictions") {
        "selected" => PredictionLog::Selected,
        "all" => PredictionLog::All,
        other => return Err(CliError::Config(format!("log-predictions={other:?}: expected selected or all"))),
    };
    let cfg = SearchConfig {
        max_blocks: s.get("max-blocks")?,
        epochs: s.get("epochs")?,
        filters: s.get("filters")?,
        beam: s.get("beam")?,
        repeats: s.get("repeats")?,
        seed: s.get("seed")?,
        examples_per_model: s.get("examples-per-model")?,
        prediction_log,
    };
    cfg.validate()?;
    cfg.plan().validate().map_err(|e| CliError::Config(e.to_string()))?;
    let trials: u64 = s.get("trials")?;
    let count: usize = s.get("count")?;
    if trials == 0 || count == 0 {
        return Err(CliError::Config("trials and count must be at least 1".into()));
    }
    let choice: PredictorChoice = s.get("predictor")?;
    let template = predictor_template(s)?;
    let (evaluator, oracle) = make_evaluator(s)?;
    if strategy == "pnas" && choice == PredictorChoice::Perfect && oracle.is_none() {
        return Err(CliError::Config("the perfect predictor needs the synthetic evaluator".into()));
    }

    // trial t runs with master seed `seed + t`
    let trial_cfgs: Vec<SearchConfig> = (0..trials)
        .map(|t| SearchConfig {
            seed: cfg.seed.wrapping_add(t),
            ..cfg.clone()
        })
        .collect();
    let tag = |t: usize| if trials == 1 { String::new() } else { format!("-{t}") };
    let mut seeds = vec![("master".to_string(), cfg.seed)];
    for (t, c) in trial_cfgs.iter().enumerate() {
        seeds.push((format!("eval{}", tag(t)), c.eval_seed()));
    }

    with_run_dir(s, "search", seeds, |dir, manifest| {
        fs::create_dir_all(dir.file("graphs")).map_err(io_err(&dir.file("graphs")))?;
        let mut traces: Vec<SearchTrace> = Vec::new();
        for (t, tcfg) in trial_cfgs.iter().enumerate() {
            let name = format!("trace{}.jsonl", tag(t));
            manifest.outputs.push(name.clone());
            let path = dir.file(&name);
            let mut sink = JsonlSink::new(BufWriter::new(File::create(&path).map_err(io_err(&path))?));
            let result = if strategy == "random" {
                random_search(count, tcfg, evaluator.as_ref(), &mut sink)
            } else {
                let mut predictor: Box<dyn Predictor> = match choice.build(&template, tcfg.seed) {
                    Some(p) => Box::new(p),
                    None => Box::new(OraclePredictor {
                        oracle: oracle.clone().expect("checked above"),
                        seed: Some(tcfg.eval_seed()),
                    }),
                };
                pnas_search(tcfg, evaluator.as_ref(), predictor.as_mut(), &mut sink)
            };
            sink.flush().map_err(io_err(&path))?;
            traces.push(result?);
        }
        write_outputs(dir, manifest, &trial_cfgs, &traces, &tag)
    })
}

fn write_outputs(
    dir: &RunDir,
    manifest: &mut Manifest,
    cfgs: &[SearchConfig],
    traces: &[SearchTrace],
    tag: &dyn Fn(usize) -> String,
) -> Result<(), CliError> {
    let records: Vec<_> = traces.iter().flat_map(|t| t.records.iter().cloned()).collect();
    let path = dir.file("records.csv");
    write_table(&records, File::create(&path).map_err(io_err(&path))?)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    manifest.outputs.push("records.csv".into());

    let path = dir.file("summary.csv");
    let curves: Vec<_> = traces.iter().map(|t| top_m_curve(&t.accuracies(), &TOP_M)).collect();
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Config(e.to_string()))?;
    let csv_err = |e: csv::Error| CliError::Config(format!("cannot write csv: {e}"));
    w.write_record(["models", "m", "mean", "stderr", "trials"]).map_err(csv_err)?;
    for p in aggregate_curves(&curves) {
        w.write_record([
            p.models.to_string(),
            p.m.to_string(),
            p.mean.to_string(),
            p.stderr.to_string(),
            p.trials.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&path))?;
    manifest.outputs.push("summary.csv".into());

    let path = dir.file("levels.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Config(e.to_string()))?;
    w.write_record([
        "trial",
        "level",
        "raw_candidates",
        "unique_candidates",
        "evaluated",
        "best_cell_key",
        "best_accuracy",
        "best_predicted",
    ])
    .map_err(csv_err)?;
    for (t, (trace, cfg)) in traces.iter().zip(cfgs).enumerate() {
        for l in &trace.levels {
            w.write_record([
                t.to_string(),
                l.level.to_string(),
                l.raw_candidates.to_string(),
                l.unique_candidates.to_string(),
                l.selected.len().to_string(),
                l.best.cell_key.clone(),
                l.best.measured.to_string(),
                l.best.predicted.map(|p| p.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
            println!(
                "trial {t} level {}: raw {} unique {} evaluated {} best {} {}",
                l.level,
                l.raw_candidates,
                l.unique_candidates,
                l.selected.len(),
                l.best.cell_key,
                l.best.measured
            );
            let cell = parse_cell(&l.best.cell_key)?;
            let plan = cfg.plan();
            let doc = build_network(&cell, &plan)
                .and_then(|g| export_graph(&cell, &plan, &g))
                .map_err(|e| CliError::Contract(e.to_string()))?;
            let name = format!("graphs/level-{}{}.json", l.level, tag(t));
            fs::write(dir.file(&name), doc + "\n").map_err(io_err(&dir.file(&name)))?;
            manifest.outputs.push(name);
        }
    }
    w.flush().map_err(io_err(&path))?;
    manifest.outputs.push("levels.csv".into());

    let best = traces
        .iter()
        .filter_map(|t| t.best.clone())
        .min_by(|a, b| b.measured.total_cmp(&a.measured).then_with(|| a.cell_key.cmp(&b.cell_key)))
        .ok_or_else(|| CliError::Contract("search produced no cells".into()))?;
    let models: u64 = traces.iter().map(|t| t.m1 + t.m2).sum();
    let cost: num_bigint::BigUint = traces.iter().map(SearchTrace::cost).sum();
    println!("models {models} cost {cost}");
    println!("best {} {}", best.cell_key, best.measured);
    manifest.result.insert("best_cell_key".into(), best.cell_key);
    manifest.result.insert("best_accuracy".into(), best.measured.to_string());
    manifest.result.insert("models".into(), models.to_string());
    manifest.result.insert("cost".into(), cost.to_string());
    Ok(())
}

fn run_harness(s: &Settings) -> Result<(), CliError> {
    let seed: u64 = s.get("seed")?;
    let predictors = if s.flag("perfect")? {
        vec![PredictorChoice::Perfect]
    } else {
        s.raw("predictors")
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.parse().map_err(CliError::Config))
            .collect::<Result<Vec<_>, _>>()?
    };
    let cfg = HarnessConfig {
        trials: s.get("trials")?,
        sample_size: s.get("sample-size")?,
        pool_size: s.get("pool-size")?,
        max_blocks: s.get("max-blocks")?,
        predictors,
        predictor_template: predictor_template(s)?,
        epochs: s.get("epochs")?,
        plan: StackPlan::cifar(s.get("repeats")?, s.get("filters")?),
        seed,
    };
    cfg.validate()?;
    cfg.plan.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let (evaluator, _) = make_evaluator(s)?;
    let seeds = vec![
        ("master".to_string(), seed),
        ("eval".to_string(), pnas::seed::derive(seed, "eval", 0)),
    ];
    with_run_dir(s, "harness", seeds, |dir, manifest| {
        let report = predictor_harness(&cfg, evaluator.as_ref())?;
        let csv_text = report.to_csv();
        let path = dir.file("correlation.csv");
        fs::write(&path, &csv_text).map_err(io_err(&path))?;
        manifest.outputs.push("correlation.csv".into());

        let path = dir.file("trials.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Config(e.to_string()))?;
        let csv_err = |e: csv::Error| CliError::Config(format!("cannot write csv: {e}"));
        w.write_record(["predictor", "level", "trial", "rho_hat", "rho_tilde"]).map_err(csv_err)?;
        for row in &report.rows {
            for (b, trials) in row.per_trial.iter().enumerate() {
                for (t, (h, tl)) in trials.iter().enumerate() {
                    w.write_record([row.predictor.clone(), (b + 1).to_string(), t.to_string(), h.to_string(), tl.to_string()])
                        .map_err(csv_err)?;
                }
            }
        }
        w.flush().map_err(io_err(&path))?;
        manifest.outputs.push("trials.csv".into());
        print!("{csv_text}");
        Ok(())
    })
}
