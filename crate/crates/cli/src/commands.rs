use std::fs;
use std::path::{Path, PathBuf};

use pmdm_core::artifact::{export_embeddings, load_checkpoint, save_checkpoint, LoadedModel, CHECKPOINT_FILE, EMBEDDINGS_DIR};
use pmdm_core::bench::{bench_scaling, render_bench_table, write_bench_csv, BenchConfig};
use pmdm_core::data::{make_windows, split, synthesize, SplitSpec, SynthConfig, TrafficSeries, WindowSet};
use pmdm_core::dpmgru::GateKind;
use pmdm_core::flops::{flop_count, FlopDims};
use pmdm_core::metrics::{EvalReport, DEFAULT_MAPE_MASK};
use pmdm_core::model::{ModelConfig, PmDmNet, TimeIndex};
use pmdm_core::training::{forecast_windows, Normalizer, Trainer};
use pmdm_tensor::Tensor;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const HISTORY_FILE: &str = "history.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const EVAL_OVERALL_FILE: &str = "eval_overall.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const PREDICT_FILE: &str = "predict.csv";
pub const RUN_CONFIG_FILE: &str = "run.json";

/// Which windows of the chronological split to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Part {
    Train,
    Val,
    Test,
    All,
}

fn load_series(dir: &Path) -> Result<TrafficSeries> {
    TrafficSeries::load(dir).map_err(|e| CliError::Usage(format!("dataset {}: {e}", dir.display())))
}

fn split_windows(series: &TrafficSeries, n: usize, m: usize, spec: &SplitSpec) -> Result<[WindowSet; 3]> {
    Ok(split(&make_windows(series, n, m)?, spec)?)
}

fn select(parts: [WindowSet; 3], part: Part) -> WindowSet {
    let [train, val, test] = parts;
    match part {
        Part::Train => train,
        Part::Val => val,
        Part::Test => test,
        Part::All => WindowSet {
            n: train.n,
            m: train.m,
            starts: [train.starts, val.starts, test.starts].concat(),
        },
    }
}

fn score(
    model: &PmDmNet,
    loaded: (&pmdm_tensor::ParamStore, &Normalizer),
    series: &TrafficSeries,
    windows: &WindowSet,
    batch_size: usize,
) -> Result<EvalReport> {
    let (store, normalizer) = loaded;
    let (pred, truth) = forecast_windows(model, store, normalizer, series, windows, batch_size)?;
    if !pred.all_finite() {
        return Err(CliError::NonFinite("the model produced non-finite forecasts".into()));
    }
    Ok(EvalReport::compute(&pred, &truth, DEFAULT_MAPE_MASK)?)
}

fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    report.write_horizon_csv(out.join(EVAL_FILE))?;
    report.write_overall_csv(out.join(EVAL_OVERALL_FILE))?;
    Ok(())
}

pub fn train(config: &RunConfig) -> Result<()> {
    let dataset = config.dataset()?;
    let out = config.out()?;
    let series = load_series(dataset)?;
    let model_config = config.model_config(&series)?;
    let train_config = config.train_config()?;
    let [train, val, test] = split_windows(&series, model_config.n, model_config.m, &config.split_spec()?)?;
    let (lo, hi) = train.span().expect("split guarantees a non-empty train set");
    let normalizer = Normalizer::fit(&series, lo, hi)?;

    let model = PmDmNet::new(model_config)?;
    let store = model.init_params(config.seed);
    eprintln!(
        "training {:?} model: {} parameters, {} / {} / {} windows",
        model.config.mode,
        store.scalar_count(),
        train.len(),
        val.len(),
        test.len()
    );
    let batch_size = train_config.batch_size;
    let mut trainer = Trainer::new(&model, store, normalizer, train_config)?;
    let history = trainer.fit(&series, &train, &val)?;
    for r in &history.records {
        eprintln!(
            "epoch {:>4}  train MAE {:>10.4}  val MAE {:>10.4}  val RMSE {:>10.4}{}",
            r.epoch,
            r.train_mae,
            r.val_mae,
            r.val_rmse,
            r.epsilon.map_or_else(String::new, |e| format!("  eps {e:.4}"))
        );
    }

    fs::create_dir_all(out)?;
    fs::write(out.join(RUN_CONFIG_FILE), serde_json::to_string_pretty(config)? + "\n")?;
    history.write_csv(out.join(HISTORY_FILE))?;
    save_checkpoint(out.join(CHECKPOINT_FILE), &model, &trainer.store, &trainer.normalizer)?;
    let report = score(&model, (&trainer.store, &trainer.normalizer), &series, &test, batch_size)?;
    write_report(&report, out)?;
    if let Some(best) = history.best_epoch {
        println!("best validation epoch: {best}");
    }
    println!("test metrics:\n{report}");
    Ok(())
}

fn load_model(checkpoint: &Path) -> Result<LoadedModel> {
    load_checkpoint(checkpoint).map_err(|e| CliError::Usage(format!("checkpoint {}: {e}", checkpoint.display())))
}

/// Checks that a dataset has the shape a checkpoint was trained for.
fn check_compatible(config: &ModelConfig, series: &TrafficSeries) -> Result<()> {
    let pairs = [
        ("N", config.nodes, series.nodes()),
        ("C", config.channels, series.channels()),
        ("interval_minutes", config.interval_minutes as usize, series.interval_minutes() as usize),
    ];
    for (name, model, data) in pairs {
        if model != data {
            return Err(CliError::Usage(format!(
                "checkpoint expects {name} = {model} but the dataset has {name} = {data}"
            )));
        }
    }
    Ok(())
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    pub split: &'a SplitSpec,
    pub part: Part,
    pub batch_size: usize,
    pub out: Option<&'a Path>,
}

pub fn eval(args: &EvalArgs<'_>) -> Result<()> {
    let loaded = load_model(args.checkpoint)?;
    let series = load_series(args.dataset)?;
    check_compatible(&loaded.model.config, &series)?;
    let c = &loaded.model.config;
    let windows = select(split_windows(&series, c.n, c.m, args.split)?, args.part);
    let report = score(&loaded.model, (&loaded.store, &loaded.normalizer), &series, &windows, args.batch_size)?;
    let out = args
        .out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| parent_dir(args.checkpoint));
    fs::create_dir_all(&out)?;
    write_report(&report, &out)?;
    println!("{report}");
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub struct PredictArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    /// First forecast timestamp; defaults to one interval past the data.
    pub at: Option<&'a str>,
    pub out: &'a Path,
}

pub fn predict(args: &PredictArgs<'_>) -> Result<()> {
    let loaded = load_model(args.checkpoint)?;
    let series = load_series(args.dataset)?;
    check_compatible(&loaded.model.config, &series)?;
    let c = &loaded.model.config;
    let first = match args.at {
        None => series.steps(),
        Some(stamp) => {
            let t = pmdm_core::temporal::Timestamp::parse(stamp)?;
            (0..=series.steps())
                .find(|&k| series.timestamp(k) == t)
                .ok_or_else(|| CliError::Usage(format!("{stamp} is not a step of the dataset")))?
        }
    };
    if first < c.n {
        return Err(CliError::Usage(format!(
            "forecasting from step {first} needs {} earlier steps",
            c.n
        )));
    }
    let start = first - c.n;
    let inputs: Vec<f64> = (start..first).flat_map(|k| series.step(k).iter().copied()).collect();
    let inputs = Tensor::new(&[1, c.n, c.nodes, c.channels], inputs).map_err(pmdm_core::Error::from)?;
    let times = TimeIndex::from_starts(&series.calendar(), &[series.timestamp(start)], c.n + c.m);
    let normalized = loaded.normalizer.normalize(&inputs)?;
    let y = loaded.model.predict(&loaded.store, &normalized, &times)?;
    let y = loaded.normalizer.denormalize(&y)?;
    if !y.all_finite() {
        return Err(CliError::NonFinite("the model produced non-finite forecasts".into()));
    }

    fs::create_dir_all(args.out)?;
    let mut w = csv::Writer::from_path(args.out.join(PREDICT_FILE))?;
    w.write_record(["timestamp", "horizon", "node", "channel", "prediction", "truth"])?;
    let names = series.channel_names();
    for q in 0..c.m {
        let k = first + q;
        let stamp = series.timestamp(k).to_string();
        let truth = (k < series.steps()).then(|| series.step(k));
        for node in 0..c.nodes {
            for ch in 0..c.channels {
                let i = node * c.channels + ch;
                w.write_record([
                    stamp.clone(),
                    (q + 1).to_string(),
                    node.to_string(),
                    names[ch].clone(),
                    y.data()[q * c.nodes * c.channels + i].to_string(),
                    truth.map_or_else(String::new, |t| t[i].to_string()),
                ])?;
            }
        }
    }
    w.flush()?;
    println!(
        "wrote {} forecasts starting {} to {}",
        c.m * c.nodes * c.channels,
        series.timestamp(first),
        args.out.join(PREDICT_FILE).display()
    );
    Ok(())
}

pub fn bench(sizes: &[usize], kinds: &[GateKind], config: &BenchConfig, out: Option<&Path>) -> Result<()> {
    let rows = bench_scaling(sizes, kinds, config).map_err(|e| CliError::Usage(e.to_string()))?;
    for &kind in kinds {
        let report = flop_count(kind, sizes[0], &config.dims)?;
        println!(
            "{:?} per-step multiply-adds: {}  (+ {} once per forward pass)",
            kind, report.step_polynomial, report.setup_polynomial
        );
    }
    print!("{}", render_bench_table(&rows));
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_bench_csv(&rows, out.join(BENCH_FILE))?;
    }
    Ok(())
}

pub fn synth(config: &SynthConfig, out: &Path) -> Result<()> {
    let series = synthesize(config)?;
    series.save(out)?;
    println!(
        "wrote {} steps x {} nodes x {} channels to {}",
        series.steps(),
        series.nodes(),
        series.channels(),
        out.display()
    );
    Ok(())
}

pub fn export(checkpoint: &Path, out: &Path) -> Result<()> {
    let loaded = load_model(checkpoint)?;
    let files = export_embeddings(&loaded.store, out.join(EMBEDDINGS_DIR))?;
    for f in &files {
        println!("{}", f.display());
    }
    Ok(())
}

pub fn flop_dims(input: usize, hidden: usize, p: usize, d: usize, memory_slots: usize) -> FlopDims {
    FlopDims {
        input,
        hidden,
        p,
        d,
        memory_slots,
        ..FlopDims::default()
    }
}
