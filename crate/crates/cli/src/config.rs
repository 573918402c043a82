//! The flat run configuration and its command-line overrides.

use std::path::{Path, PathBuf};

use clap::Args;
use pmdm_core::data::{SplitSpec, TrafficSeries};
use pmdm_core::model::{Mode, ModelConfig};
use pmdm_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

/// Everything a training run needs, as one JSON object. `N`, `C` and
/// `interval_minutes` default to the dataset's values; when given they must
/// match it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: String,

    pub mode: Mode,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "N")]
    pub nodes: Option<usize>,
    #[serde(rename = "C")]
    pub channels: Option<usize>,
    #[serde(rename = "D")]
    pub hidden: usize,
    pub p: usize,
    pub d: usize,
    #[serde(rename = "M")]
    pub memory_slots: usize,
    pub interval_minutes: Option<u32>,
    pub no_decoder: bool,
    pub no_tam: bool,
    pub no_dmn: bool,
    pub no_napl: bool,
    pub gate_bias: bool,
    pub project_patterns: bool,
    pub encoder_layers: usize,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub ss_constant: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub target_train_mae: Option<f64>,
    pub fixed_eps: Option<f64>,
    pub restore_best: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mc = ModelConfig::default();
        let tc = TrainConfig::default();
        Self {
            dataset: None,
            out: None,
            split: "7/1/2".into(),
            mode: mc.mode,
            n: mc.n,
            m: mc.m,
            nodes: None,
            channels: None,
            hidden: mc.hidden,
            p: mc.p,
            d: mc.d,
            memory_slots: mc.memory_slots,
            interval_minutes: None,
            no_decoder: mc.no_decoder,
            no_tam: mc.no_tam,
            no_dmn: mc.no_dmn,
            no_napl: mc.no_napl,
            gate_bias: mc.gate_bias,
            project_patterns: mc.project_patterns,
            encoder_layers: mc.encoder_layers,
            lr: tc.lr,
            batch_size: tc.batch_size,
            epochs: tc.epochs,
            patience: tc.patience,
            ss_constant: tc.ss_constant,
            seed: tc.seed,
            grad_clip: tc.grad_clip,
            target_train_mae: tc.target_train_mae,
            fixed_eps: tc.fixed_eps,
            restore_best: tc.restore_best,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies the overrides and validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut map = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                match serde_json::from_str::<Value>(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
                {
                    Value::Object(map) => map,
                    _ => return Err(CliError::Usage(format!("config {} is not a JSON object", p.display()))),
                }
            }
            None => Map::new(),
        };
        overrides.apply(&mut map)?;
        let config: Self = serde_json::from_value(Value::Object(map)).map_err(|e| {
            let origin = path.map_or_else(|| "command line".to_string(), |p| p.display().to_string());
            CliError::Usage(format!("invalid configuration ({origin}): {e}"))
        })?;
        config.split_spec()?;
        Ok(config)
    }

    pub fn dataset(&self) -> Result<&Path> {
        self.dataset.as_deref().ok_or_else(|| {
            CliError::Usage("missing required field `dataset` (set it in the config or pass --dataset)".into())
        })
    }

    pub fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| {
            CliError::Usage("missing required field `out` (set it in the config or pass --out)".into())
        })
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        self.split
            .parse()
            .map_err(|e: pmdm_core::Error| CliError::Usage(format!("field `split`: {e}")))
    }

    /// Model configuration for `series`, checking any dimensions the config
    /// pins against the dataset.
    pub fn model_config(&self, series: &TrafficSeries) -> Result<ModelConfig> {
        let pinned = [
            ("N", self.nodes, series.nodes()),
            ("C", self.channels, series.channels()),
            (
                "interval_minutes",
                self.interval_minutes.map(|v| v as usize),
                series.interval_minutes() as usize,
            ),
        ];
        for (name, want, have) in pinned {
            if let Some(want) = want {
                if want != have {
                    return Err(CliError::Usage(format!(
                        "config sets {name} = {want} but the dataset has {name} = {have}"
                    )));
                }
            }
        }
        let config = ModelConfig {
            mode: self.mode,
            n: self.n,
            m: self.m,
            nodes: series.nodes(),
            channels: series.channels(),
            hidden: self.hidden,
            p: self.p,
            d: self.d,
            memory_slots: self.memory_slots,
            interval_minutes: series.interval_minutes(),
            no_decoder: self.no_decoder,
            no_tam: self.no_tam,
            no_dmn: self.no_dmn,
            no_napl: self.no_napl,
            gate_bias: self.gate_bias,
            project_patterns: self.project_patterns,
            encoder_layers: self.encoder_layers,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let config = TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            ss_constant: self.ss_constant,
            seed: self.seed,
            grad_clip: self.grad_clip,
            target_train_mae: self.target_train_mae,
            fixed_eps: self.fixed_eps,
            restore_best: self.restore_best,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Command-line overrides, one per configuration key. Each flag is spelled
/// exactly like its JSON key; snake_case keys also accept a kebab-case alias.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Dataset directory holding meta.json and data.bin
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Train/validation/test proportions, e.g. 7/1/2
    #[arg(long, value_name = "A/B/C")]
    split: Option<String>,
    /// Decoding mode: parallel or recursive
    #[arg(long, value_name = "MODE")]
    mode: Option<String>,
    /// Input steps
    #[arg(long)]
    n: Option<usize>,
    /// Forecast steps
    #[arg(long)]
    m: Option<usize>,
    /// Node count (must match the dataset)
    #[arg(long = "N", visible_alias = "nodes")]
    nodes: Option<usize>,
    /// Channel count (must match the dataset)
    #[arg(long = "C", visible_alias = "channels")]
    channels: Option<usize>,
    /// Hidden width
    #[arg(long = "D", visible_alias = "hidden")]
    hidden: Option<usize>,
    /// Memory and time-embedding width
    #[arg(long)]
    p: Option<usize>,
    /// Node-embedding width
    #[arg(long)]
    d: Option<usize>,
    /// Memory slots
    #[arg(long = "M", visible_alias = "memory-slots")]
    memory_slots: Option<usize>,
    /// Sampling interval in minutes (must match the dataset)
    #[arg(long = "interval_minutes", visible_alias = "interval-minutes")]
    interval_minutes: Option<u32>,
    /// Replace the decoder by a direct affine map
    #[arg(long = "no_decoder", visible_alias = "no-decoder", num_args = 0..=1, default_missing_value = "true")]
    no_decoder: Option<bool>,
    /// Drop transfer attention (parallel mode only)
    #[arg(long = "no_tam", visible_alias = "no-tam", num_args = 0..=1, default_missing_value = "true")]
    no_tam: Option<bool>,
    /// Use affine gates instead of memory networks
    #[arg(long = "no_dmn", visible_alias = "no-dmn", num_args = 0..=1, default_missing_value = "true")]
    no_dmn: Option<bool>,
    /// Share one output transform across nodes
    #[arg(long = "no_napl", visible_alias = "no-napl", num_args = 0..=1, default_missing_value = "true")]
    no_napl: Option<bool>,
    /// Give every gate a bias
    #[arg(long = "gate_bias", visible_alias = "gate-bias", value_name = "BOOL")]
    gate_bias: Option<bool>,
    /// Project memory patterns to the output width before the read-out
    #[arg(long = "project_patterns", visible_alias = "project-patterns", value_name = "BOOL")]
    project_patterns: Option<bool>,
    /// Stacked encoder cells
    #[arg(long = "encoder_layers", visible_alias = "encoder-layers")]
    encoder_layers: Option<usize>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Windows per optimiser step
    #[arg(long = "batch_size", visible_alias = "batch-size")]
    batch_size: Option<usize>,
    /// Maximum epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs without validation improvement before stopping
    #[arg(long)]
    patience: Option<usize>,
    /// Decay constant of the sampling schedule
    #[arg(long = "ss_constant", visible_alias = "ss-constant")]
    ss_constant: Option<f64>,
    /// Random seed for initialisation, shuffling and sampling
    #[arg(long)]
    seed: Option<u64>,
    /// Clip the global gradient norm
    #[arg(long = "grad_clip", visible_alias = "grad-clip")]
    grad_clip: Option<f64>,
    /// Stop once the inference-mode training MAE reaches this value
    #[arg(long = "target_train_mae", visible_alias = "target-train-mae")]
    target_train_mae: Option<f64>,
    /// Fixed sampling probability for recursive training
    #[arg(long = "fixed_eps", visible_alias = "fixed-eps")]
    fixed_eps: Option<f64>,
    /// Restore the best validation epoch at the end
    #[arg(long = "restore_best", visible_alias = "restore-best", value_name = "BOOL")]
    restore_best: Option<bool>,
}

impl Overrides {
    fn apply(&self, map: &mut Map<String, Value>) -> Result<()> {
        let mut set = |key: &str, value: Option<Value>| {
            if let Some(v) = value {
                map.insert(key.to_string(), v);
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::String(p.display().to_string()));
        set("dataset", path(&self.dataset));
        set("out", path(&self.out));
        set("split", self.split.clone().map(Value::from));
        set("mode", self.mode.clone().map(Value::from));
        set("n", self.n.map(Value::from));
        set("m", self.m.map(Value::from));
        set("N", self.nodes.map(Value::from));
        set("C", self.channels.map(Value::from));
        set("D", self.hidden.map(Value::from));
        set("p", self.p.map(Value::from));
        set("d", self.d.map(Value::from));
        set("M", self.memory_slots.map(Value::from));
        set("interval_minutes", self.interval_minutes.map(Value::from));
        set("no_decoder", self.no_decoder.map(Value::from));
        set("no_tam", self.no_tam.map(Value::from));
        set("no_dmn", self.no_dmn.map(Value::from));
        set("no_napl", self.no_napl.map(Value::from));
        set("gate_bias", self.gate_bias.map(Value::from));
        set("project_patterns", self.project_patterns.map(Value::from));
        set("encoder_layers", self.encoder_layers.map(Value::from));
        set("lr", float(self.lr, "lr")?);
        set("batch_size", self.batch_size.map(Value::from));
        set("epochs", self.epochs.map(Value::from));
        set("patience", self.patience.map(Value::from));
        set("ss_constant", float(self.ss_constant, "ss_constant")?);
        set("seed", self.seed.map(Value::from));
        set("grad_clip", float(self.grad_clip, "grad_clip")?);
        set("target_train_mae", float(self.target_train_mae, "target_train_mae")?);
        set("fixed_eps", float(self.fixed_eps, "fixed_eps")?);
        set("restore_best", self.restore_best.map(Value::from));
        Ok(())
    }
}

fn float(v: Option<f64>, key: &str) -> Result<Option<Value>> {
    v.map(|x| {
        serde_json::Number::from_f64(x)
            .map(Value::Number)
            .ok_or_else(|| CliError::Usage(format!("--{key} must be a finite number")))
    })
    .transpose()
}
