//! The full forecaster: time embedding, recurrent encoder, and either a
//! parallel decoder fed by transfer attention or a recursive decoder that
//! feeds its own predictions back.

use std::path::Path;

use pmdm_tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bind::Binder;
use crate::dmn::Affine;
use crate::dpmgru::{cell_step, encode, CellDims, DpmgruCell, GateKind};
use crate::error::{Error, Result, StageExt};
use crate::tam::{fuse, transfer_attention, TamParams};
use crate::temporal::{CalendarIndexer, TimeEmbeddingPools, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Parallel,
    Recursive,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Mode::Parallel),
            "recursive" => Ok(Mode::Recursive),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected parallel or recursive)"
            ))),
        }
    }
}

/// Architecture and dimensions. Serialises to the JSON stored next to a
/// checkpoint; single-letter dimension names keep their case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Input steps.
    pub n: usize,
    /// Forecast steps.
    pub m: usize,
    #[serde(rename = "N")]
    pub nodes: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "D")]
    pub hidden: usize,
    /// Time-embedding and memory width.
    pub p: usize,
    /// Node-embedding width.
    pub d: usize,
    #[serde(rename = "M")]
    pub memory_slots: usize,
    pub interval_minutes: u32,
    pub no_decoder: bool,
    pub no_tam: bool,
    pub no_dmn: bool,
    pub no_napl: bool,
    pub gate_bias: bool,
    /// Project memory rows to the hidden width before the read-out.
    pub project_patterns: bool,
    pub encoder_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Parallel,
            n: 12,
            m: 12,
            nodes: 1,
            channels: 1,
            hidden: 64,
            p: 20,
            d: 10,
            memory_slots: 10,
            interval_minutes: 5,
            no_decoder: false,
            no_tam: false,
            no_dmn: false,
            no_napl: false,
            gate_bias: true,
            project_patterns: true,
            encoder_layers: 1,
        }
    }
}

/// Which of the ablations, if any, a configuration selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoDecoder,
    NoTam,
    NoDmn,
    NoNapl,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n", self.n),
            ("m", self.m),
            ("N", self.nodes),
            ("C", self.channels),
            ("D", self.hidden),
            ("p", self.p),
            ("d", self.d),
            ("M", self.memory_slots),
            ("encoder_layers", self.encoder_layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        CalendarIndexer::new(self.interval_minutes)?;
        let flags = [
            ("no_decoder", self.no_decoder),
            ("no_tam", self.no_tam),
            ("no_dmn", self.no_dmn),
            ("no_napl", self.no_napl),
        ];
        let set: Vec<&str> = flags.iter().filter(|f| f.1).map(|f| f.0).collect();
        if set.len() > 1 {
            return Err(Error::Config(format!(
                "ablation flags are mutually exclusive, got {}",
                set.join(" and ")
            )));
        }
        if self.no_tam && self.mode != Mode::Parallel {
            return Err(Error::Config(
                "no_tam requires parallel mode; transfer attention only exists there".into(),
            ));
        }
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        match (self.no_decoder, self.no_tam, self.no_dmn, self.no_napl) {
            (true, ..) => Variant::NoDecoder,
            (_, true, ..) => Variant::NoTam,
            (_, _, true, _) => Variant::NoDmn,
            (.., true) => Variant::NoNapl,
            _ => Variant::Full,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Calendar indices for every sample in a batch: `n + m` steps per sample,
/// stored sample-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeIndex {
    pub batch: usize,
    pub steps: usize,
    pub day: Vec<usize>,
    pub week: Vec<usize>,
}

impl TimeIndex {
    /// Indices for windows starting at the given timestamps.
    pub fn from_starts(calendar: &CalendarIndexer, starts: &[Timestamp], steps: usize) -> Self {
        let mut day = Vec::with_capacity(starts.len() * steps);
        let mut week = Vec::with_capacity(starts.len() * steps);
        for s in starts {
            for k in 0..steps {
                let t = s.plus_minutes(k as u64 * calendar.interval_minutes() as u64);
                day.push(calendar.day_index(t));
                week.push(calendar.week_index(t));
            }
        }
        Self {
            batch: starts.len(),
            steps,
            day,
            week,
        }
    }

    fn column(&self, step: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.batch)
            .map(|b| {
                let k = b * self.steps + step;
                (self.day[k], self.week[k])
            })
            .unzip()
    }

    /// Steps `from..to` of every sample, sample-major.
    fn range(&self, from: usize, to: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.batch)
            .flat_map(|b| (from..to).map(move |q| b * self.steps + q))
            .map(|k| (self.day[k], self.week[k]))
            .unzip()
    }
}

/// Where a recursive decoder step took its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderInput {
    /// The initial zero tensor.
    Zeros,
    /// Ground truth of the previous step.
    Truth,
    /// The decoder's own previous prediction.
    Prediction,
}

/// Ground truth for scheduled sampling. `use_truth[q]` decides what step
/// `q + 1` consumes after step `q` has been predicted.
#[derive(Debug, Clone)]
pub struct Teacher<'a> {
    /// `[B, m, N, C]`, in the model's normalised space.
    pub targets: &'a Tensor,
    pub use_truth: Vec<bool>,
}

impl<'a> Teacher<'a> {
    /// Draws one `μ ~ U(0, 1)` per decoder step and takes ground truth when `μ < ε`.
    pub fn sample<R: Rng + ?Sized>(targets: &'a Tensor, m: usize, eps: f64, rng: &mut R) -> Self {
        let use_truth = (0..m).map(|_| rng.gen::<f64>() < eps).collect();
        Self { targets, use_truth }
    }
}

#[derive(Debug, Clone)]
pub struct Forecast<'g> {
    /// `[B, m, N, C]`, normalised.
    pub prediction: Var<'g>,
    /// Input source of each recursive decoder step; empty for other decoders.
    pub decoder_inputs: Vec<DecoderInput>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PmDmNet {
    pub config: ModelConfig,
    pub calendar: CalendarIndexer,
    pub time: TimeEmbeddingPools,
    pub encoder: Vec<DpmgruCell>,
    pub decoder: Option<DpmgruCell>,
    pub tam: Option<TamParams>,
    /// Shared `D → C` head applied after each decoder step.
    pub head: Option<Affine>,
    /// `D → m·C` map used when the decoder is removed.
    pub direct: Option<Affine>,
}

impl PmDmNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let calendar = CalendarIndexer::new(config.interval_minutes)?;
        let time = TimeEmbeddingPools::new("time", calendar.slots_per_day(), config.p);
        let kind = if config.no_dmn { GateKind::Affine } else { GateKind::Dmn };
        let node_adaptive = !config.no_napl;
        let dims = |input| CellDims {
            nodes: config.nodes,
            input,
            hidden: config.hidden,
            memory_slots: config.memory_slots,
            memory_width: config.p,
            node_dim: config.d,
            project_patterns: config.project_patterns,
        };
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                let input = if l == 0 { config.channels } else { config.hidden };
                DpmgruCell::new(&format!("enc{l}"), dims(input), kind, node_adaptive, config.gate_bias)
            })
            .collect();
        let with_decoder = !config.no_decoder;
        let decoder = with_decoder.then(|| {
            DpmgruCell::new("dec", dims(config.channels), kind, node_adaptive, config.gate_bias)
        });
        let tam = (with_decoder && config.mode == Mode::Parallel && !config.no_tam)
            .then(|| TamParams::new("tam", config.hidden, config.p));
        let head = with_decoder.then(|| Affine::new("head", config.hidden, config.channels, true));
        let direct = config.no_decoder.then(|| {
            Affine::new("direct", config.hidden, config.m * config.channels, true)
        });
        Ok(Self {
            config,
            calendar,
            time,
            encoder,
            decoder,
            tam,
            head,
            direct,
        })
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        self.init_with(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    pub fn init_with<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.time.init(store, rng);
        for cell in &self.encoder {
            cell.init(store, rng);
        }
        if let Some(dec) = &self.decoder {
            dec.init(store, rng);
        }
        if let Some(tam) = &self.tam {
            tam.init(store, rng);
        }
        if let Some(head) = &self.head {
            head.init(store, rng);
        }
        if let Some(direct) = &self.direct {
            direct.init(store, rng);
        }
    }

    fn check_inputs(&self, x: &Tensor, times: &TimeIndex) -> Result<usize> {
        let c = &self.config;
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != c.n || xs[2] != c.nodes || xs[3] != c.channels {
            return Err(Error::Config(format!(
                "model input must be [B, {}, {}, {}], got {xs:?}",
                c.n, c.nodes, c.channels
            )));
        }
        if times.batch != xs[0] || times.steps != c.n + c.m {
            return Err(Error::Config(format!(
                "time index covers {} samples of {} steps, expected {} of {}",
                times.batch,
                times.steps,
                xs[0],
                c.n + c.m
            )));
        }
        Ok(xs[0])
    }

    /// Runs the encoder and returns the top-layer final state `[B, N, D]`.
    fn encode<'g>(&self, binder: &Binder<'g, '_>, x: &Tensor, times: &TimeIndex) -> Result<Var<'g>> {
        let c = &self.config;
        let b = x.shape()[0];
        let step_len = c.nodes * c.channels;
        let mut inputs = Vec::with_capacity(c.n);
        let mut embeds = Vec::with_capacity(c.n);
        for i in 0..c.n {
            let mut slice = Vec::with_capacity(b * step_len);
            for s in 0..b {
                let start = (s * c.n + i) * step_len;
                slice.extend_from_slice(&x.data()[start..start + step_len]);
            }
            inputs.push(binder.constant(Tensor::new(&[b, c.nodes, c.channels], slice)?));
            let (day, week) = times.column(i);
            embeds.push(self.time.lookup(binder, &day, &week)?);
        }
        let cells = self
            .encoder
            .iter()
            .map(|cell| cell.bind(binder))
            .collect::<Result<Vec<_>>>()?;
        let h0: Vec<_> = cells
            .iter()
            .map(|_| binder.constant(Tensor::zeros(&[b, c.nodes, c.hidden])))
            .collect();
        Ok(encode(&inputs, &embeds, &h0, &cells)?.last())
    }

    fn head<'g>(&self, binder: &Binder<'g, '_>) -> Result<crate::dmn::BoundAffine<'g>> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::Config("model has no output head".into()))?
            .bind(binder)
    }

    /// Forecast in whichever mode and variant the configuration selects.
    /// `teacher` is only consulted by the recursive decoder.
    pub fn forward<'g>(
        &self,
        binder: &Binder<'g, '_>,
        x: &Tensor,
        times: &TimeIndex,
        teacher: Option<&Teacher<'_>>,
    ) -> Result<Forecast<'g>> {
        if self.config.no_decoder {
            return self.forward_ablation(binder, x, times);
        }
        match self.config.mode {
            Mode::Parallel => self.forward_parallel(binder, x, times),
            Mode::Recursive => self.forward_recursive(binder, x, times, teacher),
        }
    }

    /// All `m` steps decoded independently from transfer-attention states.
    pub fn forward_parallel<'g>(
        &self,
        binder: &Binder<'g, '_>,
        x: &Tensor,
        times: &TimeIndex,
    ) -> Result<Forecast<'g>> {
        let c = &self.config;
        if c.mode != Mode::Parallel || c.no_decoder {
            return Err(Error::Config("parallel decoding requires a parallel model with a decoder".into()));
        }
        let b = self.check_inputs(x, times)?;
        let h_n = self.encode(binder, x, times)?;
        let (fday, fweek) = times.range(c.n, c.n + c.m);
        let future = self.time.lookup(binder, &fday, &fweek)?;
        let states = match &self.tam {
            Some(tam) => {
                let tam = tam.bind(binder)?;
                let (lday, lweek) = times.column(c.n - 1);
                let t_n = self.time.lookup(binder, &lday, &lweek)?;
                let t_f = future.reshape(&[b, c.m, c.p]).stage("future embeddings")?;
                let attended = transfer_attention(h_n, t_n, t_f, &tam)?;
                fuse(h_n, attended.output, &tam)?
            }
            None => h_n
                .reshape(&[b, 1, c.nodes, c.hidden])
                .and_then(|h| h.expand(&[b, c.m, c.nodes, c.hidden]))
                .stage("decoder states")?,
        };
        let states = states
            .reshape(&[b * c.m, c.nodes, c.hidden])
            .stage("decoder states")?;
        let decoder = self.decoder.as_ref().expect("checked above").bind(binder)?;
        let zeros = binder.constant(Tensor::zeros(&[b * c.m, c.nodes, c.channels]));
        let h = cell_step(zeros, states, future, &decoder)?;
        let y = self.head(binder)?.apply(h, "output head")?;
        let prediction = y
            .reshape(&[b, c.m, c.nodes, c.channels])
            .stage("output head")?;
        Ok(Forecast {
            prediction,
            decoder_inputs: Vec::new(),
        })
    }

    /// Step-by-step decoding from `H_n`, feeding back predictions or, with a
    /// teacher, ground truth where the teacher says so.
    pub fn forward_recursive<'g>(
        &self,
        binder: &Binder<'g, '_>,
        x: &Tensor,
        times: &TimeIndex,
        teacher: Option<&Teacher<'_>>,
    ) -> Result<Forecast<'g>> {
        let c = &self.config;
        if c.mode != Mode::Recursive || c.no_decoder {
            return Err(Error::Config("recursive decoding requires a recursive model with a decoder".into()));
        }
        let b = self.check_inputs(x, times)?;
        if let Some(t) = teacher {
            let want = [b, c.m, c.nodes, c.channels];
            if t.targets.shape() != want {
                return Err(Error::Config(format!(
                    "teacher targets must be {want:?}, got {:?}",
                    t.targets.shape()
                )));
            }
            if t.use_truth.len() != c.m {
                return Err(Error::Config(format!(
                    "teacher has {} sampling decisions for {} steps",
                    t.use_truth.len(),
                    c.m
                )));
            }
        }
        let mut h = self.encode(binder, x, times)?;
        let decoder = self.decoder.as_ref().expect("checked above").bind(binder)?;
        let head = self.head(binder)?;
        let step_len = c.nodes * c.channels;
        let mut input = binder.constant(Tensor::zeros(&[b, c.nodes, c.channels]));
        let mut sources = Vec::with_capacity(c.m);
        let mut source = DecoderInput::Zeros;
        let mut outputs = Vec::with_capacity(c.m);
        for q in 0..c.m {
            sources.push(source);
            let (day, week) = times.column(c.n + q);
            let t = self.time.lookup(binder, &day, &week)?;
            h = cell_step(input, h, t, &decoder)?;
            let y = head.apply(h, "output head")?;
            outputs.push(y);
            match teacher {
                Some(tch) if tch.use_truth[q] => {
                    let mut slice = Vec::with_capacity(b * step_len);
                    for s in 0..b {
                        let start = (s * c.m + q) * step_len;
                        slice.extend_from_slice(&tch.targets.data()[start..start + step_len]);
                    }
                    input = binder.constant(Tensor::new(&[b, c.nodes, c.channels], slice)?);
                    source = DecoderInput::Truth;
                }
                _ => {
                    input = y;
                    source = DecoderInput::Prediction;
                }
            }
        }
        let prediction = binder.graph().stack(&outputs, 1).stage("forecast assembly")?;
        Ok(Forecast {
            prediction,
            decoder_inputs: sources,
        })
    }

    /// The decoder-free variant: one affine map from `H_n` to all `m` steps.
    pub fn forward_ablation<'g>(
        &self,
        binder: &Binder<'g, '_>,
        x: &Tensor,
        times: &TimeIndex,
    ) -> Result<Forecast<'g>> {
        let c = &self.config;
        let direct = self
            .direct
            .as_ref()
            .ok_or_else(|| Error::Config("direct forecasting requires no_decoder".into()))?;
        let b = self.check_inputs(x, times)?;
        let h_n = self.encode(binder, x, times)?;
        let prediction = direct
            .bind(binder)?
            .apply(h_n, "direct head")?
            .reshape(&[b, c.nodes, c.m, c.channels])
            .and_then(|y| y.permute(&[0, 2, 1, 3]))
            .stage("direct head")?;
        Ok(Forecast {
            prediction,
            decoder_inputs: Vec::new(),
        })
    }

    /// Inference without recording gradients. Returns `[B, m, N, C]`.
    pub fn predict(&self, store: &ParamStore, x: &Tensor, times: &TimeIndex) -> Result<Tensor> {
        let graph = Graph::new();
        let binder = Binder::frozen(&graph, store);
        Ok(self.forward(&binder, x, times, None)?.prediction.value())
    }
}
