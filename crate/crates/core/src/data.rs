//! Dataset container, on-disk format, windowing and chronological splits.
//!
//! A dataset directory holds `meta.json` and `data.bin`. The binary file is
//! the `[T, N, C]` series as little-endian f64 in row-major order.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use pmdm_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TimeIndex;
use crate::temporal::{CalendarIndexer, Timestamp};

pub const META_FILE: &str = "meta.json";
pub const DATA_FILE: &str = "data.bin";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    start: String,
    interval_minutes: u32,
    #[serde(rename = "N")]
    nodes: usize,
    #[serde(rename = "C")]
    channels: usize,
    channel_names: Vec<String>,
    #[serde(rename = "T")]
    steps: usize,
}

/// A regularly sampled `[T, N, C]` series.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSeries {
    data: Tensor,
    start: Timestamp,
    interval_minutes: u32,
    channel_names: Vec<String>,
}

impl TrafficSeries {
    pub fn new(
        data: Tensor,
        start: Timestamp,
        interval_minutes: u32,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 3 || shape.iter().any(|&s| s == 0) {
            return Err(Error::Data(format!(
                "series must be a non-empty [T, N, C] array, got {shape:?}"
            )));
        }
        if channel_names.len() != shape[2] {
            return Err(Error::Data(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                shape[2]
            )));
        }
        if let Some(i) = data.data().iter().position(|v| !v.is_finite()) {
            let (n, c) = (shape[1], shape[2]);
            return Err(Error::Data(format!(
                "non-finite value at step {}, node {}, channel {}",
                i / (n * c),
                (i / c) % n,
                i % c
            )));
        }
        CalendarIndexer::new(interval_minutes)?;
        Ok(Self {
            data,
            start,
            interval_minutes,
            channel_names,
        })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn start(&self) -> Timestamp {
        self.start
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn steps(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn calendar(&self) -> CalendarIndexer {
        CalendarIndexer::new(self.interval_minutes).expect("validated at construction")
    }

    /// Timestamp of step `k`.
    pub fn timestamp(&self, k: usize) -> Timestamp {
        self.start
            .plus_minutes(k as u64 * self.interval_minutes as u64)
    }

    /// Values of one step, `[N * C]`.
    pub fn step(&self, k: usize) -> &[f64] {
        let len = self.nodes() * self.channels();
        &self.data.data()[k * len..(k + 1) * len]
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path)
            .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
        let meta: Meta = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
        let data_path = dir.join(DATA_FILE);
        let bytes = fs::read(&data_path)
            .map_err(|e| Error::Data(format!("{}: {e}", data_path.display())))?;
        let count = meta.steps * meta.nodes * meta.channels;
        if bytes.len() != 8 * count {
            return Err(Error::Data(format!(
                "{} holds {} bytes but T·N·C = {}·{}·{} needs {}",
                data_path.display(),
                bytes.len(),
                meta.steps,
                meta.nodes,
                meta.channels,
                8 * count
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let data = Tensor::new(&[meta.steps, meta.nodes, meta.channels], values)?;
        Self::new(
            data,
            Timestamp::parse(&meta.start)?,
            meta.interval_minutes,
            meta.channel_names,
        )
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let meta = Meta {
            start: self.start.to_string(),
            interval_minutes: self.interval_minutes,
            nodes: self.nodes(),
            channels: self.channels(),
            channel_names: self.channel_names.clone(),
            steps: self.steps(),
        };
        fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
        let mut w = BufWriter::new(fs::File::create(dir.join(DATA_FILE))?);
        for v in self.data.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `timestamp,node_id,channel_id,value` rows (with a header line).
    /// Every (step, node, channel) cell between the first and last timestamp
    /// must appear exactly once.
    pub fn from_csv(
        path: impl AsRef<Path>,
        interval_minutes: u32,
        channel_names: Option<Vec<String>>,
    ) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            timestamp: String,
            node_id: usize,
            channel_id: usize,
            value: f64,
        }
        CalendarIndexer::new(interval_minutes)?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let mut rows = Vec::new();
        for (line, row) in reader.deserialize::<Row>().enumerate() {
            let row = row?;
            let ts = Timestamp::parse(&row.timestamp)
                .map_err(|e| Error::Data(format!("row {}: {e}", line + 1)))?;
            rows.push((ts, row.node_id, row.channel_id, row.value));
        }
        let start = rows
            .iter()
            .map(|r| r.0)
            .min()
            .ok_or_else(|| Error::Data("CSV file has no rows".into()))?;
        let minutes = |t: Timestamp| {
            (t.days - start.days) * 1440 + t.minute_of_day as i64 - start.minute_of_day as i64
        };
        let nodes = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
        let channels = rows.iter().map(|r| r.2).max().unwrap_or(0) + 1;
        let last = rows.iter().map(|r| minutes(r.0)).max().unwrap_or(0);
        if last % interval_minutes as i64 != 0 {
            return Err(Error::Data(format!(
                "timestamps are not on a {interval_minutes}-minute grid"
            )));
        }
        let steps = (last / interval_minutes as i64) as usize + 1;
        let mut values = vec![f64::NAN; steps * nodes * channels];
        let mut seen: HashMap<usize, usize> = HashMap::new();
        for (line, (ts, node, channel, value)) in rows.into_iter().enumerate() {
            let offset = minutes(ts);
            if offset % interval_minutes as i64 != 0 {
                return Err(Error::Data(format!(
                    "row {}: {ts} is off the {interval_minutes}-minute grid",
                    line + 1
                )));
            }
            let k = (offset / interval_minutes as i64) as usize;
            let idx = (k * nodes + node) * channels + channel;
            if let Some(prev) = seen.insert(idx, line + 1) {
                return Err(Error::Data(format!(
                    "rows {prev} and {} both set step {k}, node {node}, channel {channel}",
                    line + 1
                )));
            }
            values[idx] = value;
        }
        if let Some(i) = values.iter().position(|v| v.is_nan()) {
            return Err(Error::Data(format!(
                "no value for step {}, node {}, channel {}",
                i / (nodes * channels),
                (i / channels) % nodes,
                i % channels
            )));
        }
        let names = channel_names
            .unwrap_or_else(|| (0..channels).map(|c| format!("channel{c}")).collect());
        Self::new(
            Tensor::new(&[steps, nodes, channels], values)?,
            start,
            interval_minutes,
            names,
        )
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub nodes: usize,
    pub days: usize,
    pub interval_minutes: u32,
    pub clusters: usize,
    pub channels: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
    pub start: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 8,
            days: 14,
            interval_minutes: 30,
            clusters: 2,
            channels: 1,
            noise: 1.0,
            seed: 0,
            start: "2024-01-01T00:00".into(),
        }
    }
}

/// Node `i` belongs to cluster `i * clusters / nodes`.
pub fn synth_cluster(node: usize, nodes: usize, clusters: usize) -> usize {
    node * clusters / nodes
}

/// Sinusoidal daily profiles with a weekend dip. Nodes in one cluster share
/// level, amplitude, phase and weekend factor up to a small per-node scale.
pub fn synthesize(cfg: &SynthConfig) -> Result<TrafficSeries> {
    if cfg.nodes == 0 || cfg.days == 0 || cfg.channels == 0 {
        return Err(Error::Config("synthetic nodes, days and channels must be positive".into()));
    }
    if cfg.clusters == 0 || cfg.clusters > cfg.nodes {
        return Err(Error::Config(format!(
            "cluster count must be in 1..={}, got {}",
            cfg.nodes, cfg.clusters
        )));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config("noise must be a non-negative number".into()));
    }
    let calendar = CalendarIndexer::new(cfg.interval_minutes)?;
    let start = Timestamp::parse(&cfg.start)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    struct Profile {
        level: f64,
        amplitude: f64,
        phase: f64,
        weekend: f64,
    }
    let profiles: Vec<Profile> = (0..cfg.clusters)
        .map(|_| Profile {
            level: rng.gen_range(50.0..100.0),
            amplitude: rng.gen_range(20.0..40.0),
            phase: rng.gen_range(0.0..1.0),
            weekend: rng.gen_range(0.4..0.8),
        })
        .collect();
    let scales: Vec<f64> = (0..cfg.nodes).map(|_| rng.gen_range(0.95..1.05)).collect();
    let steps = cfg.days * calendar.slots_per_day();
    let mut values = Vec::with_capacity(steps * cfg.nodes * cfg.channels);
    for k in 0..steps {
        let t = start.plus_minutes(k as u64 * cfg.interval_minutes as u64);
        let phi = t.minute_of_day as f64 / 1440.0;
        let weekend = t.weekday() >= 5;
        for (i, scale) in scales.iter().enumerate() {
            let p = &profiles[synth_cluster(i, cfg.nodes, cfg.clusters)];
            for c in 0..cfg.channels {
                let shift = p.phase + 0.1 * c as f64;
                let daily = (TAU * (phi + shift)).sin() + 0.5 * (2.0 * TAU * (phi + shift)).sin();
                let week = if weekend { p.weekend } else { 1.0 };
                let noise: f64 = rng.sample(StandardNormal);
                let v = scale * (1.0 + 0.3 * c as f64) * (p.level + p.amplitude * daily * week);
                values.push(v + cfg.noise * noise);
            }
        }
    }
    let names = (0..cfg.channels).map(|c| format!("channel{c}")).collect();
    TrafficSeries::new(
        Tensor::new(&[steps, cfg.nodes, cfg.channels], values)?,
        start,
        cfg.interval_minutes,
        names,
    )
}

/// Sliding windows: sample `s` uses steps `s..s+n` as input and
/// `s+n..s+n+m` as target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSet {
    pub n: usize,
    pub m: usize,
    pub starts: Vec<usize>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Steps covered by the windows as a half-open range.
    pub fn span(&self) -> Option<(usize, usize)> {
        let lo = *self.starts.iter().min()?;
        let hi = *self.starts.iter().max()?;
        Some((lo, hi + self.n + self.m))
    }
}

pub fn make_windows(series: &TrafficSeries, n: usize, m: usize) -> Result<WindowSet> {
    if n == 0 || m == 0 {
        return Err(Error::Config("window lengths must be positive".into()));
    }
    let t = series.steps();
    if t < n + m {
        return Err(Error::Data(format!(
            "series has {t} steps, fewer than n + m = {}",
            n + m
        )));
    }
    Ok(WindowSet {
        n,
        m,
        starts: (0..=t - n - m).collect(),
    })
}

/// Train/validation/test proportions, e.g. `7/1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 7.0,
            val: 1.0,
            test: 2.0,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let spec = Self { train, val, test };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.train, self.val, self.test]
            .iter()
            .any(|r| !(r.is_finite() && *r > 0.0))
        {
            return Err(Error::Config(format!(
                "split ratios must be positive, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

impl FromStr for SplitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split('/')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("cannot parse split `{s}`")))?;
        match parts[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => Err(Error::Config(format!("split `{s}` needs three parts"))),
        }
    }
}

/// Chronological split. Train and validation sizes are floored; the
/// remainder goes to test.
pub fn split(windows: &WindowSet, spec: &SplitSpec) -> Result<[WindowSet; 3]> {
    spec.validate()?;
    let total = windows.len();
    let sum = spec.train + spec.val + spec.test;
    let n_train = (total as f64 * spec.train / sum).floor() as usize;
    let n_val = (total as f64 * spec.val / sum).floor() as usize;
    let n_test = total - n_train - n_val;
    for (name, size) in [("train", n_train), ("validation", n_val), ("test", n_test)] {
        if size == 0 {
            return Err(Error::Data(format!(
                "{name} split is empty ({total} windows at {}/{}/{})",
                spec.train, spec.val, spec.test
            )));
        }
    }
    let part = |range: std::ops::Range<usize>| WindowSet {
        n: windows.n,
        m: windows.m,
        starts: windows.starts[range].to_vec(),
    };
    Ok([
        part(0..n_train),
        part(n_train..n_train + n_val),
        part(n_train + n_val..total),
    ])
}

/// Raw (unnormalised) input and target arrays for a set of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBatch {
    /// `[B, n, N, C]`.
    pub inputs: Tensor,
    /// `[B, m, N, C]`.
    pub targets: Tensor,
    pub times: TimeIndex,
}

pub fn assemble(series: &TrafficSeries, starts: &[usize], n: usize, m: usize) -> Result<RawBatch> {
    let (nodes, channels) = (series.nodes(), series.channels());
    if let Some(s) = starts.iter().find(|&&s| s + n + m > series.steps()) {
        return Err(Error::Data(format!(
            "window starting at {s} runs past the end of the series"
        )));
    }
    let mut inputs = Vec::with_capacity(starts.len() * n * nodes * channels);
    let mut targets = Vec::with_capacity(starts.len() * m * nodes * channels);
    for &s in starts {
        for k in s..s + n {
            inputs.extend_from_slice(series.step(k));
        }
        for k in s + n..s + n + m {
            targets.extend_from_slice(series.step(k));
        }
    }
    let b = starts.len();
    let stamps: Vec<_> = starts.iter().map(|&s| series.timestamp(s)).collect();
    Ok(RawBatch {
        inputs: Tensor::new(&[b, n, nodes, channels], inputs)?,
        targets: Tensor::new(&[b, m, nodes, channels], targets)?,
        times: TimeIndex::from_starts(&series.calendar(), &stamps, n + m),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(t: usize) -> TrafficSeries {
        let values = (0..t * 2).map(|v| v as f64).collect();
        TrafficSeries::new(
            Tensor::new(&[t, 2, 1], values).unwrap(),
            Timestamp::parse("2024-01-01T00:00").unwrap(),
            30,
            vec!["flow".into()],
        )
        .unwrap()
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&series(5), 3, 2).unwrap().len(), 1);
        let w = make_windows(&series(6), 3, 2).unwrap();
        assert_eq!(w.starts, vec![0, 1]);
        assert!(make_windows(&series(4), 3, 2).is_err());
    }

    #[test]
    fn paper_split_ratios() {
        let w = WindowSet { n: 1, m: 1, starts: (0..10).collect() };
        for (spec, sizes) in [("7/1/2", [7, 1, 2]), ("6/2/2", [6, 2, 2])] {
            let parts = split(&w, &spec.parse().unwrap()).unwrap();
            assert_eq!(parts.each_ref().map(|p| p.len()), sizes);
            let mut all: Vec<usize> = parts.iter().flat_map(|p| p.starts.clone()).collect();
            all.sort_unstable();
            assert_eq!(all, w.starts);
            assert!(parts[0].starts.iter().max() < parts[1].starts.iter().min());
            assert!(parts[1].starts.iter().max() < parts[2].starts.iter().min());
        }
        let tiny = WindowSet { n: 1, m: 1, starts: vec![0, 1, 2] };
        assert!(split(&tiny, &"7/1/2".parse().unwrap()).is_err());
        assert!("7/1".parse::<SplitSpec>().is_err());
        assert!("7/0/2".parse::<SplitSpec>().is_err());
    }

    #[test]
    fn assembled_windows_are_adjacent() {
        let s = series(8);
        let b = assemble(&s, &[1, 3], 3, 2).unwrap();
        assert_eq!(b.inputs.shape(), &[2, 3, 2, 1]);
        assert_eq!(b.inputs.at(&[0, 0, 0, 0]), 2.0);
        assert_eq!(b.targets.at(&[0, 0, 1, 0]), 9.0);
        assert_eq!(b.targets.at(&[1, 1, 1, 0]), 15.0);
        assert!(assemble(&s, &[4], 3, 2).is_err());
    }

    #[test]
    fn synthetic_series_has_the_requested_shape() {
        let cfg = SynthConfig::default();
        let s = synthesize(&cfg).unwrap();
        assert_eq!(s.data().shape(), &[14 * 48, 8, 1]);
        assert_eq!(synthesize(&cfg).unwrap(), s);
        assert!(synthesize(&SynthConfig { clusters: 9, ..cfg }).is_err());
    }

    #[test]
    fn rejects_bad_series() {
        let ts = Timestamp::parse("2024-01-01T00:00").unwrap();
        let nan = Tensor::new(&[1, 1, 1], vec![f64::NAN]).unwrap();
        assert!(TrafficSeries::new(nan, ts, 30, vec!["a".into()]).is_err());
        let ok = Tensor::zeros(&[1, 1, 1]);
        assert!(TrafficSeries::new(ok.clone(), ts, 30, vec![]).is_err());
        assert!(TrafficSeries::new(ok, ts, 7, vec!["a".into()]).is_err());
    }
}
