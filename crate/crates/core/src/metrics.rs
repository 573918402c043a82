//! Forecast error metrics: MAE, RMSE, masked MAPE and per-node Pearson
//! correlation, overall and per forecast step.

use std::fmt::{self, Write as _};
use std::path::Path;

use pmdm_tensor::Tensor;
use serde::Serialize;

use crate::error::{Error, Result};

/// Ground-truth entries with magnitude below this are left out of MAPE.
pub const DEFAULT_MAPE_MASK: f64 = 1e-3;

/// Written in place of a metric that has no defined value.
pub const UNDEFINED: &str = "undefined";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pointwise {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when every ground-truth entry is masked.
    pub mape: Option<f64>,
}

fn check_shapes(pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::Config(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Config("cannot score an empty forecast".into()));
    }
    Ok(())
}

/// MAE, RMSE and MAPE over all entries. MAPE divides by the ground truth and
/// skips entries with `|truth| < mask`.
pub fn pointwise_metrics(pred: &Tensor, truth: &Tensor, mask: f64) -> Result<Pointwise> {
    check_shapes(pred, truth)?;
    let (mut abs, mut sq, mut pct, mut kept) = (0.0, 0.0, 0.0, 0usize);
    for (p, t) in pred.data().iter().zip(truth.data()) {
        let e = (p - t).abs();
        abs += e;
        sq += e * e;
        if t.abs() >= mask {
            pct += e / t.abs();
            kept += 1;
        }
    }
    let n = pred.len() as f64;
    Ok(Pointwise {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mape: (kept > 0).then(|| pct / kept as f64),
    })
}

/// Pearson correlation per node, averaged over nodes. The node axis is the
/// second to last; every other axis is flattened into the node's series.
/// Nodes whose prediction or truth has zero variance are skipped; `None` when
/// all are.
pub fn corr(pred: &Tensor, truth: &Tensor) -> Result<Option<f64>> {
    check_shapes(pred, truth)?;
    let shape = pred.shape();
    if shape.len() < 2 {
        return Err(Error::Config("correlation needs a node axis".into()));
    }
    let nodes = shape[shape.len() - 2];
    let channels = shape[shape.len() - 1];
    let points = pred.len() / nodes;
    if points < 2 {
        return Err(Error::Config(format!(
            "correlation needs at least 2 points per node, got {points}"
        )));
    }
    let series = |data: &[f64], node: usize| -> Vec<f64> {
        data.chunks(nodes * channels)
            .flat_map(|step| step[node * channels..(node + 1) * channels].iter().copied())
            .collect()
    };
    let mut total = 0.0;
    let mut counted = 0usize;
    for node in 0..nodes {
        let (p, t) = (series(pred.data(), node), series(truth.data(), node));
        let k = p.len() as f64;
        let (mp, mt) = (p.iter().sum::<f64>() / k, t.iter().sum::<f64>() / k);
        let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
        for (a, b) in p.iter().zip(&t) {
            cov += (a - mp) * (b - mt);
            vp += (a - mp) * (a - mp);
            vt += (b - mt) * (b - mt);
        }
        if vp > 0.0 && vt > 0.0 {
            total += cov / (vp.sqrt() * vt.sqrt());
            counted += 1;
        }
    }
    Ok((counted > 0).then(|| total / counted as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
    pub corr: Option<f64>,
}

impl Metrics {
    pub fn compute(pred: &Tensor, truth: &Tensor, mask: f64) -> Result<Self> {
        let pw = pointwise_metrics(pred, truth, mask)?;
        Ok(Self {
            mae: pw.mae,
            rmse: pw.rmse,
            mape: pw.mape,
            corr: corr(pred, truth)?,
        })
    }
}

/// Overall metrics plus one row per forecast step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub overall: Metrics,
    pub horizons: Vec<Metrics>,
}

/// Copies step `q` out of a `[B, m, ...]` array.
fn horizon_slice(t: &Tensor, q: usize) -> Result<Tensor> {
    let shape = t.shape();
    let (b, m) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut data = Vec::with_capacity(b * inner);
    for s in 0..b {
        let start = (s * m + q) * inner;
        data.extend_from_slice(&t.data()[start..start + inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[1] = 1;
    Ok(Tensor::new(&out_shape, data)?)
}

impl EvalReport {
    /// Scores `[B, m, N, C]` forecasts.
    pub fn compute(pred: &Tensor, truth: &Tensor, mask: f64) -> Result<Self> {
        check_shapes(pred, truth)?;
        if pred.rank() != 4 {
            return Err(Error::Config(format!(
                "forecasts must be [B, m, N, C], got {:?}",
                pred.shape()
            )));
        }
        let horizons = (0..pred.shape()[1])
            .map(|q| Metrics::compute(&horizon_slice(pred, q)?, &horizon_slice(truth, q)?, mask))
            .collect::<Result<_>>()?;
        Ok(Self {
            overall: Metrics::compute(pred, truth, mask)?,
            horizons,
        })
    }

    fn row(label: &str, m: &Metrics) -> [String; 5] {
        let opt = |v: Option<f64>| v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string());
        [
            label.to_string(),
            m.mae.to_string(),
            m.rmse.to_string(),
            opt(m.mape),
            opt(m.corr),
        ]
    }

    fn write_rows<'a>(path: &Path, rows: impl Iterator<Item = (String, &'a Metrics)>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["horizon", "mae", "rmse", "mape", "corr"])?;
        for (label, m) in rows {
            w.write_record(Self::row(&label, m))?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per forecast step, numbered from 1.
    pub fn write_horizon_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        Self::write_rows(
            path.as_ref(),
            self.horizons.iter().enumerate().map(|(q, m)| ((q + 1).to_string(), m)),
        )
    }

    /// A single `overall` row.
    pub fn write_overall_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        Self::write_rows(path.as_ref(), std::iter::once(("overall".to_string(), &self.overall)))
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>, pct: bool| match v {
            Some(x) if pct => format!("{:.2}%", 100.0 * x),
            Some(x) => format!("{x:.4}"),
            None => UNDEFINED.to_string(),
        };
        let mut out = String::new();
        writeln!(out, "{:>8} {:>12} {:>12} {:>10} {:>10}", "horizon", "MAE", "RMSE", "MAPE", "CORR")?;
        let mut line = |label: &str, m: &Metrics| {
            writeln!(
                out,
                "{:>8} {:>12.4} {:>12.4} {:>10} {:>10}",
                label,
                m.mae,
                m.rmse,
                cell(m.mape, true),
                cell(m.corr, false)
            )
        };
        for (q, m) in self.horizons.iter().enumerate() {
            line(&(q + 1).to_string(), m)?;
        }
        line("overall", &self.overall)?;
        f.write_str(&out)
    }
}
