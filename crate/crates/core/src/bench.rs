//! Scaling benchmark: timed forward and backward passes of one recurrent step
//! with memory-network or graph-convolution gates, next to the exact tally.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use pmdm_tensor::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bind::Binder;
use crate::dpmgru::{cell_step, CellDims, DpmgruCell, GateKind};
use crate::error::{Error, Result};
use crate::flops::{flop_count, FlopDims};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub nodes: usize,
    pub kind: GateKind,
    pub flops: u128,
    /// `None` when timing was skipped.
    pub median_seconds: Option<f64>,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub dims: FlopDims,
    pub trials: usize,
    pub flops_only: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dims: FlopDims::default(),
            trials: 5,
            flops_only: false,
            seed: 0,
        }
    }
}

fn gate_name(kind: GateKind) -> &'static str {
    match kind {
        GateKind::Dmn => "dmn",
        GateKind::Dgc => "dgc",
        GateKind::Affine => "affine",
    }
}

/// Seconds for one forward and backward pass of a cell step on random data.
fn time_step(kind: GateKind, nodes: usize, dims: &FlopDims, seed: u64) -> Result<f64> {
    let cell = DpmgruCell::new(
        "bench",
        CellDims {
            nodes,
            input: dims.input,
            hidden: dims.hidden,
            memory_slots: dims.memory_slots,
            memory_width: dims.p,
            node_dim: dims.d,
            project_patterns: dims.project_patterns,
        },
        kind,
        true,
        true,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    cell.init(&mut store, &mut rng);
    let x = Tensor::uniform(&[1, nodes, dims.input], 1.0, &mut rng);
    let h = Tensor::uniform(&[1, nodes, dims.hidden], 1.0, &mut rng);
    let t = Tensor::uniform(&[1, dims.p], 1.0, &mut rng);
    let start = Instant::now();
    let graph = Graph::new();
    let binder = Binder::new(&graph, &store);
    let bound = cell.bind(&binder)?;
    let out = cell_step(graph.constant(x), graph.constant(h), graph.constant(t), &bound)?;
    graph.backward(out.sum())?;
    Ok(start.elapsed().as_secs_f64())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// One row per (size, kind) pair, sizes outermost. Trials run sequentially.
pub fn bench_scaling(sizes: &[usize], kinds: &[GateKind], config: &BenchConfig) -> Result<Vec<BenchRow>> {
    if sizes.len() < 2 {
        return Err(Error::Config(format!(
            "benchmark needs at least 2 sizes, got {}",
            sizes.len()
        )));
    }
    if kinds.is_empty() {
        return Err(Error::Config("benchmark needs at least one gate kind".into()));
    }
    if !config.flops_only && config.trials == 0 {
        return Err(Error::Config("benchmark needs at least one trial".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len() * kinds.len());
    for &nodes in sizes {
        for &kind in kinds {
            let flops = flop_count(kind, nodes, &config.dims)?.per_step;
            let (median_seconds, trials) = if config.flops_only {
                (None, 0)
            } else {
                let times = (0..config.trials)
                    .map(|i| time_step(kind, nodes, &config.dims, config.seed + i as u64))
                    .collect::<Result<Vec<_>>>()?;
                (Some(median(times)), config.trials)
            };
            rows.push(BenchRow {
                nodes,
                kind,
                flops,
                median_seconds,
                trials,
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["N", "kind", "flops", "median_seconds", "trials"])?;
    for r in rows {
        w.write_record([
            r.nodes.to_string(),
            gate_name(r.kind).to_string(),
            r.flops.to_string(),
            r.median_seconds.map_or_else(|| "NA".to_string(), |s| format!("{s:.6}")),
            r.trials.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn render_bench_table(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>8} {:>6} {:>16} {:>14} {:>7}", "N", "kind", "flops", "median_s", "trials");
    for r in rows {
        let secs = r.median_seconds.map_or_else(|| "-".to_string(), |s| format!("{s:.6}"));
        let _ = writeln!(
            out,
            "{:>8} {:>6} {:>16} {:>14} {:>7}",
            r.nodes,
            gate_name(r.kind),
            r.flops,
            secs,
            r.trials
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_count_and_flop_consistency() {
        let cfg = BenchConfig {
            dims: FlopDims { hidden: 4, p: 3, d: 2, memory_slots: 2, ..FlopDims::default() },
            trials: 3,
            ..BenchConfig::default()
        };
        let rows = bench_scaling(&[4, 8, 16], &[GateKind::Dmn, GateKind::Dgc], &cfg).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            assert_eq!(r.flops, flop_count(r.kind, r.nodes, &cfg.dims).unwrap().per_step);
            assert!(r.median_seconds.unwrap() > 0.0);
            assert_eq!(r.trials, 3);
        }
        assert!(bench_scaling(&[4], &[GateKind::Dmn], &cfg).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
