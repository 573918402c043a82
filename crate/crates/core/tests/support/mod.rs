//! Straight-line loop transcriptions of each layer, written against plain
//! slices so they share no code with the graph implementation.

#![allow(dead_code)]

use pmdm_core::dgc::DgcLayer;
use pmdm_core::dmn::{DmnLayer, OutputMap};
use pmdm_core::dpmgru::{DpmgruCell, Gate};
use pmdm_core::tam::TamParams;
use pmdm_tensor::ParamStore;

pub fn get(store: &ParamStore, name: &str) -> Vec<f64> {
    store
        .get(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .data()
        .to_vec()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `Θ[i][a][o] = Σ_k E[i][k] W[k][a][o]`.
pub fn napl_oracle(e: &[f64], w: &[f64], n: usize, d: usize, fin: usize, fout: usize) -> Vec<f64> {
    let mut theta = vec![0.0; n * fin * fout];
    for i in 0..n {
        for a in 0..fin {
            for o in 0..fout {
                let mut s = 0.0;
                for k in 0..d {
                    s += e[i * d + k] * w[(k * fin + a) * fout + o];
                }
                theta[(i * fin + a) * fout + o] = s;
            }
        }
    }
    theta
}

/// Per-node output transform `out[i] = z[i] Θ_i (+ bias)`.
fn output_oracle(
    store: &ParamStore,
    output: &OutputMap,
    bias: Option<&String>,
    z: &[f64],
    n: usize,
    node_dim: usize,
    fin: usize,
    fout: usize,
) -> Vec<f64> {
    let theta = match output {
        OutputMap::NodeAdaptive(napl) => napl_oracle(
            &get(store, &napl.embedding),
            &get(store, &napl.pool),
            n,
            node_dim,
            fin,
            fout,
        ),
        OutputMap::Shared(name) => {
            let shared = get(store, name);
            (0..n).flat_map(|_| shared.iter().copied()).collect()
        }
    };
    let b = bias.map(|name| get(store, name));
    let mut out = vec![0.0; n * fout];
    for i in 0..n {
        for o in 0..fout {
            let mut s = 0.0;
            for a in 0..fin {
                s += z[i * fin + a] * theta[(i * fin + a) * fout + o];
            }
            if let Some(b) = &b {
                s += b[o];
            }
            out[i * fout + o] = s;
        }
    }
    out
}

/// One sample: `x [N][F_x]`, `t [p]`. Returns the output `[N][F_out]` and the
/// similarity weights `[N][M]`.
pub fn dmn_oracle(store: &ParamStore, layer: &DmnLayer, x: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dm = layer.dims;
    let (n, fx, fout, m, p) = (dm.nodes, dm.input, dm.output, dm.memory_slots, dm.memory_width);
    let memory = get(store, &layer.bank.memory);
    let wq = get(store, &layer.bank.query.weight);
    let bq = get(store, layer.bank.query.bias.as_ref().unwrap());

    let mut pt = vec![0.0; m * p];
    for j in 0..m {
        for k in 0..p {
            pt[j * p + k] = memory[j * p + k] * t[k];
        }
    }
    let width = if dm.project_patterns { fout } else { p };
    let patterns = match &layer.bank.projection {
        Some(name) => {
            let wp = get(store, name);
            let mut out = vec![0.0; m * fout];
            for j in 0..m {
                for o in 0..fout {
                    let mut s = 0.0;
                    for k in 0..p {
                        s += pt[j * p + k] * wp[k * fout + o];
                    }
                    out[j * fout + o] = s;
                }
            }
            out
        }
        None => pt.clone(),
    };

    let fin = width + fx;
    let mut weights = vec![0.0; n * m];
    let mut z = vec![0.0; n * fin];
    for i in 0..n {
        let mut f = vec![0.0; p];
        for k in 0..p {
            let mut s = bq[k];
            for l in 0..fx {
                s += x[i * fx + l] * wq[l * p + k];
            }
            f[k] = s;
        }
        let mut scores = vec![0.0; m];
        for j in 0..m {
            for k in 0..p {
                scores[j] += f[k] * pt[j * p + k];
            }
        }
        let w = softmax(&scores);
        for j in 0..m {
            weights[i * m + j] = w[j];
        }
        for o in 0..width {
            let mut s = 0.0;
            for j in 0..m {
                s += w[j] * patterns[j * width + o];
            }
            z[i * fin + o] = s;
        }
        for l in 0..fx {
            z[i * fin + width + l] = x[i * fx + l];
        }
    }
    let out = output_oracle(store, &layer.output, layer.bias.as_ref(), &z, n, dm.node_dim, fin, fout);
    (out, weights)
}

/// One sample of the graph-convolution gate. Returns output and adjacency.
pub fn dgc_oracle(store: &ParamStore, layer: &DgcLayer, x: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dm = layer.dims;
    let (n, fx, fout, p) = (dm.nodes, dm.input, dm.output, dm.memory_width);
    let wq = get(store, &layer.query.weight);
    let bq = get(store, layer.query.bias.as_ref().unwrap());
    let mut e = vec![0.0; n * p];
    for i in 0..n {
        for k in 0..p {
            let mut s = bq[k];
            for l in 0..fx {
                s += x[i * fx + l] * wq[l * p + k];
            }
            e[i * p + k] = s * t[k];
        }
    }
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..p {
                s += e[i * p + k] * e[j * p + k];
            }
            a[i * n + j] = s.max(0.0);
        }
    }
    let dinv: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = (0..n).map(|j| a[i * n + j]).sum();
            if deg > 0.0 { 1.0 / deg.sqrt() } else { 0.0 }
        })
        .collect();
    let mut prop = vec![0.0; n * fx];
    for i in 0..n {
        for l in 0..fx {
            let mut s = x[i * fx + l];
            for j in 0..n {
                s += dinv[i] * a[i * n + j] * dinv[j] * x[j * fx + l];
            }
            prop[i * fx + l] = s;
        }
    }
    let out = output_oracle(store, &layer.output, layer.bias.as_ref(), &prop, n, dm.node_dim, fx, fout);
    (out, a)
}

fn gate_oracle(store: &ParamStore, gate: &Gate, z: &[f64], t: &[f64]) -> Vec<f64> {
    match gate {
        Gate::Dmn(l) => dmn_oracle(store, l, z, t).0,
        Gate::Dgc(l) => dgc_oracle(store, l, z, t).0,
        Gate::Affine(a) => {
            let w = get(store, &a.weight);
            let b = a.bias.as_ref().map(|n| get(store, n));
            let rows = z.len() / a.input;
            let mut out = vec![0.0; rows * a.output];
            for i in 0..rows {
                for o in 0..a.output {
                    let mut s = b.as_ref().map_or(0.0, |b| b[o]);
                    for l in 0..a.input {
                        s += z[i * a.input + l] * w[l * a.output + o];
                    }
                    out[i * a.output + o] = s;
                }
            }
            out
        }
    }
}

/// One sample of the recurrent step: `x [N][C]`, `h [N][D]`, `t [p]`.
pub fn cell_oracle(store: &ParamStore, cell: &DpmgruCell, x: &[f64], h: &[f64], t: &[f64]) -> Vec<f64> {
    let (n, c, d) = (cell.dims.nodes, cell.dims.input, cell.dims.hidden);
    let mut joint = vec![0.0; n * (c + d)];
    for i in 0..n {
        for l in 0..c {
            joint[i * (c + d) + l] = x[i * c + l];
        }
        for l in 0..d {
            joint[i * (c + d) + c + l] = h[i * d + l];
        }
    }
    let r: Vec<f64> = gate_oracle(store, &cell.reset, &joint, t).into_iter().map(sigmoid).collect();
    let u: Vec<f64> = gate_oracle(store, &cell.update, &joint, t).into_iter().map(sigmoid).collect();
    let mut cand = joint.clone();
    for i in 0..n {
        for l in 0..d {
            cand[i * (c + d) + c + l] = u[i * d + l] * h[i * d + l];
        }
    }
    let hc: Vec<f64> = gate_oracle(store, &cell.candidate, &cand, t).into_iter().map(f64::tanh).collect();
    (0..n * d).map(|k| r[k] * h[k] + (1.0 - r[k]) * hc[k]).collect()
}

/// One sample of transfer attention: `h [N][D]`, `tn [p]`, `tf [m][p]`.
/// Returns the attended states `[m][N][D]` and weights `[m][N][N]`.
pub fn tam_oracle(store: &ParamStore, tam: &TamParams, h: &[f64], tn: &[f64], tf: &[f64], n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let (d, p) = (tam.hidden, tam.time_width);
    let wq = get(store, &tam.query);
    let wk = get(store, &tam.key);
    let wv = get(store, &tam.value);
    let project = |w: &[f64], node: usize, time: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|o| {
                let mut s = 0.0;
                for a in 0..d {
                    s += h[node * d + a] * w[a * d + o];
                }
                for a in 0..p {
                    s += time[a] * w[(d + a) * d + o];
                }
                s
            })
            .collect()
    };
    let keys: Vec<Vec<f64>> = (0..n).map(|j| project(&wk, j, tn)).collect();
    let values: Vec<Vec<f64>> = (0..n).map(|j| project(&wv, j, tn)).collect();
    let mut out = vec![0.0; m * n * d];
    let mut weights = vec![0.0; m * n * n];
    for q in 0..m {
        let time = &tf[q * p..(q + 1) * p];
        for i in 0..n {
            let query = project(&wq, i, time);
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|k| query[k] * keys[j][k]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            for j in 0..n {
                weights[(q * n + i) * n + j] = w[j];
                for k in 0..d {
                    out[(q * n + i) * d + k] += w[j] * values[j][k];
                }
            }
        }
    }
    (out, weights)
}

/// One sample of the fusion: `h [N][D]`, `hta [m][N][D]`.
pub fn fuse_oracle(store: &ParamStore, tam: &TamParams, h: &[f64], hta: &[f64], n: usize, m: usize) -> Vec<f64> {
    let d = tam.hidden;
    let w = get(store, &tam.fusion.weight);
    let b = get(store, tam.fusion.bias.as_ref().unwrap());
    let mut out = vec![0.0; m * n * d];
    for q in 0..m {
        for i in 0..n {
            for o in 0..d {
                let mut s = b[o];
                for a in 0..d {
                    s += h[i * d + a] * w[a * d + o];
                    s += hta[(q * n + i) * d + a] * w[(d + a) * d + o];
                }
                out[(q * n + i) * d + o] = s;
            }
        }
    }
    out
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
