//! Transfer attention: turns the encoder's last state into one hidden state
//! per forecast step, keyed by the future time embeddings.
//!
//! Queries combine `H_n` with each future embedding `T_{n+q}`; keys and values
//! combine `H_n` with the last observed embedding `T_n`. Each query at node `i`
//! attends over all nodes, then a linear fusion mixes the attended state back
//! with `H_n`.

use pmdm_tensor::{fan_in_bound, ParamStore, Tensor, Var};
use rand::Rng;

use crate::bind::Binder;
use crate::dmn::{Affine, BoundAffine};
use crate::error::{Error, Result, StageExt};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TamParams {
    pub hidden: usize,
    pub time_width: usize,
    pub query: String,
    pub key: String,
    pub value: String,
    pub fusion: Affine,
}

impl TamParams {
    pub fn new(prefix: &str, hidden: usize, time_width: usize) -> Self {
        Self {
            hidden,
            time_width,
            query: format!("{prefix}.wq"),
            key: format!("{prefix}.wk"),
            value: format!("{prefix}.wv"),
            fusion: Affine::new(&format!("{prefix}.fuse"), 2 * hidden, hidden, true),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let fin = self.hidden + self.time_width;
        for name in [&self.query, &self.key, &self.value] {
            store.insert(
                name.clone(),
                Tensor::uniform(&[fin, self.hidden], fan_in_bound(fin), rng),
            );
        }
        self.fusion.init(store, rng);
    }

    pub fn bind<'g>(&self, binder: &Binder<'g, '_>) -> Result<BoundTam<'g>> {
        Ok(BoundTam {
            hidden: self.hidden,
            time_width: self.time_width,
            query: binder.get(&self.query)?,
            key: binder.get(&self.key)?,
            value: binder.get(&self.value)?,
            fusion: self.fusion.bind(binder)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundTam<'g> {
    pub hidden: usize,
    pub time_width: usize,
    pub query: Var<'g>,
    pub key: Var<'g>,
    pub value: Var<'g>,
    pub fusion: BoundAffine<'g>,
}

#[derive(Debug, Clone, Copy)]
pub struct Attention<'g> {
    /// `[B, m, N, D]`.
    pub output: Var<'g>,
    /// `[B, m, N, N]`; row `[b, q, i]` is node `i`'s distribution over key nodes.
    pub weights: Var<'g>,
}

/// `h_n [B, N, D]`, `t_n [B, p]`, `t_future [B, m, p]`.
pub fn transfer_attention<'g>(
    h_n: Var<'g>,
    t_n: Var<'g>,
    t_future: Var<'g>,
    tam: &BoundTam<'g>,
) -> Result<Attention<'g>> {
    let (hs, ts, fs) = (h_n.shape(), t_n.shape(), t_future.shape());
    let (dh, p) = (tam.hidden, tam.time_width);
    if hs.len() != 3 || hs[2] != dh {
        return Err(Error::Config(format!(
            "transfer attention state must be [B, N, {dh}], got {hs:?}"
        )));
    }
    let (b, n) = (hs[0], hs[1]);
    if ts != [b, p] || fs.len() != 3 || fs[0] != b || fs[2] != p || fs[1] == 0 {
        return Err(Error::Config(format!(
            "transfer attention embeddings must be [{b}, {p}] and [{b}, m, {p}], got {ts:?} and {fs:?}"
        )));
    }
    let m = fs[1];
    let graph = h_n.graph();

    let h_rep = h_n
        .reshape(&[b, 1, n, dh])
        .and_then(|h| h.expand(&[b, m, n, dh]))
        .stage("query input")?;
    let f_rep = t_future
        .reshape(&[b, m, 1, p])
        .and_then(|t| t.expand(&[b, m, n, p]))
        .stage("query input")?;
    let q = graph
        .concat(&[h_rep, f_rep], 3)
        .and_then(|z| z.matmul(tam.query))
        .and_then(|q| q.reshape(&[b, m * n, dh]))
        .stage("query projection")?;

    let t_rep = t_n
        .reshape(&[b, 1, p])
        .and_then(|t| t.expand(&[b, n, p]))
        .stage("key input")?;
    let kv_in = graph.concat(&[h_n, t_rep], 2).stage("key input")?;
    let k = kv_in.matmul(tam.key).stage("key projection")?;
    let v = kv_in.matmul(tam.value).stage("value projection")?;

    let scores = q
        .bmm(k, false, true)
        .stage("attention scores")?
        .scale(1.0 / (dh as f64).sqrt());
    let weights = scores.softmax_last().stage("attention weights")?;
    let output = weights
        .bmm(v, false, false)
        .and_then(|o| o.reshape(&[b, m, n, dh]))
        .stage("attention read-out")?;
    let weights = weights.reshape(&[b, m, n, n]).stage("attention weights")?;
    Ok(Attention { output, weights })
}

/// Residual fusion of `h_n [B, N, D]` with each attended state in
/// `h_ta [B, m, N, D]`, giving `[B, m, N, D]`.
pub fn fuse<'g>(h_n: Var<'g>, h_ta: Var<'g>, tam: &BoundTam<'g>) -> Result<Var<'g>> {
    let (hs, as_) = (h_n.shape(), h_ta.shape());
    if hs.len() != 3 || as_.len() != 4 || as_[0] != hs[0] || as_[2..] != hs[1..] {
        return Err(Error::Config(format!(
            "fusion expects [B, N, D] and [B, m, N, D], got {hs:?} and {as_:?}"
        )));
    }
    let rep = h_n
        .reshape(&[hs[0], 1, hs[1], hs[2]])
        .and_then(|h| h.expand(&as_))
        .stage("fusion")?;
    let joint = h_n.graph().concat(&[rep, h_ta], 3).stage("fusion")?;
    tam.fusion.apply(joint, "fusion")
}
