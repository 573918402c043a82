//! Dynamic graph convolution gate, the quadratic-cost baseline for the
//! memory network.
//!
//! ```text
//! E_t = (x W_q + b_q) ⊙ T_t
//! A_t = relu(E_t E_tᵀ)
//! H   = (I + D^-1/2 A_t D^-1/2) x Θ
//! ```
//!
//! Rows of `A_t` with zero degree contribute nothing to the normalised term,
//! so those nodes only see the identity propagation.

use pmdm_tensor::{fan_in_bound, ParamStore, Tensor, Var};
use rand::Rng;

use crate::bind::Binder;
use crate::dmn::{Affine, BoundAffine, BoundTheta, NaplParams, OutputMap};
use crate::error::{Error, Result, StageExt};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DgcDims {
    pub nodes: usize,
    pub input: usize,
    pub output: usize,
    /// Width of the conditioned node embedding, shared with the time embedding.
    pub memory_width: usize,
    pub node_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DgcLayer {
    pub dims: DgcDims,
    pub query: Affine,
    pub output: OutputMap,
    pub bias: Option<String>,
}

impl DgcLayer {
    pub fn new(prefix: &str, dims: DgcDims, node_adaptive: bool, bias: bool) -> Self {
        let output = if node_adaptive {
            OutputMap::NodeAdaptive(NaplParams::new(&format!("{prefix}.napl")))
        } else {
            OutputMap::Shared(format!("{prefix}.theta"))
        };
        Self {
            dims,
            query: Affine::new(&format!("{prefix}.query"), dims.input, dims.memory_width, true),
            output,
            bias: bias.then(|| format!("{prefix}.bias")),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = &self.dims;
        self.query.init(store, rng);
        self.output
            .init(d.nodes, d.node_dim, d.input, d.output, store, rng);
        if let Some(b) = &self.bias {
            store.insert(b.clone(), Tensor::uniform(&[d.output], fan_in_bound(d.input), rng));
        }
    }

    pub fn bind<'g>(&self, binder: &Binder<'g, '_>) -> Result<BoundDgc<'g>> {
        Ok(BoundDgc {
            dims: self.dims,
            query: self.query.bind(binder)?,
            theta: self.output.bind(binder)?,
            bias: self.bias.as_deref().map(|b| binder.get(b)).transpose()?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDgc<'g> {
    pub dims: DgcDims,
    pub query: BoundAffine<'g>,
    pub theta: BoundTheta<'g>,
    pub bias: Option<Var<'g>>,
}

#[derive(Debug, Clone, Copy)]
pub struct DgcOutput<'g> {
    /// `[B, N, F_out]`.
    pub output: Var<'g>,
    /// `[B, N, N]`, symmetric and non-negative.
    pub adjacency: Var<'g>,
}

/// Applies the graph-convolution gate to `x [B, N, F_x]` at time embeddings `[B, p]`.
pub fn dgc_forward<'g>(x: Var<'g>, time: Var<'g>, dgc: &BoundDgc<'g>) -> Result<DgcOutput<'g>> {
    let xs = x.shape();
    let d = &dgc.dims;
    if xs.len() != 3 || xs[1] != d.nodes || xs[2] != d.input {
        return Err(Error::Config(format!(
            "graph convolution input must be [B, {}, {}], got {xs:?}",
            d.nodes, d.input
        )));
    }
    let ts = time.shape();
    if ts.len() != 2 || ts[0] != xs[0] || ts[1] != d.memory_width {
        return Err(Error::Config(format!(
            "graph convolution time embedding must be [{}, {}], got {ts:?}",
            xs[0], d.memory_width
        )));
    }
    let (b, n) = (xs[0], xs[1]);
    let query = dgc.query.apply(x, "graph query")?;
    let embedding = time
        .reshape(&[b, 1, d.memory_width])
        .and_then(|t| query.mul(t))
        .stage("embedding conditioning")?;
    let adjacency = embedding.gram().stage("adjacency")?.relu();
    let inv_sqrt_degree = adjacency
        .sum_axis(2)
        .stage("degree")?
        .inv_sqrt_or_zero();
    let normalized = adjacency
        .mul(inv_sqrt_degree)
        .and_then(|a| a.mul(inv_sqrt_degree.reshape(&[b, 1, n])?))
        .stage("normalisation")?;
    let propagated = normalized
        .bmm(x, false, false)
        .and_then(|ax| ax.add(x))
        .stage("propagation")?;
    let mut output = dgc.theta.apply(propagated, "node-adaptive transform")?;
    if let Some(bias) = dgc.bias {
        output = output.add(bias).stage("gate bias")?;
    }
    Ok(DgcOutput { output, adjacency })
}
