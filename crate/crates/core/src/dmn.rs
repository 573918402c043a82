//! Dynamic memory network: time-conditioned pattern matching against a
//! learnable memory bank, followed by a node-adaptive output transform.
//!
//! For node `i` at time `t` with input `x_i`:
//!
//! ```text
//! P_t = P ⊙ T_t                       memory conditioned on the time embedding
//! F_i = x_i W_q + b_q                 query
//! w_i = softmax(F_i P_tᵀ)             similarity over the M memory slots
//! h_i = w_i (P_t W_p)                 pattern read-out
//! H_i = (h_i ‖ x_i) Θ_i               Θ = E·W, one matrix per node
//! ```
//!
//! Every step touches each node once with a fixed number of slots, so the cost
//! is linear in the number of nodes.

use pmdm_tensor::{fan_in_bound, ParamStore, Tensor, Var};
use rand::Rng;

use crate::bind::Binder;
use crate::error::{Error, Result, StageExt};

/// `x W + b` with parameters `{prefix}.weight [in, out]` and `{prefix}.bias [out]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Affine {
    pub weight: String,
    pub bias: Option<String>,
    pub input: usize,
    pub output: usize,
}

impl Affine {
    pub fn new(prefix: &str, input: usize, output: usize, bias: bool) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: bias.then(|| format!("{prefix}.bias")),
            input,
            output,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let bound = fan_in_bound(self.input);
        store.insert(
            self.weight.clone(),
            Tensor::uniform(&[self.input, self.output], bound, rng),
        );
        if let Some(b) = &self.bias {
            store.insert(b.clone(), Tensor::uniform(&[self.output], bound, rng));
        }
    }

    pub fn bind<'g>(&self, binder: &Binder<'g, '_>) -> Result<BoundAffine<'g>> {
        Ok(BoundAffine {
            weight: binder.get(&self.weight)?,
            bias: self.bias.as_deref().map(|b| binder.get(b)).transpose()?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAffine<'g> {
    pub weight: Var<'g>,
    pub bias: Option<Var<'g>>,
}

impl<'g> BoundAffine<'g> {
    pub fn apply(&self, x: Var<'g>, stage: &'static str) -> Result<Var<'g>> {
        let y = x.matmul(self.weight).stage(stage)?;
        match self.bias {
            Some(b) => y.add(b).stage(stage),
            None => Ok(y),
        }
    }
}

/// Widths of one memory-network transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DmnDims {
    pub nodes: usize,
    /// `F_x`, width of the per-node input.
    pub input: usize,
    /// `F_out`.
    pub output: usize,
    /// `M`.
    pub memory_slots: usize,
    /// `p`, shared with the time embedding.
    pub memory_width: usize,
    /// `d`, node embedding width.
    pub node_dim: usize,
    /// Project memory rows to `F_out` before the read-out. When false the raw
    /// `p`-wide rows are read directly.
    pub project_patterns: bool,
}

impl DmnDims {
    pub fn pattern_width(&self) -> usize {
        if self.project_patterns {
            self.output
        } else {
            self.memory_width
        }
    }

    /// `F_in` of the output transform: pattern width plus input width.
    pub fn fused_width(&self) -> usize {
        self.pattern_width() + self.input
    }
}

/// Memory matrix `P [M, p]` with its query and pattern projections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryBank {
    pub memory: String,
    pub query: Affine,
    pub projection: Option<String>,
}

impl MemoryBank {
    pub fn new(prefix: &str, dims: &DmnDims) -> Self {
        Self {
            memory: format!("{prefix}.memory"),
            query: Affine::new(&format!("{prefix}.query"), dims.input, dims.memory_width, true),
            projection: dims.project_patterns.then(|| format!("{prefix}.projection")),
        }
    }

    fn init<R: Rng + ?Sized>(&self, dims: &DmnDims, store: &mut ParamStore, rng: &mut R) {
        store.insert(
            self.memory.clone(),
            Tensor::uniform(
                &[dims.memory_slots, dims.memory_width],
                0.5 * fan_in_bound(dims.memory_width),
                rng,
            ),
        );
        self.query.init(store, rng);
        if let Some(p) = &self.projection {
            store.insert(
                p.clone(),
                Tensor::uniform(
                    &[dims.memory_width, dims.output],
                    fan_in_bound(dims.memory_width),
                    rng,
                ),
            );
        }
    }
}

/// Node embeddings `E [N, d]` and weight pool `W [d, F_in, F_out]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NaplParams {
    pub embedding: String,
    pub pool: String,
}

impl NaplParams {
    pub fn new(prefix: &str) -> Self {
        Self {
            embedding: format!("{prefix}.node_embedding"),
            pool: format!("{prefix}.weight_pool"),
        }
    }

    fn init<R: Rng + ?Sized>(
        &self,
        nodes: usize,
        node_dim: usize,
        fin: usize,
        fout: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) {
        store.insert(
            self.embedding.clone(),
            Tensor::uniform(&[nodes, node_dim], 0.5 * fan_in_bound(node_dim), rng),
        );
        store.insert(
            self.pool.clone(),
            Tensor::uniform(&[node_dim, fin, fout], fan_in_bound(fin), rng),
        );
    }
}

/// How the fused features are mapped to the output width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutputMap {
    /// Per-node `Θ_i` generated from node embeddings.
    NodeAdaptive(NaplParams),
    /// One `[F_in, F_out]` matrix shared by all nodes.
    Shared(String),
}

impl OutputMap {
    pub(crate) fn init<R: Rng + ?Sized>(
        &self,
        nodes: usize,
        node_dim: usize,
        fin: usize,
        fout: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) {
        match self {
            OutputMap::NodeAdaptive(napl) => napl.init(nodes, node_dim, fin, fout, store, rng),
            OutputMap::Shared(name) => {
                store.insert(name.clone(), Tensor::uniform(&[fin, fout], fan_in_bound(fin), rng))
            }
        }
    }

    pub(crate) fn bind<'g>(&self, binder: &Binder<'g, '_>) -> Result<BoundTheta<'g>> {
        Ok(match self {
            OutputMap::NodeAdaptive(napl) => BoundTheta::PerNode(napl_theta(
                binder.get(&napl.embedding)?,
                binder.get(&napl.pool)?,
            )?),
            OutputMap::Shared(name) => BoundTheta::Shared(binder.get(name)?),
        })
    }
}

/// Output transform materialised for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum BoundTheta<'g> {
    PerNode(Var<'g>),
    Shared(Var<'g>),
}

impl<'g> BoundTheta<'g> {
    pub fn apply(&self, z: Var<'g>, stage: &'static str) -> Result<Var<'g>> {
        match self {
            BoundTheta::PerNode(theta) => z.node_matmul(*theta).stage(stage),
            BoundTheta::Shared(theta) => z.matmul(*theta).stage(stage),
        }
    }
}

/// Generates `Θ [N, F_in, F_out]` with `Θ[i] = Σ_k E[i, k] W[k]`.
pub fn napl_theta<'g>(embedding: Var<'g>, pool: Var<'g>) -> Result<Var<'g>> {
    let (es, ws) = (embedding.shape(), pool.shape());
    if es.len() != 2 || ws.len() != 3 || es[1] != ws[0] {
        return Err(Error::Config(format!(
            "node-adaptive parameters: embedding {es:?} incompatible with weight pool {ws:?}"
        )));
    }
    let flat = pool.reshape(&[ws[0], ws[1] * ws[2]]).stage("node-adaptive parameters")?;
    embedding
        .matmul(flat)
        .and_then(|t| t.reshape(&[es[0], ws[1], ws[2]]))
        .stage("node-adaptive parameters")
}

/// `P ⊙ T_t`: memory `[M, p]` conditioned on a batch of embeddings `[B, p]`,
/// giving `[B, M, p]`.
pub fn conditioned_memory<'g>(memory: Var<'g>, time: Var<'g>) -> Result<Var<'g>> {
    let (ms, ts) = (memory.shape(), time.shape());
    if ms.len() != 2 || ts.len() != 2 || ms[1] != ts[1] {
        return Err(Error::Config(format!(
            "memory conditioning: memory {ms:?} and time embedding {ts:?} widths differ"
        )));
    }
    let m = memory.reshape(&[1, ms[0], ms[1]]).stage("memory conditioning")?;
    let t = time.reshape(&[ts[0], 1, ts[1]]).stage("memory conditioning")?;
    m.mul(t).stage("memory conditioning")
}

/// One memory-network transform with its parameter names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DmnLayer {
    pub dims: DmnDims,
    pub bank: MemoryBank,
    pub output: OutputMap,
    pub bias: Option<String>,
}

impl DmnLayer {
    pub fn new(prefix: &str, dims: DmnDims, node_adaptive: bool, bias: bool) -> Self {
        let output = if node_adaptive {
            OutputMap::NodeAdaptive(NaplParams::new(&format!("{prefix}.napl")))
        } else {
            OutputMap::Shared(format!("{prefix}.theta"))
        };
        Self {
            dims,
            bank: MemoryBank::new(prefix, &dims),
            output,
            bias: bias.then(|| format!("{prefix}.bias")),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = &self.dims;
        self.bank.init(d, store, rng);
        self.output
            .init(d.nodes, d.node_dim, d.fused_width(), d.output, store, rng);
        if let Some(b) = &self.bias {
            store.insert(
                b.clone(),
                Tensor::uniform(&[d.output], fan_in_bound(d.fused_width()), rng),
            );
        }
    }

    /// Binds parameters and generates `Θ` once per forward pass.
    pub fn bind<'g>(&self, binder: &Binder<'g, '_>) -> Result<BoundDmn<'g>> {
        Ok(BoundDmn {
            dims: self.dims,
            memory: binder.get(&self.bank.memory)?,
            query: self.bank.query.bind(binder)?,
            projection: self
                .bank
                .projection
                .as_deref()
                .map(|p| binder.get(p))
                .transpose()?,
            theta: self.output.bind(binder)?,
            bias: self.bias.as_deref().map(|b| binder.get(b)).transpose()?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDmn<'g> {
    pub dims: DmnDims,
    pub memory: Var<'g>,
    pub query: BoundAffine<'g>,
    pub projection: Option<Var<'g>>,
    pub theta: BoundTheta<'g>,
    pub bias: Option<Var<'g>>,
}

/// Output of [`dmn_forward`] together with the similarity weights.
#[derive(Debug, Clone, Copy)]
pub struct DmnOutput<'g> {
    /// `[B, N, F_out]`.
    pub output: Var<'g>,
    /// `[B, N, M]`, each row a distribution over memory slots.
    pub weights: Var<'g>,
}

/// Applies the memory network to `x [B, N, F_x]` at time embeddings `[B, p]`.
pub fn dmn_forward<'g>(x: Var<'g>, time: Var<'g>, dmn: &BoundDmn<'g>) -> Result<DmnOutput<'g>> {
    let xs = x.shape();
    let d = &dmn.dims;
    if xs.len() != 3 || xs[1] != d.nodes || xs[2] != d.input {
        return Err(Error::Config(format!(
            "memory network input must be [B, {}, {}], got {xs:?}",
            d.nodes, d.input
        )));
    }
    let conditioned = conditioned_memory(dmn.memory, time)?;
    let query = dmn.query.apply(x, "query projection")?;
    let scores = query
        .bmm(conditioned, false, true)
        .stage("similarity scores")?;
    let weights = scores.softmax_last().stage("similarity weights")?;
    let patterns = match dmn.projection {
        Some(w) => conditioned.matmul(w).stage("pattern projection")?,
        None => conditioned,
    };
    let read = weights.bmm(patterns, false, false).stage("pattern read-out")?;
    let fused = x
        .graph()
        .concat(&[read, x], 2)
        .stage("residual concatenation")?;
    let mut output = dmn.theta.apply(fused, "node-adaptive transform")?;
    if let Some(b) = dmn.bias {
        output = output.add(b).stage("gate bias")?;
    }
    Ok(DmnOutput { output, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use pmdm_tensor::{Graph, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> DmnDims {
        DmnDims {
            nodes: 3,
            input: 2,
            output: 2,
            memory_slots: 2,
            memory_width: 2,
            node_dim: 2,
            project_patterns: true,
        }
    }

    fn layer_with_store(seed: u64, dims: DmnDims) -> (DmnLayer, ParamStore) {
        let layer = DmnLayer::new("g", dims, true, true);
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (layer, store)
    }

    #[test]
    fn conditioning_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let g = Graph::new();
        let pm = g.constant(p.clone());
        let same = conditioned_memory(pm, g.constant(Tensor::ones(&[1, 3]))).unwrap();
        assert_eq!(same.value().data(), p.data());
        let zero = conditioned_memory(pm, g.constant(Tensor::zeros(&[1, 3]))).unwrap();
        assert!(zero.value().data().iter().all(|v| *v == 0.0));
        assert!(conditioned_memory(pm, g.constant(Tensor::zeros(&[1, 2]))).is_err());
    }

    #[test]
    fn theta_selects_pool_rows_for_identity_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::uniform(&[3, 2, 4], 1.0, &mut rng);
        let g = Graph::new();
        let theta = napl_theta(g.constant(Tensor::eye(3)), g.constant(w.clone()))
            .unwrap()
            .value();
        assert_eq!(theta.data(), w.data());

        let mut e = Tensor::uniform(&[3, 3], 1.0, &mut rng).into_vec();
        e[3..6].fill(0.0);
        let theta = napl_theta(
            g.constant(Tensor::new(&[3, 3], e).unwrap()),
            g.constant(w),
        )
        .unwrap()
        .value();
        assert!(theta.data()[8..16].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_memory_gives_uniform_weights() {
        let (layer, mut store) = layer_with_store(3, DmnDims { memory_slots: 5, ..dims() });
        store.set(&layer.bank.memory, Tensor::zeros(&[5, 2])).unwrap();
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        let bound = layer.bind(&b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = g.constant(Tensor::uniform(&[2, 3, 2], 1.0, &mut rng));
        let t = g.constant(Tensor::uniform(&[2, 2], 1.0, &mut rng));
        let out = dmn_forward(x, t, &bound).unwrap();
        for w in out.weights.value().data() {
            assert!((w - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_slot_reads_its_projected_row() {
        let dims = DmnDims { memory_slots: 3, ..dims() };
        let (layer, mut store) = layer_with_store(5, dims);
        // Query always points along (1, 0); slot 1 is the only one aligned with it.
        store
            .set(&layer.bank.query.weight, Tensor::zeros(&[2, 2]))
            .unwrap();
        store
            .set(
                layer.bank.query.bias.as_ref().unwrap(),
                Tensor::from_vec(vec![100.0, 0.0]),
            )
            .unwrap();
        let memory = Tensor::new(&[3, 2], vec![-1.0, 0.3, 1.0, 0.0, 0.0, 0.7]).unwrap();
        store.set(&layer.bank.memory, memory.clone()).unwrap();
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        let bound = layer.bind(&b).unwrap();
        let x = g.constant(Tensor::uniform(&[1, 3, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(6)));
        let t = g.constant(Tensor::ones(&[1, 2]));
        let out = dmn_forward(x, t, &bound).unwrap();
        let proj = store.get(layer.bank.projection.as_ref().unwrap()).unwrap();
        let expected: Vec<f64> = (0..2)
            .map(|j| memory.at(&[1, 0]) * proj.at(&[0, j]) + memory.at(&[1, 1]) * proj.at(&[1, j]))
            .collect();
        let w = out.weights.value();
        for i in 0..3 {
            assert!(w.at(&[0, i, 1]) >= 1.0 - 1e-15);
        }
        // Read-out recomputed from the bound parameters.
        let conditioned = conditioned_memory(bound.memory, t).unwrap();
        let patterns = conditioned.matmul(bound.projection.unwrap()).unwrap();
        let h = out.weights.bmm(patterns, false, false).unwrap().value();
        for i in 0..3 {
            for (j, e) in expected.iter().enumerate() {
                assert!((h.at(&[0, i, j]) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_node_count_names_the_stage() {
        let (layer, store) = layer_with_store(7, dims());
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        let bound = layer.bind(&b).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 4, 2]));
        let t = g.constant(Tensor::zeros(&[1, 2]));
        assert!(dmn_forward(x, t, &bound).is_err());
        let x = g.constant(Tensor::zeros(&[1, 3, 2]));
        let t = g.constant(Tensor::zeros(&[1, 3]));
        let err = dmn_forward(x, t, &bound).unwrap_err();
        assert!(err.to_string().contains("memory conditioning"), "{err}");
    }

    #[test]
    fn unprojected_reading_uses_memory_width() {
        let dims = DmnDims {
            project_patterns: false,
            memory_width: 4,
            ..dims()
        };
        assert_eq!(dims.fused_width(), 6);
        let (layer, store) = layer_with_store(8, dims);
        assert!(layer.bank.projection.is_none());
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        let bound = layer.bind(&b).unwrap();
        let x = g.constant(Tensor::ones(&[2, 3, 2]));
        let t = g.constant(Tensor::ones(&[2, 4]));
        let out = dmn_forward(x, t, &bound).unwrap();
        assert_eq!(out.output.shape(), vec![2, 3, 2]);
    }
}
