//! Gated recurrent cell whose three transforms are memory-network gates.
//!
//! ```text
//! r = σ(f_r(x ‖ H))
//! u = σ(f_u(x ‖ H))
//! h = tanh(f_h(x ‖ u ⊙ H))
//! H' = r ⊙ H + (1 − r) ⊙ h
//! ```
//!
//! `r` is the convex mixer and `u` scales the previous state inside the
//! candidate. This is the reverse of the textbook GRU naming and is kept as is.

use pmdm_tensor::{ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bind::Binder;
use crate::dgc::{dgc_forward, BoundDgc, DgcDims, DgcLayer};
use crate::dmn::{dmn_forward, Affine, BoundAffine, BoundDmn, DmnDims, DmnLayer};
use crate::error::{Error, Result, StageExt};

/// Which transform sits inside each gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    /// Dynamic memory network (the default).
    #[default]
    Dmn,
    /// Plain shared affine layer.
    Affine,
    /// Dynamic graph convolution.
    Dgc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellDims {
    pub nodes: usize,
    pub input: usize,
    pub hidden: usize,
    pub memory_slots: usize,
    pub memory_width: usize,
    pub node_dim: usize,
    pub project_patterns: bool,
}

impl CellDims {
    /// Width every gate consumes: input plus hidden.
    pub fn gate_input(&self) -> usize {
        self.input + self.hidden
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Gate {
    Dmn(DmnLayer),
    Affine(Affine),
    Dgc(DgcLayer),
}

impl Gate {
    fn new(prefix: &str, kind: GateKind, dims: &CellDims, node_adaptive: bool, bias: bool) -> Self {
        let fx = dims.gate_input();
        match kind {
            GateKind::Dmn => Gate::Dmn(DmnLayer::new(
                prefix,
                DmnDims {
                    nodes: dims.nodes,
                    input: fx,
                    output: dims.hidden,
                    memory_slots: dims.memory_slots,
                    memory_width: dims.memory_width,
                    node_dim: dims.node_dim,
                    project_patterns: dims.project_patterns,
                },
                node_adaptive,
                bias,
            )),
            GateKind::Affine => Gate::Affine(Affine::new(
                &format!("{prefix}.affine"),
                fx,
                dims.hidden,
                bias,
            )),
            GateKind::Dgc => Gate::Dgc(DgcLayer::new(
                prefix,
                DgcDims {
                    nodes: dims.nodes,
                    input: fx,
                    output: dims.hidden,
                    memory_width: dims.memory_width,
                    node_dim: dims.node_dim,
                },
                node_adaptive,
                bias,
            )),
        }
    }

    fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        match self {
            Gate::Dmn(l) => l.init(store, rng),
            Gate::Affine(l) => l.init(store, rng),
            Gate::Dgc(l) => l.init(store, rng),
        }
    }

    fn bind<'g>(&self, binder: &Binder<'g, '_>) -> Result<BoundGate<'g>> {
        Ok(match self {
            Gate::Dmn(l) => BoundGate::Dmn(l.bind(binder)?),
            Gate::Affine(l) => BoundGate::Affine(l.bind(binder)?),
            Gate::Dgc(l) => BoundGate::Dgc(l.bind(binder)?),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BoundGate<'g> {
    Dmn(BoundDmn<'g>),
    Affine(BoundAffine<'g>),
    Dgc(BoundDgc<'g>),
}

impl<'g> BoundGate<'g> {
    /// Pre-activation of the gate for `z [B, N, F_x]` at time embeddings `[B, p]`.
    pub fn apply(&self, z: Var<'g>, time: Var<'g>) -> Result<Var<'g>> {
        match self {
            BoundGate::Dmn(g) => Ok(dmn_forward(z, time, g)?.output),
            BoundGate::Affine(g) => g.apply(z, "affine gate"),
            BoundGate::Dgc(g) => Ok(dgc_forward(z, time, g)?.output),
        }
    }
}

/// Parameter layout of one cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DpmgruCell {
    pub dims: CellDims,
    pub reset: Gate,
    pub update: Gate,
    pub candidate: Gate,
}

impl DpmgruCell {
    pub fn new(prefix: &str, dims: CellDims, kind: GateKind, node_adaptive: bool, bias: bool) -> Self {
        let gate = |name: &str| Gate::new(&format!("{prefix}.{name}"), kind, &dims, node_adaptive, bias);
        Self {
            dims,
            reset: gate("r"),
            update: gate("u"),
            candidate: gate("h"),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.reset.init(store, rng);
        self.update.init(store, rng);
        self.candidate.init(store, rng);
    }

    pub fn bind<'g>(&self, binder: &Binder<'g, '_>) -> Result<BoundCell<'g>> {
        Ok(BoundCell {
            dims: self.dims,
            reset: self.reset.bind(binder)?,
            update: self.update.bind(binder)?,
            candidate: self.candidate.bind(binder)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundCell<'g> {
    pub dims: CellDims,
    pub reset: BoundGate<'g>,
    pub update: BoundGate<'g>,
    pub candidate: BoundGate<'g>,
}

fn in_gate<T>(gate: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Gate {
        gate,
        source: Box::new(e),
    })
}

/// One recurrent step: `x [B, N, C_in]`, `h_prev [B, N, D]`, `time [B, p]`.
pub fn cell_step<'g>(
    x: Var<'g>,
    h_prev: Var<'g>,
    time: Var<'g>,
    cell: &BoundCell<'g>,
) -> Result<Var<'g>> {
    let (xs, hs) = (x.shape(), h_prev.shape());
    let d = &cell.dims;
    if xs.len() != 3 || xs[1] != d.nodes || xs[2] != d.input {
        return Err(Error::Config(format!(
            "cell input must be [B, {}, {}], got {xs:?}",
            d.nodes, d.input
        )));
    }
    if hs != [xs[0], d.nodes, d.hidden] {
        return Err(Error::Config(format!(
            "cell hidden state must be [{}, {}, {}], got {hs:?}",
            xs[0], d.nodes, d.hidden
        )));
    }
    let graph = x.graph();
    let joint = graph.concat(&[x, h_prev], 2).stage("gate input")?;
    let r = in_gate("reset", cell.reset.apply(joint, time))?.sigmoid();
    let u = in_gate("update", cell.update.apply(joint, time))?.sigmoid();
    let gated = u.mul(h_prev).stage("candidate input")?;
    let cand_in = graph.concat(&[x, gated], 2).stage("candidate input")?;
    let h = in_gate("candidate", cell.candidate.apply(cand_in, time))?.tanh();
    let keep = r.mul(h_prev).stage("state mix")?;
    let fresh = r.one_minus().mul(h).stage("state mix")?;
    keep.add(fresh).stage("state mix")
}

/// Runs stacked cells over a sequence. `inputs[t]` is `[B, N, C]`, `times[t]`
/// is `[B, p]`, and `initial[l]` is the starting state of layer `l`. Returns
/// the hidden trajectory of the top layer and the final state of every layer.
pub fn encode<'g>(
    inputs: &[Var<'g>],
    times: &[Var<'g>],
    initial: &[Var<'g>],
    cells: &[BoundCell<'g>],
) -> Result<Encoded<'g>> {
    if inputs.is_empty() {
        return Err(Error::Config("cannot encode an empty sequence".into()));
    }
    if inputs.len() != times.len() {
        return Err(Error::Config(format!(
            "{} input steps but {} time embeddings",
            inputs.len(),
            times.len()
        )));
    }
    if cells.is_empty() || initial.len() != cells.len() {
        return Err(Error::Config(format!(
            "{} initial states for {} layers",
            initial.len(),
            cells.len()
        )));
    }
    let mut sequence = inputs.to_vec();
    let mut finals = Vec::with_capacity(cells.len());
    for (cell, h0) in cells.iter().zip(initial) {
        let mut h = *h0;
        let mut out = Vec::with_capacity(sequence.len());
        for (x, t) in sequence.iter().zip(times) {
            h = cell_step(*x, h, *t, cell)?;
            out.push(h);
        }
        finals.push(h);
        sequence = out;
    }
    Ok(Encoded {
        states: sequence,
        finals,
    })
}

#[derive(Debug, Clone)]
pub struct Encoded<'g> {
    /// Top-layer states `H_1..H_n`.
    pub states: Vec<Var<'g>>,
    /// Last state of each layer, bottom first.
    pub finals: Vec<Var<'g>>,
}

impl<'g> Encoded<'g> {
    pub fn last(&self) -> Var<'g> {
        *self.states.last().expect("encode rejects empty sequences")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pmdm_tensor::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> CellDims {
        CellDims {
            nodes: 2,
            input: 2,
            hidden: 3,
            memory_slots: 3,
            memory_width: 2,
            node_dim: 2,
            project_patterns: true,
        }
    }

    fn zeroed(cell: &DpmgruCell) -> ParamStore {
        let mut store = ParamStore::new();
        cell.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            store.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        store
    }

    #[test]
    fn zero_parameters_keep_zero_state() {
        for kind in [GateKind::Dmn, GateKind::Affine, GateKind::Dgc] {
            let cell = DpmgruCell::new("c", dims(), kind, true, true);
            let store = zeroed(&cell);
            let g = Graph::new();
            let bound = cell.bind(&Binder::frozen(&g, &store)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let xs: Vec<_> = (0..3)
                .map(|_| g.constant(Tensor::uniform(&[1, 2, 2], 1.0, &mut rng)))
                .collect();
            let ts: Vec<_> = (0..3)
                .map(|_| g.constant(Tensor::uniform(&[1, 2], 1.0, &mut rng)))
                .collect();
            let h0 = g.constant(Tensor::zeros(&[1, 2, 3]));
            let enc = encode(&xs, &ts, &[h0], &[bound]).unwrap();
            for h in &enc.states {
                assert!(h.value().data().iter().all(|v| *v == 0.0), "{kind:?}");
            }
        }
    }

    #[test]
    fn saturated_reset_gate_holds_state() {
        let cell = DpmgruCell::new("c", dims(), GateKind::Dmn, true, true);
        let mut store = ParamStore::new();
        cell.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        let Gate::Dmn(reset) = &cell.reset else { unreachable!() };
        store
            .set(reset.bias.as_ref().unwrap(), Tensor::full(&[3], 1e4))
            .unwrap();
        let g = Graph::new();
        let bound = cell.bind(&Binder::frozen(&g, &store)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = g.constant(Tensor::uniform(&[2, 2, 2], 0.1, &mut rng));
        let h0 = Tensor::uniform(&[2, 2, 3], 0.1, &mut rng);
        let t = g.constant(Tensor::uniform(&[2, 2], 1.0, &mut rng));
        let h1 = cell_step(x, g.constant(h0.clone()), t, &bound).unwrap().value();
        assert_eq!(h1, h0);
    }

    #[test]
    fn gate_errors_name_the_gate() {
        let cell = DpmgruCell::new("c", dims(), GateKind::Dmn, true, true);
        let mut store = ParamStore::new();
        cell.init(&mut store, &mut ChaCha8Rng::seed_from_u64(4));
        let g = Graph::new();
        let bound = cell.bind(&Binder::frozen(&g, &store)).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 2, 2]));
        let h = g.constant(Tensor::zeros(&[1, 2, 3]));
        let bad_t = g.constant(Tensor::zeros(&[1, 5]));
        let err = cell_step(x, h, bad_t, &bound).unwrap_err();
        assert!(err.to_string().starts_with("reset gate"), "{err}");
        let bad_h = g.constant(Tensor::zeros(&[1, 2, 4]));
        assert!(cell_step(x, bad_h, g.constant(Tensor::zeros(&[1, 2])), &bound).is_err());
    }

    #[test]
    fn encode_rejects_length_mismatch() {
        let cell = DpmgruCell::new("c", dims(), GateKind::Dmn, true, true);
        let mut store = ParamStore::new();
        cell.init(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
        let g = Graph::new();
        let bound = cell.bind(&Binder::frozen(&g, &store)).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 2, 2]));
        let t = g.constant(Tensor::zeros(&[1, 2]));
        let h = g.constant(Tensor::zeros(&[1, 2, 3]));
        assert!(encode(&[x, x], &[t], &[h], &[bound]).is_err());
        assert!(encode(&[], &[], &[h], &[bound]).is_err());
    }

    #[test]
    fn state_stays_bounded() {
        let cell = DpmgruCell::new("c", dims(), GateKind::Dmn, true, true);
        let mut store = ParamStore::new();
        cell.init(&mut store, &mut ChaCha8Rng::seed_from_u64(6));
        let g = Graph::new();
        let bound = cell.bind(&Binder::frozen(&g, &store)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h0 = Tensor::uniform(&[3, 2, 3], 2.5, &mut rng);
        let bound_inf = h0.data().iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let xs: Vec<_> = (0..6)
            .map(|_| g.constant(Tensor::uniform(&[3, 2, 2], 10.0, &mut rng)))
            .collect();
        let ts: Vec<_> = (0..6)
            .map(|_| g.constant(Tensor::uniform(&[3, 2], 1.0, &mut rng)))
            .collect();
        let enc = encode(&xs, &ts, &[g.constant(h0)], &[bound]).unwrap();
        for h in enc.states {
            assert!(h.value().data().iter().all(|v| v.abs() <= bound_inf));
        }
    }
}
