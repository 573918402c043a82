//! Exact multiply-add counts for one recurrent step with memory-network or
//! graph-convolution gates, kept as polynomials in the node count.
//!
//! Each matrix product `[a, b] x [b, c]` counts `a·b·c`; elementwise products
//! count one per entry. Bias additions, activations and the softmax are not
//! counted. Generating `Θ = E·W` happens once per forward pass and is
//! reported separately from the per-step count.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dpmgru::GateKind;
use crate::error::{Error, Result};

/// `n2·N² + n1·N + n0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Polynomial {
    pub n2: u128,
    pub n1: u128,
    pub n0: u128,
}

impl Polynomial {
    pub fn eval(&self, nodes: usize) -> u128 {
        let n = nodes as u128;
        self.n2 * n * n + self.n1 * n + self.n0
    }

    fn scaled(self, k: u128) -> Self {
        Self {
            n2: self.n2 * k,
            n1: self.n1 * k,
            n0: self.n0 * k,
        }
    }
}

impl std::ops::Add for Polynomial {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            n2: self.n2 + o.n2,
            n1: self.n1 + o.n1,
            n0: self.n0 + o.n0,
        }
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}*N^2 + {}*N + {}", self.n2, self.n1, self.n0)
    }
}

fn quadratic(k: u128) -> Polynomial {
    Polynomial { n2: k, ..Default::default() }
}

fn linear(k: u128) -> Polynomial {
    Polynomial { n1: k, ..Default::default() }
}

fn constant(k: u128) -> Polynomial {
    Polynomial { n0: k, ..Default::default() }
}

/// Widths of the counted cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopDims {
    #[serde(rename = "C")]
    pub input: usize,
    #[serde(rename = "D")]
    pub hidden: usize,
    pub p: usize,
    pub d: usize,
    #[serde(rename = "M")]
    pub memory_slots: usize,
    pub project_patterns: bool,
}

impl Default for FlopDims {
    fn default() -> Self {
        Self {
            input: 1,
            hidden: 64,
            p: 24,
            d: 12,
            memory_slots: 10,
            project_patterns: true,
        }
    }
}

/// One named term of the tally.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopTerm {
    pub stage: &'static str,
    pub count: Polynomial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub kind: GateKind,
    pub nodes: usize,
    /// Multiply-adds of one cell step.
    pub per_step: u128,
    /// Multiply-adds of generating the three gates' `Θ`, once per forward pass.
    pub theta_setup: u128,
    pub step_polynomial: Polynomial,
    pub setup_polynomial: Polynomial,
    pub terms: Vec<FlopTerm>,
}

impl FlopReport {
    pub fn expression(&self) -> String {
        self.step_polynomial.to_string()
    }
}

/// Per-gate terms; every count is for one sample.
pub fn gate_terms(kind: GateKind, dims: &FlopDims) -> Vec<FlopTerm> {
    let fx = (dims.input + dims.hidden) as u128;
    let fout = dims.hidden as u128;
    let p = dims.p as u128;
    let m = dims.memory_slots as u128;
    let term = |stage, count| FlopTerm { stage, count };
    match kind {
        GateKind::Dmn => {
            let width = if dims.project_patterns { fout } else { p };
            let fin = width + fx;
            let mut t = vec![
                term("memory conditioning", constant(m * p)),
                term("query", linear(fx * p)),
                term("similarity scores", linear(m * p)),
            ];
            if dims.project_patterns {
                t.push(term("pattern projection", constant(m * p * fout)));
            }
            t.push(term("pattern read-out", linear(m * width)));
            t.push(term("node-adaptive transform", linear(fin * fout)));
            t
        }
        GateKind::Dgc => vec![
            term("query", linear(fx * p)),
            term("embedding conditioning", linear(p)),
            term("adjacency", quadratic(p)),
            term("normalisation", quadratic(2)),
            term("propagation", quadratic(fx)),
            term("node-adaptive transform", linear(fx * fout)),
        ],
        GateKind::Affine => vec![term("affine", linear(fx * fout))],
    }
}

fn theta_setup(kind: GateKind, dims: &FlopDims) -> Polynomial {
    let fx = (dims.input + dims.hidden) as u128;
    let fout = dims.hidden as u128;
    let d = dims.d as u128;
    match kind {
        GateKind::Dmn => {
            let width = if dims.project_patterns { fout } else { dims.p as u128 };
            linear(d * (width + fx) * fout)
        }
        GateKind::Dgc => linear(d * fx * fout),
        GateKind::Affine => Polynomial::default(),
    }
}

/// Exact tally for one cell step at `nodes` nodes.
pub fn flop_count(kind: GateKind, nodes: usize, dims: &FlopDims) -> Result<FlopReport> {
    if [dims.input, dims.hidden, dims.p, dims.d, dims.memory_slots].contains(&0) || nodes == 0 {
        return Err(Error::Config("FLOP dimensions must be positive".into()));
    }
    let gate = gate_terms(kind, dims);
    let mut terms: Vec<FlopTerm> = gate
        .iter()
        .map(|t| FlopTerm {
            stage: t.stage,
            count: t.count.scaled(3),
        })
        .collect();
    terms.push(FlopTerm {
        stage: "state mix",
        count: linear(3 * dims.hidden as u128),
    });
    let step_polynomial = terms
        .iter()
        .fold(Polynomial::default(), |acc, t| acc + t.count);
    let setup_polynomial = theta_setup(kind, dims).scaled(3);
    Ok(FlopReport {
        kind,
        nodes,
        per_step: step_polynomial.eval(nodes),
        theta_setup: setup_polynomial.eval(nodes),
        step_polynomial,
        setup_polynomial,
        terms,
    })
}
