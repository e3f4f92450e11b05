//! Inter-head disagreement terms computed from an [`AttentionTrace`].
//!
//! All terms sum over every ordered head pair `(i, j)`, self-pairs
//! included, and scale by `1/H²`:
//!
//! * subspace: `−(1/H²) Σᵢⱼ cos(V^i, V^j)`
//! * position: `−(1/H²) Σᵢⱼ Σ(A^i ⊙ A^j)`
//! * position (squared difference): `+(1/H²) Σᵢⱼ Σ(A^i − A^j)²`
//! * output: `−(1/H²) Σᵢⱼ cos(O^i, O^j)`
//!
//! Cosine between two matrices is the mean over rows of the row-wise cosine.
//! Each row norm is clamped below at [`COSINE_EPS`].
//!
//! The double sums are never expanded. With unit rows `û^h`, the pair sum
//! of cosines at one position is `‖Σₕ û^h‖²`; likewise `Σᵢⱼ ⟨A^i, A^j⟩ =
//! ‖Σₕ A^h‖²` and `Σᵢⱼ ‖A^i − A^j‖² = 2H Σₕ ‖A^h‖² − 2‖Σₕ A^h‖²`. Every
//! term is therefore linear in `H`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionTrace, Network};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Term {
    Subspace,
    Position,
    PositionSos,
    Output,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Subspace, Term::Position, Term::PositionSos, Term::Output];

    pub fn as_str(self) -> &'static str {
        match self {
            Term::Subspace => "subspace",
            Term::Position => "position",
            Term::PositionSos => "position-sos",
            Term::Output => "output",
        }
    }

    pub fn parse(s: &str) -> Option<Term> {
        Term::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the position terms are scaled with query count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionNormalization {
    /// Divide by the number of query rows N; the term lies in [−1, 0).
    #[default]
    PerQueryMean,
    /// Plain sum over query rows.
    RowSum,
}

impl PositionNormalization {
    pub fn as_str(self) -> &'static str {
        match self {
            PositionNormalization::PerQueryMean => "per-query-mean",
            PositionNormalization::RowSum => "row-sum",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisagreementConfig {
    #[serde(default)]
    pub terms: BTreeSet<Term>,
    #[serde(default = "default_networks")]
    pub networks: BTreeSet<Network>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub position_normalization: PositionNormalization,
}

fn default_networks() -> BTreeSet<Network> {
    BTreeSet::from([Network::EncoderSelf])
}

fn default_lambda() -> f64 {
    1.0
}

impl Default for DisagreementConfig {
    fn default() -> Self {
        DisagreementConfig {
            terms: BTreeSet::new(),
            networks: default_networks(),
            lambda: default_lambda(),
            position_normalization: PositionNormalization::default(),
        }
    }
}

impl DisagreementConfig {
    /// No regularization at all.
    pub fn baseline() -> Self {
        DisagreementConfig {
            lambda: 0.0,
            ..Self::default()
        }
    }

    pub fn single(term: Term, networks: &[Network], lambda: f64) -> Self {
        DisagreementConfig {
            terms: BTreeSet::from([term]),
            networks: networks.iter().copied().collect(),
            lambda,
            position_normalization: PositionNormalization::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "disagreement.lambda must be a finite non-negative number, got {}",
                self.lambda
            )));
        }
        if !self.terms.is_empty() && self.networks.is_empty() {
            return Err(Error::config(
                "disagreement terms are enabled but no attention network is targeted",
            ));
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        !self.terms.is_empty()
    }
}

/// A measured disagreement value with its exponentiated, Table-4 style form.
#[derive(Clone, Debug, PartialEq)]
pub struct DisagreementValue {
    pub term: Term,
    pub raw: f64,
    pub exp: f64,
    pub per_layer: Vec<(Network, usize, f64)>,
}

impl DisagreementValue {
    pub fn new(term: Term, raw: f64, per_layer: Vec<(Network, usize, f64)>) -> Self {
        DisagreementValue {
            term,
            raw,
            exp: raw.exp(),
            per_layer,
        }
    }
}

fn require_heads(trace: &AttentionTrace) -> Result<usize> {
    match trace.heads.len() {
        0 => Err(Error::contract("attention trace has no heads")),
        h => Ok(h),
    }
}

fn same_shapes(graph: &Graph, vars: &[Var], what: &str) -> Result<()> {
    let first = graph.value(vars[0]).shape();
    for &v in &vars[1..] {
        if graph.value(v).shape() != first {
            return Err(Error::contract(format!(
                "heads disagree on {what} shape: {first:?} vs {:?}",
                graph.value(v).shape()
            )));
        }
    }
    Ok(())
}

/// `−(1/H²) Σᵢⱼ mean_rows cos(Xⁱ_row, Xʲ_row)` over per-head matrices.
fn mean_pairwise_cosine(graph: &mut Graph, mats: &[Var], what: &str) -> Result<Var> {
    same_shapes(graph, mats, what)?;
    let h = mats.len() as f64;
    let rows = graph.value(mats[0]).rows() as f64;
    let mut total = graph.normalize_rows(mats[0], COSINE_EPS)?;
    for &m in &mats[1..] {
        let unit = graph.normalize_rows(m, COSINE_EPS)?;
        total = graph.add(total, unit)?;
    }
    let sq = graph.square(total)?;
    let s = graph.sum(sq)?;
    graph.scale(s, -1.0 / (h * h * rows))
}

fn position_divisor(graph: &Graph, attn: Var, norm: PositionNormalization) -> f64 {
    match norm {
        PositionNormalization::PerQueryMean => graph.value(attn).rows() as f64,
        PositionNormalization::RowSum => 1.0,
    }
}

pub fn d_subspace(graph: &mut Graph, trace: &AttentionTrace) -> Result<Var> {
    require_heads(trace)?;
    let values: Vec<Var> = trace.heads.iter().map(|h| h.values).collect();
    mean_pairwise_cosine(graph, &values, "value")
}

pub fn d_output(graph: &mut Graph, trace: &AttentionTrace) -> Result<Var> {
    require_heads(trace)?;
    let outputs: Vec<Var> = trace.heads.iter().map(|h| h.output).collect();
    mean_pairwise_cosine(graph, &outputs, "output")
}

pub fn d_position(
    graph: &mut Graph,
    trace: &AttentionTrace,
    norm: PositionNormalization,
) -> Result<Var> {
    let h = require_heads(trace)? as f64;
    let attn: Vec<Var> = trace.heads.iter().map(|h| h.attn).collect();
    same_shapes(graph, &attn, "attention")?;
    let div = position_divisor(graph, attn[0], norm);
    let mut total = attn[0];
    for &a in &attn[1..] {
        total = graph.add(total, a)?;
    }
    let sq = graph.square(total)?;
    let s = graph.sum(sq)?;
    graph.scale(s, -1.0 / (h * h * div))
}

/// Squared-difference position term, signed so larger head differences
/// give a larger value.
pub fn d_position_sos(
    graph: &mut Graph,
    trace: &AttentionTrace,
    norm: PositionNormalization,
) -> Result<Var> {
    let h = require_heads(trace)? as f64;
    let attn: Vec<Var> = trace.heads.iter().map(|h| h.attn).collect();
    same_shapes(graph, &attn, "attention")?;
    let div = position_divisor(graph, attn[0], norm);
    let mut total = attn[0];
    let mut self_sq = {
        let sq = graph.square(attn[0])?;
        graph.sum(sq)?
    };
    for &a in &attn[1..] {
        total = graph.add(total, a)?;
        let sq = graph.square(a)?;
        let s = graph.sum(sq)?;
        self_sq = graph.add(self_sq, s)?;
    }
    let cross = {
        let sq = graph.square(total)?;
        graph.sum(sq)?
    };
    let a = graph.scale(self_sq, 2.0 * h)?;
    let b = graph.scale(cross, 2.0)?;
    let diff = graph.sub(a, b)?;
    graph.scale(diff, 1.0 / (h * h * div))
}

pub fn term_value(
    graph: &mut Graph,
    trace: &AttentionTrace,
    term: Term,
    norm: PositionNormalization,
) -> Result<Var> {
    match term {
        Term::Subspace => d_subspace(graph, trace),
        Term::Position => d_position(graph, trace, norm),
        Term::PositionSos => d_position_sos(graph, trace, norm),
        Term::Output => d_output(graph, trace),
    }
}

/// Mean of one term over the traces whose network is targeted.
pub fn term_over_traces(
    graph: &mut Graph,
    traces: &[AttentionTrace],
    term: Term,
    config: &DisagreementConfig,
) -> Result<Var> {
    let targeted: Vec<&AttentionTrace> = traces
        .iter()
        .filter(|t| config.networks.contains(&t.site.network))
        .collect();
    if targeted.is_empty() {
        return Err(Error::config(format!(
            "term {term} is enabled but no trace belongs to a targeted network"
        )));
    }
    let mut acc: Option<Var> = None;
    for t in &targeted {
        let v = term_value(graph, t, term, config.position_normalization)?;
        acc = Some(match acc {
            Some(a) => graph.add(a, v)?,
            None => v,
        });
    }
    graph.scale(acc.expect("non-empty"), 1.0 / targeted.len() as f64)
}

/// The `D` of the composite objective: per enabled term, the mean over all
/// targeted traces; then the sum over enabled terms.
pub fn total_disagreement(
    graph: &mut Graph,
    traces: &[AttentionTrace],
    config: &DisagreementConfig,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &term in &config.terms {
        let v = term_over_traces(graph, traces, term, config)?;
        acc = Some(match acc {
            Some(a) => graph.add(a, v)?,
            None => v,
        });
    }
    Ok(match acc {
        Some(v) => v,
        None => graph.constant(Tensor::scalar(0.0)),
    })
}
