//! Multi-head scaled dot-product attention with per-head internals exposed.
//!
//! Each head `h` projects queries, keys and values with its own `d × d_k`
//! matrices, attends with `A^h = softmax(Q^h K^hᵀ / √d_k)`, and produces
//! `O^h = A^h V^h`. Head outputs are concatenated and mapped back to width
//! `d` by `W^O`. The [`AttentionTrace`] keeps `A^h`, `V^h` and `O^h` as live
//! graph nodes so regularizers computed from it backpropagate into the
//! projections.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::glorot_uniform;
use crate::tensor::Tensor;

/// Additive logit for disallowed positions.
pub const MASK_LOGIT: f64 = -1e9;

/// Which attention network a sub-layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Network {
    EncoderSelf,
    DecoderSelf,
    EncoderDecoder,
}

impl Network {
    pub const ALL: [Network; 3] = [
        Network::EncoderSelf,
        Network::DecoderSelf,
        Network::EncoderDecoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Network::EncoderSelf => "encoder-self",
            Network::DecoderSelf => "decoder-self",
            Network::EncoderDecoder => "encoder-decoder",
        }
    }

    pub fn parse(s: &str) -> Option<Network> {
        Network::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub network: Network,
    pub layer: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadTrace {
    /// `A^h`, N×M.
    pub attn: Var,
    /// `V^h`, M×d_k.
    pub values: Var,
    /// `O^h`, N×d_k.
    pub output: Var,
}

/// Per-head internals of one attention sub-layer for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub site: Site,
    pub heads: Vec<HeadTrace>,
}

impl AttentionTrace {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Verifies that every attention row is a probability distribution.
    pub fn check_row_stochastic(&self, graph: &Graph, tol: f64) -> Result<()> {
        for (h, head) in self.heads.iter().enumerate() {
            let a = graph.value(head.attn);
            for i in 0..a.rows() {
                let s: f64 = a.row(i).iter().sum();
                if (s - 1.0).abs() > tol {
                    return Err(Error::contract(format!(
                        "{} layer {} head {h} row {i} sums to {s}",
                        self.site.network, self.site.layer
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes `{network}.layer{l}.head{h}.csv` for every head into `dir`.
    pub fn dump_csv(&self, graph: &Graph, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (h, head) in self.heads.iter().enumerate() {
            let path = dir.join(format!(
                "{}.layer{}.head{h}.csv",
                self.site.network, self.site.layer
            ));
            std::fs::write(&path, graph.value(head.attn).to_csv()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Standalone parameter set for one multi-head attention sub-layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttentionParams {
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    pub w_o: Tensor,
}

impl MultiHeadAttentionParams {
    pub fn init<R: Rng>(rng: &mut R, d_model: usize, heads: usize) -> Result<Self> {
        let d_head = head_width(d_model, heads)?;
        let mut proj = || -> Vec<Tensor> {
            (0..heads)
                .map(|_| glorot_uniform(rng, d_model, d_head))
                .collect()
        };
        let (w_q, w_k, w_v) = (proj(), proj(), proj());
        let w_o = glorot_uniform(rng, heads * d_head, d_model);
        Ok(MultiHeadAttentionParams {
            heads,
            d_model,
            d_head,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    pub fn bind(&self, graph: &mut Graph) -> AttentionVars {
        AttentionVars {
            w_q: self.w_q.iter().map(|t| graph.param(t)).collect(),
            w_k: self.w_k.iter().map(|t| graph.param(t)).collect(),
            w_v: self.w_v.iter().map(|t| graph.param(t)).collect(),
            w_o: graph.param(&self.w_o),
        }
    }
}

/// `d_k = d / H`, requiring an exact split.
pub fn head_width(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "model width {d_model} is not divisible into {heads} heads"
        )));
    }
    Ok(d_model / heads)
}

/// Graph handles of one sub-layer's weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionVars {
    pub w_q: Vec<Var>,
    pub w_k: Vec<Var>,
    pub w_v: Vec<Var>,
    pub w_o: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadProjection {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// Boolean N×M allow-matrix; `true` means the query may attend the key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::Shape {
                op: "mask",
                lhs: vec![rows, cols],
                rhs: vec![allow.len()],
            });
        }
        Ok(Mask { rows, cols, allow })
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn additive(&self) -> Tensor {
        let data = self
            .allow
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_LOGIT })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("mask dims")
    }
}

/// Lower-triangular mask: position `i` sees positions `0..=i`.
pub fn causal_mask(n: usize) -> Mask {
    let allow = (0..n * n).map(|idx| idx % n <= idx / n).collect();
    Mask {
        rows: n,
        cols: n,
        allow,
    }
}

pub fn project_heads(
    graph: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    params: &AttentionVars,
) -> Result<Vec<HeadProjection>> {
    let heads = params.w_q.len();
    if heads == 0 || params.w_k.len() != heads || params.w_v.len() != heads {
        return Err(Error::contract("attention needs the same non-zero number of Q, K, V projections"));
    }
    (0..heads)
        .map(|h| {
            Ok(HeadProjection {
                q: graph.matmul(q, params.w_q[h])?,
                k: graph.matmul(k, params.w_k[h])?,
                v: graph.matmul(v, params.w_v[h])?,
            })
        })
        .collect()
}

/// Returns `(O^h, A^h)`.
pub fn scaled_dot_attention(
    graph: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<(Var, Var)> {
    let d_k = graph.value(q).cols();
    if graph.value(k).cols() != d_k || graph.value(k).rows() != graph.value(v).rows() {
        return Err(Error::Shape {
            op: "scaled_dot_attention",
            lhs: graph.value(q).shape().to_vec(),
            rhs: graph.value(k).shape().to_vec(),
        });
    }
    let kt = graph.transpose(k)?;
    let logits = graph.matmul(q, kt)?;
    let mut logits = graph.scale(logits, 1.0 / (d_k as f64).sqrt())?;
    if let Some(mask) = mask {
        let (n, m) = (graph.value(q).rows(), graph.value(k).rows());
        if mask.shape() != (n, m) {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: vec![n, m],
                rhs: vec![mask.rows, mask.cols],
            });
        }
        if let Some(i) = (0..n).find(|&i| (0..m).all(|j| !mask.allows(i, j))) {
            return Err(Error::contract(format!("mask row {i} allows no keys")));
        }
        let additive = graph.constant(mask.additive());
        logits = graph.add(logits, additive)?;
    }
    let attn = graph.softmax_rows(logits)?;
    let out = graph.matmul(attn, v)?;
    Ok((out, attn))
}

/// `concat(O^1..O^H) · W^O`, plus the trace of every head.
pub fn multi_head_attention(
    graph: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    params: &AttentionVars,
    mask: Option<&Mask>,
    site: Site,
) -> Result<(Var, AttentionTrace)> {
    let projections = project_heads(graph, q, k, v, params)?;
    let mut heads = Vec::with_capacity(projections.len());
    let mut outputs = Vec::with_capacity(projections.len());
    for p in projections {
        let (o, a) = scaled_dot_attention(graph, p.q, p.k, p.v, mask)?;
        heads.push(HeadTrace {
            attn: a,
            values: p.v,
            output: o,
        });
        outputs.push(o);
    }
    let cat = graph.concat_cols(&outputs)?;
    let out = graph.matmul(cat, params.w_o)?;
    Ok((out, AttentionTrace { site, heads }))
}
