//! A small pre-norm encoder–decoder transformer and its training objective.
//!
//! Every attention sub-layer records an [`AttentionTrace`] tagged with its
//! network and layer. The objective maximizes
//! `J = log-likelihood + λ·D` by minimizing `loss = NLL − λ·D`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    causal_mask, head_width, multi_head_attention, AttentionTrace, AttentionVars, Network, Site,
};
use crate::autodiff::{Graph, Var};
use crate::data::{Example, BOS, EOS};
use crate::disagreement::{term_over_traces, DisagreementConfig, Term};
use crate::error::{Error, Result};
use crate::param::{glorot_uniform, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_width: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 19,
            d_model: 32,
            d_head: 8,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_width: 64,
            max_len: 10,
            seed: 7,
        }
    }
}

impl ModelConfig {
    /// d=8, H=2, one encoder and one decoder layer, vocab 8: small enough to
    /// finite-difference every parameter.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 8,
            d_model: 8,
            d_head: 4,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_width: 16,
            max_len: 5,
            seed: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("ffn_width", self.ffn_width),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be at least 1")));
        }
        if self.heads * self.d_head != self.d_model {
            return Err(Error::config(format!(
                "model.d_model ({}) must equal heads ({}) × d_head ({})",
                self.d_model, self.heads, self.d_head
            )));
        }
        head_width(self.d_model, self.heads)?;
        if self.vocab_size <= crate::data::NUM_SPECIALS {
            return Err(Error::config("model.vocab_size must exceed the 3 special symbols"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct AttnIds {
    w_q: Vec<usize>,
    w_k: Vec<usize>,
    w_v: Vec<usize>,
    w_o: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct NormIds {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct FfnIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderLayer {
    norm1: NormIds,
    self_attn: AttnIds,
    norm2: NormIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderLayer {
    norm1: NormIds,
    self_attn: AttnIds,
    norm2: NormIds,
    cross_attn: AttnIds,
    norm3: NormIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embedding: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: NormIds,
    decoder: Vec<DecoderLayer>,
    decoder_norm: NormIds,
    out_w: usize,
    out_b: usize,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    cfg: &'a ModelConfig,
}

impl Builder<'_> {
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> Result<usize> {
        let t = glorot_uniform(&mut self.rng, rows, cols);
        self.store.insert(name, t)
    }

    fn attn(&mut self, prefix: &str) -> Result<AttnIds> {
        let (d, dk, h) = (self.cfg.d_model, self.cfg.d_head, self.cfg.heads);
        let ids = |kind: &str, b: &mut Self| -> Result<Vec<usize>> {
            (0..h)
                .map(|i| b.matrix(format!("{prefix}.{kind}.head{i}"), d, dk))
                .collect()
        };
        let w_q = ids("w_q", self)?;
        let w_k = ids("w_k", self)?;
        let w_v = ids("w_v", self)?;
        let w_o = self.matrix(format!("{prefix}.w_o"), h * dk, d)?;
        Ok(AttnIds { w_q, w_k, w_v, w_o })
    }

    fn norm(&mut self, prefix: &str) -> Result<NormIds> {
        let d = self.cfg.d_model;
        Ok(NormIds {
            gain: self.store.insert(format!("{prefix}.gain"), Tensor::ones(&[1, d]))?,
            bias: self.store.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, d]))?,
        })
    }

    fn ffn(&mut self, prefix: &str) -> Result<FfnIds> {
        let (d, f) = (self.cfg.d_model, self.cfg.ffn_width);
        Ok(FfnIds {
            w1: self.matrix(format!("{prefix}.w1"), d, f)?,
            b1: self.store.insert(format!("{prefix}.b1"), Tensor::zeros(&[1, f]))?,
            w2: self.matrix(format!("{prefix}.w2"), f, d)?,
            b2: self.store.insert(format!("{prefix}.b2"), Tensor::zeros(&[1, d]))?,
        })
    }
}

/// Sinusoidal position table, `max_len × d`.
pub fn positional_encoding(max_len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[max_len, d]);
    for pos in 0..max_len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            t.data_mut()[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
    positions: Tensor,
}

/// Graph handles for every parameter, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Output of a teacher-forced forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `T × vocab`, row `t` predicting target token `t + 1`.
    pub logits: Var,
    pub traces: Vec<AttentionTrace>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            cfg: &config,
        };
        let embedding = b.matrix("embedding".into(), config.vocab_size, config.d_model)?;
        let mut encoder = Vec::new();
        for l in 0..config.encoder_layers {
            let p = format!("encoder.layer{l}");
            encoder.push(EncoderLayer {
                norm1: b.norm(&format!("{p}.norm1"))?,
                self_attn: b.attn(&format!("{p}.self_attn"))?,
                norm2: b.norm(&format!("{p}.norm2"))?,
                ffn: b.ffn(&format!("{p}.ffn"))?,
            });
        }
        let encoder_norm = b.norm("encoder.final_norm")?;
        let mut decoder = Vec::new();
        for l in 0..config.decoder_layers {
            let p = format!("decoder.layer{l}");
            decoder.push(DecoderLayer {
                norm1: b.norm(&format!("{p}.norm1"))?,
                self_attn: b.attn(&format!("{p}.self_attn"))?,
                norm2: b.norm(&format!("{p}.norm2"))?,
                cross_attn: b.attn(&format!("{p}.cross_attn"))?,
                norm3: b.norm(&format!("{p}.norm3"))?,
                ffn: b.ffn(&format!("{p}.ffn"))?,
            });
        }
        let decoder_norm = b.norm("decoder.final_norm")?;
        let out_w = b.matrix("output.w".into(), config.d_model, config.vocab_size)?;
        let out_b = b
            .store
            .insert("output.b", Tensor::zeros(&[1, config.vocab_size]))?;
        let layout = Layout {
            embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            out_w,
            out_b,
        };
        let positions = positional_encoding(config.max_len, config.d_model);
        Ok(Model {
            config,
            params,
            layout,
            positions,
        })
    }

    /// Rebuilds a model from a config and a complete set of named tensors.
    pub fn from_parameters(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Model::new(config)?;
        if tensors.len() != model.params.len() {
            return Err(Error::parse(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = model
                .params
                .id_of(&name)
                .ok_or_else(|| Error::parse(format!("unknown parameter {name:?}")))?;
            let slot = model.params.iter_mut().nth(id).expect("valid id");
            if slot.tensor.shape() != t.shape() {
                return Err(Error::parse(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.tensor.shape()
                )));
            }
            slot.tensor = t.with_requires_grad(true);
        }
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Number of attention sub-layers, i.e. traces per forward pass.
    pub fn num_attention_layers(&self) -> usize {
        self.config.encoder_layers + 2 * self.config.decoder_layers
    }

    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self.params.bind(graph),
        }
    }

    fn attn_vars(bound: &Bound, ids: &AttnIds) -> AttentionVars {
        AttentionVars {
            w_q: ids.w_q.iter().map(|&i| bound.vars[i]).collect(),
            w_k: ids.w_k.iter().map(|&i| bound.vars[i]).collect(),
            w_v: ids.w_v.iter().map(|&i| bound.vars[i]).collect(),
            w_o: bound.vars[ids.w_o],
        }
    }

    fn norm(g: &mut Graph, bound: &Bound, ids: &NormIds, x: Var) -> Result<Var> {
        let y = g.layer_norm_rows(x, LAYER_NORM_EPS)?;
        let y = g.mul_row(y, bound.vars[ids.gain])?;
        g.add_row(y, bound.vars[ids.bias])
    }

    fn ffn(g: &mut Graph, bound: &Bound, ids: &FfnIds, x: Var) -> Result<Var> {
        let h = g.matmul(x, bound.vars[ids.w1])?;
        let h = g.add_row(h, bound.vars[ids.b1])?;
        let h = g.relu(h)?;
        let o = g.matmul(h, bound.vars[ids.w2])?;
        g.add_row(o, bound.vars[ids.b2])
    }

    fn check_tokens(&self, tokens: &[usize], what: &str) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::contract(format!("{what} sequence is empty")));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::contract(format!(
                "{what} length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "{what} token {t} is outside the vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, bound: &Bound, tokens: &[usize]) -> Result<Var> {
        let e = g.gather_rows(bound.vars[self.layout.embedding], tokens)?;
        let d = self.config.d_model;
        let pe = Tensor::new(
            vec![tokens.len(), d],
            self.positions.data()[..tokens.len() * d].to_vec(),
        )?;
        let pe = g.constant(pe);
        g.add(e, pe)
    }

    /// Encoder memory for `source`, plus one trace per encoder layer.
    pub fn encode(
        &self,
        g: &mut Graph,
        bound: &Bound,
        source: &[usize],
    ) -> Result<(Var, Vec<AttentionTrace>)> {
        self.check_tokens(source, "source")?;
        let mut x = self.embed(g, bound, source)?;
        let mut traces = Vec::with_capacity(self.config.encoder_layers);
        for (l, layer) in self.layout.encoder.iter().enumerate() {
            let h = Self::norm(g, bound, &layer.norm1, x)?;
            let site = Site {
                network: Network::EncoderSelf,
                layer: l,
            };
            let (a, trace) = multi_head_attention(
                g,
                h,
                h,
                h,
                &Self::attn_vars(bound, &layer.self_attn),
                None,
                site,
            )?;
            traces.push(trace);
            x = g.add(x, a)?;
            let h = Self::norm(g, bound, &layer.norm2, x)?;
            let f = Self::ffn(g, bound, &layer.ffn, h)?;
            x = g.add(x, f)?;
        }
        let memory = Self::norm(g, bound, &self.layout.encoder_norm, x)?;
        Ok((memory, traces))
    }

    /// Decoder logits for every position of `decoder_input`.
    pub fn decode(
        &self,
        g: &mut Graph,
        bound: &Bound,
        memory: Var,
        decoder_input: &[usize],
    ) -> Result<(Var, Vec<AttentionTrace>)> {
        self.check_tokens(decoder_input, "target")?;
        let mut y = self.embed(g, bound, decoder_input)?;
        let mask = causal_mask(decoder_input.len());
        let mut traces = Vec::with_capacity(2 * self.config.decoder_layers);
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            let h = Self::norm(g, bound, &layer.norm1, y)?;
            let (a, trace) = multi_head_attention(
                g,
                h,
                h,
                h,
                &Self::attn_vars(bound, &layer.self_attn),
                Some(&mask),
                Site {
                    network: Network::DecoderSelf,
                    layer: l,
                },
            )?;
            traces.push(trace);
            y = g.add(y, a)?;
            let h = Self::norm(g, bound, &layer.norm2, y)?;
            let (c, trace) = multi_head_attention(
                g,
                h,
                memory,
                memory,
                &Self::attn_vars(bound, &layer.cross_attn),
                None,
                Site {
                    network: Network::EncoderDecoder,
                    layer: l,
                },
            )?;
            traces.push(trace);
            y = g.add(y, c)?;
            let h = Self::norm(g, bound, &layer.norm3, y)?;
            let f = Self::ffn(g, bound, &layer.ffn, h)?;
            y = g.add(y, f)?;
        }
        let y = Self::norm(g, bound, &self.layout.decoder_norm, y)?;
        let logits = g.matmul(y, bound.vars[self.layout.out_w])?;
        let logits = g.add_row(logits, bound.vars[self.layout.out_b])?;
        Ok((logits, traces))
    }

    /// Teacher-forced pass: the decoder reads `target[..T]` and row `t` of
    /// the logits scores `target[t + 1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        source: &[usize],
        target: &[usize],
    ) -> Result<ForwardPass> {
        if target.len() < 2 {
            return Err(Error::contract(
                "target needs at least BOS and one predicted token",
            ));
        }
        self.check_tokens(target, "target")?;
        let (memory, mut traces) = self.encode(g, bound, source)?;
        let (logits, dec) = self.decode(g, bound, memory, &target[..target.len() - 1])?;
        traces.extend(dec);
        Ok(ForwardPass { logits, traces })
    }

    /// Argmax decoding from BOS until EOS or `max_len` tokens. The result
    /// starts with BOS.
    pub fn greedy_decode(&self, source: &[usize]) -> Result<Vec<usize>> {
        let mut g = Graph::no_grad();
        let bound = self.bind(&mut g);
        let (memory, _) = self.encode(&mut g, &bound, source)?;
        let mut out = vec![BOS];
        while out.len() < self.config.max_len {
            let (logits, _) = self.decode(&mut g, &bound, memory, &out)?;
            let l = g.value(logits);
            let next = argmax(l.row(l.rows() - 1));
            out.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(out)
    }

    /// Teacher-forced argmax accuracy over all predicted target tokens.
    pub fn token_accuracy(&self, examples: &[Example]) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for ex in examples {
            let mut g = Graph::no_grad();
            let bound = self.bind(&mut g);
            let fp = self.forward(&mut g, &bound, &ex.source, &ex.target)?;
            let l = g.value(fp.logits);
            for (t, &gold) in ex.target[1..].iter().enumerate() {
                correct += usize::from(argmax(l.row(t)) == gold);
                total += 1;
            }
        }
        Ok(if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Scalar pieces of the objective for one instance or a batch mean.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjectiveBreakdown {
    /// Mean per-token negative log-likelihood.
    pub nll: f64,
    /// Mean per-token log-likelihood, `−nll`.
    pub log_likelihood: f64,
    /// Total disagreement `D` over enabled terms.
    pub disagreement: f64,
    pub lambda: f64,
    /// `J = log_likelihood + λ·D`.
    pub j: f64,
    /// Minimized quantity, `−J`.
    pub loss: f64,
    /// Value of each enabled term (mean over targeted traces).
    pub terms: BTreeMap<Term, f64>,
}

impl ObjectiveBreakdown {
    pub fn mean(items: &[ObjectiveBreakdown]) -> ObjectiveBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = ObjectiveBreakdown {
            lambda: items.first().map(|b| b.lambda).unwrap_or(0.0),
            ..Default::default()
        };
        for b in items {
            out.nll += b.nll / n;
            out.log_likelihood += b.log_likelihood / n;
            out.disagreement += b.disagreement / n;
            out.j += b.j / n;
            out.loss += b.loss / n;
            for (&t, &v) in &b.terms {
                *out.terms.entry(t).or_insert(0.0) += v / n;
            }
        }
        out
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<String> {
        if !self.nll.is_finite() {
            return Some("likelihood".into());
        }
        if let Some((t, _)) = self.terms.iter().find(|(_, v)| !v.is_finite()) {
            return Some(format!("disagreement term {t}"));
        }
        if !self.loss.is_finite() {
            return Some("loss".into());
        }
        None
    }
}

pub struct Objective {
    pub loss: Var,
    pub breakdown: ObjectiveBreakdown,
}

/// `loss = NLL − λ·D`, with `D` the sum over enabled terms of each term's
/// mean over targeted traces. The objective adds no parameters.
pub fn objective(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    traces: &[AttentionTrace],
    config: &DisagreementConfig,
) -> Result<Objective> {
    let nll = g.cross_entropy(logits, targets)?;
    let mut terms = BTreeMap::new();
    let mut d: Option<Var> = None;
    for &term in &config.terms {
        let v = term_over_traces(g, traces, term, config)?;
        terms.insert(term, g.item(v));
        d = Some(match d {
            Some(acc) => g.add(acc, v)?,
            None => v,
        });
    }
    let d_value = d.map(|v| g.item(v)).unwrap_or(0.0);
    let loss = match d {
        Some(d) if config.lambda != 0.0 => {
            let scaled = g.scale(d, config.lambda)?;
            g.sub(nll, scaled)?
        }
        _ => nll,
    };
    let nll_value = g.item(nll);
    let ll = -nll_value;
    let j = ll + config.lambda * d_value;
    Ok(Objective {
        loss,
        breakdown: ObjectiveBreakdown {
            nll: nll_value,
            log_likelihood: ll,
            disagreement: d_value,
            lambda: config.lambda,
            j,
            loss: g.item(loss),
            terms,
        },
    })
}

impl Model {
    /// Forward pass plus objective for one example.
    pub fn example_objective(
        &self,
        g: &mut Graph,
        bound: &Bound,
        example: &Example,
        config: &DisagreementConfig,
    ) -> Result<(Objective, Vec<AttentionTrace>)> {
        let fp = self.forward(g, bound, &example.source, &example.target)?;
        let obj = objective(g, fp.logits, &example.target[1..], &fp.traces, config)?;
        Ok((obj, fp.traces))
    }

    /// Mean objective over a batch, recorded on one graph.
    pub fn batch_objective(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &[&Example],
        config: &DisagreementConfig,
        check_rows: bool,
    ) -> Result<(Var, ObjectiveBreakdown)> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut total: Option<Var> = None;
        let mut parts = Vec::with_capacity(batch.len());
        for ex in batch {
            let (obj, traces) = self.example_objective(g, bound, ex, config)?;
            if check_rows {
                for t in &traces {
                    t.check_row_stochastic(g, 1e-9)?;
                }
            }
            parts.push(obj.breakdown);
            total = Some(match total {
                Some(acc) => g.add(acc, obj.loss)?,
                None => obj.loss,
            });
        }
        let loss = g.scale(total.expect("non-empty"), 1.0 / batch.len() as f64)?;
        Ok((loss, ObjectiveBreakdown::mean(&parts)))
    }
}
