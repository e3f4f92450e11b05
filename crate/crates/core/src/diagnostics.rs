//! exp(D) disagreement reports and finite-difference gradient checking.

use std::fmt::{self, Write as _};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::Network;
use crate::autodiff::{BackwardFault, Graph};
use crate::data::Example;
use crate::disagreement::{
    d_output, d_position, d_subspace, DisagreementConfig, PositionNormalization,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

/// Columns of a disagreement report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Measure {
    Subspace,
    /// Position term divided by the query count.
    PositionMean,
    /// Position term summed over query rows.
    PositionRowSum,
    Output,
}

impl Measure {
    pub const ALL: [Measure; 4] = [
        Measure::Subspace,
        Measure::PositionMean,
        Measure::PositionRowSum,
        Measure::Output,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Measure::Subspace => "subspace",
            Measure::PositionMean => "position-mean",
            Measure::PositionRowSum => "position-row-sum",
            Measure::Output => "output",
        }
    }

    pub fn parse(s: &str) -> Option<Measure> {
        Measure::ALL.into_iter().find(|m| m.as_str() == s)
    }

    fn label(self) -> &'static str {
        match self {
            Measure::Subspace => "Sub.",
            Measure::PositionMean => "Pos.(mean)",
            Measure::PositionRowSum => "Pos.(sum)",
            Measure::Output => "Out.",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Corpus-mean `D` of every measure at one attention sub-layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerScores {
    pub network: Network,
    pub layer: usize,
    /// Indexed like [`Measure::ALL`].
    pub d: [f64; 4],
}

impl LayerScores {
    pub fn get(&self, m: Measure) -> f64 {
        self.d[m as usize]
    }

    pub fn exp(&self, m: Measure) -> f64 {
        self.get(m).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisagreementReport {
    pub corpus: String,
    pub checkpoint: String,
    pub layers: Vec<LayerScores>,
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Content hash of a corpus, stable across platforms.
pub fn corpus_identity(examples: &[Example]) -> String {
    let mut h = FNV_OFFSET;
    for ex in examples {
        for seq in [&ex.source, &ex.target] {
            h = fnv1a((seq.len() as u64).to_le_bytes(), h);
            for &t in seq.iter() {
                h = fnv1a((t as u64).to_le_bytes(), h);
            }
        }
    }
    format!("{}-examples-fnv1a-{h:016x}", examples.len())
}

/// Content hash of the parameter values and names.
pub fn model_identity(model: &Model) -> String {
    let mut h = FNV_OFFSET;
    for p in model.params.iter() {
        h = fnv1a(p.name.bytes(), h);
        for &v in p.tensor.data() {
            h = fnv1a(v.to_bits().to_le_bytes(), h);
        }
    }
    format!("{}-params-fnv1a-{h:016x}", model.num_parameters())
}

impl DisagreementReport {
    pub fn layer(&self, network: Network, layer: usize) -> Option<&LayerScores> {
        self.layers
            .iter()
            .find(|l| l.network == network && l.layer == layer)
    }

    pub fn networks(&self) -> Vec<Network> {
        let mut nets: Vec<Network> = self.layers.iter().map(|l| l.network).collect();
        nets.dedup();
        nets
    }

    /// Mean `D` over the network's layers, or `None` when it has none.
    pub fn aggregate(&self, network: Network, m: Measure) -> Option<f64> {
        let vals: Vec<f64> = self
            .layers
            .iter()
            .filter(|l| l.network == network)
            .map(|l| l.get(m))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn aggregate_exp(&self, network: Network, m: Measure) -> Option<f64> {
        self.aggregate(network, m).map(f64::exp)
    }

    /// One row per network × layer × measure, then one aggregate row per
    /// network × measure with layer `mean`. Values keep all 17 digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# corpus: {}", self.corpus).unwrap();
        writeln!(s, "# checkpoint: {}", self.checkpoint).unwrap();
        s.push_str("network,layer,term,d,exp_d\n");
        for l in &self.layers {
            for m in Measure::ALL {
                let d = l.get(m);
                writeln!(s, "{},{},{m},{d:.16e},{:.16e}", l.network, l.layer, d.exp()).unwrap();
            }
        }
        for net in self.networks() {
            for m in Measure::ALL {
                let d = self.aggregate(net, m).expect("network has layers");
                writeln!(s, "{net},mean,{m},{d:.16e},{:.16e}", d.exp()).unwrap();
            }
        }
        s
    }

    /// Inverse of [`DisagreementReport::to_csv`]. Aggregate rows are checked
    /// for consistency with the per-layer rows.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut corpus = None;
        let mut checkpoint = None;
        let mut header = false;
        let mut layers: Vec<LayerScores> = Vec::new();
        let mut seen: Vec<(Network, usize, Measure)> = Vec::new();
        let mut aggregates = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if let Some(rest) = line.strip_prefix("# corpus: ") {
                corpus = Some(rest.to_string());
                continue;
            }
            if let Some(rest) = line.strip_prefix("# checkpoint: ") {
                checkpoint = Some(rest.to_string());
                continue;
            }
            if !header {
                if line != "network,layer,term,d,exp_d" {
                    return Err(Error::parse(format!("report line {lineno}: expected header")));
                }
                header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::parse(format!("report line {lineno}: expected 5 fields")));
            }
            let net = Network::parse(f[0])
                .ok_or_else(|| Error::parse(format!("report line {lineno}: unknown network {:?}", f[0])))?;
            let m = Measure::parse(f[2])
                .ok_or_else(|| Error::parse(format!("report line {lineno}: unknown term {:?}", f[2])))?;
            let d: f64 = f[3]
                .parse()
                .map_err(|_| Error::parse(format!("report line {lineno}: bad value {:?}", f[3])))?;
            let e: f64 = f[4]
                .parse()
                .map_err(|_| Error::parse(format!("report line {lineno}: bad value {:?}", f[4])))?;
            if !d.is_finite() || d > 1.0 || (e - d.exp()).abs() > 1e-15 * e.abs().max(1.0) {
                return Err(Error::parse(format!("report line {lineno}: inconsistent values")));
            }
            if f[1] == "mean" {
                aggregates.push((lineno, net, m, d));
                continue;
            }
            let layer: usize = f[1]
                .parse()
                .map_err(|_| Error::parse(format!("report line {lineno}: bad layer {:?}", f[1])))?;
            if seen.contains(&(net, layer, m)) {
                return Err(Error::parse(format!("report line {lineno}: duplicate row")));
            }
            seen.push((net, layer, m));
            match layers.iter_mut().find(|l| l.network == net && l.layer == layer) {
                Some(l) => l.d[m as usize] = d,
                None => {
                    let mut l = LayerScores {
                        network: net,
                        layer,
                        d: [f64::NAN; 4],
                    };
                    l.d[m as usize] = d;
                    layers.push(l);
                }
            }
        }
        if !header {
            return Err(Error::parse("report has no header"));
        }
        if layers.iter().any(|l| l.d.iter().any(|v| v.is_nan())) {
            return Err(Error::parse("report is missing a term for some layer"));
        }
        layers.sort_by_key(|l| (l.network, l.layer));
        let report = DisagreementReport {
            corpus: corpus.ok_or_else(|| Error::parse("report has no corpus identity"))?,
            checkpoint: checkpoint.ok_or_else(|| Error::parse("report has no checkpoint identity"))?,
            layers,
        };
        for (lineno, net, m, d) in aggregates {
            match report.aggregate(net, m) {
                Some(a) if a.to_bits() == d.to_bits() || (a - d).abs() <= 1e-15 * a.abs() => {}
                _ => {
                    return Err(Error::parse(format!(
                        "report line {lineno}: aggregate does not match layers"
                    )))
                }
            }
        }
        Ok(report)
    }

    /// Per-network exp(D) summary, one row per network.
    pub fn summary_table(&self) -> String {
        let mut s = format!("{:<16}", "network");
        for m in Measure::ALL {
            write!(s, "{:>12}", m.label()).unwrap();
        }
        s.push('\n');
        for net in self.networks() {
            write!(s, "{:<16}", net.as_str()).unwrap();
            for m in Measure::ALL {
                write!(s, "{:>12.4}", self.aggregate_exp(net, m).unwrap_or(f64::NAN)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// exp(D) per layer of one network: rows are measures, columns are layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTable {
    pub network: Network,
    pub layers: Vec<usize>,
    pub rows: Vec<(Measure, Vec<f64>)>,
}

impl LayerTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("term");
        for l in &self.layers {
            write!(s, ",layer{l}").unwrap();
        }
        s.push('\n');
        for (m, vals) in &self.rows {
            s.push_str(m.as_str());
            for v in vals {
                write!(s, ",{v:.16e}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Vec<(Measure, Vec<f64>)>> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse("empty table"))?;
        let width = header.split(',').count() - 1;
        lines
            .map(|line| {
                let mut f = line.split(',');
                let m = f
                    .next()
                    .and_then(Measure::parse)
                    .ok_or_else(|| Error::parse("table row has no term"))?;
                let vals = f
                    .map(|v| v.parse::<f64>().map_err(|_| Error::parse(format!("bad value {v:?}"))))
                    .collect::<Result<Vec<f64>>>()?;
                if vals.len() != width {
                    return Err(Error::parse("ragged table row"));
                }
                Ok((m, vals))
            })
            .collect()
    }
}

impl fmt::Display for LayerTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12}", self.network.as_str())?;
        for l in &self.layers {
            write!(f, "{:>10}", format!("layer {l}"))?;
        }
        writeln!(f)?;
        for (m, vals) in &self.rows {
            write!(f, "{:<12}", m.label())?;
            for v in vals {
                write!(f, "{v:>10.4}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn per_layer_table(report: &DisagreementReport, network: Network) -> LayerTable {
    let scores: Vec<&LayerScores> = report
        .layers
        .iter()
        .filter(|l| l.network == network)
        .collect();
    LayerTable {
        network,
        layers: scores.iter().map(|l| l.layer).collect(),
        rows: Measure::ALL
            .into_iter()
            .map(|m| (m, scores.iter().map(|l| l.exp(m)).collect()))
            .collect(),
    }
}

/// Every measure on every trace of the given networks, averaged over the
/// corpus before exponentiation. No gradients are recorded and the model
/// is not modified.
pub fn measure_disagreement(
    model: &Model,
    corpus: &[Example],
    networks: &[Network],
) -> Result<DisagreementReport> {
    if corpus.is_empty() {
        return Err(Error::contract("cannot measure disagreement on an empty corpus"));
    }
    let mut layers: Vec<LayerScores> = Vec::new();
    for ex in corpus {
        let mut g = Graph::no_grad();
        let bound = model.bind(&mut g);
        let fp = model.forward(&mut g, &bound, &ex.source, &ex.target)?;
        for trace in fp.traces.iter().filter(|t| networks.contains(&t.site.network)) {
            let vals = [
                d_subspace(&mut g, trace)?,
                d_position(&mut g, trace, PositionNormalization::PerQueryMean)?,
                d_position(&mut g, trace, PositionNormalization::RowSum)?,
                d_output(&mut g, trace)?,
            ];
            let slot = match layers
                .iter_mut()
                .position(|l| l.network == trace.site.network && l.layer == trace.site.layer)
            {
                Some(i) => &mut layers[i],
                None => {
                    layers.push(LayerScores {
                        network: trace.site.network,
                        layer: trace.site.layer,
                        d: [0.0; 4],
                    });
                    layers.last_mut().expect("just pushed")
                }
            };
            for (acc, v) in slot.d.iter_mut().zip(vals) {
                *acc += g.item(v);
            }
        }
    }
    let n = corpus.len() as f64;
    for l in &mut layers {
        for v in &mut l.d {
            *v /= n;
        }
    }
    layers.sort_by_key(|l| (l.network, l.layer));
    Ok(DisagreementReport {
        corpus: corpus_identity(corpus),
        checkpoint: model_identity(model),
        layers,
    })
}

/// Gradient check outcome for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.pass)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| !p.pass).collect()
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<40} {:>8} {:>12} {:>12} {:>8}  result",
            "parameter", "checked", "max_rel", "mean_rel", "worst"
        )?;
        for p in &self.params {
            writeln!(
                f,
                "{:<40} {:>8} {:>12.3e} {:>12.3e} {:>8}  {}",
                p.name,
                p.checked,
                p.max_rel_error,
                p.mean_rel_error,
                p.worst_index,
                if p.pass { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Above this many parameters, only `sample` elements per tensor are
    /// probed.
    pub full_check_limit: usize,
    pub sample: usize,
    pub seed: u64,
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: 1e-4,
            step: 1e-5,
            full_check_limit: 5000,
            sample: 200,
            seed: 0,
            fault: None,
        }
    }
}

fn batch_loss(
    model: &Model,
    batch: &[&Example],
    config: &DisagreementConfig,
    graph: &mut Graph,
) -> Result<(crate::autodiff::Var, crate::model::Bound)> {
    let bound = model.bind(graph);
    let (loss, _) = model.batch_objective(graph, &bound, batch, config, false)?;
    Ok((loss, bound))
}

/// Compares analytic gradients of the batch objective with central
/// differences `(L(θ+h) − L(θ−h)) / 2h`, element by element.
pub fn gradcheck(
    model_config: &ModelConfig,
    config: &DisagreementConfig,
    examples: &[Example],
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::contract("gradcheck needs at least one example"));
    }
    let mut model = Model::new(model_config.clone())?;
    let batch: Vec<&Example> = examples.iter().collect();

    let mut g = Graph::new();
    g.set_fault(options.fault);
    let (loss, bound) = batch_loss(&model, &batch, config, &mut g)?;
    let loss_value = g.item(loss);
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = bound.vars.iter().map(|&v| grads.get_or_zeros(v, &g)).collect();
    drop(g);

    let probe = |model: &Model, name: &str, i: usize| -> Result<f64> {
        let mut g = Graph::no_grad();
        let (loss, _) = batch_loss(model, &batch, config, &mut g).map_err(|e| match e {
            Error::NonFinite { op } => Error::contract(format!(
                "non-finite loss in {op} while probing {name}[{i}]"
            )),
            other => other,
        })?;
        Ok(g.item(loss))
    };

    let sampled = model.num_parameters() > options.full_check_limit;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut params = Vec::with_capacity(model.params.len());
    for (id, analytic) in analytic.iter().enumerate() {
        let name = model.params.get(id).name.clone();
        let n = model.params.get(id).tensor.numel();
        let indices: Vec<usize> = if sampled && n > options.sample {
            let mut idx = sample(&mut rng, n, options.sample).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..n).collect()
        };
        let mut max_rel = 0.0f64;
        let mut sum_rel = 0.0;
        let mut worst = indices[0];
        for &i in &indices {
            let original = model.params.get(id).tensor.data()[i];
            let slot = |m: &mut Model, v: f64| {
                m.params.iter_mut().nth(id).expect("valid id").tensor.data_mut()[i] = v;
            };
            slot(&mut model, original + options.step);
            let plus = probe(&model, &name, i)?;
            slot(&mut model, original - options.step);
            let minus = probe(&model, &name, i)?;
            slot(&mut model, original);
            let numeric = (plus - minus) / (2.0 * options.step);
            let rel = relative_error(analytic[i], numeric);
            if rel > max_rel {
                max_rel = rel;
                worst = i;
            }
            sum_rel += rel;
        }
        params.push(ParamCheck {
            name,
            checked: indices.len(),
            max_rel_error: max_rel,
            mean_rel_error: sum_rel / indices.len() as f64,
            worst_index: worst,
            pass: max_rel < options.tolerance,
        });
    }
    Ok(GradCheckReport {
        tolerance: options.tolerance,
        step: options.step,
        loss: loss_value,
        params,
    })
}
