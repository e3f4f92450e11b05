//! Experiment configuration: a TOML document with `[model]`, `[task]`,
//! `[disagreement]`, `[training]` and `[gradcheck]` tables.
//!
//! ```toml
//! out = "runs/output-reg"
//!
//! [model]
//! d_model = 32
//! heads = 4
//! d_head = 8
//!
//! [task]
//! kind = "copy"
//!
//! [disagreement]
//! terms = ["output"]
//! networks = ["encoder-self"]
//! lambda = 1.0
//!
//! [training]
//! steps = 2000
//! ```
//!
//! Omitted keys take their defaults. Overrides address keys by dotted path,
//! e.g. `disagreement.lambda=0.5`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::Network;
use crate::data::{TaskKind, TaskSpec, NUM_SPECIALS};
use crate::disagreement::{DisagreementConfig, Term};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSettings {
    pub tolerance: f64,
    pub step: f64,
    /// Number of validation examples in the probed batch.
    pub examples: usize,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            tolerance: 1e-4,
            step: 1e-5,
            examples: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub disagreement: DisagreementConfig,
    pub training: TrainConfig,
    pub gradcheck: GradCheckSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out: PathBuf::from("run"),
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            disagreement: DisagreementConfig::baseline(),
            training: TrainConfig::default(),
            gradcheck: GradCheckSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// The small model used for gradient checking, with every term enabled
    /// on every network.
    pub fn gradcheck_default() -> Self {
        let model = ModelConfig::tiny();
        let mut disagreement = DisagreementConfig::single(Term::Subspace, &Network::ALL, 1.0);
        disagreement.terms.extend(Term::ALL);
        ExperimentConfig {
            out: PathBuf::from("gradcheck"),
            task: TaskSpec {
                kind: TaskKind::Copy,
                content_vocab: model.vocab_size - NUM_SPECIALS,
                min_len: 1,
                max_len: model.max_len - 2,
                seed: 3,
                train_size: 20,
                valid_size: 10,
            },
            model,
            disagreement,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Applies one `dotted.path=value` override. The value is read as a TOML
    /// value when possible and as a bare string otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not KEY=VALUE")))?;
        let path = path.trim();
        let raw = raw.trim();
        let value = parse_value(raw);
        let mut doc = toml::Value::try_from(&*self)
            .map_err(|e| Error::config(format!("cannot serialize config: {e}")))?;
        let keys: Vec<&str> = path.split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(Error::config(format!("override key {path:?} is malformed")));
        }
        let mut node = &mut doc;
        for (i, key) in keys.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("override key {path:?}: {key:?} is not a table")))?;
            let last = i + 1 == keys.len();
            if last {
                if !table.contains_key(*key) {
                    return Err(Error::config(format!("unknown config key {path:?}")));
                }
                table.insert((*key).to_string(), value.clone());
                break;
            }
            node = table
                .get_mut(*key)
                .ok_or_else(|| Error::config(format!("unknown config key {path:?}")))?;
        }
        *self = doc
            .try_into()
            .map_err(|e| Error::config(format!("override {assignment:?}: {e}")))?;
        Ok(())
    }

    /// One seed for model init, data generation and batch order.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.task.seed = seed;
        self.training.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.disagreement.validate()?;
        self.training.validate()?;
        if self.model.vocab_size != self.task.content_vocab + NUM_SPECIALS {
            return Err(Error::config(format!(
                "model.vocab_size ({}) must equal task.content_vocab ({}) + {NUM_SPECIALS} specials",
                self.model.vocab_size, self.task.content_vocab
            )));
        }
        if self.model.max_len < self.task.max_framed_len() {
            return Err(Error::config(format!(
                "model.max_len ({}) is shorter than the longest framed sequence ({})",
                self.model.max_len,
                self.task.max_framed_len()
            )));
        }
        if !(self.gradcheck.step > 0.0 && self.gradcheck.step.is_finite()) {
            return Err(Error::config("gradcheck.step must be positive"));
        }
        if self.gradcheck.tolerance.is_nan() || self.gradcheck.tolerance < 0.0 || self.gradcheck.examples == 0 {
            return Err(Error::config(
                "gradcheck.tolerance must be non-negative and gradcheck.examples at least 1",
            ));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Holder {
        v: toml::Value,
    }
    match toml::from_str::<Holder>(&format!("v = {raw}")) {
        Ok(h) => h.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
