//! Mini-batch training with Adam and a per-step metrics log.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{batches, Example};
use crate::disagreement::{DisagreementConfig, Term};
use crate::error::{Error, Result};
use crate::model::{Model, ObjectiveBreakdown};
use crate::optim::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Validation accuracy is logged every `eval_every` steps and at the
    /// last step; 0 disables intermediate evaluation.
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 3e-3,
            eval_every: 500,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("training.lr must be positive and finite"));
        }
        Ok(())
    }
}

pub struct Trainer {
    pub model: Model,
    pub disagreement: DisagreementConfig,
    pub adam: AdamConfig,
    pub state: AdamState,
    /// Assert every attention row sums to 1 on every step.
    pub check_rows: bool,
}

impl Trainer {
    pub fn new(model: Model, disagreement: DisagreementConfig, lr: f64) -> Result<Self> {
        disagreement.validate()?;
        let state = AdamState::new(&model.params);
        Ok(Trainer {
            model,
            disagreement,
            adam: AdamConfig::with_lr(lr),
            state,
            check_rows: false,
        })
    }

    /// One forward, one backward and one Adam update over `batch`.
    pub fn step(&mut self, batch: &[&Example]) -> Result<ObjectiveBreakdown> {
        let step = self.state.step + 1;
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let (loss, breakdown) = self
            .model
            .batch_objective(&mut g, &bound, batch, &self.disagreement, self.check_rows)
            .map_err(|e| diverged(e, step))?;
        if let Some(term) = breakdown.non_finite_component() {
            return Err(Error::Diverged { step, term });
        }
        let grads = g.backward(loss).map_err(|e| diverged(e, step))?;
        self.model.params.absorb_grads(&grads, &bound.vars, &g)?;
        adam_step(&mut self.model.params, &mut self.state, &self.adam)?;
        self.model.params.zero_grads();
        if let Some(p) = self.model.params.iter().find(|p| !p.tensor.is_finite()) {
            return Err(Error::Diverged {
                step,
                term: format!("parameter {}", p.name),
            });
        }
        Ok(breakdown)
    }
}

fn diverged(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            term: format!("output of {op}"),
        },
        other => other,
    }
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub breakdown: ObjectiveBreakdown,
    pub val_accuracy: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss,nll,disagreement,\
d_subspace,d_position,d_position_sos,d_output,\
exp_d_subspace,exp_d_position,exp_d_position_sos,exp_d_output,val_accuracy";

impl MetricsRow {
    /// Disabled terms leave their columns empty.
    pub fn to_csv_line(&self) -> String {
        let b = &self.breakdown;
        let mut s = format!(
            "{},{:.17e},{:.17e},{:.17e}",
            self.step, b.loss, b.nll, b.disagreement
        );
        for t in Term::ALL {
            match b.terms.get(&t) {
                Some(v) => write!(s, ",{v:.17e}").unwrap(),
                None => s.push(','),
            }
        }
        for t in Term::ALL {
            match b.terms.get(&t) {
                Some(v) => write!(s, ",{:.17e}", v.exp()).unwrap(),
                None => s.push(','),
            }
        }
        match self.val_accuracy {
            Some(a) => write!(s, ",{a:.17e}").unwrap(),
            None => s.push(','),
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_accuracy: f64,
    pub last: Option<ObjectiveBreakdown>,
    pub seconds: f64,
}

impl TrainSummary {
    pub fn steps_per_sec(&self) -> f64 {
        if self.seconds > 0.0 {
            self.steps as f64 / self.seconds
        } else {
            0.0
        }
    }
}

/// Runs `config.steps` updates, reporting each step to `on_row`.
pub fn fit(
    trainer: &mut Trainer,
    train: &[Example],
    valid: &[Example],
    config: &TrainConfig,
    mut on_row: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainSummary> {
    config.validate()?;
    let start = std::time::Instant::now();
    let mut last = None;
    if config.steps > 0 {
        let mut stream = batches(train, config.batch_size, config.seed)?;
        for step in 1..=config.steps {
            let batch = stream.next().expect("batch stream is infinite");
            let breakdown = trainer.step(&batch)?;
            let evaluate = step == config.steps
                || (config.eval_every > 0 && step % config.eval_every == 0);
            let val_accuracy = if evaluate && !valid.is_empty() {
                Some(trainer.model.token_accuracy(valid)?)
            } else {
                None
            };
            let row = MetricsRow {
                step,
                breakdown,
                val_accuracy,
            };
            on_row(&row)?;
            last = Some(row.breakdown);
        }
    }
    let final_accuracy = if valid.is_empty() {
        0.0
    } else {
        trainer.model.token_accuracy(valid)?
    };
    Ok(TrainSummary {
        steps: config.steps,
        final_accuracy,
        last,
        seconds: start.elapsed().as_secs_f64(),
    })
}
