//! Continual-learning strategies as hooks around the training loop.
//!
//! The harness owns the loop and the batch order; a strategy only adds loss
//! terms, rewrites gradients, extends batches with replayed samples and keeps
//! its own memory. Every strategy draws randomness from its own seeded
//! stream, so with zero regularization and empty memories the parameter
//! trajectory equals plain finetuning bit for bit.

pub mod fisher;
mod memory;
mod methods;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Patch;
use crate::nn::{Checkpoint, InputBatch, LossTerm, Model, NnError};
use crate::scenario::{ExperienceStream, OutputSlot};

pub use fisher::{compute_fisher, FisherDiag, FisherLabels};
pub use memory::{agem_project, cope_update_prototype, herding_select, EpisodicBuffer, ExemplarMemory, PrototypeStore};
pub use methods::{Agem, Cope, Ewc, Finetune, Icarl, Joint, Lwf, OnlineEwc};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("projection reference gradient is zero")]
    ZeroReference,
    #[error("prototype update collapsed (norm {0:e})")]
    DegeneratePrototype(f64),
    #[error("memory budget {budget} is smaller than the {classes} classes seen")]
    BudgetTooSmall { budget: usize, classes: usize },
    #[error("invalid strategy config: {0}")]
    InvalidConfig(String),
    #[error("memory restore: {0}")]
    Memory(String),
}

/// Samples per mini-experience in the mini-batch online regime.
pub const MINI_EXPERIENCE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// The configured epoch schedule over each experience.
    #[default]
    Offline,
    /// One pass over each experience.
    Online,
    /// One pass over each experience, consumed as consecutive
    /// mini-experiences of [`MINI_EXPERIENCE`] samples.
    OnlineMini,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    Head,
    NearestMeanOfExemplars,
    Prototypes,
}

/// Read-only view shared by every hook.
#[derive(Debug, Clone, Copy)]
pub struct Ctx<'a> {
    pub stream: &'a ExperienceStream,
    pub seed: u64,
}

impl Ctx<'_> {
    pub fn slot(&self, p: &Patch) -> OutputSlot {
        self.stream.slot(p.class_id, p.task_id)
    }

    /// Output slots trained before experience `k`, grouped by head.
    pub fn trained_slots(&self, k: usize) -> std::collections::BTreeMap<usize, Vec<usize>> {
        let mut out: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for e in &self.stream.experiences[..k] {
            for &c in &e.classes_present {
                let (h, o) = self.stream.slot(c, e.task_id);
                out.entry(h).or_default().push(o);
            }
        }
        for v in out.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        out
    }
}

/// One optimization batch. The first `n_new` patches come from the stream;
/// any others were added by the strategy.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub patches: Vec<Patch>,
    pub n_new: usize,
    pub inputs: InputBatch<f32>,
    pub heads: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TrainBatch {
    pub fn new(ctx: &Ctx, patches: Vec<Patch>, n_new: usize) -> Result<Self, StrategyError> {
        let inputs = InputBatch::from_images(patches.iter().map(|p| &p.pixels))?;
        let (heads, targets) = patches.iter().map(|p| ctx.slot(p)).unzip();
        Ok(TrainBatch {
            patches,
            n_new: n_new.min(inputs.n),
            inputs,
            heads,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn cross_entropy(&self) -> LossTerm {
        LossTerm::cross_entropy(self.targets.clone(), self.heads.clone())
    }
}

/// Memory sizes after an experience, for contract checks and logs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MemoryReport {
    pub exemplars: Option<usize>,
    pub exemplar_budget: Option<usize>,
    pub buffer_len: Option<usize>,
    pub buffer_capacity: Option<usize>,
    pub buffer_class_counts: Option<Vec<(usize, usize)>>,
    pub buffer_balanced: Option<bool>,
    pub prototype_max_norm_error: Option<f64>,
    pub penalty_anchors: Option<usize>,
}

#[allow(unused_variables)]
pub trait Strategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Regime imposed by the method regardless of the run config.
    fn regime(&self) -> Option<Regime> {
        None
    }

    fn classifier_mode(&self) -> ClassifierMode {
        ClassifierMode::Head
    }

    fn on_experience_start(&mut self, ctx: &Ctx, k: usize, model: &Model) -> Result<(), StrategyError> {
        Ok(())
    }

    /// Training data of experience `k`, in stream order.
    fn training_set(&self, ctx: &Ctx, k: usize) -> Vec<Patch> {
        ctx.stream.experiences[k].train.patches.clone()
    }

    /// Appends replayed samples to a batch of new samples.
    fn extend_batch(&mut self, ctx: &Ctx, model: &Model, batch: &mut Vec<Patch>) -> Result<(), StrategyError> {
        Ok(())
    }

    fn loss_terms(&mut self, ctx: &Ctx, model: &Model, batch: &TrainBatch) -> Result<Vec<LossTerm>, StrategyError> {
        Ok(vec![batch.cross_entropy()])
    }

    fn transform_gradient(
        &mut self,
        ctx: &Ctx,
        model: &Model,
        grads: Vec<f32>,
    ) -> Result<Vec<f32>, StrategyError> {
        Ok(grads)
    }

    /// Called after the parameter update of every step.
    fn after_step(&mut self, ctx: &Ctx, model: &Model, batch: &TrainBatch) -> Result<(), StrategyError> {
        Ok(())
    }

    fn on_experience_end(&mut self, ctx: &Ctx, k: usize, model: &Model) -> Result<(), StrategyError> {
        Ok(())
    }

    /// Class representatives for the nearest-mean and prototype classifiers.
    fn class_means(&self, ctx: &Ctx, model: &Model) -> Result<Vec<(usize, Vec<f32>)>, StrategyError> {
        Ok(Vec::new())
    }

    fn report(&self) -> MemoryReport {
        MemoryReport::default()
    }

    /// Stores memories in a checkpoint: exemplars and buffers by source key,
    /// Fisher values and prototypes as raw arrays.
    fn export_memory(&self, ck: &mut Checkpoint) {}

    /// Restores memories written by [`Strategy::export_memory`]; `pool`
    /// resolves source keys.
    fn import_memory(&mut self, ck: &Checkpoint, pool: &[Patch]) -> Result<(), StrategyError> {
        Ok(())
    }
}

fn default_lambda_ewc() -> f64 {
    100.0
}
fn default_gamma() -> f64 {
    0.9
}
fn default_lambda_o() -> f64 {
    1.0
}
fn default_temperature() -> f64 {
    2.0
}
fn default_fisher_samples() -> usize {
    200
}
fn default_memory() -> usize {
    300
}
fn default_agem_capacity() -> usize {
    500
}
fn default_ref_batch() -> usize {
    64
}
fn default_cope_capacity() -> usize {
    300
}
fn default_alpha() -> f64 {
    0.9
}
fn default_tau() -> f64 {
    0.1
}

/// Strategy name and hyperparameters as they appear in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyConfig {
    Finetune,
    Joint,
    Ewc {
        #[serde(default = "default_lambda_ewc")]
        lambda: f64,
        #[serde(default = "default_fisher_samples")]
        fisher_samples: usize,
        #[serde(default)]
        fisher_labels: FisherLabels,
    },
    OnlineEwc {
        #[serde(default = "default_lambda_ewc")]
        lambda: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_fisher_samples")]
        fisher_samples: usize,
        #[serde(default)]
        fisher_labels: FisherLabels,
    },
    Lwf {
        #[serde(default = "default_lambda_o")]
        lambda_o: f64,
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
    Icarl {
        #[serde(default = "default_memory")]
        memory_size: usize,
        #[serde(default = "default_lambda_o")]
        lambda_o: f64,
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
    Agem {
        #[serde(default = "default_agem_capacity")]
        capacity: usize,
        #[serde(default = "default_ref_batch")]
        ref_batch: usize,
    },
    Cope {
        #[serde(default = "default_cope_capacity")]
        capacity: usize,
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_tau")]
        tau: f64,
    },
}

impl StrategyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::Finetune => "finetune",
            StrategyConfig::Joint => "joint",
            StrategyConfig::Ewc { .. } => "ewc",
            StrategyConfig::OnlineEwc { .. } => "online_ewc",
            StrategyConfig::Lwf { .. } => "lwf",
            StrategyConfig::Icarl { .. } => "icarl",
            StrategyConfig::Agem { .. } => "agem",
            StrategyConfig::Cope { .. } => "cope",
        }
    }

    /// Every variant with its default hyperparameters.
    pub fn all_defaults() -> Vec<StrategyConfig> {
        ["finetune", "joint", "ewc", "online_ewc", "lwf", "icarl", "agem", "cope"]
            .iter()
            .map(|n| serde_json::from_value(serde_json::json!({ "name": n })).expect("defaults parse"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        let bad = |m: &str| Err(StrategyError::InvalidConfig(m.into()));
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        match *self {
            StrategyConfig::Finetune | StrategyConfig::Joint => Ok(()),
            StrategyConfig::Ewc { lambda, fisher_samples, .. } => {
                if !finite_nonneg(lambda) {
                    return bad("ewc lambda must be >= 0");
                }
                if fisher_samples == 0 {
                    return bad("fisher_samples must be >= 1");
                }
                Ok(())
            }
            StrategyConfig::OnlineEwc { lambda, gamma, fisher_samples, .. } => {
                if !finite_nonneg(lambda) {
                    return bad("online_ewc lambda must be >= 0");
                }
                if !(0.0..=1.0).contains(&gamma) {
                    return bad("online_ewc gamma must lie in [0, 1]");
                }
                if fisher_samples == 0 {
                    return bad("fisher_samples must be >= 1");
                }
                Ok(())
            }
            StrategyConfig::Lwf { lambda_o, temperature } | StrategyConfig::Icarl { lambda_o, temperature, .. } => {
                if !finite_nonneg(lambda_o) {
                    return bad("lambda_o must be >= 0");
                }
                if !(temperature.is_finite() && temperature > 0.0) {
                    return bad("temperature must be positive");
                }
                Ok(())
            }
            StrategyConfig::Agem { capacity, ref_batch } => {
                if ref_batch == 0 || (capacity > 0 && capacity < ref_batch) {
                    return bad("agem needs capacity >= ref_batch >= 1 (capacity 0 disables memory)");
                }
                Ok(())
            }
            StrategyConfig::Cope { alpha, tau, .. } => {
                if !(alpha > 0.0 && alpha < 1.0) {
                    return bad("cope alpha must lie in (0, 1)");
                }
                if !(tau.is_finite() && tau > 0.0) {
                    return bad("cope tau must be positive");
                }
                Ok(())
            }
        }
    }

    /// Instantiates the strategy; `seed` feeds its private random streams.
    pub fn build(&self, seed: u64) -> Result<Box<dyn Strategy>, StrategyError> {
        self.validate()?;
        Ok(match *self {
            StrategyConfig::Finetune => Box::new(Finetune),
            StrategyConfig::Joint => Box::new(Joint),
            StrategyConfig::Ewc {
                lambda,
                fisher_samples,
                fisher_labels,
            } => Box::new(Ewc::new(lambda, fisher_samples, fisher_labels)),
            StrategyConfig::OnlineEwc {
                lambda,
                gamma,
                fisher_samples,
                fisher_labels,
            } => Box::new(OnlineEwc::new(lambda, gamma, fisher_samples, fisher_labels)),
            StrategyConfig::Lwf { lambda_o, temperature } => Box::new(Lwf::new(lambda_o, temperature)),
            StrategyConfig::Icarl {
                memory_size,
                lambda_o,
                temperature,
            } => Box::new(Icarl::new(memory_size, lambda_o, temperature)),
            StrategyConfig::Agem { capacity, ref_batch } => Box::new(Agem::new(capacity, ref_batch, seed)),
            StrategyConfig::Cope { capacity, alpha, tau } => Box::new(Cope::new(capacity, alpha, tau, seed)),
        })
    }
}

pub fn finetune_hooks() -> Finetune {
    Finetune
}

pub fn joint_hooks() -> Joint {
    Joint
}

pub fn ewc_hooks(lambda: f64) -> Ewc {
    Ewc::new(lambda, default_fisher_samples(), FisherLabels::Sampled)
}

pub fn online_ewc_hooks(lambda: f64, gamma: f64) -> OnlineEwc {
    OnlineEwc::new(lambda, gamma, default_fisher_samples(), FisherLabels::Sampled)
}

pub fn lwf_hooks(lambda_o: f64, temperature: f64) -> Lwf {
    Lwf::new(lambda_o, temperature)
}

pub fn icarl_hooks(memory_size: usize, lambda_o: f64, temperature: f64) -> Icarl {
    Icarl::new(memory_size, lambda_o, temperature)
}

pub fn agem_hooks(capacity: usize, ref_batch: usize, seed: u64) -> Agem {
    Agem::new(capacity, ref_batch, seed)
}

pub fn cope_hooks(capacity: usize, alpha: f64, tau: f64, seed: u64) -> Cope {
    Cope::new(capacity, alpha, tau, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_unknown_keys() {
        let all = StrategyConfig::all_defaults();
        assert_eq!(all.len(), 8);
        assert_eq!(
            all[2],
            StrategyConfig::Ewc {
                lambda: 100.0,
                fisher_samples: 200,
                fisher_labels: FisherLabels::Sampled
            }
        );
        let r: Result<StrategyConfig, _> = serde_json::from_str(r#"{"name":"ewc","lamda":1}"#);
        assert!(r.is_err());
        let r: Result<StrategyConfig, _> = serde_json::from_str(r#"{"name":"sgd"}"#);
        assert!(r.is_err());
        for c in &all {
            let back: StrategyConfig = serde_json::from_value(serde_json::to_value(c).unwrap()).unwrap();
            assert_eq!(&back, c);
            assert_eq!(c.build(0).unwrap().name(), c.name());
        }
    }

    #[test]
    fn invalid_hyperparameters() {
        let bad = [
            r#"{"name":"ewc","lambda":-1}"#,
            r#"{"name":"online_ewc","gamma":1.5}"#,
            r#"{"name":"lwf","temperature":0}"#,
            r#"{"name":"agem","capacity":10,"ref_batch":64}"#,
            r#"{"name":"cope","alpha":1.0}"#,
        ];
        for b in bad {
            let c: StrategyConfig = serde_json::from_str(b).unwrap();
            assert!(c.validate().is_err(), "{b}");
        }
    }
}
