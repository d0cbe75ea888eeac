//! Test-time refinement of a segmentation network from corrective clicks.
//!
//! A session first warms the network up on its own predictions after
//! switching batch-norm to per-cloud statistics, then, for every batch of
//! clicks, runs a few optimisation rounds on a correction term over the
//! clicked points plus an entropy term over the points whose filter score is
//! 1.

mod energy;
mod export;
mod session;

pub use energy::{correction_energy, filter_truth, probe_truth, stabilization_energy, update_filter_scores};
pub use export::{decode_labels, encode_labels, SessionExport};
pub use session::{RefineOutcome, RefinementSession, RoundTrace, WarmupReport};

use serde::{Deserialize, Serialize};

use crate::optim::OptimizerConfig;
use crate::segnet::SegNetError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("invalid refine config: {0}")]
    Config(String),
    #[error("invalid clicks: {}", .0.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidClicks(Vec<ClickIssue>),
    #[error("session state: {0}")]
    State(String),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error(transparent)]
    Network(#[from] SegNetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("optimizer: {0}")]
    Optim(String),
}

pub type Result<T> = std::result::Result<T, RefineError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickIssue {
    /// Position of the offending click in the submitted list.
    pub position: usize,
    pub point_index: usize,
    pub reason: String,
}

impl std::fmt::Display for ClickIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "click #{} (point {}): {}", self.position, self.point_index, self.reason)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClickSource {
    Human,
    Simulator,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub point_index: usize,
    pub corrected_label: u32,
    /// Interaction round in which the click was given (1-based once recorded).
    pub round: usize,
    pub source: ClickSource,
}

impl InteractionRecord {
    pub fn human(point_index: usize, corrected_label: u32) -> Self {
        Self { point_index, corrected_label, round: 0, source: ClickSource::Human }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the entropy term; the loss is the correction energy alone.
    pub no_stabilization: bool,
    /// All filter scores stay 1: no probe and no per-round updates.
    pub no_filtering: bool,
    /// Switch batch-norm to per-cloud statistics without fine-tuning.
    pub no_warmup: bool,
    /// Keep momentum / Adam moments during test-time rounds.
    pub keep_ga: bool,
    /// Replace the objective with cross-entropy against the clicks and the
    /// static post-warm-up prediction.
    pub ia_baseline: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub lambda: f64,
    pub delta_plus: f64,
    pub delta_minus: f64,
    pub delta_probe: f64,
    pub warmup_rounds: usize,
    pub refine_rounds_per_interaction: usize,
    pub warmup_lr: f64,
    pub testtime_lr: f64,
    /// Optimizer kind and hyper-parameters; the learning rate and GA flag are
    /// overridden per phase.
    pub optimizer: OptimizerConfig,
    pub ablation: Ablation,
    /// Also apply the entropy-change filter update after the last round.
    pub update_after_last_round: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self::sgd()
    }
}

impl RefineConfig {
    /// SGD regime: δ = δ⁺ = δ⁻ = 0.03, 5 warm-up and 3 test-time rounds.
    /// λ and the test-time rate are calibrated for the default network.
    pub fn sgd() -> Self {
        Self {
            lambda: 20.0,
            delta_plus: 0.03,
            delta_minus: 0.03,
            delta_probe: 0.03,
            warmup_rounds: 5,
            refine_rounds_per_interaction: 3,
            warmup_lr: 5e-3,
            testtime_lr: 3e-3,
            optimizer: OptimizerConfig::sgd(1e-3),
            ablation: Ablation::default(),
            update_after_last_round: false,
        }
    }

    /// Adam regime: δ⁺ = δ_probe = 0.1, δ⁻ = 0.01, λ = 100, 10 warm-up and 5
    /// test-time rounds at rate 1e-3.
    pub fn adam() -> Self {
        Self {
            lambda: 100.0,
            testtime_lr: 1e-3,
            delta_plus: 0.1,
            delta_minus: 0.01,
            delta_probe: 0.1,
            warmup_rounds: 10,
            refine_rounds_per_interaction: 5,
            optimizer: OptimizerConfig::adam(1e-3),
            ..Self::sgd()
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v >= 0.0;
        if !nonneg(self.lambda) {
            return Err(RefineError::Config("lambda must be >= 0".into()));
        }
        // thresholds may be infinite (forcing a filter decision) but not NaN or negative
        if ![self.delta_plus, self.delta_minus].into_iter().all(nonneg) || self.delta_probe.is_nan() {
            return Err(RefineError::Config("delta thresholds must be >= 0".into()));
        }
        if self.refine_rounds_per_interaction == 0 {
            return Err(RefineError::Config("refine_rounds_per_interaction must be >= 1".into()));
        }
        if !(self.warmup_lr > 0.0 && self.testtime_lr > 0.0) {
            return Err(RefineError::Config("learning rates must be positive".into()));
        }
        self.optimizer.validate().map_err(|e| RefineError::Config(e.to_string()))
    }

    pub(crate) fn warmup_optimizer(&self) -> OptimizerConfig {
        self.optimizer.clone().with_lr(self.warmup_lr).with_ga(true)
    }

    pub(crate) fn probe_optimizer(&self) -> OptimizerConfig {
        self.optimizer.clone().with_lr(self.testtime_lr).with_ga(true)
    }

    pub(crate) fn testtime_optimizer(&self) -> OptimizerConfig {
        self.optimizer.clone().with_lr(self.testtime_lr).with_ga(self.ablation.keep_ga)
    }
}
