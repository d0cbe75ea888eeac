//! mIoU, the number-of-clicks protocol and benchmark orchestration.

mod config;
mod metrics;
mod protocol;
mod report;

pub use config::RunConfig;
pub use metrics::{miou, noc, MiouReport};
pub use protocol::{noc_protocol, run_benchmark, run_records, PreparedScene, RunRecord};
pub use report::{records_csv, write_artifacts, BenchmarkSummary, VariantSummary, CSV_HEADER};

use serde::{Deserialize, Serialize};

use crate::refine::{Ablation, RefineConfig, RefineError};
use crate::scene::SceneError;
use crate::segnet::SegNetError;
use crate::sim::{SimConfig, SimError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("mIoU undefined: no class occurs in prediction or ground truth")]
    Undefined,
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("scene {0} has no ground truth")]
    Unlabeled(String),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Network(#[from] SegNetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Method variants compared by the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoFiltering,
    NoWarmup,
    NoStabilization,
    KeepGa,
    IaBaseline,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Full, Variant::NoFiltering, Variant::NoWarmup, Variant::NoStabilization, Variant::KeepGa, Variant::IaBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFiltering => "no_filtering",
            Variant::NoWarmup => "no_warmup",
            Variant::NoStabilization => "no_stabilization",
            Variant::KeepGa => "keep_ga",
            Variant::IaBaseline => "ia_baseline",
        }
    }

    /// `base` with this variant's ablation flags (any flags already set in `base` are replaced).
    pub fn config(self, base: &RefineConfig) -> RefineConfig {
        let mut ab = Ablation::default();
        match self {
            Variant::Full => {}
            Variant::NoFiltering => ab.no_filtering = true,
            Variant::NoWarmup => ab.no_warmup = true,
            Variant::NoStabilization => ab.no_stabilization = true,
            Variant::KeepGa => ab.keep_ga = true,
            Variant::IaBaseline => ab.ia_baseline = true,
        }
        base.clone().with_ablation(ab)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| EvalError::Config(format!("unknown variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub target_mious: Vec<f64>,
    pub click_budget: usize,
    pub variants: Vec<Variant>,
    /// Simulator seeds; every scene × variant runs once per seed.
    pub seeds: Vec<u64>,
    pub refine: RefineConfig,
    pub sim: SimConfig,
    /// Stop a run once the highest target is reached.
    pub stop_at_target: bool,
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            target_mious: vec![0.80, 0.85, 0.90],
            click_budget: 30,
            variants: vec![Variant::Full],
            seeds: vec![0],
            refine: RefineConfig::default(),
            sim: SimConfig::default(),
            stop_at_target: false,
            workers: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_mious.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(EvalError::Config("targets must lie in (0, 1]".into()));
        }
        if self.click_budget == 0 {
            return Err(EvalError::Config("click_budget must be >= 1".into()));
        }
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(EvalError::Config("need at least one variant and one seed".into()));
        }
        self.refine.validate()?;
        self.sim.validate()?;
        Ok(())
    }
}
