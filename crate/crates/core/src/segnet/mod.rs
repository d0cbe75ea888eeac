//! A small point-wise segmentation network with one neighbourhood
//! aggregation stage.
//!
//! Architecture: a stack of `linear → batch-norm → ReLU` blocks applied to
//! every point with shared weights; after block `aggregate_after` each point's
//! features are concatenated with the mean features of its `knn_k` nearest
//! neighbours; a final linear head produces per-class logits.

mod checkpoint;
mod forward;
pub(crate) mod knn;
mod train;

pub use checkpoint::{decode_params, encode_params, load_params, save_params, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{forward, forward_tape, ForwardPass, SegInput, SegmentationState};
pub use knn::knn_index;
pub(crate) use train::one_hot;
pub use train::{continue_training, train_supervised, TrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tensor::{BatchNormState, BnMode, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum SegNetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite activations after layer {0}")]
    Numeric(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("incompatible checkpoint: expected fingerprint {expected}, found {found}")]
    IncompatibleCheckpoint { expected: String, found: String },
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("cloud {0} has no labels")]
    Unlabeled(String),
}

pub type Result<T> = std::result::Result<T, SegNetError>;

pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct SegNetConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Number of blocks after which the neighbourhood aggregation runs.
    pub aggregate_after: usize,
    pub num_classes: usize,
    pub knn_k: usize,
    pub seed: u64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self { input_dim: 6, hidden_dims: vec![32, 32, 64], aggregate_after: 2, num_classes: 8, knn_k: 16, seed: 0 }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(SegNetError::Config("num_classes must be at least 2".into()));
        }
        if self.knn_k == 0 {
            return Err(SegNetError::Config("knn_k must be at least 1".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(SegNetError::Config("hidden_dims must be non-empty and positive".into()));
        }
        if self.aggregate_after == 0 || self.aggregate_after > self.hidden_dims.len() {
            return Err(SegNetError::Config(format!(
                "aggregate_after must lie in 1..={}",
                self.hidden_dims.len()
            )));
        }
        if self.input_dim == 0 {
            return Err(SegNetError::Config("input_dim must be positive".into()));
        }
        Ok(())
    }

    /// Hash of the architecture-defining fields. The seed is not part of it: two
    /// networks with the same layout but different initialisation are
    /// checkpoint-compatible.
    pub fn fingerprint(&self) -> String {
        let canonical = format!(
            "in={};hidden={:?};agg={};classes={};k={}",
            self.input_dim, self.hidden_dims, self.aggregate_after, self.num_classes, self.knn_k
        );
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Input width of each block.
    fn block_inputs(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len());
        let mut current = self.input_dim;
        for (i, &h) in self.hidden_dims.iter().enumerate() {
            widths.push(current);
            current = if i + 1 == self.aggregate_after { 2 * h } else { h };
        }
        widths
    }

    fn head_input(&self) -> usize {
        let last = *self.hidden_dims.last().expect("validated");
        if self.aggregate_after == self.hidden_dims.len() {
            2 * last
        } else {
            last
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// in × out
    pub weight: Tensor<T>,
    /// 1 × out
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub linear: Dense<T>,
    pub bn: BatchNormState<T>,
}

/// All learnable weights plus batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub config: SegNetConfig,
    pub fingerprint: String,
    pub blocks: Vec<Block<T>>,
    pub head: Dense<T>,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

/// Deterministic initialisation: He-uniform weights, zero biases, identity
/// batch-norm.
pub fn init_params<T: Scalar>(config: &SegNetConfig) -> Result<NetworkParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let blocks = config
        .block_inputs()
        .into_iter()
        .zip(&config.hidden_dims)
        .map(|(fan_in, &out)| Block {
            linear: Dense {
                weight: uniform(&mut rng, fan_in, out, (6.0 / fan_in as f64).sqrt()),
                bias: Tensor::zeros(&[1, out]),
            },
            bn: BatchNormState::new(out, T::lit(BN_EPSILON)),
        })
        .collect();
    let fan_in = config.head_input();
    let head = Dense {
        weight: uniform(&mut rng, fan_in, config.num_classes, (3.0 / fan_in as f64).sqrt()),
        bias: Tensor::zeros(&[1, config.num_classes]),
    };
    Ok(NetworkParams { config: config.clone(), fingerprint: config.fingerprint(), blocks, head })
}

impl<T: Scalar> NetworkParams<T> {
    /// Learnable tensors in a fixed order, paired with stable names.
    pub fn learnable(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.weight"), &b.linear.weight));
            out.push((format!("block{i}.bias"), &b.linear.bias));
            out.push((format!("block{i}.gamma"), &b.bn.gamma));
            out.push((format!("block{i}.beta"), &b.bn.beta));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn learnable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.weight"), &mut b.linear.weight));
            out.push((format!("block{i}.bias"), &mut b.linear.bias));
            out.push((format!("block{i}.gamma"), &mut b.bn.gamma));
            out.push((format!("block{i}.beta"), &mut b.bn.beta));
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        for b in &mut self.blocks {
            b.bn.mode = mode;
        }
    }

    pub fn bn_mode(&self) -> BnMode {
        self.blocks.first().map_or(BnMode::RunningStats, |b| b.bn.mode)
    }

    /// Bit-level equality of every stored value (learnable and statistics).
    pub fn bits_equal(&self, other: &Self) -> bool {
        fn same<T: Scalar>(a: &[T], b: &[T]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
        }
        if self.config != other.config || self.blocks.len() != other.blocks.len() {
            return false;
        }
        let learnable = self.learnable().iter().zip(other.learnable()).all(|((_, a), (_, b))| {
            a.shape() == b.shape() && same(a.data(), b.data())
        });
        learnable
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
                same(&a.bn.running_mu, &b.bn.running_mu)
                    && same(&a.bn.running_sigma2, &b.bn.running_sigma2)
                    && a.bn.mode == b.bn.mode
            })
    }

    pub fn parameter_count(&self) -> usize {
        self.learnable().iter().map(|(_, t)| t.len()).sum()
    }
}
