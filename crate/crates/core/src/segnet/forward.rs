use std::sync::Arc;

use super::{knn_index, NetworkParams, Result, SegNetError};
use crate::scalar::Scalar;
use crate::scene::LabeledCloud;
use crate::tensor::{row_entropy, BnMode, NeighborTable, Tape, Tensor, Var};

/// A cloud prepared for the network: features as a tensor plus the cached
/// neighbour table (positions never move during refinement).
#[derive(Clone, Debug)]
pub struct SegInput<T> {
    pub features: Tensor<T>,
    pub neighbors: Arc<NeighborTable>,
}

impl<T: Scalar> SegInput<T> {
    pub fn new(cloud: &LabeledCloud, knn_k: usize) -> Result<Self> {
        let neighbors = Arc::new(knn_index(&cloud.positions, knn_k)?);
        Self::with_neighbors(cloud, neighbors)
    }

    pub fn with_neighbors(cloud: &LabeledCloud, neighbors: Arc<NeighborTable>) -> Result<Self> {
        if neighbors.rows() != cloud.len() {
            return Err(SegNetError::Size(format!(
                "neighbour table has {} rows for {} points",
                neighbors.rows(),
                cloud.len()
            )));
        }
        let data = cloud.features.iter().map(|&v| T::lit(v as f64)).collect();
        let features = Tensor::new(vec![cloud.len(), cloud.feature_dim], data)?;
        Ok(Self { features, neighbors })
    }

    /// Stacks several inputs into one; neighbour indices are offset so each
    /// part keeps its own neighbourhoods.
    pub fn concat(parts: &[&SegInput<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| SegNetError::Size("nothing to concatenate".into()))?;
        let (dim, k) = (first.features.cols(), first.neighbors.k());
        let mut data = Vec::new();
        let mut indices = Vec::new();
        let mut offset = 0u32;
        for p in parts {
            if p.features.cols() != dim || p.neighbors.k() != k {
                return Err(SegNetError::Size("inputs differ in feature width or neighbour count".into()));
            }
            data.extend_from_slice(p.features.data());
            indices.extend(p.neighbors.indices().iter().map(|&j| j + offset));
            offset += p.len() as u32;
        }
        let rows = offset as usize;
        Ok(Self { features: Tensor::new(vec![rows, dim], data)?, neighbors: Arc::new(NeighborTable::new(k, indices)?) })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-point predictions derived from logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationState<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    /// Arg-max class per point, lowest index on ties.
    pub labels: Vec<u32>,
    /// Shannon entropy (nats) of each probability row.
    pub entropies: Vec<T>,
}

impl<T: Scalar> SegmentationState<T> {
    pub fn from_logits(logits: Tensor<T>) -> Result<Self> {
        let probs = crate::tensor::softmax(&logits)?;
        let m = probs.cols();
        let labels = probs
            .data()
            .chunks_exact(m)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best as u32
            })
            .collect();
        let entropies = row_entropy(&probs)?;
        Ok(Self { logits, probs, labels, entropies })
    }

    pub fn num_points(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }
}

/// A forward pass recorded on a tape, ready for a loss and `backward`.
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    /// Leaves for the learnable tensors, in [`NetworkParams::learnable`] order.
    pub params: Vec<Var>,
    /// Inputs to each batch-norm layer (used for running-statistic updates).
    pub pre_bn: Vec<Var>,
    pub logits: Var,
    pub log_probs: Var,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn state(&self) -> Result<SegmentationState<T>> {
        SegmentationState::from_logits(self.tape.value(self.logits).clone())
    }

    /// Gradients of the learnable leaves after `backward`; untouched leaves get zeros.
    pub fn gradients(&self, params: &NetworkParams<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(params.learnable())
            .map(|(&v, (_, t))| self.tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

fn check_layer<T: Scalar>(tape: &Tape<T>, v: Var, layer: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(SegNetError::Numeric(layer.to_string()))
    }
}

/// Runs the network on a tape with every batch-norm layer in `bn_mode`.
pub fn forward_tape<T: Scalar>(
    input: &SegInput<T>,
    params: &NetworkParams<T>,
    bn_mode: BnMode,
    requires_grad: bool,
) -> Result<ForwardPass<T>> {
    let cfg = &params.config;
    if input.features.cols() != cfg.input_dim {
        return Err(SegNetError::Size(format!(
            "cloud has {} feature channels, network expects {}",
            input.features.cols(),
            cfg.input_dim
        )));
    }
    if input.neighbors.k() != cfg.knn_k {
        return Err(SegNetError::Size(format!(
            "neighbour table has k={}, network expects {}",
            input.neighbors.k(),
            cfg.knn_k
        )));
    }
    let mut tape = Tape::new();
    let param_vars: Vec<Var> = params.learnable().into_iter().map(|(_, t)| tape.leaf(t.clone(), requires_grad)).collect();
    let mut h = tape.constant(input.features.clone());
    let mut pre_bn = Vec::with_capacity(params.blocks.len());
    for (i, block) in params.blocks.iter().enumerate() {
        let (w, b, gamma, beta) = (param_vars[4 * i], param_vars[4 * i + 1], param_vars[4 * i + 2], param_vars[4 * i + 3]);
        let z = tape.linear(h, w, b)?;
        check_layer(&tape, z, &format!("block{i}.linear"))?;
        pre_bn.push(z);
        let mut st = block.bn.clone();
        st.mode = bn_mode;
        let y = tape.batch_norm(z, gamma, beta, &st)?;
        check_layer(&tape, y, &format!("block{i}.bn"))?;
        h = tape.relu(y)?;
        if i + 1 == cfg.aggregate_after {
            let ctx = tape.neighbor_mean(h, input.neighbors.clone())?;
            h = tape.concat_cols(h, ctx)?;
        }
    }
    let nb = params.blocks.len();
    let logits = tape.linear(h, param_vars[4 * nb], param_vars[4 * nb + 1])?;
    check_layer(&tape, logits, "head")?;
    let log_probs = tape.log_softmax(logits)?;
    Ok(ForwardPass { tape, params: param_vars, pre_bn, logits, log_probs })
}

/// Inference: per-point logits, probabilities, labels and entropies.
pub fn forward<T: Scalar>(
    input: &SegInput<T>,
    params: &NetworkParams<T>,
    bn_mode: BnMode,
) -> Result<SegmentationState<T>> {
    forward_tape(input, params, bn_mode, false)?.state()
}
