use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_tape, init_params, NetworkParams, Result, SegInput, SegNetConfig, SegNetError};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::scalar::Scalar;
use crate::scene::LabeledCloud;
use crate::tensor::{BnMode, Reduction, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    /// Weight of the old value in the running-statistics moving average.
    pub bn_momentum: f64,
    /// Clouds stacked into one step; batch-norm statistics pool over all of them.
    pub clouds_per_step: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            optimizer: OptimizerConfig { weight_decay: 1e-4, ..OptimizerConfig::adam(5e-3) },
            bn_momentum: 0.9,
            clouds_per_step: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-step loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    /// Window-5 moving average of the epoch losses.
    pub fn smoothed(&self) -> Vec<f64> {
        const WINDOW: usize = 5;
        if self.epoch_losses.len() < WINDOW {
            return self.epoch_losses.clone();
        }
        self.epoch_losses.windows(WINDOW).map(|w| w.iter().sum::<f64>() / WINDOW as f64).collect()
    }

    /// True when the smoothed loss ever rises; a training-sanity flag.
    pub fn flagged(&self) -> bool {
        self.smoothed().windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-6))
    }
}

pub(crate) fn one_hot<T: Scalar>(labels: &[u32], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    let data = t.data_mut();
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l as usize] = T::one();
    }
    t
}

/// Cross-entropy training over shuffled groups of `clouds_per_step` clouds.
/// Batch-norm layers normalise with the statistics of the whole group and
/// their running statistics follow an exponential moving average. Returns
/// parameters in running-statistics mode.
pub fn train_supervised<T: Scalar>(
    train_set: &[LabeledCloud],
    net: &SegNetConfig,
    cfg: &TrainConfig,
) -> Result<(NetworkParams<T>, TrainReport)> {
    let params = init_params::<T>(net)?;
    continue_training(train_set, params, cfg)
}

/// Same as [`train_supervised`] but starting from existing parameters.
pub fn continue_training<T: Scalar>(
    train_set: &[LabeledCloud],
    mut params: NetworkParams<T>,
    cfg: &TrainConfig,
) -> Result<(NetworkParams<T>, TrainReport)> {
    if train_set.is_empty() {
        return Err(SegNetError::EmptyTrainSet);
    }
    cfg.optimizer.validate().map_err(|e| SegNetError::Config(e.to_string()))?;
    if cfg.clouds_per_step == 0 {
        return Err(SegNetError::Config("clouds_per_step must be at least 1".into()));
    }
    let classes = params.config.num_classes;
    let mut prepared = Vec::with_capacity(train_set.len());
    for cloud in train_set {
        let labels = cloud.labels.as_ref().ok_or_else(|| SegNetError::Unlabeled(cloud.name.clone()))?;
        cloud.validate(Some(classes)).map_err(|e| SegNetError::Config(e.to_string()))?;
        let input = SegInput::<T>::new(cloud, params.config.knn_k)?;
        prepared.push((input, one_hot::<T>(labels, classes)));
    }
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok((params, report));
    }
    let mut optimizer = Optimizer::<T>::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let momentum = T::lit(cfg.bn_momentum);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for group in order.chunks(cfg.clouds_per_step) {
            let stacked;
            let (input, targets) = if let [idx] = group {
                (&prepared[*idx].0, &prepared[*idx].1)
            } else {
                let inputs: Vec<&SegInput<T>> = group.iter().map(|&i| &prepared[i].0).collect();
                let rows: Vec<T> = group.iter().flat_map(|&i| prepared[i].1.data().iter().copied()).collect();
                let n = rows.len() / classes;
                stacked = (SegInput::concat(&inputs)?, Tensor::new(vec![n, classes], rows)?);
                (&stacked.0, &stacked.1)
            };
            let mut pass = forward_tape(input, &params, BnMode::InstanceStats, true)?;
            let weights = vec![T::one(); input.len()];
            let loss = pass.tape.nll(pass.log_probs, targets, &weights, Reduction::Mean)?;
            total += pass.tape.value(loss).item()?.as_f64();
            steps += 1;
            pass.tape.backward(loss)?;
            let grads = pass.gradients(&params);
            for (block, &z) in params.blocks.iter_mut().zip(&pass.pre_bn) {
                block.bn.update_running(pass.tape.value(z), momentum)?;
            }
            optimizer
                .step(params.learnable_mut(), &grads)
                .map_err(|e| SegNetError::Numeric(e.to_string()))?;
        }
        let mean = total / steps as f64;
        log::debug!("epoch {epoch}: loss {mean:.5}");
        report.epoch_losses.push(mean);
    }
    params.set_bn_mode(BnMode::RunningStats);
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_flag() {
        let ok = TrainReport { epoch_losses: vec![5.0, 4.0, 4.5, 3.0, 2.9, 2.8, 2.9, 2.5] };
        assert!(!ok.flagged());
        let bad = TrainReport { epoch_losses: vec![1.0, 1.0, 1.0, 1.0, 1.0, 3.0, 3.0] };
        assert!(bad.flagged());
    }

    #[test]
    fn empty_set_rejected() {
        let r = train_supervised::<f32>(&[], &SegNetConfig::default(), &TrainConfig::default());
        assert!(matches!(r, Err(SegNetError::EmptyTrainSet)));
    }
}
