use serde::{Deserialize, Serialize};

use super::{dim_err, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Which statistics a batch-norm layer normalises with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Stored running mean/variance accumulated during training.
    RunningStats,
    /// Mean/variance of the current input over its rows.
    InstanceStats,
}

/// Per-channel batch-norm parameters and statistics.
///
/// `y = gamma * (x - mu) / sqrt(sigma2 + epsilon) + beta`. Running statistics
/// only change through [`BatchNormState::update_running`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mu: Vec<T>,
    pub running_sigma2: Vec<T>,
    pub epsilon: T,
    pub mode: BnMode,
}

impl<T: Scalar> BatchNormState<T> {
    /// Identity affine, zero mean, unit variance.
    pub fn new(channels: usize, epsilon: T) -> Self {
        Self {
            gamma: Tensor::ones(&[1, channels]),
            beta: Tensor::zeros(&[1, channels]),
            running_mu: vec![T::zero(); channels],
            running_sigma2: vec![T::one(); channels],
            epsilon,
            mode: BnMode::RunningStats,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.gamma.len() != c || self.beta.len() != c || self.running_sigma2.len() != c {
            return Err(dim_err("BatchNormState", "per-channel fields differ in length"));
        }
        if self.epsilon.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
            return Err(TensorError::Contract { op: "BatchNormState", detail: "epsilon must be > 0".into() });
        }
        if self.running_sigma2.iter().any(|&v| v < T::zero()) {
            return Err(TensorError::Contract {
                op: "BatchNormState",
                detail: "running variance must be non-negative".into(),
            });
        }
        Ok(())
    }

    /// Exponential moving average of the running statistics towards the
    /// population statistics of `x`: `running = momentum·running + (1-momentum)·batch`.
    pub fn update_running(&mut self, x: &Tensor<T>, momentum: T) -> Result<()> {
        let (mu, var) = instance_stats(x, self.channels(), "update_running")?;
        let keep = momentum;
        let take = T::one() - momentum;
        for c in 0..self.channels() {
            self.running_mu[c] = keep * self.running_mu[c] + take * mu[c];
            self.running_sigma2[c] = keep * self.running_sigma2[c] + take * var[c];
        }
        Ok(())
    }
}

/// Per-channel mean and (biased) variance over the rows of `x`.
pub(crate) fn instance_stats<T: Scalar>(
    x: &Tensor<T>,
    channels: usize,
    op: &'static str,
) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c) = x.expect_matrix(op)?;
    if c != channels {
        return Err(dim_err(op, format!("input has {c} channels, state has {channels}")));
    }
    if n == 0 {
        return Err(TensorError::DegenerateBatch(op));
    }
    let inv_n = T::lit(1.0 / n as f64);
    let mut mu = vec![T::zero(); c];
    for row in x.data().chunks_exact(c) {
        for (m, &v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m *= inv_n);
    let mut var = vec![T::zero(); c];
    for row in x.data().chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mu) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s *= inv_n);
    Ok((mu, var))
}

pub(crate) struct BnForward<T> {
    pub output: Vec<T>,
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Shared forward kernel; reads running statistics only in `RunningStats` mode
/// and computes statistics from `x` only in `InstanceStats` mode.
pub(crate) fn bn_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mu: &[T],
    running_sigma2: &[T],
    epsilon: T,
    mode: BnMode,
) -> Result<BnForward<T>> {
    let (_, c) = x.expect_matrix("batch_norm")?;
    if gamma.len() != c || beta.len() != c || running_mu.len() != c || running_sigma2.len() != c {
        return Err(dim_err(
            "batch_norm",
            format!("input has {c} channels, state has {}", running_mu.len()),
        ));
    }
    let (mu, var) = match mode {
        BnMode::InstanceStats => instance_stats(x, c, "batch_norm")?,
        BnMode::RunningStats => (running_mu.to_vec(), running_sigma2.to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| (v + epsilon).sqrt().recip()).collect();
    let mut normalized = vec![T::zero(); x.len()];
    let mut output = vec![T::zero(); x.len()];
    for ((xr, nr), or) in x
        .data()
        .chunks_exact(c)
        .zip(normalized.chunks_exact_mut(c))
        .zip(output.chunks_exact_mut(c))
    {
        for j in 0..c {
            let h = (xr[j] - mu[j]) * inv_std[j];
            nr[j] = h;
            or[j] = gamma[j] * h + beta[j];
        }
    }
    Ok(BnForward { output, normalized, inv_std })
}

/// Applies batch normalisation outside of any tape.
pub fn batch_norm<T: Scalar>(x: &Tensor<T>, st: &BatchNormState<T>) -> Result<Tensor<T>> {
    let fwd = bn_forward(
        x,
        st.gamma.data(),
        st.beta.data(),
        &st.running_mu,
        &st.running_sigma2,
        st.epsilon,
        st.mode,
    )?;
    Tensor::new(x.shape().to_vec(), fwd.output)
}
