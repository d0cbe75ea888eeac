//! SGD and Adam with switchable state accumulation.
//!
//! With `ga_enabled = false` the optimisers keep no memory between steps:
//! SGD momentum and both Adam moment decays are forced to zero, whatever the
//! configured values.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for {0}")]
    NonFinite(String),
    #[error("gradient for {name} has shape {found:?}, parameter has {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("{params} parameters but {grads} gradients")]
    Count { params: usize, grads: usize },
    #[error("invalid optimizer config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub ga_enabled: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::sgd(1e-3)
    }
}

impl OptimizerConfig {
    /// SGD, momentum 0.9, weight decay 0.01.
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            epsilon: 1e-8,
            ga_enabled: true,
        }
    }

    /// Adam, betas (0.9, 0.999), weight decay 0.5.
    ///
    /// The weight decay is unusually large for Adam; it is kept as published
    /// and is just a config value.
    pub fn adam(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Adam, weight_decay: 0.5, momentum: 0.0, ..Self::sgd(learning_rate) }
    }

    pub fn with_lr(mut self, learning_rate: f64) -> Self {
        self.learning_rate = learning_rate;
        self
    }

    pub fn with_ga(mut self, ga_enabled: bool) -> Self {
        self.ga_enabled = ga_enabled;
        self
    }

    pub fn effective_momentum(&self) -> f64 {
        if self.ga_enabled {
            self.momentum
        } else {
            0.0
        }
    }

    pub fn effective_betas(&self) -> (f64, f64) {
        if self.ga_enabled {
            (self.beta1, self.beta2)
        } else {
            (0.0, 0.0)
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.learning_rate > 0.0) {
            return Err(OptimError::Config("learning_rate must be positive".into()));
        }
        if !unit(self.momentum) || !unit(self.beta1) || !unit(self.beta2) {
            return Err(OptimError::Config("momentum and betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.epsilon > 0.0) {
            return Err(OptimError::Config("weight_decay must be >= 0 and epsilon > 0".into()));
        }
        Ok(())
    }
}

/// Per-parameter buffers: SGD velocity, or Adam first/second moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Vec<T>>,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn reset(&mut self) {
        for buf in self.velocity.iter_mut().chain(&mut self.first_moment).chain(&mut self.second_moment) {
            buf.iter_mut().for_each(|v| *v = T::zero());
        }
        self.step = 0;
    }

    fn ensure(bufs: &mut Vec<Vec<T>>, sizes: &[usize]) {
        if bufs.len() != sizes.len() || bufs.iter().zip(sizes).any(|(b, &s)| b.len() != s) {
            *bufs = sizes.iter().map(|&s| vec![T::zero(); s]).collect();
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, state: OptimizerState::default() }
    }

    pub fn reset_state(&mut self) {
        self.state.reset();
    }

    /// Applies one update. Gradients are validated before any parameter is
    /// touched, so a failed step leaves parameters and state unchanged.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (String, &'a mut Tensor<T>)>,
        grads: &[Tensor<T>],
    ) -> Result<(), OptimError> {
        let mut params: Vec<(String, &'a mut Tensor<T>)> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(OptimError::Count { params: params.len(), grads: grads.len() });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(OptimError::Shape { name: name.clone(), expected: p.shape().to_vec(), found: g.shape().to_vec() });
            }
            if !g.is_finite() {
                return Err(OptimError::NonFinite(name.clone()));
            }
        }
        let sizes: Vec<usize> = grads.iter().map(Tensor::len).collect();
        let lr = T::lit(self.config.learning_rate);
        let wd = T::lit(self.config.weight_decay);
        self.state.step += 1;
        match self.config.kind {
            OptimizerKind::Sgd => {
                OptimizerState::ensure(&mut self.state.velocity, &sizes);
                let m = T::lit(self.config.effective_momentum());
                for (((_, p), g), v) in params.iter_mut().zip(grads).zip(&mut self.state.velocity) {
                    for ((w, &gv), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                        *vel = m * *vel + (gv + wd * *w);
                        *w -= lr * *vel;
                    }
                }
            }
            OptimizerKind::Adam => {
                OptimizerState::ensure(&mut self.state.first_moment, &sizes);
                OptimizerState::ensure(&mut self.state.second_moment, &sizes);
                let (b1, b2) = self.config.effective_betas();
                let t = self.state.step as i32;
                let c1 = T::lit(1.0 - b1.powi(t));
                let c2 = T::lit(1.0 - b2.powi(t));
                let (b1, b2) = (T::lit(b1), T::lit(b2));
                let eps = T::lit(self.config.epsilon);
                for ((((_, p), g), m1), m2) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.state.first_moment)
                    .zip(&mut self.state.second_moment)
                {
                    for (((w, &gv), a), b) in p.data_mut().iter_mut().zip(g.data()).zip(m1.iter_mut()).zip(m2.iter_mut()) {
                        let gg = gv + wd * *w;
                        *a = b1 * *a + (T::one() - b1) * gg;
                        *b = b2 * *b + (T::one() - b2) * gg * gg;
                        let mhat = *a / c1;
                        let vhat = *b / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    fn run(opt: &mut Optimizer<f64>, w: &mut Tensor<f64>, g: &[f64]) {
        opt.step(vec![("w".to_string(), w)], &[one(g)]).unwrap();
    }

    #[test]
    fn plain_sgd_is_gradient_descent() {
        let cfg = OptimizerConfig { momentum: 0.0, weight_decay: 0.0, ..OptimizerConfig::sgd(0.1) };
        let mut opt = Optimizer::new(cfg);
        let mut w = one(&[1.0, -2.0]);
        run(&mut opt, &mut w, &[0.5, -1.0]);
        assert_eq!(w.data(), &[1.0 - 0.1 * 0.5, -2.0 + 0.1]);
    }

    #[test]
    fn memoryless_adam_matches_hand_evaluation() {
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::adam(0.01) }.with_ga(false);
        let mut opt = Optimizer::new(cfg);
        let mut w = one(&[0.3, 0.3, 0.3]);
        let g = [2.0, -0.5, 1e-9];
        run(&mut opt, &mut w, &g);
        for (wi, gi) in w.data().iter().zip(g) {
            let expected = 0.3 - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((wi - expected).abs() < 1e-15, "{wi} vs {expected}");
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        for cfg in [OptimizerConfig::sgd(0.5), OptimizerConfig::adam(0.5)] {
            let mut opt = Optimizer::new(OptimizerConfig { weight_decay: 0.0, ..cfg });
            let mut w = one(&[1.5, -3.0]);
            run(&mut opt, &mut w, &[0.0, 0.0]);
            run(&mut opt, &mut w, &[0.0, 0.0]);
            assert_eq!(w.data(), &[1.5, -3.0]);
        }
    }

    #[test]
    fn ga_disabled_steps_are_memoryless() {
        for cfg in [OptimizerConfig::sgd(0.1), OptimizerConfig::adam(0.1)] {
            let mut opt = Optimizer::new(cfg.with_ga(false));
            let mut a = one(&[1.0]);
            run(&mut opt, &mut a, &[0.7]);
            let first = 1.0 - a.data()[0];
            let mut b = one(&[1.0]);
            run(&mut opt, &mut b, &[0.7]);
            assert_eq!(1.0 - b.data()[0], first);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::sgd(0.1) };
        let mut opt = Optimizer::new(cfg);
        let mut w = one(&[0.0]);
        run(&mut opt, &mut w, &[1.0]);
        let first = -w.data()[0];
        let before = w.data()[0];
        run(&mut opt, &mut w, &[1.0]);
        let second = before - w.data()[0];
        assert!(second > first);
    }

    #[test]
    fn reset_restores_first_step_behaviour() {
        for cfg in [OptimizerConfig::sgd(0.1), OptimizerConfig::adam(0.1)] {
            let cfg = OptimizerConfig { weight_decay: 0.0, ..cfg };
            let mut fresh = Optimizer::new(cfg.clone());
            let mut w0 = one(&[2.0]);
            run(&mut fresh, &mut w0, &[0.3]);
            let first = 2.0 - w0.data()[0];

            let mut used = Optimizer::new(cfg);
            let mut w = one(&[2.0]);
            for _ in 0..3 {
                run(&mut used, &mut w, &[0.3]);
            }
            used.reset_state();
            used.reset_state();
            assert_eq!(used.state.step, 0);
            let mut w1 = one(&[2.0]);
            run(&mut used, &mut w1, &[0.3]);
            assert_eq!(2.0 - w1.data()[0], first);
        }
    }

    #[test]
    fn adam_reset_restarts_bias_correction() {
        // with bias correction the first update has magnitude ~lr; late steps of a
        // decaying gradient are much smaller, and a reset brings back ~lr.
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::adam(0.1) };
        let mut opt = Optimizer::new(cfg);
        let mut w = one(&[0.0]);
        run(&mut opt, &mut w, &[1.0]);
        let first = -w.data()[0];
        assert!((first - 0.1).abs() < 1e-6);
        for _ in 0..5 {
            run(&mut opt, &mut w, &[0.01]);
        }
        let before = w.data()[0];
        run(&mut opt, &mut w, &[0.01]);
        let late = (before - w.data()[0]).abs();
        opt.reset_state();
        let before = w.data()[0];
        run(&mut opt, &mut w, &[0.01]);
        let restarted = (before - w.data()[0]).abs();
        assert!(late < 0.05);
        assert!((restarted - 0.1).abs() < 1e-5);
    }

    #[test]
    fn nan_gradient_is_rejected_without_side_effects() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        let mut w = one(&[1.0]);
        let err = opt.step(vec![("layer.w".to_string(), &mut w)], &[one(&[f64::NAN])]).unwrap_err();
        assert_eq!(err, OptimError::NonFinite("layer.w".into()));
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(opt.state.step, 0);
    }

    #[test]
    fn effective_hyperparameters() {
        let cfg = OptimizerConfig::sgd(0.1).with_ga(false);
        assert_eq!(cfg.effective_momentum(), 0.0);
        assert_eq!(OptimizerConfig::adam(0.1).with_ga(false).effective_betas(), (0.0, 0.0));
        assert_eq!(OptimizerConfig::adam(0.1).effective_betas(), (0.9, 0.999));
        assert!(OptimizerConfig { momentum: 1.0, ..cfg }.validate().is_err());
    }
}
