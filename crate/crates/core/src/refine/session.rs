use serde::{Deserialize, Serialize};

use super::energy::{probe_truth, update_filter_scores};
use super::{ClickIssue, InteractionRecord, RefineConfig, RefineError, Result};
use crate::optim::Optimizer;
use crate::scalar::Scalar;
use crate::scene::LabeledCloud;
use crate::segnet::{forward, forward_tape, ForwardPass, NetworkParams, SegInput, SegmentationState};
use crate::tensor::{BnMode, Reduction, Tensor, Var};

/// Energies of one optimisation round, measured before its parameter update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub interaction: usize,
    pub step: usize,
    pub correction: f64,
    pub stabilization: f64,
    pub loss: f64,
    /// Number of points with filter score 1 in this round.
    pub active_filters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub losses: Vec<f64>,
    /// Label agreement with the pseudo labels before any warm-up step, under per-cloud statistics.
    pub agreement_before: f64,
    pub agreement_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub interaction: usize,
    /// Points whose predicted label changed in this call, ascending.
    pub changed: Vec<usize>,
    pub trace: Vec<RoundTrace>,
    /// Fraction of all recorded clicks whose point now carries the corrected label.
    pub clicked_accuracy: f64,
}

#[derive(Clone, Debug)]
struct Snapshot<T> {
    params: NetworkParams<T>,
    seg: SegmentationState<T>,
}

/// One cloud's interactive refinement state. All mutation goes through
/// `&mut self`, so a session has a single writer by construction.
#[derive(Clone, Debug)]
pub struct RefinementSession<T: Scalar> {
    cloud: LabeledCloud,
    input: SegInput<T>,
    params: NetworkParams<T>,
    config: RefineConfig,
    pseudo_labels: Option<Vec<u32>>,
    seg: SegmentationState<T>,
    filter_scores: Vec<bool>,
    clicks: Vec<InteractionRecord>,
    history: Vec<Vec<InteractionRecord>>,
    prev_entropies: Vec<T>,
    round_counter: usize,
    trace: Vec<RoundTrace>,
    optimizer: Optimizer<T>,
    snapshot: Option<Snapshot<T>>,
}

fn agreement(a: &[u32], b: &[u32]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len().max(1) as f64
}

fn sparse_targets<T: Scalar>(n: usize, m: usize, clicks: &[InteractionRecord]) -> (Tensor<T>, Vec<T>) {
    let mut t = Tensor::zeros(&[n, m]);
    let mut w = vec![T::zero(); n];
    for c in clicks {
        t.data_mut()[c.point_index * m + c.corrected_label as usize] = T::one();
        w[c.point_index] = T::one();
    }
    (t, w)
}

struct LossVars {
    loss: Var,
    correction: Var,
    stabilization: Option<Var>,
}

impl<T: Scalar> RefinementSession<T> {
    /// Builds a session and runs the initial inference with stored batch-norm statistics.
    pub fn new(cloud: LabeledCloud, params: NetworkParams<T>, config: RefineConfig) -> Result<Self> {
        let input = SegInput::new(&cloud, params.config.knn_k)?;
        Self::with_input(cloud, input, params, config)
    }

    /// As [`RefinementSession::new`] with a prepared input (reusing its neighbour table).
    pub fn with_input(cloud: LabeledCloud, input: SegInput<T>, mut params: NetworkParams<T>, config: RefineConfig) -> Result<Self> {
        config.validate()?;
        cloud.validate(Some(params.config.num_classes)).map_err(|e| RefineError::State(e.to_string()))?;
        if input.len() != cloud.len() {
            return Err(RefineError::Length(format!("input has {} rows, cloud {} points", input.len(), cloud.len())));
        }
        params.set_bn_mode(BnMode::RunningStats);
        let seg = forward(&input, &params, BnMode::RunningStats)?;
        let n = cloud.len();
        let optimizer = Optimizer::new(config.testtime_optimizer());
        Ok(Self {
            cloud,
            input,
            params,
            config,
            pseudo_labels: None,
            prev_entropies: seg.entropies.clone(),
            seg,
            filter_scores: vec![true; n],
            clicks: Vec::new(),
            history: Vec::new(),
            round_counter: 0,
            trace: Vec::new(),
            optimizer,
            snapshot: None,
        })
    }

    pub fn cloud(&self) -> &LabeledCloud {
        &self.cloud
    }

    pub fn input(&self) -> &SegInput<T> {
        &self.input
    }

    pub fn params(&self) -> &NetworkParams<T> {
        &self.params
    }

    pub fn config(&self) -> &RefineConfig {
        &self.config
    }

    pub fn seg(&self) -> &SegmentationState<T> {
        &self.seg
    }

    pub fn labels(&self) -> &[u32] {
        &self.seg.labels
    }

    pub fn filter_scores(&self) -> &[bool] {
        &self.filter_scores
    }

    /// Current click set: one record per clicked point.
    pub fn clicks(&self) -> &[InteractionRecord] {
        &self.clicks
    }

    /// Click lists exactly as submitted, one entry per refine call.
    pub fn history(&self) -> &[Vec<InteractionRecord>] {
        &self.history
    }

    pub fn trace(&self) -> &[RoundTrace] {
        &self.trace
    }

    pub fn interaction_round(&self) -> usize {
        self.round_counter
    }

    /// One-hot pseudo labels recorded before warm-up, as class indices.
    pub fn pseudo_labels(&self) -> Option<&[u32]> {
        self.pseudo_labels.as_deref()
    }

    pub fn is_warmed(&self) -> bool {
        self.snapshot.is_some()
    }

    /// Prediction right after warm-up.
    pub fn initial_labels(&self) -> Option<&[u32]> {
        self.snapshot.as_ref().map(|s| s.seg.labels.as_slice())
    }

    fn mode(&self) -> BnMode {
        if self.is_warmed() {
            BnMode::InstanceStats
        } else {
            BnMode::RunningStats
        }
    }

    fn step(optimizer: &mut Optimizer<T>, params: &mut NetworkParams<T>, grads: &[Tensor<T>]) -> Result<()> {
        optimizer.step(params.learnable_mut(), grads).map_err(|e| RefineError::Optim(e.to_string()))
    }

    /// Records the current prediction as pseudo labels, switches batch-norm to
    /// per-cloud statistics and fine-tunes on the pseudo labels.
    pub fn warm_up(&mut self) -> Result<WarmupReport> {
        if self.is_warmed() {
            return Err(RefineError::State("warm-up already ran".into()));
        }
        if !self.clicks.is_empty() {
            return Err(RefineError::State("warm-up must precede interaction".into()));
        }
        let q_hat = self.seg.labels.clone();
        let targets: Tensor<T> = crate::segnet::one_hot(&q_hat, self.seg.num_classes());
        let ones = vec![T::one(); self.cloud.len()];
        self.params.set_bn_mode(BnMode::InstanceStats);
        let rounds = if self.config.ablation.no_warmup { 0 } else { self.config.warmup_rounds };
        let mut optimizer = Optimizer::new(self.config.warmup_optimizer());
        let mut losses = Vec::with_capacity(rounds);
        let mut agreement_before = None;
        for _ in 0..rounds {
            let mut pass = forward_tape(&self.input, &self.params, BnMode::InstanceStats, true)?;
            if agreement_before.is_none() {
                agreement_before = Some(agreement(&pass.state()?.labels, &q_hat));
            }
            let loss = pass.tape.nll(pass.log_probs, &targets, &ones, Reduction::Mean)?;
            losses.push(pass.tape.value(loss).item()?.as_f64());
            pass.tape.backward(loss)?;
            let grads = pass.gradients(&self.params);
            Self::step(&mut optimizer, &mut self.params, &grads)?;
        }
        self.seg = forward(&self.input, &self.params, BnMode::InstanceStats)?;
        let agreement_after = agreement(&self.seg.labels, &q_hat);
        self.pseudo_labels = Some(q_hat);
        self.prev_entropies = self.seg.entropies.clone();
        self.filter_scores = vec![true; self.cloud.len()];
        self.snapshot = Some(Snapshot { params: self.params.clone(), seg: self.seg.clone() });
        Ok(WarmupReport { losses, agreement_before: agreement_before.unwrap_or(agreement_after), agreement_after })
    }

    /// Restores the post-warm-up state and forgets all clicks.
    pub fn reset(&mut self) -> Result<()> {
        let snap = self.snapshot.as_ref().ok_or_else(|| RefineError::State("session was never warmed up".into()))?;
        self.params = snap.params.clone();
        self.seg = snap.seg.clone();
        self.prev_entropies = self.seg.entropies.clone();
        self.filter_scores = vec![true; self.cloud.len()];
        self.clicks.clear();
        self.history.clear();
        self.trace.clear();
        self.round_counter = 0;
        self.optimizer.reset_state();
        Ok(())
    }

    fn validate_clicks(&self, clicks: &[InteractionRecord]) -> Result<()> {
        let (n, m) = (self.cloud.len(), self.seg.num_classes());
        let issues: Vec<ClickIssue> = clicks
            .iter()
            .enumerate()
            .filter_map(|(k, c)| {
                let reason = if c.point_index >= n {
                    format!("point index out of range [0, {n})")
                } else if c.corrected_label as usize >= m {
                    format!("class {} out of range [0, {m})", c.corrected_label)
                } else {
                    return None;
                };
                Some(ClickIssue { position: k, point_index: c.point_index, reason })
            })
            .collect();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(RefineError::InvalidClicks(issues))
        }
    }

    fn record_clicks(&mut self, new_clicks: &[InteractionRecord]) {
        for c in new_clicks {
            let rec = InteractionRecord { round: self.round_counter, ..c.clone() };
            if self.seg.labels[c.point_index] == c.corrected_label {
                log::warn!("click on point {} repeats its current label {}", c.point_index, c.corrected_label);
            }
            match self.clicks.iter_mut().find(|r| r.point_index == c.point_index) {
                Some(old) => *old = rec,
                None => self.clicks.push(rec),
            }
        }
    }

    fn build_loss(&self, pass: &mut ForwardPass<T>, clicks: (&Tensor<T>, &[T]), scores: &[bool], with_stab: bool) -> Result<LossVars> {
        let tape = &mut pass.tape;
        let correction = tape.nll(pass.log_probs, clicks.0, clicks.1, Reduction::Sum)?;
        if !with_stab {
            return Ok(LossVars { loss: correction, correction, stabilization: None });
        }
        let w: Vec<T> = scores.iter().map(|&s| if s { T::one() } else { T::zero() }).collect();
        let stab = tape.weighted_entropy(pass.log_probs, &w, Reduction::Mean)?;
        let scaled = tape.scale(stab, T::lit(self.config.lambda))?;
        let loss = tape.add(correction, scaled)?;
        Ok(LossVars { loss, correction, stabilization: Some(stab) })
    }

    /// Probe step on a copy of the parameters: one update on the loss with all
    /// scores at 1, then every point whose entropy rose by at least
    /// `delta_probe` gets score 0.
    fn probe(&self, pass: &mut ForwardPass<T>, clicks: (&Tensor<T>, &[T])) -> Result<Vec<bool>> {
        let ones = vec![true; self.cloud.len()];
        let vars = self.build_loss(pass, clicks, &ones, true)?;
        pass.tape.zero_grad();
        pass.tape.backward(vars.loss)?;
        let grads = pass.gradients(&self.params);
        let mut probe_params = self.params.clone();
        let mut optimizer = Optimizer::new(self.config.probe_optimizer());
        Self::step(&mut optimizer, &mut probe_params, &grads)?;
        let after = forward(&self.input, &probe_params, BnMode::InstanceStats)?;
        Ok(self
            .seg
            .entropies
            .iter()
            .zip(&after.entropies)
            .map(|(&e0, &e1)| probe_truth((e1 - e0).as_f64(), self.config.delta_probe))
            .collect())
    }

    /// Filter scores from a probe step over the current clicks. Leaves the
    /// session untouched.
    pub fn evaluate_filter_scores(&self) -> Result<Vec<bool>> {
        if self.clicks.is_empty() {
            return Err(RefineError::State("filter evaluation needs at least one click".into()));
        }
        let (targets, w) = sparse_targets::<T>(self.cloud.len(), self.seg.num_classes(), &self.clicks);
        let mut pass = forward_tape(&self.input, &self.params, self.mode(), true)?;
        self.probe(&mut pass, (&targets, &w))
    }

    fn begin_interaction(&mut self, new_clicks: &[InteractionRecord]) -> Result<()> {
        if !self.is_warmed() {
            if self.config.ablation.no_warmup {
                self.warm_up()?;
            } else {
                return Err(RefineError::State("refine before warm-up".into()));
            }
        }
        self.validate_clicks(new_clicks)?;
        if new_clicks.is_empty() && self.clicks.is_empty() {
            return Err(RefineError::State("no clicks recorded yet".into()));
        }
        self.round_counter += 1;
        self.record_clicks(new_clicks);
        self.history.push(new_clicks.to_vec());
        Ok(())
    }

    fn finish(&self, before: &[u32], trace: Vec<RoundTrace>) -> RefineOutcome {
        let changed = before.iter().zip(&self.seg.labels).enumerate().filter(|(_, (a, b))| a != b).map(|(i, _)| i).collect();
        let hit = self.clicks.iter().filter(|c| self.seg.labels[c.point_index] == c.corrected_label).count();
        RefineOutcome {
            interaction: self.round_counter,
            changed,
            trace,
            clicked_accuracy: hit as f64 / self.clicks.len().max(1) as f64,
        }
    }

    /// Records the clicks and runs the configured number of test-time rounds.
    /// With `ia_baseline` set this dispatches to [`Self::ia_baseline_refine`].
    pub fn refine(&mut self, new_clicks: &[InteractionRecord]) -> Result<RefineOutcome> {
        if self.config.ablation.ia_baseline {
            return self.ia_baseline_refine(new_clicks);
        }
        self.begin_interaction(new_clicks)?;
        let before = self.seg.labels.clone();
        let (n, m) = (self.cloud.len(), self.seg.num_classes());
        let (targets, click_w) = sparse_targets::<T>(n, m, &self.clicks);
        let ab = &self.config.ablation;
        let with_stab = !ab.no_stabilization;
        let filtering = with_stab && !ab.no_filtering;
        let rounds = self.config.refine_rounds_per_interaction;

        let mut pass = forward_tape(&self.input, &self.params, BnMode::InstanceStats, true)?;
        self.filter_scores = if filtering { self.probe(&mut pass, (&targets, &click_w))? } else { vec![true; n] };
        self.prev_entropies = self.seg.entropies.clone();
        let mut trace = Vec::with_capacity(rounds);
        for t in 0..rounds {
            let vars = self.build_loss(&mut pass, (&targets, &click_w), &self.filter_scores, with_stab)?;
            let value = |v: Var| pass.tape.value(v).item().map(|x| x.as_f64());
            trace.push(RoundTrace {
                interaction: self.round_counter,
                step: t,
                correction: value(vars.correction)?,
                stabilization: vars.stabilization.map(value).transpose()?.unwrap_or(0.0),
                loss: value(vars.loss)?,
                active_filters: self.filter_scores.iter().filter(|&&s| s).count(),
            });
            pass.tape.zero_grad();
            pass.tape.backward(vars.loss)?;
            let grads = pass.gradients(&self.params);
            Self::step(&mut self.optimizer, &mut self.params, &grads)?;
            pass = forward_tape(&self.input, &self.params, BnMode::InstanceStats, t + 1 < rounds)?;
            self.seg = pass.state()?;
            if filtering && (t + 1 < rounds || self.config.update_after_last_round) {
                let (dp, dm) = (self.config.delta_plus, self.config.delta_minus);
                update_filter_scores(&mut self.filter_scores, &self.prev_entropies, &self.seg.entropies, dp, dm)?;
            }
            self.prev_entropies = self.seg.entropies.clone();
        }
        self.trace.extend(trace.iter().cloned());
        Ok(self.finish(&before, trace))
    }

    /// Baseline adaptation: cross-entropy on the clicked points plus
    /// `lambda`-weighted mean cross-entropy of the remaining points against the
    /// fixed post-warm-up prediction. No entropy term and no filtering.
    pub fn ia_baseline_refine(&mut self, new_clicks: &[InteractionRecord]) -> Result<RefineOutcome> {
        self.begin_interaction(new_clicks)?;
        let before = self.seg.labels.clone();
        let (n, m) = (self.cloud.len(), self.seg.num_classes());
        let (targets, click_w) = sparse_targets::<T>(n, m, &self.clicks);
        let initial = self.initial_labels().expect("warmed").to_vec();
        let pseudo: Tensor<T> = crate::segnet::one_hot(&initial, m);
        let pseudo_w: Vec<T> = click_w.iter().map(|&w| T::one() - w).collect();
        let lambda = T::lit(self.config.lambda);
        self.filter_scores = vec![true; n];
        let rounds = self.config.refine_rounds_per_interaction;
        let mut trace = Vec::with_capacity(rounds);
        let mut pass = forward_tape(&self.input, &self.params, BnMode::InstanceStats, true)?;
        for t in 0..rounds {
            let tape = &mut pass.tape;
            let correction = tape.nll(pass.log_probs, &targets, &click_w, Reduction::Sum)?;
            let keep = tape.nll(pass.log_probs, &pseudo, &pseudo_w, Reduction::Mean)?;
            let scaled = tape.scale(keep, lambda)?;
            let loss = tape.add(correction, scaled)?;
            let value = |v: Var| tape.value(v).item().map(|x| x.as_f64());
            trace.push(RoundTrace {
                interaction: self.round_counter,
                step: t,
                correction: value(correction)?,
                stabilization: value(keep)?,
                loss: value(loss)?,
                active_filters: n,
            });
            tape.backward(loss)?;
            let grads = pass.gradients(&self.params);
            Self::step(&mut self.optimizer, &mut self.params, &grads)?;
            pass = forward_tape(&self.input, &self.params, BnMode::InstanceStats, t + 1 < rounds)?;
            self.seg = pass.state()?;
        }
        self.prev_entropies = self.seg.entropies.clone();
        self.trace.extend(trace.iter().cloned());
        Ok(self.finish(&before, trace))
    }
}
