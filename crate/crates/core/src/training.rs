//! Optimizers, the learning-rate halving rule and truncated-BPTT training over
//! parallel streams with carried hidden state.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cells::UnitKind;
use crate::error::{check_len, Error, Result};
use crate::gfstack::{sequence_backward_into, sequence_forward, Model, ParamSet, StackState};
use crate::numerics::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    RmspropMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: Real,
    pub momentum: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub rms_decay: Real,
    pub epsilon: Real,
}

pub const DEFAULT_RMS_DECAY: Real = 0.95;
pub const ADAM_EPSILON: Real = 1e-8;
pub const RMSPROP_EPSILON: Real = 1e-8;

impl OptimizerConfig {
    /// RMSProp with momentum 0.9; lr 0.001 for gated units and 5e-5 for tanh.
    pub fn rmsprop_for(unit: UnitKind) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::RmspropMomentum,
            learning_rate: if unit == UnitKind::Tanh { 5e-5 } else { 1e-3 },
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            rms_decay: DEFAULT_RMS_DECAY,
            epsilon: RMSPROP_EPSILON,
        }
    }

    /// Adam with lr 0.001 and β1 = β2 = 0.99.
    pub fn adam() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.0,
            beta1: 0.99,
            beta2: 0.99,
            rms_decay: DEFAULT_RMS_DECAY,
            epsilon: ADAM_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: Real, allow_zero: bool| {
            let ok = v.is_finite() && v <= 1.0 && (v > 0.0 || (allow_zero && v == 0.0));
            if ok {
                Ok(())
            } else {
                Err(Error::config(name, format!("{v} is outside (0, 1]")))
            }
        };
        unit("learning_rate", self.learning_rate, false)?;
        match self.kind {
            OptimizerKind::RmspropMomentum => {
                unit("momentum", self.momentum, true)?;
                unit("rms_decay", self.rms_decay, false)?;
            }
            OptimizerKind::Adam => {
                unit("beta1", self.beta1, true)?;
                unit("beta2", self.beta2, false)?;
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// Per-parameter accumulators, aligned with the flat parameter ordering.
///
/// RMSProp keeps the momentum step in `first` and the squared-gradient average in
/// `second`; Adam keeps its two moments there.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Real>,
    pub second: Vec<Real>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState { first: vec![0.0; n], second: vec![0.0; n], steps: 0 }
    }
}

fn check_aligned(state: &OptimizerState, params: &[Real], grads: &[Real]) -> Result<()> {
    check_len("optimizer: grads vs params", params.len(), grads.len())?;
    check_len("optimizer: state vs params", params.len(), state.first.len())?;
    check_len("optimizer: state vs params", params.len(), state.second.len())
}

/// `acc ← ρ·acc + (1−ρ)·g²; step ← μ·step − lr·g/√(acc+ε); θ ← θ + step`
pub fn rmsprop_momentum_update(state: &mut OptimizerState, params: &mut [Real], grads: &[Real], cfg: &OptimizerConfig) -> Result<()> {
    check_aligned(state, params, grads)?;
    let (rho, mu, lr, eps) = (cfg.rms_decay, cfg.momentum, cfg.learning_rate, cfg.epsilon);
    for k in 0..params.len() {
        let g = grads[k];
        let acc = rho * state.second[k] + (1.0 - rho) * g * g;
        let step = mu * state.first[k] - lr * g / (acc + eps).sqrt();
        state.second[k] = acc;
        state.first[k] = step;
        params[k] += step;
    }
    state.steps += 1;
    Ok(())
}

/// Bias-corrected Adam step.
pub fn adam_update(state: &mut OptimizerState, params: &mut [Real], grads: &[Real], cfg: &OptimizerConfig) -> Result<()> {
    check_aligned(state, params, grads)?;
    state.steps += 1;
    let t = state.steps as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for k in 0..params.len() {
        let g = grads[k];
        let m = b1 * state.first[k] + (1.0 - b1) * g;
        let v = b2 * state.second[k] + (1.0 - b2) * g * g;
        state.first[k] = m;
        state.second[k] = v;
        params[k] -= cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Halves the learning rate and asks to skip the update when the gradient norm
/// exceeds `threshold` or is not finite.
pub fn explosion_guard(grad_norm: Real, lr: Real, threshold: Real) -> (Real, bool) {
    if !grad_norm.is_finite() || grad_norm > threshold {
        (lr * 0.5, false)
    } else {
        (lr, true)
    }
}

/// Threshold = max(multiplier × EMA of accepted gradient norms, floor).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplosionRule {
    pub ema_decay: Real,
    pub multiplier: Real,
    pub floor: Real,
}

impl Default for ExplosionRule {
    fn default() -> Self {
        ExplosionRule { ema_decay: 0.99, multiplier: 5.0, floor: 1000.0 }
    }
}

impl ExplosionRule {
    pub fn threshold(&self, ema: Option<Real>) -> Real {
        match ema {
            Some(e) => (self.multiplier * e).max(self.floor),
            None => self.floor,
        }
    }

    pub fn update_ema(&self, ema: Option<Real>, norm: Real) -> Real {
        match ema {
            Some(e) => self.ema_decay * e + (1.0 - self.ema_decay) * norm,
            None => norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpdateOutcome {
    pub grad_norm: Real,
    pub applied: bool,
    /// Learning rate after the guard ran.
    pub lr: Real,
}

/// Optimizer plus explosion handling; the single writer of a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub optimizer: OptimizerConfig,
    pub state: OptimizerState,
    pub rule: ExplosionRule,
    pub norm_ema: Option<Real>,
    pub updates: u64,
    pub skipped: u64,
}

impl Trainer {
    pub fn new(optimizer: OptimizerConfig, rule: ExplosionRule, n_params: usize) -> Result<Self> {
        optimizer.validate()?;
        Ok(Trainer { optimizer, state: OptimizerState::new(n_params), rule, norm_ema: None, updates: 0, skipped: 0 })
    }

    pub fn learning_rate(&self) -> Real {
        self.optimizer.learning_rate
    }

    pub fn apply(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<UpdateOutcome> {
        let mut theta = params.to_flat();
        let outcome = self.apply_flat(&mut theta, &grads.to_flat())?;
        if outcome.applied {
            params.set_flat(&theta)?;
        }
        Ok(outcome)
    }

    /// Guarded update on flat vectors (e.g. several models trained jointly).
    pub fn apply_flat(&mut self, theta: &mut [Real], g: &[Real]) -> Result<UpdateOutcome> {
        let grad_norm = g.iter().map(|v| v * v).sum::<Real>().sqrt();
        let threshold = self.rule.threshold(self.norm_ema);
        let (lr, apply) = explosion_guard(grad_norm, self.optimizer.learning_rate, threshold);
        self.optimizer.learning_rate = lr;
        self.updates += 1;
        if !apply {
            self.skipped += 1;
            return Ok(UpdateOutcome { grad_norm, applied: false, lr });
        }
        self.norm_ema = Some(self.rule.update_ema(self.norm_ema, grad_norm));
        match self.optimizer.kind {
            OptimizerKind::RmspropMomentum => rmsprop_momentum_update(&mut self.state, theta, g, &self.optimizer)?,
            OptimizerKind::Adam => adam_update(&mut self.state, theta, g, &self.optimizer)?,
        }
        Ok(UpdateOutcome { grad_norm, applied: true, lr })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub n_streams: usize,
    /// Symbols per window; a window yields `subseq_len − 1` predictions and the
    /// next window starts on its last symbol.
    pub subseq_len: usize,
    pub reset_interval: usize,
}

impl BatchPlan {
    /// 100 streams of length 100, states reset every 100 updates.
    pub const PAPER: BatchPlan = BatchPlan { n_streams: 100, subseq_len: 100, reset_interval: 100 };

    pub fn validate(&self) -> Result<()> {
        if self.n_streams == 0 {
            return Err(Error::config("n_streams", "must be at least 1"));
        }
        if self.subseq_len < 2 {
            return Err(Error::config("subseq_len", "must be at least 2 symbols"));
        }
        if self.reset_interval == 0 {
            return Err(Error::config("reset_interval", "must be at least 1"));
        }
        Ok(())
    }
}

/// Stream layout over one corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub offsets: Vec<usize>,
    pub track_len: usize,
    pub subseq_len: usize,
    pub updates_per_epoch: usize,
}

impl Schedule {
    /// Corpus range fed to `stream` at update `k` of an epoch.
    pub fn window(&self, stream: usize, k: usize) -> Range<usize> {
        let start = self.offsets[stream] + k * (self.subseq_len - 1);
        start..start + self.subseq_len
    }
}

pub fn make_batch_plan(corpus_len: usize, plan: BatchPlan) -> Result<Schedule> {
    plan.validate()?;
    if corpus_len < plan.n_streams * plan.subseq_len {
        return Err(Error::Data(format!(
            "corpus of {corpus_len} symbols is too small for {} streams of {}",
            plan.n_streams, plan.subseq_len
        )));
    }
    let track_len = corpus_len / plan.n_streams;
    Ok(Schedule {
        offsets: (0..plan.n_streams).map(|s| s * track_len).collect(),
        track_len,
        subseq_len: plan.subseq_len,
        updates_per_epoch: (track_len - 1) / (plan.subseq_len - 1),
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpdateRecord {
    pub update: u64,
    pub epoch: u64,
    /// Mean nll over the minibatch, nats per symbol.
    pub nll: Real,
    pub grad_norm: Real,
    pub lr: Real,
    pub wall_ms: u64,
    pub applied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub mean_nll: Real,
    pub lr_trace: Vec<Real>,
    pub grad_norm_trace: Vec<Real>,
    pub skipped: usize,
}

/// Next-symbol training over parallel corpus streams with carried state.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamTrainer {
    pub trainer: Trainer,
    pub plan: BatchPlan,
    pub schedule: Schedule,
    pub states: Vec<StackState>,
    /// Completed epochs.
    pub epoch: u64,
    /// Next update index within the current epoch.
    pub position: usize,
    pub since_reset: usize,
}

impl StreamTrainer {
    pub fn new(model: &Model, optimizer: OptimizerConfig, rule: ExplosionRule, plan: BatchPlan, corpus_len: usize) -> Result<Self> {
        let schedule = make_batch_plan(corpus_len, plan)?;
        Ok(StreamTrainer {
            trainer: Trainer::new(optimizer, rule, model.params.len())?,
            plan,
            schedule,
            states: vec![model.zero_state(); plan.n_streams],
            epoch: 0,
            position: 0,
            since_reset: 0,
        })
    }

    fn reset_states(&mut self, model: &Model) {
        self.states.iter_mut().for_each(|s| *s = model.zero_state());
        self.since_reset = 0;
    }

    /// Runs one minibatch update.
    pub fn step(&mut self, model: &mut Model, corpus: &[usize], log: &mut dyn FnMut(&UpdateRecord)) -> Result<UpdateRecord> {
        if corpus.len() / self.plan.n_streams != self.schedule.track_len {
            return Err(Error::Data("corpus length changed since the schedule was made".into()));
        }
        let started = Instant::now();
        if self.position == 0 || self.since_reset >= self.plan.reset_interval {
            self.reset_states(model);
        }
        let preds = self.plan.n_streams * (self.plan.subseq_len - 1);
        let scale = 1.0 / preds as Real;
        let mut grads = model.params.zeros_like();
        let mut total = 0.0;
        for s in 0..self.plan.n_streams {
            let w = &corpus[self.schedule.window(s, self.position)];
            let n = w.len() - 1;
            let out = sequence_forward(&model.cfg, &model.params, &w[..n], &w[1..], &self.states[s])?;
            total += out.nll;
            sequence_backward_into(&model.cfg, &model.params, Some(&out.cache), scale, None, &mut grads)?;
            self.states[s] = out.final_state;
        }
        let outcome = self.trainer.apply(&mut model.params, &grads)?;
        self.since_reset += 1;
        let record = UpdateRecord {
            update: self.trainer.updates,
            epoch: self.epoch,
            nll: total * scale,
            grad_norm: outcome.grad_norm,
            lr: outcome.lr,
            wall_ms: started.elapsed().as_millis() as u64,
            applied: outcome.applied,
        };
        self.position += 1;
        if self.position == self.schedule.updates_per_epoch {
            self.position = 0;
            self.epoch += 1;
        }
        log(&record);
        Ok(record)
    }

    /// Runs updates until the current epoch ends.
    pub fn train_epoch(&mut self, model: &mut Model, corpus: &[usize], log: &mut dyn FnMut(&UpdateRecord)) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        let mut nll = Vec::new();
        let mut lr_trace = Vec::new();
        let mut grad_norm_trace = Vec::new();
        let mut skipped = 0;
        while self.epoch == epoch {
            let r = self.step(model, corpus, log)?;
            nll.push(r.nll);
            lr_trace.push(r.lr);
            grad_norm_trace.push(r.grad_norm);
            skipped += usize::from(!r.applied);
        }
        Ok(EpochMetrics { epoch, mean_nll: nll.iter().sum::<Real>() / nll.len() as Real, lr_trace, grad_norm_trace, skipped })
    }
}
