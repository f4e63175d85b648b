//! Minibatch training with Adam.
//!
//! Each step draws its batch and per-item streams from `seed`, evaluates
//! per-item losses in parallel on private tapes, and sums gradients in item
//! order, so results are identical for any thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::NBodyState;
use crate::matching::{sym_flow_loss, sym_score_loss};
use crate::nets::{Model, NetConfig, Nets};
use crate::numcore::{RngStream, Tensor};
use crate::objective::{
    aug_step_loss, estimate_nll_bound, plain_step_loss, symdiff_step_loss, value_and_grad, GammaKind,
    NllBound,
};
use crate::schedule::{NoiseSchedule, ScheduleKind, WeightMode};

/// Stream id reserved for training draws.
const TRAIN_STREAM: u64 = 0x74_7261_696e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Symdiff,
    Aug,
    Plain,
    SymdiffHaar,
    Score,
    Flow,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] = [
        TrainMode::Symdiff,
        TrainMode::Aug,
        TrainMode::Plain,
        TrainMode::SymdiffHaar,
        TrainMode::Score,
        TrainMode::Flow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Symdiff => "symdiff",
            TrainMode::Aug => "aug",
            TrainMode::Plain => "plain",
            TrainMode::SymdiffHaar => "symdiff-haar",
            TrainMode::Score => "score",
            TrainMode::Flow => "flow",
        }
    }

    /// The rotation sampler the trained model is used with. Augmented and
    /// plain models run unsymmetrised.
    pub fn gamma(self) -> GammaKind {
        match self {
            TrainMode::Symdiff | TrainMode::Score | TrainMode::Flow => GammaKind::Recursive,
            TrainMode::SymdiffHaar => GammaKind::Haar,
            TrainMode::Aug | TrainMode::Plain => GammaKind::Identity,
        }
    }

    pub fn is_diffusion(self) -> bool {
        !matches!(self, TrainMode::Score | TrainMode::Flow)
    }
}

/// Everything needed to rebuild a trained model around its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: TrainMode,
    /// Overrides the mode's rotation sampler (a debug switch for Dirac γ).
    pub gamma: GammaKind,
    pub steps_t: usize,
    pub schedule: ScheduleKind,
    pub n_points: usize,
    pub net: NetConfig,
    /// Euler steps for flow models.
    pub flow_steps: usize,
}

impl RunConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.schedule, self.steps_t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub gamma: GammaKind,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, steps: usize, seed: u64) -> Self {
        Self {
            mode,
            gamma: mode.gamma(),
            steps,
            batch: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::contract("learning rate must be positive, weight decay non-negative"));
        }
        Ok(())
    }
}

/// Adam with optional decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Loss of one training item; draws `t` first, then the loss's own randomness.
pub fn item_loss_grad(
    nets: &Nets,
    sched: &NoiseSchedule,
    z0: &NBodyState,
    mode: TrainMode,
    gamma: GammaKind,
    stream: &mut RngStream,
) -> Result<(f64, Vec<Tensor>)> {
    let w = WeightMode::Unit;
    if mode.is_diffusion() {
        let t = 1 + stream.below(sched.steps());
        value_and_grad(nets, |tape, b| match mode {
            TrainMode::Plain => plain_step_loss(tape, b, nets, sched, z0, t, w, stream),
            TrainMode::Aug => aug_step_loss(tape, b, nets, sched, z0, t, w, stream),
            _ => symdiff_step_loss(tape, b, nets, sched, z0, t, gamma, w, stream),
        })
    } else {
        let t = stream.uniform();
        value_and_grad(nets, |tape, b| match mode {
            TrainMode::Score => sym_score_loss(tape, b, nets, z0, t, gamma, stream),
            _ => sym_flow_loss(tape, b, nets, z0, t, gamma, stream),
        })
    }
}

/// Mean loss and gradient over a batch; items use `stream.child(i)`.
pub fn batch_loss_grad(
    nets: &Nets,
    sched: &NoiseSchedule,
    items: &[&NBodyState],
    mode: TrainMode,
    gamma: GammaKind,
    stream: &RngStream,
) -> Result<(f64, Vec<f64>)> {
    let parts = items
        .par_iter()
        .enumerate()
        .map(|(i, z)| item_loss_grad(nets, sched, z, mode, gamma, &mut stream.child(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / items.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; nets.params.num_values()];
    for (l, g) in parts {
        loss += l;
        let mut off = 0;
        for t in g {
            for (acc, v) in grad[off..off + t.len()].iter_mut().zip(t.data()) {
                *acc += v;
            }
            off += t.len();
        }
    }
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Runs `cfg.steps` optimiser steps, calling `on_step` after each.
pub fn train(
    model: &mut Model,
    sched: &NoiseSchedule,
    data: &[NBodyState],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let root = RngStream::with_stream(cfg.seed, TRAIN_STREAM);
    let mut opt = Adam::new(model.params.num_values(), cfg.lr, cfg.weight_decay);
    let mut flat = model.params.flat();
    for step in 1..=cfg.steps {
        let mut s = root.child(step as u64);
        let items: Vec<&NBodyState> = (0..cfg.batch).map(|_| &data[s.below(data.len())]).collect();
        let (loss, grad) = batch_loss_grad(&model.nets(), sched, &items, cfg.mode, cfg.gamma, &s)?;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {step}")));
        }
        opt.step(&mut flat, &grad);
        model.params.set_flat(&flat)?;
        on_step(&StepMetrics { step, loss, grad_norm });
    }
    Ok(())
}

/// Mean negative ELBO over `data`; sample `i` uses `stream.child(i)`.
pub fn mean_nll_bound(
    nets: &Nets,
    sched: &NoiseSchedule,
    data: &[NBodyState],
    gamma: GammaKind,
    n_t: usize,
    stream: &RngStream,
) -> Result<NllBound> {
    if data.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let parts = data
        .par_iter()
        .enumerate()
        .map(|(i, z)| estimate_nll_bound(nets, sched, z, gamma, n_t, &mut stream.child(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let k = parts.len() as f64;
    let mut out = NllBound { prior: 0.0, diffusion: 0.0, reconstruction: 0.0, total: 0.0 };
    for p in parts {
        out.prior += p.prior / k;
        out.diffusion += p.diffusion / k;
        out.reconstruction += p.reconstruction / k;
        out.total += p.total / k;
    }
    Ok(out)
}
