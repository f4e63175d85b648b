//! Training losses and the variational bound.
//!
//! Every stochastic loss has a deterministic core that takes all of its
//! random inputs explicitly, plus a wrapper that draws them from a stream in
//! a fixed order: noise `ε`, then the base rotation `R0`, then head noise `η`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::NBodyState;
use crate::nets::{Bound, Nets};
use crate::numcore::{RngStream, Tape, Tensor, Var};
use crate::ortho::sample_haar;
use crate::schedule::{forward_sample, standard_projected_normal, NoiseSchedule, WeightMode};
use crate::symkernel::draw_head_noise;

/// How the rotation `R` in a symmetrised prediction is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaKind {
    Identity,
    Haar,
    /// `R0 f_θ(R0ᵀ z, η)` with the learned head.
    Recursive,
}

/// The random inputs of a rotation draw.
#[derive(Clone, Debug, PartialEq)]
pub enum RotationDraw {
    Fixed(Tensor),
    Recursive { r0: Tensor, eta: Tensor },
}

impl RotationDraw {
    pub fn draw(kind: GammaKind, n: usize, noise_dim: usize, stream: &mut RngStream) -> Result<Self> {
        Ok(match kind {
            GammaKind::Identity => RotationDraw::Fixed(Tensor::eye(3)),
            GammaKind::Haar => RotationDraw::Fixed(sample_haar(stream)?),
            GammaKind::Recursive => {
                let r0 = sample_haar(stream)?;
                let eta = draw_head_noise(n, noise_dim, stream);
                RotationDraw::Recursive { r0, eta }
            }
        })
    }
}

/// Applies `R` (or `Rᵀ` when `transpose`) to the position block of `z`.
pub fn rotate_on_tape(tape: &mut Tape, z: Var, r: Var, transpose: bool) -> Result<Var> {
    let cols = tape.value(z).cols();
    let x = tape.slice_cols(z, 0, 3)?;
    // Row-vector convention: applying R to each row is x Rᵀ.
    let xr = if transpose {
        tape.matmul(x, r)?
    } else {
        let rt = tape.transpose(r);
        tape.matmul(x, rt)?
    };
    if cols == 3 {
        return Ok(xr);
    }
    let h = tape.slice_cols(z, 3, cols)?;
    tape.concat_cols(&[xr, h])
}

/// Puts the rotation for `draw` on the tape, running the head if needed.
pub fn rotation_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    nets: &Nets,
    draw: &RotationDraw,
    z: Var,
    t: f64,
) -> Result<Var> {
    match draw {
        RotationDraw::Fixed(r) => Ok(tape.leaf(r.clone())),
        RotationDraw::Recursive { r0, eta } => {
            let r0v = tape.leaf(r0.clone());
            let zr = rotate_on_tape(tape, z, r0v, true)?;
            let ev = tape.leaf(eta.clone());
            let f = nets.head.forward(tape, bound, zr, ev, t)?;
            tape.matmul(r0v, f)
        }
    }
}

/// `R field(Rᵀ z, t)`.
pub fn symmetrised_field(
    tape: &mut Tape,
    bound: &Bound,
    nets: &Nets,
    z: Var,
    r: Var,
    t: f64,
) -> Result<Var> {
    let zr = rotate_on_tape(tape, z, r, true)?;
    let out = nets.field.forward(tape, bound, zr, t)?;
    rotate_on_tape(tape, out, r, false)
}

fn check_step(sched: &NoiseSchedule, t: usize) -> Result<()> {
    if t == 0 || t > sched.steps() {
        return Err(Error::contract(format!("step {t} outside 1..={}", sched.steps())));
    }
    Ok(())
}

fn normalized(sched: &NoiseSchedule, t: usize) -> f64 {
    t as f64 / sched.steps() as f64
}

fn weighted_half_sq(tape: &mut Tape, target: &NBodyState, pred: Var, w: f64) -> Result<Var> {
    let tv = tape.leaf(target.to_matrix());
    let diff = tape.sub(tv, pred)?;
    let ss = tape.sum_squares(diff)?;
    Ok(tape.scale(ss, 0.5 * w))
}

/// `½ w(t) ‖ε − R ε_θ(Rᵀ z_t, t)‖²` for explicit `ε` and rotation draw.
#[allow(clippy::too_many_arguments)]
pub fn symdiff_loss_core(
    tape: &mut Tape,
    bound: &Bound,
    nets: &Nets,
    sched: &NoiseSchedule,
    z0: &NBodyState,
    t: usize,
    eps: &NBodyState,
    draw: &RotationDraw,
    weight: WeightMode,
) -> Result<Var> {
    check_step(sched, t)?;
    let zt = forward_sample(z0, t, eps, sched)?;
    let zv = tape.leaf(zt.to_matrix());
    let tn = normalized(sched, t);
    let r = rotation_on_tape(tape, bound, nets, draw, zv, tn)?;
    let pred = symmetrised_field(tape, bound, nets, zv, r, tn)?;
    weighted_half_sq(tape, eps, pred, sched.weight(t, weight))
}

/// [`symdiff_loss_core`] with `ε`, `R0` and `η` drawn from `stream`.
#[allow(clippy::too_many_arguments)]
pub fn symdiff_step_loss(
    tape: &mut Tape,
    bound: &Bound,
    nets: &Nets,
    sched: &NoiseSchedule,
    z0: &NBodyState,
    t: usize,
    gamma: GammaKind,
    weight: WeightMode,
    stream: &mut RngStream,
) -> Result<Var> {
    let eps = standard_projected_normal(z0.n(), z0.d(), stream);
    let draw = RotationDraw::draw(gamma, z0.n(), nets.head.noise_dim(), stream)?;
    symdiff_loss_core(tape, bound, nets, sched, z0, t, &eps, &draw, weight)
}

/// The unsymmetrised loss `½ w(t) ‖ε − ε_θ(z_t, t)‖²`.
#[allow(clippy::too_many_arguments)]
pub fn plain_loss_core(
    tape: &mut Tape,
    bound: &Bound,
    nets: &Nets,
    sched: &NoiseSchedule,
    z0: &NBodyState,
    t: usize,
    eps: &NBodyState,
    weight: WeightMode,
) -> Result<Var> {
    check_step(sched, t)?;
    let zt = forward_sample(z0, t, eps, sched)?;
    let zv = tape.leaf(zt.to_matrix());
    let pred = nets.field.forward(tape, bound, zv, normalized(sched, t))?;
    weighted_half_sq(tape, eps, pred, sched.weight(t, weight))
}

#[allow(clippy::too_many_arguments)]
pub fn plain_step_loss(
    tape: &mut Tape,
    bound: &Bound,
    nets: &Nets,
    sched: &NoiseSchedule,
    z0: &NBodyState,
    t: usize,
    weight: WeightMode,
    stream: &mut RngStream,
) -> Result<Var> {
    let eps = standard_projected_normal(z0.n(), z0.d(), stream);
    plain_loss_core(tape, bound, nets, sched, z0, t, &eps, weight)
}

/// Data augmentation: the plain loss on `R z0` for a fixed rotation `R`.
#[allow(clippy::too_many_arguments)]
pub fn aug_loss_core(
    tape: &mut Tape,
    bound: &Bound,
    nets: &Nets,
    sched: &NoiseSchedule,
    z0: &NBodyState,
    t: usize,
    eps: &NBodyState,
    r: &Tensor,
    weight: WeightMode,
) -> Result<Var> {
    plain_loss_core(tape, bound, nets, sched, &z0.rotate(r), t, eps, weight)
}

/// Draws `ε` then a Haar `R` and evaluates [`aug_loss_core`].
#[allow(clippy::too_many_arguments)]
pub fn aug_step_loss(
    tape: &mut Tape,
    bound: &Bound,
    nets: &Nets,
    sched: &NoiseSchedule,
    z0: &NBodyState,
    t: usize,
    weight: WeightMode,
    stream: &mut RngStream,
) -> Result<Var> {
    let eps = standard_projected_normal(z0.n(), z0.d(), stream);
    let r = sample_haar(stream)?;
    aug_loss_core(tape, bound, nets, sched, z0, t, &eps, &r, weight)
}

/// `−log p(z0 | z1)` for the decoder `N_U(z1/α1 − (σ1/α1) R ε_θ(Rᵀ z1), σ1²/α1²)`.
#[allow(clippy::too_many_arguments)]
pub fn final_step_core(
    tape: &mut Tape,
    bound: &Bound,
    nets: &Nets,
    sched: &NoiseSchedule,
    z0: &NBodyState,
    eps: &NBodyState,
    draw: &RotationDraw,
) -> Result<Var> {
    let (a, s) = (sched.alpha(1), sched.sigma(1));
    let z1 = forward_sample(z0, 1, eps, sched)?;
    let zv = tape.leaf(z1.to_matrix());
    let tn = normalized(sched, 1);
    let r = rotation_on_tape(tape, bound, nets, draw, zv, tn)?;
    let pred = symmetrised_field(tape, bound, nets, zv, r, tn)?;
    // z0 − mean = (z0 − z1/α1) + (σ1/α1) pred
    let offset = tape.leaf(z0.lincomb(1.0, &z1, -1.0 / a)?.to_matrix());
    let scaled = tape.scale(pred, s / a);
    let diff = tape.add(offset, scaled)?;
    let var = (s / a).powi(2);
    let ss = tape.sum_squares(diff)?;
    let quad = tape.scale(ss, 0.5 / var);
    let dim = z0.subspace_dim() as f64;
    let norm = tape.leaf(Tensor::scalar(0.5 * dim * (2.0 * std::f64::consts::PI * var).ln()));
    tape.add(quad, norm)
}

pub fn final_step_loss(
    tape: &mut Tape,
    bound: &Bound,
    nets: &Nets,
    sched: &NoiseSchedule,
    z0: &NBodyState,
    gamma: GammaKind,
    stream: &mut RngStream,
) -> Result<Var> {
    let eps = standard_projected_normal(z0.n(), z0.d(), stream);
    let draw = RotationDraw::draw(gamma, z0.n(), nets.head.noise_dim(), stream)?;
    final_step_core(tape, bound, nets, sched, z0, &eps, &draw)
}

/// `KL(q(z_T | z0) ‖ N_U(0, I))` in nats.
pub fn prior_kl(z0: &NBodyState, sched: &NoiseSchedule) -> f64 {
    let t = sched.steps();
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    let dim = z0.subspace_dim() as f64;
    let var = s * s;
    0.5 * (dim * var + a * a * z0.sq_norm() - dim - dim * var.ln())
}

/// Evaluates a scalar loss and its gradient with respect to every parameter.
pub fn value_and_grad(
    nets: &Nets,
    build: impl FnOnce(&mut Tape, &Bound) -> Result<Var>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = nets.params.bind(&mut tape);
    let loss = build(&mut tape, &bound)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, bound.collect(&grads)))
}

fn value_only(nets: &Nets, build: impl FnOnce(&mut Tape, &Bound) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = nets.params.bind(&mut tape);
    let loss = build(&mut tape, &bound)?;
    Ok(tape.value(loss).item())
}

/// Terms of the negative ELBO for one sample, in nats.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NllBound {
    pub prior: f64,
    pub diffusion: f64,
    pub reconstruction: f64,
    pub total: f64,
}

/// Monte-Carlo negative ELBO.
///
/// The diffusion sum over `t = 2..T` is estimated from `n_t` uniformly drawn
/// steps. With a stochastic `γ` each term uses one rotation draw; by Jensen's
/// inequality this still upper-bounds the symmetrised model's NLL in
/// expectation.
pub fn estimate_nll_bound(
    nets: &Nets,
    sched: &NoiseSchedule,
    z0: &NBodyState,
    gamma: GammaKind,
    n_t: usize,
    stream: &mut RngStream,
) -> Result<NllBound> {
    if n_t == 0 {
        return Err(Error::contract("need at least one step sample"));
    }
    let steps = sched.steps();
    let mut diffusion = 0.0;
    if steps >= 2 {
        let mut acc = 0.0;
        for _ in 0..n_t {
            let t = 2 + stream.below(steps - 1);
            acc += value_only(nets, |tape, b| {
                symdiff_step_loss(tape, b, nets, sched, z0, t, gamma, WeightMode::Snr, stream)
            })?;
        }
        diffusion = acc / n_t as f64 * (steps - 1) as f64;
    }
    let reconstruction =
        value_only(nets, |tape, b| final_step_loss(tape, b, nets, sched, z0, gamma, stream))?;
    let prior = prior_kl(z0, sched);
    Ok(NllBound {
        prior,
        diffusion,
        reconstruction,
        total: prior + diffusion + reconstruction,
    })
}
