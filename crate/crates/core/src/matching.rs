//! Symmetrised score matching and flow matching in continuous time.
//!
//! The denoiser network is reused as the score model `s_θ` or the velocity
//! field `v_θ`; in both cases the prediction is `R net(Rᵀ x, t)`.

use crate::error::{Error, Result};
use crate::geometry::NBodyState;
use crate::nets::{Bound, Nets};
use crate::numcore::{RngStream, Tape, Var};
use crate::objective::{rotation_on_tape, symmetrised_field, GammaKind, RotationDraw};
use crate::sampler::{step_rotation, symmetrised_eps};
use crate::schedule::standard_projected_normal;

/// Smallest `σ(t)` used by the score path.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Cosine variance-preserving path `x_t = α(t) x_0 + σ(t) ε` on `t ∈ [0, 1]`.
pub fn vp_alpha(t: f64) -> f64 {
    (0.5 * std::f64::consts::PI * t).cos()
}

pub fn vp_sigma(t: f64) -> f64 {
    (0.5 * std::f64::consts::PI * t).sin().max(SIGMA_FLOOR)
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// `λ(t) ‖s − ∇ log q(x_t | x_0)‖²` with `λ = σ²`, which equals
/// `‖σ s + ε‖²`.
#[allow(clippy::too_many_arguments)]
pub fn score_loss_core(
    tape: &mut Tape,
    bound: &Bound,
    nets: &Nets,
    x0: &NBodyState,
    t: f64,
    eps: &NBodyState,
    draw: Option<&RotationDraw>,
) -> Result<Var> {
    check_time(t)?;
    let sigma = vp_sigma(t);
    let xt = x0.lincomb(vp_alpha(t), eps, sigma)?;
    let xv = tape.leaf(xt.to_matrix());
    let pred = match draw {
        Some(d) => {
            let r = rotation_on_tape(tape, bound, nets, d, xv, t)?;
            symmetrised_field(tape, bound, nets, xv, r, t)?
        }
        None => nets.field.forward(tape, bound, xv, t)?,
    };
    let scaled = tape.scale(pred, sigma);
    let ev = tape.leaf(eps.to_matrix());
    let diff = tape.add(scaled, ev)?;
    tape.sum_squares(diff)
}

/// Draws `ε`, then the rotation, and evaluates the symmetrised score loss.
#[allow(clippy::too_many_arguments)]
pub fn sym_score_loss(
    tape: &mut Tape,
    bound: &Bound,
    nets: &Nets,
    x0: &NBodyState,
    t: f64,
    gamma: GammaKind,
    stream: &mut RngStream,
) -> Result<Var> {
    let eps = standard_projected_normal(x0.n(), x0.d(), stream);
    let draw = RotationDraw::draw(gamma, x0.n(), nets.head.noise_dim(), stream)?;
    score_loss_core(tape, bound, nets, x0, t, &eps, Some(&draw))
}

/// Conditional flow matching on the linear path `x_t = (1 − t) x_0 + t x_1`
/// with target velocity `x_1 − x_0`.
#[allow(clippy::too_many_arguments)]
pub fn flow_loss_core(
    tape: &mut Tape,
    bound: &Bound,
    nets: &Nets,
    x0: &NBodyState,
    x1: &NBodyState,
    t: f64,
    draw: Option<&RotationDraw>,
) -> Result<Var> {
    check_time(t)?;
    let xt = x0.lincomb(1.0 - t, x1, t)?;
    let u = x1.lincomb(1.0, x0, -1.0)?;
    let xv = tape.leaf(xt.to_matrix());
    let pred = match draw {
        Some(d) => {
            let r = rotation_on_tape(tape, bound, nets, d, xv, t)?;
            symmetrised_field(tape, bound, nets, xv, r, t)?
        }
        None => nets.field.forward(tape, bound, xv, t)?,
    };
    let uv = tape.leaf(u.to_matrix());
    let diff = tape.sub(pred, uv)?;
    tape.sum_squares(diff)
}

/// Draws the source `x_0 ~ N_U(0, I)`, then the rotation, for data `x1`.
#[allow(clippy::too_many_arguments)]
pub fn sym_flow_loss(
    tape: &mut Tape,
    bound: &Bound,
    nets: &Nets,
    x1: &NBodyState,
    t: f64,
    gamma: GammaKind,
    stream: &mut RngStream,
) -> Result<Var> {
    let x0 = standard_projected_normal(x1.n(), x1.d(), stream);
    let draw = RotationDraw::draw(gamma, x1.n(), nets.head.noise_dim(), stream)?;
    flow_loss_core(tape, bound, nets, &x0, x1, t, Some(&draw))
}

/// Integrates the (symmetrised) velocity field from `t = 0` to `1` with
/// `steps` explicit Euler steps, drawing a fresh rotation at every step.
pub fn euler_generate_flow(
    nets: &Nets,
    gamma: GammaKind,
    n: usize,
    d: usize,
    steps: usize,
    stream: &mut RngStream,
) -> Result<NBodyState> {
    if steps == 0 {
        return Err(Error::contract("need at least one Euler step"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = standard_projected_normal(n, d, stream);
    for k in 0..steps {
        let t = k as f64 * dt;
        let r = step_rotation(nets, gamma, &x, t, stream)?;
        let v = symmetrised_eps(nets, &x, &r, t)?;
        x = x.lincomb(1.0, &v, dt)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{InitMode, Model, NetConfig, ScaledIdentity};
    use crate::objective::value_and_grad;
    use crate::numcore::Tensor;

    fn model() -> Model {
        let mut c = NetConfig::new(0, 8, 1);
        c.kernels = 3;
        c.emb = 3;
        c.time_emb = 8;
        c.f_hidden = 4;
        Model::new(c, InitMode::Random, &mut RngStream::new(4)).unwrap()
    }

    fn value(nets: &Nets, f: impl FnOnce(&mut Tape, &Bound) -> Result<Var>) -> f64 {
        value_and_grad(nets, f).unwrap().0
    }

    #[test]
    fn identity_gamma_matches_plain_score_loss() {
        let m = model();
        let nets = m.nets();
        let x0 = standard_projected_normal(5, 0, &mut RngStream::new(1));
        let eps = standard_projected_normal(5, 0, &mut RngStream::new(2));
        let id = RotationDraw::Fixed(Tensor::eye(3));
        let a = value(&nets, |tp, b| score_loss_core(tp, b, &nets, &x0, 0.4, &eps, Some(&id)));
        let p = value(&nets, |tp, b| score_loss_core(tp, b, &nets, &x0, 0.4, &eps, None));
        assert_eq!(a.to_bits(), p.to_bits());
        let x1 = standard_projected_normal(5, 0, &mut RngStream::new(3));
        let a = value(&nets, |tp, b| flow_loss_core(tp, b, &nets, &x0, &x1, 0.4, Some(&id)));
        let p = value(&nets, |tp, b| flow_loss_core(tp, b, &nets, &x0, &x1, 0.4, None));
        assert_eq!(a.to_bits(), p.to_bits());
    }

    #[test]
    fn exact_score_gives_zero_loss() {
        // For x0 = 0 the conditional score is −x/σ², so the field −x/σ² is exact.
        let m = model();
        let t = 0.3;
        let s2 = vp_sigma(t).powi(2);
        let field = ScaledIdentity(-1.0 / s2);
        let nets = Nets { field: &field, ..m.nets() };
        let x0 = NBodyState::zeros(4, 0);
        let mut rng = RngStream::new(5);
        let l = value(&nets, |tp, b| sym_score_loss(tp, b, &nets, &x0, t, GammaKind::Recursive, &mut rng));
        assert!(l < 1e-20);
    }

    #[test]
    fn flow_loss_with_equivariant_field_is_rotation_free() {
        let m = model();
        let field = ScaledIdentity(0.7);
        let nets = Nets { field: &field, ..m.nets() };
        let x0 = standard_projected_normal(4, 0, &mut RngStream::new(6));
        let x1 = standard_projected_normal(4, 0, &mut RngStream::new(7));
        let base = value(&nets, |tp, b| flow_loss_core(tp, b, &nets, &x0, &x1, 0.6, None));
        let draw = RotationDraw::draw(GammaKind::Haar, 4, 3, &mut RngStream::new(8)).unwrap();
        let l = value(&nets, |tp, b| flow_loss_core(tp, b, &nets, &x0, &x1, 0.6, Some(&draw)));
        assert!((l - base).abs() < 1e-12 * base.max(1.0));
    }

    #[test]
    fn euler_with_linear_field_matches_closed_form() {
        // v(x) = c x integrates to x_1 = (1 + c Δt)^steps x_0.
        let m = model();
        let field = ScaledIdentity(0.5);
        let nets = Nets { field: &field, ..m.nets() };
        let steps = 10;
        let out = euler_generate_flow(&nets, GammaKind::Haar, 4, 0, steps, &mut RngStream::new(9)).unwrap();
        let x0 = standard_projected_normal(4, 0, &mut RngStream::new(9));
        let want = x0.scale((1.0f64 + 0.05).powi(steps as i32));
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn time_outside_unit_interval_is_rejected() {
        let m = model();
        let nets = m.nets();
        let x0 = NBodyState::zeros(3, 0);
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let r = sym_flow_loss(&mut tape, &b, &nets, &x0, 1.5, GammaKind::Haar, &mut RngStream::new(0));
        assert!(r.is_err());
    }
}
