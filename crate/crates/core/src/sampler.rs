//! Ancestral sampling from a trained (optionally symmetrised) model.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::NBodyState;
use crate::nets::{eval_field, Nets};
use crate::numcore::{RngStream, Tensor};
use crate::objective::GammaKind;
use crate::ortho::sample_haar;
use crate::schedule::{standard_projected_normal, NoiseSchedule};
use crate::symkernel::{GammaSampler, HeadGamma};

/// Draws the rotation used at one reverse step.
pub fn step_rotation(
    nets: &Nets,
    gamma: GammaKind,
    z: &NBodyState,
    t: f64,
    stream: &mut RngStream,
) -> Result<Tensor> {
    match gamma {
        GammaKind::Identity => Ok(Tensor::eye(3)),
        GammaKind::Haar => sample_haar(stream),
        GammaKind::Recursive => HeadGamma { nets: *nets, t }.sample(z, stream),
    }
}

/// `R ε_θ(Rᵀ z, t)`.
pub fn symmetrised_eps(nets: &Nets, z: &NBodyState, r: &Tensor, t: f64) -> Result<NBodyState> {
    let out = eval_field(nets, &z.rotate(&r.transpose()), t)?;
    Ok(out.rotate(r))
}

/// One sample `z_0` for `N` points with `d` features.
///
/// Starts from `z_T ~ N_U(0, I)` and, for `t = T..2`, draws a fresh rotation
/// (`R0`, then `η`) and noise `ε`, then steps to
/// `z_{t-1} = z_t/α_{t|t-1} − σ²_{t|t-1}/(α_{t|t-1} σ_t) R ε_θ(Rᵀ z_t) + σ_q ε`.
/// The last step uses the decoder mean with standard deviation `σ_1/α_1`.
pub fn generate(
    nets: &Nets,
    sched: &NoiseSchedule,
    gamma: GammaKind,
    n: usize,
    d: usize,
    stream: &mut RngStream,
) -> Result<NBodyState> {
    if n < 2 {
        return Err(Error::contract("need at least two points"));
    }
    let steps = sched.steps();
    let mut z = standard_projected_normal(n, d, stream);
    for t in (1..=steps).rev() {
        let tn = t as f64 / steps as f64;
        let r = step_rotation(nets, gamma, &z, tn, stream)?;
        let eps_hat = symmetrised_eps(nets, &z, &r, tn)?;
        let noise = standard_projected_normal(n, d, stream);
        z = if t >= 2 {
            let a = sched.alpha_step(t);
            let c = sched.sigma_step_sq(t) / (a * sched.sigma(t));
            z.lincomb(1.0 / a, &eps_hat, -c)?
                .lincomb(1.0, &noise, sched.sigma_q_sq(t).sqrt())?
        } else {
            let (a, s) = (sched.alpha(1), sched.sigma(1));
            z.lincomb(1.0 / a, &eps_hat, -s / a)?.lincomb(1.0, &noise, s / a)?
        };
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("sampler state after step {t}")));
        }
    }
    Ok(z)
}

/// `count` samples; sample `i` uses `stream.child(i)`, so results do not
/// depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn generate_batch(
    nets: &Nets,
    sched: &NoiseSchedule,
    gamma: GammaKind,
    n: usize,
    d: usize,
    count: usize,
    stream: &RngStream,
) -> Result<Vec<NBodyState>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate(nets, sched, gamma, n, d, &mut stream.child(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{InitMode, Model, NetConfig, ZeroField};
    use crate::geometry::is_centered;

    fn model() -> Model {
        let mut c = NetConfig::new(1, 8, 1);
        c.kernels = 3;
        c.emb = 3;
        c.time_emb = 8;
        c.f_hidden = 4;
        Model::new(c, InitMode::Random, &mut RngStream::new(1)).unwrap()
    }

    #[test]
    fn zero_field_gives_analytic_variance() {
        // With ε_θ ≡ 0 the chain is linear Gaussian; the per-coordinate
        // variance follows the recursion v_{t-1} = v_t/α²_{t|t-1} + σ_q².
        let m = model();
        let nets = Nets { field: &ZeroField, ..m.nets() };
        let sched = NoiseSchedule::new(
            vec![0.99, 0.9, 0.7, 0.5],
            vec![(1.0f64 - 0.99 * 0.99).sqrt(), (1.0f64 - 0.81).sqrt(), (1.0f64 - 0.49).sqrt(), (1.0f64 - 0.25).sqrt()],
        )
        .unwrap();
        let mut v = 1.0;
        for t in (2..=3).rev() {
            v = v / sched.alpha_step(t).powi(2) + sched.sigma_q_sq(t);
        }
        let (a1, s1) = (sched.alpha(1), sched.sigma(1));
        v = v / (a1 * a1) + (s1 / a1).powi(2);
        let samples = generate_batch(&nets, &sched, GammaKind::Haar, 3, 1, 4000, &RngStream::new(2)).unwrap();
        // Feature coordinates are not centred, so each has variance v exactly.
        let vals: Vec<f64> = samples.iter().flat_map(|s| s.h().data().to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((var - v).abs() < 0.05 * v, "var {var} vs {v}");
        assert!(samples.iter().all(|s| is_centered(s, 1e-9)));
    }

    /// Bayes-optimal denoiser for data `N_U(0, s² I)`.
    struct GaussianOracle {
        sched: NoiseSchedule,
        var: f64,
    }

    impl crate::nets::Field for GaussianOracle {
        fn forward(&self, tape: &mut crate::numcore::Tape, _: &crate::nets::Bound, z: crate::numcore::Var, t: f64) -> Result<crate::numcore::Var> {
            let step = (t * self.sched.steps() as f64).round() as usize;
            let (a, s) = (self.sched.alpha(step), self.sched.sigma(step));
            Ok(tape.scale(z, s / (a * a * self.var + s * s)))
        }
    }

    #[test]
    fn optimal_denoiser_recovers_data_variance() {
        let m = model();
        let sched = crate::schedule::make_cosine_schedule(100, 0.008).unwrap();
        let oracle = GaussianOracle { sched: sched.clone(), var: 0.09 };
        let nets = Nets { field: &oracle, ..m.nets() };
        // The chain is linear: z_{t-1} = g_t z_t + noise, so the feature variance
        // follows v_{t-1} = g_t² v_t + (noise variance), starting from v_T = 1.
        let gain = |t: usize| {
            let (a, s) = (sched.alpha(t), sched.sigma(t));
            s / (a * a * 0.09 + s * s)
        };
        let mut v = 1.0;
        for t in (2..=100).rev() {
            let a = sched.alpha_step(t);
            let g = 1.0 / a - sched.sigma_step_sq(t) / (a * sched.sigma(t)) * gain(t);
            v = g * g * v + sched.sigma_q_sq(t);
        }
        let (a1, s1) = (sched.alpha(1), sched.sigma(1));
        let g = 1.0 / a1 - s1 / a1 * gain(1);
        v = g * g * v + (s1 / a1).powi(2);
        let samples = generate_batch(&nets, &sched, GammaKind::Recursive, 3, 1, 3000, &RngStream::new(5)).unwrap();
        let vals: Vec<f64> = samples.iter().flat_map(|s| s.h().data().to_vec()).collect();
        let var = vals.iter().map(|x| x * x).sum::<f64>() / vals.len() as f64;
        assert!((var - v).abs() < 4.0 * v * (2.0 / vals.len() as f64).sqrt(), "var {var} vs {v}");
        // Positions are centred, so the per-coordinate variance is v (N-1)/N.
        let xs: Vec<f64> = samples.iter().flat_map(|s| s.x().data().to_vec()).collect();
        let xvar = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        let xv = v * 2.0 / 3.0;
        assert!((xvar - xv).abs() < 4.0 * xv * (2.0 / xs.len() as f64).sqrt(), "x var {xvar} vs {xv}");
        // Ancestral sampling with the posterior variance undershoots slightly.
        assert!(v < 0.09 && v > 0.08);
    }

    #[test]
    fn batch_is_deterministic_and_independent_of_threads() {
        let m = model();
        let nets = m.nets();
        let sched = crate::schedule::make_cosine_schedule(6, 0.008).unwrap();
        let a = generate_batch(&nets, &sched, GammaKind::Recursive, 4, 1, 5, &RngStream::new(3)).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool
            .install(|| generate_batch(&nets, &sched, GammaKind::Recursive, 4, 1, 5, &RngStream::new(3)))
            .unwrap();
        assert_eq!(a, b);
        let single = generate(&nets, &sched, GammaKind::Recursive, 4, 1, &mut RngStream::new(3).child(2)).unwrap();
        assert_eq!(single, a[2]);
    }

    #[test]
    fn rejects_single_point() {
        let m = model();
        let sched = crate::schedule::make_cosine_schedule(3, 0.008).unwrap();
        assert!(generate(&m.nets(), &sched, GammaKind::Haar, 1, 1, &mut RngStream::new(0)).is_err());
    }
}
