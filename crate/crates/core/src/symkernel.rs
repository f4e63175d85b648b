//! Stochastic symmetrisation of Markov kernels.
//!
//! Given a kernel `k(y | x)` and a rotation sampler `γ(R | x)`, the
//! symmetrised kernel draws `R ~ γ(· | x)`, `Y ~ k(· | Rᵀx)` and returns `R Y`.
//! If `γ` is O(3)-equivariant the result is O(3)-equivariant whatever `k` is;
//! if additionally `k` and `γ` are `S_N`-equivariant/invariant the result is
//! equivariant under the full product group.

use crate::error::{Error, Result};
use crate::geometry::{proj_u, NBodyState};
use crate::nets::{eval_field, eval_head, Nets};
use crate::numcore::{RngStream, Tensor};
use crate::ortho::sample_haar;
use crate::schedule::{log_density_projected_gaussian, sample_projected_gaussian, NoiseSchedule};

pub trait KernelSampler: Sync {
    fn sample(&self, x: &NBodyState, stream: &mut RngStream) -> Result<NBodyState>;

    /// `log k(y | x)` when the kernel has a tractable density.
    fn log_density(&self, _y: &NBodyState, _x: &NBodyState) -> Option<Result<f64>> {
        None
    }
}

/// A conditional distribution over O(3) given a state.
pub trait GammaSampler: Sync {
    fn sample(&self, x: &NBodyState, stream: &mut RngStream) -> Result<Tensor>;
}

/// Always the identity; symmetrising with it leaves a kernel unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct DiracIdentity;

impl GammaSampler for DiracIdentity {
    fn sample(&self, _: &NBodyState, _: &mut RngStream) -> Result<Tensor> {
        Ok(Tensor::eye(3))
    }
}

/// Ignores the input and draws from the Haar measure.
#[derive(Clone, Copy, Debug, Default)]
pub struct HaarGamma;

impl GammaSampler for HaarGamma {
    fn sample(&self, _: &NBodyState, stream: &mut RngStream) -> Result<Tensor> {
        sample_haar(stream)
    }
}

/// Per-point noise for a rotation head: standard normal, columns centred.
pub fn draw_head_noise(n: usize, channels: usize, stream: &mut RngStream) -> Tensor {
    let eta = stream.randn(n, channels);
    crate::numcore::tape::center_first_cols(&eta, channels)
}

/// `γ(x) = R0 f(R0ᵀ x, η)` with `R0 ~ Haar` and `η` per-point noise.
///
/// Equivariant for any `f` because the Haar measure is invariant: replacing
/// `x` by `Q x` and `R0` by `Q R0` leaves the argument of `f` unchanged.
pub struct RecursiveGamma<F> {
    f: F,
    noise_dim: usize,
}

pub fn make_recursive_gamma<F>(f: F, noise_dim: usize) -> RecursiveGamma<F>
where
    F: Fn(&NBodyState, &Tensor) -> Result<Tensor> + Sync,
{
    RecursiveGamma { f, noise_dim }
}

impl<F> RecursiveGamma<F>
where
    F: Fn(&NBodyState, &Tensor) -> Result<Tensor> + Sync,
{
    /// The output for fixed `R0` and `η`.
    pub fn apply(&self, x: &NBodyState, r0: &Tensor, eta: &Tensor) -> Result<Tensor> {
        let inner = (self.f)(&x.rotate(&r0.transpose()), eta)?;
        if inner.shape() != [3, 3] {
            return Err(Error::dim("inner map must return a 3x3 matrix"));
        }
        r0.matmul(&inner)
    }
}

impl<F> GammaSampler for RecursiveGamma<F>
where
    F: Fn(&NBodyState, &Tensor) -> Result<Tensor> + Sync,
{
    fn sample(&self, x: &NBodyState, stream: &mut RngStream) -> Result<Tensor> {
        let r0 = sample_haar(stream)?;
        let eta = draw_head_noise(x.n(), self.noise_dim, stream);
        self.apply(x, &r0, &eta)
    }
}

/// The learned rotation head evaluated at a fixed normalised time.
pub struct HeadGamma<'a> {
    pub nets: Nets<'a>,
    pub t: f64,
}

impl GammaSampler for HeadGamma<'_> {
    fn sample(&self, x: &NBodyState, stream: &mut RngStream) -> Result<Tensor> {
        let r0 = sample_haar(stream)?;
        let eta = draw_head_noise(x.n(), self.nets.head.noise_dim(), stream);
        let (f, _) = eval_head(&self.nets, &x.rotate(&r0.transpose()), &eta, self.t)?;
        r0.matmul(&f)
    }
}

/// `R Y` with `R ~ γ(· | x)` and `Y ~ k(· | Rᵀ x)`.
pub fn symmetrise_sample(
    gamma: &dyn GammaSampler,
    kernel: &dyn KernelSampler,
    x: &NBodyState,
    stream: &mut RngStream,
) -> Result<NBodyState> {
    let r = gamma.sample(x, stream)?;
    let y = kernel.sample(&x.rotate(&r.transpose()), stream)?;
    Ok(y.rotate(&r))
}

/// A kernel symmetrised by a rotation sampler.
pub struct Symmetrised<G, K> {
    pub gamma: G,
    pub kernel: K,
}

impl<G: GammaSampler, K: KernelSampler> KernelSampler for Symmetrised<G, K> {
    fn sample(&self, x: &NBodyState, stream: &mut RngStream) -> Result<NBodyState> {
        symmetrise_sample(&self.gamma, &self.kernel, x, stream)
    }
}

/// `log k(Rᵀ y | Rᵀ x)`, the density of the kernel conjugated by `R`.
pub fn conjugated_log_density(
    kernel: &dyn KernelSampler,
    r: &Tensor,
    y: &NBodyState,
    x: &NBodyState,
) -> Result<f64> {
    let rt = r.transpose();
    kernel
        .log_density(&y.rotate(&rt), &x.rotate(&rt))
        .ok_or_else(|| Error::contract("kernel has no tractable density"))?
}

/// Monte-Carlo estimate of the symmetrised log-density
/// `log E_{R ~ γ(·|x)} k(Rᵀ y | Rᵀ x)`, computed with log-sum-exp.
pub fn mc_log_density_symmetrised(
    gamma: &dyn GammaSampler,
    kernel: &dyn KernelSampler,
    y: &NBodyState,
    x: &NBodyState,
    n_mc: usize,
    stream: &mut RngStream,
) -> Result<f64> {
    if n_mc == 0 {
        return Err(Error::contract("need at least one Monte-Carlo draw"));
    }
    let mut logs = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let r = gamma.sample(x, stream)?;
        logs.push(conjugated_log_density(kernel, &r, y, x)?);
    }
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(m);
    }
    let s: f64 = logs.iter().map(|l| (l - m).exp()).sum();
    Ok(m + (s / n_mc as f64).ln())
}

/// The learned Gaussian reverse step `p(z_{t-1} | z_t)` without
/// symmetrisation; `t = 1` is the final decoder step.
pub struct ReverseKernel<'a> {
    pub nets: Nets<'a>,
    pub sched: &'a NoiseSchedule,
    pub t: usize,
}

impl ReverseKernel<'_> {
    pub fn mean_and_sd(&self, z: &NBodyState) -> Result<(NBodyState, f64)> {
        let (s, t) = (self.sched, self.t);
        if t == 0 || t > s.steps() {
            return Err(Error::contract(format!("step {t} outside 1..={}", s.steps())));
        }
        let eps = eval_field(&self.nets, z, t as f64 / s.steps() as f64)?;
        if t == 1 {
            let (a, sg) = (s.alpha(1), s.sigma(1));
            return Ok((z.lincomb(1.0 / a, &eps, -sg / a)?, sg / a));
        }
        let a = s.alpha_step(t);
        let c = s.sigma_step_sq(t) / (a * s.sigma(t));
        Ok((z.lincomb(1.0 / a, &eps, -c)?, s.sigma_q_sq(t).sqrt()))
    }
}

impl KernelSampler for ReverseKernel<'_> {
    fn sample(&self, x: &NBodyState, stream: &mut RngStream) -> Result<NBodyState> {
        let (mean, sd) = self.mean_and_sd(x)?;
        sample_projected_gaussian(&proj_u(&mean), sd, stream)
    }

    fn log_density(&self, y: &NBodyState, x: &NBodyState) -> Option<Result<f64>> {
        Some(
            self.mean_and_sd(x)
                .and_then(|(mean, sd)| log_density_projected_gaussian(y, &mean, sd)),
        )
    }
}

/// `y = x A + c · noise` (positions only, then centred): a deliberately
/// non-equivariant kernel for tests and benchmarks.
pub struct LinearGaussianKernel {
    pub a: Tensor,
    pub noise: f64,
}

impl LinearGaussianKernel {
    fn mean(&self, x: &NBodyState) -> Result<NBodyState> {
        let xm = x.x().matmul(&self.a)?;
        Ok(proj_u(&NBodyState::new(xm, x.h().clone())?))
    }
}

impl KernelSampler for LinearGaussianKernel {
    fn sample(&self, x: &NBodyState, stream: &mut RngStream) -> Result<NBodyState> {
        sample_projected_gaussian(&self.mean(x)?, self.noise, stream)
    }

    fn log_density(&self, y: &NBodyState, x: &NBodyState) -> Option<Result<f64>> {
        Some(self.mean(x).and_then(|m| log_density_projected_gaussian(y, &m, self.noise)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::linalg::orthogonality_error;
    use crate::schedule::standard_projected_normal;

    fn skew_kernel() -> LinearGaussianKernel {
        LinearGaussianKernel {
            a: Tensor::from_rows(&[&[1.5, 0.3, 0.0], &[0.0, 0.7, 0.2], &[0.1, 0.0, 1.1]]).unwrap(),
            noise: 0.3,
        }
    }

    fn state(seed: u64) -> NBodyState {
        standard_projected_normal(5, 2, &mut RngStream::new(seed))
    }

    #[test]
    fn dirac_identity_leaves_kernel_unchanged() {
        let k = skew_kernel();
        let x = state(1);
        let a = symmetrise_sample(&DiracIdentity, &k, &x, &mut RngStream::new(9)).unwrap();
        let b = k.sample(&x, &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dirac_mc_density_is_exact() {
        let k = skew_kernel();
        let x = state(2);
        let y = k.sample(&x, &mut RngStream::new(3)).unwrap();
        let exact = k.log_density(&y, &x).unwrap().unwrap();
        let mc = mc_log_density_symmetrised(&DiracIdentity, &k, &y, &x, 4, &mut RngStream::new(4))
            .unwrap();
        assert!((exact - mc).abs() < 1e-12);
    }

    #[test]
    fn conjugation_preserves_equivariant_density() {
        // With A = I the kernel is O(3)-equivariant, so conjugating changes nothing.
        let k = LinearGaussianKernel { a: Tensor::eye(3), noise: 0.5 };
        let x = state(5);
        let y = k.sample(&x, &mut RngStream::new(6)).unwrap();
        let r = sample_haar(&mut RngStream::new(7)).unwrap();
        let base = k.log_density(&y, &x).unwrap().unwrap();
        let conj = conjugated_log_density(&k, &r, &y, &x).unwrap();
        assert!((base - conj).abs() < 1e-10);
    }

    #[test]
    fn recursive_gamma_is_pointwise_equivariant() {
        let skew = Tensor::from_rows(&[&[1.0, 0.4, 0.0], &[0.2, 1.0, 0.0], &[0.0, 0.3, 1.0]]).unwrap();
        // An arbitrary non-equivariant inner map.
        let f = move |x: &NBodyState, eta: &Tensor| -> Result<Tensor> {
            let m = x.x().transpose().matmul(&eta.slice_cols(0, 3))?.add(&skew)?;
            Ok(crate::ortho::qr_orthogonalize(&m)?.0)
        };
        let g = make_recursive_gamma(f, 3);
        let mut rng = RngStream::new(8);
        let x = state(9);
        for _ in 0..10 {
            let q = sample_haar(&mut rng).unwrap();
            let r0 = sample_haar(&mut rng).unwrap();
            let eta = draw_head_noise(5, 3, &mut rng);
            let out = g.apply(&x, &r0, &eta).unwrap();
            assert!(orthogonality_error(&out) < 1e-10);
            let moved = g.apply(&x.rotate(&q), &q.matmul(&r0).unwrap(), &eta).unwrap();
            let want = q.matmul(&out).unwrap();
            assert!(moved.max_abs_diff(&want) < 1e-10);
        }
    }

    #[test]
    fn haar_symmetrisation_is_pointwise_consistent() {
        // Same stream: the symmetrised sample is R k(Rᵀx) with R the first draw.
        let k = skew_kernel();
        let x = state(10);
        let mut s1 = RngStream::new(11);
        let got = symmetrise_sample(&HaarGamma, &k, &x, &mut s1).unwrap();
        let mut s2 = RngStream::new(11);
        let r = sample_haar(&mut s2).unwrap();
        let want = k.sample(&x.rotate(&r.transpose()), &mut s2).unwrap().rotate(&r);
        assert!(got.max_abs_diff(&want) < 1e-15);
        assert_eq!(s1, s2);
    }

    #[test]
    fn kernel_without_density_is_reported() {
        struct NoDensity;
        impl KernelSampler for NoDensity {
            fn sample(&self, x: &NBodyState, _: &mut RngStream) -> Result<NBodyState> {
                Ok(x.clone())
            }
        }
        let x = state(12);
        let err = conjugated_log_density(&NoDensity, &Tensor::eye(3), &x, &x);
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
