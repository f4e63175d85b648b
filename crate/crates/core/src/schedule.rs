//! Discrete variance-preserving noise schedules, the forward process and its
//! posteriors, and the projected Gaussian on the centre-of-mass-free subspace.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{is_centered, proj_u, NBodyState};
use crate::numcore::RngStream;

/// Tolerance for the "input is centred" preconditions.
pub const CENTER_TOL: f64 = 1e-9;

/// Floor mixed into `alpha_bar` so that `sigma_0 > 0` and `alpha_T > 0`.
const PRECISION: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// Loss weighting for the `L_t` terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    /// `w(t) = 1`, used for training.
    Unit,
    /// `w(t) = SNR(t-1)/SNR(t) - 1`, which makes `L_t` the exact KL term.
    Snr,
}

/// `alpha_t`, `sigma_t` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alpha: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if alpha.len() != sigma.len() || alpha.len() < 2 {
            return Err(Error::contract("schedule needs matching arrays with T >= 1"));
        }
        for (t, (a, s)) in alpha.iter().zip(&sigma).enumerate() {
            if !(*a > 0.0 && *s > 0.0) {
                return Err(Error::contract(format!("alpha/sigma must be positive at t = {t}")));
            }
            if (a * a + s * s - 1.0).abs() > 1e-12 {
                return Err(Error::contract(format!("not variance preserving at t = {t}")));
            }
        }
        let snr: Vec<f64> = alpha.iter().zip(&sigma).map(|(a, s)| a * a / (s * s)).collect();
        if snr.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::contract("SNR must be strictly decreasing"));
        }
        Ok(Self { alpha, sigma })
    }

    fn from_alpha_bar(alpha_bar: &[f64]) -> Result<Self> {
        let ab: Vec<f64> = alpha_bar
            .iter()
            .map(|a| (1.0 - 2.0 * PRECISION) * a + PRECISION)
            .collect();
        Self::new(
            ab.iter().map(|a| a.sqrt()).collect(),
            ab.iter().map(|a| (1.0 - a).sqrt()).collect(),
        )
    }

    pub fn build(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Cosine => make_cosine_schedule(steps, 0.008),
            ScheduleKind::Linear => make_linear_schedule(steps),
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn snr(&self, t: usize) -> f64 {
        (self.alpha[t] / self.sigma[t]).powi(2)
    }

    /// `alpha_{t|t-1} = alpha_t / alpha_{t-1}`
    pub fn alpha_step(&self, t: usize) -> f64 {
        self.alpha[t] / self.alpha[t - 1]
    }

    /// `sigma_{t|t-1}^2 = sigma_t^2 - alpha_{t|t-1}^2 sigma_{t-1}^2`
    pub fn sigma_step_sq(&self, t: usize) -> f64 {
        let a = self.alpha_step(t);
        self.sigma[t].powi(2) - a * a * self.sigma[t - 1].powi(2)
    }

    /// Posterior variance `sigma_q^2(t)`.
    pub fn sigma_q_sq(&self, t: usize) -> f64 {
        self.sigma_step_sq(t) * self.sigma[t - 1].powi(2) / self.sigma[t].powi(2)
    }

    pub fn weight(&self, t: usize, mode: WeightMode) -> f64 {
        match mode {
            WeightMode::Unit => 1.0,
            WeightMode::Snr => self.snr(t - 1) / self.snr(t) - 1.0,
        }
    }

    fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::contract(format!(
                "time step {t} outside {lo}..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Cosine schedule: `alpha_bar_t ∝ cos²(((t/T) + s)/(1 + s) · π/2)`, with each
/// step ratio `alpha_bar_t / alpha_bar_{t-1}` clipped to `[0.001, 1]`.
pub fn make_cosine_schedule(steps: usize, s: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::contract("cosine schedule needs T >= 2"));
    }
    let f = |t: usize| (((t as f64 / steps as f64) + s) / (1.0 + s) * PI / 2.0).cos().powi(2);
    let f0 = f(0);
    let raw: Vec<f64> = (0..=steps).map(|t| f(t) / f0).collect();
    let mut ab = vec![1.0; steps + 1];
    for t in 1..=steps {
        let ratio = (raw[t] / raw[t - 1]).clamp(0.001, 1.0);
        ab[t] = ab[t - 1] * ratio;
    }
    NoiseSchedule::from_alpha_bar(&ab)
}

/// `alpha_bar_t = 1 - t/T`, floored by the same precision mixing.
pub fn make_linear_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::contract("linear schedule needs T >= 2"));
    }
    let ab: Vec<f64> = (0..=steps).map(|t| 1.0 - t as f64 / steps as f64).collect();
    NoiseSchedule::from_alpha_bar(&ab)
}

fn require_centered(z: &NBodyState, what: &str) -> Result<()> {
    if !is_centered(z, CENTER_TOL) {
        return Err(Error::contract(format!("{what} is not centred")));
    }
    Ok(())
}

/// `z_t = alpha_t z_0 + sigma_t eps`
pub fn forward_sample(
    z0: &NBodyState,
    t: usize,
    eps: &NBodyState,
    sched: &NoiseSchedule,
) -> Result<NBodyState> {
    sched.check_step(t, 1)?;
    require_centered(z0, "z0")?;
    require_centered(eps, "eps")?;
    z0.lincomb(sched.alpha(t), eps, sched.sigma(t))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mu_q: NBodyState,
    pub sigma_q: f64,
}

/// Mean and standard deviation of `q(z_{t-1} | z_t, z_0)`.
pub fn posterior_params(
    zt: &NBodyState,
    z0: &NBodyState,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<PosteriorParams> {
    sched.check_step(t, 2)?;
    require_centered(zt, "z_t")?;
    require_centered(z0, "z0")?;
    let st2 = sched.sigma(t).powi(2);
    let sp2 = sched.sigma(t - 1).powi(2);
    let c_t = sched.alpha_step(t) * sp2 / st2;
    let c_0 = sched.alpha(t - 1) * sched.sigma_step_sq(t) / st2;
    Ok(PosteriorParams {
        mu_q: zt.lincomb(c_t, z0, c_0)?,
        sigma_q: sched.sigma_q_sq(t).sqrt(),
    })
}

/// A draw from `N_U(0, I)`: a centred standard normal state.
pub fn standard_projected_normal(n: usize, d: usize, stream: &mut RngStream) -> NBodyState {
    let m = stream.randn(n, 3 + d);
    proj_u(&NBodyState::from_matrix(&m).expect("finite normals"))
}

/// `mu + sigma · proj_U(eps)`, `eps ~ N(0, I)` on `N x (3 + d)`.
pub fn sample_projected_gaussian(
    mu: &NBodyState,
    sigma: f64,
    stream: &mut RngStream,
) -> Result<NBodyState> {
    if sigma < 0.0 {
        return Err(Error::contract("negative standard deviation"));
    }
    require_centered(mu, "mean")?;
    let eps = standard_projected_normal(mu.n(), mu.d(), stream);
    mu.lincomb(1.0, &eps, sigma)
}

/// Log-density of `N_U(mu, sigma^2 I)` with respect to Lebesgue measure on the
/// `(N-1)·3 + N·d` dimensional subspace.
pub fn log_density_projected_gaussian(z: &NBodyState, mu: &NBodyState, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::contract("standard deviation must be positive"));
    }
    let diff = z.lincomb(1.0, mu, -1.0)?;
    let dim = z.subspace_dim() as f64;
    let var = sigma * sigma;
    Ok(-diff.sq_norm() / (2.0 * var) - 0.5 * dim * (2.0 * PI * var).ln())
}
