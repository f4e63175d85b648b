//! Parameter storage and the two networks: the `S_N`-equivariant denoiser
//! and the `S_N`-invariant rotation head.
//!
//! Both are DeepSets-style: a shared per-point MLP with a mean-pooled context
//! vector injected into every block. The denoiser concatenates learned
//! Gaussian distance embeddings to its projected input and ends with a
//! centring layer; the rotation head mean-pools and maps nine numbers to O(3)
//! through the sign-corrected QR factor.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::NBodyState;
use crate::numcore::{Activation, Gradients, RngStream, Tape, Tensor, Var};

/// Named parameter tensors with gradient slots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.grads.push(Tensor::from_parts(value.shape().to_vec(), vec![0.0; value.len()]));
        self.tensors.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn set_grads(&mut self, grads: Vec<Tensor>) -> Result<()> {
        if grads.len() != self.grads.len()
            || grads.iter().zip(&self.grads).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::dim("gradient layout does not match parameters"));
        }
        self.grads = grads;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All values concatenated in insertion order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::dim(format!(
                "flat vector has {} values, store holds {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> Bound<'a> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Bound { store: self, vars }
    }

    /// Checks that names and shapes agree with `other`.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Parameters of a [`ParamStore`] as tape leaves.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with the store's parameter order.
    pub fn collect(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Feature channels `d` per point.
    pub feature_dim: usize,
    /// Hidden width of the denoiser (`n_size`).
    pub hidden: usize,
    pub depth: usize,
    /// Number of Gaussian distance kernels `K`.
    pub kernels: usize,
    /// Width of the distance embedding (`n_emb`); the projected input gets
    /// `hidden - emb` columns.
    pub emb: usize,
    pub time_emb: usize,
    pub activation: Activation,
    /// Adds one softmax self-attention block in front of the denoiser blocks.
    pub attention: bool,
    /// Hidden width of the rotation head's encoder (`m_size`).
    pub f_hidden: usize,
    pub f_depth: usize,
    /// Per-point noise channels fed to the rotation head.
    pub noise_dim: usize,
}

impl NetConfig {
    pub fn new(feature_dim: usize, hidden: usize, depth: usize) -> Self {
        let emb = hidden / 2;
        Self {
            feature_dim,
            hidden,
            depth,
            kernels: (hidden / 2).max(1),
            emb,
            time_emb: 64,
            activation: Activation::Silu,
            attention: false,
            f_hidden: hidden,
            f_depth: depth.max(1),
            noise_dim: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.hidden,
            self.depth,
            self.kernels,
            self.emb,
            self.time_emb,
            self.f_hidden,
            self.f_depth,
            self.noise_dim,
        ];
        if positive.contains(&0) {
            return Err(Error::contract("network sizes must be positive"));
        }
        if self.emb >= self.hidden {
            return Err(Error::contract("embedding width must be below hidden width"));
        }
        if !self.time_emb.is_multiple_of(2) {
            return Err(Error::contract("time embedding width must be even"));
        }
        if self.f_hidden < 2 {
            return Err(Error::contract("rotation head needs f_hidden >= 2"));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        3 + self.feature_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Output layers zeroed: the denoiser starts at 0 and the rotation head at
    /// the identity.
    Standard,
    /// Every layer random; used to probe symmetry properties away from the
    /// trivial starting point.
    Random,
}

fn uniform_fan_in(rng: &mut RngStream, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| bound * (2.0 * rng.uniform() - 1.0)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Builds and initializes the parameters of both networks.
pub fn init_params(cfg: &NetConfig, mode: InitMode, rng: &mut RngStream) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    let (h, k, e, te) = (cfg.hidden, cfg.kernels, cfg.emb, cfg.time_emb);
    let random = mode == InitMode::Random;

    let mu: Vec<f64> = (0..k).map(|i| 3.0 * i as f64 / k.max(2).saturating_sub(1) as f64).collect();
    p.insert("emb.mu", Tensor::from_parts(vec![1, k], mu))?;
    p.insert("emb.sigma", Tensor::filled(1, k, 0.5))?;
    p.insert("emb.w_d", uniform_fan_in(rng, k, e))?;

    p.insert("eps.w_in", uniform_fan_in(rng, cfg.input_width(), h - e))?;
    p.insert("eps.w_t", uniform_fan_in(rng, te, h))?;
    p.insert("eps.b_t", Tensor::zeros(1, h))?;
    if cfg.attention {
        for name in ["eps.attn.wq", "eps.attn.wk", "eps.attn.wv"] {
            p.insert(name, uniform_fan_in(rng, h, h))?;
        }
    }
    for l in 0..cfg.depth {
        p.insert(&format!("eps.blk{l}.w"), uniform_fan_in(rng, h, h))?;
        p.insert(&format!("eps.blk{l}.w_ctx"), uniform_fan_in(rng, h, h))?;
        p.insert(&format!("eps.blk{l}.b"), Tensor::zeros(1, h))?;
    }
    let out_w = if random {
        uniform_fan_in(rng, h, cfg.input_width())
    } else {
        Tensor::zeros(h, cfg.input_width())
    };
    p.insert("eps.w_out", out_w)?;
    p.insert("eps.b_out", Tensor::zeros(1, cfg.input_width()))?;

    let m = cfg.f_hidden;
    let m2 = (m / 2).max(1);
    p.insert("f.w_g", uniform_fan_in(rng, 3 + cfg.noise_dim + e, m))?;
    p.insert("f.w_t", uniform_fan_in(rng, te, m))?;
    p.insert("f.b_t", Tensor::zeros(1, m))?;
    for l in 0..cfg.f_depth {
        p.insert(&format!("f.blk{l}.w"), uniform_fan_in(rng, m, m))?;
        p.insert(&format!("f.blk{l}.w_ctx"), uniform_fan_in(rng, m, m))?;
        p.insert(&format!("f.blk{l}.b"), Tensor::zeros(1, m))?;
    }
    p.insert("f.w1", uniform_fan_in(rng, m, m2))?;
    p.insert("f.b1", Tensor::zeros(1, m2))?;
    if random {
        p.insert("f.w2", uniform_fan_in(rng, m2, 9))?;
        p.insert("f.b2", uniform_fan_in(rng, 1, 9))?;
    } else {
        p.insert("f.w2", Tensor::zeros(m2, 9))?;
        p.insert("f.b2", Tensor::from_parts(vec![1, 9], Tensor::eye(3).into_data()))?;
    }
    Ok(p)
}

/// Sinusoidal embedding of a normalized time `t ∈ [0, 1]` (scaled by 1000).
pub fn time_embedding(t: f64, width: usize) -> Tensor {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::from_parts(vec![1, width], out)
}

/// An `S_N`-equivariant map on states, `N x (3 + d) -> N x (3 + d)`.
pub trait Field: Sync {
    fn forward(&self, tape: &mut Tape, params: &Bound, z: Var, t: f64) -> Result<Var>;
}

/// An `S_N`-invariant map `(state, per-point noise) -> 3 x 3` orthogonal matrix.
pub trait RotationHead: Sync {
    fn forward(&self, tape: &mut Tape, params: &Bound, z: Var, eta: Var, t: f64) -> Result<Var>;

    /// Noise channels per point that `forward` expects.
    fn noise_dim(&self) -> usize;
}

/// Learned Gaussian distance embeddings `Ψ = mean_j ψ(‖x_i − x_j‖) W_D`.
pub fn gaussian_embeddings(tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
    let dist = tape.pair_dist(x);
    let basis = tape.gauss_rbf(dist, params.get("emb.mu"), params.get("emb.sigma"))?;
    tape.matmul(basis, params.get("emb.w_d"))
}

/// DeepSets blocks: `h <- h + act(h W + mean(h) W_ctx + c + b)`.
fn set_blocks(
    tape: &mut Tape,
    params: &Bound,
    prefix: &str,
    depth: usize,
    act: Activation,
    mut h: Var,
    cond: Var,
) -> Result<Var> {
    let n = tape.value(h).rows();
    for l in 0..depth {
        let local = tape.matmul(h, params.get(&format!("{prefix}.blk{l}.w")))?;
        let pooled = tape.mean_rows(h);
        let ctx = tape.matmul(pooled, params.get(&format!("{prefix}.blk{l}.w_ctx")))?;
        let ctx = tape.add(ctx, cond)?;
        let ctx = tape.add(ctx, params.get(&format!("{prefix}.blk{l}.b")))?;
        let ctx = tape.repeat_rows(ctx, n)?;
        let pre = tape.add(local, ctx)?;
        let a = tape.act(pre, act);
        h = tape.add(h, a)?;
    }
    Ok(h)
}

fn time_condition(tape: &mut Tape, params: &Bound, prefix: &str, t: f64, width: usize) -> Result<Var> {
    let temb = tape.leaf(time_embedding(t, width));
    let c = tape.matmul(temb, params.get(&format!("{prefix}.w_t")))?;
    tape.add(c, params.get(&format!("{prefix}.b_t")))
}

/// The denoiser `ε_θ`.
#[derive(Clone, Debug)]
pub struct EpsNet {
    pub cfg: NetConfig,
}

impl Field for EpsNet {
    fn forward(&self, tape: &mut Tape, params: &Bound, z: Var, t: f64) -> Result<Var> {
        let cfg = &self.cfg;
        let zv = tape.value(z);
        if zv.cols() != cfg.input_width() {
            return Err(Error::contract(format!(
                "denoiser expects {} columns, got {}",
                cfg.input_width(),
                zv.cols()
            )));
        }
        let x = tape.slice_cols(z, 0, 3)?;
        let psi = gaussian_embeddings(tape, params, x)?;
        let proj = tape.matmul(z, params.get("eps.w_in"))?;
        let mut h = tape.concat_cols(&[proj, psi])?;
        if cfg.attention {
            let q = tape.matmul(h, params.get("eps.attn.wq"))?;
            let k = tape.matmul(h, params.get("eps.attn.wk"))?;
            let v = tape.matmul(h, params.get("eps.attn.wv"))?;
            let kt = tape.transpose(k);
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, 1.0 / (cfg.hidden as f64).sqrt());
            let attn = tape.softmax_rows(logits);
            let mixed = tape.matmul(attn, v)?;
            h = tape.add(h, mixed)?;
        }
        let cond = time_condition(tape, params, "eps", t, cfg.time_emb)?;
        let h = set_blocks(tape, params, "eps", cfg.depth, cfg.activation, h, cond)?;
        let out = tape.matmul(h, params.get("eps.w_out"))?;
        let out = tape.add_row(out, params.get("eps.b_out"))?;
        tape.center_cols(out, 3)
    }
}

/// The rotation head `f_θ`.
#[derive(Clone, Debug)]
pub struct RotNet {
    pub cfg: NetConfig,
}

impl RotationHead for RotNet {
    fn forward(&self, tape: &mut Tape, params: &Bound, z: Var, eta: Var, t: f64) -> Result<Var> {
        let cfg = &self.cfg;
        if tape.value(eta).cols() != cfg.noise_dim || tape.value(eta).rows() != tape.value(z).rows() {
            return Err(Error::contract("noise must be N x noise_dim"));
        }
        let x = tape.slice_cols(z, 0, 3)?;
        let psi = gaussian_embeddings(tape, params, x)?;
        let input = tape.concat_cols(&[x, eta, psi])?;
        let h = tape.matmul(input, params.get("f.w_g"))?;
        let cond = time_condition(tape, params, "f", t, cfg.time_emb)?;
        let h = set_blocks(tape, params, "f", cfg.f_depth, cfg.activation, h, cond)?;
        let pooled = tape.mean_rows(h);
        let a = tape.matmul(pooled, params.get("f.w1"))?;
        let a = tape.add(a, params.get("f.b1"))?;
        let a = tape.act(a, Activation::Gelu);
        let m = tape.matmul(a, params.get("f.w2"))?;
        let m = tape.add(m, params.get("f.b2"))?;
        let m = tape.reshape(m, 3, 3)?;
        tape.qr_q(m)
    }

    fn noise_dim(&self) -> usize {
        self.cfg.noise_dim
    }
}

/// A [`Field`] that is identically zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroField;

impl Field for ZeroField {
    fn forward(&self, tape: &mut Tape, _: &Bound, z: Var, _: f64) -> Result<Var> {
        Ok(tape.scale(z, 0.0))
    }
}

/// `z -> c z`, which is exactly O(3)-equivariant.
#[derive(Clone, Copy, Debug)]
pub struct ScaledIdentity(pub f64);

impl Field for ScaledIdentity {
    fn forward(&self, tape: &mut Tape, _: &Bound, z: Var, _: f64) -> Result<Var> {
        Ok(tape.scale(z, self.0))
    }
}

/// Parameters together with the maps that read them.
#[derive(Clone, Copy)]
pub struct Nets<'a> {
    pub params: &'a ParamStore,
    pub field: &'a dyn Field,
    pub head: &'a dyn RotationHead,
}

/// Configuration and parameters of a full model.
#[derive(Clone, Debug)]
pub struct Model {
    pub eps: EpsNet,
    pub rot: RotNet,
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: NetConfig, mode: InitMode, rng: &mut RngStream) -> Result<Self> {
        let params = init_params(&cfg, mode, rng)?;
        Ok(Self::with_params(cfg, params))
    }

    pub fn with_params(cfg: NetConfig, params: ParamStore) -> Self {
        Self {
            eps: EpsNet { cfg: cfg.clone() },
            rot: RotNet { cfg },
            params,
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.eps.cfg
    }

    pub fn nets(&self) -> Nets<'_> {
        Nets {
            params: &self.params,
            field: &self.eps,
            head: &self.rot,
        }
    }
}

/// Evaluates `field` on a concrete state.
pub fn eval_field(nets: &Nets, z: &NBodyState, t: f64) -> Result<NBodyState> {
    let mut tape = Tape::new();
    let bound = nets.params.bind(&mut tape);
    let zv = tape.leaf(z.to_matrix());
    let out = nets.field.forward(&mut tape, &bound, zv, t)?;
    NBodyState::from_matrix(tape.value(out))
}

/// Evaluates the rotation head; returns the matrix and whether the QR step
/// fell back to the identity.
pub fn eval_head(nets: &Nets, z: &NBodyState, eta: &Tensor, t: f64) -> Result<(Tensor, bool)> {
    let mut tape = Tape::new();
    let bound = nets.params.bind(&mut tape);
    let zv = tape.leaf(z.to_matrix());
    let ev = tape.leaf(eta.clone());
    let out = nets.head.forward(&mut tape, &bound, zv, ev, t)?;
    Ok((tape.value(out).clone(), tape.degenerate_qr_count() > 0))
}
