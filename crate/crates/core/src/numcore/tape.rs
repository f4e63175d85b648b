//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the node index is a valid
//! topological order and the backward sweep simply walks it in reverse.

use std::f64::consts::PI;

use super::linalg;
use super::tensor::{matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
    /// tanh approximation
    Gelu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s + x * s * (1.0 - s)
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let th = u.tanh();
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Lower bound applied to `|sigma|` in the Gaussian distance basis.
pub const RBF_MIN_WIDTH: f64 = 1e-3;

/// Relative singular-value threshold below which a matrix is treated as
/// rank-deficient by [`Tape::qr_q`].
pub const QR_DEGENERATE_RTOL: f64 = 1e-8;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MeanRows(Var),
    RepeatRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Act(Var, Activation),
    CenterCols(Var, usize),
    PairDist(Var),
    GaussRbf { dist: Var, mu: Var, sigma: Var },
    QrQ { m: Var, r: Option<Tensor> },
    SoftmaxRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    degenerate_qr: usize,
}

/// Gradients of a scalar root with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros if `v` did not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let shape = self.shapes[v.0].clone();
                let len = shape.iter().product();
                Tensor::from_parts(shape, vec![0.0; len])
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// How many QR nodes fell back to the identity.
    pub fn degenerate_qr_count(&self) -> usize {
        self.degenerate_qr
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `a + b` with the `1 x m` row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::dim(format!(
                "add_row: {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let c = av.cols();
        let mut out = av.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// `sum(a * a)`
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        Ok(self.sum(sq))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        self.push(value, Op::MeanRows(a))
    }

    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != 1 {
            return Err(Error::dim("repeat_rows expects a single row"));
        }
        let c = av.cols();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(av.data());
        }
        Ok(self.push(Tensor::from_parts(vec![n, c], data), Op::RepeatRows(a)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&tensors)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let av = self.value(a);
        if lo > hi || hi > av.cols() {
            return Err(Error::dim(format!(
                "slice_cols {lo}..{hi} of {:?}",
                av.shape()
            )));
        }
        let value = av.slice_cols(lo, hi);
        Ok(self.push(value, Op::SliceCols(a, lo)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).reshape(vec![rows, cols])?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn act(&mut self, a: Var, kind: Activation) -> Var {
        let value = self.value(a).map(|x| kind.apply(x));
        self.push(value, Op::Act(a, kind))
    }

    /// Subtracts the column mean from the first `k` columns.
    pub fn center_cols(&mut self, a: Var, k: usize) -> Result<Var> {
        let av = self.value(a);
        if k > av.cols() {
            return Err(Error::dim("center_cols beyond width"));
        }
        let value = center_first_cols(av, k);
        Ok(self.push(value, Op::CenterCols(a, k)))
    }

    /// Pairwise Euclidean distances between rows.
    pub fn pair_dist(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows();
        let mut d = Tensor::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let dist = xv
                    .row(i)
                    .iter()
                    .zip(xv.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                d.set(i, j, dist);
                d.set(j, i, dist);
            }
        }
        self.push(d, Op::PairDist(x))
    }

    /// Row-averaged Gaussian distance basis:
    /// `out[i,k] = (1/N) sum_j -exp(-((d_ij - mu_k)/s_k)^2 / 2) / (sqrt(2 pi) s_k)`
    /// with `s_k = max(|sigma_k|, RBF_MIN_WIDTH)`.
    pub fn gauss_rbf(&mut self, dist: Var, mu: Var, sigma: Var) -> Result<Var> {
        let (dv, mv, sv) = (self.value(dist), self.value(mu), self.value(sigma));
        let k = mv.len();
        if sv.len() != k || dv.rows() != dv.cols() {
            return Err(Error::dim("gauss_rbf parameter shapes"));
        }
        let n = dv.rows();
        let mut out = Tensor::zeros(n, k);
        let inv_n = 1.0 / n as f64;
        for b in 0..k {
            let m = mv.data()[b];
            let s = rbf_width(sv.data()[b]);
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += rbf(dv.get(i, j), m, s);
                }
                out.set(i, b, acc * inv_n);
            }
        }
        Ok(self.push(out, Op::GaussRbf { dist, mu, sigma }))
    }

    /// Orthogonal factor of a square matrix with the diagonal of the
    /// triangular factor made positive. Rank-deficient input (relative
    /// smallest singular value below [`QR_DEGENERATE_RTOL`]) yields the
    /// identity and zero gradient.
    pub fn qr_q(&mut self, m: Var) -> Result<Var> {
        let mv = self.value(m);
        if mv.rows() != mv.cols() {
            return Err(Error::dim("qr_q needs a square matrix"));
        }
        let n = mv.rows();
        let (q, r) = match orthogonalize(mv) {
            Some((q, r)) => (q, Some(r)),
            None => {
                self.degenerate_qr += 1;
                (Tensor::eye(n), None)
            }
        };
        Ok(self.push(q, Op::QrQ { m, r }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = av.clone();
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_parts(
            self.value(root).shape().to_vec(),
            vec![1.0],
        ));
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, nn) = (av.rows(), av.cols(), bv.cols());
                    let bt = bv.transpose();
                    let ga = matmul_raw(g.data(), bt.data(), m, nn, k);
                    let at = av.transpose();
                    let gb = matmul_raw(at.data(), g.data(), k, m, nn);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let gb = g.mean_rows().scale(g.rows() as f64);
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let ga = Tensor::from_parts(av.shape().to_vec(), vec![g.item(); av.len()]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let inv = 1.0 / av.rows() as f64;
                    let mut data = Vec::with_capacity(av.len());
                    for _ in 0..av.rows() {
                        data.extend(g.data().iter().map(|v| v * inv));
                    }
                    accumulate(&mut grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
                }
                Op::RepeatRows(a) => {
                    let ga = g.mean_rows().scale(g.rows() as f64);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut lo = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        accumulate(&mut grads, *p, g.slice_cols(lo, lo + w));
                        lo += w;
                    }
                }
                Op::SliceCols(a, lo) => {
                    let av = self.value(*a);
                    let (r, c, w) = (av.rows(), av.cols(), g.cols());
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        for j in 0..w {
                            ga.set(i, lo + j, g.get(i, j));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Reshape(a) => {
                    let ga = g.reshape(self.value(*a).shape().to_vec())?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Act(a, kind) => {
                    let ga = g.zip_map(self.value(*a), |gy, x| gy * kind.derivative(x))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::CenterCols(a, k) => accumulate(&mut grads, *a, center_first_cols(&g, *k)),
                Op::PairDist(x) => {
                    let xv = self.value(*x);
                    let d = &node.value;
                    let (n, c) = (xv.rows(), xv.cols());
                    let mut gx = Tensor::zeros(n, c);
                    for i in 0..n {
                        for j in 0..n {
                            let dij = d.get(i, j);
                            if i == j || dij == 0.0 {
                                continue;
                            }
                            let w = (g.get(i, j) + g.get(j, i)) / dij;
                            for a in 0..c {
                                let delta = xv.get(i, a) - xv.get(j, a);
                                gx.set(i, a, gx.get(i, a) + w * delta);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GaussRbf { dist, mu, sigma } => {
                    let (dv, mv, sv) = (self.value(*dist), self.value(*mu), self.value(*sigma));
                    let n = dv.rows();
                    let k = mv.len();
                    let inv_n = 1.0 / n as f64;
                    let mut gd = Tensor::zeros(n, n);
                    let mut gmu = vec![0.0; k];
                    let mut gsig = vec![0.0; k];
                    let c = 1.0 / (2.0 * PI).sqrt();
                    for b in 0..k {
                        let m = mv.data()[b];
                        let raw = sv.data()[b];
                        let s = rbf_width(raw);
                        let ds_dsigma = if raw.abs() > RBF_MIN_WIDTH { raw.signum() } else { 0.0 };
                        for i in 0..n {
                            let gib = g.get(i, b) * inv_n;
                            if gib == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                let u = (dv.get(i, j) - m) / s;
                                let e = (-0.5 * u * u).exp();
                                let dpsi_dd = c * e * u / (s * s);
                                let dpsi_ds = c * e * (1.0 - u * u) / (s * s);
                                gd.set(i, j, gd.get(i, j) + gib * dpsi_dd);
                                gmu[b] -= gib * dpsi_dd;
                                gsig[b] += gib * dpsi_ds * ds_dsigma;
                            }
                        }
                    }
                    let mshape = mv.shape().to_vec();
                    let sshape = sv.shape().to_vec();
                    accumulate(&mut grads, *dist, gd);
                    accumulate(&mut grads, *mu, Tensor::from_parts(mshape, gmu));
                    accumulate(&mut grads, *sigma, Tensor::from_parts(sshape, gsig));
                }
                Op::QrQ { m, r } => {
                    if let Some(r) = r {
                        let q = &node.value;
                        // M = -Q̄ᵀQ; Ā = (Q̄ + Q·copyltu(M))·R⁻ᵀ
                        let mm = g.transpose().matmul(q)?.scale(-1.0);
                        let nn = mm.rows();
                        let mut sym = Tensor::zeros(nn, nn);
                        for i in 0..nn {
                            for j in 0..nn {
                                let v = if i >= j { mm.get(i, j) } else { mm.get(j, i) };
                                sym.set(i, j, v);
                            }
                        }
                        let rinv_t = linalg::upper_triangular_inverse(r).transpose();
                        let ga = g.add(&q.matmul(&sym)?)?.matmul(&rinv_t)?;
                        accumulate(&mut grads, *m, ga);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g.get(i, j) * y.get(i, j)).sum();
                        for j in 0..c {
                            ga.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn rbf_width(sigma: f64) -> f64 {
    sigma.abs().max(RBF_MIN_WIDTH)
}

#[inline]
fn rbf(d: f64, mu: f64, s: f64) -> f64 {
    let u = (d - mu) / s;
    -(-0.5 * u * u).exp() / ((2.0 * PI).sqrt() * s)
}

pub(crate) fn center_first_cols(a: &Tensor, k: usize) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut means = vec![0.0; k];
    for i in 0..r {
        for j in 0..k {
            means[j] += a.get(i, j);
        }
    }
    means.iter_mut().for_each(|m| *m /= r as f64);
    let mut out = a.clone();
    for i in 0..r {
        for j in 0..k {
            out.data_mut()[i * c + j] -= means[j];
        }
    }
    out
}

/// Sign-corrected QR orthogonal factor, or `None` for rank-deficient input.
/// Output drifting from orthogonality by more than `1e-10` is re-orthogonalized
/// once with Gram–Schmidt.
pub(crate) fn orthogonalize(m: &Tensor) -> Option<(Tensor, Tensor)> {
    if m.rows() == 3 {
        let s = linalg::singular_values3(m);
        if !(s[0] > 0.0) || s[2] <= QR_DEGENERATE_RTOL * s[0] {
            return None;
        }
    }
    let (mut q, r) = linalg::qr_positive(m);
    if linalg::orthogonality_error(&q) > 1e-10 {
        q = linalg::gram_schmidt(&q);
    }
    Some((q, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng::RngStream;

    fn fd_check(
        inputs: &[Tensor],
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &vars).unwrap();
        let grads = tape.backward(root).unwrap();
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]);
            for idx in 0..input.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Tensor> = inputs.to_vec();
                    perturbed[k].data_mut()[idx] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = perturbed.iter().map(|p| t.leaf(p.clone())).collect();
                    let r = f(&mut t, &vs).unwrap();
                    t.value(r).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.data()[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(rel < tol, "input {k} entry {idx}: fd {fd} analytic {an}");
            }
        }
    }

    fn uniform(rng: &mut RngStream, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| 4.0 * rng.uniform() - 2.0).collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    #[test]
    fn identity_grad_is_one() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.sum(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 1.0);
    }

    #[test]
    fn sum_of_squares_hand_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let y = t.sum_squares(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_grad_matches_fd() {
        let mut rng = RngStream::new(1);
        let a = uniform(&mut rng, 4, 5);
        let b = uniform(&mut rng, 5, 2);
        fd_check(&[a, b], |t, v| {
            let c = t.matmul(v[0], v[1])?;
            Ok(t.sum(c))
        }, 1e-6);
    }

    #[test]
    fn elementwise_and_structural_ops_match_fd() {
        let mut rng = RngStream::new(2);
        let a = uniform(&mut rng, 3, 4);
        let b = uniform(&mut rng, 3, 4);
        let row = uniform(&mut rng, 1, 4);
        let w = uniform(&mut rng, 3, 4);
        fd_check(&[a, b, row, w], |t, v| {
            let s = t.sub(v[0], v[1])?;
            let p = t.mul(s, v[0])?;
            let q = t.add_row(p, v[2])?;
            let m = t.mean_rows(q);
            let rep = t.repeat_rows(m, 3)?;
            let cat = t.concat_cols(&[rep, v[1]])?;
            let sl = t.slice_cols(cat, 2, 6)?;
            let tr = t.transpose(sl);
            let rs = t.reshape(tr, 3, 4)?;
            let sc = t.scale(rs, 0.7);
            let c = t.center_cols(sc, 3)?;
            let weighted = t.mul(c, v[3])?;
            Ok(t.sum(weighted))
        }, 1e-6);
    }

    #[test]
    fn activations_match_fd() {
        let mut rng = RngStream::new(3);
        for kind in [Activation::Silu, Activation::Tanh, Activation::Gelu] {
            let a = uniform(&mut rng, 2, 3);
            let w = uniform(&mut rng, 2, 3);
            fd_check(&[a, w], |t, v| {
                let y = t.act(v[0], kind);
                let z = t.mul(y, v[1])?;
                Ok(t.sum(z))
            }, 1e-6);
        }
    }

    #[test]
    fn softmax_matches_fd() {
        let mut rng = RngStream::new(4);
        let a = uniform(&mut rng, 3, 5);
        let w = uniform(&mut rng, 3, 5);
        fd_check(&[a, w], |t, v| {
            let y = t.softmax_rows(v[0]);
            let z = t.mul(y, v[1])?;
            Ok(t.sum(z))
        }, 1e-6);
    }

    #[test]
    fn distance_basis_matches_fd() {
        let mut rng = RngStream::new(5);
        let x = uniform(&mut rng, 4, 3);
        let mu = uniform(&mut rng, 1, 3);
        let sigma = Tensor::matrix(1, 3, vec![0.8, -1.3, 0.5]).unwrap();
        let w = uniform(&mut rng, 4, 3);
        fd_check(&[x, mu, sigma, w], |t, v| {
            let d = t.pair_dist(v[0]);
            let e = t.gauss_rbf(d, v[1], v[2])?;
            let z = t.mul(e, v[3])?;
            Ok(t.sum(z))
        }, 1e-6);
    }

    #[test]
    fn qr_matches_fd() {
        let mut rng = RngStream::new(6);
        for _ in 0..5 {
            let m = uniform(&mut rng, 3, 3);
            let w = uniform(&mut rng, 3, 3);
            fd_check(&[m, w], |t, v| {
                let q = t.qr_q(v[0])?;
                let z = t.mul(q, v[1])?;
                Ok(t.sum(z))
            }, 1e-6);
        }
    }

    #[test]
    fn qr_degenerate_falls_back_to_identity() {
        let mut t = Tape::new();
        let m = t.leaf(Tensor::zeros(3, 3));
        let q = t.qr_q(m).unwrap();
        assert_eq!(t.value(q), &Tensor::eye(3));
        assert_eq!(t.degenerate_qr_count(), 1);
        let s = t.sum(q);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(m).max_abs(), 0.0);
    }
}
