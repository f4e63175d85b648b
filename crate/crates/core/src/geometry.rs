//! N-body states, the `S_N x O(3)` action, and the centre-of-mass-free subspace.

use crate::error::{Error, Result};
use crate::numcore::linalg;
use crate::numcore::tape::center_first_cols;
use crate::numcore::Tensor;

/// Tolerance used when validating orthogonal matrices.
pub const ORTHO_TOL: f64 = 1e-10;

/// Positions `x` (`N x 3`) and per-point features `h` (`N x d`, `d` may be 0).
#[derive(Clone, Debug, PartialEq)]
pub struct NBodyState {
    x: Tensor,
    h: Tensor,
}

impl NBodyState {
    pub fn new(x: Tensor, h: Tensor) -> Result<Self> {
        if x.shape().len() != 2 || x.cols() != 3 {
            return Err(Error::dim(format!("positions must be N x 3, got {:?}", x.shape())));
        }
        let n = x.rows();
        if n == 0 {
            return Err(Error::contract("an N-body state needs N >= 1"));
        }
        if h.rows() != n || h.shape().len() != 2 {
            return Err(Error::dim(format!(
                "features {:?} do not match N = {n}",
                h.shape()
            )));
        }
        if !x.is_finite() || !h.is_finite() {
            return Err(Error::NonFinite("N-body state".into()));
        }
        Ok(Self { x, h })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            x: Tensor::zeros(n, 3),
            h: Tensor::zeros(n, d),
        }
    }

    /// Splits an `N x (3 + d)` matrix into positions and features.
    pub fn from_matrix(m: &Tensor) -> Result<Self> {
        if m.cols() < 3 {
            return Err(Error::dim("state matrix needs at least 3 columns"));
        }
        Self::new(m.slice_cols(0, 3), m.slice_cols(3, m.cols()))
    }

    /// `[x, h]` as one `N x (3 + d)` matrix.
    pub fn to_matrix(&self) -> Tensor {
        Tensor::concat_cols(&[&self.x, &self.h]).expect("rows agree")
    }

    /// Canonical flattening: `x` row-major, then `h` row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.x.len() + self.h.len());
        v.extend_from_slice(self.x.data());
        v.extend_from_slice(self.h.data());
        v
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn h(&self) -> &Tensor {
        &self.h
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.h.cols()
    }

    /// Dimension of the centre-of-mass-free subspace: `(N - 1) * 3 + N * d`.
    pub fn subspace_dim(&self) -> usize {
        subspace_dim(self.n(), self.d())
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.h.is_finite()
    }

    pub fn sq_norm(&self) -> f64 {
        self.x.sq_norm() + self.h.sq_norm()
    }

    /// `a * self + b * other`
    pub fn lincomb(&self, a: f64, other: &NBodyState, b: f64) -> Result<Self> {
        if self.x.shape() != other.x.shape() || self.h.shape() != other.h.shape() {
            return Err(Error::dim("states of different size"));
        }
        let x = self.x.zip_map(&other.x, |p, q| a * p + b * q)?;
        let h = self.h.zip_map(&other.h, |p, q| a * p + b * q)?;
        Ok(Self { x, h })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            x: self.x.scale(s),
            h: self.h.scale(s),
        }
    }

    /// Applies `R` to every position (`x_i -> R x_i`); features untouched.
    pub fn rotate(&self, r: &Tensor) -> Self {
        Self {
            x: self.x.matmul(&r.transpose()).expect("3x3 rotation"),
            h: self.h.clone(),
        }
    }

    pub fn max_abs_diff(&self, other: &NBodyState) -> f64 {
        self.x.max_abs_diff(&other.x).max(self.h.max_abs_diff(&other.h))
    }
}

pub fn subspace_dim(n: usize, d: usize) -> usize {
    (n - 1) * 3 + n * d
}

/// Arithmetic mean of the rows of an `N x 3` position block.
pub fn com(x: &Tensor) -> [f64; 3] {
    let m = x.mean_rows();
    [m.data()[0], m.data()[1], m.data()[2]]
}

/// Projects onto the centre-of-mass-free subspace by centring positions.
pub fn proj_u(z: &NBodyState) -> NBodyState {
    NBodyState {
        x: center_first_cols(&z.x, 3),
        h: z.h.clone(),
    }
}

pub fn is_centered(z: &NBodyState, tol: f64) -> bool {
    com(&z.x).iter().all(|c| c.abs() <= tol)
}

/// An element `(sigma, R)` of `S_N x O(3)`.
///
/// Acting on a state, output row `i` is `(R x_{sigma(i)}, h_{sigma(i)})`.
/// The product `g * g'` is defined so that `act(g * g', z) = act(g, act(g', z))`:
/// the rotation part is `R R'` and the permutation array is
/// `i -> sigma'(sigma(i))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupElement {
    perm: Vec<usize>,
    rot: Tensor,
}

impl GroupElement {
    pub fn new(perm: Vec<usize>, rot: Tensor) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::contract(format!("{perm:?} is not a permutation")));
            }
        }
        check_orthogonal(&rot)?;
        Ok(Self { perm, rot })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
            rot: Tensor::eye(3),
        }
    }

    pub fn rotation(n: usize, rot: Tensor) -> Result<Self> {
        Self::new((0..n).collect(), rot)
    }

    pub fn permutation(perm: Vec<usize>) -> Result<Self> {
        Self::new(perm, Tensor::eye(3))
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn rot(&self) -> &Tensor {
        &self.rot
    }

    pub fn compose(&self, other: &GroupElement) -> Result<Self> {
        if self.perm.len() != other.perm.len() {
            return Err(Error::dim("composing permutations of different size"));
        }
        let perm = self.perm.iter().map(|&i| other.perm[i]).collect();
        let rot = self.rot.matmul(&other.rot)?;
        Ok(Self { perm, rot })
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        Self {
            perm: inv,
            rot: self.rot.transpose(),
        }
    }
}

pub fn check_orthogonal(rot: &Tensor) -> Result<()> {
    if rot.shape() != [3, 3] {
        return Err(Error::dim(format!("rotation must be 3x3, got {:?}", rot.shape())));
    }
    let err = linalg::orthogonality_error(rot);
    let det = linalg::det3(rot);
    if err > ORTHO_TOL || (det.abs() - 1.0).abs() > ORTHO_TOL {
        return Err(Error::contract(format!(
            "matrix is not orthogonal (|RᵀR - I| = {err:e}, det = {det})"
        )));
    }
    Ok(())
}

/// Applies a group element to a state.
pub fn act(g: &GroupElement, z: &NBodyState) -> Result<NBodyState> {
    let n = z.n();
    if g.perm.len() != n {
        return Err(Error::dim(format!(
            "permutation of size {} acting on N = {n}",
            g.perm.len()
        )));
    }
    let d = z.d();
    let mut x = Tensor::zeros(n, 3);
    let mut h = Tensor::zeros(n, d);
    for (i, &src) in g.perm.iter().enumerate() {
        let row = z.x.row(src);
        for a in 0..3 {
            let v = (0..3).map(|b| g.rot.get(a, b) * row[b]).sum();
            x.set(i, a, v);
        }
        for c in 0..d {
            h.set(i, c, z.h.get(src, c));
        }
    }
    Ok(NBodyState { x, h })
}
