//! Small dense factorizations used by the orthogonal-group code.

use super::tensor::Tensor;

/// Householder QR of a square matrix. Returns `(Q, R)` with `A = Q R`,
/// without any sign normalization.
pub fn householder_qr(a: &Tensor) -> (Tensor, Tensor) {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    let mut r = a.clone();
    let mut q = Tensor::eye(n);
    for k in 0..n.saturating_sub(1) {
        let mut v: Vec<f64> = (k..n).map(|i| r.get(i, k)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2 = v.iter().map(|x| x * x).sum::<f64>();
        if vnorm2 == 0.0 {
            continue;
        }
        // R <- H R on rows k..n
        for j in 0..n {
            let dot: f64 = (k..n).map(|i| v[i - k] * r.get(i, j)).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                r.set(i, j, r.get(i, j) - f * v[i - k]);
            }
        }
        // Q <- Q H on columns k..n
        for i in 0..n {
            let dot: f64 = (k..n).map(|j| q.get(i, j) * v[j - k]).sum();
            let f = 2.0 * dot / vnorm2;
            for j in k..n {
                q.set(i, j, q.get(i, j) - f * v[j - k]);
            }
        }
    }
    for i in 1..n {
        for j in 0..i {
            r.set(i, j, 0.0);
        }
    }
    (q, r)
}

/// QR with the triangular factor's diagonal made nonnegative, which makes
/// the factorization unique for full-rank input.
pub fn qr_positive(a: &Tensor) -> (Tensor, Tensor) {
    let (mut q, mut r) = householder_qr(a);
    let n = a.rows();
    for i in 0..n {
        if r.get(i, i) < 0.0 {
            for j in 0..n {
                q.set(j, i, -q.get(j, i));
                r.set(i, j, -r.get(i, j));
            }
        }
    }
    (q, r)
}

/// Singular values of a 3x3 matrix, descending.
pub fn singular_values3(m: &Tensor) -> [f64; 3] {
    let mat = nalgebra::Matrix3::from_row_slice(m.data());
    let mut s: Vec<f64> = mat.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    [s[0], s[1], s[2]]
}

/// Largest deviation of `QᵀQ` from the identity.
pub fn orthogonality_error(q: &Tensor) -> f64 {
    let qtq = q.transpose().matmul(q).expect("square");
    qtq.max_abs_diff(&Tensor::eye(q.rows()))
}

/// Modified Gram–Schmidt on the columns.
pub fn gram_schmidt(q: &Tensor) -> Tensor {
    let n = q.rows();
    let mut out = q.clone();
    for j in 0..n {
        for p in 0..j {
            let dot: f64 = (0..n).map(|i| out.get(i, j) * out.get(i, p)).sum();
            for i in 0..n {
                out.set(i, j, out.get(i, j) - dot * out.get(i, p));
            }
        }
        let norm = (0..n).map(|i| out.get(i, j).powi(2)).sum::<f64>().sqrt();
        for i in 0..n {
            out.set(i, j, out.get(i, j) / norm);
        }
    }
    out
}

pub fn det3(m: &Tensor) -> f64 {
    let a = |i, j| m.get(i, j);
    a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0))
        + a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0))
}

/// Inverse of an upper-triangular matrix by back substitution.
pub fn upper_triangular_inverse(r: &Tensor) -> Tensor {
    let n = r.rows();
    let mut inv = Tensor::zeros(n, n);
    for j in 0..n {
        for i in (0..=j).rev() {
            let mut s = if i == j { 1.0 } else { 0.0 };
            for k in i + 1..=j {
                s -= r.get(i, k) * inv.get(k, j);
            }
            inv.set(i, j, s / r.get(i, i));
        }
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng::RngStream;

    #[test]
    fn qr_reconstructs() {
        let mut s = RngStream::new(3);
        for _ in 0..50 {
            let a = s.randn(3, 3);
            let (q, r) = qr_positive(&a);
            assert!(orthogonality_error(&q) < 1e-12);
            assert!(q.matmul(&r).unwrap().max_abs_diff(&a) < 1e-12);
            for i in 0..3 {
                assert!(r.get(i, i) >= 0.0);
            }
        }
    }

    #[test]
    fn triangular_inverse() {
        let r = Tensor::from_rows(&[&[2.0, 1.0, 3.0], &[0.0, 4.0, 5.0], &[0.0, 0.0, 0.5]]).unwrap();
        let p = r.matmul(&upper_triangular_inverse(&r)).unwrap();
        assert!(p.max_abs_diff(&Tensor::eye(3)) < 1e-14);
    }
}
