//! Haar sampling on O(3) and the sign-corrected QR map.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numcore::tape::orthogonalize;
use crate::numcore::{RngStream, Tensor};

const MAX_HAAR_ATTEMPTS: usize = 8;

static DEGENERATE_HEADS: AtomicU64 = AtomicU64::new(0);

/// Process-wide number of identity fallbacks taken by [`qr_orthogonalize`].
pub fn degenerate_head_count() -> u64 {
    DEGENERATE_HEADS.load(Ordering::Relaxed)
}

/// Orthogonal factor of `m` with the triangular factor's diagonal made
/// positive. Returns `(Q, degenerate)`; rank-deficient input yields the
/// identity with `degenerate = true`.
///
/// The map satisfies `qr(R m) = R qr(m)` for orthogonal `R`.
pub fn qr_orthogonalize(m: &Tensor) -> Result<(Tensor, bool)> {
    if m.shape() != [3, 3] {
        return Err(Error::dim(format!("expected 3x3, got {:?}", m.shape())));
    }
    match orthogonalize(m) {
        Some((q, _)) => Ok((q, false)),
        None => {
            DEGENERATE_HEADS.fetch_add(1, Ordering::Relaxed);
            Ok((Tensor::eye(3), true))
        }
    }
}

/// Draws from the Haar measure on O(3): QR of a Gaussian matrix with the
/// sign correction `Q diag(sign(diag(R)))`.
pub fn sample_haar(stream: &mut RngStream) -> Result<Tensor> {
    for _ in 0..MAX_HAAR_ATTEMPTS {
        let g = stream.randn(3, 3);
        if let Some((q, _)) = orthogonalize(&g) {
            return Ok(q);
        }
    }
    Err(Error::Degenerate(format!(
        "Gaussian matrix rank-deficient {MAX_HAAR_ATTEMPTS} times in a row"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::linalg::{det3, orthogonality_error};

    #[test]
    fn haar_draws_are_orthogonal() {
        let mut s = RngStream::new(10);
        for _ in 0..1000 {
            let q = sample_haar(&mut s).unwrap();
            assert!(orthogonality_error(&q) < 1e-10);
        }
    }

    #[test]
    fn haar_hits_both_components() {
        let mut s = RngStream::new(11);
        let dets: Vec<f64> = (0..200).map(|_| det3(&sample_haar(&mut s).unwrap())).collect();
        assert!(dets.iter().any(|d| *d > 0.0) && dets.iter().any(|d| *d < 0.0));
    }

    #[test]
    fn qr_of_identity_and_positive_diagonal() {
        let (q, flag) = qr_orthogonalize(&Tensor::eye(3)).unwrap();
        assert!(!flag);
        assert_eq!(q, Tensor::eye(3));
        let (q, _) = qr_orthogonalize(&Tensor::diag(&[2.0, 3.0, 4.0])).unwrap();
        assert!(q.max_abs_diff(&Tensor::eye(3)) < 1e-15);
    }

    #[test]
    fn negated_column_still_orthogonal() {
        let mut s = RngStream::new(12);
        let mut m = s.randn(3, 3);
        for i in 0..3 {
            m.set(i, 1, -m.get(i, 1));
        }
        let (q, flag) = qr_orthogonalize(&m).unwrap();
        assert!(!flag);
        assert!(orthogonality_error(&q) < 1e-10);
        assert!((det3(&q).abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_head_is_flagged() {
        let before = degenerate_head_count();
        let (q, flag) = qr_orthogonalize(&Tensor::zeros(3, 3)).unwrap();
        assert!(flag);
        assert_eq!(q, Tensor::eye(3));
        assert!(degenerate_head_count() > before);
        let rank_one = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[-1.0, -2.0, -3.0]]).unwrap();
        assert!(qr_orthogonalize(&rank_one).unwrap().1);
    }

    #[test]
    fn qr_is_left_equivariant() {
        let mut s = RngStream::new(13);
        for _ in 0..200 {
            let m = s.randn(3, 3);
            let r = sample_haar(&mut s).unwrap();
            let (lhs, _) = qr_orthogonalize(&r.matmul(&m).unwrap()).unwrap();
            let (q, _) = qr_orthogonalize(&m).unwrap();
            let rhs = r.matmul(&q).unwrap();
            assert!(lhs.max_abs_diff(&rhs) < 1e-9);
        }
    }

    #[test]
    fn haar_mean_is_zero() {
        let mut s = RngStream::new(14);
        let n = 100_000;
        let mut mean = [0.0; 9];
        for _ in 0..n {
            let q = sample_haar(&mut s).unwrap();
            for (m, v) in mean.iter_mut().zip(q.data()) {
                *m += v / n as f64;
            }
        }
        assert!(mean.iter().all(|m| m.abs() < 0.02), "{mean:?}");
    }
}
