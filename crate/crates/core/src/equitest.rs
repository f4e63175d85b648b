//! Two-sample tests for equivariance and invariance in distribution.
//!
//! The statistic is the energy distance between two point clouds of
//! flattened states, calibrated by a label-permutation test. The pooled
//! pairwise distances are computed once and stored as a packed upper
//! triangle in `f32`, so each permutation costs one masked pass over it.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{act, GroupElement, NBodyState};
use crate::numcore::RngStream;
use crate::symkernel::KernelSampler;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_samples(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::contract("each sample needs at least two points"));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::dim("samples have different dimensions"));
    }
    Ok(dim)
}

fn mean_dist(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += dist(x, y);
        }
    }
    s / (a.len() * b.len()) as f64
}

fn mean_within(a: &[Vec<f64>], unbiased: bool) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += dist(&a[i], &a[j]);
        }
    }
    let pairs = if unbiased { n * (n - 1) } else { n * n };
    2.0 * s / pairs as f64
}

/// Energy distance `2E‖A − B‖ − E‖A − A'‖ − E‖B − B'‖` with unbiased
/// (U-statistic) within-sample terms; may be slightly negative.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_samples(a, b)?;
    Ok(2.0 * mean_dist(a, b) - mean_within(a, true) - mean_within(b, true))
}

/// The V-statistic version: non-negative and exactly zero for identical samples.
pub fn energy_distance_v(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_samples(a, b)?;
    Ok(2.0 * mean_dist(a, b) - mean_within(a, false) - mean_within(b, false))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermTestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub n_perm: usize,
}

/// Pooled distances; row `i` holds `d(i, j)` for `j > i`.
struct PackedDistances {
    n: usize,
    offsets: Vec<usize>,
    data: Vec<f32>,
    /// `Σ_{j≠i} d(i, j)`.
    full_sums: Vec<f64>,
    total: f64,
}

impl PackedDistances {
    fn new(points: &[&[f64]]) -> Self {
        let n = points.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut off = 0;
        for i in 0..n {
            offsets.push(off);
            off += n - i - 1;
        }
        offsets.push(off);
        let mut data = vec![0.0f32; off];
        let mut rows: Vec<&mut [f32]> = Vec::with_capacity(n);
        let mut rest = data.as_mut_slice();
        for i in 0..n {
            let (row, tail) = rest.split_at_mut(n - i - 1);
            rows.push(row);
            rest = tail;
        }
        rows.into_par_iter().enumerate().for_each(|(i, row)| {
            for (k, v) in row.iter_mut().enumerate() {
                *v = dist(points[i], points[i + 1 + k]) as f32;
            }
        });
        let mut full_sums = vec![0.0f64; n];
        for i in 0..n {
            let row = &data[offsets[i]..offsets[i + 1]];
            for (k, &v) in row.iter().enumerate() {
                full_sums[i] += v as f64;
                full_sums[i + 1 + k] += v as f64;
            }
        }
        let total = full_sums.iter().sum::<f64>() / 2.0;
        Self { n, offsets, data, full_sums, total }
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Energy statistic for the labelling `mask` (1 = first sample).
    ///
    /// Only first-sample rows are visited: with `S_A = Σ_{i∈A} Σ_{j≠i} d_ij
    /// = 2 s_aa + s_ab`, the other two sums follow from `s_aa` and the total.
    fn statistic(&self, mask: &[f32], n_a: usize) -> f64 {
        let n_b = self.n - n_a;
        let (mut s_aa, mut s_a) = (0.0f64, 0.0f64);
        for i in 0..self.n {
            if mask[i] > 0.0 {
                s_aa += masked_sum(self.row(i), &mask[i + 1..]);
                s_a += self.full_sums[i];
            }
        }
        let s_ab = s_a - 2.0 * s_aa;
        let s_bb = self.total - s_aa - s_ab;
        2.0 * s_ab / (n_a * n_b) as f64
            - 2.0 * s_aa / (n_a * (n_a - 1)) as f64
            - 2.0 * s_bb / (n_b * (n_b - 1)) as f64
    }
}

fn masked_sum(row: &[f32], mask: &[f32]) -> f64 {
    let mut acc = [0.0f32; 8];
    let mut chunks = row.chunks_exact(8).zip(mask.chunks_exact(8));
    for (r, m) in &mut chunks {
        for k in 0..8 {
            acc[k] += r[k] * m[k];
        }
    }
    let tail = row.len() / 8 * 8;
    let mut s: f64 = acc.iter().map(|&v| v as f64).sum();
    for k in tail..row.len() {
        s += (row[k] * mask[k]) as f64;
    }
    s
}

/// Permutation two-sample test on the energy distance.
///
/// `p = (1 + #{E_π ≥ E_obs}) / (1 + n_perm)`; rejects when `p < alpha`.
pub fn perm_two_sample_test(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_perm: usize,
    alpha: f64,
    stream: &mut RngStream,
) -> Result<PermTestResult> {
    check_samples(a, b)?;
    if n_perm == 0 {
        return Err(Error::contract("need at least one permutation"));
    }
    let statistic = energy_distance(a, b)?;
    let pooled: Vec<&[f64]> = a.iter().chain(b).map(Vec::as_slice).collect();
    let packed = PackedDistances::new(&pooled);
    let n_a = a.len();
    let mut observed_mask = vec![0.0f32; pooled.len()];
    observed_mask[..n_a].iter_mut().for_each(|m| *m = 1.0);
    let observed = packed.statistic(&observed_mask, n_a);
    let base = stream.split();
    let exceed = (0..n_perm)
        .into_par_iter()
        .filter(|&k| {
            let mut s = base.child(k as u64);
            let perm = s.permutation(pooled.len());
            let mut mask = vec![0.0f32; pooled.len()];
            for &p in &perm[..n_a] {
                mask[p] = 1.0;
            }
            packed.statistic(&mask, n_a) >= observed
        })
        .count();
    let p_value = (1 + exceed) as f64 / (1 + n_perm) as f64;
    Ok(PermTestResult {
        statistic,
        p_value,
        reject: p_value < alpha,
        n_perm,
    })
}

/// Outcome of an equivariance or invariance test.
#[derive(Clone, Debug, PartialEq)]
pub struct TestReport {
    pub label: String,
    pub n: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub mean_a: Vec<f64>,
    pub mean_b: Vec<f64>,
}

impl TestReport {
    fn from_samples(label: &str, a: &[Vec<f64>], b: &[Vec<f64>], res: PermTestResult) -> Self {
        Self {
            label: label.to_string(),
            n: a.len(),
            statistic: res.statistic,
            p_value: res.p_value,
            reject: res.reject,
            mean_a: column_mean(a),
            mean_b: column_mean(b),
        }
    }

    /// `key: value` lines.
    pub fn to_kv(&self) -> String {
        let fmt = |v: &[f64]| {
            v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",")
        };
        format!(
            "label: {}\nn: {}\nstatistic: {:.6e}\np_value: {:.6}\nreject: {}\nmean_a: {}\nmean_b: {}\n",
            self.label,
            self.n,
            self.statistic,
            self.p_value,
            self.reject,
            fmt(&self.mean_a),
            fmt(&self.mean_b)
        )
    }
}

fn column_mean(v: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; v.first().map_or(0, Vec::len)];
    for row in v {
        for (a, b) in m.iter_mut().zip(row) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|a| *a /= v.len() as f64);
    m
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestConfig {
    pub n: usize,
    pub alpha: f64,
    pub n_perm: usize,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self { n: 1000, alpha: 0.01, n_perm: 200 }
    }
}

/// Compares `k(· | g x)` with `g k(· | x)` from `n` independent draws each.
pub fn test_stochastic_equivariance(
    kernel: &dyn KernelSampler,
    x: &NBodyState,
    g: &GroupElement,
    cfg: TestConfig,
    stream: &mut RngStream,
) -> Result<TestReport> {
    let gx = act(g, x)?;
    let sa = stream.split();
    let sb = stream.split();
    let a = (0..cfg.n)
        .into_par_iter()
        .map(|i| kernel.sample(&gx, &mut sa.child(i as u64)).map(|s| s.flatten()))
        .collect::<Result<Vec<_>>>()?;
    let b = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let y = kernel.sample(x, &mut sb.child(i as u64))?;
            Ok(act(g, &y)?.flatten())
        })
        .collect::<Result<Vec<_>>>()?;
    let res = perm_two_sample_test(&a, &b, cfg.n_perm, cfg.alpha, stream)?;
    Ok(TestReport::from_samples("stochastic_equivariance", &a, &b, res))
}

/// Compares samples with `g`-transformed independent samples.
pub fn test_distributional_invariance(
    sampler: &(dyn Fn(&mut RngStream) -> Result<NBodyState> + Sync),
    g: &GroupElement,
    cfg: TestConfig,
    stream: &mut RngStream,
) -> Result<TestReport> {
    let sa = stream.split();
    let sb = stream.split();
    let a = (0..cfg.n)
        .into_par_iter()
        .map(|i| sampler(&mut sa.child(i as u64)).map(|s| s.flatten()))
        .collect::<Result<Vec<_>>>()?;
    let b = (0..cfg.n)
        .into_par_iter()
        .map(|i| Ok(act(g, &sampler(&mut sb.child(i as u64))?)?.flatten()))
        .collect::<Result<Vec<_>>>()?;
    let res = perm_two_sample_test(&a, &b, cfg.n_perm, cfg.alpha, stream)?;
    Ok(TestReport::from_samples("distributional_invariance", &a, &b, res))
}

/// Invariance test on two pre-drawn, independent pools: compares `pool_a`
/// with `g · pool_b`. Lets one expensive pool serve several group elements.
pub fn invariance_from_pools(
    pool_a: &[NBodyState],
    pool_b: &[NBodyState],
    g: &GroupElement,
    cfg: TestConfig,
    stream: &mut RngStream,
) -> Result<TestReport> {
    let a: Vec<Vec<f64>> = pool_a.iter().map(NBodyState::flatten).collect();
    let b = pool_b
        .iter()
        .map(|s| Ok(act(g, s)?.flatten()))
        .collect::<Result<Vec<_>>>()?;
    let res = perm_two_sample_test(&a, &b, cfg.n_perm, cfg.alpha, stream)?;
    Ok(TestReport::from_samples("distributional_invariance", &a, &b, res))
}

/// Which part of `S_N x O(3)` a battery entry exercises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    Rotation,
    Permutation,
}

/// Invariance tests for `rotations` Haar-random orthogonal maps and
/// `permutations` random relabellings, all drawn from `stream`, each
/// comparing `pool_a` with the transformed `pool_b`.
pub fn invariance_battery(
    pool_a: &[NBodyState],
    pool_b: &[NBodyState],
    rotations: usize,
    permutations: usize,
    cfg: TestConfig,
    stream: &mut RngStream,
) -> Result<Vec<(GroupKind, TestReport)>> {
    let n = pool_a.first().map(NBodyState::n).ok_or_else(|| Error::contract("empty pool"))?;
    let mut out = Vec::with_capacity(rotations + permutations);
    for k in 0..rotations + permutations {
        let (kind, g) = if k < rotations {
            let r = crate::ortho::sample_haar(stream)?;
            (GroupKind::Rotation, GroupElement::rotation(n, r)?)
        } else {
            (GroupKind::Permutation, GroupElement::permutation(stream.permutation(n))?)
        };
        let mut rep = invariance_from_pools(pool_a, pool_b, &g, cfg, stream)?;
        rep.label = match kind {
            GroupKind::Rotation => format!("rotation_{k}"),
            GroupKind::Permutation => format!("permutation_{}", k - rotations),
        };
        out.push((kind, rep));
    }
    Ok(out)
}
