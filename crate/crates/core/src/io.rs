//! Synthetic data and the binary file formats.
//!
//! Parameters (`SYMD`), version 1, little-endian:
//!
//! ```text
//! magic "SYMD" | version u32 | entries u32 |
//!   per entry: name_len u32 | name utf-8 | rank u32 | dims u64 * rank | f64 * prod(dims)
//! ```
//!
//! A store with one 1x2 entry `"a" = [1.0, 2.0]` encodes as
//!
//! ```text
//! 53 59 4d 44 01 00 00 00 01 00 00 00 01 00 00 00 61 02 00 00 00
//! 01 00 00 00 00 00 00 00 02 00 00 00 00 00 00 00
//! 00 00 00 00 00 00 f0 3f 00 00 00 00 00 00 00 40
//! ```
//!
//! Datasets (`SYDS`), version 1:
//!
//! ```text
//! magic "SYDS" | version u32 | count u64 | n u64 | d u64 |
//!   per sample: x as n*3 f64 row-major, then h as n*d f64 row-major
//! ```

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{proj_u, NBodyState};
use crate::nets::ParamStore;
use crate::numcore::{RngStream, Tensor};
use crate::ortho::sample_haar;

pub const PARAMS_MAGIC: &[u8; 4] = b"SYMD";
pub const DATASET_MAGIC: &[u8; 4] = b"SYDS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub n_templates: usize,
    pub n_points: usize,
    pub d: usize,
    pub jitter: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            n_templates: 3,
            n_points: 6,
            d: 1,
            jitter: 0.05,
            count: 2000,
            seed: 0,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::contract("count must be at least 1"));
        }
        if self.n_templates == 0 || self.n_points < 2 {
            return Err(Error::contract("need at least one template of two or more points"));
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return Err(Error::contract("jitter must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Fixed random templates, each sample a jittered rigid motion and
/// relabelling of one of them, so the distribution is invariant under
/// `S_N x O(3)` by construction.
pub fn generate_toy_dataset(spec: &ToyDatasetSpec) -> Result<Vec<NBodyState>> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    let mut tmpl_rng = root.child(0);
    let templates: Vec<NBodyState> = (0..spec.n_templates)
        .map(|_| {
            let x = tmpl_rng.randn(spec.n_points, 3);
            let h = tmpl_rng.randn(spec.n_points, spec.d);
            NBodyState::new(x, h).map(|s| proj_u(&s))
        })
        .collect::<Result<_>>()?;
    let samples = root.child(1);
    (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let mut s = samples.child(i as u64);
            let base = &templates[s.below(templates.len())];
            let r = sample_haar(&mut s)?;
            let perm = s.permutation(spec.n_points);
            let g = crate::geometry::GroupElement::new(perm, r)?;
            let moved = crate::geometry::act(&g, base)?;
            let nx = s.randn(spec.n_points, 3).scale(spec.jitter);
            let nh = s.randn(spec.n_points, spec.d).scale(spec.jitter);
            let jittered = NBodyState::new(moved.x().add(&nx)?, moved.h().add(&nh)?)?;
            Ok(proj_u(&jittered))
        })
        .collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated: need {n} bytes for {what}, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes_len = n
            .checked_mul(8)
            .ok_or_else(|| Error::format(self.pos as u64, format!("{what} size overflows")))?;
        let start = self.pos;
        let bytes = self.take(bytes_len, what)?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::format((start + 8 * k) as u64, format!("non-finite value in {what}")));
        }
        Ok(vals)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != magic {
            return Err(Error::format(0, format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let at = self.pos as u64;
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            return Err(Error::format(at, format!(
                "unsupported format version {v} (this build reads version {FORMAT_VERSION})"
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_params(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader::new(buf);
    r.header(PARAMS_MAGIC)?;
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.pos as u64;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at, "name is not UTF-8"))?
            .to_string();
        let at = r.pos as u64;
        let rank = r.u32("rank")?;
        if rank != 2 {
            return Err(Error::format(at, format!("entry {name}: rank {rank}, expected 2")));
        }
        let rows = r.u64("dims")? as usize;
        let cols = r.u64("dims")? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format(r.pos as u64, "dims overflow"))?;
        let data = r.f64s(n, &format!("entry {name}"))?;
        let at = r.pos as u64;
        store
            .insert(&name, Tensor::matrix(rows, cols, data)?)
            .map_err(|_| Error::format(at, format!("duplicate entry {name}")))?;
    }
    r.finish()?;
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode_params(store))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    decode_params(&fs::read(path)?)
}

pub fn encode_dataset(data: &[NBodyState]) -> Result<Vec<u8>> {
    let first = data.first().ok_or_else(|| Error::contract("empty dataset"))?;
    let (n, d) = (first.n(), first.d());
    if data.iter().any(|s| s.n() != n || s.d() != d) {
        return Err(Error::dim("samples differ in shape"));
    }
    let mut out = Vec::with_capacity(32 + data.len() * n * (3 + d) * 8);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [data.len(), n, d] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for s in data {
        for v in s.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<NBodyState>> {
    let mut r = Reader::new(buf);
    r.header(DATASET_MAGIC)?;
    let at = r.pos as u64;
    let count = r.u64("count")? as usize;
    let n = r.u64("n")? as usize;
    let d = r.u64("d")? as usize;
    if count == 0 {
        return Err(Error::format(at, "empty dataset"));
    }
    if n < 1 {
        return Err(Error::format(at + 8, "n must be positive"));
    }
    let per = n
        .checked_mul(3 + d)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::format(at, "sample size overflows"))?;
    let expected = count
        .checked_mul(per)
        .ok_or_else(|| Error::format(at, "dataset size overflows"))?;
    let remaining = buf.len() - r.pos;
    if remaining != expected {
        return Err(Error::format(
            at,
            format!("header declares {count} samples ({expected} bytes) but {remaining} payload bytes follow"),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let x = r.f64s(n * 3, &format!("sample {i} positions"))?;
        let h = r.f64s(n * d, &format!("sample {i} features"))?;
        out.push(NBodyState::new(Tensor::matrix(n, 3, x)?, Tensor::matrix(n, d, h)?)?);
    }
    r.finish()?;
    Ok(out)
}

pub fn save_dataset(data: &[NBodyState], path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(data)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<NBodyState>> {
    decode_dataset(&fs::read(path)?)
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::contract(format!("cannot serialise: {e}")))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(0, format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ToyDatasetSpec {
        ToyDatasetSpec { n_templates: 2, n_points: 4, d: 2, jitter: 0.1, count: 20, seed: 5 }
    }

    fn sorted_dists(s: &NBodyState) -> Vec<f64> {
        let x = s.x();
        let mut v = Vec::new();
        for i in 0..x.rows() {
            for j in i + 1..x.rows() {
                let d: f64 = (0..3).map(|a| (x.get(i, a) - x.get(j, a)).powi(2)).sum();
                v.push(d.sqrt());
            }
        }
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn rigid_templates_without_jitter() {
        let spec = ToyDatasetSpec { n_templates: 1, jitter: 0.0, ..small_spec() };
        let data = generate_toy_dataset(&spec).unwrap();
        let base = sorted_dists(&data[0]);
        for s in &data {
            let dists = sorted_dists(s);
            for (a, b) in base.iter().zip(&dists) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(crate::geometry::is_centered(s, 1e-12));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_toy_dataset(&small_spec()).unwrap();
        let b = generate_toy_dataset(&small_spec()).unwrap();
        assert_eq!(encode_dataset(&a).unwrap(), encode_dataset(&b).unwrap());
        let c = generate_toy_dataset(&ToyDatasetSpec { seed: 6, ..small_spec() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn spec_validation() {
        assert!(generate_toy_dataset(&ToyDatasetSpec { count: 0, ..small_spec() }).is_err());
        assert!(generate_toy_dataset(&ToyDatasetSpec { jitter: -1.0, ..small_spec() }).is_err());
    }

    #[test]
    fn params_hex_example() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let hex: String = encode_params(&p).iter().map(|b| format!("{b:02x}")).collect();
        let want = concat!(
            "53594d44", "01000000", "01000000", "01000000", "61", "02000000",
            "0100000000000000", "0200000000000000",
            "000000000000f03f", "0000000000000040"
        );
        assert_eq!(hex, want);
    }

    #[test]
    fn params_round_trip_bytes() {
        let mut rng = RngStream::new(1);
        let store = crate::nets::init_params(
            &crate::nets::NetConfig::new(1, 8, 1),
            crate::nets::InitMode::Random,
            &mut rng,
        )
        .unwrap();
        let bytes = encode_params(&store);
        let back = decode_params(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(encode_params(&back), bytes);
    }

    #[test]
    fn truncated_params_report_offset() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::zeros(2, 2)).unwrap();
        let bytes = encode_params(&p);
        for cut in [2, 6, 13, bytes.len() - 1] {
            match decode_params(&bytes[..cut]) {
                Err(Error::Format { offset, message }) => {
                    assert!(offset as usize <= cut, "{offset} > {cut}");
                    assert!(message.contains("truncated"), "{message}");
                }
                other => panic!("expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn version_bump_rejected() {
        let mut bytes = encode_params(&ParamStore::new());
        bytes[4] = 2;
        match decode_params(&bytes) {
            Err(Error::Format { offset: 4, message }) => assert!(message.contains("version 2")),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_params(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn dataset_round_trip_and_count_mismatch() {
        let data = generate_toy_dataset(&small_spec()).unwrap();
        let bytes = encode_dataset(&data).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, data);
        let mut wrong = bytes.clone();
        wrong[8] = 21;
        let err = decode_dataset(&wrong).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 8, .. }), "{err}");
        assert!(encode_dataset(&[]).is_err());
        let mut empty = bytes[..32].to_vec();
        empty[8..16].copy_from_slice(&0u64.to_le_bytes());
        assert!(decode_dataset(&empty).is_err());
    }

    #[test]
    fn garbage_never_panics() {
        let mut rng = RngStream::new(9);
        let good = encode_dataset(&generate_toy_dataset(&small_spec()).unwrap()).unwrap();
        for _ in 0..200 {
            let mut b = good.clone();
            for _ in 0..4 {
                let i = rng.below(b.len());
                b[i] = rng.next_u64() as u8;
            }
            let cut = rng.below(b.len() + 1);
            let _ = decode_dataset(&b[..cut]);
            let _ = decode_params(&b[..cut]);
        }
    }
}
