//! Dense truncated Volterra mappings.
//!
//! `f(x) = sum_{r=1..p} sum_{i_1..i_r} h_r(i_1, .., i_r) x_{i_1} .. x_{i_r}`
//! evaluated by full `d^r` summation. This is the brute-force reference that
//! every kernelized representation in the crate is checked against, so it
//! stays deliberately plain: dense coefficient tensors, no symmetry-packed
//! storage, and no constant term.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, KvnnError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Largest input dimension accepted by [`random_volterra`].
pub const ORACLE_MAX_DIM: usize = 8;
/// Largest order accepted by [`random_volterra`].
pub const ORACLE_MAX_ORDER: usize = 3;

/// Coefficient tensors `h_1 .. h_p`; `h_r` has `r` axes of extent `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolterraCoefficients {
    dim: usize,
    tensors: Vec<Tensor>,
}

impl VolterraCoefficients {
    pub fn new(dim: usize, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.is_empty() {
            return Err(KvnnError::InvalidArgument(
                "Volterra order must be at least 1".into(),
            ));
        }
        for (k, t) in tensors.iter().enumerate() {
            let r = k + 1;
            if t.rank() != r || t.shape().iter().any(|&s| s != dim) {
                return Err(KvnnError::InvalidArgument(format!(
                    "h_{r} must have {r} axes of extent {dim}, got shape {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { dim, tensors })
    }

    /// All-zero coefficients of order `p`.
    pub fn zeros(dim: usize, order: usize) -> Result<Self> {
        Self::new(dim, (1..=order).map(|r| Tensor::cube(dim, r)).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.tensors.len()
    }

    /// `h_r` for `r` in `1..=p`.
    pub fn tensor(&self, r: usize) -> &Tensor {
        &self.tensors[r - 1]
    }

    pub fn tensor_mut(&mut self, r: usize) -> &mut Tensor {
        &mut self.tensors[r - 1]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Only the order-`r` term `f_r(x)`.
    pub fn eval_order(&self, r: usize, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        if r == 0 || r > self.order() {
            return Err(KvnnError::InvalidArgument(format!(
                "order {r} outside 1..={}",
                self.order()
            )));
        }
        Ok(eval_homogeneous(self.tensor(r), x))
    }

    /// Symmetrize every order in place.
    pub fn symmetrize(&mut self) -> Result<()> {
        for t in &mut self.tensors {
            *t = symmetrize(t)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.order());
        for (k, t) in self.tensors.iter().enumerate() {
            let name = format!("{stem}_h{}.kvt", k + 1);
            t.save(dir.join(&name))?;
            files.push(name);
        }
        let manifest = VolterraManifest {
            d: self.dim,
            p: self.order(),
            files,
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: VolterraManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        check_dim(manifest.p, manifest.files.len())?;
        let tensors = manifest
            .files
            .iter()
            .map(|f| Tensor::load(dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest.d, tensors)
    }
}

/// JSON manifest wrapping per-order KVT1 payloads.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VolterraManifest {
    pub d: usize,
    pub p: usize,
    pub files: Vec<String>,
}

/// Full truncated Volterra mapping of `x`.
pub fn eval_volterra(coeffs: &VolterraCoefficients, x: &[f64]) -> Result<f64> {
    check_dim(coeffs.dim, x.len())?;
    Ok(coeffs
        .tensors
        .iter()
        .map(|h| eval_homogeneous(h, x))
        .sum())
}

/// `sum_{i_1..i_r} h(i_1..i_r) x_{i_1} .. x_{i_r}` by walking every flat entry.
fn eval_homogeneous(h: &Tensor, x: &[f64]) -> f64 {
    let d = x.len();
    let r = h.rank();
    let mut idx = vec![0usize; r];
    let mut total = 0.0;
    for &coef in h.data() {
        let mut term = coef;
        for &i in &idx {
            term *= x[i];
        }
        total += term;
        // odometer increment, last axis fastest (row-major)
        for a in (0..r).rev() {
            idx[a] += 1;
            if idx[a] < d {
                break;
            }
            idx[a] = 0;
        }
    }
    total
}

/// Average of a cubical tensor over all `r!` axis permutations.
pub fn symmetrize(h: &Tensor) -> Result<Tensor> {
    let r = h.rank();
    let d = h.shape()[0];
    if h.shape().iter().any(|&s| s != d) {
        return Err(KvnnError::InvalidArgument(format!(
            "symmetrize needs equal axis extents, got {:?}",
            h.shape()
        )));
    }
    let perms = permutations(r);
    let inv = 1.0 / perms.len() as f64;
    let mut out = Tensor::zeros(h.shape());
    let mut idx = vec![0usize; r];
    let mut permuted = vec![0usize; r];
    for flat in 0..h.len() {
        decode(flat, d, &mut idx);
        let first = h.data()[flat];
        let mut acc = 0.0;
        let mut uniform = true;
        for p in &perms {
            for (slot, &src) in permuted.iter_mut().zip(p) {
                *slot = idx[src];
            }
            let v = h.get(&permuted);
            uniform &= v == first;
            acc += v;
        }
        out.data_mut()[flat] = if uniform { first } else { acc * inv };
    }
    // Entries sharing an orbit must be bit-identical; the sum above visits the
    // same multiset of values in orbit-dependent order, so copy the canonical one.
    let mut canonical = vec![0usize; r];
    for flat in 0..h.len() {
        decode(flat, d, &mut idx);
        canonical.copy_from_slice(&idx);
        canonical.sort_unstable();
        let v = out.get(&canonical);
        out.data_mut()[flat] = v;
    }
    Ok(out)
}

fn decode(mut flat: usize, d: usize, idx: &mut [usize]) {
    for slot in idx.iter_mut().rev() {
        *slot = flat % d;
        flat /= d;
    }
}

fn permutations(r: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(r), &mut vec![false; r], &mut out);
    out
}

/// Reproducible symmetric coefficients with entries drawn from `[-scale, scale]`.
pub fn random_volterra(seed: u64, d: usize, p: usize, scale: f64) -> Result<VolterraCoefficients> {
    if d == 0 || d > ORACLE_MAX_DIM || p == 0 || p > ORACLE_MAX_ORDER {
        return Err(KvnnError::InvalidArgument(format!(
            "random_volterra needs 1 <= d <= {ORACLE_MAX_DIM} and 1 <= p <= {ORACLE_MAX_ORDER}, got d={d} p={p}"
        )));
    }
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(KvnnError::InvalidArgument(format!("bad scale {scale}")));
    }
    let mut g = rng::seeded(seed);
    let tensors = (1..=p)
        .map(|r| {
            let n = d.pow(r as u32);
            let t = Tensor::new(vec![d; r], rng::uniform_vec(&mut g, n, -scale, scale))?;
            symmetrize(&t)
        })
        .collect::<Result<Vec<_>>>()?;
    VolterraCoefficients::new(d, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent hand-nested evaluator for d-dimensional inputs up to order 3.
    fn triple_loop(c: &VolterraCoefficients, x: &[f64]) -> f64 {
        let d = c.dim();
        let mut s = 0.0;
        for i in 0..d {
            s += c.tensor(1).get(&[i]) * x[i];
        }
        if c.order() >= 2 {
            for i in 0..d {
                for j in 0..d {
                    s += c.tensor(2).get(&[i, j]) * x[i] * x[j];
                }
            }
        }
        if c.order() >= 3 {
            for i in 0..d {
                for j in 0..d {
                    for k in 0..d {
                        s += c.tensor(3).get(&[i, j, k]) * x[i] * x[j] * x[k];
                    }
                }
            }
        }
        s
    }

    fn vol(d: usize, ts: Vec<Tensor>) -> VolterraCoefficients {
        VolterraCoefficients::new(d, ts).unwrap()
    }

    #[test]
    fn linear_and_scalar_quadratic() {
        let c = vol(2, vec![Tensor::vector(vec![3.0, -2.0]).unwrap()]);
        assert_eq!(eval_volterra(&c, &[0.5, 4.0]).unwrap(), 3.0 * 0.5 - 8.0);

        let c = vol(
            1,
            vec![
                Tensor::vector(vec![0.0]).unwrap(),
                Tensor::new(vec![1, 1], vec![2.5]).unwrap(),
            ],
        );
        assert_eq!(eval_volterra(&c, &[3.0]).unwrap(), 22.5);
    }

    #[test]
    fn matches_hand_nested_loops() {
        let c = random_volterra(11, 3, 3, 1.0).unwrap();
        let mut g = rng::seeded(5);
        for _ in 0..50 {
            let x = rng::uniform_vec(&mut g, 3, -1.5, 1.5);
            let a = eval_volterra(&c, &x).unwrap();
            let b = triple_loop(&c, &x);
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn errors() {
        assert!(VolterraCoefficients::new(2, vec![]).is_err());
        let c = random_volterra(1, 2, 2, 1.0).unwrap();
        assert!(matches!(
            eval_volterra(&c, &[1.0]),
            Err(KvnnError::DimensionMismatch { .. })
        ));
        assert!(c.eval_order(3, &[1.0, 1.0]).is_err());
        assert!(random_volterra(1, 9, 2, 1.0).is_err());
        assert!(random_volterra(1, 2, 4, 1.0).is_err());
        assert!(symmetrize(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn symmetrize_matrix_and_fixed_point() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 2.0, 0.0, 0.0]).unwrap();
        let s = symmetrize(&t).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(symmetrize(&s).unwrap(), s);
    }

    #[test]
    fn symmetrized_entries_are_exactly_permutation_invariant() {
        let mut g = rng::seeded(3);
        let t = Tensor::new(vec![3, 3, 3], rng::uniform_vec(&mut g, 27, -1.0, 1.0)).unwrap();
        let s = symmetrize(&t).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let v = s.get(&[i, j, k]);
                    for p in [[i, k, j], [j, i, k], [j, k, i], [k, i, j], [k, j, i]] {
                        assert_eq!(s.get(&p), v);
                    }
                }
            }
        }
    }

    #[test]
    fn symmetrization_preserves_evaluation() {
        let mut g = rng::seeded(9);
        let raw = Tensor::new(vec![2, 2, 2], rng::uniform_vec(&mut g, 8, -1.0, 1.0)).unwrap();
        let lin = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let quad = Tensor::zeros(&[2, 2]);
        let before = vol(2, vec![lin.clone(), quad.clone(), raw.clone()]);
        let after = vol(2, vec![lin, quad, symmetrize(&raw).unwrap()]);
        for _ in 0..100 {
            let x = rng::uniform_vec(&mut g, 2, -2.0, 2.0);
            let a = eval_volterra(&before, &x).unwrap();
            let b = eval_volterra(&after, &x).unwrap();
            let scale: f64 = raw.data().iter().map(|v| v.abs()).sum::<f64>()
                * x.iter().map(|v| v.abs()).fold(0.0, f64::max).powi(3);
            assert!((a - b).abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn random_is_deterministic_and_seed_sensitive() {
        let a = random_volterra(1, 2, 2, 1.0).unwrap();
        let b = random_volterra(1, 2, 2, 1.0).unwrap();
        assert_eq!(a, b);
        let c = random_volterra(2, 2, 2, 1.0).unwrap();
        assert_ne!(a, c);
        let big = random_volterra(1, 8, 3, 0.5).unwrap();
        assert_eq!(big.tensor(3).len(), 512);
        assert!(big
            .tensors()
            .iter()
            .all(|t| t.data().iter().all(|v| v.abs() <= 0.5)));
    }

    #[test]
    fn per_order_homogeneity() {
        let c = random_volterra(21, 4, 3, 1.0).unwrap();
        let mut g = rng::seeded(4);
        for _ in 0..20 {
            let x = rng::uniform_vec(&mut g, 4, -1.0, 1.0);
            for r in 1..=3 {
                let base = c.eval_order(r, &x).unwrap();
                for lam in [-2.0f64, 0.5, 3.0] {
                    let xs: Vec<f64> = x.iter().map(|v| lam * v).collect();
                    let got = c.eval_order(r, &xs).unwrap();
                    let want = lam.powi(r as i32) * base;
                    let scale = c.tensor(r).data().iter().map(|v| v.abs()).sum::<f64>()
                        * lam.abs().powi(r as i32);
                    assert!((got - want).abs() <= 1e-12 * scale, "r={r} lam={lam}");
                }
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = random_volterra(4, 3, 3, 1.0).unwrap();
        c.save(dir.path(), "target").unwrap();
        let back = VolterraCoefficients::load(dir.path(), "target").unwrap();
        assert_eq!(back, c);
        let m: VolterraManifest = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("target.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(m.files, vec!["target_h1.kvt", "target_h2.kvt", "target_h3.kvt"]);
    }
}
