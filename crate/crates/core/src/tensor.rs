//! Dense row-major tensors, multi-index enumeration and multinomial arithmetic.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{check_dim, KvnnError, Result};

/// Magic bytes opening every KVT1 tensor file.
pub const KVT_MAGIC: &[u8; 4] = b"KVT1";

/// Largest degree accepted by [`multinomial_coefficient`]; `20!` still fits in a `u64`.
pub const MAX_MULTINOMIAL_DEGREE: u32 = 20;

/// Dense row-major array of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(KvnnError::InvalidArgument(format!(
                "shape entries must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        check_dim(n, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(KvnnError::NonFinite(format!("tensor entry {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(shape.iter().all(|&s| s > 0), "zero-sized axis in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Rank-1 tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Cubical tensor with `rank` axes of extent `dim`.
    pub fn cube(dim: usize, rank: usize) -> Self {
        Self::zeros(&vec![dim; rank.max(1)])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat offset of a multi-dimensional index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &s)| {
                debug_assert!(i < s);
                acc * s + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        check_dim(self.data.len(), n)?;
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn write_kvt<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(KVT_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &s in &self.shape {
            let s = u32::try_from(s)
                .map_err(|_| KvnnError::Format(format!("axis extent {s} exceeds u32")))?;
            w.write_all(&s.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_kvt<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != KVT_MAGIC {
            return Err(KvnnError::Format("missing KVT1 magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let rank = u32::from_le_bytes(word) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(KvnnError::Format("trailing bytes after KVT1 payload".into()));
        }
        Self::new(shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_kvt(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_kvt(std::io::BufReader::new(f))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dot product of absolute values; the natural rounding scale for `dot(a, b)`.
pub fn abs_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x * y).abs()).sum()
}

/// Exponent vector `alpha` of a monomial `x^alpha`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex {
    alpha: Vec<u32>,
}

impl MultiIndex {
    pub fn new(alpha: Vec<u32>) -> Self {
        Self { alpha }
    }

    pub fn alpha(&self) -> &[u32] {
        &self.alpha
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn degree(&self) -> u32 {
        self.alpha.iter().sum()
    }

    /// A sorted index tuple `(i_1 <= ... <= i_r)` whose exponent pattern is `alpha`.
    pub fn representative(&self) -> Vec<usize> {
        self.alpha
            .iter()
            .enumerate()
            .flat_map(|(j, &a)| std::iter::repeat_n(j, a as usize))
            .collect()
    }

    /// Exponent pattern of an index tuple over `dim` coordinates.
    pub fn from_indices(dim: usize, indices: &[usize]) -> Self {
        let mut alpha = vec![0u32; dim];
        for &i in indices {
            alpha[i] += 1;
        }
        Self { alpha }
    }
}

/// Binomial coefficient `C(n, k)` in exact arithmetic.
pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of degree-`r` monomials in `d` variables, `C(d + r - 1, r)`.
pub fn monomial_count(d: usize, r: usize) -> usize {
    binomial((d + r - 1) as u64, r as u64) as usize
}

/// All multi-indices in `d` variables with total degree `r`.
///
/// Ordering is descending lexicographic on the exponent vector, so for
/// `d = 2, r = 2` the result is `(2,0), (1,1), (0,2)`. Every feature-map
/// vector in the crate uses this order.
pub fn enumerate_multi_indices(d: usize, r: u32) -> Result<Vec<MultiIndex>> {
    if d == 0 {
        return Err(KvnnError::InvalidArgument(
            "multi-index dimension must be at least 1".into(),
        ));
    }
    let mut out = Vec::with_capacity(monomial_count(d, r as usize));
    let mut current = vec![0u32; d];
    fill_indices(&mut current, 0, r, &mut out);
    Ok(out)
}

fn fill_indices(current: &mut [u32], pos: usize, remaining: u32, out: &mut Vec<MultiIndex>) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(MultiIndex::new(current.to_vec()));
        return;
    }
    for a in (0..=remaining).rev() {
        current[pos] = a;
        fill_indices(current, pos + 1, remaining - a, out);
    }
    current[pos] = 0;
}

/// `r! / (alpha_1! ... alpha_d!)` for `r = |alpha|`.
pub fn multinomial_coefficient(m: &MultiIndex) -> Result<u64> {
    let r = m.degree();
    if r > MAX_MULTINOMIAL_DEGREE {
        return Err(KvnnError::Overflow(format!(
            "multinomial degree {r} exceeds guard {MAX_MULTINOMIAL_DEGREE}"
        )));
    }
    // Product of binomials C(a_1, a_1) C(a_1 + a_2, a_2) ...; each partial fits in u64.
    let mut acc = 1u64;
    let mut seen = 0u64;
    for &a in m.alpha() {
        seen += a as u64;
        acc *= binomial(seen, a as u64);
    }
    Ok(acc)
}

/// `x^alpha = x_1^{alpha_1} ... x_d^{alpha_d}`.
pub fn monomial_eval(x: &[f64], m: &MultiIndex) -> Result<f64> {
    check_dim(m.dim(), x.len())?;
    Ok(x.iter()
        .zip(m.alpha())
        .map(|(&v, &a)| v.powi(a as i32))
        .product())
}
