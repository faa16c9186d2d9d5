//! Learnable multi-kernel Volterra representation.
//!
//! A map is a sum of order branches; branch `r` holds atoms
//! `gamma_i * (x . w_i)^r`. Each atom is the rank-one symmetric tensor
//! `gamma_i * w_i^{(x)r}` in disguise, which is what [`atoms_to_tensor`]
//! materializes for comparison against the dense Volterra oracle, and what
//! [`fit_exact`] inverts.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, KvnnError, Result};
use crate::rng;
use crate::tensor::{
    abs_dot, dot, enumerate_multi_indices, monomial_count, monomial_eval, multinomial_coefficient,
    Tensor,
};
use crate::volterra::{VolterraCoefficients, ORACLE_MAX_DIM, ORACLE_MAX_ORDER};

/// Largest input dimension accepted by [`fit_exact`].
pub const FIT_MAX_DIM: usize = 6;
/// Condition number above which [`fit_exact`] resamples its centers.
pub const FIT_MAX_CONDITION: f64 = 1e10;
/// Resampling attempts before [`fit_exact`] gives up.
pub const FIT_MAX_RETRIES: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelAtom {
    order: u32,
    center: Vec<f64>,
    gamma: f64,
}

impl KernelAtom {
    pub fn new(order: u32, center: Vec<f64>, gamma: f64) -> Result<Self> {
        if order == 0 {
            return Err(KvnnError::InvalidArgument("atom order must be >= 1".into()));
        }
        if !gamma.is_finite() || center.iter().any(|v| !v.is_finite()) {
            return Err(KvnnError::NonFinite("atom parameters".into()));
        }
        Ok(Self {
            order,
            center,
            gamma,
        })
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn center_mut(&mut self) -> &mut [f64] {
        &mut self.center
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        self.gamma = gamma;
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Rounding scale of [`eval_atom`]: `|gamma| (|x| . |w|)^r`.
    pub fn magnitude(&self, x: &[f64]) -> f64 {
        self.gamma.abs() * abs_dot(x, &self.center).powi(self.order as i32)
    }
}

/// `gamma * (x . w)^r`.
pub fn eval_atom(atom: &KernelAtom, x: &[f64]) -> Result<f64> {
    check_dim(atom.dim(), x.len())?;
    Ok(atom.gamma * dot(x, &atom.center).powi(atom.order as i32))
}

/// All atoms of one order. A branch with no atoms marks a skipped order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderBranch {
    order: u32,
    dim: usize,
    atoms: Vec<KernelAtom>,
}

impl OrderBranch {
    pub fn new(order: u32, dim: usize, atoms: Vec<KernelAtom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(KvnnError::InvalidArgument(format!(
                "order-{order} branch needs at least one atom"
            )));
        }
        for a in &atoms {
            if a.order != order {
                return Err(KvnnError::InvalidArgument(format!(
                    "atom of order {} in order-{order} branch",
                    a.order
                )));
            }
            check_dim(dim, a.dim())?;
        }
        Ok(Self { order, dim, atoms })
    }

    pub fn skipped(order: u32, dim: usize) -> Self {
        Self {
            order,
            dim,
            atoms: Vec::new(),
        }
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atoms(&self) -> &[KernelAtom] {
        &self.atoms
    }

    pub fn atoms_mut(&mut self) -> &mut [KernelAtom] {
        &mut self.atoms
    }

    pub fn is_skipped(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(self
            .atoms
            .iter()
            .map(|a| a.gamma * dot(x, &a.center).powi(a.order as i32))
            .sum())
    }

    pub fn magnitude(&self, x: &[f64]) -> f64 {
        self.atoms.iter().map(|a| a.magnitude(x)).sum()
    }
}

/// One branch per order `1..=p`.
#[derive(Debug, Clone, PartialEq)]
pub struct MKVolterraMap {
    dim: usize,
    branches: Vec<OrderBranch>,
}

impl MKVolterraMap {
    pub fn new(dim: usize, branches: Vec<OrderBranch>) -> Result<Self> {
        if branches.is_empty() {
            return Err(KvnnError::InvalidArgument("map needs at least one order".into()));
        }
        for (k, b) in branches.iter().enumerate() {
            if b.order as usize != k + 1 {
                return Err(KvnnError::InvalidArgument(format!(
                    "branch {k} has order {}, expected {}",
                    b.order,
                    k + 1
                )));
            }
            check_dim(dim, b.dim)?;
        }
        Ok(Self { dim, branches })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_order(&self) -> usize {
        self.branches.len()
    }

    pub fn branches(&self) -> &[OrderBranch] {
        &self.branches
    }

    pub fn branches_mut(&mut self) -> &mut [OrderBranch] {
        &mut self.branches
    }

    pub fn branch(&self, r: usize) -> Result<&OrderBranch> {
        if r == 0 || r > self.branches.len() {
            return Err(KvnnError::InvalidArgument(format!(
                "order {r} outside 1..={}",
                self.branches.len()
            )));
        }
        Ok(&self.branches[r - 1])
    }

    /// Atom counts `M_1 .. M_p`.
    pub fn counts(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.len()).collect()
    }

    pub fn atom_count(&self) -> usize {
        self.branches.iter().map(|b| b.len()).sum()
    }

    /// Learnable scalars: `d + 1` per atom.
    pub fn param_count(&self) -> usize {
        self.atom_count() * (self.dim + 1)
    }

    /// Rounding scale for [`eval_mk`] at `x`, summed over atoms.
    pub fn magnitude(&self, x: &[f64]) -> f64 {
        self.branches.iter().map(|b| b.magnitude(x)).sum()
    }

    /// Parameters in canonical order: branch by branch, atom by atom,
    /// `center` then `gamma`.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for b in &self.branches {
            for a in &b.atoms {
                out.extend_from_slice(&a.center);
                out.push(a.gamma);
            }
        }
    }

    /// Inverse of [`write_params`](Self::write_params); returns the number of values consumed.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut k = 0;
        let d = self.dim;
        for b in &mut self.branches {
            for a in &mut b.atoms {
                a.center.copy_from_slice(&src[k..k + d]);
                a.gamma = src[k + d];
                k += d + 1;
            }
        }
        k
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut branches = Vec::new();
        for b in &self.branches {
            if b.is_skipped() {
                branches.push(BranchEntry {
                    order: b.order,
                    atoms: 0,
                    centers: None,
                    gammas: None,
                });
                continue;
            }
            let centers_name = format!("{stem}_r{}_centers.kvt", b.order);
            let gammas_name = format!("{stem}_r{}_gammas.kvt", b.order);
            let centers: Vec<f64> = b.atoms.iter().flat_map(|a| a.center.iter().copied()).collect();
            Tensor::new(vec![b.len(), self.dim], centers)?.save(dir.join(&centers_name))?;
            Tensor::vector(b.atoms.iter().map(|a| a.gamma).collect())?
                .save(dir.join(&gammas_name))?;
            branches.push(BranchEntry {
                order: b.order,
                atoms: b.len(),
                centers: Some(centers_name),
                gammas: Some(gammas_name),
            });
        }
        let manifest = MapManifest {
            d: self.dim,
            p: self.max_order(),
            branches,
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let m: MapManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        check_dim(m.p, m.branches.len())?;
        let mut branches = Vec::with_capacity(m.p);
        for e in &m.branches {
            let (Some(cn), Some(gn)) = (&e.centers, &e.gammas) else {
                branches.push(OrderBranch::skipped(e.order, m.d));
                continue;
            };
            let centers = Tensor::load(dir.join(cn))?;
            let gammas = Tensor::load(dir.join(gn))?;
            if centers.shape() != [e.atoms, m.d] || gammas.len() != e.atoms {
                return Err(KvnnError::Format(format!(
                    "branch {} payload shape does not match manifest",
                    e.order
                )));
            }
            let atoms = centers
                .data()
                .chunks(m.d)
                .zip(gammas.data())
                .map(|(c, &g)| KernelAtom::new(e.order, c.to_vec(), g))
                .collect::<Result<Vec<_>>>()?;
            branches.push(OrderBranch::new(e.order, m.d, atoms)?);
        }
        Self::new(m.d, branches)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BranchEntry {
    pub order: u32,
    pub atoms: usize,
    pub centers: Option<String>,
    pub gammas: Option<String>,
}

/// JSON manifest for a serialized map; payloads are KVT1 files next to it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MapManifest {
    pub d: usize,
    pub p: usize,
    pub branches: Vec<BranchEntry>,
}

pub fn eval_mk(map: &MKVolterraMap, x: &[f64]) -> Result<f64> {
    check_dim(map.dim, x.len())?;
    map.branches.iter().map(|b| b.eval(x)).sum()
}

/// Contribution of branch `r` alone.
pub fn eval_order(map: &MKVolterraMap, r: usize, x: &[f64]) -> Result<f64> {
    map.branch(r)?.eval(x)
}

/// `sum_i gamma_i w_i^{(x)r}` as a dense symmetric tensor.
pub fn atoms_to_tensor(branch: &OrderBranch) -> Result<Tensor> {
    let (d, r) = (branch.dim, branch.order as usize);
    if branch.is_skipped() {
        return Err(KvnnError::InvalidArgument("branch has no atoms".into()));
    }
    if d > ORACLE_MAX_DIM || r > ORACLE_MAX_ORDER {
        return Err(KvnnError::InvalidArgument(format!(
            "dense expansion limited to d <= {ORACLE_MAX_DIM}, r <= {ORACLE_MAX_ORDER}; got d={d} r={r}"
        )));
    }
    let mut out = Tensor::cube(d, r);
    let mut idx = vec![0usize; r];
    for flat in 0..out.len() {
        let mut rem = flat;
        for slot in idx.iter_mut().rev() {
            *slot = rem % d;
            rem /= d;
        }
        // Product over the sorted index tuple so every permutation of an
        // index gets a bit-identical value.
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        out.data_mut()[flat] = branch
            .atoms
            .iter()
            .map(|a| sorted.iter().fold(a.gamma, |acc, &i| acc * a.center[i]))
            .sum();
    }
    Ok(out)
}

/// Dense coefficients for every order of a map (skipped orders become zero).
pub fn map_to_volterra(map: &MKVolterraMap) -> Result<VolterraCoefficients> {
    let tensors = map
        .branches
        .iter()
        .map(|b| {
            if b.is_skipped() {
                Ok(Tensor::cube(map.dim, b.order as usize))
            } else {
                atoms_to_tensor(b)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    VolterraCoefficients::new(map.dim, tensors)
}

/// Diagnostics from [`fit_exact`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub atoms: usize,
    pub condition: f64,
    pub attempts: u64,
}

/// Exact atomic representation of a symmetric order-`r` coefficient tensor.
///
/// Draws `C(d + r - 1, r)` centers on the unit sphere, builds the square
/// system mapping atom coefficients to monomial coefficients
/// (`A[alpha][i] = multinomial(alpha) * w_i^alpha`) and solves it. Centers are
/// resampled with an incremented seed while the system's condition number
/// exceeds [`FIT_MAX_CONDITION`].
pub fn fit_exact(target: &Tensor, seed: u64) -> Result<(OrderBranch, FitInfo)> {
    let r = target.rank();
    let d = target.shape()[0];
    if target.shape().iter().any(|&s| s != d) {
        return Err(KvnnError::InvalidArgument("target must be cubical".into()));
    }
    if d > FIT_MAX_DIM || r > ORACLE_MAX_ORDER {
        return Err(KvnnError::InvalidArgument(format!(
            "fit_exact limited to d <= {FIT_MAX_DIM}, r <= {ORACLE_MAX_ORDER}; got d={d} r={r}"
        )));
    }
    let indices = enumerate_multi_indices(d, r as u32)?;
    let m = indices.len();
    debug_assert_eq!(m, monomial_count(d, r));
    let weights = indices
        .iter()
        .map(|a| multinomial_coefficient(a).map(|c| c as f64))
        .collect::<Result<Vec<_>>>()?;
    let rhs = DVector::from_iterator(
        m,
        indices
            .iter()
            .zip(&weights)
            .map(|(a, w)| w * target.get(&a.representative())),
    );

    let mut worst = 0.0f64;
    for attempt in 0..FIT_MAX_RETRIES {
        let mut g = rng::seeded(seed.wrapping_add(attempt));
        let centers: Vec<Vec<f64>> = (0..m).map(|_| rng::unit_sphere(&mut g, d)).collect();
        let mut design = DMatrix::zeros(m, m);
        for (row, (alpha, w)) in indices.iter().zip(&weights).enumerate() {
            for (col, c) in centers.iter().enumerate() {
                design[(row, col)] = w * monomial_eval(c, alpha)?;
            }
        }
        let sv = design.singular_values();
        let smin = sv.min();
        let cond = if smin > 0.0 { sv.max() / smin } else { f64::INFINITY };
        worst = worst.max(cond);
        if cond > FIT_MAX_CONDITION {
            continue;
        }
        let gamma = design
            .lu()
            .solve(&rhs)
            .ok_or_else(|| KvnnError::Singular("atom design matrix".into()))?;
        let atoms = centers
            .into_iter()
            .zip(gamma.iter())
            .map(|(c, &g)| KernelAtom::new(r as u32, c, g))
            .collect::<Result<Vec<_>>>()?;
        return Ok((
            OrderBranch::new(r as u32, d, atoms)?,
            FitInfo {
                atoms: m,
                condition: cond,
                attempts: attempt + 1,
            },
        ));
    }
    Err(KvnnError::IllConditioned(format!(
        "no well-conditioned center set after {FIT_MAX_RETRIES} attempts (d={d}, r={r}, worst condition {worst:.3e})"
    )))
}

/// Fit every order of a dense Volterra target; returns the map and per-order info.
pub fn fit_exact_all(
    target: &VolterraCoefficients,
    seed: u64,
) -> Result<(MKVolterraMap, Vec<FitInfo>)> {
    let mut branches = Vec::with_capacity(target.order());
    let mut infos = Vec::with_capacity(target.order());
    for (k, h) in target.tensors().iter().enumerate() {
        let (b, info) = fit_exact(h, seed.wrapping_add(1000 * k as u64))?;
        branches.push(b);
        infos.push(info);
    }
    Ok((MKVolterraMap::new(target.dim(), branches)?, infos))
}

/// Least-squares atom coefficients for fixed centers of one order, from samples.
pub fn fit_coefficients_lsq(
    order: u32,
    centers: Vec<Vec<f64>>,
    xs: &[Vec<f64>],
    ys: &[f64],
) -> Result<OrderBranch> {
    check_dim(xs.len(), ys.len())?;
    let d = centers.first().map_or(0, |c| c.len());
    let (n, m) = (xs.len(), centers.len());
    if n < m {
        return Err(KvnnError::InvalidArgument(format!(
            "need at least {m} samples for {m} atoms, got {n}"
        )));
    }
    let mut a = DMatrix::zeros(n, m);
    for (i, x) in xs.iter().enumerate() {
        check_dim(d, x.len())?;
        for (j, c) in centers.iter().enumerate() {
            a[(i, j)] = dot(x, c).powi(order as i32);
        }
    }
    let svd = a.svd(true, true);
    let gamma = svd
        .solve(&DVector::from_column_slice(ys), 1e-12)
        .map_err(|e| KvnnError::Singular(e.to_string()))?;
    let atoms = centers
        .into_iter()
        .zip(gamma.iter())
        .map(|(c, &g)| KernelAtom::new(order, c, g))
        .collect::<Result<Vec<_>>>()?;
    OrderBranch::new(order, d, atoms)
}

/// Initialization knobs for [`init_mk`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    /// Multiplier on the center standard deviation `1 / sqrt(d)`.
    pub gain: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self { gain: 1.0 }
    }
}

fn double_factorial_odd(r: u32) -> f64 {
    (1..=r).map(|k| (2 * k - 1) as f64).product()
}

/// Random map with `counts[r-1]` atoms of order `r` (zero marks a skipped order).
///
/// Centers are `N(0, gain^2 / d)` so each projection `x . w` has variance
/// `gain^2` for unit-variance inputs; coefficients are
/// `N(0, 1 / (M_r (2r-1)!!))`, which puts every branch's output at unit RMS
/// when `gain = 1`.
pub fn init_mk(seed: u64, d: usize, counts: &[usize], init: InitSpec) -> Result<MKVolterraMap> {
    if d == 0 {
        return Err(KvnnError::InvalidArgument("dimension must be >= 1".into()));
    }
    let mut g = rng::seeded(seed);
    let center_std = init.gain / (d as f64).sqrt();
    let branches = counts
        .iter()
        .enumerate()
        .map(|(k, &mr)| {
            let r = k as u32 + 1;
            if mr == 0 {
                return Ok(OrderBranch::skipped(r, d));
            }
            let gamma_std = 1.0 / (mr as f64 * double_factorial_odd(r)).sqrt();
            let atoms = (0..mr)
                .map(|_| {
                    let c = rng::normal_vec(&mut g, d, center_std);
                    let gm = gamma_std * rng::normal(&mut g);
                    KernelAtom::new(r, c, gm)
                })
                .collect::<Result<Vec<_>>>()?;
            OrderBranch::new(r, d, atoms)
        })
        .collect::<Result<Vec<_>>>()?;
    MKVolterraMap::new(d, branches)
}
