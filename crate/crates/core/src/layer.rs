//! Convolutional layers whose filters are multi-kernel Volterra maps.
//!
//! Every output channel is one [`KvnnFilter`]: a linear atom, `n` quadratic
//! atoms and (at `p = 3`) `m` cubic atoms applied to each zero-padded input
//! patch. Patches are materialized as a row-major `L x d` matrix, so the
//! forward pass is one GEMM for all projections `x . w` followed by the
//! per-atom powers, and the backward pass is two more GEMMs plus a
//! scatter-add back onto the input.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, KvnnError, Result};
use crate::mkv::{eval_mk, init_mk, InitSpec, MKVolterraMap};
use crate::rng;
use crate::tensor::Tensor;

/// Kernel size, stride and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn square(c_in: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            c_in,
            kh: k,
            kw: k,
            stride,
            pad,
        }
    }

    /// Patch length `C_in * k_h * k_w`.
    pub fn patch_dim(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.kh == 0 || self.kw == 0 {
            return Err(KvnnError::InvalidArgument(
                "kernel extents and stride must be positive".into(),
            ));
        }
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if self.kh > ph || self.kw > pw {
            return Err(KvnnError::InvalidArgument(format!(
                "kernel {}x{} larger than padded input {ph}x{pw}",
                self.kh, self.kw
            )));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

/// Patch matrix: one row of length `d` per output location, row-major over
/// `(out_y, out_x)`. Row entries are ordered channel, kernel row, kernel column.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub rows: usize,
    pub dim: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub data: Vec<f64>,
}

impl Patches {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn input_hw(input: &Tensor, geom: &Geometry) -> Result<(usize, usize)> {
    if input.rank() != 3 {
        return Err(KvnnError::InvalidArgument(format!(
            "expected C x H x W input, got shape {:?}",
            input.shape()
        )));
    }
    check_dim(geom.c_in, input.shape()[0])?;
    Ok((input.shape()[1], input.shape()[2]))
}

pub fn extract_patches(input: &Tensor, geom: &Geometry) -> Result<Patches> {
    let (h, w) = input_hw(input, geom)?;
    let (oh, ow) = geom.output_size(h, w)?;
    let d = geom.patch_dim();
    let src = input.data();
    let mut data = vec![0.0; oh * ow * d];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut data[(oy * ow + ox) * d..(oy * ow + ox + 1) * d];
            let mut k = 0;
            for c in 0..geom.c_in {
                for ky in 0..geom.kh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    for kx in 0..geom.kw {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            row[k] = src[(c * h + iy as usize) * w + ix as usize];
                        }
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(Patches {
        rows: oh * ow,
        dim: d,
        out_h: oh,
        out_w: ow,
        data,
    })
}

/// Adjoint of [`extract_patches`]: scatter-add patch rows back onto a
/// `C_in x h x w` image.
pub fn scatter_patches(grad: &[f64], geom: &Geometry, h: usize, w: usize) -> Result<Tensor> {
    let (oh, ow) = geom.output_size(h, w)?;
    let d = geom.patch_dim();
    check_dim(oh * ow * d, grad.len())?;
    let mut out = Tensor::zeros(&[geom.c_in, h, w]);
    let dst = out.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &grad[(oy * ow + ox) * d..(oy * ow + ox + 1) * d];
            let mut k = 0;
            for c in 0..geom.c_in {
                for ky in 0..geom.kh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    for kx in 0..geom.kw {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            dst[(c * h + iy as usize) * w + ix as usize] += row[k];
                        }
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Row-major matrix view `(ptr offset, rows, cols)` described by strides.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn rowmajor(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c (m x n, row-major) = beta * c + a (m x k) * b (k x n)`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    let span = |mat: &Mat, r: usize, cc: usize| {
        if r == 0 || cc == 0 {
            0
        } else {
            (r as isize - 1) * mat.rs + (cc as isize - 1) * mat.cs + 1
        }
    };
    assert!(a.data.len() as isize >= span(&a, m, k));
    assert!(b.data.len() as isize >= span(&b, k, n));
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Structural hyperparameters of one filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub p: u32,
    pub n: usize,
    pub m: usize,
    #[serde(default)]
    pub include_bias: bool,
}

impl FilterConfig {
    pub fn new(p: u32, n: usize, m: usize, include_bias: bool) -> Result<Self> {
        let c = Self {
            p,
            n,
            m,
            include_bias,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.p {
            1 => self.n == 0 && self.m == 0,
            2 => self.n >= 1 && self.m == 0,
            3 => self.n >= 1 && self.m >= 1,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(KvnnError::InvalidArgument(format!(
                "invalid filter config p={} n={} m={} (p in 1..=3; n >= 1 iff p >= 2; m >= 1 iff p = 3)",
                self.p, self.n, self.m
            )))
        }
    }

    /// Atom counts per order `(1, n, m)` truncated at `p`.
    pub fn counts(&self) -> Vec<usize> {
        [1, self.n, self.m][..self.p as usize].to_vec()
    }

    pub fn atoms(&self) -> usize {
        1 + self.n + self.m
    }

    /// `(1 + n + m)(d + 1) + bias`.
    pub fn param_count(&self, d: usize) -> usize {
        self.atoms() * (d + 1) + usize::from(self.include_bias)
    }
}

/// One output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct KvnnFilter {
    pub map: MKVolterraMap,
    pub config: FilterConfig,
    pub bias: f64,
}

impl KvnnFilter {
    pub fn new(map: MKVolterraMap, config: FilterConfig) -> Result<Self> {
        config.validate()?;
        if map.counts() != config.counts() {
            return Err(KvnnError::InvalidArgument(format!(
                "map atom counts {:?} do not match config {:?}",
                map.counts(),
                config.counts()
            )));
        }
        Ok(Self {
            map,
            config,
            bias: 0.0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count(self.map.dim())
    }
}

/// `eval_mk(map, patch)` plus the bias when enabled.
pub fn filter_forward(filter: &KvnnFilter, patch: &[f64]) -> Result<f64> {
    let y = eval_mk(&filter.map, patch)?;
    Ok(if filter.config.include_bias {
        y + filter.bias
    } else {
        y
    })
}

/// Parallel filters sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct KvnnLayer {
    pub filters: Vec<KvnnFilter>,
    pub geometry: Geometry,
}

/// Analytic gradients of a scalar loss through a layer.
///
/// `params` follows the layer's canonical parameter order (see
/// [`KvnnLayer::params`]); `input` has the input's shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub params: Vec<f64>,
    pub input: Tensor,
}

/// Intermediate values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub patches: Patches,
    projections: Vec<f64>,
    in_h: usize,
    in_w: usize,
}

/// Flattened atoms of all filters, in parameter order.
struct Packed {
    centers: Vec<f64>,
    gammas: Vec<f64>,
    orders: Vec<u32>,
    owner: Vec<usize>,
}

impl KvnnLayer {
    pub fn new(filters: Vec<KvnnFilter>, geometry: Geometry) -> Result<Self> {
        if filters.is_empty() {
            return Err(KvnnError::InvalidArgument("layer needs at least one filter".into()));
        }
        for f in &filters {
            check_dim(geometry.patch_dim(), f.map.dim())?;
        }
        Ok(Self { filters, geometry })
    }

    /// Random layer; filter `c` is initialized from a stream derived from `seed`.
    pub fn random(
        seed: u64,
        geometry: Geometry,
        c_out: usize,
        config: FilterConfig,
        init: InitSpec,
    ) -> Result<Self> {
        config.validate()?;
        let d = geometry.patch_dim();
        let filters = (0..c_out)
            .map(|c| {
                let s = rng::sub_seed(seed, c as u64);
                KvnnFilter::new(init_mk(s, d, &config.counts(), init)?, config)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(filters, geometry)
    }

    pub fn c_out(&self) -> usize {
        self.filters.len()
    }

    pub fn param_count(&self) -> usize {
        self.filters.iter().map(|f| f.param_count()).sum()
    }

    /// Canonical flat parameters: filter by filter, map parameters then bias (if enabled).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for f in &self.filters {
            f.map.write_params(&mut out);
            if f.config.include_bias {
                out.push(f.bias);
            }
        }
        out
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        check_dim(self.param_count(), src.len())?;
        let mut k = 0;
        for f in &mut self.filters {
            k += f.map.read_params(&src[k..]);
            if f.config.include_bias {
                f.bias = src[k];
                k += 1;
            }
        }
        Ok(())
    }

    fn pack(&self) -> Packed {
        let d = self.geometry.patch_dim();
        let rows: usize = self.filters.iter().map(|f| f.map.atom_count()).sum();
        let mut p = Packed {
            centers: Vec::with_capacity(rows * d),
            gammas: Vec::with_capacity(rows),
            orders: Vec::with_capacity(rows),
            owner: Vec::with_capacity(rows),
        };
        for (c, f) in self.filters.iter().enumerate() {
            for b in f.map.branches() {
                for a in b.atoms() {
                    p.centers.extend_from_slice(a.center());
                    p.gammas.push(a.gamma());
                    p.orders.push(a.order());
                    p.owner.push(c);
                }
            }
        }
        p
    }

    pub fn forward_cached(&self, input: &Tensor) -> Result<(Tensor, LayerCache)> {
        let (h, w) = input_hw(input, &self.geometry)?;
        let patches = extract_patches(input, &self.geometry)?;
        let packed = self.pack();
        let (l, d, r) = (patches.rows, patches.dim, packed.gammas.len());
        let mut z = vec![0.0; l * r];
        gemm(
            l,
            d,
            r,
            Mat::rowmajor(&patches.data, d),
            Mat::transposed(&packed.centers, d),
            0.0,
            &mut z,
        );
        let c_out = self.c_out();
        let mut out = vec![0.0; c_out * l];
        for (c, f) in self.filters.iter().enumerate() {
            if f.config.include_bias {
                out[c * l..(c + 1) * l].fill(f.bias);
            }
        }
        for loc in 0..l {
            let zrow = &z[loc * r..(loc + 1) * r];
            for a in 0..r {
                out[packed.owner[a] * l + loc] += packed.gammas[a] * zrow[a].powi(packed.orders[a] as i32);
            }
        }
        let output = Tensor::new(vec![c_out, patches.out_h, patches.out_w], out)?;
        Ok((
            output,
            LayerCache {
                patches,
                projections: z,
                in_h: h,
                in_w: w,
            },
        ))
    }

    pub fn backward_cached(&self, cache: &LayerCache, upstream: &Tensor) -> Result<GradientBundle> {
        let patches = &cache.patches;
        let c_out = self.c_out();
        let l = patches.rows;
        if upstream.shape() != [c_out, patches.out_h, patches.out_w] {
            return Err(KvnnError::InvalidArgument(format!(
                "upstream gradient shape {:?} does not match output [{c_out}, {}, {}]",
                upstream.shape(),
                patches.out_h,
                patches.out_w
            )));
        }
        let g = upstream.data();
        let packed = self.pack();
        let (d, r) = (patches.dim, packed.gammas.len());
        let z = &cache.projections;
        let mut dz = vec![0.0; l * r];
        let mut dgamma = vec![0.0; r];
        for loc in 0..l {
            for a in 0..r {
                let gv = g[packed.owner[a] * l + loc];
                let zv = z[loc * r + a];
                let ord = packed.orders[a] as i32;
                let zr1 = zv.powi(ord - 1);
                dgamma[a] += gv * zr1 * zv;
                dz[loc * r + a] = gv * packed.gammas[a] * ord as f64 * zr1;
            }
        }
        // dC (r x d) = dZ^T (r x l) * P (l x d)
        let mut dcenters = vec![0.0; r * d];
        gemm(
            r,
            l,
            d,
            Mat::transposed(&dz, r),
            Mat::rowmajor(&patches.data, d),
            0.0,
            &mut dcenters,
        );
        // dP (l x d) = dZ (l x r) * C (r x d)
        let mut dp = vec![0.0; l * d];
        gemm(
            l,
            r,
            d,
            Mat::rowmajor(&dz, r),
            Mat::rowmajor(&packed.centers, d),
            0.0,
            &mut dp,
        );
        let input = scatter_patches(&dp, &self.geometry, cache.in_h, cache.in_w)?;

        let mut params = Vec::with_capacity(self.param_count());
        let mut a = 0;
        for (c, f) in self.filters.iter().enumerate() {
            for _ in 0..f.map.atom_count() {
                params.extend_from_slice(&dcenters[a * d..(a + 1) * d]);
                params.push(dgamma[a]);
                a += 1;
            }
            if f.config.include_bias {
                params.push(g[c * l..(c + 1) * l].iter().sum());
            }
        }
        Ok(GradientBundle { params, input })
    }
}

pub fn layer_forward(layer: &KvnnLayer, input: &Tensor) -> Result<Tensor> {
    Ok(layer.forward_cached(input)?.0)
}

/// Gradients of `sum(upstream * layer_forward(input))`.
pub fn layer_backward(layer: &KvnnLayer, input: &Tensor, upstream: &Tensor) -> Result<GradientBundle> {
    let (_, cache) = layer.forward_cached(input)?;
    layer.backward_cached(&cache, upstream)
}

/// Standard convolution with `C_out x d` weights, used for plain-conv
/// baselines and as the reference for the `p = 1` reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub c_out: usize,
    pub geometry: Geometry,
}

impl ConvLayer {
    pub fn new(weights: Vec<f64>, bias: Option<Vec<f64>>, c_out: usize, geometry: Geometry) -> Result<Self> {
        check_dim(c_out * geometry.patch_dim(), weights.len())?;
        if let Some(b) = &bias {
            check_dim(c_out, b.len())?;
        }
        Ok(Self {
            weights,
            bias,
            c_out,
            geometry,
        })
    }

    /// He-normal weights and zero bias.
    pub fn random(seed: u64, geometry: Geometry, c_out: usize, bias: bool) -> Self {
        let d = geometry.patch_dim();
        let mut g = rng::seeded(seed);
        let weights = rng::normal_vec(&mut g, c_out * d, (2.0 / d as f64).sqrt());
        Self {
            weights,
            bias: bias.then(|| vec![0.0; c_out]),
            c_out,
            geometry,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    /// Weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        if let Some(b) = &self.bias {
            v.extend_from_slice(b);
        }
        v
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        check_dim(self.param_count(), src.len())?;
        let nw = self.weights.len();
        self.weights.copy_from_slice(&src[..nw]);
        if let Some(b) = &mut self.bias {
            b.copy_from_slice(&src[nw..]);
        }
        Ok(())
    }

    pub fn forward_cached(&self, input: &Tensor) -> Result<(Tensor, LayerCache)> {
        let (h, w) = input_hw(input, &self.geometry)?;
        let patches = extract_patches(input, &self.geometry)?;
        let (l, d) = (patches.rows, patches.dim);
        let mut out = vec![0.0; self.c_out * l];
        if let Some(b) = &self.bias {
            for (c, bv) in b.iter().enumerate() {
                out[c * l..(c + 1) * l].fill(*bv);
            }
        }
        // Y (c_out x l) = W (c_out x d) * P^T (d x l)
        gemm(
            self.c_out,
            d,
            l,
            Mat::rowmajor(&self.weights, d),
            Mat::transposed(&patches.data, d),
            1.0,
            &mut out,
        );
        let output = Tensor::new(vec![self.c_out, patches.out_h, patches.out_w], out)?;
        Ok((
            output,
            LayerCache {
                patches,
                projections: Vec::new(),
                in_h: h,
                in_w: w,
            },
        ))
    }

    pub fn backward_cached(&self, cache: &LayerCache, upstream: &Tensor) -> Result<GradientBundle> {
        let patches = &cache.patches;
        let (l, d) = (patches.rows, patches.dim);
        if upstream.shape() != [self.c_out, patches.out_h, patches.out_w] {
            return Err(KvnnError::InvalidArgument(format!(
                "upstream gradient shape {:?} does not match conv output",
                upstream.shape()
            )));
        }
        let g = upstream.data();
        // dW (c_out x d) = G (c_out x l) * P (l x d)
        let mut params = vec![0.0; self.weights.len()];
        gemm(
            self.c_out,
            l,
            d,
            Mat::rowmajor(g, l),
            Mat::rowmajor(&patches.data, d),
            0.0,
            &mut params,
        );
        if self.bias.is_some() {
            params.extend((0..self.c_out).map(|c| g[c * l..(c + 1) * l].iter().sum::<f64>()));
        }
        // dP (l x d) = G^T (l x c_out) * W (c_out x d)
        let mut dp = vec![0.0; l * d];
        gemm(
            l,
            self.c_out,
            d,
            Mat::transposed(g, l),
            Mat::rowmajor(&self.weights, d),
            0.0,
            &mut dp,
        );
        let input = scatter_patches(&dp, &self.geometry, cache.in_h, cache.in_w)?;
        Ok(GradientBundle { params, input })
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(input)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mkv::{atoms_to_tensor, KernelAtom, OrderBranch};
    use crate::volterra::{eval_volterra, VolterraCoefficients};

    fn random_input(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut g = rng::seeded(seed);
        Tensor::new(vec![c, h, w], rng::normal_vec(&mut g, c * h * w, 1.0)).unwrap()
    }

    /// Per-location gather written independently of the production loop.
    fn naive_patch(input: &Tensor, geom: &Geometry, oy: usize, ox: usize) -> Vec<f64> {
        let (h, w) = (input.shape()[1] as isize, input.shape()[2] as isize);
        let mut v = Vec::new();
        for c in 0..geom.c_in {
            for ky in 0..geom.kh {
                for kx in 0..geom.kw {
                    let y = (oy * geom.stride) as isize + ky as isize - geom.pad as isize;
                    let x = (ox * geom.stride) as isize + kx as isize - geom.pad as isize;
                    v.push(if (0..h).contains(&y) && (0..w).contains(&x) {
                        input.get(&[c, y as usize, x as usize])
                    } else {
                        0.0
                    });
                }
            }
        }
        v
    }

    #[test]
    fn identity_patching() {
        let x = random_input(1, 2, 4, 3);
        let p = extract_patches(&x, &Geometry::square(2, 1, 1, 0)).unwrap();
        assert_eq!((p.rows, p.dim), (12, 2));
        assert_eq!(p.row(5), &[x.get(&[0, 1, 2]), x.get(&[1, 1, 2])]);
    }

    #[test]
    fn same_size_patching() {
        let x = random_input(2, 1, 5, 5);
        let p = extract_patches(&x, &Geometry::square(1, 3, 1, 1)).unwrap();
        assert_eq!((p.rows, p.dim, p.out_h, p.out_w), (25, 9, 5, 5));
        assert!(extract_patches(&x, &Geometry::square(1, 8, 1, 1)).is_err());
        assert!(extract_patches(&x, &Geometry::square(2, 3, 1, 1)).is_err());
    }

    #[test]
    fn checkerboard_matches_naive_gather() {
        let mut x = Tensor::zeros(&[2, 7, 6]);
        for c in 0..2 {
            for i in 0..7 {
                for j in 0..6 {
                    x.set(&[c, i, j], if (i + j + c) % 2 == 0 { 1.0 } else { -((i * 6 + j) as f64) });
                }
            }
        }
        for geom in [Geometry::square(2, 3, 1, 1), Geometry::square(2, 3, 2, 0), Geometry { c_in: 2, kh: 2, kw: 3, stride: 2, pad: 2 }] {
            let p = extract_patches(&x, &geom).unwrap();
            for oy in 0..p.out_h {
                for ox in 0..p.out_w {
                    assert_eq!(p.row(oy * p.out_w + ox), &naive_patch(&x, &geom, oy, ox)[..]);
                }
            }
        }
    }

    #[test]
    fn scatter_is_adjoint_of_extract() {
        let geom = Geometry::square(2, 3, 2, 1);
        let x = random_input(3, 2, 6, 5);
        let p = extract_patches(&x, &geom).unwrap();
        let mut g = rng::seeded(4);
        let q = rng::normal_vec(&mut g, p.data.len(), 1.0);
        let back = scatter_patches(&q, &geom, 6, 5).unwrap();
        let lhs: f64 = p.data.iter().zip(&q).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn filter_config_validation() {
        assert!(FilterConfig::new(1, 0, 0, false).is_ok());
        assert!(FilterConfig::new(2, 0, 0, false).is_err());
        assert!(FilterConfig::new(2, 1, 1, false).is_err());
        assert!(FilterConfig::new(3, 2, 0, false).is_err());
        assert!(FilterConfig::new(4, 1, 1, false).is_err());
        assert_eq!(FilterConfig::new(2, 1, 0, false).unwrap().param_count(9), 20);
        assert_eq!(FilterConfig::new(3, 2, 3, true).unwrap().param_count(27), 6 * 28 + 1);
    }

    #[test]
    fn filter_forward_cases() {
        let cfg = FilterConfig::new(1, 0, 0, false).unwrap();
        let map = init_mk(1, 4, &[1], InitSpec::default()).unwrap();
        let f = KvnnFilter::new(map.clone(), cfg).unwrap();
        let patch = [0.5, -1.0, 2.0, 0.25];
        let a = &map.branches()[0].atoms()[0];
        let conv: f64 = a.center().iter().zip(&patch).map(|(w, x)| w * x).sum::<f64>() * a.gamma();
        assert!((filter_forward(&f, &patch).unwrap() - conv).abs() < 1e-15);

        let cfg3 = FilterConfig::new(3, 2, 2, false).unwrap();
        let f3 = KvnnFilter::new(init_mk(2, 4, &cfg3.counts(), InitSpec::default()).unwrap(), cfg3).unwrap();
        assert_eq!(filter_forward(&f3, &[0.0; 4]).unwrap(), 0.0);
        let dense = crate::mkv::map_to_volterra(&f3.map).unwrap();
        let y = filter_forward(&f3, &patch).unwrap();
        let yd = eval_volterra(&dense, &patch).unwrap();
        assert!((y - yd).abs() <= 1e-12 * f3.map.magnitude(&patch));
        assert!(KvnnFilter::new(map, cfg3).is_err());
    }

    #[test]
    fn box_blur_from_linear_layer() {
        let geom = Geometry::square(1, 3, 1, 1);
        let atom = KernelAtom::new(1, vec![1.0 / 9.0; 9], 1.0).unwrap();
        let map = MKVolterraMap::new(9, vec![OrderBranch::new(1, 9, vec![atom]).unwrap()]).unwrap();
        let layer = KvnnLayer::new(vec![KvnnFilter::new(map, FilterConfig::new(1, 0, 0, false).unwrap()).unwrap()], geom).unwrap();
        let x = random_input(5, 1, 6, 6);
        let y = layer_forward(&layer, &x).unwrap();
        for i in 0..6usize {
            for j in 0..6usize {
                let mut s = 0.0;
                for di in -1i32..=1 {
                    for dj in -1i32..=1 {
                        let (a, b) = (i as i32 + di, j as i32 + dj);
                        if (0..6).contains(&a) && (0..6).contains(&b) {
                            s += x.get(&[0, a as usize, b as usize]);
                        }
                    }
                }
                assert!((y.get(&[0, i, j]) - s / 9.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn quadratic_only_layer_scales_by_four() {
        let geom = Geometry::square(2, 3, 1, 1);
        let mut layer = KvnnLayer::random(7, geom, 3, FilterConfig::new(2, 2, 0, false).unwrap(), InitSpec::default()).unwrap();
        for f in &mut layer.filters {
            f.map.branches_mut()[0].atoms_mut()[0].set_gamma(0.0);
        }
        let x = random_input(8, 2, 5, 5);
        let x2 = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let y = layer_forward(&layer, &x).unwrap();
        let y2 = layer_forward(&layer, &x2).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((4.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn layer_matches_per_location_oracle() {
        let geom = Geometry { c_in: 2, kh: 2, kw: 2, stride: 1, pad: 1 };
        let layer = KvnnLayer::random(9, geom, 3, FilterConfig::new(3, 2, 2, true).unwrap(), InitSpec::default()).unwrap();
        let x = random_input(10, 2, 4, 5);
        let y = layer_forward(&layer, &x).unwrap();
        let (oh, ow) = geom.output_size(4, 5).unwrap();
        for (c, f) in layer.filters.iter().enumerate() {
            let dense: VolterraCoefficients = crate::mkv::map_to_volterra(&f.map).unwrap();
            for oy in 0..oh {
                for ox in 0..ow {
                    let patch = naive_patch(&x, &geom, oy, ox);
                    let want = filter_forward(f, &patch).unwrap();
                    let got = y.get(&[c, oy, ox]);
                    let scale = f.map.magnitude(&patch) + f.bias.abs();
                    assert!((got - want).abs() <= 1e-12 * scale);
                    let via_tensor = eval_volterra(&dense, &patch).unwrap() + f.bias;
                    assert!((got - via_tensor).abs() <= 1e-10 * scale);
                }
            }
            assert!(atoms_to_tensor(&f.map.branches()[2]).is_ok());
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let geom = Geometry::square(1, 3, 1, 1);
        let layer = KvnnLayer::random(1, geom, 2, FilterConfig::new(3, 1, 1, true).unwrap(), InitSpec::default()).unwrap();
        let x = random_input(2, 1, 4, 4);
        let g = layer_backward(&layer, &x, &Tensor::zeros(&[2, 4, 4])).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert_eq!(g.params.len(), layer.param_count());
        assert!(layer_backward(&layer, &x, &Tensor::zeros(&[1, 4, 4])).is_err());
    }

    #[test]
    fn params_round_trip() {
        let geom = Geometry::square(2, 3, 1, 1);
        let layer = KvnnLayer::random(3, geom, 4, FilterConfig::new(2, 1, 0, true).unwrap(), InitSpec::default()).unwrap();
        assert_eq!(layer.param_count(), 4 * (2 * 19 + 1));
        let p = layer.params();
        let mut other = KvnnLayer::random(4, geom, 4, FilterConfig::new(2, 1, 0, true).unwrap(), InitSpec::default()).unwrap();
        other.set_params(&p).unwrap();
        assert_eq!(other, layer);
    }
}
