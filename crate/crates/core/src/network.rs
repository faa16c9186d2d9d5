//! Declarative layer stacks: JSON topology, parameter/FLOP accounting, and
//! the runtime network used by training and evaluation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, KvnnError, Result};
use crate::layer::{ConvLayer, FilterConfig, Geometry, KvnnLayer, LayerCache};
use crate::mkv::InitSpec;
use crate::rng;
use crate::tensor::Tensor;

fn default_stride() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// One entry of a topology file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum BlockSpec {
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        pad: Option<usize>,
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default)]
        batchnorm: bool,
        #[serde(default)]
        relu: bool,
    },
    Kvnn {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        pad: Option<usize>,
        p: u32,
        #[serde(default)]
        n: usize,
        #[serde(default)]
        m: usize,
        #[serde(default)]
        bias: bool,
        #[serde(default)]
        batchnorm: bool,
    },
}

impl BlockSpec {
    pub fn c_in(&self) -> usize {
        match self {
            BlockSpec::Conv { c_in, .. } | BlockSpec::Kvnn { c_in, .. } => *c_in,
        }
    }

    pub fn c_out(&self) -> usize {
        match self {
            BlockSpec::Conv { c_out, .. } | BlockSpec::Kvnn { c_out, .. } => *c_out,
        }
    }

    /// Padding defaults to `kernel / 2` ("same" output for odd kernels).
    pub fn geometry(&self) -> Geometry {
        match self {
            BlockSpec::Conv {
                c_in,
                kernel,
                stride,
                pad,
                ..
            }
            | BlockSpec::Kvnn {
                c_in,
                kernel,
                stride,
                pad,
                ..
            } => Geometry::square(*c_in, *kernel, *stride, pad.unwrap_or(kernel / 2)),
        }
    }

    fn batchnorm(&self) -> bool {
        match self {
            BlockSpec::Conv { batchnorm, .. } | BlockSpec::Kvnn { batchnorm, .. } => *batchnorm,
        }
    }

    /// Exact learnable scalars, including batch-norm affine pairs.
    pub fn param_count(&self) -> Result<usize> {
        let d = self.geometry().patch_dim();
        let bn = if self.batchnorm() { 2 * self.c_out() } else { 0 };
        Ok(match self {
            BlockSpec::Conv { c_out, bias, .. } => c_out * d + if *bias { *c_out } else { 0 } + bn,
            BlockSpec::Kvnn {
                c_out, p, n, m, bias, ..
            } => c_out * FilterConfig::new(*p, *n, *m, *bias)?.param_count(d) + bn,
        })
    }

    /// FLOPs for one output location of one output channel.
    ///
    /// A length-`d` dot product is `2d - 1` FLOPs (d multiplies, d - 1 adds).
    /// Conv: dot + bias add. kVNN filter with `A = 1 + n + m` atoms: `A` dots,
    /// `r - 1` power multiplies per order-`r` atom, `A` gamma multiplies,
    /// `A - 1` branch/atom additions, plus bias add. Batch norm adds 2.
    /// ReLU is not counted.
    pub fn flops_per_output(&self) -> Result<u64> {
        let d = self.geometry().patch_dim() as u64;
        let bn = if self.batchnorm() { 2 } else { 0 };
        Ok(match self {
            BlockSpec::Conv { bias, .. } => 2 * d - 1 + u64::from(*bias) + bn,
            BlockSpec::Kvnn {
                p, n, m, bias, ..
            } => {
                let cfg = FilterConfig::new(*p, *n, *m, *bias)?;
                let atoms = cfg.atoms() as u64;
                let powers = (cfg.n + 2 * cfg.m) as u64;
                atoms * (2 * d - 1) + powers + atoms + (atoms - 1) + u64::from(*bias) + bn
            }
        })
    }
}

/// Formula string printed next to FLOP counts.
pub const FLOP_CONVENTION: &str = "dot(d) = 2d-1 FLOPs (1 MAC = 2 FLOPs, first add into zero elided); \
conv/location = dot + bias; kvnn/location = A*dot + sum_atoms(r-1) + A (gamma) + (A-1) (sums) + bias, A = 1+n+m; \
batchnorm = 2/element; relu = 0";

/// A network description: input channels, optional residual output
/// (`prediction = input - body(input)`), and an ordered list of blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default)]
    pub name: Option<String>,
    pub input_channels: usize,
    #[serde(default)]
    pub residual: bool,
    pub blocks: Vec<BlockSpec>,
}

impl Topology {
    pub fn from_json(s: &str) -> Result<Self> {
        let t: Topology = serde_json::from_str(s).map_err(|e| {
            KvnnError::Format(format!("topology: {e}"))
        })?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&crate::error::read_to_string(path.as_ref())?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut c = self.input_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.c_in() != c {
                return Err(KvnnError::InvalidArgument(format!(
                    "block {i} expects {} input channels but receives {c}",
                    b.c_in()
                )));
            }
            if b.c_out() == 0 {
                return Err(KvnnError::InvalidArgument(format!("block {i} has no outputs")));
            }
            b.param_count()?;
            c = b.c_out();
        }
        if self.residual && !self.blocks.is_empty() && c != self.input_channels {
            return Err(KvnnError::InvalidArgument(
                "residual output needs as many output channels as input channels".into(),
            ));
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        self.blocks.last().map_or(self.input_channels, |b| b.c_out())
    }

    /// DnCNN: conv+ReLU, `depth - 2` x (conv+BN+ReLU), conv; residual output.
    pub fn dncnn(depth: usize, channels: usize, image_channels: usize) -> Self {
        let mut blocks = vec![BlockSpec::Conv {
            c_in: image_channels,
            c_out: channels,
            kernel: 3,
            stride: 1,
            pad: Some(1),
            bias: true,
            batchnorm: false,
            relu: true,
        }];
        for _ in 0..depth.saturating_sub(2) {
            blocks.push(BlockSpec::Conv {
                c_in: channels,
                c_out: channels,
                kernel: 3,
                stride: 1,
                pad: Some(1),
                bias: true,
                batchnorm: true,
                relu: true,
            });
        }
        blocks.push(BlockSpec::Conv {
            c_in: channels,
            c_out: image_channels,
            kernel: 3,
            stride: 1,
            pad: Some(1),
            bias: true,
            batchnorm: false,
            relu: false,
        });
        Self {
            name: Some(format!("dncnn{depth}")),
            input_channels: image_channels,
            residual: true,
            blocks,
        }
    }

    /// Stack of `depth` 3x3 kVNN blocks (no external activations), residual output.
    pub fn kvnn_stack(depth: usize, channels: usize, image_channels: usize, p: u32, n: usize, m: usize) -> Self {
        let blocks = (0..depth)
            .map(|i| BlockSpec::Kvnn {
                c_in: if i == 0 { image_channels } else { channels },
                c_out: if i + 1 == depth { image_channels } else { channels },
                kernel: 3,
                stride: 1,
                pad: Some(1),
                p,
                n,
                m,
                bias: false,
                batchnorm: false,
            })
            .collect();
        Self {
            name: Some(format!("kvnn{depth}_p{p}")),
            input_channels: image_channels,
            residual: true,
            blocks,
        }
    }

    /// Plain conv+ReLU stack (no batch norm), residual output.
    pub fn conv_stack(depth: usize, channels: usize, image_channels: usize) -> Self {
        let blocks = (0..depth)
            .map(|i| BlockSpec::Conv {
                c_in: if i == 0 { image_channels } else { channels },
                c_out: if i + 1 == depth { image_channels } else { channels },
                kernel: 3,
                stride: 1,
                pad: Some(1),
                bias: true,
                batchnorm: false,
                relu: i + 1 != depth,
            })
            .collect();
        Self {
            name: Some(format!("conv{depth}")),
            input_channels: image_channels,
            residual: true,
            blocks,
        }
    }
}

pub fn count_params(topology: &Topology) -> Result<usize> {
    topology.validate()?;
    topology.blocks.iter().map(|b| b.param_count()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub total: u64,
    pub per_block: Vec<u64>,
    pub input_hw: (usize, usize),
    pub convention: String,
}

impl FlopReport {
    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }
}

/// FLOPs of one forward pass on a `h x w` input (residual subtraction included).
pub fn count_flops(topology: &Topology, h: usize, w: usize) -> Result<FlopReport> {
    topology.validate()?;
    let (mut ch, mut cw) = (h, w);
    let mut per_block = Vec::with_capacity(topology.blocks.len());
    for b in &topology.blocks {
        let (oh, ow) = b.geometry().output_size(ch, cw)?;
        per_block.push(b.flops_per_output()? * (b.c_out() * oh * ow) as u64);
        (ch, cw) = (oh, ow);
    }
    let mut total: u64 = per_block.iter().sum();
    if topology.residual && !topology.blocks.is_empty() {
        total += (topology.input_channels * h * w) as u64;
    }
    let mut convention = FLOP_CONVENTION.to_string();
    let _ = write!(convention, "; residual subtraction = 1/element; input {h}x{w}");
    Ok(FlopReport {
        total,
        per_block,
        input_hw: (h, w),
        convention,
    })
}

/// A trainable block.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { layer: ConvLayer, relu: bool },
    Kvnn(KvnnLayer),
}

impl Layer {
    pub fn params(&self) -> Vec<f64> {
        match self {
            Layer::Conv { layer, .. } => layer.params(),
            Layer::Kvnn(l) => l.params(),
        }
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        match self {
            Layer::Conv { layer, .. } => layer.set_params(src),
            Layer::Kvnn(l) => l.set_params(src),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv { layer, .. } => layer.param_count(),
            Layer::Kvnn(l) => l.param_count(),
        }
    }

    pub fn c_out(&self) -> usize {
        match self {
            Layer::Conv { layer, .. } => layer.c_out,
            Layer::Kvnn(l) => l.c_out(),
        }
    }

    /// Flat parameter indices owned by output channel `c`.
    pub fn filter_param_indices(&self, c: usize) -> Vec<usize> {
        match self {
            Layer::Conv { layer, .. } => {
                let d = layer.geometry.patch_dim();
                let mut v: Vec<usize> = (c * d..(c + 1) * d).collect();
                if layer.bias.is_some() {
                    v.push(layer.c_out * d + c);
                }
                v
            }
            Layer::Kvnn(l) => {
                let start: usize = l.filters[..c].iter().map(|f| f.param_count()).sum();
                (start..start + l.filters[c].param_count()).collect()
            }
        }
    }
}

/// Per-layer state kept by [`Network::forward_cached`].
#[derive(Debug, Clone)]
pub struct NetworkCache {
    caches: Vec<(LayerCache, Option<Tensor>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub topology: Topology,
    pub layers: Vec<Layer>,
}

impl Network {
    /// Build with random initialization; block `i` draws from a stream derived from `(seed, i)`.
    pub fn build(topology: &Topology, seed: u64, init: InitSpec) -> Result<Self> {
        topology.validate()?;
        let layers = topology
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                if b.batchnorm() {
                    return Err(KvnnError::InvalidArgument(format!(
                        "block {i}: batch normalization is supported for counting only"
                    )));
                }
                let s = rng::sub_seed(seed, i as u64);
                Ok(match b {
                    BlockSpec::Conv {
                        c_out, bias, relu, ..
                    } => Layer::Conv {
                        layer: ConvLayer::random(s, b.geometry(), *c_out, *bias),
                        relu: *relu,
                    },
                    BlockSpec::Kvnn {
                        c_out, p, n, m, bias, ..
                    } => Layer::Kvnn(KvnnLayer::random(
                        s,
                        b.geometry(),
                        *c_out,
                        FilterConfig::new(*p, *n, *m, *bias)?,
                        init,
                    )?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            topology: topology.clone(),
            layers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn params(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.params()).collect()
    }

    pub fn set_params(&mut self, params: &[Vec<f64>]) -> Result<()> {
        check_dim(self.layers.len(), params.len())?;
        for (l, p) in self.layers.iter_mut().zip(params) {
            l.set_params(p)?;
        }
        Ok(())
    }

    fn residual(&self) -> bool {
        self.topology.residual && !self.layers.is_empty()
    }

    /// `topology.json` plus one flat `layer_XX.kvt` parameter vector per block.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("topology.json"), self.topology.to_json())?;
        for (i, l) in self.layers.iter().enumerate() {
            Tensor::vector(l.params())?.save(dir.join(format!("layer_{i:02}.kvt")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let topology = Topology::load(dir.join("topology.json"))?;
        let mut net = Self::build(&topology, 0, InitSpec::default())?;
        for (i, l) in net.layers.iter_mut().enumerate() {
            let t = Tensor::load(dir.join(format!("layer_{i:02}.kvt")))?;
            l.set_params(t.data())?;
        }
        Ok(net)
    }

    pub fn forward_cached(&self, input: &Tensor) -> Result<(Tensor, NetworkCache)> {
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache, pre) = match layer {
                Layer::Conv { layer, relu } => {
                    let (y, c) = layer.forward_cached(&x)?;
                    if *relu {
                        let mut a = y.clone();
                        a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                        (a, c, Some(y))
                    } else {
                        (y, c, None)
                    }
                }
                Layer::Kvnn(l) => {
                    let (y, c) = l.forward_cached(&x)?;
                    (y, c, None)
                }
            };
            caches.push((cache, pre));
            x = y;
        }
        if self.residual() {
            let out: Vec<f64> = input.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
            x = Tensor::new(input.shape().to_vec(), out)?;
        }
        if !x.all_finite() {
            return Err(KvnnError::NonFinite("network output".into()));
        }
        Ok((x, NetworkCache { caches }))
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(input)?.0)
    }

    /// Per-layer parameter gradients and the input gradient of
    /// `sum(upstream * forward(input))`.
    pub fn backward(&self, cache: &NetworkCache, upstream: &Tensor) -> Result<(Vec<Vec<f64>>, Tensor)> {
        let mut g = upstream.clone();
        let residual = self.residual();
        if residual {
            g.data_mut().iter_mut().for_each(|v| *v = -*v);
        }
        let mut grads = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (lc, pre) = &cache.caches[i];
            let bundle = match layer {
                Layer::Conv { layer, .. } => {
                    if let Some(pre) = pre {
                        for (gv, pv) in g.data_mut().iter_mut().zip(pre.data()) {
                            if *pv <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                    }
                    layer.backward_cached(lc, &g)?
                }
                Layer::Kvnn(l) => l.backward_cached(lc, &g)?,
            };
            grads[i] = bundle.params;
            g = bundle.input;
        }
        if residual {
            for (gv, uv) in g.data_mut().iter_mut().zip(upstream.data()) {
                *gv += uv;
            }
        }
        Ok((grads, g))
    }
}
