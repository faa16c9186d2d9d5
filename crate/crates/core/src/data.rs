//! Synthetic grayscale images, additive white Gaussian noise and PGM files.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KvnnError, Result};
use crate::parallel;
use crate::rng;
use crate::tensor::Tensor;

pub const MIN_IMAGE_SIZE: usize = 16;

/// Single-channel images with values in `[0, 1]`, shape `1 x size x size`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub images: Vec<Tensor>,
    pub names: Vec<String>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn synth_image(seed: u64, index: usize, size: usize) -> Tensor {
    let mut g = rng::derived(seed, index as u64);
    let n = size as f64;
    let a = g.random_range(0.25..0.75);
    let (bx, by) = (g.random_range(-0.3..0.3), g.random_range(-0.3..0.3));
    let mut img: Vec<f64> = (0..size * size)
        .map(|k| {
            let (i, j) = ((k / size) as f64 / n, (k % size) as f64 / n);
            a + bx * j + by * i
        })
        .collect();

    // Edge: a random half-plane shifted up or down.
    let theta = g.random_range(0.0..PI);
    let (ex, ey) = (theta.cos(), theta.sin());
    let c = g.random_range(0.3..0.7) * (ex.abs() + ey.abs());
    let step = g.random_range(0.15..0.35) * if g.random_bool(0.5) { 1.0 } else { -1.0 };
    for (k, v) in img.iter_mut().enumerate() {
        let (i, j) = ((k / size) as f64 / n, (k % size) as f64 / n);
        if ex * j + ey * i > c {
            *v += step;
        }
    }

    // Flat rectangles.
    for _ in 0..g.random_range(1..=3) {
        let (h, w) = (g.random_range(size / 8..size / 2), g.random_range(size / 8..size / 2));
        let (top, left) = (g.random_range(0..size - h), g.random_range(0..size - w));
        let level = g.random_range(0.0..1.0);
        for i in top..top + h {
            img[i * size + left..i * size + left + w].fill(level);
        }
    }

    // Oriented sinusoidal texture inside a disc.
    let amp = g.random_range(0.05..0.15);
    let freq = g.random_range(2.0..8.0) * 2.0 * PI;
    let phi = g.random_range(0.0..PI);
    let (cx, cy, rad) = (g.random_range(0.2..0.8), g.random_range(0.2..0.8), g.random_range(0.2..0.5));
    for (k, v) in img.iter_mut().enumerate() {
        let (i, j) = ((k / size) as f64 / n, (k % size) as f64 / n);
        if (i - cy).powi(2) + (j - cx).powi(2) < rad * rad {
            *v += amp * (freq * (phi.cos() * j + phi.sin() * i)).sin();
        }
    }

    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(vec![1, size, size], img).expect("finite synthetic image")
}

/// Reproducible images mixing gradients, edges, flat rectangles and textures.
/// Image `i` depends only on `(seed, i)`.
pub fn gen_synthetic_images(seed: u64, count: usize, size: usize) -> Result<ImageSet> {
    if size < MIN_IMAGE_SIZE {
        return Err(KvnnError::InvalidArgument(format!(
            "image size must be >= {MIN_IMAGE_SIZE}, got {size}"
        )));
    }
    let images = parallel::map_indexed(count, |i| synth_image(seed, i, size));
    let names = (0..count).map(|i| format!("synth_{seed}_{i:04}")).collect();
    Ok(ImageSet { images, names })
}

/// Noise level on the 0-255 scale; applied to `[0, 1]` data as `sigma / 255`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum NoiseLevel {
    Fixed { sigma: f64 },
    Range { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub level: NoiseLevel,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn fixed(sigma: f64, seed: u64) -> Self {
        Self {
            level: NoiseLevel::Fixed { sigma },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.level {
            NoiseLevel::Fixed { sigma } => sigma >= 0.0 && sigma.is_finite(),
            NoiseLevel::Range { lo, hi } => lo >= 0.0 && lo < hi && hi.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(KvnnError::InvalidArgument(format!("invalid noise spec {:?}", self.level)))
        }
    }
}

/// `y = x + N(0, (sigma/255)^2)` per element, no clamping. In range mode each
/// item draws its own sigma. Item `i` uses a stream derived from `(seed, i)`.
/// Returns the noisy items and the sigma (0-255 scale) used for each.
pub fn add_awgn(items: &[Tensor], spec: &NoiseSpec) -> Result<(Vec<Tensor>, Vec<f64>)> {
    spec.validate()?;
    let out = parallel::map_indexed(items.len(), |i| {
        let mut g = rng::derived(spec.seed, i as u64);
        let sigma = match spec.level {
            NoiseLevel::Fixed { sigma } => sigma,
            NoiseLevel::Range { lo, hi } => g.random_range(lo..hi),
        };
        let x = &items[i];
        let data = if sigma == 0.0 {
            x.data().to_vec()
        } else {
            let s = sigma / 255.0;
            x.data().iter().map(|v| v + s * rng::normal(&mut g)).collect()
        };
        (Tensor::new(x.shape().to_vec(), data), sigma)
    });
    let mut noisy = Vec::with_capacity(out.len());
    let mut sigmas = Vec::with_capacity(out.len());
    for (t, s) in out {
        noisy.push(t?);
        sigmas.push(s);
    }
    Ok((noisy, sigmas))
}

/// `count` random `size x size` crops.
pub fn random_patches(images: &[Tensor], size: usize, count: usize, seed: u64) -> Result<Vec<Tensor>> {
    if images.is_empty() {
        return Err(KvnnError::InvalidArgument("no images to crop".into()));
    }
    let mut g = rng::derived(seed, 0x9A7C);
    (0..count)
        .map(|_| {
            let img = &images[g.random_range(0..images.len())];
            let (c, h, w) = match img.shape() {
                [c, h, w] => (*c, *h, *w),
                s => return Err(KvnnError::InvalidArgument(format!("expected C x H x W, got {s:?}"))),
            };
            if size > h || size > w {
                return Err(KvnnError::InvalidArgument(format!("patch {size} larger than {h}x{w}")));
            }
            let (top, left) = (g.random_range(0..=h - size), g.random_range(0..=w - size));
            let mut data = Vec::with_capacity(c * size * size);
            for ch in 0..c {
                for i in top..top + size {
                    let row = ch * h * w + i * w + left;
                    data.extend_from_slice(&img.data()[row..row + size]);
                }
            }
            Tensor::new(vec![c, size, size], data)
        })
        .collect()
}

/// 8-bit binary PGM (P5). Values are clamped to `[0, 1]` and rounded.
pub fn write_pgm<W: Write>(img: &Tensor, mut w: W) -> Result<()> {
    let (h, wd) = match img.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(KvnnError::InvalidArgument(format!("PGM needs one channel, got {s:?}"))),
    };
    write!(w, "P5\n{wd} {h}\n255\n")?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

fn pgm_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            break;
        }
        let c = b[0] as char;
        if c == '#' && tok.is_empty() {
            let mut line = String::new();
            r.read_line(&mut line)?;
        } else if c.is_ascii_whitespace() {
            if !tok.is_empty() {
                break;
            }
        } else {
            tok.push(c);
        }
    }
    if tok.is_empty() {
        Err(KvnnError::Format("truncated PGM header".into()))
    } else {
        Ok(tok)
    }
}

/// Read an 8-bit P5 PGM into a `1 x H x W` tensor scaled to `[0, 1]`.
pub fn read_pgm<R: Read>(r: R) -> Result<Tensor> {
    let mut r = BufReader::new(r);
    if pgm_token(&mut r)? != "P5" {
        return Err(KvnnError::Format("not a binary PGM (P5)".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        pgm_token(&mut r)?
            .parse()
            .map_err(|_| KvnnError::Format(format!("bad PGM {what}")))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if max != 255 || w == 0 || h == 0 {
        return Err(KvnnError::Format(format!("unsupported PGM {w}x{h} maxval {max}")));
    }
    let mut bytes = vec![0u8; w * h];
    r.read_exact(&mut bytes)
        .map_err(|_| KvnnError::Format("truncated PGM data".into()))?;
    Tensor::new(vec![1, h, w], bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn save_pgm(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_pgm(img, std::io::BufWriter::new(f))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    read_pgm(std::fs::File::open(path)?)
}
