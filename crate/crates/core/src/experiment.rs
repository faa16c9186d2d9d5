//! Desk-scale experiments: denoising, a multiplicative-interaction
//! classification task, and the stored-center regression comparison.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{add_awgn, gen_synthetic_images, random_patches, NoiseLevel, NoiseSpec};
use crate::error::{KvnnError, Result};
use crate::kernels::{krr_fit, krr_predict, KernelSpec};
use crate::mkv::{fit_coefficients_lsq, InitSpec};
use crate::network::{count_flops, count_params, BlockSpec, Network, Topology};
use crate::parallel;
use crate::rng::{self, sub_seed};
use crate::tensor::{monomial_count, Tensor};
use crate::training::{
    adam_step, batch_gradient, clip_global_norm, logistic_loss, psnr, sgd_step, AdamConfig, DecaySchedule,
    OptimizerState, Sample,
};
use crate::volterra::random_volterra;
use crate::VERSION;

pub const SIGMA_CONVENTION: &str = "sigma on the 0-255 scale, applied to [0,1] data as sigma/255; noisy inputs not clamped";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Inline topology or a path to a topology file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySource {
    File(PathBuf),
    Inline(Topology),
}

impl TopologySource {
    /// Relative paths resolve against `base`.
    pub fn resolve(&self, base: Option<&Path>) -> Result<Topology> {
        match self {
            TopologySource::Inline(t) => {
                t.validate()?;
                Ok(t.clone())
            }
            TopologySource::File(p) => {
                let path = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                Topology::load(path)
            }
        }
    }
}

/// One row of the metrics stream; `psnr` is filled on evaluation steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub psnr: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseConfig {
    pub topology: TopologySource,
    pub train_noise: NoiseLevel,
    pub eval_sigma: f64,
    pub image_size: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub patch_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Cosine schedule from `lr` down to `lr_final`.
    pub lr_final: f64,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub decay: DecaySchedule,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default = "one")]
    pub init_gain: f64,
    pub eval_every: usize,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl Default for DenoiseConfig {
    /// Five 3x3 kVNN blocks (p = 2, n = 1), 16 channels, sigma 25 on 32x32 images.
    fn default() -> Self {
        Self {
            topology: TopologySource::Inline(Topology::kvnn_stack(5, 16, 1, 2, 1, 0)),
            train_noise: NoiseLevel::Fixed { sigma: 25.0 },
            eval_sigma: 25.0,
            image_size: 32,
            train_images: 64,
            test_images: 8,
            patch_size: 32,
            batch_size: 8,
            steps: 1000,
            lr: 3e-3,
            lr_final: 1e-4,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            decay: DecaySchedule::default(),
            clip_norm: Some(5.0),
            init_gain: 0.5,
            eval_every: 50,
            seed: 0,
        }
    }
}

impl DenoiseConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        serde_json::from_str(&crate::error::read_to_string(path.as_ref())?).map_err(|e| KvnnError::Format(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        NoiseSpec {
            level: self.train_noise,
            seed: 0,
        }
        .validate()?;
        let positive = [
            ("train_images", self.train_images),
            ("test_images", self.test_images),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(KvnnError::InvalidArgument(format!("{name} must be > 0")));
            }
        }
        if self.patch_size > self.image_size {
            return Err(KvnnError::InvalidArgument("patch_size exceeds image_size".into()));
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0 && self.eval_sigma >= 0.0 && self.init_gain > 0.0) {
            return Err(KvnnError::InvalidArgument("lr, lr_final, init_gain must be > 0 and eval_sigma >= 0".into()));
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` at step 0 to `lr1` at the last step.
pub fn cosine_lr(lr0: f64, lr1: f64, step: usize, steps: usize) -> f64 {
    if steps <= 1 {
        return lr0;
    }
    let t = step as f64 / (steps - 1) as f64;
    lr1 + 0.5 * (lr0 - lr1) * (1.0 + (PI * t).cos())
}

/// Seeds derived from the experiment seed; recorded in every manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiseSeeds {
    pub train_data: u64,
    pub test_data: u64,
    pub init: u64,
    pub batches: u64,
    pub train_noise: u64,
    pub eval_noise: u64,
}

impl DenoiseSeeds {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            train_data: sub_seed(seed, 1),
            test_data: sub_seed(seed, 2),
            init: sub_seed(seed, 3),
            batches: sub_seed(seed, 4),
            train_noise: sub_seed(seed, 5),
            eval_noise: sub_seed(seed, 6),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub name: String,
    pub params: usize,
    pub flops: u64,
    pub flop_convention: String,
    pub psnr_noisy: f64,
    pub psnr_denoised: f64,
    pub gain_db: f64,
    pub final_loss: f64,
    pub steps_completed: usize,
    pub curves: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest<C, R> {
    pub kind: String,
    pub version: String,
    pub config: C,
    pub config_sha256: String,
    pub seed: u64,
    pub derived_seeds: serde_json::Value,
    pub notes: Vec<String>,
    pub status: String,
    pub results: R,
}

pub fn config_hash<C: Serialize>(config: &C) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Mean per-image PSNR (peak 1) of `pred` against `clean`.
pub fn mean_psnr(pred: &[Tensor], clean: &[Tensor]) -> Result<f64> {
    if pred.len() != clean.len() || pred.is_empty() {
        return Err(KvnnError::InvalidArgument("mean_psnr needs equal, non-empty sets".into()));
    }
    let mut acc = 0.0;
    for (p, c) in pred.iter().zip(clean) {
        acc += psnr(p, c, 1.0)?;
    }
    Ok(acc / pred.len() as f64)
}

/// Run the network on each image (parallel over images, results in order).
pub fn denoise_all(net: &Network, noisy: &[Tensor]) -> Result<Vec<Tensor>> {
    parallel::map_slice(noisy, |x| net.forward(x)).into_iter().collect()
}

fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| KvnnError::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| KvnnError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| KvnnError::Format(e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| KvnnError::Format(e.to_string())))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Train a denoiser on synthetic noisy/clean pairs and evaluate on a held-out
/// set at `eval_sigma`. With `out_dir`, writes `metrics.csv`, `model/` and
/// `manifest.json`. On divergence the last finite parameters are saved and
/// [`KvnnError::Diverged`] is returned.
pub fn run_denoise_experiment(cfg: &DenoiseConfig, base: Option<&Path>, out_dir: Option<&Path>) -> Result<DenoiseReport> {
    cfg.validate()?;
    let topology = cfg.topology.resolve(base)?;
    let seeds = DenoiseSeeds::from_seed(cfg.seed);
    let train = gen_synthetic_images(seeds.train_data, cfg.train_images, cfg.image_size)?;
    let test = gen_synthetic_images(seeds.test_data, cfg.test_images, cfg.image_size)?;
    let (test_noisy, _) = add_awgn(&test.images, &NoiseSpec::fixed(cfg.eval_sigma, seeds.eval_noise))?;
    let psnr_noisy = mean_psnr(&test_noisy, &test.images)?;

    let mut net = Network::build(&topology, seeds.init, InitSpec { gain: cfg.init_gain })?;
    let mut params = net.params();
    let mut state = OptimizerState::new(&params);
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut diverged = None;
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let clean = random_patches(&train.images, cfg.patch_size, cfg.batch_size, sub_seed(seeds.batches, step as u64))?;
        let noise = NoiseSpec {
            level: cfg.train_noise,
            seed: sub_seed(seeds.train_noise, step as u64),
        };
        let (noisy, _) = add_awgn(&clean, &noise)?;
        let batch: Vec<Sample> = noisy
            .into_iter()
            .zip(clean)
            .map(|(input, target)| Sample { input, target })
            .collect();
        let lr = cosine_lr(cfg.lr, cfg.lr_final, step, cfg.steps);
        let outcome = batch_gradient(&net, &batch).and_then(|mut g| {
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut g.params, c);
            }
            let mut next = params.clone();
            match cfg.optimizer {
                OptimizerKind::Adam => adam_step(&mut next, &g.params, &mut state, lr, &cfg.adam, &cfg.decay)?,
                OptimizerKind::Sgd => sgd_step(&mut next, &g.params, lr, &cfg.decay)?,
            }
            if next.iter().flatten().any(|v| !v.is_finite()) {
                return Err(KvnnError::NonFinite("parameters after step".into()));
            }
            Ok((g.loss, next))
        });
        let eval_now = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps;
        let outcome = outcome.and_then(|(loss, next)| {
            let mut trial = net.clone();
            trial.set_params(&next)?;
            let p = if eval_now {
                Some(mean_psnr(&denoise_all(&trial, &test_noisy)?, &test.images)?)
            } else {
                None
            };
            Ok((loss, next, trial, p))
        });
        let (loss, next, trial, p) = match outcome {
            Ok(v) => v,
            Err(e @ (KvnnError::Diverged(_) | KvnnError::NonFinite(_))) => {
                diverged = Some(format!("step {step}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        params = next;
        net = trial;
        final_loss = loss;
        rows.push(MetricRow {
            step: step + 1,
            loss,
            psnr: p,
            lr,
        });
    }

    let psnr_denoised = match denoise_all(&net, &test_noisy) {
        Ok(pred) => mean_psnr(&pred, &test.images)?,
        Err(_) if diverged.is_some() => f64::NAN,
        Err(e) => return Err(e),
    };
    let flops = count_flops(&topology, cfg.image_size, cfg.image_size)?;
    let report = DenoiseReport {
        name: topology.name.clone().unwrap_or_else(|| "unnamed".into()),
        params: count_params(&topology)?,
        flops: flops.total,
        flop_convention: flops.convention,
        psnr_noisy,
        psnr_denoised,
        gain_db: psnr_denoised - psnr_noisy,
        final_loss,
        steps_completed: rows.len(),
        curves: rows,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_metrics(&dir.join("metrics.csv"), &report.curves)?;
        net.save(dir.join("model"))?;
        let mut resolved = cfg.clone();
        resolved.topology = TopologySource::Inline(topology.clone());
        let mut summary = report.clone();
        summary.curves.clear();
        let manifest = Manifest {
            kind: "denoise".into(),
            version: VERSION.into(),
            config_sha256: config_hash(&resolved),
            config: resolved,
            seed: cfg.seed,
            derived_seeds: serde_json::to_value(seeds)?,
            notes: vec![SIGMA_CONVENTION.into(), "metrics stream: metrics.csv (step,loss,psnr,lr)".into()],
            status: diverged.clone().map_or_else(|| "ok".into(), |d| format!("diverged at {d}")),
            results: summary,
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
    }
    match diverged {
        Some(d) => Err(KvnnError::Diverged(d)),
        None => Ok(report),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub sigma: f64,
    pub psnr_noisy: f64,
    pub psnr_denoised: f64,
    pub per_image: Vec<f64>,
}

/// Denoise `clean + noise` with a saved model. With `out_dir`, writes
/// `clean_XXXX.kvt`, `pred_XXXX.kvt` and `eval.json`, so the reported PSNR
/// can be recomputed from the files.
pub fn run_eval(net: &Network, clean: &[Tensor], noise: &NoiseSpec, out_dir: Option<&Path>) -> Result<EvalReport> {
    let (noisy, _) = add_awgn(clean, noise)?;
    let pred = denoise_all(net, &noisy)?;
    let per_image = pred
        .iter()
        .zip(clean)
        .map(|(p, c)| psnr(p, c, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport {
        images: clean.len(),
        sigma: match noise.level {
            NoiseLevel::Fixed { sigma } => sigma,
            NoiseLevel::Range { hi, .. } => hi,
        },
        psnr_noisy: mean_psnr(&noisy, clean)?,
        psnr_denoised: mean_psnr(&pred, clean)?,
        per_image,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        for (i, (p, c)) in pred.iter().zip(clean).enumerate() {
            p.save(dir.join(format!("pred_{i:04}.kvt")))?;
            c.save(dir.join(format!("clean_{i:04}.kvt")))?;
        }
        write_json(&dir.join("eval.json"), &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyTask {
    /// Label = `sign(u . x) * sign(v . x) > 0`.
    XorOfSigns,
    /// Label = `u . x > 0`.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub task: ToyTask,
    /// Square input side; the single block's kernel covers the whole input.
    pub side: usize,
    pub train: usize,
    pub test: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Order-2 atoms of the quadratic model.
    pub quadratic_atoms: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            task: ToyTask::XorOfSigns,
            side: 3,
            train: 2000,
            test: 2000,
            steps: 1500,
            batch_size: 64,
            lr: 0.02,
            quadratic_atoms: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub p: u32,
    pub params: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub task: ToyTask,
    pub linear: ModelScore,
    pub quadratic: ModelScore,
    /// Test accuracy of a logistic classifier on all monomials of degree <= 2.
    pub quadratic_oracle_accuracy: f64,
}

/// Inputs and labels of a toy task.
pub fn toy_dataset(task: ToyTask, side: usize, count: usize, seed: u64, data_tag: u64) -> (Vec<Tensor>, Vec<f64>) {
    let d = side * side;
    let mut g = rng::derived(seed, 0x70);
    let u = rng::unit_sphere(&mut g, d);
    let mut v = rng::unit_sphere(&mut g, d);
    let uv: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(vi, ui)| *vi -= uv * ui);
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= nv);

    let mut g = rng::derived(seed, data_tag);
    let mut xs = Vec::with_capacity(count);
    let mut ys = Vec::with_capacity(count);
    for _ in 0..count {
        let x = rng::normal_vec(&mut g, d, 1.0);
        let a: f64 = x.iter().zip(&u).map(|(p, q)| p * q).sum();
        let b: f64 = x.iter().zip(&v).map(|(p, q)| p * q).sum();
        let label = match task {
            ToyTask::XorOfSigns => a * b > 0.0,
            ToyTask::Linear => a > 0.0,
        };
        ys.push(if label { 1.0 } else { 0.0 });
        xs.push(Tensor::new(vec![1, side, side], x).expect("finite"));
    }
    (xs, ys)
}

fn toy_topology(side: usize, p: u32, n: usize) -> Topology {
    Topology {
        name: Some(format!("toy_p{p}")),
        input_channels: 1,
        residual: false,
        blocks: vec![BlockSpec::Kvnn {
            c_in: 1,
            c_out: 1,
            kernel: side,
            stride: 1,
            pad: Some(0),
            p,
            n,
            m: 0,
            bias: true,
            batchnorm: false,
        }],
    }
}

fn accuracy(net: &Network, xs: &[Tensor], ys: &[f64]) -> Result<f64> {
    let logits = parallel::map_slice(xs, |x| net.forward(x).map(|t| t.data()[0]));
    let mut correct = 0usize;
    for (l, y) in logits.into_iter().zip(ys) {
        if (l? > 0.0) == (*y > 0.5) {
            correct += 1;
        }
    }
    Ok(correct as f64 / ys.len() as f64)
}

fn train_classifier(cfg: &ToyConfig, p: u32, xs: &[Tensor], ys: &[f64], xt: &[Tensor], yt: &[f64]) -> Result<ModelScore> {
    let n = if p >= 2 { cfg.quadratic_atoms } else { 0 };
    let topo = toy_topology(cfg.side, p, n);
    let mut net = Network::build(&topo, sub_seed(cfg.seed, 10 + u64::from(p)), InitSpec::default())?;
    let mut params = net.params();
    let mut state = OptimizerState::new(&params);
    let mut g = rng::derived(cfg.seed, 0xB47C + u64::from(p));
    let mut final_loss = f64::NAN;
    let decay = DecaySchedule::none();
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| g.random_range(0..xs.len())).collect();
        let per = parallel::map_slice(&idx, |&i| -> Result<(f64, Vec<Vec<f64>>)> {
            let (out, cache) = net.forward_cached(&xs[i])?;
            let (loss, dl) = logistic_loss(out.data()[0], ys[i]);
            let up = Tensor::new(vec![1, 1, 1], vec![dl / cfg.batch_size as f64])?;
            Ok((loss, net.backward(&cache, &up)?.0))
        });
        let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut loss = 0.0;
        for r in per {
            let (l, gr) = r?;
            loss += l / cfg.batch_size as f64;
            for (a, b) in grads.iter_mut().zip(&gr) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
        let lr = cosine_lr(cfg.lr, cfg.lr * 0.05, step, cfg.steps);
        adam_step(&mut params, &grads, &mut state, lr, &AdamConfig::default(), &decay)?;
        net.set_params(&params)?;
        final_loss = loss;
    }
    Ok(ModelScore {
        p,
        params: net.param_count(),
        train_accuracy: accuracy(&net, xs, ys)?,
        test_accuracy: accuracy(&net, xt, yt)?,
        final_loss,
    })
}

fn quadratic_features(x: &[f64]) -> Vec<f64> {
    let mut f = vec![1.0];
    f.extend_from_slice(x);
    for i in 0..x.len() {
        for j in i..x.len() {
            f.push(x[i] * x[j]);
        }
    }
    f
}

/// Ridge-regularized logistic regression (Newton iterations) on every
/// monomial of degree <= 2; returns test accuracy. Serves as the reference
/// for what a quadratic decision rule achieves on the same data.
pub fn quadratic_oracle_accuracy(xs: &[Tensor], ys: &[f64], xt: &[Tensor], yt: &[f64]) -> Result<f64> {
    let rows: Vec<Vec<f64>> = xs.iter().map(|x| quadratic_features(x.data())).collect();
    let (n, k) = (rows.len(), rows[0].len());
    let a = DMatrix::from_fn(n, k, |i, j| rows[i][j]);
    let y = DVector::from_column_slice(ys);
    let mut w = DVector::zeros(k);
    let ridge = 1e-3 * n as f64;
    for _ in 0..30 {
        let z = &a * &w;
        let p = z.map(|v| 1.0 / (1.0 + (-v).exp()));
        let s = p.map(|v| (v * (1.0 - v)).max(1e-12));
        let grad = a.transpose() * (&p - &y) + ridge * &w;
        let mut h = a.transpose() * DMatrix::from_fn(n, k, |i, j| a[(i, j)] * s[i]);
        for d in 0..k {
            h[(d, d)] += ridge;
        }
        let step = h
            .cholesky()
            .ok_or_else(|| KvnnError::Singular("oracle Hessian".into()))?
            .solve(&grad);
        w -= step;
    }
    let correct = xt
        .iter()
        .zip(yt)
        .filter(|(x, y)| {
            let s: f64 = quadratic_features(x.data()).iter().zip(w.iter()).map(|(f, c)| f * c).sum();
            (s > 0.0) == (**y > 0.5)
        })
        .count();
    Ok(correct as f64 / yt.len() as f64)
}

/// Train a linear (p = 1) and a quadratic (p = 2) single-block model of equal depth.
pub fn run_toy_classification(cfg: &ToyConfig) -> Result<ToyReport> {
    if cfg.side == 0 || cfg.train == 0 || cfg.test == 0 || cfg.batch_size == 0 || cfg.quadratic_atoms == 0 {
        return Err(KvnnError::InvalidArgument("toy config sizes must be > 0".into()));
    }
    let (xs, ys) = toy_dataset(cfg.task, cfg.side, cfg.train, cfg.seed, 1);
    let (xt, yt) = toy_dataset(cfg.task, cfg.side, cfg.test, cfg.seed, 2);
    Ok(ToyReport {
        task: cfg.task,
        linear: train_classifier(cfg, 1, &xs, &ys, &xt, &yt)?,
        quadratic: train_classifier(cfg, 2, &xs, &ys, &xt, &yt)?,
        quadratic_oracle_accuracy: quadratic_oracle_accuracy(&xs, &ys, &xt, &yt)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrrBaselineConfig {
    pub d: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Standard deviation of the additive noise on training targets.
    pub noise_std: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for KrrBaselineConfig {
    fn default() -> Self {
        Self {
            d: 4,
            n_train: 200,
            n_test: 500,
            noise_std: 0.1,
            lambda: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrrBaselineReport {
    pub d: usize,
    pub n_train: usize,
    pub krr_stored_centers: usize,
    pub kvnn_atoms: usize,
    pub atom_bound: usize,
    pub krr_test_mse: f64,
    pub kvnn_test_mse: f64,
    /// Structural check plus `kvnn_test_mse <= 1.1 * krr_test_mse`.
    pub pass: bool,
}

/// Homogeneous quadratic target: KRR with the degree-2 polynomial kernel
/// against `C(d+1, 2)` order-2 atoms on fixed random unit centers, fitted by
/// least squares. Test error is measured against clean targets.
pub fn run_krr_baseline(cfg: &KrrBaselineConfig) -> Result<KrrBaselineReport> {
    if cfg.d == 0 || cfg.d > 5 {
        return Err(KvnnError::InvalidArgument(format!("d must be in 1..=5, got {}", cfg.d)));
    }
    let d = cfg.d;
    let target = random_volterra(sub_seed(cfg.seed, 1), d, 2, 1.0)?;
    let f = |x: &[f64]| target.eval_order(2, x);
    let mut g = rng::derived(cfg.seed, 2);
    let xs: Vec<Vec<f64>> = (0..cfg.n_train).map(|_| rng::normal_vec(&mut g, d, 1.0)).collect();
    let ys = xs
        .iter()
        .map(|x| Ok(f(x)? + cfg.noise_std * rng::normal(&mut g)))
        .collect::<Result<Vec<f64>>>()?;
    let xt: Vec<Vec<f64>> = (0..cfg.n_test).map(|_| rng::normal_vec(&mut g, d, 1.0)).collect();
    let yt = xt.iter().map(|x| f(x)).collect::<Result<Vec<f64>>>()?;

    let krr = krr_fit(&xs, &ys, KernelSpec::Poly(2), cfg.lambda)?;
    let atom_bound = monomial_count(d, 2);
    let mut gc = rng::derived(cfg.seed, 3);
    let centers: Vec<Vec<f64>> = (0..atom_bound).map(|_| rng::unit_sphere(&mut gc, d)).collect();
    let branch = fit_coefficients_lsq(2, centers, &xs, &ys)?;

    let (mut krr_mse, mut kvnn_mse) = (0.0, 0.0);
    for (x, y) in xt.iter().zip(&yt) {
        krr_mse += (krr_predict(&krr, x)? - y).powi(2);
        kvnn_mse += (branch.eval(x)? - y).powi(2);
    }
    krr_mse /= cfg.n_test as f64;
    kvnn_mse /= cfg.n_test as f64;
    let pass = krr.stored_centers() == cfg.n_train && branch.len() <= atom_bound && kvnn_mse <= 1.1 * krr_mse;
    Ok(KrrBaselineReport {
        d,
        n_train: cfg.n_train,
        krr_stored_centers: krr.stored_centers(),
        kvnn_atoms: branch.len(),
        atom_bound,
        krr_test_mse: krr_mse,
        kvnn_test_mse: kvnn_mse,
        pass,
    })
}
