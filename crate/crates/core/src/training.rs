//! Optimizers, losses, layer-wise weight decay and the finite-difference
//! gradient audit.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, KvnnError, Result};
use crate::network::Network;
use crate::parallel;
use crate::rng;
use crate::tensor::Tensor;

/// Per-layer decay `lambda_l = base * ratio^l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecaySchedule {
    pub base: f64,
    pub ratio: f64,
}

impl Default for DecaySchedule {
    fn default() -> Self {
        Self {
            base: 1e-5,
            ratio: 1.3,
        }
    }
}

impl DecaySchedule {
    pub fn new(base: f64, ratio: f64) -> Result<Self> {
        if !(base >= 0.0 && base.is_finite() && ratio >= 1.0 && ratio.is_finite()) {
            return Err(KvnnError::InvalidArgument(format!(
                "decay needs base >= 0 and ratio >= 1, got {base}, {ratio}"
            )));
        }
        Ok(Self { base, ratio })
    }

    pub fn none() -> Self {
        Self {
            base: 0.0,
            ratio: 1.0,
        }
    }

    pub fn lambda(&self, layer: usize) -> f64 {
        self.base * self.ratio.powi(layer as i32)
    }
}

fn check_step(params: &[Vec<f64>], grads: &[Vec<f64>], lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(KvnnError::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
    }
    check_dim(params.len(), grads.len())?;
    for (l, (p, g)) in params.iter().zip(grads).enumerate() {
        check_dim(p.len(), g.len())?;
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(KvnnError::NonFinite(format!(
                "gradient of layer {l} entry {i} is {}; step aborted",
                g[i]
            )));
        }
    }
    Ok(())
}

/// `theta <- theta - lr * (g + lambda_l * theta)`, layer by layer.
pub fn sgd_step(params: &mut [Vec<f64>], grads: &[Vec<f64>], lr: f64, decay: &DecaySchedule) -> Result<()> {
    check_step(params, grads, lr)?;
    for (l, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let lam = decay.lambda(l);
        for (t, gv) in p.iter_mut().zip(g) {
            *t -= lr * (gv + lam * *t);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers shaped like the parameters, plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Vec<f64>]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Adam with decoupled weight decay:
/// `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + lambda_l * theta)`.
pub fn adam_step(
    params: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
    decay: &DecaySchedule,
) -> Result<()> {
    check_step(params, grads, lr)?;
    check_dim(params.len(), state.m.len())?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (l, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let lam = decay.lambda(l);
        let (m, v) = (&mut state.m[l], &mut state.v[l]);
        check_dim(p.len(), m.len())?;
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            p[i] -= lr * (update + lam * p[i]);
        }
    }
    Ok(())
}

/// Rescale so the global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_dim(pred.len(), target.len())?;
    let n = pred.len() as f64;
    let diff: Vec<f64> = pred.data().iter().zip(target.data()).map(|(p, t)| p - t).collect();
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.iter().map(|d| 2.0 * d / n).collect();
    Ok((value, Tensor::new(pred.shape().to_vec(), grad)?))
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_dim(pred.len(), target.len())?;
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// `10 log10(peak^2 / mse)`; `+inf` when the MSE is zero.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr(pred: &Tensor, target: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(KvnnError::InvalidArgument(format!("peak must be > 0, got {peak}")));
    }
    Ok(psnr_from_mse(mse(pred, target)?, peak))
}

/// Binary cross-entropy on a logit with label in {0, 1}: `(value, d value / d logit)`.
pub fn logistic_loss(logit: f64, label: f64) -> (f64, f64) {
    let value = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    let sig = 1.0 / (1.0 + (-logit).exp());
    (value, sig - label)
}

/// One input/target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub target: Tensor,
}

/// Loss, parameter gradients and per-sample input gradients of the batch MSE
/// (mean over every element of every sample).
pub struct BatchGradient {
    pub loss: f64,
    pub params: Vec<Vec<f64>>,
    pub inputs: Vec<Tensor>,
}

/// Batch MSE gradient. Samples are processed in parallel; the reduction runs
/// in sample order so both execution paths give identical sums.
pub fn batch_gradient(net: &Network, batch: &[Sample]) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(KvnnError::InvalidArgument("empty batch".into()));
    }
    let total: usize = batch.iter().map(|s| s.target.len()).sum();
    let scale = 2.0 / total as f64;
    let per = parallel::map_slice(batch, |s| -> Result<(f64, Vec<Vec<f64>>, Tensor)> {
        let (pred, cache) = net.forward_cached(&s.input)?;
        check_dim(s.target.len(), pred.len())?;
        let mut sse = 0.0;
        let up: Vec<f64> = pred
            .data()
            .iter()
            .zip(s.target.data())
            .map(|(p, t)| {
                sse += (p - t) * (p - t);
                scale * (p - t)
            })
            .collect();
        let (g, gi) = net.backward(&cache, &Tensor::new(pred.shape().to_vec(), up)?)?;
        Ok((sse, g, gi))
    });
    let mut loss = 0.0;
    let mut params: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.param_count()]).collect();
    let mut inputs = Vec::with_capacity(batch.len());
    for r in per {
        let (sse, g, gi) = r?;
        loss += sse;
        for (acc, gl) in params.iter_mut().zip(&g) {
            acc.iter_mut().zip(gl).for_each(|(a, b)| *a += b);
        }
        inputs.push(gi);
    }
    let loss = loss / total as f64;
    if !loss.is_finite() {
        return Err(KvnnError::Diverged(format!("loss is {loss}")));
    }
    Ok(BatchGradient {
        loss,
        params,
        inputs,
    })
}

/// Batch MSE without gradients.
pub fn batch_loss(net: &Network, batch: &[Sample]) -> Result<f64> {
    let total: usize = batch.iter().map(|s| s.target.len()).sum();
    let sse = parallel::map_slice(batch, |s| -> Result<f64> {
        let pred = net.forward(&s.input)?;
        check_dim(s.target.len(), pred.len())?;
        Ok(pred
            .data()
            .iter()
            .zip(s.target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum())
    });
    let mut acc = 0.0;
    for v in sse {
        acc += v?;
    }
    Ok(acc / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    /// Central-difference step.
    pub h: f64,
    pub tolerance: f64,
    /// Randomly sampled parameters (all are checked if the network has fewer).
    pub samples: usize,
    /// Input entries checked (all if the first input has fewer).
    pub input_samples: usize,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`. Central
    /// differences of an O(1) loss at `h = 1e-5` carry ~1e-12 absolute
    /// round-off, so gradients below the floor are judged on absolute
    /// error `tolerance * floor`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-6,
            samples: 200,
            input_samples: 200,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub param_checks: usize,
    pub input_checks: usize,
    pub max_rel_param: f64,
    pub max_rel_input: f64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Location of the worst entry, e.g. `layer 2 param 17`.
    pub worst: String,
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Parameters checked by the audit: a random subsample plus every parameter
/// of one random filter in one random layer.
pub fn audit_selection(net: &Network, cfg: &AuditConfig) -> Vec<(usize, usize)> {
    let flat: Vec<(usize, usize)> = net
        .layers
        .iter()
        .enumerate()
        .flat_map(|(l, layer)| (0..layer.param_count()).map(move |i| (l, i)))
        .collect();
    if flat.is_empty() {
        return flat;
    }
    let mut g = rng::derived(cfg.seed, 0xA0D1);
    let mut picked: Vec<(usize, usize)> = if flat.len() <= cfg.samples {
        flat.clone()
    } else {
        let mut idx = sample(&mut g, flat.len(), cfg.samples).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| flat[i]).collect()
    };
    let l = rand::Rng::random_range(&mut g, 0..net.layers.len());
    let c = rand::Rng::random_range(&mut g, 0..net.layers[l].c_out());
    picked.extend(net.layers[l].filter_param_indices(c).into_iter().map(|i| (l, i)));
    picked.sort_unstable();
    picked.dedup();
    picked
}

/// Finite-difference audit of `batch_gradient`.
pub fn grad_audit(net: &Network, batch: &[Sample], cfg: &AuditConfig) -> Result<AuditReport> {
    let grad = batch_gradient(net, batch)?;
    audit_against(net, batch, &grad.params, &grad.inputs[0], cfg)
}

/// Compare supplied analytic gradients against central differences of the
/// batch MSE. Exposed so a tampered gradient can be checked directly.
pub fn audit_against(
    net: &Network,
    batch: &[Sample],
    param_grads: &[Vec<f64>],
    input_grad: &Tensor,
    cfg: &AuditConfig,
) -> Result<AuditReport> {
    let mut work = net.clone();
    let mut params = net.params();
    let mut max_rel_param: f64 = 0.0;
    let mut worst = String::from("none");
    let mut worst_val = -1.0;
    let selection = audit_selection(net, cfg);
    for &(l, i) in &selection {
        let orig = params[l][i];
        params[l][i] = orig + cfg.h;
        work.layers[l].set_params(&params[l])?;
        let up = batch_loss(&work, batch)?;
        params[l][i] = orig - cfg.h;
        work.layers[l].set_params(&params[l])?;
        let down = batch_loss(&work, batch)?;
        params[l][i] = orig;
        work.layers[l].set_params(&params[l])?;
        let fd = (up - down) / (2.0 * cfg.h);
        let e = rel_err(param_grads[l][i], fd, cfg.floor);
        max_rel_param = max_rel_param.max(e);
        if e > worst_val {
            worst_val = e;
            worst = format!("layer {l} param {i}");
        }
    }

    let mut max_rel_input: f64 = 0.0;
    let n_in = batch[0].input.len();
    let mut g = rng::derived(cfg.seed, 0x1A9);
    let input_idx: Vec<usize> = if n_in <= cfg.input_samples {
        (0..n_in).collect()
    } else {
        sample(&mut g, n_in, cfg.input_samples).into_vec()
    };
    let mut perturbed = batch.to_vec();
    for &k in &input_idx {
        let orig = batch[0].input.data()[k];
        perturbed[0].input.data_mut()[k] = orig + cfg.h;
        let up = batch_loss(net, &perturbed)?;
        perturbed[0].input.data_mut()[k] = orig - cfg.h;
        let down = batch_loss(net, &perturbed)?;
        perturbed[0].input.data_mut()[k] = orig;
        let fd = (up - down) / (2.0 * cfg.h);
        let e = rel_err(input_grad.data()[k], fd, cfg.floor);
        max_rel_input = max_rel_input.max(e);
        if e > worst_val {
            worst_val = e;
            worst = format!("input {k}");
        }
    }
    let max_rel_error = max_rel_param.max(max_rel_input);
    Ok(AuditReport {
        param_checks: selection.len(),
        input_checks: input_idx.len(),
        max_rel_param,
        max_rel_input,
        max_rel_error,
        tolerance: cfg.tolerance,
        pass: max_rel_error <= cfg.tolerance,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mkv::InitSpec;
    use crate::network::{BlockSpec, Topology};

    fn toy(p: u32, n: usize, m: usize, c: usize, seed: u64) -> (Network, Vec<Sample>) {
        let t = Topology {
            name: None,
            input_channels: c,
            residual: false,
            blocks: vec![BlockSpec::Kvnn {
                c_in: c,
                c_out: 2,
                kernel: 3,
                stride: 1,
                pad: Some(1),
                p,
                n,
                m,
                bias: true,
                batchnorm: false,
            }],
        };
        let net = Network::build(&t, seed, InitSpec::default()).unwrap();
        let mut g = rng::seeded(seed + 100);
        let batch = (0..2)
            .map(|_| Sample {
                input: Tensor::new(vec![c, 5, 5], rng::normal_vec(&mut g, c * 25, 0.5)).unwrap(),
                target: Tensor::new(vec![2, 5, 5], rng::normal_vec(&mut g, 50, 0.5)).unwrap(),
            })
            .collect();
        (net, batch)
    }

    #[test]
    fn decay_schedule() {
        let d = DecaySchedule::default();
        assert_eq!(d.lambda(0), 1e-5);
        assert!((0..10).all(|l| d.lambda(l + 1) >= d.lambda(l)));
        assert!(DecaySchedule::new(-1.0, 1.0).is_err());
        assert!(DecaySchedule::new(1.0, 0.5).is_err());
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![vec![1.0, -2.0]];
        sgd_step(&mut p, &[vec![0.0, 0.0]], 0.1, &DecaySchedule::none()).unwrap();
        assert_eq!(p, vec![vec![1.0, -2.0]]);

        let mut p = vec![vec![1.0]];
        sgd_step(&mut p, &[vec![0.0]], 1.0, &DecaySchedule::new(0.1, 1.0).unwrap()).unwrap();
        assert!((p[0][0] - 0.9).abs() < 1e-15);

        let mut p = vec![vec![1.0]];
        for _ in 0..100 {
            let g = vec![vec![2.0 * p[0][0]]];
            sgd_step(&mut p, &g, 0.1, &DecaySchedule::none()).unwrap();
        }
        assert!(p[0][0].abs() < 1e-8);

        let e = sgd_step(&mut p, &[vec![f64::NAN]], 0.1, &DecaySchedule::none()).unwrap_err();
        assert!(matches!(e, KvnnError::NonFinite(_)));
        assert!(sgd_step(&mut p, &[vec![0.0]], 0.0, &DecaySchedule::none()).is_err());
    }

    #[test]
    fn adam_examples() {
        for scale in [1e-3, 1.0, 1e3] {
            let mut p = vec![vec![0.0]];
            let mut s = OptimizerState::new(&p);
            adam_step(&mut p, &[vec![scale]], &mut s, 0.01, &AdamConfig::default(), &DecaySchedule::none())
                .unwrap();
            assert!((p[0][0].abs() - 0.01).abs() < 1e-6, "{scale}: {}", p[0][0]);
        }

        let mut p = vec![vec![1.0]];
        let mut s = OptimizerState::new(&p);
        let decay = DecaySchedule::new(0.5, 1.0).unwrap();
        for k in 1..=5 {
            adam_step(&mut p, &[vec![0.0]], &mut s, 0.1, &AdamConfig::default(), &decay).unwrap();
            assert!((p[0][0] - 0.95f64.powi(k)).abs() < 1e-12);
        }

        let mut p = vec![vec![1.0]];
        let mut s = OptimizerState::new(&p);
        let mut lr = 0.1;
        for _ in 0..500 {
            let g = vec![vec![2.0 * p[0][0]]];
            adam_step(&mut p, &g, &mut s, lr, &AdamConfig::default(), &DecaySchedule::none()).unwrap();
            lr *= 0.985;
        }
        assert!(p[0][0].abs() < 1e-6, "{}", p[0][0]);
        assert_eq!(s.step, 500);
    }

    #[test]
    fn clip_scales_to_max() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn loss_and_psnr_examples() {
        let t = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(psnr(&t, &t, 1.0).unwrap(), f64::INFINITY);
        let off = Tensor::new(vec![4], t.data().iter().map(|v| v + 1.0).collect()).unwrap();
        let (v, g) = mse_loss(&off, &t).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert!(g.data().iter().all(|x| (x - 0.5).abs() < 1e-15));
        assert!(psnr(&off, &t, 1.0).unwrap().abs() < 1e-12);

        let n = 1_000_000;
        let mut g = rng::seeded(3);
        let noise = rng::uniform_vec(&mut g, n, -0.5, 0.5);
        let a = Tensor::new(vec![n], noise).unwrap();
        let z = Tensor::zeros(&[n]);
        let p = psnr(&a, &z, 1.0).unwrap();
        assert!((p - 10.0 * 12f64.log10()).abs() < 0.02, "{p}");
        assert!(psnr_from_mse(0.1, 1.0) > psnr_from_mse(0.2, 1.0));
    }

    #[test]
    fn logistic_loss_gradient() {
        for (z, y) in [(0.3, 1.0), (-2.0, 0.0), (40.0, 0.0), (-40.0, 1.0)] {
            let (_, g) = logistic_loss(z, y);
            let h = 1e-6;
            let fd = (logistic_loss(z + h, y).0 - logistic_loss(z - h, y).0) / (2.0 * h);
            assert!((g - fd).abs() < 1e-7, "{z} {y}");
        }
        assert!((logistic_loss(0.0, 1.0).0 - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn audit_linear_layer() {
        let (net, batch) = toy(1, 0, 0, 2, 4);
        let cfg = AuditConfig {
            tolerance: 1e-7,
            ..AuditConfig::default()
        };
        let r = grad_audit(&net, &batch, &cfg).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.param_checks >= 20);
    }

    #[test]
    fn audit_cubic_layer() {
        let (net, batch) = toy(3, 2, 2, 3, 5);
        let r = grad_audit(&net, &batch, &AuditConfig::default()).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.param_checks >= 200 && r.input_checks == 75);
    }

    #[test]
    fn audit_negative_control() {
        let (net, batch) = toy(2, 1, 0, 1, 6);
        let cfg = AuditConfig::default();
        let mut grad = batch_gradient(&net, &batch).unwrap();
        let (l, i) = audit_selection(&net, &cfg)[0];
        grad.params[l][i] = -grad.params[l][i] + 1e-3;
        let r = audit_against(&net, &batch, &grad.params, &grad.inputs[0], &cfg).unwrap();
        assert!(!r.pass, "{r:?}");
    }
}
