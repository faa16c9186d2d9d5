//! Compact invariant suite run by `kvnn selfcheck`.
//!
//! Every check compares a fast path against an independent reference and
//! reports the worst scaled error against a fixed tolerance. Output depends
//! only on the seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernels::{concatenated_feature_map, feature_map, gram_psd_check, multi_kernel, poly_kernel, KernelSpec, MultiKernelWeights};
use crate::layer::{ConvLayer, FilterConfig, Geometry, KvnnLayer};
use crate::mkv::{eval_mk, fit_exact, init_mk, map_to_volterra, InitSpec};
use crate::network::{count_params, BlockSpec, Network, Topology};
use crate::rng;
use crate::tensor::{abs_dot, dot, enumerate_multi_indices, monomial_eval, multinomial_coefficient, Tensor};
use crate::training::{grad_audit, AuditConfig, Sample};
use crate::volterra::{eval_volterra, random_volterra};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfcheckReport {
    pub seed: u64,
    pub checks: Vec<Check>,
    pub pass: bool,
}

fn check(name: &str, value: f64, tolerance: f64) -> Check {
    Check {
        name: name.into(),
        value,
        tolerance,
        pass: value <= tolerance,
    }
}

/// `(x . w)^r` against the multinomial expansion, scaled by `(|x| . |w|)^r`.
pub fn multinomial_identity_error(seed: u64, trials: usize) -> Result<f64> {
    let mut g = rng::derived(seed, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let d = g.random_range(1..=5);
        let r = g.random_range(1..=4u32);
        let x = rng::normal_vec(&mut g, d, 1.0);
        let w = rng::normal_vec(&mut g, d, 1.0);
        let mut sum = 0.0;
        for m in enumerate_multi_indices(d, r)? {
            sum += multinomial_coefficient(&m)? as f64 * monomial_eval(&x, &m)? * monomial_eval(&w, &m)?;
        }
        let scale = abs_dot(&x, &w).powi(r as i32).max(f64::MIN_POSITIVE);
        worst = worst.max((dot(&x, &w).powi(r as i32) - sum).abs() / scale);
    }
    Ok(worst)
}

/// Kernel against the inner product of explicit feature maps, single-order
/// and multi-kernel.
pub fn feature_map_error(seed: u64, trials: usize) -> Result<f64> {
    let mut g = rng::derived(seed, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let d = g.random_range(1..=5);
        let r = g.random_range(1..=4u32);
        let x = rng::normal_vec(&mut g, d, 1.0);
        let y = rng::normal_vec(&mut g, d, 1.0);
        let scale = abs_dot(&x, &y).powi(r as i32).max(f64::MIN_POSITIVE);
        let k = poly_kernel(r, &x, &y)?;
        let phi = dot(&feature_map(r, &x)?, &feature_map(r, &y)?);
        worst = worst.max((k - phi).abs() / scale);

        let a = rng::uniform_vec(&mut g, r as usize, 0.0, 1.0);
        let mw = MultiKernelWeights::new(a.clone())?;
        let mscale: f64 = a
            .iter()
            .enumerate()
            .map(|(i, ai)| ai * ai * abs_dot(&x, &y).powi(i as i32 + 1))
            .sum::<f64>()
            .max(f64::MIN_POSITIVE);
        let mk = multi_kernel(&mw, &x, &y)?;
        let mphi = dot(&concatenated_feature_map(&mw, &x)?, &concatenated_feature_map(&mw, &y)?);
        worst = worst.max((mk - mphi).abs() / mscale);
    }
    Ok(worst)
}

/// Worst `-min_eig / max(1, max_eig)` over random multi-kernel Gram matrices
/// (non-positive means PSD).
pub fn gram_psd_violation(seed: u64, points: usize, weight_sets: usize, d: usize) -> Result<f64> {
    let mut g = rng::derived(seed, 3);
    let xs: Vec<Vec<f64>> = (0..points).map(|_| rng::normal_vec(&mut g, d, 1.0 / (d as f64).sqrt())).collect();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..weight_sets {
        let a = rng::uniform_vec(&mut g, 3, 0.0, 1.0);
        let rep = gram_psd_check(&KernelSpec::Multi(MultiKernelWeights::new(a)?), &xs, 1e-8)?;
        worst = worst.max(-rep.min_eig / rep.max_eig.max(1.0));
    }
    Ok(worst)
}

/// Atom evaluation against the dense mapping reconstructed from the atoms,
/// scaled by `sum |gamma| (|x| . |w|)^r`.
pub fn oracle_equivalence_error(seed: u64, maps: usize, inputs: usize) -> Result<f64> {
    let mut g = rng::derived(seed, 4);
    let mut worst: f64 = 0.0;
    for k in 0..maps {
        let d = g.random_range(2..=6);
        let p = g.random_range(2..=3usize);
        let counts: Vec<usize> = (0..p).map(|_| g.random_range(1..=6)).collect();
        let map = init_mk(rng::sub_seed(seed, 100 + k as u64), d, &counts, InitSpec::default())?;
        let dense = map_to_volterra(&map)?;
        for _ in 0..inputs {
            let x = rng::normal_vec(&mut g, d, 1.0);
            let a = eval_mk(&map, &x)?;
            let b = eval_volterra(&dense, &x)?;
            worst = worst.max((a - b).abs() / map.magnitude(&x).max(f64::MIN_POSITIVE));
        }
    }
    Ok(worst)
}

/// Exact atomic fit of random symmetric targets; returns the worst error
/// scaled by `||h||_F ||x||^r` and whether every fit used `C(d+r-1, r)` atoms.
pub fn exact_fit_error(seed: u64, dims: &[usize], orders: &[u32], targets: usize, points: usize) -> Result<(f64, bool)> {
    let mut g = rng::derived(seed, 5);
    let mut worst: f64 = 0.0;
    let mut counts_ok = true;
    for &d in dims {
        for &r in orders {
            for t in 0..targets {
                let ts = rng::sub_seed(seed, (d * 1000 + r as usize * 100 + t) as u64);
                let coeffs = random_volterra(ts, d, r as usize, 1.0)?;
                let h = coeffs.tensor(r as usize);
                let (branch, info) = fit_exact(h, ts)?;
                counts_ok &= branch.len() == crate::tensor::monomial_count(d, r as usize) && info.atoms == branch.len();
                for _ in 0..points {
                    let x = rng::normal_vec(&mut g, d, 1.0);
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let scale = (h.norm() * norm.powi(r as i32)).max(f64::MIN_POSITIVE);
                    let a = branch.eval(&x)?;
                    let b = coeffs.eval_order(r as usize, &x)?;
                    worst = worst.max((a - b).abs() / scale);
                }
            }
        }
    }
    Ok((worst, counts_ok))
}

/// Element-wise errors of a `p = 1` layer against the equivalent convolution
/// (forward, input gradient, center and gamma gradients), each scaled by the
/// same quantity computed with absolute values.
pub fn linear_reduction_error(seed: u64, trials: usize) -> Result<f64> {
    let mut g = rng::derived(seed, 6);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let c_in = g.random_range(1..=3);
        let c_out = g.random_range(1..=4);
        let k = [1, 3, 5][g.random_range(0..3)];
        let stride = g.random_range(1..=2);
        let pad = g.random_range(0..=k / 2);
        let (h, w) = (g.random_range(k.max(4)..=9), g.random_range(k.max(4)..=9));
        let geom = Geometry::square(c_in, k, stride, pad);
        let bias = g.random_bool(0.5);
        let mut layer = KvnnLayer::random(
            rng::sub_seed(seed, 200 + t as u64),
            geom,
            c_out,
            FilterConfig::new(1, 0, 0, bias)?,
            InitSpec::default(),
        )?;
        for f in &mut layer.filters {
            if bias {
                f.bias = rng::normal(&mut g);
            }
        }
        let d = geom.patch_dim();
        let mut weights = Vec::with_capacity(c_out * d);
        let mut abs_weights = Vec::with_capacity(c_out * d);
        for f in &layer.filters {
            let a = &f.map.branches()[0].atoms()[0];
            weights.extend(a.center().iter().map(|v| a.gamma() * v));
            abs_weights.extend(a.center().iter().map(|v| (a.gamma() * v).abs()));
        }
        let biases: Vec<f64> = layer.filters.iter().map(|f| f.bias).collect();
        let conv = ConvLayer::new(weights.clone(), bias.then(|| biases.clone()), c_out, geom)?;
        let abs_conv = ConvLayer::new(abs_weights, bias.then(|| biases.iter().map(|b| b.abs()).collect()), c_out, geom)?;

        let x = Tensor::new(vec![c_in, h, w], rng::normal_vec(&mut g, c_in * h * w, 1.0))?;
        let ax = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.abs()).collect())?;
        let (yk, ck) = layer.forward_cached(&x)?;
        let (yc, cc) = conv.forward_cached(&x)?;
        let (ya, ca) = abs_conv.forward_cached(&ax)?;
        let rel = |a: f64, b: f64, s: f64| (a - b).abs() / s.max(f64::MIN_POSITIVE);
        for i in 0..yk.len() {
            worst = worst.max(rel(yk.data()[i], yc.data()[i], ya.data()[i]));
        }

        let up = Tensor::new(yk.shape().to_vec(), rng::normal_vec(&mut g, yk.len(), 1.0))?;
        let aup = Tensor::new(up.shape().to_vec(), up.data().iter().map(|v| v.abs()).collect())?;
        let gk = layer.backward_cached(&ck, &up)?;
        let gc = conv.backward_cached(&cc, &up)?;
        let ga = abs_conv.backward_cached(&ca, &aup)?;
        for i in 0..x.len() {
            worst = worst.max(rel(gk.input.data()[i], gc.input.data()[i], ga.input.data()[i]));
        }
        // kVNN params per filter: center (d), gamma, [bias]; conv: weights then biases.
        let per = d + 1 + usize::from(bias);
        for (c, f) in layer.filters.iter().enumerate() {
            let a = &f.map.branches()[0].atoms()[0];
            let base = c * per;
            let mut gamma_ref = 0.0;
            let mut gamma_scale = 0.0;
            for j in 0..d {
                let dw = gc.params[c * d + j];
                let dwa = ga.params[c * d + j];
                worst = worst.max(rel(gk.params[base + j], a.gamma() * dw, a.gamma().abs() * dwa));
                gamma_ref += dw * a.center()[j];
                gamma_scale += dwa * a.center()[j].abs();
            }
            worst = worst.max(rel(gk.params[base + d], gamma_ref, gamma_scale));
            if bias {
                worst = worst.max(rel(gk.params[base + d + 1], gc.params[c_out * d + c], ga.params[c_out * d + c]));
            }
        }
    }
    Ok(worst)
}

/// Gradient audit of a small random `p = 3` layer.
pub fn small_gradient_audit(seed: u64) -> Result<f64> {
    let t = Topology {
        name: None,
        input_channels: 2,
        residual: false,
        blocks: vec![BlockSpec::Kvnn {
            c_in: 2,
            c_out: 3,
            kernel: 3,
            stride: 1,
            pad: Some(1),
            p: 3,
            n: 2,
            m: 1,
            bias: true,
            batchnorm: false,
        }],
    };
    let net = Network::build(&t, seed, InitSpec::default())?;
    let mut g = rng::derived(seed, 7);
    let batch = vec![Sample {
        input: Tensor::new(vec![2, 5, 5], rng::normal_vec(&mut g, 50, 0.5))?,
        target: Tensor::new(vec![3, 5, 5], rng::normal_vec(&mut g, 75, 0.5))?,
    }];
    let cfg = AuditConfig {
        seed,
        ..AuditConfig::default()
    };
    Ok(grad_audit(&net, &batch, &cfg)?.max_rel_error)
}

pub fn run_selfcheck(seed: u64) -> Result<SelfcheckReport> {
    let dncnn = count_params(&Topology::dncnn(17, 64, 1))?;
    let (fit, counts_ok) = exact_fit_error(seed, &[2, 3], &[2, 3], 2, 50)?;
    let checks = vec![
        check("multinomial_identity", multinomial_identity_error(seed, 200)?, 1e-12),
        check("kernel_feature_map", feature_map_error(seed, 200)?, 1e-12),
        check("gram_psd", gram_psd_violation(seed, 60, 3, 4)?, 1e-8),
        check("oracle_equivalence", oracle_equivalence_error(seed, 10, 100)?, 1e-10),
        check("exact_fit", fit, 1e-8),
        check("exact_fit_atom_count", if counts_ok { 0.0 } else { 1.0 }, 0.0),
        check("linear_reduction", linear_reduction_error(seed, 10)?, 1e-12),
        check("gradient_audit", small_gradient_audit(seed)?, 1e-6),
        check("dncnn17_params", (dncnn as f64 - 557_057.0).abs(), 0.0),
    ];
    let pass = checks.iter().all(|c| c.pass);
    Ok(SelfcheckReport { seed, checks, pass })
}
