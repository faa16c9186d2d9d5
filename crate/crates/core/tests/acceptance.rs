//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is printed regardless of
//! output capture; exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use kvnn::experiment::{
    run_denoise_experiment, run_krr_baseline, run_toy_classification, DenoiseConfig, KrrBaselineConfig, ToyConfig,
    ToyTask, TopologySource,
};
use kvnn::kernels::{
    concatenated_feature_map, feature_map, gram_psd_check, multi_kernel, poly_kernel, KernelSpec, MultiKernelWeights,
};
use kvnn::layer::{ConvLayer, FilterConfig, Geometry, KvnnLayer};
use kvnn::mkv::{eval_mk, fit_exact, init_mk, map_to_volterra, InitSpec};
use kvnn::network::{count_params, BlockSpec, Network, Topology};
use kvnn::tensor::{abs_dot, binomial, dot};
use kvnn::training::{grad_audit, AuditConfig, Sample};
use kvnn::volterra::{eval_volterra, random_volterra};
use kvnn::{rng, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn kvnn_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kvnn"))
}

fn within(elapsed: Duration, budget: Duration) -> bool {
    elapsed <= budget
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let out = kvnn_bin()
        .args(["count", "--topology"])
        .arg(configs().join("dncnn17.json"))
        .output()
        .expect("run kvnn count");
    let elapsed = t0.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let printed = stdout.lines().any(|l| l.split_whitespace().any(|w| w == "557,057"));
    let lib = count_params(&Topology::dncnn(17, 64, 1)).unwrap();
    Outcome {
        pass: out.status.success() && printed && lib == 557_057 && within(elapsed, Duration::from_secs(1)),
        detail: format!("count printed 557,057: {printed}; library count {lib}; {elapsed:.2?}"),
    }
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut g = rng::seeded(2002);
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let d = g.random_range(2..=6);
        let p = g.random_range(2..=3usize);
        let counts: Vec<usize> = (0..p).map(|_| g.random_range(1..=6)).collect();
        let map = init_mk(rng::sub_seed(2002, k), d, &counts, InitSpec::default()).unwrap();
        let dense = map_to_volterra(&map).unwrap();
        for _ in 0..1000 {
            let x = rng::normal_vec(&mut g, d, 1.0);
            let a = eval_mk(&map, &x).unwrap();
            let b = eval_volterra(&dense, &x).unwrap();
            worst = worst.max((a - b).abs() / map.magnitude(&x));
        }
    }
    let elapsed = t0.elapsed();
    Outcome {
        pass: worst <= 1e-10 && within(elapsed, Duration::from_secs(60)),
        detail: format!("50 maps x 1000 inputs, max rel err {worst:.3e} (tol 1e-10); {elapsed:.2?}"),
    }
}

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let mut g = rng::seeded(3003);
    let mut worst: f64 = 0.0;
    let mut counts_ok = true;
    for d in 2..=5usize {
        for r in [2u32, 3] {
            let expected = binomial((d + r as usize - 1) as u64, u64::from(r)) as usize;
            for t in 0..20u64 {
                let seed = 3003 + 100 * d as u64 + 10 * u64::from(r) + t * 1000;
                let coeffs = random_volterra(seed, d, r as usize, 1.0).unwrap();
                let h = coeffs.tensor(r as usize);
                let (branch, _) = fit_exact(h, seed).unwrap();
                counts_ok &= branch.len() == expected;
                for _ in 0..500 {
                    let x = rng::normal_vec(&mut g, d, 1.0);
                    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let a = branch.eval(&x).unwrap();
                    let b = coeffs.eval_order(r as usize, &x).unwrap();
                    worst = worst.max((a - b).abs() / (h.norm() * nx.powi(r as i32)));
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    Outcome {
        pass: counts_ok && worst <= 1e-8 && within(elapsed, Duration::from_secs(120)),
        detail: format!(
            "160 targets, atoms == C(d+r-1,r): {counts_ok}; max rel err {worst:.3e} (tol 1e-8); {elapsed:.2?}"
        ),
    }
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let mut g = rng::seeded(4004);
    let (mut single, mut multi): (f64, f64) = (0.0, 0.0);
    for _ in 0..500 {
        let d = g.random_range(1..=5);
        let r = g.random_range(1..=4u32);
        let x = rng::normal_vec(&mut g, d, 1.0);
        let y = rng::normal_vec(&mut g, d, 1.0);
        let k = poly_kernel(r, &x, &y).unwrap();
        let f = dot(&feature_map(r, &x).unwrap(), &feature_map(r, &y).unwrap());
        single = single.max((k - f).abs() / abs_dot(&x, &y).powi(r as i32));

        let a = rng::uniform_vec(&mut g, r as usize, 0.0, 1.5);
        let w = MultiKernelWeights::new(a.clone()).unwrap();
        let scale: f64 = (1..=r).map(|q| a[q as usize - 1].powi(2) * abs_dot(&x, &y).powi(q as i32)).sum();
        let mk = multi_kernel(&w, &x, &y).unwrap();
        let mf = dot(
            &concatenated_feature_map(&w, &x).unwrap(),
            &concatenated_feature_map(&w, &y).unwrap(),
        );
        multi = multi.max((mk - mf).abs() / scale);
    }
    let pts: Vec<Vec<f64>> = (0..200).map(|_| rng::normal_vec(&mut g, 4, 0.5)).collect();
    let mut psd_pass = 0;
    let mut worst_min = f64::INFINITY;
    for _ in 0..10 {
        let a = rng::uniform_vec(&mut g, 4, 0.0, 1.0);
        let rep = gram_psd_check(&KernelSpec::Multi(MultiKernelWeights::new(a).unwrap()), &pts, 1e-8).unwrap();
        psd_pass += usize::from(rep.pass);
        worst_min = worst_min.min(rep.min_eig / rep.max_eig.max(1.0));
    }
    let elapsed = t0.elapsed();
    Outcome {
        pass: single <= 1e-12 && multi <= 1e-12 && psd_pass == 10 && within(elapsed, Duration::from_secs(60)),
        detail: format!(
            "single-order {single:.3e}, multi-kernel {multi:.3e} (tol 1e-12); PSD {psd_pass}/10 at tol 1e-8 (worst scaled min eig {worst_min:.3e}); {elapsed:.2?}"
        ),
    }
}

fn audit_case(seed: u64, c_in: usize, c_out: usize, k: usize, p: u32, n: usize, m: usize) -> kvnn::training::AuditReport {
    let t = Topology {
        name: None,
        input_channels: c_in,
        residual: false,
        blocks: vec![BlockSpec::Kvnn {
            c_in,
            c_out,
            kernel: k,
            stride: 1,
            pad: Some(k / 2),
            p,
            n,
            m,
            bias: true,
            batchnorm: false,
        }],
    };
    let net = Network::build(&t, seed, InitSpec::default()).unwrap();
    let mut g = rng::seeded(seed ^ 0x55);
    let batch: Vec<Sample> = (0..2)
        .map(|_| Sample {
            input: Tensor::new(vec![c_in, 6, 6], rng::normal_vec(&mut g, c_in * 36, 0.5)).unwrap(),
            target: Tensor::new(vec![c_out, 6, 6], rng::normal_vec(&mut g, c_out * 36, 0.5)).unwrap(),
        })
        .collect();
    let cfg = AuditConfig {
        seed,
        ..AuditConfig::default()
    };
    grad_audit(&net, &batch, &cfg).unwrap()
}

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let cases = [(1, 24, 3, 1, 0, 0), (3, 4, 3, 2, 2, 0), (3, 3, 3, 3, 2, 2), (2, 4, 3, 3, 1, 1), (1, 4, 5, 3, 3, 2)];
    let mut worst: f64 = 0.0;
    let mut min_params = usize::MAX;
    let mut inputs = 0;
    for (i, &(c_in, c_out, k, p, n, m)) in cases.iter().enumerate() {
        let r = audit_case(5005 + i as u64, c_in, c_out, k, p, n, m);
        worst = worst.max(r.max_rel_error);
        min_params = min_params.min(r.param_checks);
        inputs += r.input_checks;
    }
    let elapsed = t0.elapsed();
    Outcome {
        pass: worst <= 1e-6 && min_params >= 200 && inputs > 0 && within(elapsed, Duration::from_secs(120)),
        detail: format!(
            "5 layers (p=1..3, d=9..27), >= {min_params} params each + {inputs} input entries, max rel err {worst:.3e} (tol 1e-6); {elapsed:.2?}"
        ),
    }
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let mut g = rng::seeded(6006);
    let mut worst: f64 = 0.0;
    for t in 0..20u64 {
        let c_in = g.random_range(1..=3);
        let c_out = g.random_range(1..=4);
        let k = [1, 3, 5][g.random_range(0..3)];
        let geom = Geometry::square(c_in, k, g.random_range(1..=2), g.random_range(0..=k / 2));
        let mut layer = KvnnLayer::random(t, geom, c_out, FilterConfig::new(1, 0, 0, true).unwrap(), InitSpec::default())
            .unwrap();
        for f in &mut layer.filters {
            f.bias = rng::normal(&mut g);
        }
        let d = geom.patch_dim();
        let mut w = Vec::new();
        for f in &layer.filters {
            let a = &f.map.branches()[0].atoms()[0];
            w.extend(a.center().iter().map(|c| a.gamma() * c));
        }
        let b: Vec<f64> = layer.filters.iter().map(|f| f.bias).collect();
        let conv = ConvLayer::new(w.clone(), Some(b.clone()), c_out, geom).unwrap();
        let abs_conv = ConvLayer::new(
            w.iter().map(|v| v.abs()).collect(),
            Some(b.iter().map(|v| v.abs()).collect()),
            c_out,
            geom,
        )
        .unwrap();
        let (h, wd) = (g.random_range(5..=10), g.random_range(5..=10));
        let x = Tensor::new(vec![c_in, h, wd], rng::normal_vec(&mut g, c_in * h * wd, 1.0)).unwrap();
        let ax = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.abs()).collect()).unwrap();
        let (yk, ck) = layer.forward_cached(&x).unwrap();
        let (yc, cc) = conv.forward_cached(&x).unwrap();
        let (ya, ca) = abs_conv.forward_cached(&ax).unwrap();
        for i in 0..yk.len() {
            worst = worst.max((yk.data()[i] - yc.data()[i]).abs() / ya.data()[i]);
        }
        let up = Tensor::new(yk.shape().to_vec(), rng::normal_vec(&mut g, yk.len(), 1.0)).unwrap();
        let aup = Tensor::new(up.shape().to_vec(), up.data().iter().map(|v| v.abs()).collect()).unwrap();
        let gk = layer.backward_cached(&ck, &up).unwrap();
        let gc = conv.backward_cached(&cc, &up).unwrap();
        let ga = abs_conv.backward_cached(&ca, &aup).unwrap();
        for i in 0..x.len() {
            worst = worst.max((gk.input.data()[i] - gc.input.data()[i]).abs() / ga.input.data()[i].max(1e-300));
        }
        for (c, f) in layer.filters.iter().enumerate() {
            let a = &f.map.branches()[0].atoms()[0];
            let base = c * (d + 2);
            for j in 0..d {
                let want = a.gamma() * gc.params[c * d + j];
                let scale = a.gamma().abs() * ga.params[c * d + j];
                worst = worst.max((gk.params[base + j] - want).abs() / scale.max(1e-300));
            }
            let bias_k = gk.params[base + d + 1];
            let bias_c = gc.params[c_out * d + c];
            worst = worst.max((bias_k - bias_c).abs() / ga.params[c_out * d + c].max(1e-300));
        }
    }
    let elapsed = t0.elapsed();
    Outcome {
        pass: worst <= 1e-12 && within(elapsed, Duration::from_secs(10)),
        detail: format!("20 random geometries, forward + backward max rel err {worst:.3e} (tol 1e-12); {elapsed:.2?}"),
    }
}

fn criterion_7() -> Outcome {
    let base = configs();
    let budget = Duration::from_secs(600);
    let t0 = Instant::now();
    let kv_cfg = DenoiseConfig::load(base.join("denoise_kvnn5.json")).unwrap();
    let kv = run_denoise_experiment(&kv_cfg, Some(&base), None).unwrap();
    let t_kv = t0.elapsed();
    let t1 = Instant::now();
    let cv_cfg = DenoiseConfig::load(base.join("denoise_conv9.json")).unwrap();
    let cv = run_denoise_experiment(&cv_cfg, Some(&base), None).unwrap();
    let t_cv = t1.elapsed();
    let fewer = kv.params < cv.params;
    let gap = cv.psnr_denoised - kv.psnr_denoised;
    Outcome {
        pass: kv.gain_db >= 3.0 && fewer && gap <= 0.3 && within(t_kv, budget) && within(t_cv, budget),
        detail: format!(
            "kVNN-5 {} params: {:.2} -> {:.2} dB (gain {:.2} dB, need >= 3); conv-9 {} params: {:.2} dB; baseline minus kVNN {:+.2} dB (need <= 0.3); {t_kv:.1?} / {t_cv:.1?}",
            kv.params, kv.psnr_noisy, kv.psnr_denoised, kv.gain_db, cv.params, cv.psnr_denoised, gap
        ),
    }
}

fn criterion_8() -> Outcome {
    let t0 = Instant::now();
    let r = run_toy_classification(&ToyConfig::default()).unwrap();
    let elapsed = t0.elapsed();
    Outcome {
        pass: r.quadratic.test_accuracy >= 0.95
            && r.linear.test_accuracy <= 0.60
            && within(elapsed, Duration::from_secs(300)),
        detail: format!(
            "XOR-of-signs test accuracy p=2 {:.4} (need >= 0.95), p=1 {:.4} (need <= 0.60); quadratic logistic reference {:.4}; {elapsed:.2?}",
            r.quadratic.test_accuracy, r.linear.test_accuracy, r.quadratic_oracle_accuracy
        ),
    }
}

fn criterion_9() -> Outcome {
    let t0 = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for d in 2..=5 {
        let r = run_krr_baseline(&KrrBaselineConfig {
            d,
            seed: 9009 + d as u64,
            ..KrrBaselineConfig::default()
        })
        .unwrap();
        let bound = binomial(d as u64 + 1, 2) as usize;
        ok &= r.krr_stored_centers == r.n_train
            && r.kvnn_atoms <= bound
            && r.kvnn_test_mse <= 1.1 * r.krr_test_mse;
        parts.push(format!(
            "d={d}: {} centers vs {} atoms, mse {:.3e} vs {:.3e}",
            r.krr_stored_centers, r.kvnn_atoms, r.krr_test_mse, r.kvnn_test_mse
        ));
    }
    let elapsed = t0.elapsed();
    Outcome {
        pass: ok && within(elapsed, Duration::from_secs(60)),
        detail: format!("{}; {elapsed:.2?}", parts.join("; ")),
    }
}

fn run_train(cfg: &Path, out: &Path) -> bool {
    kvnn_bin()
        .args(["train", "--config"])
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn criterion_10() -> Outcome {
    let selfcheck = || {
        kvnn_bin()
            .args(["selfcheck", "--json", "--seed", "10"])
            .output()
            .expect("run selfcheck")
    };
    let (a, b) = (selfcheck(), selfcheck());
    let self_ok = a.status.success() && a.stdout == b.stdout;

    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = DenoiseConfig::load(configs().join("denoise_kvnn5.json")).unwrap();
    cfg.topology = TopologySource::Inline(Topology::load(configs().join("kvnn5_p2.json")).unwrap());
    cfg.steps = 20;
    cfg.eval_every = 10;
    let cfg_path = tmp.path().join("short.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let (o1, o2) = (tmp.path().join("run1"), tmp.path().join("run2"));
    let trained = run_train(&cfg_path, &o1) && run_train(&cfg_path, &o2);
    let same = |f: &str| std::fs::read(o1.join(f)).ok().is_some_and(|x| Some(x) == std::fs::read(o2.join(f)).ok());
    let files_ok = trained && ["manifest.json", "metrics.csv", "model/layer_00.kvt", "model/layer_04.kvt"].iter().all(|f| same(f));

    let toy = ToyConfig {
        task: ToyTask::XorOfSigns,
        steps: 200,
        ..ToyConfig::default()
    };
    let toy_ok = run_toy_classification(&toy).unwrap() == run_toy_classification(&toy).unwrap();
    let krr = KrrBaselineConfig::default();
    let krr_ok = run_krr_baseline(&krr).unwrap() == run_krr_baseline(&krr).unwrap();
    Outcome {
        pass: self_ok && files_ok && toy_ok && krr_ok,
        detail: format!(
            "selfcheck json identical: {self_ok}; train manifest/metrics/model identical: {files_ok}; toy identical: {toy_ok}; krr identical: {krr_ok}"
        ),
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 parameter count", criterion_1),
        ("2 oracle equivalence", criterion_2),
        ("3 exact atomic fit", criterion_3),
        ("4 kernel identities and PSD", criterion_4),
        ("5 gradient audit", criterion_5),
        ("6 linear reduction", criterion_6),
        ("7 desk-scale denoising", criterion_7),
        ("8 higher-order expressivity", criterion_8),
        ("9 stored centers vs atoms", criterion_9),
        ("10 determinism", criterion_10),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|w| name.contains(w.as_str())) {
            continue;
        }
        let o = f();
        println!("criterion {name}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
