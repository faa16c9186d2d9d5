use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use kvnn::data::{gen_synthetic_images, load_pgm, save_pgm, NoiseSpec};
use kvnn::experiment::{
    run_denoise_experiment, run_eval, run_krr_baseline, run_toy_classification, DenoiseConfig, KrrBaselineConfig,
    ToyConfig, ToyTask, TopologySource,
};
use kvnn::mkv::fit_exact;
use kvnn::network::{count_flops, count_params, Network, Topology, FLOP_CONVENTION};
use kvnn::selfcheck::run_selfcheck;
use kvnn::tensor::monomial_count;
use kvnn::volterra::random_volterra;
use kvnn::{rng, KvnnError, Tensor};

#[derive(Parser)]
#[command(name = "kvnn", version, about = "Kernelized Volterra filters: counts, fits, checks and desk-scale experiments")]
struct Cli {
    /// Report failures as JSON objects on stderr.
    #[arg(long, global = true)]
    json_errors: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Xor,
    Linear,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic clean images as PGM and KVT files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a denoiser from a JSON config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's topology.
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model on noisy copies of clean images.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Directory of `.pgm` images; synthetic images are generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 25.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter and FLOP counts of topology files.
    Count {
        #[arg(long, required = true, num_args = 1..)]
        topology: Vec<PathBuf>,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long)]
        json: bool,
    },
    /// Fit exact atoms to a random symmetric order-r target and report the residual.
    FitPoly {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        r: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        points: usize,
        #[arg(long, default_value_t = 1e-8)]
        tolerance: f64,
    },
    /// Run the invariant suite.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Stored-center regression versus a fixed number of atoms.
    KrrBaseline {
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Linear versus quadratic model on a synthetic classification task.
    Toy {
        #[arg(long, value_enum, default_value = "xor")]
        task: TaskArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Thousands separators: 557057 -> "557,057".
fn grouped(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn print_json<T: Serialize>(v: &T) -> kvnn::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Outcome of a subcommand: success flag for checks that ran but failed.
type Outcome = kvnn::Result<bool>;

fn gen_data(out: &Path, count: usize, size: usize, seed: u64) -> Outcome {
    let set = gen_synthetic_images(seed, count, size)?;
    std::fs::create_dir_all(out)?;
    for (img, name) in set.images.iter().zip(&set.names) {
        save_pgm(img, out.join(format!("{name}.pgm")))?;
        img.save(out.join(format!("{name}.kvt")))?;
    }
    println!("wrote {count} images ({size}x{size}) to {}", out.display());
    Ok(true)
}

fn train(config: Option<&Path>, topology: Option<&Path>, steps: Option<usize>, seed: Option<u64>, out: &Path) -> Outcome {
    let (mut cfg, base) = match config {
        Some(p) => (DenoiseConfig::load(p)?, p.parent().map(Path::to_path_buf)),
        None => (DenoiseConfig::default(), None),
    };
    if let Some(t) = topology {
        cfg.topology = TopologySource::Inline(Topology::load(t)?);
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let r = run_denoise_experiment(&cfg, base.as_deref(), Some(out))?;
    println!(
        "{}: params {} | GFLOPs {:.4} | PSNR noisy {:.3} dB -> denoised {:.3} dB (gain {:+.3} dB)",
        r.name,
        grouped(r.params as u64),
        r.flops as f64 / 1e9,
        r.psnr_noisy,
        r.psnr_denoised,
        r.gain_db
    );
    println!("outputs in {}", out.display());
    Ok(true)
}

fn eval(model: &Path, data: Option<&Path>, count: usize, size: usize, sigma: f64, seed: u64, out: Option<&Path>) -> Outcome {
    let net = Network::load(model)?;
    let clean: Vec<Tensor> = match data {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(KvnnError::InvalidArgument(format!("no .pgm files in {}", dir.display())));
            }
            paths.iter().map(load_pgm).collect::<kvnn::Result<_>>()?
        }
        None => gen_synthetic_images(rng::sub_seed(seed, 2), count, size)?.images,
    };
    let r = run_eval(&net, &clean, &NoiseSpec::fixed(sigma, rng::sub_seed(seed, 6)), out)?;
    print_json(&r)?;
    Ok(true)
}

#[derive(Serialize)]
struct CountRow {
    topology: String,
    params: usize,
    flops: u64,
    gflops: f64,
    input: (usize, usize),
}

fn count(paths: &[PathBuf], h: usize, w: usize, json: bool) -> Outcome {
    let mut rows = Vec::with_capacity(paths.len());
    for p in paths {
        let t = Topology::load(p)?;
        let f = count_flops(&t, h, w)?;
        rows.push(CountRow {
            topology: t.name.clone().unwrap_or_else(|| p.display().to_string()),
            params: count_params(&t)?,
            flops: f.total,
            gflops: f.gflops(),
            input: (h, w),
        });
    }
    if json {
        print_json(&rows)?;
        return Ok(true);
    }
    println!("{:<24} {:>12} {:>10}", "topology", "params", "GFLOPs");
    for r in &rows {
        println!("{:<24} {:>12} {:>10.3}", r.topology, grouped(r.params as u64), r.gflops);
    }
    println!("input {h}x{w}; {FLOP_CONVENTION}");
    Ok(true)
}

#[derive(Serialize)]
struct FitReport {
    d: usize,
    r: u32,
    atoms: usize,
    expected_atoms: usize,
    condition: f64,
    attempts: u64,
    max_relative_residual: f64,
    tolerance: f64,
    pass: bool,
}

fn fit_poly(d: usize, r: u32, seed: u64, points: usize, tolerance: f64) -> Outcome {
    let coeffs = random_volterra(seed, d, r as usize, 1.0)?;
    let h = coeffs.tensor(r as usize);
    let (branch, info) = fit_exact(h, seed)?;
    let mut g = rng::derived(seed, 0xF17);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let x = rng::normal_vec(&mut g, d, 1.0);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = (h.norm() * norm.powi(r as i32)).max(f64::MIN_POSITIVE);
        worst = worst.max((branch.eval(&x)? - coeffs.eval_order(r as usize, &x)?).abs() / scale);
    }
    let expected = monomial_count(d, r as usize);
    let rep = FitReport {
        d,
        r,
        atoms: branch.len(),
        expected_atoms: expected,
        condition: info.condition,
        attempts: info.attempts,
        max_relative_residual: worst,
        tolerance,
        pass: worst <= tolerance && branch.len() == expected,
    };
    println!(
        "d={d} r={r}: {} atoms (C(d+r-1,r) = {expected}), condition {:.3e}, residual {:.3e} (tolerance {tolerance:e}) {}",
        rep.atoms,
        rep.condition,
        worst,
        if rep.pass { "PASS" } else { "FAIL" }
    );
    Ok(rep.pass)
}

fn selfcheck(seed: u64, json: bool) -> Outcome {
    let r = run_selfcheck(seed)?;
    if json {
        print_json(&r)?;
    } else {
        for c in &r.checks {
            println!(
                "{:<24} {:>12.3e} <= {:<8e} {}",
                c.name,
                c.value,
                c.tolerance,
                if c.pass { "PASS" } else { "FAIL" }
            );
        }
        println!("selfcheck {}", if r.pass { "PASS" } else { "FAIL" });
    }
    Ok(r.pass)
}

fn krr_baseline(d: usize, n_train: usize, seed: u64) -> Outcome {
    let r = run_krr_baseline(&KrrBaselineConfig {
        d,
        n_train,
        seed,
        ..KrrBaselineConfig::default()
    })?;
    print_json(&r)?;
    Ok(r.pass)
}

fn toy(task: TaskArg, seed: u64) -> Outcome {
    let cfg = ToyConfig {
        task: match task {
            TaskArg::Xor => ToyTask::XorOfSigns,
            TaskArg::Linear => ToyTask::Linear,
        },
        seed,
        ..ToyConfig::default()
    };
    print_json(&run_toy_classification(&cfg)?)?;
    Ok(true)
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData { out, count, size, seed } => gen_data(&out, count, size, seed),
        Command::Train {
            config,
            topology,
            steps,
            seed,
            out,
        } => train(config.as_deref(), topology.as_deref(), steps, seed, &out),
        Command::Eval {
            model,
            data,
            count,
            size,
            sigma,
            seed,
            out,
        } => eval(&model, data.as_deref(), count, size, sigma, seed, out.as_deref()),
        Command::Count {
            topology,
            height,
            width,
            json,
        } => count(&topology, height, width, json),
        Command::FitPoly {
            d,
            r,
            seed,
            points,
            tolerance,
        } => fit_poly(d, r, seed, points, tolerance),
        Command::Selfcheck { seed, json } => selfcheck(seed, json),
        Command::KrrBaseline { d, n_train, seed } => krr_baseline(d, n_train, seed),
        Command::Toy { task, seed } => toy(task, seed),
    }
}

fn json_error(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json_errors {
                eprintln!("{}", json_error("usage", e.to_string().trim()));
            } else {
                let _ = e.print();
            }
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            if json_errors {
                eprintln!("{}", json_error("check_failed", "one or more checks failed"));
            }
            ExitCode::from(1)
        }
        Err(e) => {
            if json_errors {
                eprintln!("{}", json_error(e.kind(), &e.to_string()));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(1)
        }
    }
}
