//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The MNIST criteria (5 and 6) read finished runs from
//! `$ALPHAPOOL_ACCEPT_RUNS` (default `<target>/tmp/acceptance-runs`), as
//! written by `scripts/run_mnist_experiments.sh`. Set `ALPHAPOOL_ACCEPT_TRAIN=1`
//! to train missing runs here, `ALPHAPOOL_ACCEPT_FRESH=1` to retrain all of
//! them. The process exits 0 unless `ALPHAPOOL_ACCEPT_STRICT=1`, in which case
//! any FAIL gives exit code 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use alphapool::alpha::alpha_pool_forward;
use alphapool::checkpoint::Checkpoint;
use alphapool::config::{DatasetKind, TrainConfig};
use alphapool::data::{
    load_idx, load_mnist, read_cifar_batch, write_cifar_batch, write_idx_images, write_idx_labels, Dataset, Split,
};
use alphapool::experiment::{
    cmd_alpha_sweep, cmd_train, eval_checkpoint, load_dataset, read_alpha_trace, read_metrics, train_on,
    DATA_DIR_ENV,
};
use alphapool::gradcheck::{check_model, standard_suite, tiny_model, GradcheckOptions};
use alphapool::{PoolGeometry, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), String>;

const SEEDS: [u64; 3] = [1, 2, 3];
const EPOCHS: usize = 15;
const CPU_BUDGET_SECONDS: f64 = 30.0 * 60.0;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_dir() -> PathBuf {
    match std::env::var(DATA_DIR_ENV) {
        Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => workspace().join("data/mnist"),
    }
}

fn flag(name: &str) -> bool {
    std::env::var(name).map_or(false, |v| v == "1")
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn pool_windows(windows: &[[f64; 4]], alpha: f64) -> Result<Vec<f64>, String> {
    let data = windows.iter().flatten().copied().collect();
    let x = Tensor::from_vec(&[windows.len(), 1, 2, 2], data).map_err(err)?;
    let (y, _) = alpha_pool_forward(&x, PoolGeometry::square(2).map_err(err)?, alpha, "accept").map_err(err)?;
    Ok(y.as_slice().to_vec())
}

fn special_cases() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let log_uniform = |rng: &mut ChaCha8Rng| 10f64.powf(rng.gen_range(-3.0..1.0));
    let windows: Vec<[f64; 4]> = (0..1000).map(|_| std::array::from_fn(|_| log_uniform(&mut rng))).collect();

    type Oracle = fn(&[f64; 4]) -> f64;
    let arithmetic: Oracle = |w| w.iter().sum::<f64>() / 4.0;
    let geometric: Oracle = |w| (w.iter().map(|v| v.ln()).sum::<f64>() / 4.0).exp();
    let harmonic: Oracle = |w| 4.0 / w.iter().map(|v| 1.0 / v).sum::<f64>();
    let mut ok = true;
    let mut parts = Vec::new();
    for (alpha, oracle, name) in [(-1.0, arithmetic, "arith"), (1.0, geometric, "geo"), (3.0, harmonic, "harm")] {
        let y = pool_windows(&windows, alpha)?;
        let worst = windows.iter().zip(&y).map(|(w, &y)| rel(y, oracle(w))).fold(0.0, f64::max);
        ok &= worst <= 1e-9;
        parts.push(format!("{name} worst rel {worst:.2e}"));
    }

    let mut distinct = Vec::with_capacity(1000);
    while distinct.len() < 1000 {
        let w: [f64; 4] = std::array::from_fn(|_| rng.gen_range(1e-3..10.0));
        let mut sorted = w;
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted[0] >= 1.1 * sorted[1] {
            distinct.push(w);
        }
    }
    let y = pool_windows(&distinct, -30.0)?;
    let max = |w: &[f64; 4]| w.iter().copied().fold(f64::MIN, f64::max);
    let worst = distinct.iter().zip(&y).map(|(w, &y)| rel(y, max(w))).fold(0.0, f64::max);
    ok &= worst <= 1e-3;
    parts.push(format!("alpha=-30 vs max worst rel {worst:.3e} (tol 1e-3)"));
    Ok((ok, parts.join(", ")))
}

fn sweep() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("sweep.csv");
    let rows = cmd_alpha_sweep(&[1.0, 2.0], -10.0, 10.0, 201, Some(&path)).map_err(err)?;
    let text = fs::read_to_string(&path).map_err(err)?;
    let column: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).and_then(|v| v.parse().ok()).ok_or_else(|| format!("bad row `{l}`")))
        .collect::<Result<_, _>>()?;
    if column.len() != 201 || column.iter().zip(&rows).any(|(a, (_, b))| a != b) {
        return Err("CSV does not match the computed sweep".into());
    }
    let monotone = column.windows(2).all(|p| p[1] <= p[0]);
    let (first, last) = (column[0], column[200]);
    Ok((
        monotone && first >= 1.99 && last <= 1.01,
        format!("non-increasing={monotone}, first={first:.6} (>= 1.99), last={last:.6} (<= 1.01)"),
    ))
}

fn gradient_suite() -> Check {
    let reports = standard_suite(7, GradcheckOptions::default(), None).map_err(err)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = reports.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
    let skipped: usize = reports.iter().map(|r| r.skipped_kinks).sum();
    Ok((
        failed.is_empty(),
        format!(
            "{} checks, worst rel {worst:.2e} (tol 1e-5), {skipped} kink coordinates skipped, failed: {failed:?}",
            reports.len()
        ),
    ))
}

fn tiny_end_to_end() -> Check {
    let opts = GradcheckOptions {
        tolerance: 1e-4,
        ..GradcheckOptions::default()
    };
    // Min-leaning alphas (>= 1) pool the ReLU+ floor (1e-8) in this model;
    // the resulting ~1e-10 gradients are below what h = 1e-6 can resolve.
    const ALPHAS: [f64; 4] = [-8.0, -3.0, -1.0, 0.5];
    let mut ok = true;
    let mut worst = 0.0f64;
    let mut alpha_checked = 0;
    for alpha in ALPHAS {
        let (mut model, x, labels) = tiny_model(7, alpha, None).map_err(err)?;
        let report = check_model(&mut model, &x, &labels, opts).map_err(err)?;
        ok &= report.passed();
        worst = worst.max(report.max_rel_err());
        alpha_checked += report.per_tensor.iter().filter(|(name, _)| name.ends_with(".alpha")).count();
    }
    ok &= alpha_checked == ALPHAS.len();
    Ok((
        ok,
        format!("alpha in {ALPHAS:?}: worst rel {worst:.2e} (tol 1e-4), alpha checked in {alpha_checked} models"),
    ))
}

fn run_config(pool: &str, seed: u64, runs: &Path) -> Result<TrainConfig, String> {
    let mut cfg = TrainConfig::load(&workspace().join("configs/mnist_simplecnn.cfg")).map_err(err)?;
    cfg.set("pool", pool).map_err(err)?;
    cfg.seed = seed;
    cfg.epochs = EPOCHS;
    cfg.data_dir = mnist_dir();
    cfg.out_dir = runs.join(format!("mnist-{pool}-seed{seed}"));
    Ok(cfg)
}

struct Run {
    pool: String,
    seed: u64,
    dir: PathBuf,
    test_acc: f64,
    cpu_seconds: Option<f64>,
}

fn run_is_complete(cfg: &TrainConfig) -> bool {
    let dir = &cfg.out_dir;
    let same_key = TrainConfig::load(&dir.join("config.cfg")).map_or(false, |c| c.experiment_key() == cfg.experiment_key());
    same_key
        && dir.join("checkpoint.bin").exists()
        && read_metrics(&dir.join("metrics.csv")).map_or(false, |m| m.len() == cfg.epochs)
}

fn cpu_seconds(dir: &Path) -> Option<f64> {
    let text = fs::read_to_string(dir.join("timing.csv")).ok()?;
    text.lines().skip(1).map(|l| l.split(',').nth(2)?.parse::<f64>().ok()).sum()
}

/// Finished MNIST runs for both pools, training missing ones when allowed.
/// Each checkpoint is re-evaluated on the test set and must reproduce the
/// logged final accuracy.
fn mnist_runs() -> Result<Vec<Run>, String> {
    let runs_root = std::env::var("ALPHAPOOL_ACCEPT_RUNS")
        .map(PathBuf::from)
        .unwrap_or_else(|_| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-runs"));
    let (train, fresh) = (flag("ALPHAPOOL_ACCEPT_TRAIN"), flag("ALPHAPOOL_ACCEPT_FRESH"));
    let test = load_mnist(&mnist_dir(), Split::Test).map_err(|e| format!("MNIST not available: {e}"))?;
    let mut out = Vec::new();
    for pool in ["alphaI", "max"] {
        for seed in SEEDS {
            let cfg = run_config(pool, seed, &runs_root)?;
            if fresh || !run_is_complete(&cfg) {
                if !(train || fresh) {
                    return Err(format!(
                        "missing run {}; run scripts/run_mnist_experiments.sh or set ALPHAPOOL_ACCEPT_TRAIN=1",
                        cfg.out_dir.display()
                    ));
                }
                if cfg.out_dir.exists() {
                    fs::remove_dir_all(&cfg.out_dir).map_err(err)?;
                }
                cmd_train(&cfg).map_err(err)?;
            }
            let metrics = read_metrics(&cfg.out_dir.join("metrics.csv")).map_err(err)?;
            let logged = metrics.last().map(|m| m.test_acc).unwrap_or(f64::NAN);
            let checkpoint = Checkpoint::load(&cfg.out_dir.join("checkpoint.bin")).map_err(err)?;
            let measured = eval_checkpoint(&checkpoint, &cfg, &test).map_err(err)?.accuracy();
            if measured != logged {
                return Err(format!("{}: checkpoint gives {measured}, log says {logged}", cfg.out_dir.display()));
            }
            out.push(Run {
                pool: pool.to_string(),
                seed,
                cpu_seconds: cpu_seconds(&cfg.out_dir),
                dir: cfg.out_dir,
                test_acc: measured,
            });
        }
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mnist_accuracy(runs: &[Run]) -> Check {
    let accs = |pool: &str| -> Vec<f64> { runs.iter().filter(|r| r.pool == pool).map(|r| r.test_acc).collect() };
    let (alpha, max) = (accs("alphaI"), accs("max"));
    let (ma, mm) = (mean(&alpha) * 100.0, mean(&max) * 100.0);
    let cpu: Vec<f64> = runs.iter().filter_map(|r| r.cpu_seconds).collect();
    let worst_cpu = cpu.iter().copied().fold(0.0, f64::max);
    let per_pool_cpu = |pool: &str| {
        let v: Vec<f64> = runs.iter().filter(|r| r.pool == pool).filter_map(|r| r.cpu_seconds).collect();
        mean(&v) / 60.0
    };
    let runtime_ok = cpu.len() == runs.len() && worst_cpu <= CPU_BUDGET_SECONDS;
    let ok = ma >= 98.0 && ma >= mm - 0.15 && runtime_ok;
    Ok((
        ok,
        format!(
            "alphaI mean {ma:.3}% {alpha:?}, max mean {mm:.3}% {max:?}; CPU per run: alphaI {:.1} min, max {:.1} min, worst {:.1} min (budget 30)",
            per_pool_cpu("alphaI"),
            per_pool_cpu("max"),
            worst_cpu / 60.0
        ),
    ))
}

fn population_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

fn alpha_convergence(runs: &[Run]) -> Check {
    let mut ok = true;
    let mut differing = 0;
    let mut parts = Vec::new();
    for run in runs.iter().filter(|r| r.pool == "alphaI") {
        let trace = read_alpha_trace(&run.dir.join("alpha_trace.csv")).map_err(err)?;
        let in_range = trace.iter().all(|(_, _, a)| a.len() == 2 && a.iter().all(|v| (-30.0..=30.0).contains(v)));
        let metrics = read_metrics(&run.dir.join("metrics.csv")).map_err(err)?;
        let tail = &metrics[metrics.len() - 10..];
        let layer = |i: usize| -> Vec<f64> { tail.iter().map(|m| m.alphas[i].unwrap_or(f64::NAN)).collect() };
        let (a1, a2) = (layer(0), layer(1));
        let (s1, s2) = (population_std(&a1), population_std(&a2));
        let gap = (a1[9] - a2[9]).abs();
        ok &= in_range && s1 < 0.05 && s2 < 0.05;
        if gap > 0.1 {
            differing += 1;
        }
        parts.push(format!(
            "seed {}: final ({:.3}, {:.3}) std ({s1:.4}, {s2:.4}) gap {gap:.3} in_range={in_range}",
            run.seed, a1[9], a2[9]
        ));
    }
    ok &= differing >= 2;
    Ok((ok, format!("{}; seeds with gap > 0.1: {differing}/3", parts.join("; "))))
}

/// Real MNIST when present, otherwise a deterministic synthetic stand-in.
fn small_mnist(train: usize, test: usize) -> Result<(Dataset, Dataset, &'static str), String> {
    let dir = mnist_dir();
    if let (Ok(a), Ok(b)) = (load_mnist(&dir, Split::Train), load_mnist(&dir, Split::Test)) {
        return Ok((a.truncated(train).map_err(err)?, b.truncated(test).map_err(err)?, "MNIST subset"));
    }
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (prefix, n) in [("train", train), ("t10k", test)] {
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let pixels: Vec<u8> = labels
            .iter()
            .flat_map(|&l| (0..784).map(move |p| if p % 10 == l as usize { 230 } else { (p * 3 % 50) as u8 }))
            .collect();
        write_idx_images(&tmp.path().join(format!("{prefix}-images-idx3-ubyte")), 28, 28, &pixels).map_err(err)?;
        write_idx_labels(&tmp.path().join(format!("{prefix}-labels-idx1-ubyte")), &labels).map_err(err)?;
    }
    let a = load_dataset(DatasetKind::Mnist, tmp.path(), Split::Train).map_err(err)?;
    let b = load_dataset(DatasetKind::Mnist, tmp.path(), Split::Test).map_err(err)?;
    Ok((a, b, "synthetic data"))
}

fn frozen_alpha_matches_avg() -> Check {
    let (train, test, source) = small_mnist(2000, 500)?;
    let runs = tempfile::tempdir().map_err(err)?;
    let mut losses = Vec::new();
    for pool in ["avg", "alphaI"] {
        let mut cfg = TrainConfig::default();
        for (k, v) in [
            ("pool", pool),
            ("epochs", "3"),
            ("precision", "f64"),
            ("activation", "relu_plus"),
            ("alpha_init", "-1"),
            ("alpha_freeze", "true"),
            ("conv_channels", "8,16"),
        ] {
            cfg.set(k, v).map_err(err)?;
        }
        cfg.out_dir = runs.path().join(pool);
        let outcome = train_on(&cfg, &train, &test).map_err(err)?;
        losses.push(outcome.records.iter().map(|r| r.train_loss).collect::<Vec<_>>());
    }
    let worst = losses[0].iter().zip(&losses[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((
        losses[0].len() == 3 && worst <= 1e-6,
        format!("{source}, f64, 3 epochs: avg {:?} vs alphaI {:?}, worst diff {worst:.2e} (tol 1e-6)", losses[0], losses[1]),
    ))
}

fn loaders() -> Check {
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, rows, cols) = (37, 28, 28);
    let pixels: Vec<u8> = (0..n * rows * cols).map(|_| rng.gen()).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..10)).collect();
    let (img, lab) = (tmp.path().join("img"), tmp.path().join("lab"));
    write_idx_images(&img, rows, cols, &pixels).map_err(err)?;
    write_idx_labels(&lab, &labels).map_err(err)?;
    let ds = load_idx(&img, &lab, Split::Train).map_err(err)?;
    let idx_ok = ds.images.dims() == [n, 1, rows, cols]
        && ds.labels.iter().zip(&labels).all(|(&a, &b)| a == b as usize)
        && ds.images.as_slice().iter().zip(&pixels).all(|(&v, &p)| v == p as f32 / 255.0);

    let cifar_labels: Vec<u8> = (0..10_000).map(|_| rng.gen_range(0..10)).collect();
    let cifar_pixels: Vec<u8> = (0..10_000 * 3072).map(|_| rng.gen()).collect();
    let bin = tmp.path().join("data_batch_1.bin");
    write_cifar_batch(&bin, &cifar_labels, &cifar_pixels).map_err(err)?;
    let (l2, p2) = read_cifar_batch(&bin).map_err(err)?;
    let cifar_ok = l2 == cifar_labels && p2 == cifar_pixels;

    let dir = mnist_dir();
    let real = match (load_mnist(&dir, Split::Train), load_mnist(&dir, Split::Test)) {
        (Ok(train), Ok(test)) => {
            let in_unit = |d: &Dataset| d.images.as_slice().iter().all(|v| (0.0..=1.0).contains(v));
            Ok((train.len(), test.len(), in_unit(&train) && in_unit(&test)))
        }
        (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
    };
    let (real_ok, real_msg) = match real {
        Ok((a, b, unit)) => (a == 60_000 && b == 10_000 && unit, format!("MNIST {a}/{b}, pixels in [0,1]: {unit}")),
        Err(e) => (false, format!("MNIST not available: {e}")),
    };
    Ok((
        idx_ok && cifar_ok && real_ok,
        format!("IDX round trip {idx_ok}, CIFAR round trip {cifar_ok}, {real_msg}"),
    ))
}

fn determinism() -> Check {
    let (train, test, source) = small_mnist(1000, 300)?;
    let runs = tempfile::tempdir().map_err(err)?;
    let mut dirs = Vec::new();
    for name in ["a", "b"] {
        let mut cfg = TrainConfig::default();
        for (k, v) in [("epochs", "2"), ("conv_channels", "4,8"), ("checkpoint_interval", "1"), ("seed", "11")] {
            cfg.set(k, v).map_err(err)?;
        }
        cfg.out_dir = runs.path().join(name);
        train_on(&cfg, &train, &test).map_err(err)?;
        dirs.push(cfg.out_dir);
    }
    let files = ["metrics.csv", "alpha_trace.csv", "checkpoint.bin", "checkpoint_epoch1.bin"];
    let mut differing = Vec::new();
    for f in files {
        let (a, b) = (fs::read(dirs[0].join(f)).map_err(err)?, fs::read(dirs[1].join(f)).map_err(err)?);
        if a != b {
            differing.push(f);
        }
    }
    Ok((
        differing.is_empty(),
        format!("{source}, 2 epochs twice: {} files compared, differing: {differing:?}", files.len()),
    ))
}

fn report(name: &str, start: Instant, check: Check) -> bool {
    let (pass, detail) = check.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!(
        "{} criterion {name}: {detail} [{:.1}s]",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    pass
}

fn main() -> ExitCode {
    let simple: [(&str, fn() -> Check); 4] = [
        ("1 special-case means", special_cases),
        ("2 alpha sweep monotonicity", sweep),
        ("3 layer gradient suite", gradient_suite),
        ("4 tiny model end to end", tiny_end_to_end),
    ];
    let mut passed = 0;
    for (name, check) in simple {
        passed += usize::from(report(name, Instant::now(), check()));
    }
    let start = Instant::now();
    let runs = mnist_runs();
    let with_runs = |f: fn(&[Run]) -> Check| runs.as_ref().map_err(Clone::clone).and_then(|r| f(r));
    passed += usize::from(report("5 MNIST accuracy and runtime", start, with_runs(mnist_accuracy)));
    passed += usize::from(report("6 alpha convergence", Instant::now(), with_runs(alpha_convergence)));
    let rest: [(&str, fn() -> Check); 3] = [
        ("7 frozen alpha=-1 equals avg", frozen_alpha_matches_avg),
        ("8 loaders", loaders),
        ("9 determinism", determinism),
    ];
    for (name, check) in rest {
        passed += usize::from(report(name, Instant::now(), check()));
    }
    let failures = 9 - passed;
    println!("acceptance: {failures} of 9 criteria failed");
    if failures > 0 && flag("ALPHAPOOL_ACCEPT_STRICT") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
