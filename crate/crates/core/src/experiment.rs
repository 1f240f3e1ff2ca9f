//! Training, evaluation, alpha sweeps and the gradient-check report behind
//! the `alphapool` binary.
//!
//! A training run writes into its output directory:
//!
//! - `config.cfg`: the full config as run
//! - `metrics.csv`: one row per epoch (schema line, then header)
//! - `alpha_trace.csv`: alpha values every `trace_interval` batches
//! - `timing.csv`: wall-clock and process CPU seconds per epoch, kept apart
//!   so the other files depend only on config and seed
//! - `checkpoint.bin`, plus `checkpoint_epoch{N}.bin` at the configured interval

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alpha::alpha_integrate;
use crate::checkpoint::Checkpoint;
use crate::config::{DatasetKind, Precision, TrainConfig};
use crate::data::{augment_pad_crop, batch_iter, load_cifar10, load_mnist, Dataset, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{standard_suite, GradReport, GradcheckOptions};
use crate::model::{build_model, count_correct, Model, PoolKind};
use crate::optim::Sgd;
use crate::tensor::Scalar;

pub const METRICS_SCHEMA: &str = "# alphapool metrics v1";
pub const DATA_DIR_ENV: &str = "ALPHAPOOL_DATA_DIR";

/// One epoch of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
    /// One entry per pooling stage; `None` for pools without an alpha.
    pub alphas: Vec<Option<f64>>,
    /// Not written to `metrics.csv`; see `timing.csv`.
    pub wall_seconds: f64,
}

/// CPU time used by this process so far (user plus system), if available.
pub fn process_cpu_seconds() -> Option<f64> {
    #[cfg(unix)]
    {
        let mut usage = std::mem::MaybeUninit::<libc::rusage>::uninit();
        // SAFETY: getrusage fills the struct when it returns 0.
        let usage = unsafe {
            if libc::getrusage(libc::RUSAGE_SELF, usage.as_mut_ptr()) != 0 {
                return None;
            }
            usage.assume_init()
        };
        let secs = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 * 1e-6;
        Some(secs(usage.ru_utime) + secs(usage.ru_stime))
    }
    #[cfg(not(unix))]
    {
        None
    }
}

fn metrics_header(stages: usize) -> String {
    let mut h = format!("{METRICS_SCHEMA}\nepoch,train_loss,train_acc,test_acc,lr");
    for i in 1..=stages {
        let _ = write!(h, ",alpha_{i}");
    }
    h.push('\n');
    h
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{}",
            self.epoch, self.train_loss, self.train_acc, self.test_acc, self.lr
        );
        for a in &self.alphas {
            row.push(',');
            row.push_str(&opt_cell(*a));
        }
        row.push('\n');
        row
    }
}

/// Parses a `metrics.csv` written by [`cmd_train`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_SCHEMA) {
        return Err(Error::format(path, "missing metrics schema line"));
    }
    let header = lines.next().ok_or_else(|| Error::format(path, "missing header"))?;
    let stages = header.split(',').filter(|c| c.starts_with("alpha_")).count();
    let num = |cell: &str| -> Result<f64> {
        cell.parse()
            .map_err(|_| Error::format(path, format!("bad number `{cell}`")))
    };
    lines
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 5 + stages {
                return Err(Error::format(path, format!("expected {} cells in `{line}`", 5 + stages)));
            }
            Ok(MetricsRecord {
                epoch: num(cells[0])? as usize,
                train_loss: num(cells[1])?,
                train_acc: num(cells[2])?,
                test_acc: num(cells[3])?,
                lr: num(cells[4])?,
                alphas: cells[5..]
                    .iter()
                    .map(|c| if c.is_empty() { Ok(None) } else { num(c).map(Some) })
                    .collect::<Result<_>>()?,
                wall_seconds: 0.0,
            })
        })
        .collect()
}

/// Parses an `alpha_trace.csv`: rows of `(epoch, batch, alphas)`.
pub fn read_alpha_trace(path: &Path) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            let bad = || Error::format(path, format!("bad trace row `{line}`"));
            if cells.len() < 2 {
                return Err(bad());
            }
            let alphas = cells[2..]
                .iter()
                .filter(|c| !c.is_empty())
                .map(|c| c.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            Ok((
                cells[0].parse().map_err(|_| bad())?,
                cells[1].parse().map_err(|_| bad())?,
                alphas,
            ))
        })
        .collect()
}

/// Command-line value, then `ALPHAPOOL_DATA_DIR`, then the config value.
pub fn resolve_data_dir(cli: Option<&Path>, env: Option<&str>, config: &Path) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| config.to_path_buf())
}

pub fn load_dataset(kind: DatasetKind, dir: &Path, split: Split) -> Result<Dataset> {
    match kind {
        DatasetKind::Mnist => load_mnist(dir, split),
        DatasetKind::Cifar10 => load_cifar10(dir, split),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub correct: usize,
    pub total: usize,
    pub mean_loss: f64,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Accuracy and mean loss over `dataset`, in order, without augmentation.
pub fn evaluate<T: Scalar>(model: &mut Model<T>, dataset: &Dataset, batch_size: usize) -> Result<EvalResult> {
    let (c, h, w) = dataset.image_dims();
    let expected = model.input();
    if (c, h, w) != expected {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            expected: vec![expected.0, expected.1, expected.2],
            got: vec![c, h, w],
        });
    }
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut correct = 0;
    let mut loss_sum = 0.0;
    for batch in batch_iter(dataset, batch_size, false, &mut unused)? {
        let x = batch.images.cast::<T>();
        let logits = model.infer(&x)?;
        correct += count_correct(&logits, &batch.labels);
        let (loss, _) = crate::layers::softmax_cross_entropy(&logits, &batch.labels)?;
        loss_sum += loss * batch.labels.len() as f64;
    }
    Ok(EvalResult {
        correct,
        total: dataset.len(),
        mean_loss: loss_sum / dataset.len() as f64,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
}

impl TrainOutcome {
    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("at least one epoch")
    }
}

/// Loads the configured data and trains.
pub fn cmd_train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let train = load_dataset(config.dataset, &config.data_dir, Split::Train)?.truncated(config.train_limit)?;
    let test = load_dataset(config.dataset, &config.data_dir, Split::Test)?.truncated(config.test_limit)?;
    train_on(config, &train, &test)
}

/// Trains on already-loaded data, writing artifacts to `config.out_dir`.
pub fn train_on(config: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    match config.precision {
        Precision::F32 => train_generic::<f32>(config, train, test),
        Precision::F64 => train_generic::<f64>(config, train, test),
    }
}

fn stage_alphas<T: Scalar>(model: &Model<T>, pool: PoolKind, stages: usize) -> Vec<Option<f64>> {
    if pool == PoolKind::AlphaI {
        model.alphas().into_iter().map(Some).collect()
    } else {
        vec![None; stages]
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn emit(out: &mut BufWriter<File>, path: &Path, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

fn train_generic<T: Scalar>(config: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    let model_config = config.model_config()?;
    if train.image_dims() != model_config.input {
        let (c, h, w) = model_config.input;
        let got = train.image_dims();
        return Err(Error::ShapeMismatch {
            op: "training data",
            expected: vec![c, h, w],
            got: vec![got.0, got.1, got.2],
        });
    }
    let out_dir = config.out_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let config_path = out_dir.join("config.cfg");
    fs::write(&config_path, config.to_text()).map_err(|e| Error::io(&config_path, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model: Model<T> = build_model(&model_config, &mut rng)?;
    let mut sgd = Sgd::new(config.lr, config.momentum, config.weight_decay);
    let schedule = config.schedule()?;
    let stages = model_config.conv_channels.len();
    let pad = config.augment_pad();

    let metrics_path = out_dir.join("metrics.csv");
    let trace_path = out_dir.join("alpha_trace.csv");
    let timing_path = out_dir.join("timing.csv");
    let mut metrics = create(&metrics_path)?;
    let mut trace = create(&trace_path)?;
    let mut timing = create(&timing_path)?;
    emit(&mut metrics, &metrics_path, &metrics_header(stages))?;
    let mut trace_header = String::from("epoch,batch");
    for i in 1..=stages {
        let _ = write!(trace_header, ",alpha_{i}");
    }
    trace_header.push('\n');
    emit(&mut trace, &trace_path, &trace_header)?;
    emit(&mut timing, &timing_path, "epoch,seconds,cpu_seconds\n")?;
    let trace_row = |epoch: usize, batch: usize, model: &Model<T>| -> String {
        let cells: Vec<String> = stage_alphas(model, config.pool, stages).into_iter().map(opt_cell).collect();
        format!("{epoch},{batch},{}\n", cells.join(","))
    };
    emit(&mut trace, &trace_path, &trace_row(0, 0, &model))?;

    let checkpoint_text = config.experiment_key();
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let cpu_started = process_cpu_seconds();
        let lr = schedule.lr_at(epoch);
        sgd.learning_rate = lr;
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut seen = 0;
        let batches: Vec<_> = batch_iter(train, config.batch_size, true, &mut rng)?.collect();
        for (b, batch) in batches.into_iter().enumerate() {
            let batch = if pad > 0 { augment_pad_crop(&batch, pad, &mut rng) } else { batch };
            let x = batch.images.cast::<T>();
            let (loss, hits) = model.loss_and_grad(&x, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b + 1,
                });
            }
            sgd.step(model.params_mut())?;
            let n = batch.labels.len();
            loss_sum += loss * n as f64;
            correct += hits;
            seen += n;
            if config.trace_interval > 0 && (b + 1) % config.trace_interval == 0 {
                emit(&mut trace, &trace_path, &trace_row(epoch + 1, b + 1, &model))?;
            }
        }
        let batches_done = seen.div_ceil(config.batch_size);
        if config.trace_interval == 0 || batches_done % config.trace_interval != 0 {
            emit(&mut trace, &trace_path, &trace_row(epoch + 1, batches_done, &model))?;
        }
        let eval = evaluate(&mut model, test, config.eval_batch_size)?;
        let record = MetricsRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc: eval.accuracy(),
            lr,
            alphas: stage_alphas(&model, config.pool, stages),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        emit(&mut metrics, &metrics_path, &record.csv_row())?;
        emit(
            &mut timing,
            &timing_path,
            &format!(
                "{},{:.3},{}\n",
                record.epoch,
                record.wall_seconds,
                process_cpu_seconds()
                    .zip(cpu_started)
                    .map_or(String::new(), |(now, then)| format!("{:.3}", now - then))
            ),
        )?;
        let alphas: Vec<String> = record.alphas.iter().flatten().map(|a| format!("{a:.4}")).collect();
        eprintln!(
            "epoch {:>3}/{} loss {:.5} train {:.4} test {:.4} lr {} {}{:.1}s",
            record.epoch,
            config.epochs,
            record.train_loss,
            record.train_acc,
            record.test_acc,
            lr,
            if alphas.is_empty() { String::new() } else { format!("alpha [{}] ", alphas.join(", ")) },
            record.wall_seconds
        );
        records.push(record);
        if config.checkpoint_interval > 0 && (epoch + 1) % config.checkpoint_interval == 0 {
            let path = out_dir.join(format!("checkpoint_epoch{}.bin", epoch + 1));
            Checkpoint::capture(&model, &sgd, (epoch + 1) as u64, &rng, config.precision, checkpoint_text.clone())
                .save(&path)?;
        }
    }
    let checkpoint = out_dir.join("checkpoint.bin");
    Checkpoint::capture(&model, &sgd, config.epochs as u64, &rng, config.precision, checkpoint_text).save(&checkpoint)?;
    Ok(TrainOutcome {
        records,
        out_dir,
        checkpoint,
    })
}

/// A checkpoint of the freshly initialised model for `config`.
pub fn init_checkpoint(config: &TrainConfig) -> Result<Checkpoint> {
    fn capture<T: Scalar>(config: &TrainConfig) -> Result<Checkpoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model: Model<T> = build_model(&config.model_config()?, &mut rng)?;
        let sgd = Sgd::new(config.lr, config.momentum, config.weight_decay);
        Ok(Checkpoint::capture(&model, &sgd, 0, &rng, config.precision, config.experiment_key()))
    }
    match config.precision {
        Precision::F32 => capture::<f32>(config),
        Precision::F64 => capture::<f64>(config),
    }
}

pub struct EvalRequest<'a> {
    pub checkpoint: &'a Path,
    pub data_dir: &'a Path,
    pub split: Split,
    /// Overrides the dataset recorded in the checkpoint's config.
    pub dataset: Option<DatasetKind>,
}

pub fn cmd_eval(req: &EvalRequest<'_>) -> Result<EvalResult> {
    let checkpoint = Checkpoint::load(req.checkpoint)?;
    let config = checkpoint_config(&checkpoint)?;
    let dataset = load_dataset(req.dataset.unwrap_or(config.dataset), req.data_dir, req.split)?;
    eval_checkpoint(&checkpoint, &config, &dataset)
}

pub fn eval_checkpoint(checkpoint: &Checkpoint, config: &TrainConfig, dataset: &Dataset) -> Result<EvalResult> {
    match checkpoint.precision {
        Precision::F32 => evaluate(&mut model_from_checkpoint::<f32>(checkpoint, config)?, dataset, config.eval_batch_size),
        Precision::F64 => evaluate(&mut model_from_checkpoint::<f64>(checkpoint, config)?, dataset, config.eval_batch_size),
    }
}

/// Parses the config stored in a checkpoint.
pub fn checkpoint_config(checkpoint: &Checkpoint) -> Result<TrainConfig> {
    TrainConfig::from_text(&checkpoint.config_text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))
}

/// Builds the model described by `config` and loads the checkpoint's
/// parameters into it.
pub fn model_from_checkpoint<T: Scalar>(checkpoint: &Checkpoint, config: &TrainConfig) -> Result<Model<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model: Model<T> = build_model(&config.model_config()?, &mut rng)?;
    checkpoint.apply(&mut model, None)?;
    Ok(model)
}

/// `(alpha, value)` rows over a uniform grid from `from` to `to`, written
/// as CSV to `out` when given.
pub fn cmd_alpha_sweep(values: &[f64], from: f64, to: f64, steps: usize, out: Option<&Path>) -> Result<Vec<(f64, f64)>> {
    if steps < 2 {
        return Err(Error::Config(format!("steps must be at least 2, got {steps}")));
    }
    if values.is_empty() {
        return Err(Error::Config("at least one value is required".into()));
    }
    if !(from.is_finite() && to.is_finite()) {
        return Err(Error::Config("alpha range must be finite".into()));
    }
    let rows = (0..steps)
        .map(|i| {
            let alpha = if i == steps - 1 {
                to
            } else {
                from + (to - from) * i as f64 / (steps - 1) as f64
            };
            Ok((alpha, alpha_integrate(values, alpha)?))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(path) = out {
        let mut text = String::from("alpha,value\n");
        for (a, v) in &rows {
            let _ = writeln!(text, "{a},{v}");
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(rows)
}

/// Runs the gradient-check suite. `mutate` scales every layer's backward
/// pass to demonstrate that failures are caught.
pub fn cmd_gradcheck(seed: u64, mutate: Option<f64>) -> Result<(Vec<GradReport>, bool)> {
    let reports = standard_suite(seed, GradcheckOptions::default(), mutate)?;
    let ok = reports.iter().all(GradReport::passed);
    Ok((reports, ok))
}
