//! Finite-difference verification of every layer's backward pass.
//!
//! Each layer is checked against the scalar objective `sum(u * layer(x))`
//! for a fixed random upstream `u`, using central differences in f64.
//! Coordinates within `kink_tolerance` of a non-differentiable point (as
//! reported by [`Layer::near_kink`]) are skipped and counted.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::alpha::{AlphaPool, PoolGeometry, ReluPlus};
use crate::error::Result;
use crate::layers::{softmax_cross_entropy, Conv2d, Dense, Layer, Param, Relu};
use crate::model::Model;
use crate::pool::{lp_rho_for, AvgPool, LpPool, MaxPool};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub kink_tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-6,
            tolerance: 1e-5,
            kink_tolerance: 1e-4,
        }
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference gradient of `f` at `x`. `x` is restored on return.
pub fn fd_gradient<F>(mut f: F, x: &mut [f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(x);
        x[i] = orig - h;
        let minus = f(x);
        x[i] = orig;
        grad.push((plus? - minus?) / (2.0 * h));
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    /// `input` or a parameter name.
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub kind: String,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Hidden activations near a kink; only reported for whole models.
    pub internal_kinks: usize,
    pub failures: usize,
    pub worst: Option<GradEntry>,
    /// Worst relative error per checked tensor, in check order.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradReport {
    fn new(name: &str, kind: &str, tolerance: f64) -> Self {
        GradReport {
            name: name.to_string(),
            kind: kind.to_string(),
            tolerance,
            checked: 0,
            skipped_kinks: 0,
            internal_kinks: 0,
            failures: 0,
            worst: None,
            per_tensor: Vec::new(),
        }
    }

    fn record(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if !(err <= self.tolerance) {
            self.failures += 1;
        }
        match self.per_tensor.last_mut() {
            Some((name, worst)) if name == tensor => *worst = worst.max(err),
            _ => self.per_tensor.push((tensor.to_string(), err)),
        }
        if self.worst.as_ref().map_or(true, |w| !(err <= w.rel_err)) {
            self.worst = Some(GradEntry {
                tensor: tensor.to_string(),
                index,
                analytic,
                numeric,
                rel_err: err,
            });
        }
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_err)
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<14} {:<12} checked={:<5} kinks_skipped={:<3} max_rel_err={:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.kind,
            self.checked,
            self.skipped_kinks,
            self.max_rel_err()
        )?;
        if self.internal_kinks > 0 {
            write!(f, " hidden_kinks={}", self.internal_kinks)?;
        }
        if let Some(w) = self.worst.as_ref().filter(|_| !self.passed()) {
            write!(
                f,
                " worst={}[{}] analytic={:.6e} numeric={:.6e}",
                w.tensor, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// `sum(u * (plus - minus)) / 2h`, differencing before the reduction so that
/// outputs the perturbation did not touch contribute exactly zero.
fn directional(plus: &Tensor<f64>, minus: &Tensor<f64>, upstream: &Tensor<f64>, h: f64) -> f64 {
    let sum: f64 = plus
        .as_slice()
        .iter()
        .zip(minus.as_slice())
        .zip(upstream.as_slice())
        .map(|((p, m), u)| u * (p - m))
        .sum();
    sum / (2.0 * h)
}

fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, dims: &[usize]) -> Result<Tensor<f64>> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, dims: &[usize], lo: f64, hi: f64) -> Result<Tensor<f64>> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Checks the input gradient and every parameter gradient of `layer` at
/// `input`.
pub fn check_layer<R: Rng + ?Sized>(
    layer: &mut dyn Layer<f64>,
    input: &Tensor<f64>,
    opts: GradcheckOptions,
    rng: &mut R,
) -> Result<GradReport> {
    let out = layer.forward(input)?;
    let upstream = normal_tensor(rng, out.dims())?;
    for p in layer.params_mut() {
        p.zero_grad();
    }
    let grad_input = layer.backward(&upstream)?;
    let param_grads: Vec<(String, Vec<f64>)> = layer
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.as_slice().to_vec()))
        .collect();

    let h = opts.step;
    let mut report = GradReport::new(layer.name(), layer.kind(), opts.tolerance);
    let mut x = input.clone();
    for i in 0..x.numel() {
        if layer.near_kink(input, i, opts.kink_tolerance) {
            report.skipped_kinks += 1;
            continue;
        }
        let orig = x.as_slice()[i];
        x.as_mut_slice()[i] = orig + h;
        let plus = layer.forward(&x)?;
        x.as_mut_slice()[i] = orig - h;
        let minus = layer.forward(&x)?;
        x.as_mut_slice()[i] = orig;
        report.record("input", i, grad_input.as_slice()[i], directional(&plus, &minus, &upstream, h));
    }
    for (k, (name, grad)) in param_grads.iter().enumerate() {
        for (j, &analytic) in grad.iter().enumerate() {
            let orig = layer.params()[k].value.as_slice()[j];
            set_param(layer.params_mut().swap_remove(k), j, orig + h);
            let plus = layer.forward(input)?;
            set_param(layer.params_mut().swap_remove(k), j, orig - h);
            let minus = layer.forward(input)?;
            set_param(layer.params_mut().swap_remove(k), j, orig);
            report.record(name, j, analytic, directional(&plus, &minus, &upstream, h));
        }
    }
    layer.forward(input)?;
    Ok(report)
}

fn set_param(p: &mut Param<f64>, j: usize, v: f64) {
    p.value.as_mut_slice()[j] = v;
}

/// Checks every parameter gradient of the mean cross-entropy loss of `model`
/// on `(x, labels)`. Hidden activations that sit within `kink_tolerance` of
/// a kink are counted in [`GradReport::internal_kinks`].
pub fn check_model(
    model: &mut Model<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    opts: GradcheckOptions,
) -> Result<GradReport> {
    let mut report = GradReport::new("model", "end_to_end", opts.tolerance);
    let mut act = x.clone();
    for layer in model.layers_mut() {
        for i in 0..act.numel() {
            if layer.near_kink(&act, i, opts.kink_tolerance) {
                report.internal_kinks += 1;
            }
        }
        act = layer.forward(&act)?;
    }
    model.loss_and_grad(x, labels)?;
    let param_grads: Vec<(String, Vec<f64>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.as_slice().to_vec()))
        .collect();
    for (k, (name, grad)) in param_grads.iter().enumerate() {
        for (j, &analytic) in grad.iter().enumerate() {
            let orig = model.params()[k].value.as_slice()[j];
            set_param(model.params_mut().swap_remove(k), j, orig + opts.step);
            let plus = model.loss(x, labels);
            set_param(model.params_mut().swap_remove(k), j, orig - opts.step);
            let minus = model.loss(x, labels);
            set_param(model.params_mut().swap_remove(k), j, orig);
            report.record(name, j, analytic, (plus? - minus?) / (2.0 * opts.step));
        }
    }
    Ok(report)
}

/// Checks the gradient of the mean softmax cross-entropy with respect to
/// the logits.
pub fn check_cross_entropy(logits: &Tensor<f64>, labels: &[usize], opts: GradcheckOptions) -> Result<GradReport> {
    let (_, grad) = softmax_cross_entropy(logits, labels)?;
    let mut report = GradReport::new("cross_entropy", "softmax_ce", opts.tolerance);
    let mut z = logits.as_slice().to_vec();
    let dims = logits.dims().to_vec();
    let numeric = fd_gradient(
        |v| Ok(softmax_cross_entropy(&Tensor::from_vec(&dims, v.to_vec())?, labels)?.0),
        &mut z,
        opts.step,
    )?;
    for (i, (&a, &n)) in grad.as_slice().iter().zip(&numeric).enumerate() {
        report.record("logits", i, a, n);
    }
    Ok(report)
}

/// Wraps a layer and scales the gradient it passes downstream. Used to
/// confirm that the checker notices a wrong backward pass.
pub struct ScaledBackward<T: Scalar> {
    inner: Box<dyn Layer<T>>,
    factor: f64,
}

impl<T: Scalar> ScaledBackward<T> {
    pub fn new(inner: Box<dyn Layer<T>>, factor: f64) -> Self {
        ScaledBackward { inner, factor }
    }
}

impl<T: Scalar> Layer<T> for ScaledBackward<T> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.inner.output_dims(input)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.inner.forward(x)
    }

    fn infer(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.inner.infer(x)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let factor = T::from_f64_lossy(self.factor);
        Ok(self.inner.backward(grad_out)?.map(|g| g * factor))
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.inner.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.inner.params_mut()
    }

    fn near_kink(&self, x: &Tensor<T>, index: usize, tol: f64) -> bool {
        self.inner.near_kink(x, index, tol)
    }
}

/// The small end-to-end network: 1x2x2 input, 2x2 convolution with padding
/// 1, ReLU+, 2x2 alpha pool with stride 1, dense to 2 classes. Returns the
/// model with a batch of 4 inputs and labels.
pub fn tiny_model(seed: u64, alpha: f64, mutate: Option<f64>) -> Result<(Model<f64>, Tensor<f64>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = Conv2d::new("conv1", 1, 2, 2, 1, 1, &mut rng)?;
    let pool = AlphaPool::new("pool1", PoolGeometry::new((2, 2), (1, 1))?, alpha);
    let fc = Dense::new("fc", 2 * 2 * 2, 2, &mut rng)?;
    let mut layers: Vec<Box<dyn Layer<f64>>> =
        vec![Box::new(conv), Box::new(ReluPlus::new("act1")), Box::new(pool), Box::new(fc)];
    if let Some(factor) = mutate {
        let last = layers.len() - 1;
        let inner = layers.remove(last);
        layers.push(Box::new(ScaledBackward::new(inner, factor)));
    }
    let model = Model::from_layers(layers, (1, 2, 2), 2)?;
    let x = normal_tensor(&mut rng, &[4, 1, 2, 2])?;
    let labels = (0..4).map(|_| rng.gen_range(0..2)).collect();
    Ok((model, x, labels))
}

/// Runs the standard per-layer, loss and end-to-end checks. With `mutate`,
/// every layer's backward pass is scaled by that factor so each layer check
/// should fail (the loss check has no layer to wrap).
pub fn standard_suite(seed: u64, opts: GradcheckOptions, mutate: Option<f64>) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g2 = PoolGeometry::square(2)?;
    let g3s1 = PoolGeometry::new((3, 3), (1, 1))?;
    let pool_dims = [2, 3, 4, 4];

    let mut cases: Vec<(Box<dyn Layer<f64>>, Tensor<f64>)> = Vec::new();
    cases.push((
        Box::new(Conv2d::new("conv_3x3", 3, 4, 3, 1, 1, &mut rng)?),
        normal_tensor(&mut rng, &[2, 3, 6, 6])?,
    ));
    cases.push((
        Box::new(Conv2d::new("conv_s2", 2, 3, 3, 2, 0, &mut rng)?),
        normal_tensor(&mut rng, &[2, 2, 7, 7])?,
    ));
    cases.push((Box::new(Dense::new("dense", 12, 5, &mut rng)?), normal_tensor(&mut rng, &[3, 12])?));
    cases.push((Box::new(Relu::new("relu")), normal_tensor(&mut rng, &[2, 3, 4, 4])?));
    cases.push((Box::new(ReluPlus::new("relu_plus")), normal_tensor(&mut rng, &[2, 3, 4, 4])?));
    cases.push((Box::new(MaxPool::new("max_pool", g2)), normal_tensor(&mut rng, &pool_dims)?));
    cases.push((Box::new(AvgPool::new("avg_pool", g2)), normal_tensor(&mut rng, &pool_dims)?));
    for p in [2.0, 3.7] {
        let rho = lp_rho_for(p).expect("p > 1");
        cases.push((
            Box::new(LpPool::new(format!("lp_pool_p{p}"), g2, rho)),
            uniform_tensor(&mut rng, &pool_dims, 0.5, 1.5)?,
        ));
    }
    for alpha in [-10.0, -1.0, 0.0, 1.0, 3.0] {
        cases.push((
            Box::new(AlphaPool::new(format!("alpha_pool_{alpha}"), g2, alpha)),
            uniform_tensor(&mut rng, &pool_dims, 0.5, 1.5)?,
        ));
    }
    cases.push((
        Box::new(AlphaPool::new("alpha_pool_3s1", g3s1, -4.0)),
        uniform_tensor(&mut rng, &[1, 2, 5, 5], 0.5, 1.5)?,
    ));

    let mut reports = Vec::with_capacity(cases.len() + 1);
    for (layer, input) in cases {
        let mut layer = match mutate {
            Some(factor) => Box::new(ScaledBackward::new(layer, factor)) as Box<dyn Layer<f64>>,
            None => layer,
        };
        reports.push(check_layer(layer.as_mut(), &input, opts, &mut rng)?);
    }
    let logits = normal_tensor(&mut rng, &[4, 10])?;
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..10)).collect();
    let ce = check_cross_entropy(&logits, &labels, opts)?;
    reports.push(ce);
    let (mut model, x, labels) = tiny_model(seed, -3.0, mutate)?;
    reports.push(check_model(&mut model, &x, &labels, opts)?);
    Ok(reports)
}
