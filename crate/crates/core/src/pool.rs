//! Baseline pooling operators: max, arithmetic average, and trainable lp.

use crate::alpha::{missing_cache, PoolGeometry};
use crate::error::Result;
use crate::layers::{Layer, Param, ParamRole};
use crate::tensor::{Scalar, Tensor};

/// Exponent of an lp pool from its unconstrained parameter: `1 + ln(1 + e^rho)`.
pub fn lp_exponent(rho: f64) -> f64 {
    1.0 + softplus(rho)
}

/// Inverse of [`lp_exponent`]; `p` must exceed 1.
pub fn lp_rho_for(p: f64) -> Option<f64> {
    (p > 1.0).then(|| (p - 1.0).exp_m1().ln())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-window max; returns the pooled tensor and the flat argmax of each
/// window. Ties go to the lowest flat index.
pub fn max_pool_forward<T: Scalar>(x: &Tensor<T>, geom: PoolGeometry) -> Result<(Tensor<T>, Vec<usize>)> {
    let out_dims = geom.output_dims(x.dims())?;
    let data = x.as_slice();
    let offsets = geom.slot_offsets(x.dims()[3]);
    let n_out: usize = out_dims.iter().product();
    let mut out = Vec::with_capacity(n_out);
    let mut argmax = Vec::with_capacity(n_out);
    for origin in geom.origins(x.dims())? {
        // offsets ascend, so a strict comparison keeps the lowest index on ties
        let mut best = origin + offsets[0];
        for &off in &offsets[1..] {
            if data[origin + off] > data[best] {
                best = origin + off;
            }
        }
        out.push(data[best]);
        argmax.push(best);
    }
    Ok((Tensor::from_vec(&out_dims, out)?, argmax))
}

pub fn max_pool_backward<T: Scalar>(
    input_dims: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if grad_out.numel() != argmax.len() {
        return Err(crate::error::Error::ShapeMismatch {
            op: "max_pool_backward",
            expected: vec![argmax.len()],
            got: grad_out.dims().to_vec(),
        });
    }
    let mut gx = Tensor::zeros(input_dims)?;
    let buf = gx.as_mut_slice();
    for (&i, &g) in argmax.iter().zip(grad_out.as_slice()) {
        buf[i] = buf[i] + g;
    }
    Ok(gx)
}

pub fn avg_pool_forward<T: Scalar>(x: &Tensor<T>, geom: PoolGeometry) -> Result<Tensor<T>> {
    let out_dims = geom.output_dims(x.dims())?;
    let data = x.as_slice();
    let n = T::from_usize(geom.window_len()).expect("window length fits a float");
    let mut out = Vec::new();
    geom.for_each_window(x.dims(), |_, slots| {
        let sum = slots.iter().fold(T::zero(), |acc, &i| acc + data[i]);
        out.push(sum / n);
        Ok(())
    })?;
    Tensor::from_vec(&out_dims, out)
}

pub fn avg_pool_backward<T: Scalar>(
    input_dims: &[usize],
    geom: PoolGeometry,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    grad_out.expect_dims("avg_pool_backward", &geom.output_dims(input_dims)?)?;
    let n = T::from_usize(geom.window_len()).expect("window length fits a float");
    let mut gx = Tensor::zeros(input_dims)?;
    let buf = gx.as_mut_slice();
    let g = grad_out.as_slice();
    geom.for_each_window(input_dims, |o, slots| {
        for &i in slots {
            buf[i] = buf[i] + g[o] / n;
        }
        Ok(())
    })?;
    Ok(gx)
}

/// State kept by [`lp_pool_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LpPoolCache<T> {
    input_dims: Vec<usize>,
    output_dims: Vec<usize>,
    geom: PoolGeometry,
    dydx: Vec<T>,
    dydp: Vec<f64>,
}

/// `((1/N) * sum |x_i|^p)^(1/p)` over each window, evaluated in log space.
pub fn lp_pool_forward<T: Scalar>(x: &Tensor<T>, geom: PoolGeometry, p: f64) -> Result<(Tensor<T>, LpPoolCache<T>)> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(crate::error::Error::domain("lp_pool", format!("p must be positive, got {p}")));
    }
    let out_dims = geom.output_dims(x.dims())?;
    let k = geom.window_len();
    let n = k as f64;
    let data = x.as_slice();
    let mut out = Vec::new();
    let mut dydx = Vec::new();
    let mut dydp = Vec::new();
    let mut logs = vec![0.0; k];
    geom.for_each_window(x.dims(), |_, slots| {
        for (l, &i) in logs.iter_mut().zip(slots) {
            *l = data[i].as_f64().abs().ln();
        }
        let shift = logs.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(p * l));
        if shift == f64::NEG_INFINITY {
            // all-zero window
            out.push(T::zero());
            dydx.extend(std::iter::repeat(T::zero()).take(k));
            dydp.push(0.0);
            return Ok(());
        }
        let sum: f64 = logs.iter().map(|&l| (p * l - shift).exp()).sum();
        let log_y = (shift + sum.ln() - n.ln()) / p;
        let y = log_y.exp();
        let mut weighted_log = 0.0;
        for (&l, &i) in logs.iter().zip(slots) {
            let w = (p * l - shift).exp() / sum;
            if w > 0.0 {
                weighted_log += w * l;
                dydx.push(T::from_f64_lossy(w * y / data[i].as_f64()));
            } else {
                dydx.push(T::zero());
            }
        }
        out.push(T::from_f64_lossy(y));
        dydp.push(y * (weighted_log - log_y) / p);
        Ok(())
    })?;
    Ok((
        Tensor::from_vec(&out_dims, out)?,
        LpPoolCache {
            input_dims: x.dims().to_vec(),
            output_dims: out_dims,
            geom,
            dydx,
            dydp,
        },
    ))
}

/// Returns `(dL/dx, dL/dp)`.
pub fn lp_pool_backward<T: Scalar>(cache: &LpPoolCache<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, f64)> {
    grad_out.expect_dims("lp_pool_backward", &cache.output_dims)?;
    let k = cache.geom.window_len();
    let mut gx = Tensor::zeros(&cache.input_dims)?;
    let buf = gx.as_mut_slice();
    let g = grad_out.as_slice();
    let mut grad_p = 0.0;
    cache.geom.for_each_window(&cache.input_dims, |o, slots| {
        for (&i, &d) in slots.iter().zip(&cache.dydx[o * k..(o + 1) * k]) {
            buf[i] = buf[i] + g[o] * d;
        }
        grad_p += g[o].as_f64() * cache.dydp[o];
        Ok(())
    })?;
    Ok((gx, grad_p))
}

fn window_near_tie<T: Scalar>(x: &Tensor<T>, geom: PoolGeometry, index: usize, tol: f64) -> bool {
    let data = x.as_slice();
    let mut hit = false;
    let _ = geom.for_each_window(x.dims(), |_, slots| {
        if slots.contains(&index) {
            let mut vals: Vec<f64> = slots.iter().map(|&i| data[i].as_f64()).collect();
            vals.sort_by(|a, b| b.total_cmp(a));
            if vals.len() > 1 && vals[0] - vals[1] < tol {
                hit = true;
            }
        }
        Ok(())
    });
    hit
}

pub struct MaxPool<T: Scalar> {
    name: String,
    geom: PoolGeometry,
    cache: Option<(Vec<usize>, Vec<usize>)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> MaxPool<T> {
    pub fn new(name: impl Into<String>, geom: PoolGeometry) -> Self {
        MaxPool {
            name: name.into(),
            geom,
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for MaxPool<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "max_pool"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.geom.output_dims(input)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, argmax) = max_pool_forward(x, self.geom)?;
        self.cache = Some((x.dims().to_vec(), argmax));
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (dims, argmax) = self.cache.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        max_pool_backward(dims, argmax, grad_out)
    }

    fn near_kink(&self, x: &Tensor<T>, index: usize, tol: f64) -> bool {
        window_near_tie(x, self.geom, index, tol)
    }
}

pub struct AvgPool<T: Scalar> {
    name: String,
    geom: PoolGeometry,
    input_dims: Option<Vec<usize>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> AvgPool<T> {
    pub fn new(name: impl Into<String>, geom: PoolGeometry) -> Self {
        AvgPool {
            name: name.into(),
            geom,
            input_dims: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for AvgPool<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "avg_pool"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.geom.output_dims(input)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = avg_pool_forward(x, self.geom)?;
        self.input_dims = Some(x.dims().to_vec());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = self.input_dims.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        avg_pool_backward(dims, self.geom, grad_out)
    }
}

/// lp pooling with a trainable exponent `p = 1 + ln(1 + e^rho) > 1`.
pub struct LpPool<T: Scalar> {
    name: String,
    geom: PoolGeometry,
    rho: Param<T>,
    cache: Option<LpPoolCache<T>>,
}

/// `rho` giving `p = 2`.
pub const LP_RHO_INIT: f64 = 0.541_324_854_612_918_1; // ln(e - 1)

impl<T: Scalar> LpPool<T> {
    pub fn new(name: impl Into<String>, geom: PoolGeometry, rho_init: f64) -> Self {
        let name = name.into();
        let rho = Param::new(
            format!("{name}.rho"),
            Tensor::new(&[1], T::from_f64_lossy(rho_init)).expect("valid shape"),
            ParamRole::LpRho,
        );
        LpPool {
            name,
            geom,
            rho,
            cache: None,
        }
    }

    pub fn rho(&self) -> f64 {
        self.rho.scalar().as_f64()
    }

    pub fn p(&self) -> f64 {
        lp_exponent(self.rho())
    }
}

impl<T: Scalar> Layer<T> for LpPool<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "lp_pool"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.geom.output_dims(input)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, cache) = lp_pool_forward(x, self.geom, self.p())?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        let (gx, grad_p) = lp_pool_backward(cache, grad_out)?;
        let grad_rho = grad_p * sigmoid(self.rho());
        let g = &mut self.rho.grad.as_mut_slice()[0];
        *g = *g + T::from_f64_lossy(grad_rho);
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.rho]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.rho]
    }

    fn near_kink(&self, x: &Tensor<T>, index: usize, tol: f64) -> bool {
        x.as_slice()[index].as_f64().abs() < tol
    }
}
