//! Alpha-integration pooling.
//!
//! For positive values `x_1..x_N` and a real `alpha`, the alpha-integration is
//! `f_inv((1/N) * sum f(x_i))` with `f(z) = z^((1 - alpha) / 2)` (or `ln z`
//! when `alpha == 1`). Writing `q = (1 - alpha) / 2`, it is the power mean of
//! exponent `q`: `alpha = -1` is the arithmetic mean, `1` the geometric mean,
//! `3` the harmonic mean, and `alpha -> -inf` / `+inf` tend to max / min.
//!
//! Everything is evaluated in log space:
//! `ln y = (1/q) * (logsumexp(q * ln x_i) - ln N)`, which stays finite for the
//! `1e-8` floor that [`relu_plus`] puts under every pooled activation. Near
//! `q = 0` the `1/q` factor is replaced by the cumulant expansion
//! `ln y = k1 + q*k2/2 + q^2*k3/6` of `ln x`, which is exact at `q = 0` and
//! keeps `d y / d alpha` continuous across `alpha = 1`.
//!
//! Window math always runs in `f64`, whatever the tensor element type.

use crate::error::{Error, Result};
use crate::fastmath;
use crate::layers::{apply_mask, masked_floor, Layer, Param};
use crate::tensor::{Scalar, Tensor};

/// Floor applied by [`relu_plus`]; pooled inputs are at least this large.
pub const EPS_POS: f64 = 1e-8;

/// Below this `|q|` the cumulant expansion replaces the `1/q` form.
pub const Q_BRANCH: f64 = 1e-6;

/// Range `alpha` is clamped into after every optimizer step.
pub const ALPHA_CLAMP: (f64, f64) = (-30.0, 30.0);

/// Starting `alpha` (arithmetic mean).
pub const ALPHA_INIT: f64 = -1.0;

/// Power-mean exponent `q = (1 - alpha) / 2`.
#[inline]
pub fn power_exponent(alpha: f64) -> f64 {
    (1.0 - alpha) / 2.0
}

#[inline]
fn is_log_branch(q: f64) -> bool {
    q.abs() < Q_BRANCH
}

/// The alpha-transform `f_alpha(z)`.
pub fn f_alpha(z: f64, alpha: f64) -> Result<f64> {
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::domain("f_alpha", format!("z must be positive, got {z}")));
    }
    let q = power_exponent(alpha);
    if is_log_branch(q) {
        Ok(z.ln())
    } else {
        Ok(z.powf(q))
    }
}

/// Inverse of [`f_alpha`] for a fixed `alpha`.
pub fn f_alpha_inv(y: f64, alpha: f64) -> Result<f64> {
    let q = power_exponent(alpha);
    if is_log_branch(q) {
        if !y.is_finite() {
            return Err(Error::domain("f_alpha_inv", format!("y must be finite, got {y}")));
        }
        return Ok(y.exp());
    }
    if !(y > 0.0 && y.is_finite()) {
        return Err(Error::domain(
            "f_alpha_inv",
            format!("y must be positive when alpha != 1, got {y}"),
        ));
    }
    Ok(y.powf(1.0 / q))
}

/// Alpha-integration of a list of positive values.
pub fn alpha_integrate(values: &[f64], alpha: f64) -> Result<f64> {
    check_values(values)?;
    Ok(single_window(values, alpha).y(0))
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::domain("alpha_integrate", "empty value list"));
    }
    if let Some(bad) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::domain(
            "alpha_integrate",
            format!("values must be positive, got {bad}"),
        ));
    }
    Ok(())
}

/// Alpha-integration together with its gradients: `(y, dy/dx_i, dy/dalpha)`.
pub fn alpha_integrate_with_grad(values: &[f64], alpha: f64) -> Result<(f64, Vec<f64>, f64)> {
    check_values(values)?;
    let batch = single_window(values, alpha);
    let dydx = (0..values.len()).map(|s| batch.dydx(s, 0)).collect();
    Ok((batch.y(0), dydx, batch.dyda(0)))
}

/// Evaluator for a block of up to `cap` equally sized windows.
///
/// Storage is slot-major: column `s` holds slot `s` of every window, so the
/// per-window arithmetic vectorizes across windows. Sums over a window add
/// its terms in ascending order (sorted with a compare-exchange network), so
/// results depend only on the multiset of values in the window.
pub(crate) struct WindowBatch {
    q: f64,
    k: usize,
    cap: usize,
    len: usize,
    x: Vec<f64>,
    // power branch: ln(x / pivot); log branch: ln x - k1
    r: Vec<f64>,
    // power branch: (x / pivot)^q
    t: Vec<f64>,
    sorted: Vec<f64>,
    dydx: Vec<f64>,
    pivot: Vec<f64>,
    sum: Vec<f64>,
    // power branch: 1 / pivot, later 1 / sum
    inv: Vec<f64>,
    // power branch: ln(sum / k); log branch: k2
    ln_mean: Vec<f64>,
    // log branch: k3
    k3: Vec<f64>,
    y: Vec<f64>,
    dyda: Vec<f64>,
}

impl WindowBatch {
    pub(crate) fn new(alpha: f64, k: usize, cap: usize) -> Self {
        let cols = vec![0.0; k * cap];
        let lanes = vec![0.0; cap];
        WindowBatch {
            q: power_exponent(alpha),
            k,
            cap,
            len: 0,
            x: cols.clone(),
            r: cols.clone(),
            t: cols.clone(),
            sorted: cols.clone(),
            dydx: cols,
            pivot: lanes.clone(),
            sum: lanes.clone(),
            inv: lanes.clone(),
            ln_mean: lanes.clone(),
            k3: lanes.clone(),
            y: lanes.clone(),
            dyda: lanes,
        }
    }

    pub(crate) fn capacity(&self) -> usize {
        self.cap
    }

    /// Slot `s` of every window; entries `0..len` are read by
    /// [`eval`](Self::eval) and must be positive and finite.
    pub(crate) fn column_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.x[s * self.cap..(s + 1) * self.cap]
    }

    pub(crate) fn y(&self, w: usize) -> f64 {
        self.y[w]
    }

    pub(crate) fn dyda(&self, w: usize) -> f64 {
        self.dyda[w]
    }

    pub(crate) fn dydx(&self, s: usize, w: usize) -> f64 {
        self.dydx[s * self.cap + w]
    }

    /// `dy/dx` of slot `s` for windows `0..len` of the last evaluation.
    pub(crate) fn dydx_column(&self, s: usize) -> &[f64] {
        &self.dydx[s * self.cap..s * self.cap + self.len]
    }

    /// Evaluates windows `0..len`: values, plus gradients when `grad` is set.
    /// Values are bit-identical either way.
    pub(crate) fn eval(&mut self, len: usize, grad: bool) {
        assert!(len <= self.cap);
        self.len = len;
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                // SAFETY: the feature was detected at runtime.
                return unsafe { self.eval_avx512(grad) };
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: as above.
                return unsafe { self.eval_avx2(grad) };
            }
        }
        self.eval_body(grad)
    }

    // No FMA is enabled, so every path rounds identically.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn eval_avx512(&mut self, grad: bool) {
        self.eval_body(grad)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn eval_avx2(&mut self, grad: bool) {
        self.eval_body(grad)
    }

    #[inline(always)]
    fn eval_body(&mut self, grad: bool) {
        match (is_log_branch(self.q), grad) {
            (true, true) => self.eval_log::<true>(),
            (true, false) => self.eval_log::<false>(),
            (false, true) => self.eval_power::<true>(),
            (false, false) => self.eval_power::<false>(),
        }
    }

    #[inline(always)]
    fn col(v: &[f64], cap: usize, len: usize, s: usize) -> &[f64] {
        &v[s * cap..s * cap + len]
    }

    #[inline(always)]
    fn col_mut(v: &mut [f64], cap: usize, len: usize, s: usize) -> &mut [f64] {
        &mut v[s * cap..s * cap + len]
    }

    /// Sorts every window of `sorted` ascending (odd-even transposition
    /// network) and returns the per-window sums in that order into `out`.
    #[inline(always)]
    fn sorted_sum(sorted: &mut [f64], k: usize, cap: usize, len: usize, out: &mut [f64]) {
        for round in 0..k {
            let mut s = round % 2;
            while s + 1 < k {
                let (lo, hi) = sorted.split_at_mut((s + 1) * cap);
                let a = &mut lo[s * cap..s * cap + len];
                let b = &mut hi[..len];
                for (a, b) in a.iter_mut().zip(b.iter_mut()) {
                    let (u, v) = (*a, *b);
                    let swap = v < u;
                    *a = if swap { v } else { u };
                    *b = if swap { u } else { v };
                }
                s += 2;
            }
        }
        let out = &mut out[..len];
        out.copy_from_slice(&sorted[..len]);
        for s in 1..k {
            for (o, v) in out.iter_mut().zip(Self::col(sorted, cap, len, s)) {
                *o += v;
            }
        }
    }

    #[inline(always)]
    fn eval_power<const GRAD: bool>(&mut self) {
        let (k, cap, len, q) = (self.k, self.cap, self.len, self.q);
        let n = k as f64;
        // The pivot maximises q * ln x, so every term is at most 1.
        let pivot = &mut self.pivot[..len];
        pivot.copy_from_slice(&self.x[..len]);
        for s in 1..k {
            for (p, &x) in pivot.iter_mut().zip(Self::col(&self.x, cap, len, s)) {
                let take = if q > 0.0 { x > *p } else { x < *p };
                *p = if take { x } else { *p };
            }
        }
        let inv_q = 1.0 / q;
        for (i, &p) in self.inv.iter_mut().zip(pivot.iter()) {
            *i = 1.0 / p;
        }
        let mut abnormal = false;
        for s in 0..k {
            let xs = Self::col(&self.x, cap, len, s);
            let r = Self::col_mut(&mut self.r, cap, len, s);
            let t = Self::col_mut(&mut self.t, cap, len, s);
            for (((r, t), &x), &ip) in r.iter_mut().zip(t.iter_mut()).zip(xs).zip(&self.inv[..len]) {
                let ratio = x * ip;
                abnormal |= !ratio.is_normal();
                *r = fastmath::ln(ratio);
                *t = fastmath::exp(q * *r);
            }
        }
        if abnormal {
            // Ratios outside the normal range only arise for extreme inputs.
            for s in 0..k {
                for w in 0..len {
                    let (x, p) = (self.x[s * cap + w], pivot[w]);
                    if !(x * self.inv[w]).is_normal() {
                        let r = x.ln() - p.ln();
                        self.r[s * cap + w] = r;
                        self.t[s * cap + w] = (q * r).exp();
                    }
                }
            }
        }
        self.sorted.copy_from_slice(&self.t);
        Self::sorted_sum(&mut self.sorted, k, cap, len, &mut self.sum);
        for (((m, y), &sum), &p) in self.ln_mean[..len]
            .iter_mut()
            .zip(&mut self.y[..len])
            .zip(&self.sum[..len])
            .zip(pivot.iter())
        {
            *m = fastmath::ln(sum / n);
            *y = p * fastmath::exp(*m * inv_q);
        }
        if !GRAD {
            return;
        }
        for (i, &sum) in self.inv[..len].iter_mut().zip(&self.sum[..len]) {
            *i = 1.0 / sum;
        }
        // weights t / sum; the weighted mean of r goes through the same
        // sorted summation
        for s in 0..k {
            let xs = Self::col(&self.x, cap, len, s);
            let r = Self::col(&self.r, cap, len, s);
            let t = Self::col(&self.t, cap, len, s);
            let u = Self::col_mut(&mut self.sorted, cap, len, s);
            let d = Self::col_mut(&mut self.dydx, cap, len, s);
            for (((((u, d), &x), &r), &t), (&inv_sum, &y)) in u
                .iter_mut()
                .zip(d.iter_mut())
                .zip(xs)
                .zip(r)
                .zip(t)
                .zip(self.inv.iter().zip(&self.y))
            {
                let wt = t * inv_sum;
                *u = wt * r;
                *d = wt * y / x;
            }
        }
        Self::sorted_sum(&mut self.sorted, k, cap, len, &mut self.dyda);
        for ((g, &m), &y) in self.dyda[..len].iter_mut().zip(&self.ln_mean[..len]).zip(&self.y[..len]) {
            // ln x_i - ln y = r_i - ln_mean / q; dq/dalpha = -1/2
            let dlogy_dq = (*g - m * inv_q) * inv_q;
            *g = -0.5 * y * dlogy_dq;
        }
    }

    #[inline(always)]
    fn eval_log<const GRAD: bool>(&mut self) {
        let (k, cap, len, q) = (self.k, self.cap, self.len, self.q);
        let n = k as f64;
        for s in 0..k {
            let xs = Self::col(&self.x, cap, len, s);
            let r = Self::col_mut(&mut self.r, cap, len, s);
            for (r, &x) in r.iter_mut().zip(xs) {
                *r = fastmath::ln(x);
            }
        }
        // k1 in pivot, k2 in ln_mean, k3 in k3
        self.sorted.copy_from_slice(&self.r);
        Self::sorted_sum(&mut self.sorted, k, cap, len, &mut self.pivot);
        for k1 in &mut self.pivot[..len] {
            *k1 /= n;
        }
        // `sorted` holds ln x ascending; centred powers keep that order
        for s in 0..k {
            let d = Self::col_mut(&mut self.sorted, cap, len, s);
            for (d, &k1) in d.iter_mut().zip(&self.pivot[..len]) {
                *d -= k1;
            }
        }
        for (power, out) in [(2, &mut self.ln_mean), (3, &mut self.k3)] {
            self.t.copy_from_slice(&self.sorted);
            for v in &mut self.t {
                *v = if power == 2 { *v * *v } else { *v * *v * *v };
            }
            let acc = &mut out[..len];
            acc.copy_from_slice(&self.t[..len]);
            for s in 1..k {
                for (a, v) in acc.iter_mut().zip(Self::col(&self.t, cap, len, s)) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= n;
            }
        }
        for (((y, &k1), &k2), &k3) in self.y[..len]
            .iter_mut()
            .zip(&self.pivot[..len])
            .zip(&self.ln_mean[..len])
            .zip(&self.k3[..len])
        {
            *y = fastmath::exp(k1 + q * k2 / 2.0 + q * q * k3 / 6.0);
        }
        if !GRAD {
            return;
        }
        for s in 0..k {
            let xs = Self::col(&self.x, cap, len, s);
            let r = Self::col_mut(&mut self.r, cap, len, s);
            let d = Self::col_mut(&mut self.dydx, cap, len, s);
            for ((((r, d), &x), &k1), (&k2, &y)) in r
                .iter_mut()
                .zip(d.iter_mut())
                .zip(xs)
                .zip(&self.pivot[..len])
                .zip(self.ln_mean[..len].iter().zip(&self.y[..len]))
            {
                let c = *r - k1;
                *r = c;
                let dlogy_dlogx = (1.0 + q * c + q * q / 2.0 * (c * c - k2)) / n;
                *d = y * dlogy_dlogx / x;
            }
        }
        for ((g, &k2), (&k3, &y)) in self.dyda[..len]
            .iter_mut()
            .zip(&self.ln_mean[..len])
            .zip(self.k3[..len].iter().zip(&self.y[..len]))
        {
            *g = -0.5 * y * (k2 / 2.0 + q * k3 / 3.0);
        }
    }
}

/// Runs one window through a fresh [`WindowBatch`].
fn single_window(values: &[f64], alpha: f64) -> WindowBatch {
    let mut batch = WindowBatch::new(alpha, values.len(), 1);
    for (s, &v) in values.iter().enumerate() {
        batch.column_mut(s)[0] = v;
    }
    batch.eval(1, true);
    batch
}

/// Window size and stride of a 2-D pooling operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

impl PoolGeometry {
    pub fn new(window: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Config(format!(
                "pool window {window:?} and stride {stride:?} must be at least 1"
            )));
        }
        Ok(PoolGeometry { window, stride })
    }

    /// Non-overlapping square windows.
    pub fn square(size: usize) -> Result<Self> {
        Self::new((size, size), (size, size))
    }

    /// Number of values per window.
    pub fn window_len(&self) -> usize {
        self.window.0 * self.window.1
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < self.window.0 || w < self.window.1 {
            return Err(Error::ShapeMismatch {
                op: "pool",
                expected: vec![self.window.0, self.window.1],
                got: vec![h, w],
            });
        }
        Ok((
            (h - self.window.0) / self.stride.0 + 1,
            (w - self.window.1) / self.stride.1 + 1,
        ))
    }

    /// Output dims for an NCHW input.
    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let &[n, c, h, w] = input else {
            return Err(Error::ShapeMismatch {
                op: "pool",
                expected: vec![0, 0, 0, 0],
                got: input.to_vec(),
            });
        };
        let (oh, ow) = self.output_hw(h, w)?;
        Ok(vec![n, c, oh, ow])
    }

    /// Flat offset of each window slot from the window origin, row-major,
    /// for an input of width `w`.
    pub(crate) fn slot_offsets(&self, w: usize) -> Vec<usize> {
        (0..self.window.0)
            .flat_map(|ky| (0..self.window.1).map(move |kx| ky * w + kx))
            .collect()
    }

    /// Flat input index of every window origin (top-left slot) of an NCHW
    /// tensor, in output order.
    pub(crate) fn origins(&self, input: &[usize]) -> Result<impl Iterator<Item = usize>> {
        let out = self.output_dims(input)?;
        let (h, w) = (input[2], input[3]);
        let (oh, ow) = (out[2], out[3]);
        let (sy, sx) = self.stride;
        let planes = input[0] * input[1];
        Ok((0..planes).flat_map(move |plane| {
            (0..oh).flat_map(move |oy| {
                let row = plane * h * w + oy * sy * w;
                (0..ow).map(move |ox| row + ox * sx)
            })
        }))
    }

    /// Visits every window of an NCHW tensor in output order, passing the
    /// flat output index and the flat input index of each window slot.
    pub(crate) fn for_each_window(
        &self,
        input: &[usize],
        mut f: impl FnMut(usize, &[usize]) -> Result<()>,
    ) -> Result<()> {
        let offsets = self.slot_offsets(input.get(3).copied().unwrap_or(0));
        let mut slots = vec![0usize; offsets.len()];
        for (o, origin) in self.origins(input)?.enumerate() {
            for (slot, off) in slots.iter_mut().zip(&offsets) {
                *slot = origin + off;
            }
            f(o, &slots)?;
        }
        Ok(())
    }
}

/// Values kept by [`alpha_pool_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct AlphaPoolCache<T> {
    input_dims: Vec<usize>,
    output_dims: Vec<usize>,
    geom: PoolGeometry,
    // local derivative dy/dx, slot-major: entry `s * windows + o`
    dydx: Vec<T>,
    dyda: Vec<f64>,
}

impl<T> AlphaPoolCache<T> {
    /// Dims of the pooled output this cache belongs to.
    pub fn output_dims(&self) -> &[usize] {
        &self.output_dims
    }
}

fn index_of(dims: &[usize], flat: usize) -> Vec<usize> {
    crate::tensor::Shape::new(dims)
        .ok()
        .and_then(|s| s.unflatten(flat))
        .unwrap_or_default()
}

// Windows evaluated together by the pooling layer.
const POOL_BLOCK: usize = 256;

/// Alpha-integration pooling of an NCHW tensor.
pub fn alpha_pool_forward<T: Scalar>(
    x: &Tensor<T>,
    geom: PoolGeometry,
    alpha: f64,
    layer: &str,
) -> Result<(Tensor<T>, AlphaPoolCache<T>)> {
    let (y, cache) = alpha_pool_impl(x, geom, alpha, layer, true)?;
    Ok((y, cache.expect("cache requested")))
}

/// [`alpha_pool_forward`] without the local derivatives: same values, less
/// work, nothing kept for a backward pass.
pub fn alpha_pool_values<T: Scalar>(x: &Tensor<T>, geom: PoolGeometry, alpha: f64, layer: &str) -> Result<Tensor<T>> {
    Ok(alpha_pool_impl(x, geom, alpha, layer, false)?.0)
}

/// Output rows of a pooling: `(first output index, first window origin)`
/// for every `(plane, oy)`, in output order.
fn output_rows(geom: PoolGeometry, input: &[usize], out: &[usize]) -> impl Iterator<Item = (usize, usize)> {
    let (h, w) = (input[2], input[3]);
    let (oh, ow) = (out[2], out[3]);
    let sy = geom.stride.0;
    (0..out[0] * out[1]).flat_map(move |plane| {
        (0..oh).map(move |oy| ((plane * oh + oy) * ow, plane * h * w + oy * sy * w))
    })
}

fn alpha_pool_impl<T: Scalar>(
    x: &Tensor<T>,
    geom: PoolGeometry,
    alpha: f64,
    layer: &str,
    grad: bool,
) -> Result<(Tensor<T>, Option<AlphaPoolCache<T>>)> {
    let out_dims = geom.output_dims(x.dims())?;
    let n_out: usize = out_dims.iter().product();
    let ow = out_dims[3];
    let sx = geom.stride.1;
    let k = geom.window_len();
    let offsets = geom.slot_offsets(x.dims()[3]);
    let mut out = vec![T::zero(); n_out];
    let (mut dydx, mut dyda) = if grad {
        (vec![T::zero(); n_out * k], vec![0.0; n_out])
    } else {
        (Vec::new(), Vec::new())
    };
    let mut batch = WindowBatch::new(alpha, k, POOL_BLOCK);
    let data = x.as_slice();
    // (output index, origin) of the next window still to gather
    let mut rows = output_rows(geom, x.dims(), &out_dims);
    let mut pending: Option<(usize, usize)> = None;
    let mut base = 0;
    while base < n_out {
        let len = batch.capacity().min(n_out - base);
        let mut filled = 0;
        let mut bad = false;
        while filled < len {
            let (o, origin) = pending.take().or_else(|| rows.next()).expect("rows cover every output");
            let row_end = (o / ow + 1) * ow;
            let run = (row_end - o).min(len - filled);
            for (s, &off) in offsets.iter().enumerate() {
                let col = &mut batch.column_mut(s)[filled..filled + run];
                let src = &data[origin + off..];
                for (c, v) in col.iter_mut().zip(src.iter().step_by(sx)) {
                    let v = v.as_f64();
                    bad |= !(v > 0.0 && v.is_finite());
                    *c = v;
                }
            }
            filled += run;
            if o + run < row_end {
                pending = Some((o + run, origin + run * sx));
            }
        }
        if bad {
            let i = geom
                .origins(x.dims())?
                .skip(base)
                .take(len)
                .flat_map(|origin| offsets.iter().map(move |&off| origin + off))
                .find(|&i| {
                    let v = data[i].as_f64();
                    !(v > 0.0 && v.is_finite())
                })
                .expect("a bad value was seen");
            return Err(Error::NonPositiveInput {
                layer: layer.to_string(),
                index: index_of(x.dims(), i),
                value: data[i].as_f64(),
            });
        }
        batch.eval(len, grad);
        for (w, y) in out[base..base + len].iter_mut().enumerate() {
            *y = T::from_f64_lossy(batch.y(w));
        }
        if grad {
            for (w, d) in dyda[base..base + len].iter_mut().enumerate() {
                *d = batch.dyda(w);
            }
            for s in 0..k {
                let dst = &mut dydx[s * n_out + base..s * n_out + base + len];
                for (d, &g) in dst.iter_mut().zip(batch.dydx_column(s)) {
                    *d = T::from_f64_lossy(g);
                }
            }
        }
        base += len;
    }
    let out = Tensor::from_vec(&out_dims, out)?;
    out.debug_check_finite(layer);
    let cache = grad.then(|| AlphaPoolCache {
        input_dims: x.dims().to_vec(),
        output_dims: out_dims,
        geom,
        dydx,
        dyda,
    });
    Ok((out, cache))
}

/// Returns `(dL/dx, dL/dalpha)` given `dL/dy`.
pub fn alpha_pool_backward<T: Scalar>(
    cache: &AlphaPoolCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, f64)> {
    grad_out.expect_dims("alpha_pool_backward", &cache.output_dims)?;
    let mut grad_x = Tensor::zeros(&cache.input_dims)?;
    let gx = grad_x.as_mut_slice();
    let g = grad_out.as_slice();
    let n_out = g.len();
    let ow = cache.output_dims[3];
    let sx = cache.geom.stride.1;
    let offsets = cache.geom.slot_offsets(cache.input_dims[3]);
    let mut grad_alpha = 0.0;
    for (first, row_origin) in output_rows(cache.geom, &cache.input_dims, &cache.output_dims) {
        for o in first..first + ow {
            let origin = row_origin + (o - first) * sx;
            let upstream = g[o];
            for (s, &off) in offsets.iter().enumerate() {
                gx[origin + off] = gx[origin + off] + upstream * cache.dydx[s * n_out + o];
            }
            grad_alpha += upstream.as_f64() * cache.dyda[o];
        }
    }
    Ok((grad_x, grad_alpha))
}

/// `max(EPS_POS, x)` elementwise.
pub fn relu_plus<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let eps = T::from_f64_lossy(EPS_POS);
    x.map(|v| if v > eps { v } else { eps })
}

/// Passes `grad_out` where `x > EPS_POS`, zero elsewhere.
pub fn relu_plus_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let eps = T::from_f64_lossy(EPS_POS);
    x.map2(grad_out, |v, g| if v > eps { g } else { T::zero() })
}

/// Trainable alpha-integration pooling layer with one `alpha` per layer.
pub struct AlphaPool<T: Scalar> {
    name: String,
    geom: PoolGeometry,
    alpha: Param<T>,
    cache: Option<AlphaPoolCache<T>>,
}

impl<T: Scalar> AlphaPool<T> {
    pub fn new(name: impl Into<String>, geom: PoolGeometry, alpha_init: f64) -> Self {
        let name = name.into();
        let alpha = Param::alpha(format!("{name}.alpha"), T::from_f64_lossy(alpha_init));
        AlphaPool {
            name,
            geom,
            alpha,
            cache: None,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.value.as_slice()[0].as_f64()
    }

    pub fn alpha_param(&self) -> &Param<T> {
        &self.alpha
    }

    pub fn alpha_param_mut(&mut self) -> &mut Param<T> {
        &mut self.alpha
    }

    pub fn geometry(&self) -> PoolGeometry {
        self.geom
    }
}

impl<T: Scalar> Layer<T> for AlphaPool<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "alpha_pool"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.geom.output_dims(input)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, cache) = alpha_pool_forward(x, self.geom, self.alpha(), &self.name)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn infer(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        alpha_pool_values(x, self.geom, self.alpha(), &self.name)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        let (grad_x, grad_alpha) = alpha_pool_backward(cache, grad_out)?;
        let g = &mut self.alpha.grad.as_mut_slice()[0];
        *g = *g + T::from_f64_lossy(grad_alpha);
        Ok(grad_x)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.alpha]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.alpha]
    }
}

/// `max(EPS_POS, x)` activation feeding alpha-integration pooling.
pub struct ReluPlus<T: Scalar> {
    name: String,
    // x > EPS_POS per input element
    mask: Option<(Vec<usize>, Vec<bool>)>,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Scalar> ReluPlus<T> {
    pub fn new(name: impl Into<String>) -> Self {
        ReluPlus {
            name: name.into(),
            mask: None,
            _scalar: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for ReluPlus<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "relu_plus"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, mask) = masked_floor(x, T::from_f64_lossy(EPS_POS));
        self.mask = Some(mask);
        Ok(y)
    }

    fn infer(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(relu_plus(x))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        apply_mask(mask, grad_out)
    }

    fn near_kink(&self, x: &Tensor<T>, index: usize, tol: f64) -> bool {
        (x.as_slice()[index].as_f64() - EPS_POS).abs() < tol
    }
}

pub(crate) fn missing_cache(layer: &str) -> Error {
    Error::Domain {
        op: "backward",
        reason: format!("{layer}: backward called before forward"),
    }
}
