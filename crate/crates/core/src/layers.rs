//! Network components with explicit forward/backward passes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::alpha::{missing_cache, ALPHA_CLAMP};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Shape, Tensor};

/// What a parameter is, which decides how the optimizer treats it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    /// The `alpha` of an alpha-integration pooling layer.
    Alpha,
    /// The unconstrained exponent of an lp pooling layer.
    LpRho,
}

impl ParamRole {
    pub fn code(self) -> u8 {
        match self {
            ParamRole::Weight => 0,
            ParamRole::Bias => 1,
            ParamRole::Alpha => 2,
            ParamRole::LpRho => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ParamRole::Weight,
            1 => ParamRole::Bias,
            2 => ParamRole::Alpha,
            3 => ParamRole::LpRho,
            _ => return None,
        })
    }

    /// Pooling scalars are excluded from weight decay.
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight | ParamRole::Bias)
    }

    pub fn clamp_range(self) -> Option<(f64, f64)> {
        match self {
            ParamRole::Alpha => Some(ALPHA_CLAMP),
            _ => None,
        }
    }
}

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub role: ParamRole,
    /// Frozen parameters keep their value through optimizer steps.
    pub frozen: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, role: ParamRole) -> Self {
        let grad = value.zeros_like();
        Param {
            name: name.into(),
            value,
            grad,
            role,
            frozen: false,
        }
    }

    /// Scalar `alpha` parameter of an alpha-integration pool.
    pub fn alpha(name: impl Into<String>, init: T) -> Self {
        Self::new(name, Tensor::new(&[1], init).expect("valid shape"), ParamRole::Alpha)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// First element, for scalar parameters.
    pub fn scalar(&self) -> T {
        self.value.as_slice()[0]
    }
}

/// Forward/backward contract of every network component.
///
/// `forward` caches what `backward` needs; `backward` returns the gradient
/// with respect to the layer input and *adds* parameter gradients into
/// [`Param::grad`].
pub trait Layer<T: Scalar>: Send {
    fn name(&self) -> &str;

    /// Short type tag, e.g. `conv2d` or `alpha_pool`.
    fn kind(&self) -> &'static str;

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>>;

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Same output as `forward`, keeping nothing for `backward`.
    fn infer(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }

    /// Whether input coordinate `index` lies within `tol` of a point where
    /// the layer is not differentiable.
    fn near_kink(&self, _x: &Tensor<T>, _index: usize, _tol: f64) -> bool {
        false
    }
}

fn kaiming<T: Scalar, R: Rng + ?Sized>(rng: &mut R, dims: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        })
        .collect();
    Tensor::from_vec(dims, data).expect("dims match data")
}

/// Square-kernel 2-D cross-correlation with zero padding.
pub struct Conv2d<T: Scalar> {
    name: String,
    kernel: usize,
    stride: usize,
    padding: usize,
    weight: Param<T>,
    bias: Param<T>,
    cache: Option<ConvCache<T>>,
    input_grad: bool,
}

/// State kept between [`conv2d_forward`] and [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    input_dims: Vec<usize>,
    weight_dims: Vec<usize>,
    stride: usize,
    padding: usize,
    out_hw: (usize, usize),
    // one unfolded [C*K*K, OH*OW] matrix per batch item
    cols: Vec<Vec<T>>,
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (size + 2 * padding)
        .checked_sub(kernel)
        .map(|span| span / stride + 1)
}

/// Output columns `ox` in `[lo, hi)` whose input column `ox*stride + kx - padding`
/// lies inside `[0, w)`.
fn valid_range(w: usize, ow: usize, kx: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(kx).div_ceil(stride).min(ow);
    let hi = if w + padding > kx {
        ((w - 1 + padding - kx) / stride + 1).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(
    image: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    col: &mut [T],
) {
    let p = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(w, ow, kx, stride, padding);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize || lo == hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &image[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = lo * stride + kx - padding;
                    if stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[first + j * stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    col: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    image: &mut [T],
) {
    let p = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(w, ow, kx, stride, padding);
                if lo == hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w + lo * stride + kx - padding;
                    let line = &src[oy * ow + lo..oy * ow + hi];
                    if stride == 1 {
                        for (d, &v) in image[base..base + line.len()].iter_mut().zip(line) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in line.iter().enumerate() {
                            let d = &mut image[base + j * stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution of an NCHW input with `[O, C, K, K]` weights and `[O]` bias.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let (y, cache) = conv2d_impl(x, weight, bias, stride, padding, true)?;
    Ok((y, cache.expect("cache requested")))
}

fn conv2d_impl<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    keep: bool,
) -> Result<(Tensor<T>, Option<ConvCache<T>>)> {
    let (&[n, c, h, w], &[o, wc, k, k2]) = (x.dims(), weight.dims()) else {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: vec![0, 0, 0, 0],
            got: if x.shape().rank() != 4 {
                x.dims().to_vec()
            } else {
                weight.dims().to_vec()
            },
        });
    };
    if wc != c || k != k2 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: vec![o, c, k, k],
            got: weight.dims().to_vec(),
        });
    }
    bias.expect_dims("conv2d bias", &[o])?;
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be at least 1".into()));
    }
    let (Some(oh), Some(ow)) = (conv_out(h, k, stride, padding), conv_out(w, k, stride, padding))
    else {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: vec![k, k],
            got: vec![h + 2 * padding, w + 2 * padding],
        });
    };
    let rows = c * k * k;
    let p = oh * ow;
    let mut out = vec![T::zero(); n * o * p];
    let mut cols = Vec::with_capacity(if keep { n } else { 0 });
    let per_image = c * h * w;
    let mut col = Vec::new();
    for (b, image) in x.as_slice().chunks_exact(per_image).enumerate() {
        // im2col writes every entry, so a reused buffer needs no clearing
        col.resize(rows * p, T::zero());
        im2col(image, (c, h, w), k, stride, padding, (oh, ow), &mut col);
        let dst = &mut out[b * o * p..(b + 1) * o * p];
        for (oc, plane) in dst.chunks_exact_mut(p).enumerate() {
            plane.fill(bias.as_slice()[oc]);
        }
        gemm(false, false, o, p, rows, T::one(), weight.as_slice(), &col, T::one(), dst);
        if keep {
            cols.push(std::mem::take(&mut col));
        }
    }
    let out = Tensor::from_vec(&[n, o, oh, ow], out)?;
    out.debug_check_finite("conv2d");
    let cache = keep.then(|| ConvCache {
        input_dims: x.dims().to_vec(),
        weight_dims: weight.dims().to_vec(),
        stride,
        padding,
        out_hw: (oh, ow),
        cols,
    });
    Ok((out, cache))
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn conv2d_backward<T: Scalar>(
    cache: &ConvCache<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    conv2d_backward_impl(cache, weight, grad_out, true)
}

fn conv2d_backward_impl<T: Scalar>(
    cache: &ConvCache<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    input_grad: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = (
        cache.input_dims[0],
        cache.input_dims[1],
        cache.input_dims[2],
        cache.input_dims[3],
    );
    let (o, k) = (cache.weight_dims[0], cache.weight_dims[2]);
    let (oh, ow) = cache.out_hw;
    weight.expect_dims("conv2d_backward weight", &cache.weight_dims)?;
    grad_out.expect_dims("conv2d_backward", &[n, o, oh, ow])?;
    let rows = c * k * k;
    let p = oh * ow;
    let mut grad_x = vec![T::zero(); n * c * h * w];
    let mut grad_w = vec![T::zero(); o * rows];
    let mut grad_b = vec![T::zero(); o];
    let mut grad_col = vec![T::zero(); rows * p];
    for (b, g) in grad_out.as_slice().chunks_exact(o * p).enumerate() {
        for (gb, plane) in grad_b.iter_mut().zip(g.chunks_exact(p)) {
            *gb = plane.iter().fold(*gb, |acc, &v| acc + v);
        }
        gemm(false, true, o, rows, p, T::one(), g, &cache.cols[b], T::one(), &mut grad_w);
        if !input_grad {
            continue;
        }
        gemm(true, false, rows, p, o, T::one(), weight.as_slice(), g, T::zero(), &mut grad_col);
        let dst = &mut grad_x[b * c * h * w..(b + 1) * c * h * w];
        col2im(&grad_col, (c, h, w), k, cache.stride, cache.padding, (oh, ow), dst);
    }
    Ok((
        Tensor::from_vec(&cache.input_dims, grad_x)?,
        Tensor::from_vec(&cache.weight_dims, grad_w)?,
        Tensor::from_vec(&[o], grad_b)?,
    ))
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let name = name.into();
        let dims = [out_channels, in_channels, kernel, kernel];
        Shape::new(&dims)?;
        let weight = kaiming(rng, &dims, in_channels * kernel * kernel);
        Ok(Conv2d {
            weight: Param::new(format!("{name}.weight"), weight, ParamRole::Weight),
            bias: Param::new(
                format!("{name}.bias"),
                Tensor::zeros(&[out_channels])?,
                ParamRole::Bias,
            ),
            name,
            kernel,
            stride,
            padding,
            cache: None,
            input_grad: true,
        })
    }

    /// When off, `backward` only accumulates parameter gradients and returns
    /// zeros for the input (for a first layer fed directly by data).
    pub fn set_input_grad(&mut self, on: bool) {
        self.input_grad = on;
    }

    pub fn weight(&self) -> &Param<T> {
        &self.weight
    }

    pub fn bias(&self) -> &Param<T> {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Param<T> {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Param<T> {
        &mut self.bias
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let wd = self.weight.value.dims();
        match input {
            &[n, c, h, w] if c == wd[1] => {
                let oh = conv_out(h, self.kernel, self.stride, self.padding);
                let ow = conv_out(w, self.kernel, self.stride, self.padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![n, wd[0], oh, ow]),
                    _ => Err(Error::ShapeMismatch {
                        op: "conv2d",
                        expected: vec![self.kernel, self.kernel],
                        got: vec![h + 2 * self.padding, w + 2 * self.padding],
                    }),
                }
            }
            _ => Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: vec![input.first().copied().unwrap_or(1), wd[1], 0, 0],
                got: input.to_vec(),
            }),
        }
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, cache) =
            conv2d_forward(x, &self.weight.value, &self.bias.value, self.stride, self.padding)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn infer(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(conv2d_impl(x, &self.weight.value, &self.bias.value, self.stride, self.padding, false)?.0)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        let (gx, gw, gb) = conv2d_backward_impl(cache, &self.weight.value, grad_out, self.input_grad)?;
        self.weight.grad.axpy(T::one(), &gw)?;
        self.bias.grad.axpy(T::one(), &gb)?;
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Fully connected layer; inputs of any rank are flattened to `[B, features]`.
pub struct Dense<T: Scalar> {
    name: String,
    weight: Param<T>,
    bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let name = name.into();
        Shape::new(&[out_features, in_features])?;
        let weight = kaiming(rng, &[out_features, in_features], in_features);
        Ok(Dense {
            weight: Param::new(format!("{name}.weight"), weight, ParamRole::Weight),
            bias: Param::new(
                format!("{name}.bias"),
                Tensor::zeros(&[out_features])?,
                ParamRole::Bias,
            ),
            name,
            input: None,
        })
    }

    pub fn from_params(name: impl Into<String>, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let name = name.into();
        let &[out, _] = weight.dims() else {
            return Err(Error::ShapeMismatch {
                op: "dense",
                expected: vec![0, 0],
                got: weight.dims().to_vec(),
            });
        };
        bias.expect_dims("dense bias", &[out])?;
        Ok(Dense {
            weight: Param::new(format!("{name}.weight"), weight, ParamRole::Weight),
            bias: Param::new(format!("{name}.bias"), bias, ParamRole::Bias),
            name,
            input: None,
        })
    }

    fn features(&self) -> (usize, usize) {
        let d = self.weight.value.dims();
        (d[0], d[1])
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "dense"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (out, inp) = self.features();
        let flat: usize = input.iter().skip(1).product();
        if input.len() < 2 || flat != inp {
            return Err(Error::ShapeMismatch {
                op: "dense",
                expected: vec![input.first().copied().unwrap_or(1), inp],
                got: input.to_vec(),
            });
        }
        Ok(vec![input[0], out])
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = self.output_dims(x.dims())?;
        let (out, inp) = self.features();
        let b = dims[0];
        let mut y = vec![T::zero(); b * out];
        for row in y.chunks_exact_mut(out) {
            row.copy_from_slice(self.bias.value.as_slice());
        }
        gemm(false, true, b, out, inp, T::one(), x.as_slice(), self.weight.value.as_slice(), T::one(), &mut y);
        self.input = Some(x.clone());
        let y = Tensor::from_vec(&dims, y)?;
        y.debug_check_finite(&self.name);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        let (out, inp) = self.features();
        let b = x.dims()[0];
        grad_out.expect_dims("dense_backward", &[b, out])?;
        let g = grad_out.as_slice();
        gemm(true, false, out, inp, b, T::one(), g, x.as_slice(), T::one(), self.weight.grad.as_mut_slice());
        let gb = self.bias.grad.as_mut_slice();
        for row in g.chunks_exact(out) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        let mut gx = vec![T::zero(); b * inp];
        gemm(false, false, b, inp, out, T::one(), g, self.weight.value.as_slice(), T::zero(), &mut gx);
        Tensor::from_vec(x.dims(), gx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// `max(floor, x)` elementwise, with the mask `x > floor`.
pub(crate) fn masked_floor<T: Scalar>(x: &Tensor<T>, floor: T) -> (Tensor<T>, (Vec<usize>, Vec<bool>)) {
    let mask: Vec<bool> = x.as_slice().iter().map(|&v| v > floor).collect();
    let y = x.map(|v| if v > floor { v } else { floor });
    (y, (x.dims().to_vec(), mask))
}

/// `grad_out` where the mask is set, zero elsewhere.
pub(crate) fn apply_mask<T: Scalar>((dims, mask): &(Vec<usize>, Vec<bool>), grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_dims("masked backward", dims)?;
    let data = grad_out
        .as_slice()
        .iter()
        .zip(mask)
        .map(|(&g, &keep)| if keep { g } else { T::zero() })
        .collect();
    Tensor::from_vec(dims, data)
}

/// Plain `max(0, x)`.
pub struct Relu<T: Scalar> {
    name: String,
    // x > 0 per input element
    mask: Option<(Vec<usize>, Vec<bool>)>,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Scalar> Relu<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Relu {
            name: name.into(),
            mask: None,
            _scalar: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &'static str {
        "relu"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, mask) = masked_floor(x, T::zero());
        self.mask = Some(mask);
        Ok(y)
    }

    fn infer(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.map(|v| if v > T::zero() { v } else { T::zero() }))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        apply_mask(mask, grad_out)
    }

    fn near_kink(&self, x: &Tensor<T>, index: usize, tol: f64) -> bool {
        x.as_slice()[index].as_f64().abs() < tol
    }
}

/// Mean softmax cross-entropy over a `[B, C]` batch of logits.
///
/// Returns the loss and its gradient `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let &[b, classes] = logits.dims() else {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            expected: vec![labels.len(), 0],
            got: logits.dims().to_vec(),
        });
    };
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            expected: vec![labels.len(), classes],
            got: logits.dims().to_vec(),
        });
    }
    let mut grad = vec![T::zero(); b * classes];
    let mut loss = 0.0;
    let mut probs = vec![0.0; classes];
    for (sample, (row, &label)) in logits.as_slice().chunks_exact(classes).zip(labels).enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes,
                sample,
            });
        }
        let shift = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (p, v) in probs.iter_mut().zip(row) {
            *p = (v.as_f64() - shift).exp();
            total += *p;
        }
        loss += total.ln() - (row[label].as_f64() - shift);
        let g = &mut grad[sample * classes..(sample + 1) * classes];
        for (j, (gj, p)) in g.iter_mut().zip(&probs).enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            *gj = T::from_f64_lossy((p / total - onehot) / b as f64);
        }
    }
    Ok((loss / b as f64, Tensor::from_vec(&[b, classes], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    // Direct six-loop convolution, independent of im2col/gemm.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [n, c, h, wd] = [x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]];
        let [o, _, k, _] = [w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]];
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]).unwrap();
        for bi in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.as_slice()[oc];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.get(&[bi, ci, iy as usize, ix as usize]).unwrap()
                                            * w.get(&[oc, ci, ky, kx]).unwrap();
                                    }
                                }
                            }
                        }
                        let i = out.shape().flatten(&[bi, oc, oy, ox]).unwrap();
                        out.as_mut_slice()[i] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[2, 1, 4, 3]);
        let w = Tensor::new(&[1, 1, 1, 1], 1.0).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let (y, _) = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_window_sum() {
        let x = Tensor::new(&[1, 1, 3, 3], 1.0).unwrap();
        let w = Tensor::new(&[1, 1, 3, 3], 1.0).unwrap();
        let (y, _) = conv2d_forward(&x, &w, &Tensor::zeros(&[1]).unwrap(), 1, 0).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.as_slice(), &[9.0]);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[1, 2, 5, 5]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let b = random(&mut rng, &[3]);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 2), (1, 4), (3, 2), (3, 4)] {
            let (y, _) = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
            let expected = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(y.dims(), expected.dims());
            for (a, e) in y.as_slice().iter().zip(expected.as_slice()) {
                assert!((a - e).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, h, w, k) = (2, 5, 6, 3);
        for (stride, pad) in [(1, 0), (1, 2), (2, 1), (3, 4)] {
            let (oh, ow) = (conv_out(h, k, stride, pad).unwrap(), conv_out(w, k, stride, pad).unwrap());
            let x = random(&mut rng, &[c * h * w]);
            let g = random(&mut rng, &[c * k * k * oh * ow]);
            let mut col = vec![0.0; g.numel()];
            im2col(x.as_slice(), (c, h, w), k, stride, pad, (oh, ow), &mut col);
            let mut back = vec![0.0; x.numel()];
            col2im(g.as_slice(), (c, h, w), k, stride, pad, (oh, ow), &mut back);
            let lhs: f64 = col.iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.as_slice().iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{stride} {pad}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f64>::zeros(&[1, 2, 5, 5]).unwrap();
        let w = Tensor::zeros(&[3, 1, 3, 3]).unwrap();
        assert!(conv2d_forward(&x, &w, &Tensor::zeros(&[3]).unwrap(), 1, 0).is_err());
        let w = Tensor::zeros(&[3, 2, 7, 7]).unwrap();
        assert!(conv2d_forward(&x, &w, &Tensor::zeros(&[3]).unwrap(), 1, 0).is_err());
    }

    #[test]
    fn conv_backward_zero_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, &[2, 2, 4, 4]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let b = random(&mut rng, &[3]);
        let (y, cache) = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        let (gx, gw, gb) = conv2d_backward(&cache, &w, &y.zeros_like()).unwrap();
        assert!(gx.as_slice().iter().chain(gw.as_slice()).chain(gb.as_slice()).all(|&v| v == 0.0));
        let g = random(&mut rng, y.dims());
        let (_, _, gb) = conv2d_backward(&cache, &w, &g).unwrap();
        for oc in 0..3 {
            let mut expected = 0.0;
            for bi in 0..2 {
                for p in 0..16 {
                    expected += g.as_slice()[(bi * 3 + oc) * 16 + p];
                }
            }
            assert!((gb.as_slice()[oc] - expected).abs() < 1e-12);
        }
        assert!(conv2d_backward(&cache, &w, &Tensor::zeros(&[2, 3, 4, 3]).unwrap()).is_err());
    }

    #[test]
    fn dense_identity() {
        let eye = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let mut d = Dense::from_params("fc", eye, Tensor::zeros(&[3]).unwrap()).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        assert_eq!(d.forward(&x).unwrap(), x);
        assert!(d.forward(&Tensor::zeros(&[2, 4]).unwrap()).is_err());
    }

    #[test]
    fn relu_values() {
        let mut r = Relu::<f64>::new("relu");
        let x = Tensor::from_vec(&[2], vec![-2.0, 3.0]).unwrap();
        assert_eq!(r.forward(&x).unwrap().as_slice(), &[0.0, 3.0]);
        let g = Tensor::new(&[2], 5.0).unwrap();
        assert_eq!(r.backward(&g).unwrap().as_slice(), &[0.0, 5.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_param_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut d = Dense::<f64>::new("fc", 6, 4, &mut rng).unwrap();
        let x = random(&mut rng, &[3, 6]);
        let y = d.forward(&x).unwrap();
        d.backward(&y.zeros_like()).unwrap();
        for p in d.params() {
            assert_eq!(p.grad.dims(), p.value.dims());
            assert!(p.grad.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let logits = Tensor::<f64>::zeros(&[2, 10]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[3, 7]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
        let mut sharp = vec![0.0; 10];
        sharp[4] = 1000.0;
        let logits: Tensor<f64> = Tensor::from_vec(&[1, 10], sharp).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[4]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.as_slice().iter().all(|v| v.abs() < 1e-12));
        assert!(matches!(
            softmax_cross_entropy(&logits, &[10]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }
}
