//! C ABI over the `alphapool` library.
//!
//! Every function returns an [`AlphapoolStatus`]; on failure the message is
//! available from [`alphapool_last_error`] on the same thread. Objects cross
//! the boundary as opaque handles that must be released with their `_free`
//! function. Panics are caught and reported as `ALPHAPOOL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use alphapool::alpha::{
    alpha_integrate_with_grad, alpha_pool_backward, alpha_pool_forward, alpha_pool_values, AlphaPoolCache,
};
use alphapool::checkpoint::Checkpoint;
use alphapool::config::{Precision, TrainConfig};
use alphapool::data::Split;
use alphapool::experiment::{
    checkpoint_config, cmd_eval, cmd_train, model_from_checkpoint, EvalRequest,
};
use alphapool::model::Model;
use alphapool::{f_alpha, Error, PoolGeometry, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphapoolStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    ShapeMismatch = 4,
    Io = 5,
    Format = 6,
    Checkpoint = 7,
    Config = 8,
    Numeric = 9,
    Panic = 99,
}

/// Model loaded from a checkpoint.
pub struct AlphapoolModel {
    inner: ModelInner,
    input: (usize, usize, usize),
    classes: usize,
}

enum ModelInner {
    F32(Model<f32>),
    F64(Model<f64>),
}

/// State saved by [`alphapool_alpha_pool_forward`] for the backward pass.
pub struct AlphapoolPoolCache {
    cache: AlphaPoolCache<f64>,
    input_len: usize,
    output_len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> AlphapoolStatus {
    match e {
        Error::InvalidShape { .. } | Error::ShapeMismatch { .. } => AlphapoolStatus::ShapeMismatch,
        Error::Domain { .. } | Error::NonPositiveInput { .. } | Error::LabelOutOfRange { .. } => {
            AlphapoolStatus::Domain
        }
        Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } => AlphapoolStatus::Numeric,
        Error::Config(_) => AlphapoolStatus::Config,
        Error::Format { .. } => AlphapoolStatus::Format,
        Error::Checkpoint(_) => AlphapoolStatus::Checkpoint,
        Error::Io { .. } => AlphapoolStatus::Io,
    }
}

struct Fail(AlphapoolStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(name: &str) -> Fail {
    Fail(AlphapoolStatus::NullPointer, format!("`{name}` is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(AlphapoolStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AlphapoolStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AlphapoolStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            AlphapoolStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out_ref<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or_else(|| null(name))
}

unsafe fn path(ptr: *const c_char, name: &str) -> Result<PathBuf, Fail> {
    if ptr.is_null() {
        return Err(null(name));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(format!("`{name}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn alphapool_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn alphapool_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `f_alpha(z)`: `z^((1 - alpha) / 2)`, or `ln z` at `alpha = 1`.
///
/// # Safety
/// `out` must be a valid pointer to a `double`.
#[no_mangle]
pub unsafe extern "C" fn alphapool_f_alpha(z: f64, alpha: f64, out: *mut f64) -> AlphapoolStatus {
    guard(|| {
        *out_ref(out, "out")? = f_alpha(z, alpha)?;
        Ok(())
    })
}

/// Alpha-integration of `n` positive values. `dydx` (length `n`) and
/// `dyda` may be null when the gradients are not wanted.
///
/// # Safety
/// `values` must point to `n` doubles, `dydx` (if non-null) to `n` writable
/// doubles, and `y` / `dyda` (if non-null) to writable doubles.
#[no_mangle]
pub unsafe extern "C" fn alphapool_alpha_integrate(
    values: *const f64,
    n: usize,
    alpha: f64,
    y: *mut f64,
    dydx: *mut f64,
    dyda: *mut f64,
) -> AlphapoolStatus {
    guard(|| {
        let values = slice(values, n, "values")?;
        let y = out_ref(y, "y")?;
        let (value, grad_x, grad_alpha) = alpha_integrate_with_grad(values, alpha)?;
        *y = value;
        if !dydx.is_null() {
            slice_mut(dydx, n, "dydx")?.copy_from_slice(&grad_x);
        }
        if let Some(d) = dyda.as_mut() {
            *d = grad_alpha;
        }
        Ok(())
    })
}

fn pool_output_len(n: usize, c: usize, h: usize, w: usize, window: usize, stride: usize) -> Result<(PoolGeometry, Vec<usize>), Fail> {
    let geom = PoolGeometry::new((window, window), (stride, stride))?;
    let out = geom.output_dims(&[n, c, h, w])?;
    Ok((geom, out))
}

/// Number of outputs of a square pool over an `n x c x h x w` tensor, or 0
/// when the geometry is invalid.
#[no_mangle]
pub extern "C" fn alphapool_pool_output_len(n: usize, c: usize, h: usize, w: usize, window: usize, stride: usize) -> usize {
    pool_output_len(n, c, h, w, window, stride).map_or(0, |(_, d)| d.iter().product())
}

/// Alpha-integration pooling of a row-major NCHW tensor with square
/// windows. Writes `out_len` outputs and, when `cache` is non-null, a handle
/// for [`alphapool_alpha_pool_backward`].
///
/// # Safety
/// `x` must point to `n*c*h*w` doubles and `out` to `out_len` writable
/// doubles; `cache` must be null or a valid pointer to a handle slot.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn alphapool_alpha_pool_forward(
    x: *const f64,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    alpha: f64,
    out: *mut f64,
    out_len: usize,
    cache: *mut *mut AlphapoolPoolCache,
) -> AlphapoolStatus {
    guard(|| {
        let (geom, out_dims) = pool_output_len(n, c, h, w, window, stride)?;
        let expected: usize = out_dims.iter().product();
        if out_len != expected {
            return Err(invalid(format!("out_len is {out_len}, pooling produces {expected}")));
        }
        let input_len = n * c * h * w;
        let x = Tensor::from_vec(&[n, c, h, w], slice(x, input_len, "x")?.to_vec())?;
        let out = slice_mut(out, out_len, "out")?;
        if cache.is_null() {
            out.copy_from_slice(alpha_pool_values(&x, geom, alpha, "ffi")?.as_slice());
        } else {
            let (y, saved) = alpha_pool_forward(&x, geom, alpha, "ffi")?;
            out.copy_from_slice(y.as_slice());
            *cache = Box::into_raw(Box::new(AlphapoolPoolCache {
                cache: saved,
                input_len,
                output_len: out_len,
            }));
        }
        Ok(())
    })
}

/// Backward pass of a pooling call: `grad_x` receives dL/dx and
/// `grad_alpha` dL/dalpha for the upstream gradient `grad_out`.
///
/// # Safety
/// `cache` must come from [`alphapool_alpha_pool_forward`]; the buffers must
/// have the lengths of that call's output and input.
#[no_mangle]
pub unsafe extern "C" fn alphapool_alpha_pool_backward(
    cache: *const AlphapoolPoolCache,
    grad_out: *const f64,
    grad_out_len: usize,
    grad_x: *mut f64,
    grad_x_len: usize,
    grad_alpha: *mut f64,
) -> AlphapoolStatus {
    guard(|| {
        let cache = cache.as_ref().ok_or_else(|| null("cache"))?;
        if grad_out_len != cache.output_len || grad_x_len != cache.input_len {
            return Err(invalid(format!(
                "expected {} upstream and {} input gradients, got {grad_out_len} and {grad_x_len}",
                cache.output_len, cache.input_len
            )));
        }
        let g = slice(grad_out, grad_out_len, "grad_out")?;
        let grad_alpha = out_ref(grad_alpha, "grad_alpha")?;
        let gx = slice_mut(grad_x, grad_x_len, "grad_x")?;
        let upstream = Tensor::from_vec(&[grad_out_len], g.to_vec())?;
        // the cache checks dims, so give the upstream its real shape
        let upstream = upstream.reshape(cache.cache.output_dims())?;
        let (dx, da) = alpha_pool_backward(&cache.cache, &upstream)?;
        gx.copy_from_slice(dx.as_slice());
        *grad_alpha = da;
        Ok(())
    })
}

/// Releases a pooling cache; null is ignored.
///
/// # Safety
/// `cache` must be null or a handle from [`alphapool_alpha_pool_forward`]
/// that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn alphapool_pool_cache_free(cache: *mut AlphapoolPoolCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}

/// Loads a checkpoint written by `alphapool train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn alphapool_model_load(path_ptr: *const c_char, model: *mut *mut AlphapoolModel) -> AlphapoolStatus {
    guard(|| {
        let slot = out_ref(model, "model")?;
        let checkpoint = Checkpoint::load(&path(path_ptr, "path")?)?;
        let config = checkpoint_config(&checkpoint)?;
        let model_config = config.model_config()?;
        let inner = match checkpoint.precision {
            Precision::F32 => ModelInner::F32(model_from_checkpoint(&checkpoint, &config)?),
            Precision::F64 => ModelInner::F64(model_from_checkpoint(&checkpoint, &config)?),
        };
        *slot = Box::into_raw(Box::new(AlphapoolModel {
            inner,
            input: model_config.input,
            classes: model_config.classes,
        }));
        Ok(())
    })
}

/// Input image shape `(channels, height, width)` and class count.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn alphapool_model_shape(
    model: *const AlphapoolModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    classes: *mut usize,
) -> AlphapoolStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_ref(channels, "channels")? = m.input.0;
        *out_ref(height, "height")? = m.input.1;
        *out_ref(width, "width")? = m.input.2;
        *out_ref(classes, "classes")? = m.classes;
        Ok(())
    })
}

/// Predicted class of each of `n` images given as row-major floats in
/// `[0, 1]` (`n * channels * height * width` values).
///
/// # Safety
/// `model` must be a live handle, `images` must hold the stated number of
/// floats and `labels` must have room for `n` entries.
#[no_mangle]
pub unsafe extern "C" fn alphapool_model_predict(
    model: *mut AlphapoolModel,
    images: *const f32,
    n: usize,
    labels: *mut usize,
) -> AlphapoolStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        if n == 0 {
            return Ok(());
        }
        let (c, h, w) = m.input;
        let pixels = slice(images, n * c * h * w, "images")?;
        let labels = slice_mut(labels, n, "labels")?;
        let x = Tensor::from_vec(&[n, c, h, w], pixels.to_vec())?;
        let predicted = match &mut m.inner {
            ModelInner::F32(model) => model.predict(&x)?,
            ModelInner::F64(model) => model.predict(&x.cast())?,
        };
        labels.copy_from_slice(&predicted);
        Ok(())
    })
}

/// Copies the model's alpha values (one per alpha pooling layer) into
/// `out` and stores how many there are in `count`. `out` may be null to
/// query the count.
///
/// # Safety
/// `model` must be a live handle; `out` must have room for `capacity`
/// doubles when non-null; `count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn alphapool_model_alphas(
    model: *const AlphapoolModel,
    out: *mut f64,
    capacity: usize,
    count: *mut usize,
) -> AlphapoolStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let alphas = match &m.inner {
            ModelInner::F32(model) => model.alphas(),
            ModelInner::F64(model) => model.alphas(),
        };
        *out_ref(count, "count")? = alphas.len();
        if !out.is_null() {
            if capacity < alphas.len() {
                return Err(invalid(format!("capacity {capacity} < {} alphas", alphas.len())));
            }
            slice_mut(out, alphas.len(), "out")?.copy_from_slice(&alphas);
        }
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a live handle from [`alphapool_model_load`].
#[no_mangle]
pub unsafe extern "C" fn alphapool_model_free(model: *mut AlphapoolModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Trains from a config file. `data_dir` and `out_dir` override the config
/// when non-null. The final test accuracy goes to `test_acc` if non-null.
///
/// # Safety
/// String arguments must be NUL-terminated or null (except `config_path`).
#[no_mangle]
pub unsafe extern "C" fn alphapool_train(
    config_path: *const c_char,
    data_dir: *const c_char,
    out_dir: *const c_char,
    test_acc: *mut f64,
) -> AlphapoolStatus {
    guard(|| {
        let mut config = TrainConfig::load(&path(config_path, "config_path")?)?;
        if !data_dir.is_null() {
            config.data_dir = path(data_dir, "data_dir")?;
        }
        if !out_dir.is_null() {
            config.out_dir = path(out_dir, "out_dir")?;
        }
        let outcome = cmd_train(&config)?;
        if let Some(acc) = test_acc.as_mut() {
            *acc = outcome.last().test_acc;
        }
        Ok(())
    })
}

/// Accuracy of a checkpoint on the test (`train = 0`) or train
/// (`train != 0`) split of the dataset it was trained on.
///
/// # Safety
/// `checkpoint` and `data_dir` must be NUL-terminated; `accuracy` valid.
#[no_mangle]
pub unsafe extern "C" fn alphapool_eval(
    checkpoint: *const c_char,
    data_dir: *const c_char,
    train: i32,
    accuracy: *mut f64,
) -> AlphapoolStatus {
    guard(|| {
        let accuracy = out_ref(accuracy, "accuracy")?;
        let checkpoint = path(checkpoint, "checkpoint")?;
        let data_dir = path(data_dir, "data_dir")?;
        let result = cmd_eval(&EvalRequest {
            checkpoint: &checkpoint,
            data_dir: &data_dir,
            split: if train != 0 { Split::Train } else { Split::Test },
            dataset: None,
        })?;
        *accuracy = result.accuracy();
        Ok(())
    })
}
