//! C ABI over the batch-normalization core: flat-buffer entry points for the
//! stateless transforms and an opaque handle for stored networks.
//!
//! Conventions:
//! - Matrices are row-major `double` buffers; `m` rows, `d` columns.
//! - Every function returns a `BnStatus`; outputs are written only on BN_OK.
//! - On failure, `bn_last_error_message` returns a thread-local description
//!   valid until the next failing call on the same thread.
//! - Panics never unwind across the boundary; they become BN_STATUS_PANIC.

use bnlab::batchnorm::{
    bn_backward, bn_fold, bn_forward_inference, bn_forward_train, BnParams, BnStats,
};
use bnlab::checkpoint::{load_network, save_network};
use bnlab::nn::{fold_network, network_forward, Layer, Network};
use bnlab::{Error, Tensor};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Result of every FFI call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnStatus {
    Ok = 0,
    /// A required pointer was NULL or a length overflowed.
    NullArgument = 1,
    /// Shapes or batch sizes are unusable.
    Dimension = 2,
    Config = 3,
    /// Operation is invalid for the object's current state.
    State = 4,
    /// Malformed checkpoint or dataset bytes.
    Format = 5,
    Io = 6,
    /// A numeric verification failed.
    Verification = 7,
    /// Non-finite values where finite ones are required.
    Numeric = 8,
    /// An internal panic was caught at the boundary.
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().filter(|&b| b != 0).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> BnStatus {
    match err {
        Error::Dim { .. } | Error::EmptyBatch(_) | Error::BatchTooSmall { .. } => {
            BnStatus::Dimension
        }
        Error::NonFinite(_) => BnStatus::Numeric,
        Error::Config(_) => BnStatus::Config,
        Error::State(_) => BnStatus::State,
        Error::Format(_) => BnStatus::Format,
        Error::Io(_) => BnStatus::Io,
        Error::Verification(_) => BnStatus::Verification,
    }
}

fn fail(err: &Error) -> BnStatus {
    set_error(&err.to_string());
    status_of(err)
}

fn fail_null(what: &str) -> BnStatus {
    set_error(&format!("null or oversized argument: {what}"));
    BnStatus::NullArgument
}

/// Runs the body with panics converted to BN_STATUS_PANIC.
fn guarded(body: impl FnOnce() -> BnStatus) -> BnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            BnStatus::Panic
        }
    }
}

/// Message for the most recent failure on this thread. Never NULL; empty
/// before any failure. The pointer is invalidated by the next failing call.
#[no_mangle]
pub extern "C" fn bn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn slice_in<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

unsafe fn slice_out<'a>(ptr: *mut f64, len: usize) -> Option<&'a mut [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts_mut(ptr, len))
    }
}

fn params_from(gamma: &[f64], beta: &[f64]) -> Result<BnParams, Error> {
    BnParams::new(
        Tensor::vector(gamma.to_vec()),
        Tensor::vector(beta.to_vec()),
    )
}

fn stats_from(mean: &[f64], var: &[f64]) -> BnStats {
    let mut stats = BnStats::new(mean.len());
    stats.mean = Tensor::vector(mean.to_vec());
    stats.var = Tensor::vector(var.to_vec());
    stats.batches_seen = 1;
    stats
}

/// Training-mode transform of an `m` by `d` batch. Writes the normalized
/// output to `y` (`m*d`); optionally writes the per-column batch mean and
/// biased variance to `mu_out` / `var_out` (`d` each, may be NULL).
///
/// # Safety
/// Pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn bn_forward_train_f64(
    x: *const f64,
    m: usize,
    d: usize,
    gamma: *const f64,
    beta: *const f64,
    eps: f64,
    y: *mut f64,
    mu_out: *mut f64,
    var_out: *mut f64,
) -> BnStatus {
    guarded(|| {
        let Some(len) = m.checked_mul(d) else {
            return fail_null("m*d overflows");
        };
        let (Some(x), Some(gamma), Some(beta), Some(y)) = (
            slice_in(x, len),
            slice_in(gamma, d),
            slice_in(beta, d),
            slice_out(y, len),
        ) else {
            return fail_null("x, gamma, beta, y");
        };
        let input = match Tensor::from_vec(&[m, d], x.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        };
        let params = match params_from(gamma, beta) {
            Ok(p) => p,
            Err(e) => return fail(&e),
        };
        match bn_forward_train(&input, &params, eps) {
            Ok((out, cache)) => {
                y.copy_from_slice(out.data());
                if let Some(mu) = slice_out(mu_out, d) {
                    mu.copy_from_slice(cache.mu_b.data());
                }
                if let Some(var) = slice_out(var_out, d) {
                    var.copy_from_slice(cache.sigma2_b.data());
                }
                BnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Gradients of the training-mode transform. Recomputes the forward pass
/// from `x`, then backpropagates `dy` (`m*d`) into `dx` (`m*d`), `dgamma`
/// and `dbeta` (`d` each).
///
/// # Safety
/// Pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn bn_backward_f64(
    x: *const f64,
    dy: *const f64,
    m: usize,
    d: usize,
    gamma: *const f64,
    beta: *const f64,
    eps: f64,
    dx: *mut f64,
    dgamma: *mut f64,
    dbeta: *mut f64,
) -> BnStatus {
    guarded(|| {
        let Some(len) = m.checked_mul(d) else {
            return fail_null("m*d overflows");
        };
        let (Some(x), Some(dy), Some(gamma), Some(beta)) = (
            slice_in(x, len),
            slice_in(dy, len),
            slice_in(gamma, d),
            slice_in(beta, d),
        ) else {
            return fail_null("x, dy, gamma, beta");
        };
        let (Some(dx), Some(dgamma), Some(dbeta)) = (
            slice_out(dx, len),
            slice_out(dgamma, d),
            slice_out(dbeta, d),
        ) else {
            return fail_null("dx, dgamma, dbeta");
        };
        let input = match Tensor::from_vec(&[m, d], x.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        };
        let upstream = match Tensor::from_vec(&[m, d], dy.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        };
        let params = match params_from(gamma, beta) {
            Ok(p) => p,
            Err(e) => return fail(&e),
        };
        let cache = match bn_forward_train(&input, &params, eps) {
            Ok((_, cache)) => cache,
            Err(e) => return fail(&e),
        };
        match bn_backward(&cache, &upstream, &params) {
            Ok((gx, ggamma, gbeta)) => {
                dx.copy_from_slice(gx.data());
                dgamma.copy_from_slice(ggamma.data());
                dbeta.copy_from_slice(gbeta.data());
                BnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Inference-mode transform using fixed population statistics (`mean`,
/// `var`, `d` each). Writes `y` (`m*d`).
///
/// # Safety
/// Pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn bn_forward_inference_f64(
    x: *const f64,
    m: usize,
    d: usize,
    gamma: *const f64,
    beta: *const f64,
    mean: *const f64,
    var: *const f64,
    eps: f64,
    y: *mut f64,
) -> BnStatus {
    guarded(|| {
        let Some(len) = m.checked_mul(d) else {
            return fail_null("m*d overflows");
        };
        let (Some(x), Some(gamma), Some(beta), Some(mean), Some(var), Some(y)) = (
            slice_in(x, len),
            slice_in(gamma, d),
            slice_in(beta, d),
            slice_in(mean, d),
            slice_in(var, d),
            slice_out(y, len),
        ) else {
            return fail_null("x, gamma, beta, mean, var, y");
        };
        let input = match Tensor::from_vec(&[m, d], x.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        };
        let params = match params_from(gamma, beta) {
            Ok(p) => p,
            Err(e) => return fail(&e),
        };
        let stats = stats_from(mean, var);
        match bn_forward_inference(&input, &params, &stats, eps) {
            Ok(out) => {
                y.copy_from_slice(out.data());
                BnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Collapses the inference transform into `y = scale * x + shift`,
/// writing `scale` and `shift` (`d` each).
///
/// # Safety
/// Pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn bn_fold_f64(
    gamma: *const f64,
    beta: *const f64,
    mean: *const f64,
    var: *const f64,
    d: usize,
    eps: f64,
    scale: *mut f64,
    shift: *mut f64,
) -> BnStatus {
    guarded(|| {
        let (Some(gamma), Some(beta), Some(mean), Some(var), Some(scale), Some(shift)) = (
            slice_in(gamma, d),
            slice_in(beta, d),
            slice_in(mean, d),
            slice_in(var, d),
            slice_out(scale, d),
            slice_out(shift, d),
        ) else {
            return fail_null("gamma, beta, mean, var, scale, shift");
        };
        let params = match params_from(gamma, beta) {
            Ok(p) => p,
            Err(e) => return fail(&e),
        };
        let stats = stats_from(mean, var);
        match bn_fold(&params, &stats, eps) {
            Ok(folded) => {
                scale.copy_from_slice(folded.scale.data());
                shift.copy_from_slice(folded.shift.data());
                BnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Opaque stored network. Create with `bn_network_load`, destroy with
/// `bn_network_free`.
pub struct BnNetwork {
    inner: Network,
}

unsafe fn path_from(ptr: *const c_char) -> Result<&'static Path, BnStatus> {
    if ptr.is_null() {
        return Err(fail_null("path"));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(BnStatus::Format)
        }
    }
}

/// Loads a checkpoint into a fresh handle stored to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bn_network_load(path: *const c_char, out: *mut *mut BnNetwork) -> BnStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let path = match path_from(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_network(path) {
            Ok(net) => {
                *out = Box::into_raw(Box::new(BnNetwork { inner: net }));
                BnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Writes the handle's network to a checkpoint file.
///
/// # Safety
/// `net` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bn_network_save(net: *const BnNetwork, path: *const c_char) -> BnStatus {
    guarded(|| {
        let Some(net) = net.as_ref() else {
            return fail_null("net");
        };
        let path = match path_from(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match save_network(&net.inner, path) {
            Ok(()) => BnStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

fn layer_in_dim(layer: &Layer) -> Option<usize> {
    match layer {
        Layer::Affine { w, .. } => Some(w.rows()),
        Layer::BatchNorm { params, .. } => Some(params.dim()),
        Layer::Sigmoid | Layer::Relu => None,
    }
}

fn layer_out_dim(layer: &Layer) -> Option<usize> {
    match layer {
        Layer::Affine { w, .. } => Some(w.cols()),
        Layer::BatchNorm { params, .. } => Some(params.dim()),
        Layer::Sigmoid | Layer::Relu => None,
    }
}

/// Expected number of input columns.
///
/// # Safety
/// `net` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bn_network_input_dim(net: *const BnNetwork, out: *mut usize) -> BnStatus {
    guarded(|| {
        let (Some(net), false) = (net.as_ref(), out.is_null()) else {
            return fail_null("net, out");
        };
        match net.inner.layers.iter().find_map(layer_in_dim) {
            Some(d) => {
                *out = d;
                BnStatus::Ok
            }
            None => {
                set_error("network has no sized layer");
                BnStatus::State
            }
        }
    })
}

/// Number of output columns produced per example.
///
/// # Safety
/// `net` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bn_network_output_dim(net: *const BnNetwork, out: *mut usize) -> BnStatus {
    guarded(|| {
        let (Some(net), false) = (net.as_ref(), out.is_null()) else {
            return fail_null("net, out");
        };
        match net.inner.layers.iter().rev().find_map(layer_out_dim) {
            Some(d) => {
                *out = d;
                BnStatus::Ok
            }
            None => {
                set_error("network has no sized layer");
                BnStatus::State
            }
        }
    })
}

/// Forward pass in the network's stored mode. `x` is `m` by `d` row-major
/// with `d = bn_network_input_dim`; `y` must hold `m * bn_network_output_dim`
/// values (`y_len` is checked).
///
/// # Safety
/// Pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn bn_network_forward(
    net: *const BnNetwork,
    x: *const f64,
    m: usize,
    d: usize,
    y: *mut f64,
    y_len: usize,
) -> BnStatus {
    guarded(|| {
        let Some(net) = net.as_ref() else {
            return fail_null("net");
        };
        let Some(len) = m.checked_mul(d) else {
            return fail_null("m*d overflows");
        };
        let (Some(x), Some(y)) = (slice_in(x, len), slice_out(y, y_len)) else {
            return fail_null("x, y");
        };
        let input = match Tensor::from_vec(&[m, d], x.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        };
        let trace = match network_forward(&net.inner, &input) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        };
        let out = trace.output();
        if out.len() != y_len {
            set_error(&format!(
                "output buffer holds {y_len} values but the network produces {}",
                out.len()
            ));
            return BnStatus::Dimension;
        }
        y.copy_from_slice(out.data());
        BnStatus::Ok
    })
}

/// Folds every BN layer into a neighboring affine, storing a new handle to
/// `*out`. Requires an inference-mode network.
///
/// # Safety
/// `net` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bn_network_fold(
    net: *const BnNetwork,
    out: *mut *mut BnNetwork,
) -> BnStatus {
    guarded(|| {
        let (Some(net), false) = (net.as_ref(), out.is_null()) else {
            return fail_null("net, out");
        };
        match fold_network(&net.inner) {
            Ok(folded) => {
                *out = Box::into_raw(Box::new(BnNetwork { inner: folded }));
                BnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Releases a handle. NULL is a no-op.
///
/// # Safety
/// `net` must be NULL or a pointer returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bn_network_free(net: *mut BnNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}
