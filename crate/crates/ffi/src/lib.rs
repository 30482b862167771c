//! C ABI over `butterfly-moe`.
//!
//! Every entry point returns a [`BmoeStatus`]; on failure the message is
//! kept per thread and read back with [`bmoe_last_error`]. Handles are opaque
//! and must be released with their `_free` function. Panics never cross the
//! boundary: they are caught and reported as [`BmoeStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use butterfly_moe::analysis;
use butterfly_moe::autodiff::Tensor;
use butterfly_moe::checkpoint;
use butterfly_moe::error::Error;
use butterfly_moe::model::Model;
use butterfly_moe::moe::{self, MoEConfig, MoELayer};
use butterfly_moe::ternary;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BmoeStatus {
    Ok = 0,
    NullPointer = 1,
    /// Invalid dimensions, depths or other configuration.
    Config = 2,
    /// Caller buffer or tensor has the wrong size.
    Shape = 3,
    /// Non-finite values.
    Numeric = 4,
    Io = 5,
    /// Malformed checkpoint bytes.
    Format = 6,
    Panic = 7,
}

/// One butterfly MoE layer in `f32`.
pub struct BmoeLayer {
    inner: MoELayer<f32>,
}

/// A model restored from a checkpoint, in `f32`.
pub struct BmoeModel {
    inner: Model<f32>,
}

/// Per-token arithmetic of one MoE layer.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BmoeFlops {
    pub rotation_flops: u64,
    pub ternary_adds: u64,
    pub ternary_muls: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BmoeStatus {
    match e {
        Error::Shape { .. } | Error::Index { .. } => BmoeStatus::Shape,
        Error::Config(_) => BmoeStatus::Config,
        Error::Numeric(_) => BmoeStatus::Numeric,
        Error::Io(_) => BmoeStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Csv(_) => BmoeStatus::Format,
    }
}

struct Fail(BmoeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Rejects NaN and infinities before they reach routing.
fn finite(xs: &[f32], what: &str) -> Result<(), Fail> {
    match xs.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Fail(BmoeStatus::Numeric, format!("{what}[{i}] is not finite"))),
        None => Ok(()),
    }
}

fn null(what: &str) -> Fail {
    Fail(BmoeStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BmoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BmoeStatus::Ok,
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
            set_error(format!("panic: {msg}"));
            BmoeStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or valid for reads of `len` elements.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null and valid for `len` reads per the caller contract.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

/// # Safety
/// `p` must be null or valid for writes of `len` elements.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null and valid for `len` writes per the caller contract.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

/// # Safety
/// `p` must be null or point to a live handle.
unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: per the caller contract.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length in
/// bytes, or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or valid for writes of `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn bmoe_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            // SAFETY: `buf` holds at least `len > n` bytes.
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bmoe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a seeded layer. `layers_in`/`layers_out` of 0 select full depth.
///
/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn bmoe_layer_new(
    d_model: usize,
    d_ff: usize,
    n_experts: usize,
    k: usize,
    layers_in: usize,
    layers_out: usize,
    seed: u64,
    out: *mut *mut BmoeLayer,
) -> BmoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut config = MoEConfig::new(d_model, d_ff, n_experts, k);
        if layers_in > 0 {
            config.layers_in = layers_in;
        }
        if layers_out > 0 {
            config.layers_out = layers_out;
        }
        let inner = MoELayer::new(config, seed)?;
        // SAFETY: `out` checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(BmoeLayer { inner })) };
        Ok(())
    })
}

/// Releases a layer; null is ignored.
///
/// # Safety
/// `layer` must be null or a handle from [`bmoe_layer_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bmoe_layer_free(layer: *mut BmoeLayer) {
    if !layer.is_null() {
        // SAFETY: ownership returns to Rust exactly once per the contract.
        drop(unsafe { Box::from_raw(layer) });
    }
}

/// Writes `d_model`, `d_ff`, `n_experts` and `k`; any output may be null.
///
/// # Safety
/// `layer` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn bmoe_layer_dims(layer: *const BmoeLayer, d_model: *mut usize, d_ff: *mut usize, n_experts: *mut usize, k: *mut usize) -> BmoeStatus {
    guard(|| {
        // SAFETY: per the contract.
        let c = *unsafe { handle(layer, "layer") }?.inner.config();
        for (p, v) in [(d_model, c.d_model), (d_ff, c.d_ff), (n_experts, c.n_experts), (k, c.k)] {
            if !p.is_null() {
                // SAFETY: non-null outputs are writable per the contract.
                unsafe { *p = v };
            }
        }
        Ok(())
    })
}

/// Quantizes the substrate once so later forwards reuse it.
///
/// # Safety
/// `layer` must be a live handle not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn bmoe_layer_freeze(layer: *mut BmoeLayer) -> BmoeStatus {
    guard(|| {
        // SAFETY: per the contract.
        let l = unsafe { layer.as_mut() }.ok_or_else(|| null("layer"))?;
        l.inner.freeze()?;
        Ok(())
    })
}

/// `y[tokens × d_ff] = MoE(x[tokens × d_model])`, row-major; non-finite
/// inputs give [`BmoeStatus::Numeric`]. `y_len` is the capacity of `y` in
/// elements and must be at least `tokens · d_ff`.
///
/// # Safety
/// `x` must hold `tokens · d_model` floats and `y` `y_len` floats.
#[no_mangle]
pub unsafe extern "C" fn bmoe_layer_forward(layer: *const BmoeLayer, x: *const f32, tokens: usize, y: *mut f32, y_len: usize) -> BmoeStatus {
    guard(|| {
        // SAFETY: per the contract.
        let l = unsafe { handle(layer, "layer") }?;
        let c = l.inner.config();
        if tokens == 0 {
            return Err(Fail(BmoeStatus::Shape, "tokens must be positive".into()));
        }
        if y_len < tokens * c.d_ff {
            return Err(Fail(BmoeStatus::Shape, format!("output holds {y_len} floats, need {}", tokens * c.d_ff)));
        }
        // SAFETY: sizes per the contract.
        let xs = unsafe { slice(x, tokens * c.d_model, "x") }?;
        let ys = unsafe { slice_mut(y, tokens * c.d_ff, "y") }?;
        finite(xs, "x")?;
        let (out, _) = l.inner.moe_forward(&Tensor::new([tokens, c.d_model], xs.to_vec())?)?;
        ys.copy_from_slice(out.data());
        Ok(())
    })
}

/// Cosine similarity of expert outputs on `probe[tokens × d_model]`,
/// written row-major into `out[n_experts × n_experts]`.
///
/// # Safety
/// `probe` must hold `tokens · d_model` floats and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bmoe_layer_similarity(layer: *const BmoeLayer, probe: *const f32, tokens: usize, out: *mut f64, out_len: usize) -> BmoeStatus {
    guard(|| {
        // SAFETY: per the contract.
        let l = unsafe { handle(layer, "layer") }?;
        let c = l.inner.config();
        let n = c.n_experts * c.n_experts;
        if out_len < n {
            return Err(Fail(BmoeStatus::Shape, format!("output holds {out_len} doubles, need {n}")));
        }
        // SAFETY: sizes per the contract.
        let xs = unsafe { slice(probe, tokens * c.d_model, "probe") }?;
        let os = unsafe { slice_mut(out, n, "out") }?;
        finite(xs, "probe")?;
        let sim = l.inner.expert_similarity(&Tensor::new([tokens, c.d_model], xs.to_vec())?)?;
        os.copy_from_slice(sim.matrix.data());
        Ok(())
    })
}

/// Diversity score (`1 −` mean off-diagonal similarity) of an
/// `n × n` similarity matrix.
///
/// # Safety
/// `matrix` must hold `n · n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bmoe_diversity_score(matrix: *const f64, n: usize, out: *mut f64) -> BmoeStatus {
    guard(|| {
        // SAFETY: per the contract.
        let m = unsafe { slice(matrix, n * n, "matrix") }?;
        let o = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *o = moe::diversity_score(&Tensor::new([n, n], m.to_vec())?)?;
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn bmoe_model_load(path: *const c_char, out: *mut *mut BmoeModel) -> BmoeStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: NUL-terminated per the contract.
        let p = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| Fail(BmoeStatus::Config, "path is not UTF-8".into()))?;
        let inner = checkpoint::load::<f32>(Path::new(p))?;
        // SAFETY: `out` checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(BmoeModel { inner })) };
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`bmoe_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bmoe_model_free(model: *mut BmoeModel) {
    if !model.is_null() {
        // SAFETY: ownership returns to Rust exactly once per the contract.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Total trainable parameter count.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bmoe_model_param_count(model: *const BmoeModel, out: *mut usize) -> BmoeStatus {
    guard(|| {
        // SAFETY: per the contract.
        let m = unsafe { handle(model, "model") }?;
        let o = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *o = m.inner.param_count();
        Ok(())
    })
}

/// Number of butterfly MoE layers in the model.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bmoe_model_butterfly_layers(model: *const BmoeModel, out: *mut usize) -> BmoeStatus {
    guard(|| {
        // SAFETY: per the contract.
        let m = unsafe { handle(model, "model") }?;
        let o = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *o = m.inner.butterfly_layers().count();
        Ok(())
    })
}

/// Relative substrate quantization error of butterfly layer `index`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bmoe_model_quant_error(model: *const BmoeModel, index: usize, out: *mut f64) -> BmoeStatus {
    guard(|| {
        // SAFETY: per the contract.
        let m = unsafe { handle(model, "model") }?;
        let o = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let count = m.inner.butterfly_layers().count();
        let layer = m.inner.butterfly_layers().nth(index).ok_or_else(|| Fail(BmoeStatus::Shape, format!("layer {index} of {count}")))?;
        *o = ternary::relative_quant_error(layer.latent())?;
        Ok(())
    })
}

/// Butterfly MoE footprint in bytes.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bmoe_butterfly_memory_bytes(d_model: usize, d_ff: usize, n_experts: usize, bits_per_weight: f64, bytes_per_angle: f64, out: *mut f64) -> BmoeStatus {
    guard(|| {
        // SAFETY: per the contract.
        let o = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *o = analysis::butterfly_memory_bytes(d_model, d_ff, n_experts, bits_per_weight, bytes_per_angle)?;
        Ok(())
    })
}

/// Standard MoE footprint in bytes at `bytes_per_weight`.
#[no_mangle]
pub extern "C" fn bmoe_standard_moe_memory_bytes(d_model: usize, d_ff: usize, n_experts: usize, bytes_per_weight: u64) -> u64 {
    analysis::standard_moe_memory_bytes(d_model, d_ff, n_experts, bytes_per_weight)
}

/// Limit of the compression ratio as the expert count grows.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bmoe_asymptotic_compression(d_model: usize, d_ff: usize, bytes_per_weight: u64, out: *mut f64) -> BmoeStatus {
    guard(|| {
        // SAFETY: per the contract.
        let o = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *o = analysis::asymptotic_compression(d_model, d_ff, bytes_per_weight)?;
        Ok(())
    })
}

/// DRAM energy in joules of reading `bytes` once.
#[no_mangle]
pub extern "C" fn bmoe_dram_energy_joules(bytes: f64) -> f64 {
    analysis::dram_energy_joules(bytes)
}

/// Per-token arithmetic of one layer.
#[no_mangle]
pub extern "C" fn bmoe_flops_per_token(d_model: usize, d_ff: usize, k: usize, layers_in: usize, layers_out: usize) -> BmoeFlops {
    let f = analysis::flops_per_token(d_model, d_ff, k, layers_in, layers_out);
    BmoeFlops {
        rotation_flops: f.rotation_flops,
        ternary_adds: f.ternary_adds,
        ternary_muls: f.ternary_muls,
    }
}
