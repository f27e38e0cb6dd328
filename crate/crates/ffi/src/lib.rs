//! C ABI for blockqat.
//!
//! Models and token streams cross the boundary as opaque handles owned by
//! the caller and released with the matching `*_free`. Every fallible call
//! returns a [`BqStatus`]; on failure a message for the calling thread is
//! available from [`bq_last_error`] until the next failing call.
//!
//! Panics never unwind into C: they are caught and reported as
//! [`BqStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use blockqat::block_ap::{run_block_ap, BlockApPlan};
use blockqat::data::{perplexity, sample_calibration, TokenStream};
use blockqat::desk;
use blockqat::e2e_qp::{model_avg_bits, run_e2e_qp, E2eQpPlan};
use blockqat::kernels::packed_gemv_into;
use blockqat::model::{Checkpoint, PROJECTIONS};
use blockqat::pack::{self, PackedTensor};
use blockqat::quant::QuantSpec;
use blockqat::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    Domain = 6,
    Data = 7,
    State = 8,
    Numeric = 9,
    Internal = 10,
}

impl From<&Error> for BqStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => BqStatus::Io,
            Error::Format { .. } => BqStatus::Format,
            Error::Dimension(_) | Error::Index(_) => BqStatus::Dimension,
            Error::Domain(_) | Error::Config(_) => BqStatus::Domain,
            Error::Data(_) => BqStatus::Data,
            Error::State(_) => BqStatus::State,
            Error::Numeric(_) => BqStatus::Numeric,
            Error::Invariant(_) => BqStatus::Internal,
        }
    }
}

/// Opaque model handle, full-precision or quantized.
pub struct BqModel {
    ckpt: Checkpoint,
}

/// Opaque token stream handle.
pub struct BqTokens {
    stream: TokenStream,
}

/// Architecture of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BqModelInfo {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    /// 0 for a full-precision model.
    pub bits: u32,
    /// -1 for one group per row, 0 for a full-precision model.
    pub group_size: i32,
    /// Quantized-layer bits per weight including scales and zero points;
    /// 16 for a full-precision model.
    pub avg_bits: f64,
}

/// Settings for [`bq_quantize`]. Zeroed fields take the defaults of
/// [`bq_quantize_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BqQuantizeOptions {
    pub bits: u32,
    pub group_size: i32,
    pub samples: usize,
    pub ctx_len: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr_scale: f32,
    pub seed: u64,
}

/// Settings for [`bq_finetune`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BqFinetuneOptions {
    pub samples: usize,
    pub ctx_len: usize,
    pub batch: usize,
    pub micro_batch: usize,
    pub epochs: usize,
    /// Multiplier on the base rate; 0 picks the default for the model's bit width.
    pub lr_scale: f32,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: BqStatus, msg: impl Into<String>) -> BqStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, turning library errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), BqStatus>) -> BqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BqStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(BqStatus::Internal, format!("internal error: {msg}"))
        }
    }
}

fn check<T>(r: blockqat::Result<T>) -> Result<T, BqStatus> {
    r.map_err(|e| fail(BqStatus::from(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), BqStatus> {
    if p.is_null() {
        Err(fail(BqStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, BqStatus> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p).to_str().map_err(|_| fail(BqStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], BqStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model container.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn bq_model_load(path: *const c_char, out: *mut *mut BqModel) -> BqStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let ckpt = check(pack::load(&path_arg(path)?))?;
        *out = Box::into_raw(Box::new(BqModel { ckpt }));
        Ok(())
    })
}

/// Writes a model container.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bq_model_save(model: *const BqModel, path: *const c_char) -> BqStatus {
    guard(|| {
        non_null(model, "model")?;
        check(pack::save(&(*model).ckpt, &path_arg(path)?))?;
        Ok(())
    })
}

/// Releases a model. Null is accepted.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bq_model_free(model: *mut BqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fills `info` with the architecture and quantization of `model`.
///
/// # Safety
/// `model` must come from this library; `info` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bq_model_info(model: *const BqModel, info: *mut BqModelInfo) -> BqStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(info, "info")?;
        let m = &(*model).ckpt.model;
        let c = m.config;
        let first = m.quant_layers().next();
        *info = BqModelInfo {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            vocab_size: c.vocab_size,
            max_context: c.max_context,
            bits: first.map_or(0, |l| l.spec().bits() as u32),
            group_size: first.map_or(0, |l| l.spec().group_size()),
            avg_bits: first.and_then(|l| model_avg_bits(m, l.zero_format())).unwrap_or(16.0),
        };
        Ok(())
    })
}

/// Next-token logits for one sequence: `out` receives `n_tokens * vocab`
/// values, row-major.
///
/// # Safety
/// `tokens` must hold `n_tokens` ids and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn bq_model_logits(
    model: *const BqModel,
    tokens: *const u32,
    n_tokens: usize,
    out: *mut f32,
    out_len: usize,
) -> BqStatus {
    guard(|| {
        non_null(model, "model")?;
        let ids = slice_arg(tokens, n_tokens, "tokens")?;
        let logits = check((*model).ckpt.model.logits(ids, 1))?;
        if out_len != logits.len() {
            return Err(fail(BqStatus::Dimension, format!("out holds {out_len} floats, logits need {}", logits.len())));
        }
        non_null(out, "out")?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(logits.data());
        Ok(())
    })
}

/// `y = W_hat x` through the packed kernel for projection `proj` (0..7 in
/// the order q, k, v, o, gate, up, down) of block `block`.
///
/// # Safety
/// `x` must hold `x_len` and `y` `y_len` floats.
#[no_mangle]
pub unsafe extern "C" fn bq_model_gemv(
    model: *const BqModel,
    block: usize,
    proj: usize,
    x: *const f32,
    x_len: usize,
    y: *mut f32,
    y_len: usize,
) -> BqStatus {
    guard(|| {
        non_null(model, "model")?;
        let m = &(*model).ckpt.model;
        let b = m.blocks.get(block).ok_or_else(|| fail(BqStatus::InvalidArgument, format!("no block {block}")))?;
        let p = b.proj.get(proj).ok_or_else(|| fail(BqStatus::InvalidArgument, format!("no projection {proj}")))?;
        let layer = p.as_quant().ok_or_else(|| {
            fail(BqStatus::State, format!("blocks.{block}.{} is not quantized", PROJECTIONS[proj]))
        })?;
        let packed = check(PackedTensor::from_layer(layer))?;
        let xs = slice_arg(x, x_len, "x")?;
        non_null(y, "y")?;
        check(packed_gemv_into(&packed, xs, std::slice::from_raw_parts_mut(y, y_len)))?;
        Ok(())
    })
}

/// Loads a token stream file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bq_tokens_load(path: *const c_char, out: *mut *mut BqTokens) -> BqStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let stream = check(TokenStream::load(&path_arg(path)?))?;
        *out = Box::into_raw(Box::new(BqTokens { stream }));
        Ok(())
    })
}

/// Byte-level tokens of a UTF-8 buffer.
///
/// # Safety
/// `text` must hold `len` bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bq_tokens_from_text(text: *const u8, len: usize, out: *mut *mut BqTokens) -> BqStatus {
    guard(|| {
        non_null(out, "out")?;
        let bytes = slice_arg(text, len, "text")?;
        let s = std::str::from_utf8(bytes).map_err(|e| fail(BqStatus::InvalidArgument, format!("text is not UTF-8: {e}")))?;
        *out = Box::into_raw(Box::new(BqTokens { stream: TokenStream::from_text(s) }));
        Ok(())
    })
}

/// Number of tokens in the stream, 0 for null.
///
/// # Safety
/// `tokens` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn bq_tokens_len(tokens: *const BqTokens) -> usize {
    tokens.as_ref().map_or(0, |t| t.stream.len())
}

/// Splits off the last `fraction` of the stream: `train` and `val` receive
/// new handles.
///
/// # Safety
/// `tokens` must come from this library; `train` and `val` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bq_tokens_split(
    tokens: *const BqTokens,
    fraction: f64,
    train: *mut *mut BqTokens,
    val: *mut *mut BqTokens,
) -> BqStatus {
    guard(|| {
        non_null(tokens, "tokens")?;
        non_null(train, "train")?;
        non_null(val, "val")?;
        if !(0.0..1.0).contains(&fraction) {
            return Err(fail(BqStatus::InvalidArgument, format!("fraction {fraction} outside [0, 1)")));
        }
        let (a, b) = (*tokens).stream.split_tail(fraction);
        *train = Box::into_raw(Box::new(BqTokens { stream: a }));
        *val = Box::into_raw(Box::new(BqTokens { stream: b }));
        Ok(())
    })
}

/// Releases a token stream. Null is accepted.
///
/// # Safety
/// `tokens` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bq_tokens_free(tokens: *mut BqTokens) {
    if !tokens.is_null() {
        drop(Box::from_raw(tokens));
    }
}

/// Perplexity over non-overlapping windows of `ctx_len` tokens.
///
/// # Safety
/// Handles must come from this library; `ppl` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bq_perplexity(
    model: *const BqModel,
    tokens: *const BqTokens,
    ctx_len: usize,
    ppl: *mut f64,
) -> BqStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(tokens, "tokens")?;
        non_null(ppl, "ppl")?;
        *ppl = check(perplexity(&(*model).ckpt.model, &(*tokens).stream, ctx_len))?.ppl;
        Ok(())
    })
}

/// Defaults used by the command line tool.
#[no_mangle]
pub extern "C" fn bq_quantize_options_default() -> BqQuantizeOptions {
    BqQuantizeOptions {
        bits: 2,
        group_size: 64,
        samples: desk::CALIB_SAMPLES,
        ctx_len: desk::CALIB_CTX,
        epochs: 2,
        batch: 2,
        lr_scale: desk::BLOCK_AP_LR_SCALE,
        seed: 0,
    }
}

/// Defaults used by the command line tool.
#[no_mangle]
pub extern "C" fn bq_finetune_options_default() -> BqFinetuneOptions {
    BqFinetuneOptions {
        samples: desk::E2E_SAMPLES,
        ctx_len: desk::E2E_CTX,
        batch: 32,
        micro_batch: 8,
        epochs: 1,
        lr_scale: 0.0,
        seed: 0,
    }
}

/// Block-wise reconstruction of a full-precision model on calibration
/// sequences drawn from `tokens`; `out` receives a frozen quantized model.
///
/// # Safety
/// Handles must come from this library; `opts` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bq_quantize(
    model: *const BqModel,
    tokens: *const BqTokens,
    opts: *const BqQuantizeOptions,
    out: *mut *mut BqModel,
) -> BqStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(tokens, "tokens")?;
        non_null(opts, "opts")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let o = *opts;
        let bits = u8::try_from(o.bits).map_err(|_| fail(BqStatus::Domain, format!("bits {}", o.bits)))?;
        let spec = check(QuantSpec::new(bits, o.group_size))?;
        let calib = check(sample_calibration(&(*tokens).stream, o.samples, o.ctx_len, o.seed))?;
        let plan = BlockApPlan { epochs: o.epochs, batch: o.batch, seed: o.seed, ..BlockApPlan::new(spec).scale_lr(o.lr_scale) };
        let fp = &(*model).ckpt;
        let res = check(run_block_ap(&fp.model, &calib, &plan, None))?;
        *out = Box::into_raw(Box::new(BqModel { ckpt: Checkpoint { model: res.model, meta: fp.meta.clone() } }));
        Ok(())
    })
}

/// End-to-end training of step sizes of a frozen quantized model.
///
/// # Safety
/// Handles must come from this library; `opts` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bq_finetune(
    model: *const BqModel,
    tokens: *const BqTokens,
    opts: *const BqFinetuneOptions,
    out: *mut *mut BqModel,
) -> BqStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(tokens, "tokens")?;
        non_null(opts, "opts")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let o = *opts;
        let q = &(*model).ckpt;
        let bits = q.model.quant_layers().next().map_or(16, |l| l.spec().bits());
        let mut plan = E2eQpPlan {
            batch: o.batch,
            micro_batch: o.micro_batch,
            epochs: o.epochs,
            seed: o.seed,
            ..E2eQpPlan::new(bits, o.ctx_len, o.samples)
        };
        plan.lr *= if o.lr_scale == 0.0 { desk::e2e_lr_scale(bits) } else { o.lr_scale };
        let res = check(run_e2e_qp(&q.model, &(*tokens).stream, &plan))?;
        *out = Box::into_raw(Box::new(BqModel { ckpt: Checkpoint { model: res.model, meta: q.meta.clone() } }));
        Ok(())
    })
}
