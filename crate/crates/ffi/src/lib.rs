//! C interface: opaque skeleton and model handles, greedy decoding, sign
//! embeddings and text metrics. Every function returns an `SlStatus`; on
//! failure `sl_last_error` describes the problem on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use signalign::data;
use signalign::metrics;
use signalign::model;
use signalign::skeleton::SkeletonSequence;
use signalign::text;
use signalign::train::checkpoint::Checkpoint;
use signalign::train::export;
use signalign::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Panic = 4,
    Dimension = 5,
    NonFinite = 6,
    Backward = 7,
    InvalidArgument = 8,
    Format = 9,
    Parse = 10,
    Config = 11,
    Checkpoint = 12,
    UnknownToken = 13,
    Io = 14,
}

pub struct SlSkeleton {
    seq: SkeletonSequence,
}

pub struct SlModel {
    ck: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(SlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Dimension { .. } => SlStatus::Dimension,
            Error::NonFinite { .. } => SlStatus::NonFinite,
            Error::Backward(_) => SlStatus::Backward,
            Error::InvalidArgument(_) => SlStatus::InvalidArgument,
            Error::Format { .. } => SlStatus::Format,
            Error::Parse { .. } => SlStatus::Parse,
            Error::Config(_) => SlStatus::Config,
            Error::Checkpoint(_) => SlStatus::Checkpoint,
            Error::UnknownToken { .. } => SlStatus::UnknownToken,
            Error::Io { .. } => SlStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> SlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SlStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SlStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(SlStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Outcome {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Copies `values` into `out[..cap]`; `written` always receives the full length.
unsafe fn copy_out(values: &[f64], out: *mut f64, cap: usize, written: *mut usize) -> Outcome {
    put(written, values.len(), "written")?;
    if values.len() > cap {
        return Err(Failure(SlStatus::BufferTooSmall, format!("need {} values, buffer holds {cap}", values.len())));
    }
    if !values.is_empty() {
        if out.is_null() {
            return Err(null("out"));
        }
        std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    }
    Ok(())
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn sl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call or `sl_clear_error` on the same thread.
#[no_mangle]
pub extern "C" fn sl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn sl_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Builds a skeleton from `frames * 138` row-major coordinates.
///
/// # Safety
/// `data` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_skeleton_from_frames(frames: usize, data: *const f64, len: usize, out: *mut *mut SlSkeleton) -> SlStatus {
    guard(|| {
        if data.is_null() && len > 0 {
            return Err(null("data"));
        }
        let values = if len == 0 { vec![] } else { std::slice::from_raw_parts(data, len).to_vec() };
        let seq = SkeletonSequence::from_flat(frames, values)?;
        put(out, Box::into_raw(Box::new(SlSkeleton { seq })), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_skeleton_read(path: *const c_char, out: *mut *mut SlSkeleton) -> SlStatus {
    guard(|| {
        let seq = data::read_skl(Path::new(str_arg(path, "path")?))?;
        put(out, Box::into_raw(Box::new(SlSkeleton { seq })), "out")
    })
}

/// # Safety
/// `skeleton` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sl_skeleton_write(skeleton: *const SlSkeleton, path: *const c_char) -> SlStatus {
    guard(|| {
        let s = handle(skeleton, "skeleton")?;
        data::write_skl(Path::new(str_arg(path, "path")?), &s.seq)?;
        Ok(())
    })
}

/// # Safety
/// `skeleton` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_skeleton_num_frames(skeleton: *const SlSkeleton, out: *mut usize) -> SlStatus {
    guard(|| put(out, handle(skeleton, "skeleton")?.seq.len(), "out"))
}

/// Copies the coordinates into `out`. With a short buffer the call fails with
/// `SL_STATUS_BUFFER_TOO_SMALL` and `written` holds the required length.
///
/// # Safety
/// `out` must hold `cap` doubles; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_skeleton_copy_frames(skeleton: *const SlSkeleton, out: *mut f64, cap: usize, written: *mut usize) -> SlStatus {
    guard(|| copy_out(handle(skeleton, "skeleton")?.seq.frames().data(), out, cap, written))
}

/// # Safety
/// `skeleton` must come from this library and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn sl_skeleton_free(skeleton: *mut SlSkeleton) {
    if !skeleton.is_null() {
        drop(Box::from_raw(skeleton));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_model_load(path: *const c_char, out: *mut *mut SlModel) -> SlStatus {
    guard(|| {
        let ck = Checkpoint::load(Path::new(str_arg(path, "path")?))?;
        put(out, Box::into_raw(Box::new(SlModel { ck })), "out")
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn sl_model_free(model: *mut SlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_model_vocab_size(model: *const SlModel, out: *mut usize) -> SlStatus {
    guard(|| put(out, handle(model, "model")?.ck.vocab.len(), "out"))
}

/// Greedy-decodes one sequence into a NUL-terminated string. `needed` receives
/// the buffer size including the terminator, also when the buffer is too small.
///
/// # Safety
/// `buf` must hold `cap` bytes; `needed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_model_decode(
    model: *const SlModel,
    skeleton: *const SlSkeleton,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> SlStatus {
    guard(|| {
        let ck = &handle(model, "model")?.ck;
        let seq = &handle(skeleton, "skeleton")?.seq;
        let mcfg = ck.config.model_config(ck.vocab.len());
        let ids = model::greedy_decode(&ck.params, &mcfg, seq, mcfg.sgt.max_text_len)?;
        let text = text::detokenize(&ids, &ck.vocab);
        let bytes = text.as_bytes();
        put(needed, bytes.len() + 1, "needed")?;
        if bytes.len() + 1 > cap {
            return Err(Failure(SlStatus::BufferTooSmall, format!("need {} bytes, buffer holds {cap}", bytes.len() + 1)));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
        buf.add(bytes.len()).write(0);
        Ok(())
    })
}

/// Pooled sign-encoder embedding of one sequence; same contract as `sl_skeleton_copy_frames`.
///
/// # Safety
/// `out` must hold `cap` doubles; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_model_embed_sign(
    model: *const SlModel,
    skeleton: *const SlSkeleton,
    out: *mut f64,
    cap: usize,
    written: *mut usize,
) -> SlStatus {
    guard(|| {
        let ck = &handle(model, "model")?.ck;
        let v = export::sign_embedding(ck, &handle(skeleton, "skeleton")?.seq)?;
        copy_out(&v, out, cap, written)
    })
}

fn words(s: &str) -> Vec<String> {
    metrics::metric_tokens(s, false)
}

/// Word error rate in percent of one hypothesis against one reference.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_wer(reference: *const c_char, hypothesis: *const c_char, out: *mut f64) -> SlStatus {
    guard(|| {
        let v = metrics::wer(&words(str_arg(reference, "reference")?), &words(str_arg(hypothesis, "hypothesis")?))?;
        put(out, v, "out")
    })
}

/// BLEU-`n` in percent of one sentence pair.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_bleu(reference: *const c_char, hypothesis: *const c_char, n: usize, out: *mut f64) -> SlStatus {
    guard(|| {
        let r = vec![words(str_arg(reference, "reference")?)];
        let h = vec![words(str_arg(hypothesis, "hypothesis")?)];
        put(out, metrics::bleu(&r, &h, n)?, "out")
    })
}

/// ROUGE-L F-measure in percent of one sentence pair.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_rouge_l(reference: *const c_char, hypothesis: *const c_char, out: *mut f64) -> SlStatus {
    guard(|| {
        let v = metrics::rouge_l(&words(str_arg(reference, "reference")?), &words(str_arg(hypothesis, "hypothesis")?))?;
        put(out, v, "out")
    })
}
