//! C ABI over the meshcap captioner.
//!
//! Every fallible function returns a [`MeshcapStatus`]; on failure the
//! message is available from [`meshcap_last_error`] on the same thread.
//! Strings handed out by the library must be released with
//! [`meshcap_string_free`], models with [`meshcap_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use meshcap::checkpoint::Checkpoint;
use meshcap::data::{tokenize, Vocabulary};
use meshcap::metrics::{sentence_bleu, Smoothing};
use meshcap::model::Captioner;
use meshcap::tensor::Tensor;
use meshcap::Error;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshcapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    CorruptCheckpoint = 4,
    InvalidInput = 5,
    Config = 6,
    Metric = 7,
    Internal = 8,
    Panic = 9,
}

/// A loaded model and its vocabulary.
pub struct MeshcapModel {
    model: Captioner,
    vocab: Vocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MeshcapStatus {
    match e {
        Error::Io { .. } | Error::Image { .. } => MeshcapStatus::Io,
        Error::CorruptCheckpoint(_) | Error::CheckpointVersion { .. } | Error::Json(_) => {
            MeshcapStatus::CorruptCheckpoint
        }
        Error::Config { .. } | Error::ConfigMismatch { .. } => MeshcapStatus::Config,
        Error::Input(_) | Error::Shape { .. } | Error::InvalidTensor(_) | Error::Annotation { .. } | Error::Vocab(_) => {
            MeshcapStatus::InvalidInput
        }
        Error::Metric(_) => MeshcapStatus::Metric,
        _ => MeshcapStatus::Internal,
    }
}

struct Failure(MeshcapStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any error or panic for `meshcap_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MeshcapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MeshcapStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MeshcapStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MeshcapStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MeshcapStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

fn to_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(MeshcapStatus::Internal, "string contains a NUL byte".into()))
}

/// Loads a checkpoint file. On success `*out` owns a new model.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn meshcap_model_load(path: *const c_char, out: *mut *mut MeshcapModel) -> MeshcapStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let (model, vocab, _) = Checkpoint::load(Path::new(path))?.into_model()?;
        *out = Box::into_raw(Box::new(MeshcapModel { model, vocab }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from `meshcap_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn meshcap_model_free(model: *mut MeshcapModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image height, width and channel count the model expects.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn meshcap_model_image_shape(
    model: *const MeshcapModel,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> MeshcapStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if height.is_null() || width.is_null() || channels.is_null() {
            return Err(null("shape output"));
        }
        let c = &m.model.config;
        *height = c.image_size;
        *width = c.image_size;
        *channels = c.channels;
        Ok(())
    })
}

/// Greedy-decodes a caption for `pixels`, an `H×W×C` row-major array of
/// values in `[0, 1]` with `len` elements. `max_len` of 0 means the
/// model's caption length. The caption is written to `*out`.
///
/// # Safety
/// `pixels` must point to `len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn meshcap_caption(
    model: *const MeshcapModel,
    pixels: *const f64,
    len: usize,
    max_len: usize,
    out: *mut *mut c_char,
) -> MeshcapStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let c = &m.model.config;
        let shape = vec![c.image_size, c.image_size, c.channels];
        if len != shape.iter().product::<usize>() {
            return Err(Failure(
                MeshcapStatus::InvalidInput,
                format!("expected {} pixel values for shape {shape:?}, got {len}", shape.iter().product::<usize>()),
            ));
        }
        let data = std::slice::from_raw_parts(pixels, len).to_vec();
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Failure(MeshcapStatus::InvalidInput, "pixel values must lie in [0, 1]".into()));
        }
        let image = Tensor::new(shape, data)?;
        let max_len = if max_len == 0 { c.max_len } else { max_len };
        let seq = m.model.greedy_decode(&image, max_len)?;
        *out = to_c_string(m.vocab.decode(&seq.ids)?)?;
        Ok(())
    })
}

/// Unsmoothed sentence BLEU-`n` of `candidate` against `n_refs`
/// references.
///
/// # Safety
/// `refs` must point to `n_refs` NUL-terminated strings; `out` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn meshcap_bleu(
    candidate: *const c_char,
    refs: *const *const c_char,
    n_refs: usize,
    n: u32,
    out: *mut f64,
) -> MeshcapStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if refs.is_null() {
            return Err(null("refs"));
        }
        let cand = tokenize(str_arg(candidate, "candidate")?);
        let refs = std::slice::from_raw_parts(refs, n_refs)
            .iter()
            .map(|&r| str_arg(r, "reference").map(tokenize))
            .collect::<Result<Vec<_>, _>>()?;
        *out = sentence_bleu(&cand, &refs, n as usize, Smoothing::None)?;
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn meshcap_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn meshcap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn meshcap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
