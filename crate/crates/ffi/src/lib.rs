//! C ABI over the `convmask` library.
//!
//! Models are handed out as opaque `CmModel` pointers. Every function
//! returns a `CM_*` status code; on failure a message is kept per thread and
//! can be read with [`cm_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use convmask::model::load_model;
use convmask::pipeline::PipelineModel;
use convmask::retrieval::hamming_distance;
use convmask::tensor::KeypointList;
use convmask::{Error, FeatureTensor};

pub const CM_OK: i32 = 0;
pub const CM_ERR_NULL_POINTER: i32 = 1;
pub const CM_ERR_INVALID_ARGUMENT: i32 = 2;
pub const CM_ERR_CONFIG: i32 = 3;
pub const CM_ERR_DATA: i32 = 4;
pub const CM_ERR_IO: i32 = 5;
pub const CM_ERR_BUFFER_TOO_SMALL: i32 = 6;
pub const CM_ERR_PANIC: i32 = 7;

/// A fitted pipeline loaded from a model bundle.
pub struct CmModel {
    inner: PipelineModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn code_for(e: &Error) -> i32 {
    match e {
        Error::Io(_) => CM_ERR_IO,
        e if e.is_config() => CM_ERR_CONFIG,
        _ => CM_ERR_DATA,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (i32, String)>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CM_OK
        }
        Ok(Err((code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            CM_ERR_PANIC
        }
    }
}

fn lib_err(e: Error) -> (i32, String) {
    (code_for(&e), e.to_string())
}

fn null(what: &str) -> (i32, String) {
    (CM_ERR_NULL_POINTER, format!("{what} is null"))
}

/// Message describing the last failure on this thread, or null. The pointer
/// stays valid until the next `cm_*` call on the same thread.
#[no_mangle]
pub extern "C" fn cm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads the model bundle in directory `dir` (UTF-8 path) into `*out`.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cm_model_load(dir: *const c_char, out: *mut *mut CmModel) -> i32 {
    guard(|| {
        if dir.is_null() {
            return Err(null("dir"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = CStr::from_ptr(dir)
            .to_str()
            .map_err(|_| (CM_ERR_INVALID_ARGUMENT, "dir is not UTF-8".to_owned()))?;
        let model = load_model(dir).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(CmModel { inner: model }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`cm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cm_model_free(model: *mut CmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of the real-valued global descriptor, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cm_model_descriptor_dim(model: *const CmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.descriptor_dim())
}

/// Code length in bits, or 0 when the model has no hashing stage.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cm_model_code_bits(model: *const CmModel) -> usize {
    model
        .as_ref()
        .and_then(|m| m.inner.code_bits())
        .unwrap_or(0)
}

/// Encodes one stacked feature tensor.
///
/// `data` holds `width * height * channels` floats in row-major location
/// order with channels innermost. `keypoints_xy` holds `n_keypoints` (x, y)
/// pairs in image pixels and may be null when the model does not use the
/// SIFT mask. The descriptor is written to `out_descriptor`
/// (`descriptor_len` floats, at least [`cm_model_descriptor_dim`]). When
/// `out_code` is not null the packed code is written there
/// (`code_words` 64-bit words, bit `i` in word `i / 64`).
///
/// # Safety
/// All non-null pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cm_encode_tensor(
    model: *const CmModel,
    data: *const f32,
    width: usize,
    height: usize,
    channels: usize,
    keypoints_xy: *const f32,
    n_keypoints: usize,
    image_width: u32,
    image_height: u32,
    out_descriptor: *mut f32,
    descriptor_len: usize,
    out_code: *mut u64,
    code_words: usize,
) -> i32 {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        if data.is_null() {
            return Err(null("data"));
        }
        if out_descriptor.is_null() {
            return Err(null("out_descriptor"));
        }
        let len = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or((CM_ERR_INVALID_ARGUMENT, "tensor size overflows".to_owned()))?;
        let tensor = FeatureTensor::new(
            width,
            height,
            channels,
            std::slice::from_raw_parts(data, len).to_vec(),
        )
        .map_err(lib_err)?;
        let keypoints = if keypoints_xy.is_null() {
            None
        } else {
            let xy = std::slice::from_raw_parts(keypoints_xy, 2 * n_keypoints);
            let points = xy.chunks_exact(2).map(|p| (p[0], p[1])).collect();
            Some(KeypointList::new(image_width, image_height, points).map_err(lib_err)?)
        };
        let encoded = model
            .encode_tensor(&tensor, keypoints.as_ref())
            .map_err(lib_err)?;
        if descriptor_len < encoded.descriptor.len() {
            return Err((
                CM_ERR_BUFFER_TOO_SMALL,
                format!("descriptor needs {} floats", encoded.descriptor.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out_descriptor, encoded.descriptor.len())
            .copy_from_slice(&encoded.descriptor);
        if !out_code.is_null() {
            let code = encoded
                .code
                .ok_or((CM_ERR_CONFIG, "model has no hashing stage".to_owned()))?;
            if code_words < code.len() {
                return Err((
                    CM_ERR_BUFFER_TOO_SMALL,
                    format!("code needs {} words", code.len()),
                ));
            }
            std::slice::from_raw_parts_mut(out_code, code.len()).copy_from_slice(&code);
        }
        Ok(())
    })
}

/// Hamming distance between two codes of `words` 64-bit words.
///
/// # Safety
/// `a` and `b` must be valid for `words` reads.
#[no_mangle]
pub unsafe extern "C" fn cm_hamming_distance(
    a: *const u64,
    b: *const u64,
    words: usize,
    out: *mut u32,
) -> i32 {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        *out = hamming_distance(
            std::slice::from_raw_parts(a, words),
            std::slice::from_raw_parts(b, words),
        );
        Ok(())
    })
}
