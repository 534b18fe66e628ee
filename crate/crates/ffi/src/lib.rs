//! C ABI over the caps engine.
//!
//! Feature matrices, label sets, and logits are exposed as opaque handles;
//! every fallible call returns a [`CapsStatus`] code and stores a
//! human-readable message retrievable with [`caps_last_error`] (thread
//! local, valid until the next failing call on the same thread). Handles
//! must be released with their matching `_free` function.
//!
//! The generated header lands in `include/caps.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use caps_core::eval;
use caps_core::kernels::{self, HyperParams, LogitsMatrix};
use caps_core::store::{self, FeatureMatrix, OneHotLabels, StoreError};

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    DimMismatch = 3,
    NotNormalized = 4,
    ShapeMismatch = 5,
    FormatError = 6,
    IoError = 7,
    InternalError = 8,
}

/// Inference hyperparameters, mirroring the engine's tuple.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CapsHyperParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub tau: f64,
}

/// Opaque feature matrix handle.
pub struct CapsMatrix(FeatureMatrix);
/// Opaque one-hot label handle.
pub struct CapsLabels(OneHotLabels);
/// Opaque logits handle.
pub struct CapsLogits(LogitsMatrix);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl std::fmt::Display) {
    let cstring = CString::new(message.to_string())
        .unwrap_or_else(|_| CString::new("error message contained NUL").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = cstring);
}

fn fail(status: CapsStatus, message: impl std::fmt::Display) -> CapsStatus {
    set_error(message);
    status
}

fn store_status(err: &StoreError) -> CapsStatus {
    match err {
        StoreError::Format(_) => CapsStatus::FormatError,
        StoreError::Io(_) => CapsStatus::IoError,
        StoreError::DimMismatch { .. } => CapsStatus::DimMismatch,
        _ => CapsStatus::InvalidArgument,
    }
}

fn kernel_status(err: &kernels::KernelError) -> CapsStatus {
    use kernels::KernelError::*;
    match err {
        DimMismatch { .. } => CapsStatus::DimMismatch,
        NotNormalized => CapsStatus::NotNormalized,
        ShapeMismatch(_) => CapsStatus::ShapeMismatch,
        _ => CapsStatus::InvalidArgument,
    }
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn caps_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn path_from(ptr: *const c_char) -> Result<std::path::PathBuf, CapsStatus> {
    if ptr.is_null() {
        return Err(fail(CapsStatus::NullArgument, "null path"));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s).to_path_buf()),
        Err(_) => Err(fail(CapsStatus::InvalidArgument, "path is not UTF-8")),
    }
}

// ---------------------------------------------------------------------------
// Matrices
// ---------------------------------------------------------------------------

/// Create a matrix from a row-major buffer of `rows * dim` f32 values.
///
/// # Safety
/// `data` must point to at least `rows * dim` readable f32 values and `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caps_matrix_create(
    rows: usize,
    dim: usize,
    data: *const f32,
    normalized: bool,
    out: *mut *mut CapsMatrix,
) -> CapsStatus {
    if out.is_null() || (data.is_null() && rows * dim != 0) {
        return fail(CapsStatus::NullArgument, "null data or out pointer");
    }
    let slice = std::slice::from_raw_parts(data, rows * dim);
    match FeatureMatrix::new(rows, dim, slice.to_vec(), normalized) {
        Ok(m) => {
            *out = Box::into_raw(Box::new(CapsMatrix(m)));
            CapsStatus::Ok
        }
        Err(e) => fail(store_status(&e), e),
    }
}

/// Load a matrix from a cache file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caps_matrix_load(
    path: *const c_char,
    out: *mut *mut CapsMatrix,
) -> CapsStatus {
    if out.is_null() {
        return fail(CapsStatus::NullArgument, "null out pointer");
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match store::load_cache(&path) {
        Ok(m) => {
            *out = Box::into_raw(Box::new(CapsMatrix(m)));
            CapsStatus::Ok
        }
        Err(e) => fail(store_status(&e), e),
    }
}

/// Write a matrix to a cache file (atomic replace).
///
/// # Safety
/// `matrix` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn caps_matrix_save(
    matrix: *const CapsMatrix,
    path: *const c_char,
) -> CapsStatus {
    let Some(m) = matrix.as_ref() else {
        return fail(CapsStatus::NullArgument, "null matrix");
    };
    let path = match path_from(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match store::save_cache(&m.0, &path) {
        Ok(()) => CapsStatus::Ok,
        Err(e) => fail(store_status(&e), e),
    }
}

/// Row count; 0 for a null handle.
///
/// # Safety
/// `matrix` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn caps_matrix_rows(matrix: *const CapsMatrix) -> usize {
    matrix.as_ref().map_or(0, |m| m.0.rows())
}

/// Embedding width; 0 for a null handle.
///
/// # Safety
/// `matrix` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn caps_matrix_dim(matrix: *const CapsMatrix) -> usize {
    matrix.as_ref().map_or(0, |m| m.0.dim())
}

/// Whether the matrix rows are unit-normalized.
///
/// # Safety
/// `matrix` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn caps_matrix_is_normalized(matrix: *const CapsMatrix) -> bool {
    matrix.as_ref().is_some_and(|m| m.0.is_normalized())
}

/// Produce a row-normalized copy of the matrix.
///
/// # Safety
/// `matrix` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caps_matrix_normalize(
    matrix: *const CapsMatrix,
    out: *mut *mut CapsMatrix,
) -> CapsStatus {
    let Some(m) = matrix.as_ref() else {
        return fail(CapsStatus::NullArgument, "null matrix");
    };
    if out.is_null() {
        return fail(CapsStatus::NullArgument, "null out pointer");
    }
    match m.0.normalize_rows() {
        Ok(n) => {
            *out = Box::into_raw(Box::new(CapsMatrix(n)));
            CapsStatus::Ok
        }
        Err(e) => fail(store_status(&e), e),
    }
}

/// Copy the row-major matrix data into `buffer` (`len` must be
/// `rows * dim`).
///
/// # Safety
/// `matrix` must be a live handle; `buffer` must point to `len` writable
/// f32 slots.
#[no_mangle]
pub unsafe extern "C" fn caps_matrix_copy_data(
    matrix: *const CapsMatrix,
    buffer: *mut f32,
    len: usize,
) -> CapsStatus {
    let Some(m) = matrix.as_ref() else {
        return fail(CapsStatus::NullArgument, "null matrix");
    };
    if buffer.is_null() {
        return fail(CapsStatus::NullArgument, "null buffer");
    }
    if len != m.0.data().len() {
        return fail(
            CapsStatus::InvalidArgument,
            format!("buffer holds {len} values, matrix has {}", m.0.data().len()),
        );
    }
    std::slice::from_raw_parts_mut(buffer, len).copy_from_slice(m.0.data());
    CapsStatus::Ok
}

/// Release a matrix handle. Null is ignored.
///
/// # Safety
/// `matrix` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn caps_matrix_free(matrix: *mut CapsMatrix) {
    if !matrix.is_null() {
        drop(Box::from_raw(matrix));
    }
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

/// Build one-hot labels from per-sample class indices (must form contiguous
/// ascending class blocks).
///
/// # Safety
/// `classes` must point to `len` readable usize values and `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caps_labels_create(
    classes: *const usize,
    len: usize,
    n_classes: usize,
    out: *mut *mut CapsLabels,
) -> CapsStatus {
    if out.is_null() || (classes.is_null() && len != 0) {
        return fail(CapsStatus::NullArgument, "null classes or out pointer");
    }
    let slice = std::slice::from_raw_parts(classes, len);
    match store::build_onehot(slice, n_classes) {
        Ok(l) => {
            *out = Box::into_raw(Box::new(CapsLabels(l)));
            CapsStatus::Ok
        }
        Err(e) => fail(store_status(&e), e),
    }
}

/// Release a labels handle. Null is ignored.
///
/// # Safety
/// `labels` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn caps_labels_free(labels: *mut CapsLabels) {
    if !labels.is_null() {
        drop(Box::from_raw(labels));
    }
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

fn hp_from(hp: &CapsHyperParams) -> Result<HyperParams, CapsStatus> {
    HyperParams::new(hp.alpha, hp.beta, hp.gamma, hp.delta)
        .and_then(|p| p.with_tau(hp.tau))
        .map_err(|e| fail(kernel_status(&e), e))
}

unsafe fn emit_logits(
    result: Result<LogitsMatrix, kernels::KernelError>,
    out: *mut *mut CapsLogits,
) -> CapsStatus {
    match result {
        Ok(l) => {
            *out = Box::into_raw(Box::new(CapsLogits(l)));
            CapsStatus::Ok
        }
        Err(e) => fail(kernel_status(&e), e),
    }
}

/// Zero-shot logits: `tau * (test . classifier^T)`.
///
/// # Safety
/// All handles must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caps_zeroshot_logits(
    test: *const CapsMatrix,
    classifier: *const CapsMatrix,
    tau: f64,
    out: *mut *mut CapsLogits,
) -> CapsStatus {
    let (Some(f), Some(w)) = (test.as_ref(), classifier.as_ref()) else {
        return fail(CapsStatus::NullArgument, "null matrix handle");
    };
    if out.is_null() {
        return fail(CapsStatus::NullArgument, "null out pointer");
    }
    emit_logits(kernels::zeroshot_logits(&f.0, &w.0, tau), out)
}

/// TIP-X logits over an image support cache.
///
/// # Safety
/// All handles must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caps_tipx_logits(
    test: *const CapsMatrix,
    classifier: *const CapsMatrix,
    image_cache: *const CapsMatrix,
    labels: *const CapsLabels,
    hp: CapsHyperParams,
    out: *mut *mut CapsLogits,
) -> CapsStatus {
    let (Some(f), Some(w), Some(img), Some(l)) = (
        test.as_ref(),
        classifier.as_ref(),
        image_cache.as_ref(),
        labels.as_ref(),
    ) else {
        return fail(CapsStatus::NullArgument, "null handle");
    };
    if out.is_null() {
        return fail(CapsStatus::NullArgument, "null out pointer");
    }
    let hp = match hp_from(&hp) {
        Ok(h) => h,
        Err(status) => return status,
    };
    emit_logits(kernels::tipx_logits(&f.0, &w.0, &img.0, &l.0, &hp), out)
}

/// M-Adapter logits over a paired image + caption support cache.
///
/// # Safety
/// All handles must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caps_m_adapter_logits(
    test: *const CapsMatrix,
    classifier: *const CapsMatrix,
    image_cache: *const CapsMatrix,
    caption_cache: *const CapsMatrix,
    labels: *const CapsLabels,
    hp: CapsHyperParams,
    out: *mut *mut CapsLogits,
) -> CapsStatus {
    let (Some(f), Some(w), Some(img), Some(cap), Some(l)) = (
        test.as_ref(),
        classifier.as_ref(),
        image_cache.as_ref(),
        caption_cache.as_ref(),
        labels.as_ref(),
    ) else {
        return fail(CapsStatus::NullArgument, "null handle");
    };
    if out.is_null() {
        return fail(CapsStatus::NullArgument, "null out pointer");
    }
    let hp = match hp_from(&hp) {
        Ok(h) => h,
        Err(status) => return status,
    };
    emit_logits(
        kernels::m_adapter_logits(&f.0, &w.0, &img.0, &cap.0, &l.0, &hp),
        out,
    )
}

/// Fast-variant logits: M-Adapter without the KL term.
///
/// # Safety
/// All handles must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caps_f_variant_logits(
    test: *const CapsMatrix,
    classifier: *const CapsMatrix,
    image_cache: *const CapsMatrix,
    caption_cache: *const CapsMatrix,
    labels: *const CapsLabels,
    hp: CapsHyperParams,
    out: *mut *mut CapsLogits,
) -> CapsStatus {
    let (Some(f), Some(w), Some(img), Some(cap), Some(l)) = (
        test.as_ref(),
        classifier.as_ref(),
        image_cache.as_ref(),
        caption_cache.as_ref(),
        labels.as_ref(),
    ) else {
        return fail(CapsStatus::NullArgument, "null handle");
    };
    if out.is_null() {
        return fail(CapsStatus::NullArgument, "null out pointer");
    }
    let hp = match hp_from(&hp) {
        Ok(h) => h,
        Err(status) => return status,
    };
    emit_logits(
        kernels::f_variant_logits(&f.0, &w.0, &img.0, &cap.0, &l.0, &hp),
        out,
    )
}

// ---------------------------------------------------------------------------
// Logits and scoring
// ---------------------------------------------------------------------------

/// Test-row count; 0 for a null handle.
///
/// # Safety
/// `logits` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn caps_logits_rows(logits: *const CapsLogits) -> usize {
    logits.as_ref().map_or(0, |l| l.0.rows)
}

/// Class count; 0 for a null handle.
///
/// # Safety
/// `logits` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn caps_logits_classes(logits: *const CapsLogits) -> usize {
    logits.as_ref().map_or(0, |l| l.0.classes)
}

/// Copy the row-major logits into `buffer` (`len` must be
/// `rows * classes`).
///
/// # Safety
/// `logits` must be a live handle; `buffer` must point to `len` writable
/// f64 slots.
#[no_mangle]
pub unsafe extern "C" fn caps_logits_copy_data(
    logits: *const CapsLogits,
    buffer: *mut f64,
    len: usize,
) -> CapsStatus {
    let Some(l) = logits.as_ref() else {
        return fail(CapsStatus::NullArgument, "null logits");
    };
    if buffer.is_null() {
        return fail(CapsStatus::NullArgument, "null buffer");
    }
    if len != l.0.data.len() {
        return fail(
            CapsStatus::InvalidArgument,
            format!("buffer holds {len} values, logits have {}", l.0.data.len()),
        );
    }
    std::slice::from_raw_parts_mut(buffer, len).copy_from_slice(&l.0.data);
    CapsStatus::Ok
}

/// Top-1 accuracy of the logits against per-row class labels.
///
/// # Safety
/// `logits` must be a live handle; `labels` must point to `len` readable
/// usize values; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caps_top1_accuracy(
    logits: *const CapsLogits,
    labels: *const usize,
    len: usize,
    out: *mut f64,
) -> CapsStatus {
    let Some(l) = logits.as_ref() else {
        return fail(CapsStatus::NullArgument, "null logits");
    };
    if out.is_null() || (labels.is_null() && len != 0) {
        return fail(CapsStatus::NullArgument, "null labels or out pointer");
    }
    let labels = std::slice::from_raw_parts(labels, len);
    match eval::top1_accuracy(&l.0, labels) {
        Ok(acc) => {
            *out = acc;
            CapsStatus::Ok
        }
        Err(e) => fail(CapsStatus::InvalidArgument, e),
    }
}

/// Release a logits handle. Null is ignored.
///
/// # Safety
/// `logits` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn caps_logits_free(logits: *mut CapsLogits) {
    if !logits.is_null() {
        drop(Box::from_raw(logits));
    }
}
