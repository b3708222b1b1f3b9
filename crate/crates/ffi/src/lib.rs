//! C ABI for the oversegmentation toolkit.
//!
//! All functions return an [`OversegStatus`] code; `OVERSEG_OK` is 0.
//! Handles are opaque pointers owned by the library and must be released
//! with the matching `_free` function. On failure a thread-local message
//! is available through [`overseg_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use overseg::classifier::{load_model, predict, MlpModel};
use overseg::features::{
    build_feature_vector, export_candidates_csv, screen_candidates, FeatureConfig, ScreenConfig,
};
use overseg::interpolate::{apply_corrections, merge_decision, CorrectionDecision, Verdict};
use overseg::metrics::{jaccard, mean_ap};
use overseg::ot::GeoWassersteinConfig;
use overseg::volume::{build_cell_index, load_volume, write_volume, FormatHint, LabelVolume};

/// Status codes returned by every API function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OversegStatus {
    /// success
    OversegOk = 0,
    /// a pointer argument was null
    OversegNullArgument = 1,
    /// a path or string argument was not valid UTF-8
    OversegInvalidString = 2,
    /// I/O or format failure; see overseg_last_error
    OversegIoError = 3,
    /// invalid input data or configuration; see overseg_last_error
    OversegInvalidInput = 4,
    /// internal processing failure; see overseg_last_error
    OversegProcessingError = 5,
}

use OversegStatus::*;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(code: OversegStatus, msg: impl std::fmt::Display) -> OversegStatus {
    set_error(&msg.to_string());
    code
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn overseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Opaque handle to a loaded label volume.
pub struct OversegVolume {
    inner: LabelVolume,
}

/// Opaque handle to a trained classifier model.
pub struct OversegModel {
    inner: MlpModel,
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, OversegStatus> {
    if ptr.is_null() {
        return Err(fail(OversegNullArgument, "null path"));
    }
    let s = unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| fail(OversegInvalidString, "path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

/// Load a label volume (.lbl raw with JSON sidecar, or .tif/.tiff).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn overseg_volume_load(
    path: *const c_char,
    out: *mut *mut OversegVolume,
) -> OversegStatus {
    if out.is_null() {
        return fail(OversegNullArgument, "null output handle");
    }
    let path = match unsafe { path_arg(path) } {
        Ok(p) => p,
        Err(c) => return c,
    };
    match load_volume(path, FormatHint::Auto) {
        Ok(v) => {
            unsafe { *out = Box::into_raw(Box::new(OversegVolume { inner: v })) };
            OversegOk
        }
        Err(e) => fail(OversegIoError, e),
    }
}

/// Release a volume handle. Null is a no-op.
///
/// # Safety
/// `handle` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn overseg_volume_free(handle: *mut OversegVolume) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Volume dimensions as (z, y, x).
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn overseg_volume_dims(
    handle: *const OversegVolume,
    z: *mut u64,
    y: *mut u64,
    x: *mut u64,
) -> OversegStatus {
    if handle.is_null() || z.is_null() || y.is_null() || x.is_null() {
        return fail(OversegNullArgument, "null argument");
    }
    let dims = unsafe { &*handle }.inner.dims;
    unsafe {
        *z = dims.0 as u64;
        *y = dims.1 as u64;
        *x = dims.2 as u64;
    }
    OversegOk
}

/// Count of nonzero (labelled) voxels.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn overseg_volume_nonzero(
    handle: *const OversegVolume,
    out: *mut u64,
) -> OversegStatus {
    if handle.is_null() || out.is_null() {
        return fail(OversegNullArgument, "null argument");
    }
    unsafe { *out = (*handle).inner.nonzero_count() as u64 };
    OversegOk
}

/// Write a volume in the format implied by the path extension.
///
/// # Safety
/// `handle` and `path` must be valid.
#[no_mangle]
pub unsafe extern "C" fn overseg_volume_write(
    handle: *const OversegVolume,
    path: *const c_char,
) -> OversegStatus {
    if handle.is_null() {
        return fail(OversegNullArgument, "null volume");
    }
    let path = match unsafe { path_arg(path) } {
        Ok(p) => p,
        Err(c) => return c,
    };
    match write_volume(&unsafe { &*handle }.inner, path, FormatHint::Auto) {
        Ok(()) => OversegOk,
        Err(e) => fail(OversegIoError, e),
    }
}

/// Load a trained model file.
///
/// # Safety
/// `path` must be NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn overseg_model_load(
    path: *const c_char,
    out: *mut *mut OversegModel,
) -> OversegStatus {
    if out.is_null() {
        return fail(OversegNullArgument, "null output handle");
    }
    let path = match unsafe { path_arg(path) } {
        Ok(p) => p,
        Err(c) => return c,
    };
    match load_model(path) {
        Ok(m) => {
            unsafe { *out = Box::into_raw(Box::new(OversegModel { inner: m })) };
            OversegOk
        }
        Err(e) => fail(OversegIoError, e),
    }
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `handle` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn overseg_model_free(handle: *mut OversegModel) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Screen a volume for oversegmentation candidates and write the feature
/// CSV. `n_found` receives the candidate count and may be null.
///
/// # Safety
/// `volume` and `csv_path` must be valid.
#[no_mangle]
pub unsafe extern "C" fn overseg_screen_to_csv(
    volume: *const OversegVolume,
    max_gap: u64,
    projections: u64,
    seed: u64,
    csv_path: *const c_char,
    n_found: *mut u64,
) -> OversegStatus {
    if volume.is_null() {
        return fail(OversegNullArgument, "null volume");
    }
    let path = match unsafe { path_arg(csv_path) } {
        Ok(p) => p,
        Err(c) => return c,
    };
    let v = &unsafe { &*volume }.inner;
    let index = build_cell_index(v);
    let pairs = screen_candidates(
        &index,
        &ScreenConfig {
            max_gap: max_gap as usize,
        },
    );
    let fcfg = FeatureConfig {
        ot: GeoWassersteinConfig {
            n_projections: projections as usize,
            seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        match build_feature_vector(&pair, &index, &fcfg) {
            Ok(f) => rows.push((pair, f)),
            Err(e) => return fail(OversegProcessingError, e),
        }
    }
    let file = match std::fs::File::create(path) {
        Ok(f) => f,
        Err(e) => return fail(OversegIoError, e),
    };
    if let Err(e) = export_candidates_csv(&rows, file) {
        return fail(OversegIoError, e);
    }
    if !n_found.is_null() {
        unsafe { *n_found = rows.len() as u64 };
    }
    OversegOk
}

/// Screen, classify with the model, and repair the volume in place.
/// `n_merged` receives the number of merges and may be null.
///
/// # Safety
/// `volume` (mutable) and `model` must be valid handles.
#[no_mangle]
pub unsafe extern "C" fn overseg_correct(
    volume: *mut OversegVolume,
    model: *const OversegModel,
    projections: u64,
    seed: u64,
    n_merged: *mut u64,
) -> OversegStatus {
    if volume.is_null() || model.is_null() {
        return fail(OversegNullArgument, "null handle");
    }
    let v = &mut unsafe { &mut *volume }.inner;
    let m = &unsafe { &*model }.inner;
    let index = build_cell_index(v);
    let pairs = screen_candidates(&index, &ScreenConfig::default());
    let fcfg = FeatureConfig {
        variant: m.variant,
        ot: GeoWassersteinConfig {
            n_projections: projections as usize,
            seed,
            ..Default::default()
        },
        normalizers: m.normalizers,
    };
    let mut decisions: Vec<CorrectionDecision> = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let features = match build_feature_vector(&pair, &index, &fcfg) {
            Ok(f) => f,
            Err(e) => return fail(OversegProcessingError, e),
        };
        let (probability, merge) = match predict(m, &features.values) {
            Ok(r) => r,
            Err(e) => return fail(OversegInvalidInput, e),
        };
        if merge {
            let src = index.get(pair.label_a).unwrap().bottom_mask();
            let dst = index.get(pair.label_b).unwrap().top_mask();
            match merge_decision(pair, probability, src, dst) {
                Ok(d) => decisions.push(d),
                Err(e) => return fail(OversegProcessingError, e),
            }
        } else {
            decisions.push(CorrectionDecision::keep(pair, probability));
        }
    }
    match apply_corrections(v, &decisions) {
        Ok(log) => {
            if !n_merged.is_null() {
                let merges = log.iter().filter(|r| r.verdict == Verdict::Merge).count();
                unsafe { *n_merged = merges as u64 };
            }
            OversegOk
        }
        Err(e) => fail(OversegProcessingError, e),
    }
}

/// Segmentation quality of a prediction against ground truth. Either
/// output pointer may be null.
///
/// # Safety
/// Volume handles must be valid.
#[no_mangle]
pub unsafe extern "C" fn overseg_evaluate(
    pred: *const OversegVolume,
    gt: *const OversegVolume,
    mean_ap_out: *mut f64,
    jaccard_out: *mut f64,
) -> OversegStatus {
    if pred.is_null() || gt.is_null() {
        return fail(OversegNullArgument, "null volume");
    }
    let p = &unsafe { &*pred }.inner;
    let g = &unsafe { &*gt }.inner;
    if !mean_ap_out.is_null() {
        match mean_ap(p, g) {
            Ok(v) => unsafe { *mean_ap_out = v },
            Err(e) => return fail(OversegInvalidInput, e),
        }
    }
    if !jaccard_out.is_null() {
        match jaccard(p, g) {
            Ok(v) => unsafe { *jaccard_out = v.jaccard_matched },
            Err(e) => return fail(OversegInvalidInput, e),
        }
    }
    OversegOk
}
