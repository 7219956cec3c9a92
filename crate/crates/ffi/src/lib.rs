//! C ABI over the deepvote detector.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible call returns a [`DvStatus`]
//! and records a message retrievable with [`dv_last_error`] on the same
//! thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use deepvote::detect::{detect, DetectConfig, ScaleSource};
use deepvote::formats::{decode_features, read_features};
use deepvote::tensor::Tensor3;
use deepvote::train::{load_checkpoint, Checkpoint};
use deepvote::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DvStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Input = 3,
    Data = 4,
    Format = 5,
    Io = 6,
    Panic = 7,
}

impl From<&Error> for DvStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => DvStatus::Config,
            Error::Input(_) => DvStatus::Input,
            Error::Data(_) | Error::Generation(_) => DvStatus::Data,
            Error::Format { .. } | Error::Json { .. } => DvStatus::Format,
            Error::Io { .. } => DvStatus::Io,
        }
    }
}

/// A loaded checkpoint.
pub struct DvModel {
    inner: Checkpoint,
}

/// A `W x H x D` feature grid.
pub struct DvFeatures {
    inner: Tensor3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DvDetection {
    pub part_id: u32,
    /// Box in input pixels, top-left corner plus size.
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub score: f32,
    /// Peak cell on the scale-normalized grid.
    pub peak_w: u32,
    pub peak_h: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn fail(status: DvStatus, msg: &str) -> DvStatus {
    set_last_error(msg);
    status
}

/// Runs `f`, mapping errors and panics to a status.
fn guard(f: impl FnOnce() -> Result<(), DvStatus>) -> DvStatus {
    set_last_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DvStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(DvStatus::Panic, "internal panic"),
    }
}

fn lift(e: Error) -> DvStatus {
    fail(DvStatus::from(&e), &e.to_string())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, DvStatus> {
    if p.is_null() {
        return Err(fail(DvStatus::NullArgument, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DvStatus::Input, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), DvStatus> {
    if p.is_null() {
        Err(fail(DvStatus::NullArgument, &format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dv_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a NUL-terminated static string.
#[no_mangle]
pub extern "C" fn dv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dv_model_load(path: *const c_char, out: *mut *mut DvModel) -> DvStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let inner = load_checkpoint(&path).map_err(lift)?;
        *out = Box::into_raw(Box::new(DvModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`dv_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dv_model_free(model: *mut DvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of semantic parts the model detects; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dv_model_num_parts(model: *const DvModel) -> u32 {
    model.as_ref().map_or(0, |m| m.inner.model.num_parts() as u32)
}

/// Feature depth the model expects; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dv_model_feature_dim(model: *const DvModel) -> u32 {
    model.as_ref().map_or(0, |m| m.inner.model.feature_dim() as u32)
}

/// Whether the checkpoint carries a scale regressor.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dv_model_has_scale(model: *const DvModel) -> bool {
    model.as_ref().is_some_and(|m| m.inner.scale.is_some())
}

/// Reads a `.dvfm` feature file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dv_features_load(path: *const c_char, out: *mut *mut DvFeatures) -> DvStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let inner = read_features(&path).map_err(lift)?;
        *out = Box::into_raw(Box::new(DvFeatures { inner }));
        Ok(())
    })
}

/// Parses an in-memory `.dvfm` image.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn dv_features_decode(bytes: *const u8, len: usize, out: *mut *mut DvFeatures) -> DvStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        non_null(bytes, "bytes")?;
        let slice = std::slice::from_raw_parts(bytes, len);
        let inner = decode_features(slice, "<buffer>".as_ref()).map_err(lift)?;
        *out = Box::into_raw(Box::new(DvFeatures { inner }));
        Ok(())
    })
}

/// Copies a raw grid in `((h * width + w) * depth + d)` order.
///
/// # Safety
/// `data` must point to `width * height * depth` floats and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn dv_features_from_raw(
    width: u32,
    height: u32,
    depth: u32,
    data: *const f32,
    out: *mut *mut DvFeatures,
) -> DvStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        non_null(data, "data")?;
        let (w, h, d) = (width as usize, height as usize, depth as usize);
        if w == 0 || h == 0 || d == 0 {
            return Err(fail(DvStatus::Input, "grid dimensions must be positive"));
        }
        let n = w
            .checked_mul(h)
            .and_then(|x| x.checked_mul(d))
            .ok_or_else(|| fail(DvStatus::Input, "grid size overflows"))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        let inner = Tensor3::from_vec(w, h, d, values).map_err(lift)?;
        *out = Box::into_raw(Box::new(DvFeatures { inner }));
        Ok(())
    })
}

/// # Safety
/// `features` must be null or a live handle, and each out pointer null or writable.
#[no_mangle]
pub unsafe extern "C" fn dv_features_dims(
    features: *const DvFeatures,
    width: *mut u32,
    height: *mut u32,
    depth: *mut u32,
) -> DvStatus {
    guard(|| {
        let f = features
            .as_ref()
            .ok_or_else(|| fail(DvStatus::NullArgument, "features is null"))?;
        for (slot, v) in [(width, f.inner.width), (height, f.inner.height), (depth, f.inner.channels)] {
            if let Some(s) = slot.as_mut() {
                *s = v as u32;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `features` must come from a `dv_features_*` constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dv_features_free(features: *mut DvFeatures) {
    if !features.is_null() {
        drop(Box::from_raw(features));
    }
}

/// Detects parts on one feature grid.
///
/// `scale_ratio > 0` fixes the object scale; otherwise the checkpoint's
/// regressor predicts it. Detections are written best-first up to
/// `capacity`; `out_count` receives the total found, which may exceed
/// `capacity`. `out` may be null when `capacity` is 0.
///
/// # Safety
/// Handles must be live, `out` must hold `capacity` elements and
/// `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dv_detect(
    model: *const DvModel,
    features: *const DvFeatures,
    tau: f32,
    nms_iou: f32,
    scale_ratio: f32,
    out: *mut DvDetection,
    capacity: usize,
    out_count: *mut usize,
) -> DvStatus {
    guard(|| {
        non_null(out_count, "out_count")?;
        *out_count = 0;
        let m = model.as_ref().ok_or_else(|| fail(DvStatus::NullArgument, "model is null"))?;
        let f = features
            .as_ref()
            .ok_or_else(|| fail(DvStatus::NullArgument, "features is null"))?;
        if capacity > 0 {
            non_null(out, "out")?;
        }
        if !tau.is_finite() || !(0.0..=1.0).contains(&nms_iou) || !scale_ratio.is_finite() {
            return Err(fail(DvStatus::Input, "tau, nms_iou or scale_ratio out of range"));
        }
        let source = if scale_ratio > 0.0 {
            ScaleSource::Given(scale_ratio)
        } else {
            match &m.inner.scale {
                Some(reg) => ScaleSource::Predicted(reg),
                None => return Err(fail(DvStatus::Input, "checkpoint has no scale regressor; pass scale_ratio > 0")),
            }
        };
        let cfg = DetectConfig {
            tau,
            nms_iou: nms_iou as f64,
        };
        let mut dets = detect(&m.inner.model, source, &f.inner, &cfg, "").map_err(lift)?;
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        for (i, d) in dets.iter().take(capacity).enumerate() {
            *out.add(i) = DvDetection {
                part_id: d.part_id as u32,
                x: d.bbox.x,
                y: d.bbox.y,
                w: d.bbox.w,
                h: d.bbox.h,
                score: d.score,
                peak_w: d.peak.0 as u32,
                peak_h: d.peak.1 as u32,
            };
        }
        *out_count = dets.len();
        Ok(())
    })
}
