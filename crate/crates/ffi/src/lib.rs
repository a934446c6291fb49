//! C ABI for the pointdiffusion library.
//!
//! Handles are opaque pointers owned by Rust; every function returns a
//! `PD_*` status code and writes results through out-pointers. On failure a
//! thread-local message is retrievable with [`pd_last_error`]. All functions
//! catch panics at the boundary and report them as `PD_RUNTIME_ERROR`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use pointdiffusion::condition::condition_bundle;
use pointdiffusion::data::{generate_scene, load_cloud, save_cloud, SceneSpec};
use pointdiffusion::error::Error;
use pointdiffusion::eval::miou;
use pointdiffusion::geometry::{IndexCache, PointCloud};
use pointdiffusion::network::{load_model, sample_labels, ModelCheckpoint};
use pointdiffusion::schedule::make_linear_schedule;

/// Success.
pub const PD_OK: i32 = 0;
/// A required pointer argument was null.
pub const PD_NULL_ARGUMENT: i32 = 1;
/// An argument value was rejected.
pub const PD_INVALID_ARGUMENT: i32 = 2;
/// The underlying file could not be read or written.
pub const PD_IO_ERROR: i32 = 3;
/// The file exists but is not a valid artifact (magic/version/truncation).
pub const PD_FORMAT_ERROR: i32 = 4;
/// Any other failure; see `pd_last_error`.
pub const PD_RUNTIME_ERROR: i32 = 5;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap();
    });
}

fn code_for(err: &Error) -> i32 {
    match err {
        Error::Io(_) => PD_IO_ERROR,
        Error::BadMagic { .. } | Error::BadVersion { .. } | Error::TruncatedPayload => {
            PD_FORMAT_ERROR
        }
        Error::InvalidArgument(_)
        | Error::ShapeMismatch(_)
        | Error::EmptyInput(_)
        | Error::StepOutOfRange { .. }
        | Error::InsufficientReference { .. } => PD_INVALID_ARGUMENT,
    }
}

fn fail(err: &Error) -> i32 {
    set_error(&err.to_string());
    code_for(err)
}

fn guard(body: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            PD_RUNTIME_ERROR
        }
    }
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Option<&'a str> {
    if ptr.is_null() {
        return None;
    }
    CStr::from_ptr(ptr).to_str().ok()
}

/// A point cloud with optional per-point labels.
pub struct PdCloud {
    cloud: PointCloud,
    labels: Option<Vec<usize>>,
    n_classes: usize,
}

/// A loaded model checkpoint (conditional network, optional denoiser).
pub struct PdModel {
    checkpoint: ModelCheckpoint,
}

/// Library version as a static UTF-8 string.
#[no_mangle]
pub extern "C" fn pd_version() -> *const c_char {
    static VERSION: &[u8] = concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes();
    VERSION.as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pd_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Generate a synthetic labeled scene.
///
/// `preset` is `"separable"` or `"hard"`. Points are split as evenly as
/// possible over `classes`.
///
/// # Safety
/// `preset` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_cloud_generate(
    preset: *const c_char,
    classes: u32,
    points: u32,
    seed: u64,
    out: *mut *mut PdCloud,
) -> i32 {
    guard(|| {
        let Some(out) = out.as_mut() else {
            set_error("out pointer is null");
            return PD_NULL_ARGUMENT;
        };
        let Some(preset) = cstr(preset) else {
            set_error("preset is null or not UTF-8");
            return PD_NULL_ARGUMENT;
        };
        let classes = classes as usize;
        let points = points as usize;
        if classes < 2 || points < classes {
            set_error("need at least 2 classes and one point per class");
            return PD_INVALID_ARGUMENT;
        }
        let mut spec = match preset {
            "separable" => SceneSpec::separable(classes, 1, seed),
            "hard" => SceneSpec::hard(classes, 1, seed),
            other => {
                set_error(&format!("unknown preset {other:?}"));
                return PD_INVALID_ARGUMENT;
            }
        };
        let base = points / classes;
        let extra = points % classes;
        for (i, c) in spec.classes.iter_mut().enumerate() {
            c.count = base + usize::from(i < extra);
        }
        match generate_scene(&spec) {
            Ok((cloud, labels)) => {
                *out = Box::into_raw(Box::new(PdCloud {
                    cloud,
                    labels: Some(labels),
                    n_classes: classes,
                }));
                PD_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Load a cloud file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_cloud_load(path: *const c_char, out: *mut *mut PdCloud) -> i32 {
    guard(|| {
        let Some(out) = out.as_mut() else {
            set_error("out pointer is null");
            return PD_NULL_ARGUMENT;
        };
        let Some(path) = cstr(path) else {
            set_error("path is null or not UTF-8");
            return PD_NULL_ARGUMENT;
        };
        match load_cloud(Path::new(path)) {
            Ok(file) => {
                *out = Box::into_raw(Box::new(PdCloud {
                    cloud: file.cloud,
                    labels: file.labels,
                    n_classes: file.n_classes,
                }));
                PD_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Save a cloud (with its labels, when present).
///
/// # Safety
/// `cloud` must be a live handle and `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pd_cloud_save(cloud: *const PdCloud, path: *const c_char) -> i32 {
    guard(|| {
        let Some(cloud) = cloud.as_ref() else {
            set_error("cloud handle is null");
            return PD_NULL_ARGUMENT;
        };
        let Some(path) = cstr(path) else {
            set_error("path is null or not UTF-8");
            return PD_NULL_ARGUMENT;
        };
        match save_cloud(
            Path::new(path),
            &cloud.cloud,
            cloud.labels.as_deref(),
            cloud.n_classes,
        ) {
            Ok(()) => PD_OK,
            Err(e) => fail(&e),
        }
    })
}

/// Number of points in the cloud.
///
/// # Safety
/// `cloud` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_cloud_points(cloud: *const PdCloud, out: *mut u64) -> i32 {
    guard(|| {
        let (Some(cloud), Some(out)) = (cloud.as_ref(), out.as_mut()) else {
            set_error("null argument");
            return PD_NULL_ARGUMENT;
        };
        *out = cloud.cloud.n_points() as u64;
        PD_OK
    })
}

/// Class count the cloud was generated or stored with.
///
/// # Safety
/// `cloud` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_cloud_classes(cloud: *const PdCloud, out: *mut u32) -> i32 {
    guard(|| {
        let (Some(cloud), Some(out)) = (cloud.as_ref(), out.as_mut()) else {
            set_error("null argument");
            return PD_NULL_ARGUMENT;
        };
        *out = cloud.n_classes as u32;
        PD_OK
    })
}

/// Copy the positions into `out` as `n * 3` consecutive floats.
///
/// # Safety
/// `cloud` must be a live handle; `out` must point to at least `len` floats.
#[no_mangle]
pub unsafe extern "C" fn pd_cloud_positions(
    cloud: *const PdCloud,
    out: *mut f32,
    len: usize,
) -> i32 {
    guard(|| {
        let Some(cloud) = cloud.as_ref() else {
            set_error("cloud handle is null");
            return PD_NULL_ARGUMENT;
        };
        if out.is_null() {
            set_error("out buffer is null");
            return PD_NULL_ARGUMENT;
        }
        let needed = cloud.cloud.n_points() * 3;
        if len < needed {
            set_error(&format!("buffer holds {len} floats, need {needed}"));
            return PD_INVALID_ARGUMENT;
        }
        for (i, p) in cloud.cloud.positions().iter().enumerate() {
            for (d, &c) in p.iter().enumerate() {
                *out.add(i * 3 + d) = c as f32;
            }
        }
        PD_OK
    })
}

/// Copy the labels into `out`; fails when the cloud carries none.
///
/// # Safety
/// `cloud` must be a live handle; `out` must point to at least `len` values.
#[no_mangle]
pub unsafe extern "C" fn pd_cloud_labels(cloud: *const PdCloud, out: *mut u16, len: usize) -> i32 {
    guard(|| {
        let Some(cloud) = cloud.as_ref() else {
            set_error("cloud handle is null");
            return PD_NULL_ARGUMENT;
        };
        if out.is_null() {
            set_error("out buffer is null");
            return PD_NULL_ARGUMENT;
        }
        let Some(labels) = &cloud.labels else {
            set_error("cloud carries no labels");
            return PD_INVALID_ARGUMENT;
        };
        if len < labels.len() {
            set_error(&format!("buffer holds {len} labels, need {}", labels.len()));
            return PD_INVALID_ARGUMENT;
        }
        for (i, &l) in labels.iter().enumerate() {
            *out.add(i) = l as u16;
        }
        PD_OK
    })
}

/// Release a cloud handle. Null is a no-op.
///
/// # Safety
/// `cloud` must be a handle produced by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pd_cloud_free(cloud: *mut PdCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Load a model checkpoint.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_model_load(path: *const c_char, out: *mut *mut PdModel) -> i32 {
    guard(|| {
        let Some(out) = out.as_mut() else {
            set_error("out pointer is null");
            return PD_NULL_ARGUMENT;
        };
        let Some(path) = cstr(path) else {
            set_error("path is null or not UTF-8");
            return PD_NULL_ARGUMENT;
        };
        match load_model(Path::new(path)) {
            Ok(checkpoint) => {
                *out = Box::into_raw(Box::new(PdModel { checkpoint }));
                PD_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Class count the model was built for.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_model_classes(model: *const PdModel, out: *mut u32) -> i32 {
    guard(|| {
        let (Some(model), Some(out)) = (model.as_ref(), out.as_mut()) else {
            set_error("null argument");
            return PD_NULL_ARGUMENT;
        };
        *out = model.checkpoint.config.n_classes as u32;
        PD_OK
    })
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be a handle produced by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pd_model_free(model: *mut PdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Run the reverse process on a cloud and write one label per point.
///
/// `steps` is the sampling step count (0 picks 20). The same seed and inputs
/// always produce identical labels.
///
/// # Safety
/// `model` and `cloud` must be live handles; `out` must point to at least
/// `len` values.
#[no_mangle]
pub unsafe extern "C" fn pd_sample(
    model: *const PdModel,
    cloud: *const PdCloud,
    steps: u32,
    seed: u64,
    out: *mut u16,
    len: usize,
) -> i32 {
    guard(|| {
        let (Some(model), Some(cloud)) = (model.as_ref(), cloud.as_ref()) else {
            set_error("null handle");
            return PD_NULL_ARGUMENT;
        };
        if out.is_null() {
            set_error("out buffer is null");
            return PD_NULL_ARGUMENT;
        }
        let n = cloud.cloud.n_points();
        if len < n {
            set_error(&format!("buffer holds {len} labels, need {n}"));
            return PD_INVALID_ARGUMENT;
        }
        let Some(denoiser) = &model.checkpoint.denoiser else {
            set_error("checkpoint has no denoiser");
            return PD_INVALID_ARGUMENT;
        };
        let steps = if steps == 0 { 20 } else { steps as usize };
        let run = || -> Result<Vec<usize>, Error> {
            let sched = make_linear_schedule(steps, 1e-4, 0.02)?;
            let cache = IndexCache::new();
            let cfg = &model.checkpoint.config;
            let bundle = condition_bundle(&cloud.cloud, &model.checkpoint.condition, &cache, cfg)?;
            let (labels, _) =
                sample_labels(&cloud.cloud, &bundle, &sched, seed, denoiser, &cache, cfg, 0)?;
            Ok(labels)
        };
        match run() {
            Ok(labels) => {
                for (i, &l) in labels.iter().enumerate() {
                    *out.add(i) = l as u16;
                }
                PD_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Mean intersection-over-union between two label arrays.
///
/// # Safety
/// `pred` and `gt` must point to at least `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_miou(
    pred: *const u16,
    gt: *const u16,
    len: usize,
    classes: u32,
    out: *mut f64,
) -> i32 {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            set_error("null argument");
            return PD_NULL_ARGUMENT;
        }
        let pred: Vec<usize> = (0..len).map(|i| *pred.add(i) as usize).collect();
        let gt: Vec<usize> = (0..len).map(|i| *gt.add(i) as usize).collect();
        match miou(&pred, &gt, classes as usize) {
            Ok(report) => {
                *out = report.miou;
                PD_OK
            }
            Err(e) => fail(&e),
        }
    })
}
