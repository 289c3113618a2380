//! C interface: load a dataset and a model, predict pairs, compute metrics.
//!
//! Every function returns a [`CzslStatus`]. On failure a description is
//! available from [`czsl_last_error`] until the next call on the same thread.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use czsl_core::checkpoint;
use czsl_core::data::{self, CompositionSpace, Pair, Phase};
use czsl_core::encoders::ImageFeatureTable;
use czsl_core::evaluation::{evaluate, feasibility_scores};
use czsl_core::model::{ModelSnapshot, Scorer};
use czsl_core::training::{TrainConfig, TrainState};
use czsl_core::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CzslStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Lookup = 5,
    Integrity = 6,
    Io = 7,
    Contract = 8,
    Numeric = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CzslSetting {
    Standard = 0,
    Generalized = 1,
    OpenWorld = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CzslPhase {
    Val = 0,
    Test = 1,
}

/// Summary metrics of one evaluation.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CzslMetrics {
    pub seen: f64,
    pub unseen: f64,
    pub harmonic_mean: f64,
    pub auc: f64,
    pub n_images: usize,
    pub n_pairs: usize,
}

/// Split files plus the image feature table.
pub struct CzslDataset {
    space: CompositionSpace,
    features: ImageFeatureTable,
}

/// A scoring snapshot (trained or untrained).
pub struct CzslModel {
    snapshot: ModelSnapshot,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CzslStatus {
    match e {
        Error::Config(_) => CzslStatus::Config,
        Error::Validation { .. } | Error::Data(_) => CzslStatus::Data,
        Error::Lookup(_) | Error::Index { .. } => CzslStatus::Lookup,
        Error::Integrity { .. } => CzslStatus::Integrity,
        Error::Io { .. } => CzslStatus::Io,
        Error::Degenerate { .. } | Error::AllMasked { .. } => CzslStatus::Numeric,
        Error::Shape { .. } | Error::Contract(_) | Error::State(_) => CzslStatus::Contract,
    }
}

struct Fail(CzslStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CzslStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CzslStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            CzslStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CzslStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CzslStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn setting(s: CzslSetting) -> data::CzslSetting {
    match s {
        CzslSetting::Standard => data::CzslSetting::Standard,
        CzslSetting::Generalized => data::CzslSetting::Generalized,
        CzslSetting::OpenWorld => data::CzslSetting::OpenWorld,
    }
}

fn phase(p: CzslPhase) -> Phase {
    match p {
        CzslPhase::Val => Phase::Val,
        CzslPhase::Test => Phase::Test,
    }
}

fn threshold_arg(s: data::CzslSetting, t: f64) -> Result<Option<f64>, Fail> {
    match (s, t.is_nan()) {
        (data::CzslSetting::OpenWorld, true) => Err(Fail(
            CzslStatus::Config,
            "open world needs a feasibility threshold (got NaN)".into(),
        )),
        (data::CzslSetting::OpenWorld, false) => Ok(Some(t)),
        (_, true) => Ok(None),
        (_, false) => Err(Fail(
            CzslStatus::Config,
            "a feasibility threshold only applies to the open world; pass NaN".into(),
        )),
    }
}

/// Message for the most recent failure on this thread, or NULL.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn czsl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn czsl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load split files from `data_dir` and features from `features_path`
/// (NULL means `<data_dir>/features.bin`).
///
/// # Safety
/// String arguments must be NUL-terminated or NULL where allowed; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn czsl_dataset_load(
    data_dir: *const c_char,
    features_path: *const c_char,
    out: *mut *mut CzslDataset,
) -> CzslStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = Path::new(text(data_dir, "data_dir")?);
        let fpath = if features_path.is_null() {
            dir.join("features.bin")
        } else {
            Path::new(text(features_path, "features_path")?).to_path_buf()
        };
        let space = data::load_splits(dir)?;
        let features = ImageFeatureTable::load(&fpath)?;
        *out = Box::into_raw(Box::new(CzslDataset { space, features }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from [`czsl_dataset_load`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn czsl_dataset_free(ds: *mut CzslDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of attributes and objects.
///
/// # Safety
/// `ds` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn czsl_dataset_dims(
    ds: *const CzslDataset,
    n_attrs: *mut usize,
    n_objs: *mut usize,
) -> CzslStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        if n_attrs.is_null() || n_objs.is_null() {
            return Err(null("output"));
        }
        *n_attrs = ds.space.n_attrs();
        *n_objs = ds.space.n_objs();
        Ok(())
    })
}

/// Write `"<attribute> <object>"` into `buf` (with NUL). `needed` receives
/// the required size including the NUL, even when the buffer is too small.
///
/// # Safety
/// `ds` must be live; `buf` must hold `cap` bytes (may be NULL when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn czsl_pair_name(
    ds: *const CzslDataset,
    attr: usize,
    obj: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> CzslStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        if attr >= ds.space.n_attrs() || obj >= ds.space.n_objs() {
            return Err(Fail(CzslStatus::Lookup, format!("pair ({attr}, {obj}) out of range")));
        }
        let name = ds.space.pair_name(Pair::new(attr, obj));
        let n = name.len() + 1;
        if !needed.is_null() {
            *needed = n;
        }
        if cap < n || buf.is_null() {
            return Err(Fail(CzslStatus::BufferTooSmall, format!("need {n} bytes, have {cap}")));
        }
        ptr::copy_nonoverlapping(name.as_ptr(), buf.cast(), name.len());
        *buf.add(name.len()) = 0;
        Ok(())
    })
}

/// Load the validation-selected model from a checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn czsl_model_load(path: *const c_char, out: *mut *mut CzslModel) -> CzslStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = text(path, "path")?;
        let snapshot = checkpoint::load(Path::new(p))?.best_snapshot();
        *out = Box::into_raw(Box::new(CzslModel { snapshot }));
        Ok(())
    })
}

/// Untrained model for `ds` with default settings, the given prompt mode
/// name (e.g. `"clip_hard"`) and seed.
///
/// # Safety
/// `ds` must be live; `mode` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn czsl_model_init(
    ds: *const CzslDataset,
    mode: *const c_char,
    seed: u64,
    out: *mut *mut CzslModel,
) -> CzslStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = TrainConfig {
            mode: text(mode, "mode")?.parse()?,
            seed,
            ..TrainConfig::default()
        };
        let snapshot = TrainState::init(&cfg, &ds.space, ds.features.d_img())?.snapshot;
        *out = Box::into_raw(Box::new(CzslModel { snapshot }));
        Ok(())
    })
}

/// # Safety
/// `m` must come from a `czsl_model_*` constructor and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn czsl_model_free(m: *mut CzslModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn czsl_model_set_tau(m: *mut CzslModel, tau: f64) -> CzslStatus {
    guard(|| {
        let m = m.as_mut().ok_or_else(|| null("model"))?;
        m.snapshot.set_tau(tau)?;
        Ok(())
    })
}

/// Most similar pair for `image_id` among the setting's target pairs.
/// `threshold` must be NaN except in the open world.
///
/// # Safety
/// Handles must be live; `image_id` NUL-terminated; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn czsl_predict(
    m: *const CzslModel,
    ds: *const CzslDataset,
    image_id: *const c_char,
    setting_: CzslSetting,
    phase_: CzslPhase,
    threshold: f64,
    attr: *mut usize,
    obj: *mut usize,
) -> CzslStatus {
    guard(|| {
        let (m, ds) = (handle(m, "model")?, handle(ds, "dataset")?);
        if attr.is_null() || obj.is_null() {
            return Err(null("output"));
        }
        let id = text(image_id, "image_id")?;
        m.snapshot.check_space(&ds.space)?;
        let s = setting(setting_);
        let t = threshold_arg(s, threshold)?;
        let pairs = data::target_set(&ds.space, s, phase(phase_));
        let allowed = match t {
            Some(t) => Some(feasibility_scores(&ds.space, &m.snapshot.prompt.soft_embedding().tensor)?.allowed(&pairs, t)),
            None => None,
        };
        let image = m.snapshot.image_vector(&ds.features, id)?;
        let p = Scorer::new(&m.snapshot, &pairs, allowed.as_deref())?.predict(&image)?;
        *attr = p.attr;
        *obj = p.obj;
        Ok(())
    })
}

/// S, U, HM and AUC over the phase's images. `threshold` must be NaN except in the open world.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn czsl_evaluate(
    m: *const CzslModel,
    ds: *const CzslDataset,
    setting_: CzslSetting,
    phase_: CzslPhase,
    threshold: f64,
    out: *mut CzslMetrics,
) -> CzslStatus {
    guard(|| {
        let (m, ds) = (handle(m, "model")?, handle(ds, "dataset")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let s = setting(setting_);
        let t = threshold_arg(s, threshold)?;
        let r = evaluate(&m.snapshot, &ds.space, &ds.features, s, phase(phase_), t)?;
        *out = CzslMetrics {
            seen: r.summary.s,
            unseen: r.summary.u,
            harmonic_mean: r.summary.hm,
            auc: r.summary.auc,
            n_images: r.n_images,
            n_pairs: r.n_pairs,
        };
        Ok(())
    })
}
