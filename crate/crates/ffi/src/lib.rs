//! C ABI for histocl.
//!
//! Objects cross the boundary as opaque handles released with the matching
//! `*_free` function. Every fallible call returns an [`HclStatus`]; on
//! failure [`hcl_last_error`] describes the problem for the calling thread.
//! Strings returned through `char **` are owned by the caller and released
//! with [`hcl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use histocl::data::{load_folder, synth_generate, write_folder, DataError, Dataset, SynthParams};
use histocl::harness::{self, AccMatrix, HarnessError, RunConfig, RunResult};
use histocl::stain::{self, build_augmented_dataset, DomainSpec, StainMatrix};
use histocl::strategy::agem_project;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Runtime = 5,
    Io = 6,
    Panic = 7,
}

/// A labeled patch collection.
pub struct HclDataset(Dataset);

/// The outcome of an experiment run.
pub struct HclRunResult(RunResult);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(HclStatus, String);

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let status = match &e {
            HarnessError::Config(_) => HclStatus::Config,
            HarnessError::Data(_) | HarnessError::Stain(_) | HarnessError::Scenario(_) => HclStatus::Data,
            HarnessError::Io { .. } => HclStatus::Io,
            _ => HclStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let status = match e {
            DataError::Io { .. } => HclStatus::Io,
            _ => HclStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(HclStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HclStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            HclStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(HclStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{name} is not UTF-8")))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("string contains an interior NUL"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hcl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread ("" after a success).
/// Valid until the next histocl call on the same thread.
#[no_mangle]
pub extern "C" fn hcl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from a histocl function and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hcl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Optical density of one RGB pixel.
///
/// # Safety
/// `rgb` points to 3 bytes and `od_out` to 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn hcl_rgb_to_od(rgb: *const u8, white_level: f64, od_out: *mut f64) -> HclStatus {
    guard(|| {
        non_null(rgb, "rgb")?;
        non_null(od_out, "od_out")?;
        if !(white_level.is_finite() && white_level > 0.0) {
            return Err(invalid("white_level must be positive"));
        }
        let px = [*rgb, *rgb.add(1), *rgb.add(2)];
        let od = stain::rgb_to_od(px, white_level);
        ptr::copy_nonoverlapping(od.as_ptr(), od_out, 3);
        Ok(())
    })
}

/// RGB pixel of an optical density triple.
///
/// # Safety
/// `od` points to 3 doubles and `rgb_out` to 3 bytes.
#[no_mangle]
pub unsafe extern "C" fn hcl_od_to_rgb(od: *const f64, white_level: f64, rgb_out: *mut u8) -> HclStatus {
    guard(|| {
        non_null(od, "od")?;
        non_null(rgb_out, "rgb_out")?;
        if !(white_level.is_finite() && white_level > 0.0) {
            return Err(invalid("white_level must be positive"));
        }
        let px = stain::od_to_rgb([*od, *od.add(1), *od.add(2)], white_level);
        ptr::copy_nonoverlapping(px.as_ptr(), rgb_out, 3);
        Ok(())
    })
}

/// Generates a synthetic dataset.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives a new handle.
#[no_mangle]
pub unsafe extern "C" fn hcl_dataset_synth(
    classes: usize,
    per_class: usize,
    side: u32,
    seed: u64,
    out: *mut *mut HclDataset,
) -> HclStatus {
    guard(|| {
        non_null(out, "out")?;
        let ds = synth_generate(&SynthParams {
            classes,
            per_class,
            side,
            seed,
        })?;
        *out = Box::into_raw(Box::new(HclDataset(ds)));
        Ok(())
    })
}

/// Loads a folder with one subfolder of PNG files per class.
///
/// # Safety
/// `path` is a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hcl_dataset_load(path: *const c_char, out: *mut *mut HclDataset) -> HclStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        non_null(out, "out")?;
        let ds = load_folder(&PathBuf::from(path), None)?;
        *out = Box::into_raw(Box::new(HclDataset(ds)));
        Ok(())
    })
}

/// Renders `ds` into the five preset stain domains.
///
/// # Safety
/// `ds` is a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hcl_dataset_augment(
    ds: *const HclDataset,
    seed: u64,
    out: *mut *mut HclDataset,
) -> HclStatus {
    guard(|| {
        non_null(ds, "ds")?;
        non_null(out, "out")?;
        let aug = build_augmented_dataset(&(*ds).0, &DomainSpec::presets(), &StainMatrix::default(), seed)
            .map_err(|e| Failure(HclStatus::Data, e.to_string()))?;
        *out = Box::into_raw(Box::new(HclDataset(aug)));
        Ok(())
    })
}

/// Writes `ds` as a PNG folder with a `manifest.json`.
///
/// # Safety
/// `ds` is a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hcl_dataset_write(ds: *const HclDataset, path: *const c_char) -> HclStatus {
    guard(|| {
        non_null(ds, "ds")?;
        let path = c_str(path, "path")?;
        write_folder(&(*ds).0, &PathBuf::from(path))?;
        Ok(())
    })
}

/// Number of patches in `ds`.
///
/// # Safety
/// `ds` is a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hcl_dataset_len(ds: *const HclDataset, out: *mut usize) -> HclStatus {
    guard(|| {
        non_null(ds, "ds")?;
        non_null(out, "out")?;
        *out = (*ds).0.len();
        Ok(())
    })
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `ds` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hcl_dataset_free(ds: *mut HclDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Runs an experiment described by a JSON config. Result files are written
/// when the config sets `output.dir`.
///
/// # Safety
/// `config_json` is a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hcl_run_experiment_json(config_json: *const c_char, out: *mut *mut HclRunResult) -> HclStatus {
    guard(|| {
        let text = c_str(config_json, "config_json")?;
        non_null(out, "out")?;
        harness::configure_threads()?;
        let cfg = RunConfig::from_json(text)?;
        let result = harness::run_experiment(&cfg)?;
        if let Some(dir) = &cfg.output.dir {
            harness::write_results(&result, dir)?;
        }
        *out = Box::into_raw(Box::new(HclRunResult(result)));
        Ok(())
    })
}

/// Canonical `result.json` text of a run.
///
/// # Safety
/// `r` is a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hcl_result_json(r: *const HclRunResult, out: *mut *mut c_char) -> HclStatus {
    guard(|| {
        non_null(r, "r")?;
        non_null(out, "out")?;
        *out = into_c_string(harness::result_json(&(*r).0))?;
        Ok(())
    })
}

/// Number of seeds in a run.
///
/// # Safety
/// `r` is a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hcl_result_num_seeds(r: *const HclRunResult, out: *mut usize) -> HclStatus {
    guard(|| {
        non_null(r, "r")?;
        non_null(out, "out")?;
        *out = (*r).0.seeds.len();
        Ok(())
    })
}

/// ACC, BWT and FWT of seed number `index` into `out[0..3]`.
///
/// # Safety
/// `r` is a live handle and `out` points to 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn hcl_result_metrics(r: *const HclRunResult, index: usize, out: *mut f64) -> HclStatus {
    guard(|| {
        non_null(r, "r")?;
        non_null(out, "out")?;
        let seeds = &(*r).0.seeds;
        let m = seeds
            .get(index)
            .ok_or_else(|| invalid(format!("seed index {index} out of range ({} seeds)", seeds.len())))?
            .metrics;
        ptr::copy_nonoverlapping([m.acc, m.bwt, m.fwt].as_ptr(), out, 3);
        Ok(())
    })
}

/// Writes the result files of a run into `dir`.
///
/// # Safety
/// `r` is a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hcl_result_write(r: *const HclRunResult, dir: *const c_char) -> HclStatus {
    guard(|| {
        non_null(r, "r")?;
        let dir = c_str(dir, "dir")?;
        harness::write_results(&(*r).0, &PathBuf::from(dir))?;
        Ok(())
    })
}

/// Releases a run result handle. Null is ignored.
///
/// # Safety
/// `r` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hcl_result_free(r: *mut HclRunResult) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// ACC, BWT and FWT of a row-major `t`×`t` accuracy matrix.
///
/// # Safety
/// `values` points to t·t doubles, `chance` to t doubles and `out` to 3.
#[no_mangle]
pub unsafe extern "C" fn hcl_compute_metrics(
    values: *const f64,
    t: usize,
    chance: *const f64,
    out: *mut f64,
) -> HclStatus {
    guard(|| {
        non_null(values, "values")?;
        non_null(chance, "chance")?;
        non_null(out, "out")?;
        let cells = t.checked_mul(t).ok_or_else(|| invalid("t is too large"))?;
        let flat = std::slice::from_raw_parts(values, cells);
        let rows: Vec<Vec<f64>> = flat.chunks(t.max(1)).map(<[f64]>::to_vec).collect();
        let m = AccMatrix::new(rows).map_err(|e| invalid(e.to_string()))?;
        let r = harness::compute_metrics(&m, std::slice::from_raw_parts(chance, t))
            .map_err(|e| invalid(e.to_string()))?;
        ptr::copy_nonoverlapping([r.acc, r.bwt, r.fwt].as_ptr(), out, 3);
        Ok(())
    })
}

/// A-GEM projection of `g` against `g_ref` (both length `n`) into `out`.
///
/// # Safety
/// All three pointers reference `n` floats; `out` may not alias the inputs.
#[no_mangle]
pub unsafe extern "C" fn hcl_agem_project(g: *const f32, g_ref: *const f32, n: usize, out: *mut f32) -> HclStatus {
    guard(|| {
        non_null(g, "g")?;
        non_null(g_ref, "g_ref")?;
        non_null(out, "out")?;
        let projected = agem_project(std::slice::from_raw_parts(g, n), std::slice::from_raw_parts(g_ref, n))
            .map_err(|e| invalid(e.to_string()))?;
        ptr::copy_nonoverlapping(projected.as_ptr(), out, n);
        Ok(())
    })
}
