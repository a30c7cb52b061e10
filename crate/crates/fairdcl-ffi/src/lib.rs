//! C ABI for the fairness metrics and dataset utilities: opaque handles,
//! integer error codes, and a thread-local last-error message. See
//! `include/fairdcl.h` for the corresponding header.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use ndarray::Array2;

use fairdcl::data::{generate_synthetic, load_manifest, write_dataset, DatasetManifest, Split, SyntheticSpec};
use fairdcl::metrics::{diff_k, diff_two, FairnessReport};
use fairdcl::FairdclError;

pub const FAIRDCL_OK: i32 = 0;
pub const FAIRDCL_ERR_NULL_ARG: i32 = 1;
pub const FAIRDCL_ERR_UTF8: i32 = 2;
pub const FAIRDCL_ERR_INVALID: i32 = 3;
pub const FAIRDCL_ERR_IO: i32 = 4;
pub const FAIRDCL_ERR_INTERNAL: i32 = 5;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn code_for(err: &FairdclError) -> i32 {
    match err {
        FairdclError::Io(_) => FAIRDCL_ERR_IO,
        FairdclError::Config(_)
        | FairdclError::Shape(_)
        | FairdclError::Metric(_)
        | FairdclError::Manifest(_) => FAIRDCL_ERR_INVALID,
        _ => FAIRDCL_ERR_INTERNAL,
    }
}

fn fail(err: FairdclError) -> i32 {
    let code = code_for(&err);
    set_error(&err.to_string());
    code
}

fn fail_invalid(msg: &str) -> i32 {
    set_error(msg);
    FAIRDCL_ERR_INVALID
}

fn null_arg(name: &str) -> i32 {
    set_error(&format!("null argument: {name}"));
    FAIRDCL_ERR_NULL_ARG
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, i32> {
    if ptr.is_null() {
        return Err(FAIRDCL_ERR_NULL_ARG);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        FAIRDCL_ERR_UTF8
    })
}

/// Message for the most recent error on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fairdcl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ---- dataset manifest handle ----

pub struct FairdclManifest {
    inner: DatasetManifest,
}

/// Load a dataset manifest CSV. On success writes an owned handle to
/// `out`; release it with `fairdcl_manifest_free`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fairdcl_manifest_load(
    path: *const c_char,
    out: *mut *mut FairdclManifest,
) -> i32 {
    if out.is_null() {
        return null_arg("out");
    }
    let path = match cstr(path) {
        Ok(p) => p,
        Err(c) => {
            return if c == FAIRDCL_ERR_NULL_ARG {
                null_arg("path")
            } else {
                c
            }
        }
    };
    match load_manifest(Path::new(path)) {
        Ok(m) => {
            *out = Box::into_raw(Box::new(FairdclManifest { inner: m }));
            FAIRDCL_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `m` must come from `fairdcl_manifest_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fairdcl_manifest_free(m: *mut FairdclManifest) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live manifest handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn fairdcl_manifest_num_groups(
    m: *const FairdclManifest,
    out: *mut u64,
) -> i32 {
    if m.is_null() {
        return null_arg("manifest");
    }
    if out.is_null() {
        return null_arg("out");
    }
    *out = (*m).inner.num_groups() as u64;
    FAIRDCL_OK
}

/// # Safety
/// `m` must be a live manifest handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn fairdcl_manifest_num_classes(
    m: *const FairdclManifest,
    out: *mut u64,
) -> i32 {
    if m.is_null() {
        return null_arg("manifest");
    }
    if out.is_null() {
        return null_arg("out");
    }
    *out = (*m).inner.num_classes() as u64;
    FAIRDCL_OK
}

/// Number of tiles in one of the splits "pretrain", "finetune", "test".
///
/// # Safety
/// `m` live handle, `split` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn fairdcl_manifest_split_count(
    m: *const FairdclManifest,
    split: *const c_char,
    out: *mut u64,
) -> i32 {
    if m.is_null() {
        return null_arg("manifest");
    }
    if out.is_null() {
        return null_arg("out");
    }
    let split = match cstr(split) {
        Ok(s) => s,
        Err(c) => return c,
    };
    match Split::parse(split) {
        Ok(s) => {
            *out = (*m).inner.split_entries(s).len() as u64;
            FAIRDCL_OK
        }
        Err(e) => fail(e),
    }
}

// ---- synthetic dataset generation ----

/// Generate the synthetic biased-scene dataset into `out_dir` (images,
/// masks, manifest.csv).
///
/// # Safety
/// `out_dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fairdcl_generate_synthetic(
    num_tiles: u64,
    tile_size: u64,
    num_classes: u64,
    k: u64,
    rho: f64,
    seed: u64,
    out_dir: *const c_char,
) -> i32 {
    let dir = match cstr(out_dir) {
        Ok(d) => d,
        Err(c) => {
            return if c == FAIRDCL_ERR_NULL_ARG {
                null_arg("out_dir")
            } else {
                c
            }
        }
    };
    let spec = SyntheticSpec {
        num_tiles: num_tiles as usize,
        tile_size: tile_size as usize,
        num_classes: num_classes as usize,
        k: k as usize,
        rho,
        seed,
    };
    let result = generate_synthetic(&spec).and_then(|out| write_dataset(&out, Path::new(dir)));
    match result {
        Ok(_) => FAIRDCL_OK,
        Err(e) => fail(e),
    }
}

// ---- fairness metrics ----

/// Relative group-accuracy gap for two groups.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fairdcl_diff_two(mu1: f64, mu2: f64, out: *mut f64) -> i32 {
    if out.is_null() {
        return null_arg("out");
    }
    match diff_two(mu1, mu2) {
        Ok(v) => {
            *out = v;
            FAIRDCL_OK
        }
        Err(e) => fail(e),
    }
}

/// Scaled distance-from-parity for K >= 3 group means.
///
/// # Safety
/// `mus` must point to `len` doubles; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn fairdcl_diff_k(mus: *const f64, len: usize, out: *mut f64) -> i32 {
    if mus.is_null() {
        return null_arg("mus");
    }
    if out.is_null() {
        return null_arg("out");
    }
    let slice = std::slice::from_raw_parts(mus, len);
    match diff_k(slice) {
        Ok(v) => {
            *out = v;
            FAIRDCL_OK
        }
        Err(e) => fail(e),
    }
}

// ---- mask-pair scoring handle ----

pub struct FairdclMetrics {
    k: usize,
    num_classes: usize,
    pairs: Vec<(Array2<u8>, Array2<u8>, usize)>,
}

/// Create an accumulator for predicted/ground-truth mask pairs.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fairdcl_metrics_new(
    k: u64,
    num_classes: u64,
    out: *mut *mut FairdclMetrics,
) -> i32 {
    if out.is_null() {
        return null_arg("out");
    }
    if k < 2 || num_classes < 2 {
        return fail_invalid("k and num_classes must both be >= 2");
    }
    *out = Box::into_raw(Box::new(FairdclMetrics {
        k: k as usize,
        num_classes: num_classes as usize,
        pairs: Vec::new(),
    }));
    FAIRDCL_OK
}

/// # Safety
/// `m` must come from `fairdcl_metrics_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fairdcl_metrics_free(m: *mut FairdclMetrics) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Add one pair of row-major `h`×`w` class-index masks for a group.
///
/// # Safety
/// `pred` and `gt` must each point to `h*w` bytes; `m` live handle.
#[no_mangle]
pub unsafe extern "C" fn fairdcl_metrics_add_pair(
    m: *mut FairdclMetrics,
    pred: *const u8,
    gt: *const u8,
    h: u64,
    w: u64,
    group: u64,
) -> i32 {
    if m.is_null() {
        return null_arg("metrics");
    }
    if pred.is_null() {
        return null_arg("pred");
    }
    if gt.is_null() {
        return null_arg("gt");
    }
    let m = &mut *m;
    if group as usize >= m.k {
        return fail_invalid(&format!("group {group} out of range for k={}", m.k));
    }
    if h == 0 || w == 0 {
        return fail_invalid("mask dimensions must be positive");
    }
    let n = (h * w) as usize;
    let to_mask = |p: *const u8| {
        Array2::from_shape_vec((h as usize, w as usize), std::slice::from_raw_parts(p, n).to_vec())
            .expect("shape matches length")
    };
    let (pm, gm) = (to_mask(pred), to_mask(gt));
    if pm.iter().chain(gm.iter()).any(|&v| v as usize >= m.num_classes) {
        return fail_invalid("mask contains a class index out of range");
    }
    m.pairs.push((pm, gm, group as usize));
    FAIRDCL_OK
}

/// Pooled fairness summary over all accumulated pairs.
///
/// # Safety
/// `m` live handle; `diff`, `wst`, `acc` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fairdcl_metrics_report(
    m: *const FairdclMetrics,
    diff: *mut f64,
    wst: *mut f64,
    acc: *mut f64,
) -> i32 {
    if m.is_null() {
        return null_arg("metrics");
    }
    if diff.is_null() || wst.is_null() || acc.is_null() {
        return null_arg("diff/wst/acc");
    }
    let m = &*m;
    match FairnessReport::from_mask_pairs(&m.pairs, m.k, m.num_classes) {
        Ok(r) => {
            *diff = r.diff;
            *wst = r.wst;
            *acc = r.acc;
            FAIRDCL_OK
        }
        Err(e) => fail(e),
    }
}
