//! C ABI for the pspot engine.
//!
//! Every fallible call returns a [`PspotStatus`]; on failure the message is
//! available from [`pspot_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Strings returned
//! by accessors are owned by the handle they came from.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pspot::config::PipelineConfig;
use pspot::pipeline::Engine;
use pspot::preprocess::{load_image, RawImage};
use pspot::spotting::SpotResult;
use pspot::{BBox, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PspotStatus {
    Ok = 0,
    InvalidArgument = 1,
    Config = 2,
    MissingAsset = 3,
    CorruptIndex = 4,
    Io = 5,
    Internal = 6,
    Dimension = 7,
    UnknownPage = 8,
}

impl From<&Error> for PspotStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => Self::Config,
            Error::MissingAsset(_) | Error::ModelLoad(_) | Error::CorruptModel(_) => Self::MissingAsset,
            Error::CorruptIndex(_) | Error::VersionMismatch { .. } => Self::CorruptIndex,
            Error::Io(_) => Self::Io,
            Error::DimensionExceeded { .. } | Error::ShapeMismatch(_) => Self::Dimension,
            Error::UnknownPageId(_) => Self::UnknownPage,
            Error::InvalidInput(_) | Error::Image(_) | Error::ZeroRelevant => Self::InvalidArgument,
            _ => Self::Internal,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PspotBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl From<PspotBox> for BBox {
    fn from(b: PspotBox) -> Self {
        BBox::new(b.x, b.y, b.w, b.h)
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PspotDetection {
    /// 1-based.
    pub rank: u32,
    /// Position of the page in the index catalog.
    pub page_index: u32,
    pub bbox: PspotBox,
    pub score: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PspotPageHit {
    pub rank: u32,
    pub page_index: u32,
    pub score: f64,
}

/// A loaded configuration, extractor and index.
pub struct PspotEngine {
    engine: Engine,
}

/// Results of one query.
pub struct PspotResults {
    result: SpotResult,
    query_id: CString,
    detection_page_ids: Vec<CString>,
    page_ids: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: PspotStatus, msg: impl Into<String>) -> PspotStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), PspotStatus>) -> PspotStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            PspotStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(_) => fail(PspotStatus::Internal, "panic inside pspot"),
    }
}

fn check(r: pspot::Result<()>) -> Result<(), PspotStatus> {
    r.map_err(|e| fail((&e).into(), e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, PspotStatus> {
    if p.is_null() {
        return Err(fail(PspotStatus::InvalidArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PspotStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

fn not_null<T>(p: *const T, name: &str) -> Result<(), PspotStatus> {
    if p.is_null() {
        Err(fail(PspotStatus::InvalidArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn into_results(result: SpotResult) -> Box<PspotResults> {
    let cstr = |s: &str| CString::new(s).unwrap_or_default();
    Box::new(PspotResults {
        query_id: cstr(&result.query_id),
        detection_page_ids: result.detections.iter().map(|d| cstr(&d.page_id)).collect(),
        page_ids: result.pages.iter().map(|p| cstr(&p.page_id)).collect(),
        result,
    })
}

/// Message of the last failed call on this thread; empty after a success.
#[no_mangle]
pub extern "C" fn pspot_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static string.
#[no_mangle]
pub extern "C" fn pspot_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opens the engine described by a TOML configuration file.
///
/// # Safety
/// `config_path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pspot_engine_open(config_path: *const c_char, out: *mut *mut PspotEngine) -> PspotStatus {
    guard(|| {
        not_null(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(config_path, "config_path")?;
        let mut engine = None;
        check(PipelineConfig::load(Path::new(path)).and_then(|c| Engine::open(c)).map(|e| engine = Some(e)))?;
        *out = Box::into_raw(Box::new(PspotEngine {
            engine: engine.expect("set on success"),
        }));
        Ok(())
    })
}

/// # Safety
/// `engine` must come from [`pspot_engine_open`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn pspot_engine_free(engine: *mut PspotEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Number of indexed pages.
///
/// # Safety
/// `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pspot_engine_page_count(engine: *const PspotEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.engine.index.catalog.pages.len())
}

unsafe fn run_query(
    engine: *const PspotEngine,
    query_id: *const c_char,
    out: *mut *mut PspotResults,
    image: impl FnOnce() -> Result<RawImage, PspotStatus>,
) -> PspotStatus {
    guard(|| {
        not_null(out, "out")?;
        *out = ptr::null_mut();
        let engine = engine
            .as_ref()
            .ok_or_else(|| fail(PspotStatus::InvalidArgument, "engine is null"))?;
        let id = str_arg(query_id, "query_id")?;
        let image = image()?;
        let mut result = None;
        check(engine.engine.spot(id, &image).map(|r| result = Some(r)))?;
        *out = Box::into_raw(into_results(result.expect("set on success")));
        Ok(())
    })
}

/// Runs a query read from an image file.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pspot_engine_spot_file(
    engine: *const PspotEngine,
    query_path: *const c_char,
    query_id: *const c_char,
    out: *mut *mut PspotResults,
) -> PspotStatus {
    run_query(engine, query_id, out, || {
        let path = str_arg(query_path, "query_path")?;
        load_image(Path::new(path)).map_err(|e| fail((&e).into(), e.to_string()))
    })
}

/// Runs a query given as packed 8-bit RGB rows, `row_stride` bytes apart.
///
/// # Safety
/// `pixels` must point to at least `row_stride * height` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn pspot_engine_spot_rgb(
    engine: *const PspotEngine,
    pixels: *const u8,
    width: u32,
    height: u32,
    row_stride: usize,
    query_id: *const c_char,
    out: *mut *mut PspotResults,
) -> PspotStatus {
    run_query(engine, query_id, out, || {
        not_null(pixels, "pixels")?;
        let row = width as usize * 3;
        if width == 0 || height == 0 || row_stride < row {
            return Err(fail(
                PspotStatus::InvalidArgument,
                format!("bad geometry {width}x{height}, stride {row_stride}"),
            ));
        }
        let src = std::slice::from_raw_parts(pixels, row_stride * (height as usize - 1) + row);
        let mut data = Vec::with_capacity(row * height as usize);
        for y in 0..height as usize {
            data.extend_from_slice(&src[y * row_stride..y * row_stride + row]);
        }
        Ok(RawImage::from_raw(width, height, data).expect("sized above"))
    })
}

/// # Safety
/// `results` must come from a spot call and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn pspot_results_free(results: *mut PspotResults) {
    if !results.is_null() {
        drop(Box::from_raw(results));
    }
}

/// # Safety
/// `results` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pspot_results_query_id(results: *const PspotResults) -> *const c_char {
    results.as_ref().map_or(ptr::null(), |r| r.query_id.as_ptr())
}

/// Pyramid level (3, 4 or 5) the query was searched at; 0 for a null handle.
///
/// # Safety
/// `results` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pspot_results_level(results: *const PspotResults) -> u8 {
    results.as_ref().map_or(0, |r| r.result.level_k)
}

/// # Safety
/// `results` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pspot_results_detection_count(results: *const PspotResults) -> usize {
    results.as_ref().map_or(0, |r| r.result.detections.len())
}

/// Detection `n` (0-based, in rank order) and, optionally, its page id.
///
/// # Safety
/// `results` must be a live handle, `out` valid; `page_id` may be null.
#[no_mangle]
pub unsafe extern "C" fn pspot_results_detection(
    results: *const PspotResults,
    n: usize,
    out: *mut PspotDetection,
    page_id: *mut *const c_char,
) -> PspotStatus {
    guard(|| {
        not_null(out, "out")?;
        let r = results
            .as_ref()
            .ok_or_else(|| fail(PspotStatus::InvalidArgument, "results is null"))?;
        let d = r
            .result
            .detections
            .get(n)
            .ok_or_else(|| fail(PspotStatus::InvalidArgument, format!("detection {n} out of range")))?;
        *out = PspotDetection {
            rank: d.rank as u32,
            page_index: d.page,
            bbox: PspotBox {
                x: d.bbox.x,
                y: d.bbox.y,
                w: d.bbox.w,
                h: d.bbox.h,
            },
            score: d.score,
        };
        if !page_id.is_null() {
            *page_id = r.detection_page_ids[n].as_ptr();
        }
        Ok(())
    })
}

/// # Safety
/// `results` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pspot_results_page_count(results: *const PspotResults) -> usize {
    results.as_ref().map_or(0, |r| r.result.pages.len())
}

/// Page hit `n` (0-based, in rank order) and, optionally, its page id.
///
/// # Safety
/// `results` must be a live handle, `out` valid; `page_id` may be null.
#[no_mangle]
pub unsafe extern "C" fn pspot_results_page(
    results: *const PspotResults,
    n: usize,
    out: *mut PspotPageHit,
    page_id: *mut *const c_char,
) -> PspotStatus {
    guard(|| {
        not_null(out, "out")?;
        let r = results
            .as_ref()
            .ok_or_else(|| fail(PspotStatus::InvalidArgument, "results is null"))?;
        let p = r
            .result
            .pages
            .get(n)
            .ok_or_else(|| fail(PspotStatus::InvalidArgument, format!("page hit {n} out of range")))?;
        let page_index = r
            .result
            .detections
            .iter()
            .find(|d| d.page_id == p.page_id)
            .map_or(u32::MAX, |d| d.page);
        *out = PspotPageHit {
            rank: p.rank as u32,
            page_index,
            score: p.score,
        };
        if !page_id.is_null() {
            *page_id = r.page_ids[n].as_ptr();
        }
        Ok(())
    })
}

/// Pyramid level for a `width x height` query, clamped to 3..=5.
#[no_mangle]
pub extern "C" fn pspot_assign_level(width: u32, height: u32, k0: i32) -> u8 {
    pspot::embedder::assign_level(width, height, k0)
}

/// Intersection over union; 0 when both boxes are empty.
#[no_mangle]
pub extern "C" fn pspot_iou(a: PspotBox, b: PspotBox) -> f64 {
    BBox::from(a).iou(&BBox::from(b))
}

/// Average precision of a ranked relevance list (`flags[i] != 0` = relevant)
/// with `num_relevant` relevant items in total.
///
/// # Safety
/// `flags` must point to `n` readable bytes (may be null when `n == 0`); `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pspot_average_precision(
    flags: *const u8,
    n: usize,
    num_relevant: usize,
    out: *mut f64,
) -> PspotStatus {
    guard(|| {
        not_null(out, "out")?;
        if n > 0 {
            not_null(flags, "flags")?;
        }
        let bools: Vec<bool> = if n == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(flags, n).iter().map(|&f| f != 0).collect()
        };
        let mut ap = 0.0;
        check(pspot::evalkit::average_precision(&bools, num_relevant).map(|v| ap = v))?;
        *out = ap;
        Ok(())
    })
}
