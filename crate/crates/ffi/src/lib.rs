//! C ABI for campseg.
//!
//! Rasters and models are opaque heap handles created by `campseg_*` functions
//! and released with the matching `*_free`. Every fallible call returns a
//! [`CampsegStatus`]; the message of the most recent failure on the calling
//! thread is available from [`campseg_last_error`]. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use campseg::cli::{load_edsr, segment, PipelineConfig};
use campseg::geotiff::{read_geotiff, write_geotiff};
use campseg::metrics::{accumulate, ConfusionCounts};
use campseg::nn::{load_checkpoint, ModelCheckpoint};
use campseg::vectorize::{trace_polygons, write_shapefile};
use campseg::{Error, GeoTransform, RasterGrid};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CampsegStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    MalformedFile = 4,
    Unsupported = 5,
    InvalidConfig = 6,
    ShapeMismatch = 7,
    NonBinaryInput = 8,
    BufferTooSmall = 9,
    Panic = 10,
    Other = 11,
}

/// A raster with its georeference.
pub struct CampsegRaster {
    grid: RasterGrid,
    geo: GeoTransform,
}

/// A trained segmentation model bound to its pipeline configuration.
pub struct CampsegModel {
    cfg: PipelineConfig,
    ckpt: ModelCheckpoint,
    edsr: Option<ModelCheckpoint>,
}

/// Pixel confusion counts and derived scores; undefined scores are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CampsegMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CampsegStatus {
    match e {
        Error::Io { .. } => CampsegStatus::Io,
        Error::MalformedFile(_) | Error::VersionMismatch { .. } | Error::MissingGeoreference(_) => {
            CampsegStatus::MalformedFile
        }
        Error::UnsupportedFeature(_) => CampsegStatus::Unsupported,
        Error::ConfigInvalid(_) | Error::RegionTooSmall { .. } | Error::EmptyDataset(_) => CampsegStatus::InvalidConfig,
        Error::ShapeMismatch(_) | Error::IndivisibleDimensions { .. } | Error::IndivisibleChannels { .. } => {
            CampsegStatus::ShapeMismatch
        }
        Error::NonBinaryInput(_) => CampsegStatus::NonBinaryInput,
        _ => CampsegStatus::Other,
    }
}

enum Fail {
    Status(CampsegStatus, String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CampsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CampsegStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            CampsegStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(CampsegStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail::Status(CampsegStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn boxed<T>(value: T, out: *mut *mut T) {
    // SAFETY: callers checked `out` for null
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn campseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL, or
/// 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn campseg_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Reads a GeoTIFF (or plain TIFF with a world file).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn campseg_raster_read(path: *const c_char, out: *mut *mut CampsegRaster) -> CampsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (grid, geo) = read_geotiff(path_arg(path, "path")?)?;
        boxed(CampsegRaster { grid, geo }, out);
        Ok(())
    })
}

/// Wraps `width * height * bands` pixel-interleaved bytes with a north-up
/// georeference whose top-left corner is (`origin_x`, `origin_y`).
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn campseg_raster_from_u8(
    width: usize,
    height: usize,
    bands: usize,
    data: *const u8,
    len: usize,
    origin_x: f64,
    origin_y: f64,
    pixel_size: f64,
    out: *mut *mut CampsegRaster,
) -> CampsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if data.is_null() {
            return Err(null("data"));
        }
        let bytes = std::slice::from_raw_parts(data, len).to_vec();
        let grid = RasterGrid::from_u8(width, height, bands, bytes)?;
        let geo = GeoTransform::north_up(origin_x, origin_y, pixel_size);
        geo.validate()?;
        boxed(CampsegRaster { grid, geo }, out);
        Ok(())
    })
}

/// Writes a raster as GeoTIFF.
///
/// # Safety
/// `raster` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn campseg_raster_write(raster: *const CampsegRaster, path: *const c_char) -> CampsegStatus {
    guard(|| {
        let r = deref(raster, "raster")?;
        write_geotiff(&r.grid, &r.geo, path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Writes width, height and band count; any output pointer may be null.
///
/// # Safety
/// `raster` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn campseg_raster_dims(
    raster: *const CampsegRaster,
    width: *mut usize,
    height: *mut usize,
    bands: *mut usize,
) -> CampsegStatus {
    guard(|| {
        let r = deref(raster, "raster")?;
        for (p, v) in [(width, r.grid.width()), (height, r.grid.height()), (bands, r.grid.bands())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies 8-bit samples (pixel-interleaved) into `buf`.
///
/// # Safety
/// `raster` must be a live handle; `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn campseg_raster_copy_u8(raster: *const CampsegRaster, buf: *mut u8, len: usize) -> CampsegStatus {
    guard(|| {
        let r = deref(raster, "raster")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let src = r
            .grid
            .as_u8()
            .ok_or_else(|| Fail::Status(CampsegStatus::Unsupported, "raster is not 8-bit".into()))?;
        if len < src.len() {
            return Err(Fail::Status(
                CampsegStatus::BufferTooSmall,
                format!("buffer holds {len} bytes, raster needs {}", src.len()),
            ));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
        Ok(())
    })
}

/// Releases a raster; null is ignored.
///
/// # Safety
/// `raster` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn campseg_raster_free(raster: *mut CampsegRaster) {
    if !raster.is_null() {
        drop(Box::from_raw(raster));
    }
}

/// Loads a pipeline config and trained segmentation parameters.
///
/// # Safety
/// `config_path` and `checkpoint_path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn campseg_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut CampsegModel,
) -> CampsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = PipelineConfig::load(&path_arg(config_path, "config_path")?)?;
        cfg.validate()?;
        let ckpt = load_checkpoint(&path_arg(checkpoint_path, "checkpoint_path")?)?;
        let edsr = load_edsr(&cfg)?;
        boxed(CampsegModel { cfg, ckpt, edsr }, out);
        Ok(())
    })
}

/// Segments a whole raster with sliding-window inference. The mask (0/255)
/// is georeferenced at the segmentation resolution.
///
/// # Safety
/// `model` and `image` must be live handles; `out_mask` writable.
#[no_mangle]
pub unsafe extern "C" fn campseg_model_segment(
    model: *const CampsegModel,
    image: *const CampsegRaster,
    out_mask: *mut *mut CampsegRaster,
) -> CampsegStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let img = deref(image, "image")?;
        if out_mask.is_null() {
            return Err(null("out_mask"));
        }
        let grid = segment(&m.cfg, &m.ckpt, m.edsr.as_ref(), &img.grid)?;
        let geo = img.geo.upscaled(m.cfg.upscale.effective_factor());
        boxed(CampsegRaster { grid, geo }, out_mask);
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn campseg_model_free(model: *mut CampsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Pixel metrics of a predicted mask against a truth mask (both 0/255).
///
/// # Safety
/// `pred` and `truth` must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn campseg_mask_metrics(
    pred: *const CampsegRaster,
    truth: *const CampsegRaster,
    out: *mut CampsegMetrics,
) -> CampsegStatus {
    guard(|| {
        let p = deref(pred, "pred")?;
        let t = deref(truth, "truth")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let c = accumulate(&p.grid, &t.grid, ConfusionCounts::default())?;
        let s = c.scores();
        *out = CampsegMetrics {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
            iou: s.iou.unwrap_or(f64::NAN),
            f1: s.f1.unwrap_or(f64::NAN),
            precision: s.precision.unwrap_or(f64::NAN),
            recall: s.recall.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Traces a 0/255 mask into polygons and writes `<base>.shp/.shx/.dbf`
/// (plus `.prj` when the raster carries a CRS). `feature_count` may be null.
///
/// # Safety
/// `mask` must be a live handle; `base_path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn campseg_mask_to_shapefile(
    mask: *const CampsegRaster,
    base_path: *const c_char,
    feature_count: *mut usize,
) -> CampsegStatus {
    guard(|| {
        let m = deref(mask, "mask")?;
        let base = path_arg(base_path, "base_path")?;
        let features = trace_polygons(&m.grid, &m.geo)?;
        write_shapefile(&features, m.geo.crs_text.as_deref(), &base)?;
        if !feature_count.is_null() {
            *feature_count = features.len();
        }
        Ok(())
    })
}
