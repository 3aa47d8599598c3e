use std::ffi::{CStr, CString};
use std::ptr;

use campseg_ffi::*;

fn cpath(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { campseg_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn square_mask() -> *mut CampsegRaster {
    let mut data = vec![0u8; 64];
    for r in 2..5 {
        for c in 3..6 {
            data[r * 8 + c] = 255;
        }
    }
    let mut out = ptr::null_mut();
    let s = unsafe { campseg_raster_from_u8(8, 8, 1, data.as_ptr(), data.len(), 100.0, 200.0, 0.5, &mut out) };
    assert_eq!(s, CampsegStatus::Ok);
    out
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(campseg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn raster_round_trip_through_geotiff() {
    let dir = tempfile::tempdir().unwrap();
    let path = cpath(&dir.path().join("m.tif"));
    let mask = square_mask();
    unsafe {
        assert_eq!(campseg_raster_write(mask, path.as_ptr()), CampsegStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(campseg_raster_read(path.as_ptr(), &mut back), CampsegStatus::Ok);
        let (mut w, mut h, mut b) = (0, 0, 0);
        assert_eq!(campseg_raster_dims(back, &mut w, &mut h, &mut b), CampsegStatus::Ok);
        assert_eq!((w, h, b), (8, 8, 1));
        let mut a = vec![0u8; 64];
        let mut c = vec![0u8; 64];
        assert_eq!(campseg_raster_copy_u8(mask, a.as_mut_ptr(), 64), CampsegStatus::Ok);
        assert_eq!(campseg_raster_copy_u8(back, c.as_mut_ptr(), 64), CampsegStatus::Ok);
        assert_eq!(a, c);
        assert_eq!(campseg_raster_copy_u8(back, c.as_mut_ptr(), 10), CampsegStatus::BufferTooSmall);
        campseg_raster_free(back);
        campseg_raster_free(mask);
    }
}

#[test]
fn self_metrics_are_perfect() {
    let mask = square_mask();
    let mut m = CampsegMetrics::default();
    unsafe {
        assert_eq!(campseg_mask_metrics(mask, mask, &mut m), CampsegStatus::Ok);
        campseg_raster_free(mask);
    }
    assert_eq!((m.tp, m.fp, m.fn_, m.tn), (9, 0, 0, 55));
    assert_eq!(m.iou, 1.0);
}

#[test]
fn empty_masks_give_nan_scores() {
    let data = vec![0u8; 4];
    let mut r = ptr::null_mut();
    let mut m = CampsegMetrics::default();
    unsafe {
        assert_eq!(campseg_raster_from_u8(2, 2, 1, data.as_ptr(), 4, 0.0, 0.0, 1.0, &mut r), CampsegStatus::Ok);
        assert_eq!(campseg_mask_metrics(r, r, &mut m), CampsegStatus::Ok);
        campseg_raster_free(r);
    }
    assert!(m.iou.is_nan());
    assert_eq!(m.tn, 4);
}

#[test]
fn shapefile_export_counts_features() {
    let dir = tempfile::tempdir().unwrap();
    let base = cpath(&dir.path().join("square"));
    let mask = square_mask();
    let mut n = 0usize;
    unsafe {
        assert_eq!(campseg_mask_to_shapefile(mask, base.as_ptr(), &mut n), CampsegStatus::Ok);
        campseg_raster_free(mask);
    }
    assert_eq!(n, 1);
    for ext in ["shp", "shx", "dbf"] {
        assert!(dir.path().join(format!("square.{ext}")).exists());
    }
}

#[test]
fn errors_are_reported() {
    let mut out = ptr::null_mut();
    let missing = CString::new("/nonexistent/x.tif").unwrap();
    unsafe {
        assert_eq!(campseg_raster_read(missing.as_ptr(), &mut out), CampsegStatus::Io);
        assert!(out.is_null());
        assert!(last_error().contains("x.tif"));
        assert_eq!(campseg_raster_read(ptr::null(), &mut out), CampsegStatus::NullArgument);
        assert!(last_error().contains("path"));
        let data = [0u8, 7, 0, 255];
        assert_eq!(campseg_raster_from_u8(2, 2, 1, data.as_ptr(), 4, 0.0, 0.0, 1.0, &mut out), CampsegStatus::Ok);
        let base = CString::new("/tmp/never").unwrap();
        assert_eq!(
            campseg_mask_to_shapefile(out, base.as_ptr(), ptr::null_mut()),
            CampsegStatus::NonBinaryInput
        );
        campseg_raster_free(out);
        assert_eq!(
            campseg_raster_from_u8(3, 3, 1, data.as_ptr(), 4, 0.0, 0.0, 1.0, &mut out),
            CampsegStatus::ShapeMismatch
        );
        campseg_model_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/campseg.h")).unwrap();
    for name in [
        "campseg_version",
        "campseg_last_error",
        "campseg_raster_read",
        "campseg_raster_from_u8",
        "campseg_raster_write",
        "campseg_raster_dims",
        "campseg_raster_copy_u8",
        "campseg_raster_free",
        "campseg_model_load",
        "campseg_model_segment",
        "campseg_model_free",
        "campseg_mask_metrics",
        "campseg_mask_to_shapefile",
        "CAMPSEG_STATUS_OK",
        "typedef struct CampsegRaster CampsegRaster",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
