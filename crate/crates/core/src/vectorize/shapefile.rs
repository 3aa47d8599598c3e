//! ESRI Shapefile writer for polygon features (`.shp`, `.shx`, `.dbf`, `.prj`).
//!
//! Integers in the file headers and record headers are big-endian; everything
//! else is little-endian. Lengths and offsets count 16-bit words.

use std::path::{Path, PathBuf};

use super::{ring_bounds, PolygonFeature};
use crate::error::{Error, Result};

pub const FILE_CODE: i32 = 9994;
pub const VERSION: i32 = 1000;
pub const SHAPE_POLYGON: i32 = 5;
const HEADER_BYTES: usize = 100;

/// dBase last-update stamp (YY since 1900, MM, DD); fixed so output is reproducible.
const DBF_DATE: [u8; 3] = [100, 1, 1];

/// `(name, width, decimals)` of the attribute columns.
const FIELDS: [(&str, u8, u8); 3] = [("id", 10, 0), ("area", 19, 6), ("px_count", 10, 0)];

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn header(file_words: usize, bbox: (f64, f64, f64, f64)) -> Vec<u8> {
    let mut h = Vec::with_capacity(HEADER_BYTES);
    h.extend_from_slice(&FILE_CODE.to_be_bytes());
    h.extend_from_slice(&[0u8; 20]);
    h.extend_from_slice(&(file_words as i32).to_be_bytes());
    h.extend_from_slice(&VERSION.to_le_bytes());
    h.extend_from_slice(&SHAPE_POLYGON.to_le_bytes());
    for v in [bbox.0, bbox.1, bbox.2, bbox.3, 0.0, 0.0, 0.0, 0.0] {
        h.extend_from_slice(&v.to_le_bytes());
    }
    h
}

fn polygon_content(f: &PolygonFeature) -> Vec<u8> {
    let bbox = f.bounds();
    let rings: Vec<_> = f.rings().collect();
    let points: usize = rings.iter().map(|r| r.len()).sum();
    let mut c = Vec::with_capacity(44 + 4 * rings.len() + 16 * points);
    c.extend_from_slice(&SHAPE_POLYGON.to_le_bytes());
    for v in [bbox.0, bbox.1, bbox.2, bbox.3] {
        c.extend_from_slice(&v.to_le_bytes());
    }
    c.extend_from_slice(&(rings.len() as i32).to_le_bytes());
    c.extend_from_slice(&(points as i32).to_le_bytes());
    let mut start = 0i32;
    for r in &rings {
        c.extend_from_slice(&start.to_le_bytes());
        start += r.len() as i32;
    }
    for r in &rings {
        for &(x, y) in r.iter() {
            c.extend_from_slice(&x.to_le_bytes());
            c.extend_from_slice(&y.to_le_bytes());
        }
    }
    c
}

fn numeric(value: String, width: u8) -> Result<Vec<u8>> {
    if value.len() > width as usize {
        return Err(Error::ConfigInvalid(format!(
            "attribute value {value} does not fit a {width}-character field"
        )));
    }
    Ok(format!("{value:>w$}", w = width as usize).into_bytes())
}

fn dbf(features: &[PolygonFeature]) -> Result<Vec<u8>> {
    let record_len: usize = 1 + FIELDS.iter().map(|f| f.1 as usize).sum::<usize>();
    let header_len = 32 + 32 * FIELDS.len() + 1;
    let mut d = Vec::with_capacity(header_len + record_len * features.len() + 1);
    d.push(0x03);
    d.extend_from_slice(&DBF_DATE);
    d.extend_from_slice(&(features.len() as u32).to_le_bytes());
    d.extend_from_slice(&(header_len as u16).to_le_bytes());
    d.extend_from_slice(&(record_len as u16).to_le_bytes());
    d.extend_from_slice(&[0u8; 20]);
    for (name, width, decimals) in FIELDS {
        let mut n = [0u8; 11];
        n[..name.len()].copy_from_slice(name.as_bytes());
        d.extend_from_slice(&n);
        d.push(b'N');
        d.extend_from_slice(&[0u8; 4]);
        d.push(width);
        d.push(decimals);
        d.extend_from_slice(&[0u8; 14]);
    }
    d.push(0x0D);
    for f in features {
        d.push(b' ');
        d.extend(numeric(f.id.to_string(), FIELDS[0].1)?);
        d.extend(numeric(format!("{:.6}", f.area), FIELDS[1].1)?);
        d.extend(numeric(f.pixel_count.to_string(), FIELDS[2].1)?);
    }
    d.push(0x1A);
    Ok(d)
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<()> {
    std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `base.shp`, `base.shx`, `base.dbf` and, when `crs_text` is given,
/// `base.prj` (the text verbatim). An empty feature list yields a valid file
/// set with zero records.
pub fn write_shapefile(features: &[PolygonFeature], crs_text: Option<&str>, base: &Path) -> Result<()> {
    let contents: Vec<Vec<u8>> = features.iter().map(polygon_content).collect();
    let bbox = if features.is_empty() {
        (0.0, 0.0, 0.0, 0.0)
    } else {
        features.iter().map(|f| ring_bounds(&f.outer_ring)).fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |a, b| (a.0.min(b.0), a.1.min(b.1), a.2.max(b.2), a.3.max(b.3)),
        )
    };
    let shp_len = HEADER_BYTES + contents.iter().map(|c| 8 + c.len()).sum::<usize>();
    let shx_len = HEADER_BYTES + 8 * contents.len();
    let mut shp = header(shp_len / 2, bbox);
    let mut shx = header(shx_len / 2, bbox);
    for (i, c) in contents.iter().enumerate() {
        let offset_words = (shp.len() / 2) as i32;
        let len_words = (c.len() / 2) as i32;
        shx.extend_from_slice(&offset_words.to_be_bytes());
        shx.extend_from_slice(&len_words.to_be_bytes());
        shp.extend_from_slice(&(i as i32 + 1).to_be_bytes());
        shp.extend_from_slice(&len_words.to_be_bytes());
        shp.extend_from_slice(c);
    }
    debug_assert_eq!(shp.len(), shp_len);
    write(with_ext(base, "shp"), &shp)?;
    write(with_ext(base, "shx"), &shx)?;
    write(with_ext(base, "dbf"), &dbf(features)?)?;
    let prj = with_ext(base, "prj");
    match crs_text {
        Some(text) => write(prj, text.as_bytes())?,
        None if prj.exists() => std::fs::remove_file(&prj).map_err(|e| Error::io(prj, e))?,
        None => {}
    }
    Ok(())
}
