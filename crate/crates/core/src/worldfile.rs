//! ESRI world files (`.tfw` / `.wld`).
//!
//! Six lines: pixel width, row rotation, column rotation, pixel height, and
//! the world coordinate of the *center* of the top-left pixel. The shift to
//! the corner-origin [`GeoTransform`] happens here and nowhere else.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::GeoTransform;

pub fn parse_world_file(text: &str) -> Result<GeoTransform> {
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.len() != 6 {
        return Err(Error::MalformedFile(format!(
            "world file must have 6 lines, found {}",
            lines.len()
        )));
    }
    let mut v = [0.0f64; 6];
    for (slot, line) in v.iter_mut().zip(&lines) {
        *slot = line
            .parse()
            .map_err(|_| Error::MalformedFile(format!("non-numeric world file line `{line}`")))?;
    }
    let [a, d, b, e, c, f] = v;
    let gt = GeoTransform {
        origin_x: c - 0.5 * a - 0.5 * b,
        origin_y: f - 0.5 * d - 0.5 * e,
        pixel_width: a,
        pixel_height: e,
        row_rotation: d,
        col_rotation: b,
        crs_text: None,
    };
    if a == 0.0 || e == 0.0 {
        return Err(Error::MalformedFile("world file has zero pixel size".into()));
    }
    Ok(gt)
}

pub fn format_world_file(gt: &GeoTransform) -> String {
    let (cx, cy) = gt.world(0.5, 0.5);
    [gt.pixel_width, gt.row_rotation, gt.col_rotation, gt.pixel_height, cx, cy]
        .iter()
        .map(|v| format!("{v:?}\n"))
        .collect()
}

pub fn read_world_file(path: impl AsRef<Path>) -> Result<GeoTransform> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_world_file(&text)
}

pub fn write_world_file(gt: &GeoTransform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_world_file(gt)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_to_corner_shift() {
        let gt = parse_world_file("0.5\n0\n0\n-0.5\n100.25\n199.75\n").unwrap();
        assert_eq!(gt.origin_x, 100.0);
        assert_eq!(gt.origin_y, 200.0);
        assert_eq!(gt.pixel_width, 0.5);
        assert_eq!(gt.pixel_height, -0.5);
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tfw");
        let gt = GeoTransform {
            row_rotation: 0.01,
            col_rotation: -0.02,
            ..GeoTransform::north_up(431_234.125, 5_123_456.75, 0.3)
        };
        write_world_file(&gt, &path).unwrap();
        let back = read_world_file(&path).unwrap();
        for (x, y) in [
            (back.origin_x, gt.origin_x),
            (back.origin_y, gt.origin_y),
            (back.pixel_width, gt.pixel_width),
            (back.pixel_height, gt.pixel_height),
            (back.row_rotation, gt.row_rotation),
            (back.col_rotation, gt.col_rotation),
        ] {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(
            parse_world_file("0.5\n0\n0\n-0.5\n100.25\n"),
            Err(Error::MalformedFile(_))
        ));
        assert!(matches!(
            parse_world_file("0.5\n0\nzero\n-0.5\n100.25\n1\n"),
            Err(Error::MalformedFile(_))
        ));
    }
}
