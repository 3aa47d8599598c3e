//! Helpers shared by the integration suites.
#![allow(dead_code)]

use std::path::Path;

use shapefile::dbase::{FieldValue, Record};
use shapefile::{Polygon, PolygonRing};

/// One polygon as seen by an independent shapefile reader.
#[derive(Debug)]
pub struct ReadBack {
    pub outer_rings: usize,
    pub inner_rings: usize,
    pub points: usize,
    pub bbox: [f64; 4],
    pub id: f64,
    pub area: f64,
    pub pixel_count: f64,
}

fn numeric(r: &Record, name: &str) -> f64 {
    match r.get(name) {
        Some(FieldValue::Numeric(Some(v))) => *v,
        other => panic!("field {name}: {other:?}"),
    }
}

pub fn read_shapefile(base: &Path) -> Vec<ReadBack> {
    let mut reader = shapefile::Reader::from_path(base.with_extension("shp")).expect("open shapefile");
    reader
        .iter_shapes_and_records_as::<Polygon, Record>()
        .map(|item| {
            let (poly, rec) = item.expect("read record");
            let (mut outer, mut inner, mut points) = (0, 0, 0);
            for ring in poly.rings() {
                match ring {
                    PolygonRing::Outer(p) => {
                        outer += 1;
                        points += p.len();
                    }
                    PolygonRing::Inner(p) => {
                        inner += 1;
                        points += p.len();
                    }
                }
            }
            let b = poly.bbox();
            ReadBack {
                outer_rings: outer,
                inner_rings: inner,
                points,
                bbox: [b.min.x, b.min.y, b.max.x, b.max.y],
                id: numeric(&rec, "id"),
                area: numeric(&rec, "area"),
                pixel_count: numeric(&rec, "px_count"),
            }
        })
        .collect()
}
