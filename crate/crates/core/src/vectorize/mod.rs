//! Mask to polygon conversion and ESRI Shapefile output.
//!
//! Foreground components use 4-connectivity and background components use
//! 8-connectivity, so every enclosed background region is a hole of exactly
//! one foreground component. Rings run along pixel edges and keep only the
//! corner vertices.

pub mod shapefile;

pub use self::shapefile::write_shapefile;

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{GeoTransform, RasterGrid};

pub type Ring = Vec<(f64, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct PolygonFeature {
    /// Closed, clockwise.
    pub outer_ring: Ring,
    /// Closed, counter-clockwise.
    pub holes: Vec<Ring>,
    pub id: u32,
    /// World units squared.
    pub area: f64,
    pub pixel_count: u64,
}

impl PolygonFeature {
    /// Bounding box `(xmin, ymin, xmax, ymax)` of the outer ring.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        ring_bounds(&self.outer_ring)
    }

    pub fn rings(&self) -> impl Iterator<Item = &Ring> {
        std::iter::once(&self.outer_ring).chain(&self.holes)
    }

    pub fn vertex_count(&self) -> usize {
        self.rings().map(Vec::len).sum()
    }
}

pub(crate) fn ring_bounds(ring: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    ring.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
    )
}

/// Shoelace area; negative for clockwise rings in a y-up frame.
///
/// Coordinates are taken relative to the first vertex so large map
/// coordinates do not cancel away the area.
pub fn signed_area(ring: &[(f64, f64)]) -> f64 {
    let Some(&(x0, y0)) = ring.first() else {
        return 0.0;
    };
    let rel = |&(x, y): &(f64, f64)| (x - x0, y - y0);
    let mut s = 0.0;
    for w in ring.windows(2) {
        let (a, b) = (rel(&w[0]), rel(&w[1]));
        s += a.0 * b.1 - b.0 * a.1;
    }
    s / 2.0
}

fn polygon_area(outer: &Ring, holes: &[Ring]) -> f64 {
    signed_area(outer).abs() - holes.iter().map(|h| signed_area(h).abs()).sum::<f64>()
}

/// Connected-component labels (1-based, raster order of first pixel); 0 = not in class.
fn label(fg: &[bool], w: usize, h: usize, want: bool, eight: bool) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; w * h];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if fg[start] != want || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (c, r) = ((i % w) as isize, (i / w) as isize);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if (dr == 0 && dc == 0) || (!eight && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (nc, nr) = (c + dc, r + dr);
                    if nc < 0 || nr < 0 || nc >= w as isize || nr >= h as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if fg[j] == want && labels[j] == 0 {
                        labels[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    (labels, next)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Dir {
    E,
    S,
    W,
    N,
}

impl Dir {
    fn step(self) -> (isize, isize) {
        match self {
            Dir::E => (1, 0),
            Dir::S => (0, 1),
            Dir::W => (-1, 0),
            Dir::N => (0, -1),
        }
    }

    fn right(self) -> Self {
        match self {
            Dir::E => Dir::S,
            Dir::S => Dir::W,
            Dir::W => Dir::N,
            Dir::N => Dir::E,
        }
    }

    fn left(self) -> Self {
        self.right().right().right()
    }

    /// Pixels ahead-left and ahead-right of vertex `(x, y)` (screen frame, y down).
    fn ahead(self, x: isize, y: isize) -> ((isize, isize), (isize, isize)) {
        match self {
            Dir::E => ((x, y - 1), (x, y)),
            Dir::S => ((x, y), (x - 1, y)),
            Dir::W => ((x - 1, y), (x - 1, y - 1)),
            Dir::N => ((x - 1, y - 1), (x, y - 1)),
        }
    }
}

/// Outer boundary of the pixel set `inside`, starting at the top-left corner of
/// `start` (its first pixel in raster order) and keeping the set on the right.
///
/// At a vertex where the set touches itself only diagonally, `join_diagonal`
/// decides whether the ring passes between the two pixels (joined) or wraps each
/// one separately. Returns closed pixel-corner coordinates.
fn trace_outer(inside: impl Fn(isize, isize) -> bool, start: (usize, usize), join_diagonal: bool) -> Vec<(isize, isize)> {
    let origin = (start.0 as isize, start.1 as isize);
    let (mut x, mut y) = origin;
    let mut dir = Dir::E;
    let mut ring = vec![origin];
    loop {
        let (dx, dy) = dir.step();
        x += dx;
        y += dy;
        let (l, r) = dir.ahead(x, y);
        let next = match (inside(l.0, l.1), inside(r.0, r.1)) {
            (false, true) => dir,
            (false, false) => dir.right(),
            (true, true) => dir.left(),
            (true, false) => {
                if join_diagonal {
                    dir.left()
                } else {
                    dir.right()
                }
            }
        };
        if (x, y) == origin && next == Dir::E {
            ring.push(origin);
            return ring;
        }
        if next != dir {
            ring.push((x, y));
            dir = next;
        }
    }
}

fn to_world(ring: &[(isize, isize)], gt: &GeoTransform, clockwise: bool) -> Ring {
    let mut out: Ring = ring.iter().map(|&(x, y)| gt.world(x as f64, y as f64)).collect();
    if (signed_area(&out) < 0.0) != clockwise {
        out.reverse();
    }
    out
}

/// Traces every 4-connected foreground component of a 0/255 mask.
///
/// Features are numbered from 1 in raster order of their first pixel.
pub fn trace_polygons(mask: &RasterGrid, gt: &GeoTransform) -> Result<Vec<PolygonFeature>> {
    if mask.bands() != 1 {
        return Err(Error::shape(format!("mask must have one band, got {}", mask.bands())));
    }
    gt.validate()?;
    let (w, h) = (mask.width(), mask.height());
    let samples = mask.samples();
    let fg = (0..w * h)
        .map(|i| match samples.get_f32(i) {
            0.0 => Ok(false),
            255.0 => Ok(true),
            v => Err(Error::NonBinaryInput(v as f64)),
        })
        .collect::<Result<Vec<bool>>>()?;
    let (fg_labels, n_fg) = label(&fg, w, h, true, false);
    let (bg_labels, n_bg) = label(&fg, w, h, false, true);

    // first pixel of each component, and whether a background component reaches the border
    let mut fg_first = vec![usize::MAX; n_fg as usize];
    let mut fg_count = vec![0u64; n_fg as usize];
    let mut bg_first = vec![usize::MAX; n_bg as usize];
    let mut bg_open = vec![false; n_bg as usize];
    for i in 0..w * h {
        let (c, r) = (i % w, i / w);
        if fg[i] {
            let k = fg_labels[i] as usize - 1;
            fg_count[k] += 1;
            if fg_first[k] == usize::MAX {
                fg_first[k] = i;
            }
        } else {
            let k = bg_labels[i] as usize - 1;
            if bg_first[k] == usize::MAX {
                bg_first[k] = i;
            }
            if c == 0 || r == 0 || c == w - 1 || r == h - 1 {
                bg_open[k] = true;
            }
        }
    }
    // an enclosed background region belongs to the component directly above its first pixel
    let mut holes_of: Vec<Vec<u32>> = vec![Vec::new(); n_fg as usize];
    for k in 0..n_bg as usize {
        if !bg_open[k] {
            let owner = fg_labels[bg_first[k] - w];
            debug_assert!(owner > 0);
            holes_of[owner as usize - 1].push(k as u32 + 1);
        }
    }

    let at = |labels: &Vec<u32>, id: u32, x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && labels[y as usize * w + x as usize] == id
    };
    (0..n_fg as usize)
        .into_par_iter()
        .map(|k| {
            let id = k as u32 + 1;
            let first = fg_first[k];
            let outer = trace_outer(|x, y| at(&fg_labels, id, x, y), (first % w, first / w), false);
            let outer = to_world(&outer, gt, true);
            let holes: Vec<Ring> = holes_of[k]
                .iter()
                .map(|&hid| {
                    let f = bg_first[hid as usize - 1];
                    let ring = trace_outer(|x, y| at(&bg_labels, hid, x, y), (f % w, f / w), true);
                    to_world(&ring, gt, false)
                })
                .collect();
            Ok(PolygonFeature {
                area: polygon_area(&outer, &holes),
                outer_ring: outer,
                holes,
                id,
                pixel_count: fg_count[k],
            })
        })
        .collect()
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn douglas_peucker(points: &[(f64, f64)], tol: f64, keep: &mut [bool]) {
    if points.len() < 3 {
        return;
    }
    let (a, b) = (points[0], points[points.len() - 1]);
    let (mut worst, mut at) = (0.0, 0);
    for (i, &p) in points.iter().enumerate().take(points.len() - 1).skip(1) {
        let d = point_segment_distance(p, a, b);
        if d > worst {
            worst = d;
            at = i;
        }
    }
    if worst > tol {
        keep[at] = true;
        douglas_peucker(&points[..=at], tol, &mut keep[..=at]);
        douglas_peucker(&points[at..], tol, &mut keep[at..]);
    }
}

/// Douglas–Peucker on a closed ring, anchored at the first vertex and the vertex farthest from it.
fn simplify_ring(ring: &Ring, tol: f64) -> Result<Ring> {
    let n = ring.len();
    if n < 4 {
        return Err(Error::DegenerateRing);
    }
    let first = ring[0];
    let far = (1..n - 1)
        .max_by(|&i, &j| {
            let d = |k: usize| (ring[k].0 - first.0).powi(2) + (ring[k].1 - first.1).powi(2);
            d(i).total_cmp(&d(j))
        })
        .expect("ring has interior vertices");
    let mut keep = vec![false; n];
    keep[0] = true;
    keep[far] = true;
    keep[n - 1] = true;
    douglas_peucker(&ring[..=far], tol, &mut keep[..=far]);
    douglas_peucker(&ring[far..], tol, &mut keep[far..]);
    let out: Ring = ring.iter().zip(&keep).filter(|(_, &k)| k).map(|(&p, _)| p).collect();
    if out.len() < 4 {
        return Err(Error::DegenerateRing);
    }
    Ok(out)
}

/// Simplifies every ring of `feature` with tolerance `tolerance` (world units).
///
/// Returns `DegenerateRing` if any ring would fall below four vertices; callers
/// keep the unsimplified feature in that case.
pub fn simplify(feature: &PolygonFeature, tolerance: f64) -> Result<PolygonFeature> {
    if !(tolerance >= 0.0) {
        return Err(Error::ConfigInvalid(format!("tolerance {tolerance} must be >= 0")));
    }
    if tolerance == 0.0 {
        return Ok(feature.clone());
    }
    let outer = simplify_ring(&feature.outer_ring, tolerance)?;
    let holes = feature
        .holes
        .iter()
        .map(|h| simplify_ring(h, tolerance))
        .collect::<Result<Vec<_>>>()?;
    // removing vertices can flip a near-degenerate ring
    if signed_area(&outer) >= 0.0 || holes.iter().any(|h| signed_area(h) <= 0.0) {
        return Err(Error::DegenerateRing);
    }
    Ok(PolygonFeature {
        area: polygon_area(&outer, &holes),
        outer_ring: outer,
        holes,
        ..feature.clone()
    })
}

/// [`simplify`], falling back to the original feature for degenerate rings.
pub fn simplify_or_keep(feature: &PolygonFeature, tolerance: f64) -> Result<PolygonFeature> {
    match simplify(feature, tolerance) {
        Err(Error::DegenerateRing) => Ok(feature.clone()),
        other => other,
    }
}
