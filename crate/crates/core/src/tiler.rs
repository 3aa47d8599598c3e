//! Overlapped patch extraction, scene regions and patch augmentation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geotiff::{read_geotiff, write_geotiff};
use crate::raster::{GeoTransform, RasterGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgePolicy {
    /// Append a final window flush with the far edge so every pixel is covered.
    Snap,
    /// Only regular stride positions; a remainder strip may be left uncovered.
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileSpec {
    pub patch_size: usize,
    pub stride: usize,
    pub edge_policy: EdgePolicy,
}

impl TileSpec {
    pub fn new(patch_size: usize, stride: usize, edge_policy: EdgePolicy) -> Result<Self> {
        let spec = Self {
            patch_size,
            stride,
            edge_policy,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Half-patch stride for training regions.
    pub fn training(patch_size: usize) -> Self {
        Self {
            patch_size,
            stride: (patch_size / 2).max(1),
            edge_policy: EdgePolicy::Snap,
        }
    }

    /// Seven-eighths stride for inference, i.e. one-eighth overlap.
    pub fn inference(patch_size: usize) -> Self {
        Self {
            patch_size,
            stride: (patch_size * 7 / 8).max(1),
            edge_policy: EdgePolicy::Snap,
        }
    }

    pub fn overlap(&self) -> usize {
        self.patch_size - self.stride
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::ConfigInvalid("patch size must be at least 1".into()));
        }
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::ConfigInvalid(format!(
                "stride {} must lie in 1..={}",
                self.stride, self.patch_size
            )));
        }
        Ok(())
    }
}

/// Start offsets of the windows along one axis.
pub fn enumerate_windows(region_len: usize, spec: &TileSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    if region_len < spec.patch_size {
        return Err(Error::RegionTooSmall {
            len: region_len,
            patch: spec.patch_size,
        });
    }
    let regular = (region_len - spec.patch_size) / spec.stride + 1;
    let mut offsets: Vec<usize> = (0..regular).map(|i| i * spec.stride).collect();
    let last_end = offsets[regular - 1] + spec.patch_size;
    if spec.edge_policy == EdgePolicy::Snap && last_end < region_len {
        offsets.push(region_len - spec.patch_size);
    }
    Ok(offsets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionRole {
    TrainLarge,
    TrainSmall,
    Validation,
    Test,
}

impl RegionRole {
    pub fn is_training(self) -> bool {
        matches!(self, RegionRole::TrainLarge | RegionRole::TrainSmall)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RegionRole::TrainLarge => "train_large",
            RegionRole::TrainSmall => "train_small",
            RegionRole::Validation => "validation",
            RegionRole::Test => "test",
        }
    }
}

impl fmt::Display for RegionRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegionRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train_large" => RegionRole::TrainLarge,
            "train_small" => RegionRole::TrainSmall,
            "validation" => RegionRole::Validation,
            "test" => RegionRole::Test,
            other => return Err(Error::ConfigInvalid(format!("unknown region role `{other}`"))),
        })
    }
}

/// Pixel window `(col_off, row_off, width, height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub col_off: usize,
    pub row_off: usize,
    pub width: usize,
    pub height: usize,
}

impl Window {
    pub fn new(col_off: usize, row_off: usize, width: usize, height: usize) -> Self {
        Self {
            col_off,
            row_off,
            width,
            height,
        }
    }

    pub fn full(grid: &RasterGrid) -> Self {
        Self::new(0, 0, grid.width(), grid.height())
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.width > 0
            && self.height > 0
            && self.col_off + self.width <= width
            && self.row_off + self.height <= height
    }

    pub fn intersects(&self, other: &Window) -> bool {
        self.col_off < other.col_off + other.width
            && other.col_off < self.col_off + self.width
            && self.row_off < other.row_off + other.height
            && other.row_off < self.row_off + self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub role: RegionRole,
    pub window: Window,
}

/// Checks that every region lies inside the raster and that regions with
/// different roles are disjoint.
pub fn validate_regions(regions: &[RegionSpec], width: usize, height: usize) -> Result<()> {
    for r in regions {
        if !r.window.fits(width, height) {
            return Err(Error::ConfigInvalid(format!(
                "region `{}` {:?} does not fit the {width}x{height} raster",
                r.name, r.window
            )));
        }
    }
    for (i, a) in regions.iter().enumerate() {
        for b in &regions[i + 1..] {
            if a.role != b.role && a.window.intersects(&b.window) {
                return Err(Error::ConfigInvalid(format!(
                    "regions `{}` ({}) and `{}` ({}) overlap",
                    a.name, a.role, b.name, b.role
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub parent_region: String,
    pub role: RegionRole,
    /// Window in parent raster pixels; always square.
    pub window: Window,
    pub image: RasterGrid,
    pub mask: Option<RasterGrid>,
    pub geo: GeoTransform,
}

/// Cuts one patch per window of the cartesian product of per-axis offsets,
/// in row-major order.
pub fn extract_patches(
    grid: &RasterGrid,
    gt: &GeoTransform,
    region: &RegionSpec,
    spec: &TileSpec,
    mask: Option<&RasterGrid>,
) -> Result<Vec<PatchRecord>> {
    if !region.window.fits(grid.width(), grid.height()) {
        return Err(Error::ConfigInvalid(format!(
            "region `{}` does not fit the raster",
            region.name
        )));
    }
    if let Some(m) = mask {
        if !m.same_dims(grid) {
            return Err(Error::shape("mask and image dimensions differ"));
        }
    }
    let w = region.window;
    let cols = enumerate_windows(w.width, spec)?;
    let rows = enumerate_windows(w.height, spec)?;
    let p = spec.patch_size;
    let mut out = Vec::with_capacity(cols.len() * rows.len());
    for &r in &rows {
        for &c in &cols {
            let (col, row) = (w.col_off + c, w.row_off + r);
            out.push(PatchRecord {
                parent_region: region.name.clone(),
                role: region.role,
                window: Window::new(col, row, p, p),
                image: grid.window(col, row, p, p)?,
                mask: mask.map(|m| m.window(col, row, p, p)).transpose()?,
                geo: gt.translated(col, row),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Rot90,
    Rot180,
    Rot270,
    Hflip,
    Vflip,
    BrightnessContrast,
}

/// Clockwise quarter turn.
pub fn rotate90(g: &RasterGrid) -> RasterGrid {
    let (w, h) = (g.width(), g.height());
    let mut out = RasterGrid::zeros(h, w, g.bands(), g.sample_type()).expect("valid dims");
    for r in 0..w {
        for c in 0..h {
            for b in 0..g.bands() {
                out.set(c, r, b, g.get(r, h - 1 - c, b));
            }
        }
    }
    out
}

pub fn hflip(g: &RasterGrid) -> RasterGrid {
    let w = g.width();
    g.map_pixels(|c, r, b, _| g.get(w - 1 - c, r, b))
}

pub fn vflip(g: &RasterGrid) -> RasterGrid {
    let h = g.height();
    g.map_pixels(|c, r, b, _| g.get(c, h - 1 - r, b))
}

fn geometric(g: &RasterGrid, op: AugmentOp) -> RasterGrid {
    match op {
        AugmentOp::Rot90 => rotate90(g),
        AugmentOp::Rot180 => rotate90(&rotate90(g)),
        AugmentOp::Rot270 => rotate90(&rotate90(&rotate90(g))),
        AugmentOp::Hflip => hflip(g),
        AugmentOp::Vflip => vflip(g),
        AugmentOp::BrightnessContrast => g.clone(),
    }
}

/// `pixel' = clamp(alpha*pixel + beta)` with alpha in [0.8, 1.2] and beta in
/// [-0.1, 0.1] of full scale.
pub fn brightness_contrast(g: &RasterGrid, rng: &mut impl Rng) -> RasterGrid {
    let alpha: f32 = rng.random_range(0.8..=1.2);
    let full = g.sample_type().full_scale();
    let beta: f32 = rng.random_range(-0.1..=0.1) * full;
    g.map_pixels(|_, _, _, v| (alpha * v + beta).clamp(0.0, full))
}

/// Returns the original patch followed by one augmented copy per op.
///
/// Geometric ops transform image and mask together; brightness/contrast
/// touches the image only. Deterministic for a fixed seed.
pub fn augment(patch: &PatchRecord, ops: &[AugmentOp], seed: u64) -> Result<Vec<PatchRecord>> {
    if let Some(m) = &patch.mask {
        if !m.same_dims(&patch.image) {
            return Err(Error::shape("patch image and mask differ in size"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![patch.clone()];
    for &op in ops {
        let mut p = patch.clone();
        if op == AugmentOp::BrightnessContrast {
            p.image = brightness_contrast(&patch.image, &mut rng);
        } else {
            p.image = geometric(&patch.image, op);
            p.mask = patch.mask.as_ref().map(|m| geometric(m, op));
        }
        out.push(p);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// on-disk patch sets

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Writes `image_####.tif` / `mask_####.tif` pairs plus a tab-separated index.
pub fn save_patch_set(dir: impl AsRef<Path>, patches: &[PatchRecord]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# index\tregion\trole\tcol_off\trow_off\tsize\timage\tmask\n");
    for (i, p) in patches.iter().enumerate() {
        let image_name = format!("image_{i:04}.tif");
        write_geotiff(&p.image, &p.geo, dir.join(&image_name))?;
        let mask_name = match &p.mask {
            Some(m) => {
                let name = format!("mask_{i:04}.tif");
                write_geotiff(m, &p.geo, dir.join(&name))?;
                name
            }
            None => "-".to_string(),
        };
        manifest.push_str(&format!(
            "{i}\t{}\t{}\t{}\t{}\t{}\t{image_name}\t{mask_name}\n",
            p.parent_region, p.role, p.window.col_off, p.window.row_off, p.window.width
        ));
    }
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn load_patch_set(dir: impl AsRef<Path>) -> Result<Vec<PatchRecord>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(Error::MalformedFile(format!("bad manifest line `{line}`")));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::MalformedFile(format!("bad number `{s}` in manifest")))
        };
        let (image, geo) = read_geotiff(dir.join(f[6]))?;
        let mask = match f[7] {
            "-" => None,
            name => Some(read_geotiff(dir.join(name))?.0),
        };
        let size = num(f[5])?;
        out.push(PatchRecord {
            parent_region: f[1].to_string(),
            role: f[2].parse()?,
            window: Window::new(num(f[3])?, num(f[4])?, size, size),
            image,
            mask,
            geo,
        });
    }
    Ok(out)
}
