//! Procedural camp scenes with ground-truth dwelling masks.
//!
//! Scenes are a smoothed random soil field with rectangular, circular and
//! L-shaped roofs dropped on it, each casting a short shadow. A configurable
//! share of roofs is tinted like the surrounding ground, and vegetation blobs
//! can hide parts of roofs (hidden pixels are background in the mask).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{GeoTransform, RasterGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub dwelling_count: usize,
    /// Inclusive side length (or diameter) range in pixels.
    pub dwelling_size_range: (usize, usize),
    /// Fractions of rectangle, circle and L-shape roofs.
    pub shape_mix: [f64; 3],
    pub background_texture_scale: usize,
    pub occluder_fraction: f64,
    /// Fraction of roofs whose intensity is drawn from the local background.
    pub camouflage_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub origin: (f64, f64),
    pub pixel_size: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            dwelling_count: 60,
            dwelling_size_range: (6, 14),
            shape_mix: [0.6, 0.2, 0.2],
            background_texture_scale: 16,
            occluder_fraction: 0.1,
            camouflage_fraction: 0.1,
            noise_sigma: 6.0,
            seed: 0,
            origin: (500_000.0, 1_000_000.0),
            pixel_size: 0.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(format!("scene: {m}")));
        if self.width == 0 || self.height == 0 {
            return bad("dimensions must be positive");
        }
        let (lo, hi) = self.dwelling_size_range;
        if lo == 0 || hi < lo {
            return bad("dwelling size range must be positive and ordered");
        }
        if hi + 2 > self.width.min(self.height) && self.dwelling_count > 0 {
            return bad("dwellings do not fit in the scene");
        }
        if self.shape_mix.iter().any(|f| !(0.0..=1.0).contains(f))
            || (self.shape_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("shape mix fractions must lie in [0,1] and sum to 1");
        }
        for (name, f) in [
            ("occluder_fraction", self.occluder_fraction),
            ("camouflage_fraction", self.camouflage_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(&format!("{name} must lie in [0,1]"));
            }
        }
        if self.background_texture_scale == 0 {
            return bad("background texture scale must be positive");
        }
        if !(self.noise_sigma >= 0.0) || !(self.pixel_size > 0.0) {
            return bad("noise sigma must be >= 0 and pixel size > 0");
        }
        Ok(())
    }

    /// Expected foreground fraction if every dwelling is placed and none is occluded.
    pub fn expected_foreground_fraction(&self) -> f64 {
        let (lo, hi) = self.dwelling_size_range;
        let mean = (lo + hi) as f64 / 2.0;
        let n = (hi - lo + 1) as f64;
        let mean_sq = (lo..=hi).map(|s| (s * s) as f64).sum::<f64>() / n;
        let [rect, circle, ell] = self.shape_mix;
        let area = rect * mean * mean + circle * std::f64::consts::FRAC_PI_4 * mean_sq + ell * 0.75 * mean * mean;
        self.dwelling_count as f64 * area / (self.width * self.height) as f64
    }

    pub fn geotransform(&self) -> GeoTransform {
        GeoTransform::north_up(self.origin.0, self.origin.1, self.pixel_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Rectangle,
    Circle,
    Ell { corner: u8 },
}

struct Footprint {
    col: usize,
    row: usize,
    w: usize,
    h: usize,
    shape: Shape,
}

impl Footprint {
    fn contains(&self, c: usize, r: usize) -> bool {
        if c < self.col || r < self.row || c >= self.col + self.w || r >= self.row + self.h {
            return false;
        }
        let (x, y) = (c - self.col, r - self.row);
        match self.shape {
            Shape::Rectangle => true,
            Shape::Circle => {
                let rad = self.w as f64 / 2.0;
                let dx = x as f64 + 0.5 - rad;
                let dy = y as f64 + 0.5 - rad;
                dx * dx + dy * dy <= rad * rad
            }
            Shape::Ell { corner } => {
                let right = x >= self.w / 2;
                let bottom = y >= self.h / 2;
                let cut = match corner {
                    0 => !right && !bottom,
                    1 => right && !bottom,
                    2 => !right && bottom,
                    _ => right && bottom,
                };
                !cut
            }
        }
    }

    fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row..self.row + self.h)
            .flat_map(move |r| (self.col..self.col + self.w).map(move |c| (c, r)))
            .filter(move |&(c, r)| self.contains(c, r))
    }
}

fn lattice_noise(w: usize, h: usize, scale: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let gw = w / scale + 2;
    let gh = h / scale + 2;
    let lattice: Vec<f32> = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0f32; w * h];
    for r in 0..h {
        let fy = r as f32 / scale as f32;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for c in 0..w {
            let fx = c as f32 / scale as f32;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |x: usize, y: usize| lattice[y * gw + x];
            let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
            let bot = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
            out[r * w + c] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// A generated scene: 3-band image, binary mask (0/255) and georeference.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RasterGrid,
    pub mask: RasterGrid,
    pub geo: GeoTransform,
    /// Number of dwellings actually placed (placement may give up in crowded scenes).
    pub placed: usize,
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // soil: two octaves of value noise, shared across bands with a per-band tint
    let coarse = lattice_noise(w, h, cfg.background_texture_scale, &mut rng);
    let fine = lattice_noise(w, h, (cfg.background_texture_scale / 4).max(1), &mut rng);
    let soil = [150.0f32, 128.0, 100.0];
    let mut img = vec![0.0f32; w * h * 3];
    for p in 0..w * h {
        let v = 34.0 * coarse[p] + 12.0 * fine[p];
        for b in 0..3 {
            img[p * 3 + b] = soil[b] + v * (1.0 - 0.1 * b as f32);
        }
    }

    // placement with a one-pixel moat so roofs never touch, even diagonally
    let mut occupied = vec![false; w * h];
    let mut prints: Vec<Footprint> = Vec::new();
    let (lo, hi) = cfg.dwelling_size_range;
    for _ in 0..cfg.dwelling_count {
        for _attempt in 0..200 {
            let u: f64 = rng.random();
            let shape = if u < cfg.shape_mix[0] {
                Shape::Rectangle
            } else if u < cfg.shape_mix[0] + cfg.shape_mix[1] {
                Shape::Circle
            } else {
                Shape::Ell { corner: rng.random_range(0..4) }
            };
            let (fw, fh) = match shape {
                Shape::Circle => {
                    let d = rng.random_range(lo..=hi);
                    (d, d)
                }
                _ => (rng.random_range(lo..=hi), rng.random_range(lo..=hi)),
            };
            if fw + 2 > w || fh + 2 > h {
                continue;
            }
            let fp = Footprint {
                col: rng.random_range(1..=w - fw - 1),
                row: rng.random_range(1..=h - fh - 1),
                w: fw,
                h: fh,
                shape,
            };
            let clash = fp.pixels().any(|(c, r)| {
                (r - 1..=r + 1).any(|rr| (c - 1..=c + 1).any(|cc| occupied[rr * w + cc]))
            });
            if clash {
                continue;
            }
            for (c, r) in fp.pixels() {
                occupied[r * w + c] = true;
            }
            prints.push(fp);
            break;
        }
    }

    let mut mask = vec![0u8; w * h];
    // shadows first so that roofs always win
    for fp in &prints {
        for (c, r) in fp.pixels() {
            for (dc, dr) in [(1usize, 1usize), (1, 0), (0, 1)] {
                let (cc, rr) = (c + dc, r + dr);
                if cc < w && rr < h && !fp.contains(cc, rr) {
                    for b in 0..3 {
                        img[(rr * w + cc) * 3 + b] *= 0.8;
                    }
                }
            }
        }
    }
    for fp in &prints {
        let camouflaged = rng.random::<f64>() < cfg.camouflage_fraction;
        let roof: [f32; 3] = if camouflaged {
            let (c, r) = (fp.col + fp.w / 2, fp.row + fp.h / 2);
            let base = (r * w + c) * 3;
            let j: f32 = rng.random_range(-12.0..12.0);
            [img[base] + j, img[base + 1] + j, img[base + 2] + j]
        } else {
            match rng.random_range(0..3) {
                0 => {
                    let g = rng.random_range(205.0..240.0);
                    [g, g, g - 5.0]
                }
                1 => [rng.random_range(40.0..80.0), rng.random_range(80.0..120.0), rng.random_range(160.0..210.0)],
                _ => [rng.random_range(180.0..215.0), rng.random_range(170.0..200.0), rng.random_range(150.0..180.0)],
            }
        };
        for (c, r) in fp.pixels() {
            let grain: f32 = rng.random_range(-4.0..4.0);
            for b in 0..3 {
                img[(r * w + c) * 3 + b] = roof[b] + grain;
            }
            mask[r * w + c] = 255;
        }
    }

    // vegetation hides whatever is underneath, including roof pixels
    let occluders = (cfg.occluder_fraction * prints.len() as f64).round() as usize;
    for _ in 0..occluders {
        let fp = &prints[rng.random_range(0..prints.len())];
        let cx = rng.random_range(fp.col..fp.col + fp.w) as f64 + 0.5;
        let cy = rng.random_range(fp.row..fp.row + fp.h) as f64 + 0.5;
        let rad = fp.w.max(fp.h) as f64 * rng.random_range(0.3..0.7);
        let green = [rng.random_range(50.0..80.0), rng.random_range(95.0..130.0), rng.random_range(40.0..65.0)];
        let r0 = (cy - rad).floor().max(0.0) as usize;
        let r1 = ((cy + rad).ceil() as usize).min(h);
        let c0 = (cx - rad).floor().max(0.0) as usize;
        let c1 = ((cx + rad).ceil() as usize).min(w);
        for r in r0..r1 {
            for c in c0..c1 {
                let (dx, dy) = (c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= rad * rad {
                    let leaf: f32 = rng.random_range(-10.0..10.0);
                    for b in 0..3 {
                        img[(r * w + c) * 3 + b] = green[b] + leaf;
                    }
                    mask[r * w + c] = 0;
                }
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
        for v in img.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    let image: Vec<u8> = img.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();

    Ok(Scene {
        image: RasterGrid::from_u8(w, h, 3, image)?,
        mask: RasterGrid::from_u8(w, h, 1, mask)?,
        geo: cfg.geotransform(),
        placed: prints.len(),
    })
}

/// Box-average downsampling by an integer factor.
pub fn degrade(image: &RasterGrid, factor: usize) -> Result<RasterGrid> {
    let (w, h) = (image.width(), image.height());
    if factor < 2 || w % factor != 0 || h % factor != 0 {
        return Err(Error::IndivisibleDimensions {
            width: w,
            height: h,
            factor,
        });
    }
    let (ow, oh, bands) = (w / factor, h / factor, image.bands());
    let n = (factor * factor) as f64;
    let mut out = RasterGrid::zeros(ow, oh, bands, image.sample_type())?;
    for r in 0..oh {
        for c in 0..ow {
            for b in 0..bands {
                let mut sum = 0.0f64;
                for dr in 0..factor {
                    for dc in 0..factor {
                        sum += image.get(c * factor + dc, r * factor + dr, b) as f64;
                    }
                }
                out.set(c, r, b, (sum / n) as f32);
            }
        }
    }
    Ok(out)
}
