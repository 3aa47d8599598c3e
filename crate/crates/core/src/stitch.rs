//! Sliding-window inference over whole scenes.
//!
//! Every tile position from the tiler is evaluated and each pixel's logit is
//! the mean over all tiles covering it. Tiles run in parallel; their results
//! are summed into the canvas in tile order so the output never depends on
//! scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelCheckpoint, ModelSpec, Tensor};
use crate::raster::RasterGrid;
use crate::tiler::{enumerate_windows, EdgePolicy, TileSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StitchSpec {
    pub tile: TileSpec,
    #[serde(default)]
    pub blend: Blend,
    /// Probability at or above which a pixel is foreground.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

/// How overlapping tile predictions are merged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blend {
    #[default]
    MeanLogits,
}

fn default_threshold() -> f64 {
    0.5
}

impl StitchSpec {
    pub fn new(tile: TileSpec) -> Self {
        Self {
            tile,
            blend: Blend::MeanLogits,
            threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tile.validate()?;
        if self.tile.edge_policy != EdgePolicy::Snap {
            return Err(Error::ConfigInvalid(
                "stitching needs edge_policy = \"snap\" so every pixel is covered".into(),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "stitch threshold {} must lie strictly between 0 and 1",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Anything that maps a square tile to per-pixel logits.
pub trait TileModel: Sync {
    /// Logits for `tile`, row-major, one per pixel.
    fn predict_tile(&self, tile: &RasterGrid) -> Result<Vec<f32>>;
}

/// A trained segmentation model as a [`TileModel`].
pub struct CheckpointModel<'a> {
    pub spec: &'a ModelSpec,
    pub ckpt: &'a ModelCheckpoint,
}

impl TileModel for CheckpointModel<'_> {
    fn predict_tile(&self, tile: &RasterGrid) -> Result<Vec<f32>> {
        let s = self.spec.image_size();
        if tile.width() != s || tile.height() != s {
            return Err(Error::shape(format!(
                "model takes {s}x{s} tiles, got {}x{}",
                tile.width(),
                tile.height()
            )));
        }
        let input = Tensor::new(vec![3, s, s], tile.to_model_input()?)?;
        Ok(self.spec.predict(self.ckpt, &input)?.into_values())
    }
}

/// Tile origins `(col, row)` in evaluation order.
pub fn tile_origins(width: usize, height: usize, tile: &TileSpec) -> Result<Vec<(usize, usize)>> {
    let cols = enumerate_windows(width, tile)?;
    let rows = enumerate_windows(height, tile)?;
    Ok(rows.iter().flat_map(|&r| cols.iter().map(move |&c| (c, r))).collect())
}

/// Mean-of-logits stitching; returns a `[1, H, W]` tensor.
pub fn sliding_inference(grid: &RasterGrid, model: &dyn TileModel, spec: &StitchSpec) -> Result<Tensor> {
    spec.validate()?;
    let (w, h, p) = (grid.width(), grid.height(), spec.tile.patch_size);
    let origins = tile_origins(w, h, &spec.tile)?;
    let tiles: Vec<Vec<f32>> = origins
        .par_iter()
        .map(|&(c, r)| {
            let logits = model.predict_tile(&grid.window(c, r, p, p)?)?;
            if logits.len() != p * p {
                return Err(Error::shape(format!("tile model returned {} logits for a {p}x{p} tile", logits.len())));
            }
            Ok(logits)
        })
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0f64; w * h];
    let mut count = vec![0u32; w * h];
    for (&(c, r), logits) in origins.iter().zip(&tiles) {
        for y in 0..p {
            let row = (r + y) * w + c;
            for x in 0..p {
                sum[row + x] += logits[y * p + x] as f64;
                count[row + x] += 1;
            }
        }
    }
    debug_assert!(count.iter().all(|&n| n > 0));
    let values = sum.iter().zip(&count).map(|(&s, &n)| (s / n as f64) as f32).collect();
    Tensor::new(vec![1, h, w], values)
}

/// `sigmoid(logit) >= threshold -> 255`, else 0, as a single-band `u8` raster.
pub fn binarize(logits: &Tensor, threshold: f64) -> Result<RasterGrid> {
    let (h, w) = match logits.shape() {
        &[1, h, w] | &[h, w] => (h, w),
        s => return Err(Error::shape(format!("binarize expects [1, H, W], got {s:?}"))),
    };
    let data = logits
        .values()
        .iter()
        .map(|&l| {
            let p = 1.0 / (1.0 + (-(l as f64)).exp());
            if p >= threshold {
                255
            } else {
                0
            }
        })
        .collect();
    RasterGrid::from_u8(w, h, 1, data)
}
