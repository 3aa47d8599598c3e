//! Raster upscaling: nearest, bilinear and a learned EDSR-style network.

pub mod edsr;

pub use edsr::{edsr_forward, init_edsr, train_edsr, EdsrConfig, EdsrTrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelCheckpoint;
use crate::raster::RasterGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpscaleMethod {
    None,
    Nearest,
    Bilinear,
    Edsr,
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::ConfigInvalid("upscale factor must be at least 1".into()));
    }
    Ok(())
}

/// Pixel replication: `out(r, c) = in(r / factor, c / factor)`.
pub fn upscale_nearest(grid: &RasterGrid, factor: usize) -> Result<RasterGrid> {
    check_factor(factor)?;
    let (w, h, bands) = (grid.width(), grid.height(), grid.bands());
    let mut out = RasterGrid::zeros(w * factor, h * factor, bands, grid.sample_type())?;
    for r in 0..h * factor {
        for c in 0..w * factor {
            for b in 0..bands {
                out.set(c, r, b, grid.get(c / factor, r / factor, b));
            }
        }
    }
    Ok(out)
}

/// Source sample positions and weights for one output coordinate.
#[inline]
fn bilinear_taps(d: usize, factor: usize, len: usize) -> (usize, usize, f32) {
    let s = ((d as f32 + 0.5) / factor as f32 - 0.5).clamp(0.0, (len - 1) as f32);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, s - i0 as f32)
}

/// Half-pixel-centre bilinear interpolation in `f32`.
///
/// Output pixel `d` samples source coordinate `(d + 0.5) / factor - 0.5`,
/// clamped to the raster. Integer outputs round half away from zero.
pub fn upscale_bilinear(grid: &RasterGrid, factor: usize) -> Result<RasterGrid> {
    check_factor(factor)?;
    let (w, h, bands) = (grid.width(), grid.height(), grid.bands());
    let mut out = RasterGrid::zeros(w * factor, h * factor, bands, grid.sample_type())?;
    let cols: Vec<_> = (0..w * factor).map(|d| bilinear_taps(d, factor, w)).collect();
    for r in 0..h * factor {
        let (y0, y1, ty) = bilinear_taps(r, factor, h);
        for (c, &(x0, x1, tx)) in cols.iter().enumerate() {
            for b in 0..bands {
                let top = (1.0 - tx) * grid.get(x0, y0, b) + tx * grid.get(x1, y0, b);
                let bottom = (1.0 - tx) * grid.get(x0, y1, b) + tx * grid.get(x1, y1, b);
                out.set(c, r, b, (1.0 - ty) * top + ty * bottom);
            }
        }
    }
    Ok(out)
}

/// Dispatches on `method`; `edsr` requires trained parameters and a factor of 4.
pub fn upscale(
    grid: &RasterGrid,
    method: UpscaleMethod,
    factor: usize,
    edsr: Option<(&ModelCheckpoint, &EdsrConfig)>,
) -> Result<RasterGrid> {
    match method {
        UpscaleMethod::None => Ok(grid.clone()),
        UpscaleMethod::Nearest => upscale_nearest(grid, factor),
        UpscaleMethod::Bilinear => upscale_bilinear(grid, factor),
        UpscaleMethod::Edsr => {
            let (params, cfg) =
                edsr.ok_or_else(|| Error::ConfigInvalid("edsr upscaling needs trained parameters".into()))?;
            if factor != cfg.scale {
                return Err(Error::ConfigInvalid(format!(
                    "edsr upscales by {}, not {factor}",
                    cfg.scale
                )));
            }
            edsr_forward(grid, params, cfg)
        }
    }
}

/// Peak signal-to-noise ratio in dB over all samples, peak = the type's full scale.
///
/// Identical rasters give infinity.
pub fn psnr(reference: &RasterGrid, test: &RasterGrid) -> Result<f64> {
    if !reference.same_dims(test) || reference.bands() != test.bands() {
        return Err(Error::shape("psnr: rasters differ in size or bands"));
    }
    let n = reference.samples().len();
    let mut se = 0.0f64;
    for i in 0..n {
        let d = reference.samples().get_f32(i) as f64 - test.samples().get_f32(i) as f64;
        se += d * d;
    }
    let mse = se / n as f64;
    let peak = reference.sample_type().full_scale() as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean PSNR over pairs.
pub fn mean_psnr<'a>(pairs: impl IntoIterator<Item = (&'a RasterGrid, &'a RasterGrid)>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in pairs {
        sum += psnr(a, b)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDataset("psnr pairs".into()));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_u8(w: usize, h: usize, bands: usize, seed: usize) -> RasterGrid {
        let data = (0..w * h * bands).map(|i| ((i * 73 + seed * 31) % 256) as u8).collect();
        RasterGrid::from_u8(w, h, bands, data).unwrap()
    }

    #[test]
    fn nearest_factor_one_is_identity() {
        let g = grid_u8(5, 3, 2, 1);
        assert_eq!(upscale_nearest(&g, 1).unwrap(), g);
    }

    #[test]
    fn nearest_blocks() {
        let g = RasterGrid::from_u8(2, 2, 1, vec![1, 2, 3, 4]).unwrap();
        let u = upscale_nearest(&g, 2).unwrap();
        assert_eq!(u.as_u8().unwrap(), &[1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
    }

    #[test]
    fn nearest_matches_index_map() {
        let g = grid_u8(8, 8, 3, 7);
        let u = upscale_nearest(&g, 3).unwrap();
        for r in 0..24 {
            for c in 0..24 {
                for b in 0..3 {
                    assert_eq!(u.get(c, r, b), g.get(c / 3, r / 3, b));
                }
            }
        }
    }

    #[test]
    fn bilinear_hand_row() {
        let g = RasterGrid::from_u8(2, 1, 1, vec![0, 4]).unwrap();
        let u = upscale_bilinear(&g, 2).unwrap();
        assert_eq!(u.width(), 4);
        assert_eq!(u.height(), 2);
        assert_eq!(&u.as_u8().unwrap()[..4], &[0, 1, 3, 4]);
    }

    #[test]
    fn bilinear_constant_preserved() {
        let g = RasterGrid::from_u8(5, 4, 3, vec![7; 60]).unwrap();
        for f in 1..6 {
            let u = upscale_bilinear(&g, f).unwrap();
            assert!(u.as_u8().unwrap().iter().all(|&v| v == 7));
        }
    }

    #[test]
    fn psnr_values() {
        let a = RasterGrid::from_u8(2, 1, 1, vec![0, 0]).unwrap();
        let b = RasterGrid::from_u8(2, 1, 1, vec![0, 255]).unwrap();
        // mse = 255^2 / 2 -> 10 log10(2)
        assert!((psnr(&a, &b).unwrap() - 10.0 * 2f64.log10()).abs() < 1e-12);
        assert!(psnr(&a, &a).unwrap().is_infinite());
    }

    proptest! {
        #[test]
        fn bilinear_stays_in_input_range(w in 1usize..7, h in 1usize..7, f in 1usize..5, seed in 0usize..1000) {
            let g = grid_u8(w, h, 1, seed);
            let u = upscale_bilinear(&g, f).unwrap();
            let src = g.as_u8().unwrap();
            let (lo, hi) = (*src.iter().min().unwrap(), *src.iter().max().unwrap());
            prop_assert_eq!((u.width(), u.height()), (w * f, h * f));
            for &v in u.as_u8().unwrap() {
                prop_assert!(v >= lo && v <= hi);
            }
        }
    }
}
