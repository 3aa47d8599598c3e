//! campseg: building footprint extraction from georeferenced imagery.
//!
//! The crate covers the whole workflow:
//!
//! 1. [`raster`] / [`geotiff`] / [`worldfile`]: georeferenced rasters and their
//!    on-disk formats.
//! 2. [`synthcamp`]: procedural camp scenes with ground-truth dwelling masks.
//! 3. [`tiler`]: overlapped patch extraction and augmentation.
//! 4. [`upscale`]: nearest, bilinear and EDSR-style super-resolution upscaling.
//! 5. [`nn`]: a small reverse-mode tensor engine plus the adapter-tuned
//!    transformer segmenter, a U-Net baseline, losses, AdamW and checkpoints.
//! 6. [`trainer`]: epoch loop, learning-rate schedules, best-on-validation.
//! 7. [`stitch`]: sliding-window inference with mean-of-logits blending.
//! 8. [`metrics`]: confusion counts with precision, recall, F1 and IoU.
//! 9. [`vectorize`]: mask to polygon tracing and ESRI Shapefile output.
//! 10. [`cli`]: config-driven orchestration behind the `campseg` binary.

pub mod cli;
pub mod error;
pub mod geotiff;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod stitch;
pub mod synthcamp;
pub mod tiler;
pub mod trainer;
pub mod upscale;
pub mod vectorize;
pub mod worldfile;

pub use error::{Error, Result};
pub use raster::{GeoTransform, RasterGrid, SampleType, Samples};
