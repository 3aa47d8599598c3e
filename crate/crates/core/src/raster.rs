//! In-memory georeferenced rasters.
//!
//! A [`RasterGrid`] is a row-major, band-interleaved pixel array. A
//! [`GeoTransform`] maps pixel corners to world coordinates using the
//! corner-origin convention; conversions from pixel-center conventions (world
//! files) happen at the I/O boundary.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleType {
    U8,
    U16,
    F32,
}

impl SampleType {
    pub fn bits(self) -> u16 {
        match self {
            SampleType::U8 => 8,
            SampleType::U16 => 16,
            SampleType::F32 => 32,
        }
    }

    pub fn bytes(self) -> usize {
        self.bits() as usize / 8
    }

    /// Nominal maximum intensity, used for normalization and brightness jitter.
    pub fn full_scale(self) -> f32 {
        match self {
            SampleType::U8 => 255.0,
            SampleType::U16 => 65535.0,
            SampleType::F32 => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::U8(v) => v.len(),
            Samples::U16(v) => v.len(),
            Samples::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_type(&self) -> SampleType {
        match self {
            Samples::U8(_) => SampleType::U8,
            Samples::U16(_) => SampleType::U16,
            Samples::F32(_) => SampleType::F32,
        }
    }

    fn zeros(ty: SampleType, n: usize) -> Samples {
        match ty {
            SampleType::U8 => Samples::U8(vec![0; n]),
            SampleType::U16 => Samples::U16(vec![0; n]),
            SampleType::F32 => Samples::F32(vec![0.0; n]),
        }
    }

    #[inline]
    pub fn get_f32(&self, i: usize) -> f32 {
        match self {
            Samples::U8(v) => v[i] as f32,
            Samples::U16(v) => v[i] as f32,
            Samples::F32(v) => v[i],
        }
    }

    /// Stores `value`, rounding half away from zero and saturating for integer types.
    #[inline]
    pub fn set_f32(&mut self, i: usize, value: f32) {
        match self {
            Samples::U8(v) => v[i] = value.round().clamp(0.0, 255.0) as u8,
            Samples::U16(v) => v[i] = value.round().clamp(0.0, 65535.0) as u16,
            Samples::F32(v) => v[i] = value,
        }
    }

    fn copy_from(&mut self, dst: usize, src: &Samples, at: usize, n: usize) {
        match (self, src) {
            (Samples::U8(d), Samples::U8(s)) => d[dst..dst + n].copy_from_slice(&s[at..at + n]),
            (Samples::U16(d), Samples::U16(s)) => d[dst..dst + n].copy_from_slice(&s[at..at + n]),
            (Samples::F32(d), Samples::F32(s)) => d[dst..dst + n].copy_from_slice(&s[at..at + n]),
            _ => unreachable!("sample type mismatch"),
        }
    }
}

/// Row-major, band-interleaved raster.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    width: usize,
    height: usize,
    bands: usize,
    samples: Samples,
}

impl RasterGrid {
    pub fn new(width: usize, height: usize, bands: usize, samples: Samples) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("raster must be at least 1x1, got {width}x{height}")));
        }
        if !(1..=4).contains(&bands) {
            return Err(Error::shape(format!("band count must be 1..=4, got {bands}")));
        }
        let expected = width * height * bands;
        if samples.len() != expected {
            return Err(Error::shape(format!(
                "pixel array has {} samples, expected {width}x{height}x{bands} = {expected}",
                samples.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bands,
            samples,
        })
    }

    pub fn zeros(width: usize, height: usize, bands: usize, ty: SampleType) -> Result<Self> {
        Self::new(width, height, bands, Samples::zeros(ty, width * height * bands))
    }

    pub fn from_u8(width: usize, height: usize, bands: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, bands, Samples::U8(data))
    }

    pub fn from_f32(width: usize, height: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(width, height, bands, Samples::F32(data))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn sample_type(&self) -> SampleType {
        self.samples.sample_type()
    }

    pub fn samples(&self) -> &Samples {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut Samples {
        &mut self.samples
    }

    pub fn into_samples(self) -> Samples {
        self.samples
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.samples {
            Samples::U8(v) => Some(v),
            _ => None,
        }
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize, band: usize) -> usize {
        (row * self.width + col) * self.bands + band
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize, band: usize) -> f32 {
        self.samples.get_f32(self.index(col, row, band))
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, band: usize, value: f32) {
        let i = self.index(col, row, band);
        self.samples.set_f32(i, value);
    }

    pub fn same_dims(&self, other: &RasterGrid) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Copies a `width` x `height` window starting at (`col_off`, `row_off`).
    pub fn window(&self, col_off: usize, row_off: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0
            || height == 0
            || col_off + width > self.width
            || row_off + height > self.height
        {
            return Err(Error::shape(format!(
                "window ({col_off},{row_off},{width},{height}) outside {}x{} raster",
                self.width, self.height
            )));
        }
        let mut out = Samples::zeros(self.sample_type(), width * height * self.bands);
        let row_len = width * self.bands;
        for r in 0..height {
            let src = self.index(col_off, row_off + r, 0);
            out.copy_from(r * row_len, &self.samples, src, row_len);
        }
        Self::new(width, height, self.bands, out)
    }

    /// Writes `patch` into this raster at (`col_off`, `row_off`).
    pub fn paste(&mut self, patch: &RasterGrid, col_off: usize, row_off: usize) -> Result<()> {
        if patch.bands != self.bands
            || patch.sample_type() != self.sample_type()
            || col_off + patch.width > self.width
            || row_off + patch.height > self.height
        {
            return Err(Error::shape("paste target does not fit"));
        }
        let row_len = patch.width * self.bands;
        for r in 0..patch.height {
            let dst = self.index(col_off, row_off + r, 0);
            self.samples.copy_from(dst, &patch.samples, r * row_len, row_len);
        }
        Ok(())
    }

    /// Band `band` as a flat row-major f32 plane.
    pub fn band_f32(&self, band: usize) -> Vec<f32> {
        (0..self.width * self.height)
            .map(|p| self.samples.get_f32(p * self.bands + band))
            .collect()
    }

    /// Builds a raster of the same type from a per-pixel function.
    pub fn map_pixels(&self, mut f: impl FnMut(usize, usize, usize, f32) -> f32) -> RasterGrid {
        let mut out = self.clone();
        for row in 0..self.height {
            for col in 0..self.width {
                for b in 0..self.bands {
                    let i = self.index(col, row, b);
                    out.samples.set_f32(i, f(col, row, b, self.samples.get_f32(i)));
                }
            }
        }
        out
    }

    /// Model input planes `[3, H, W]` scaled to `[-0.5, 0.5]`.
    ///
    /// Bands 1-3 are used; a single band is replicated to three.
    pub fn to_model_input(&self) -> Result<Vec<f32>> {
        let src_bands: [usize; 3] = match self.bands {
            1 => [0, 0, 0],
            2 => return Err(Error::shape("two-band rasters cannot feed a 3-channel model")),
            _ => [0, 1, 2],
        };
        let scale = self.sample_type().full_scale();
        let plane = self.width * self.height;
        let mut out = vec![0.0f32; 3 * plane];
        for (c, &b) in src_bands.iter().enumerate() {
            for p in 0..plane {
                out[c * plane + p] = self.samples.get_f32(p * self.bands + b) / scale - 0.5;
            }
        }
        Ok(out)
    }
}

/// Affine pixel-to-world mapping (corner-origin).
///
/// `world(col, row) = (origin_x + col*pixel_width + row*col_rotation,
///                     origin_y + col*row_rotation + row*pixel_height)`
#[derive(Debug, Clone, PartialEq)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_width: f64,
    pub pixel_height: f64,
    pub row_rotation: f64,
    pub col_rotation: f64,
    pub crs_text: Option<String>,
}

impl GeoTransform {
    pub fn north_up(origin_x: f64, origin_y: f64, pixel_size: f64) -> Self {
        Self {
            origin_x,
            origin_y,
            pixel_width: pixel_size,
            pixel_height: -pixel_size,
            row_rotation: 0.0,
            col_rotation: 0.0,
            crs_text: None,
        }
    }

    /// Pixel space equals world space with y pointing down.
    pub fn identity() -> Self {
        Self {
            origin_x: 0.0,
            origin_y: 0.0,
            pixel_width: 1.0,
            pixel_height: 1.0,
            row_rotation: 0.0,
            col_rotation: 0.0,
            crs_text: None,
        }
    }

    pub fn with_crs(mut self, crs: impl Into<String>) -> Self {
        self.crs_text = Some(crs.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixel_width == 0.0 || self.pixel_height == 0.0 {
            return Err(Error::ConfigInvalid("pixel size must be non-zero".into()));
        }
        if !(self.origin_x.is_finite()
            && self.origin_y.is_finite()
            && self.pixel_width.is_finite()
            && self.pixel_height.is_finite())
        {
            return Err(Error::ConfigInvalid("geotransform has non-finite terms".into()));
        }
        Ok(())
    }

    pub fn has_rotation(&self) -> bool {
        self.row_rotation != 0.0 || self.col_rotation != 0.0
    }

    #[inline]
    pub fn world(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_width + row * self.col_rotation,
            self.origin_y + col * self.row_rotation + row * self.pixel_height,
        )
    }

    /// Transform of a sub-window whose top-left pixel is (`col_off`, `row_off`).
    pub fn translated(&self, col_off: usize, row_off: usize) -> Self {
        let (x, y) = self.world(col_off as f64, row_off as f64);
        Self {
            origin_x: x,
            origin_y: y,
            ..self.clone()
        }
    }

    /// Transform of the same footprint resampled with `factor` times more pixels per axis.
    pub fn upscaled(&self, factor: usize) -> Self {
        let f = factor as f64;
        Self {
            pixel_width: self.pixel_width / f,
            pixel_height: self.pixel_height / f,
            row_rotation: self.row_rotation / f,
            col_rotation: self.col_rotation / f,
            ..self.clone()
        }
    }

    /// Absolute area of one pixel in world units.
    pub fn pixel_area(&self) -> f64 {
        (self.pixel_width * self.pixel_height - self.row_rotation * self.col_rotation).abs()
    }
}

impl Default for GeoTransform {
    fn default() -> Self {
        Self::identity()
    }
}
