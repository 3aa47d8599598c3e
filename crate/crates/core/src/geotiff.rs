//! Constrained GeoTIFF reader and writer.
//!
//! Supported subset: classic TIFF (not BigTIFF) in either byte order, a single
//! image (first IFD), strips or tiles, no compression or Deflate, chunky
//! planar layout, 8/16-bit unsigned or 32-bit float samples, 1-4 samples per
//! pixel. Georeferencing comes from `ModelPixelScale` + `ModelTiepoint`, or
//! from a sidecar world file. Everything else is [`Error::UnsupportedFeature`].

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;

use crate::error::{Error, Result};
use crate::raster::{GeoTransform, RasterGrid, SampleType, Samples};
use crate::worldfile;

mod tag {
    pub const IMAGE_WIDTH: u16 = 256;
    pub const IMAGE_LENGTH: u16 = 257;
    pub const BITS_PER_SAMPLE: u16 = 258;
    pub const COMPRESSION: u16 = 259;
    pub const PHOTOMETRIC: u16 = 262;
    pub const STRIP_OFFSETS: u16 = 273;
    pub const SAMPLES_PER_PIXEL: u16 = 277;
    pub const ROWS_PER_STRIP: u16 = 278;
    pub const STRIP_BYTE_COUNTS: u16 = 279;
    pub const PLANAR_CONFIG: u16 = 284;
    pub const PREDICTOR: u16 = 317;
    pub const TILE_WIDTH: u16 = 322;
    pub const TILE_LENGTH: u16 = 323;
    pub const TILE_OFFSETS: u16 = 324;
    pub const TILE_BYTE_COUNTS: u16 = 325;
    pub const EXTRA_SAMPLES: u16 = 338;
    pub const SAMPLE_FORMAT: u16 = 339;
    pub const MODEL_PIXEL_SCALE: u16 = 33550;
    pub const MODEL_TIEPOINT: u16 = 33922;
    pub const GEO_KEY_DIRECTORY: u16 = 34735;
    pub const GEO_ASCII_PARAMS: u16 = 34737;
}

const COMPRESSION_NONE: u16 = 1;
const COMPRESSION_DEFLATE: u16 = 8;
const COMPRESSION_DEFLATE_OLD: u16 = 32946;

const GT_RASTER_TYPE_KEY: u16 = 1025;
const GT_CITATION_KEY: u16 = 1026;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compression {
    None,
    Deflate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkLayout {
    Strips { rows_per_strip: usize },
    Tiles { width: usize, height: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOptions {
    pub byte_order: ByteOrder,
    pub compression: Compression,
    pub layout: ChunkLayout,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self {
            byte_order: ByteOrder::Little,
            compression: Compression::None,
            layout: ChunkLayout::Strips { rows_per_strip: 0 },
        }
    }
}

/// Reads a GeoTIFF, falling back to a sidecar world file for georeferencing.
pub fn read_geotiff(path: impl AsRef<Path>) -> Result<(RasterGrid, GeoTransform)> {
    let path = path.as_ref();
    let (grid, gt) = read_geotiff_optional(path)?;
    match gt {
        Some(gt) => Ok((grid, gt)),
        None => Err(Error::MissingGeoreference(path.to_path_buf())),
    }
}

/// Like [`read_geotiff`] but reports a missing georeference as `None`, so the
/// caller can supply e.g. [`GeoTransform::identity`] explicitly.
pub fn read_geotiff_optional(path: impl AsRef<Path>) -> Result<(RasterGrid, Option<GeoTransform>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (grid, gt) = decode(&bytes)?;
    let gt = match gt {
        Some(gt) => Some(gt),
        None => match find_world_file(path) {
            Some(wf) => Some(worldfile::read_world_file(wf)?),
            None => None,
        },
    };
    Ok((grid, gt))
}

fn find_world_file(path: &Path) -> Option<PathBuf> {
    ["tfw", "tifw", "wld", "TFW", "WLD"]
        .iter()
        .map(|ext| path.with_extension(ext))
        .find(|p| p.is_file())
}

pub fn write_geotiff(grid: &RasterGrid, gt: &GeoTransform, path: impl AsRef<Path>) -> Result<()> {
    write_geotiff_with(grid, gt, path, &WriteOptions::default())
}

pub fn write_geotiff_with(
    grid: &RasterGrid,
    gt: &GeoTransform,
    path: impl AsRef<Path>,
    opts: &WriteOptions,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(grid, gt, opts)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// decoding

struct Cursor<'a> {
    data: &'a [u8],
    order: ByteOrder,
}

impl<'a> Cursor<'a> {
    fn bytes(&self, offset: usize, len: usize) -> Result<&'a [u8]> {
        offset
            .checked_add(len)
            .and_then(|end| self.data.get(offset..end))
            .ok_or_else(|| {
                Error::MalformedFile(format!(
                    "read of {len} bytes at offset {offset} past end of file ({} bytes)",
                    self.data.len()
                ))
            })
    }

    fn u16(&self, offset: usize) -> Result<u16> {
        let b: [u8; 2] = self.bytes(offset, 2)?.try_into().unwrap();
        Ok(match self.order {
            ByteOrder::Little => u16::from_le_bytes(b),
            ByteOrder::Big => u16::from_be_bytes(b),
        })
    }

    fn u32(&self, offset: usize) -> Result<u32> {
        let b: [u8; 4] = self.bytes(offset, 4)?.try_into().unwrap();
        Ok(match self.order {
            ByteOrder::Little => u32::from_le_bytes(b),
            ByteOrder::Big => u32::from_be_bytes(b),
        })
    }

    fn u64(&self, offset: usize) -> Result<u64> {
        let b: [u8; 8] = self.bytes(offset, 8)?.try_into().unwrap();
        Ok(match self.order {
            ByteOrder::Little => u64::from_le_bytes(b),
            ByteOrder::Big => u64::from_be_bytes(b),
        })
    }
}

#[derive(Debug, Clone)]
enum Value {
    Ints(Vec<u64>),
    Floats(Vec<f64>),
    Ascii(String),
}

impl Value {
    fn ints(&self, name: &str) -> Result<&[u64]> {
        match self {
            Value::Ints(v) => Ok(v),
            _ => Err(Error::MalformedFile(format!("tag {name} must be integer"))),
        }
    }

    fn floats(&self) -> Vec<f64> {
        match self {
            Value::Floats(v) => v.clone(),
            Value::Ints(v) => v.iter().map(|&x| x as f64).collect(),
            Value::Ascii(_) => Vec::new(),
        }
    }
}

fn type_size(ty: u16) -> Option<usize> {
    Some(match ty {
        1 | 2 | 6 | 7 => 1,
        3 | 8 => 2,
        4 | 9 | 11 => 4,
        5 | 10 | 12 => 8,
        _ => return None,
    })
}

fn read_ifd(cur: &Cursor<'_>, ifd_offset: usize) -> Result<BTreeMap<u16, Value>> {
    let count = cur.u16(ifd_offset)? as usize;
    cur.bytes(ifd_offset + 2, count * 12 + 4)
        .map_err(|_| Error::MalformedFile("truncated IFD".into()))?;
    let mut tags = BTreeMap::new();
    for i in 0..count {
        let at = ifd_offset + 2 + i * 12;
        let tag = cur.u16(at)?;
        let ty = cur.u16(at + 2)?;
        let n = cur.u32(at + 4)? as usize;
        // Unknown field types are skipped, as baseline readers must.
        let Some(size) = type_size(ty) else { continue };
        let total = size
            .checked_mul(n)
            .ok_or_else(|| Error::MalformedFile("IFD entry count overflow".into()))?;
        let data_at = if total <= 4 {
            at + 8
        } else {
            cur.u32(at + 8)? as usize
        };
        cur.bytes(data_at, total)?;
        let value = match ty {
            2 => {
                let raw = cur.bytes(data_at, total)?;
                let s: String = raw
                    .iter()
                    .take_while(|&&b| b != 0)
                    .map(|&b| b as char)
                    .collect();
                Value::Ascii(s)
            }
            1 | 7 => Value::Ints(cur.bytes(data_at, n)?.iter().map(|&b| b as u64).collect()),
            6 => Value::Ints(cur.bytes(data_at, n)?.iter().map(|&b| b as i8 as u64).collect()),
            3 | 8 => Value::Ints(
                (0..n)
                    .map(|k| cur.u16(data_at + 2 * k).map(|v| v as u64))
                    .collect::<Result<_>>()?,
            ),
            4 | 9 => Value::Ints(
                (0..n)
                    .map(|k| cur.u32(data_at + 4 * k).map(|v| v as u64))
                    .collect::<Result<_>>()?,
            ),
            11 => Value::Floats(
                (0..n)
                    .map(|k| cur.u32(data_at + 4 * k).map(|v| f32::from_bits(v) as f64))
                    .collect::<Result<_>>()?,
            ),
            12 => Value::Floats(
                (0..n)
                    .map(|k| cur.u64(data_at + 8 * k).map(f64::from_bits))
                    .collect::<Result<_>>()?,
            ),
            5 | 10 => Value::Floats(
                (0..n)
                    .map(|k| {
                        let num = cur.u32(data_at + 8 * k)?;
                        let den = cur.u32(data_at + 8 * k + 4)?;
                        Ok(if ty == 5 {
                            num as f64 / den as f64
                        } else {
                            num as i32 as f64 / den as i32 as f64
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            _ => unreachable!(),
        };
        tags.insert(tag, value);
    }
    Ok(tags)
}

fn single(tags: &BTreeMap<u16, Value>, tag: u16, name: &str, default: Option<u64>) -> Result<u64> {
    match tags.get(&tag) {
        Some(v) => v
            .ints(name)?
            .first()
            .copied()
            .ok_or_else(|| Error::MalformedFile(format!("tag {name} is empty"))),
        None => default.ok_or_else(|| Error::MalformedFile(format!("required tag {name} missing"))),
    }
}

fn decode(data: &[u8]) -> Result<(RasterGrid, Option<GeoTransform>)> {
    let order = match data.get(0..2) {
        Some(b"II") => ByteOrder::Little,
        Some(b"MM") => ByteOrder::Big,
        _ => return Err(Error::MalformedFile("not a TIFF: bad byte-order mark".into())),
    };
    let cur = Cursor { data, order };
    match cur.u16(2)? {
        42 => {}
        43 => return Err(Error::UnsupportedFeature("BigTIFF".into())),
        v => return Err(Error::MalformedFile(format!("bad TIFF magic number {v}"))),
    }
    let ifd_offset = cur.u32(4)? as usize;
    let tags = read_ifd(&cur, ifd_offset)?;

    let width = single(&tags, tag::IMAGE_WIDTH, "ImageWidth", None)? as usize;
    let height = single(&tags, tag::IMAGE_LENGTH, "ImageLength", None)? as usize;
    let spp = single(&tags, tag::SAMPLES_PER_PIXEL, "SamplesPerPixel", Some(1))? as usize;
    if width == 0 || height == 0 {
        return Err(Error::MalformedFile("zero image dimension".into()));
    }
    if !(1..=4).contains(&spp) {
        return Err(Error::UnsupportedFeature(format!("{spp} samples per pixel")));
    }
    let compression = single(&tags, tag::COMPRESSION, "Compression", Some(1))? as u16;
    let deflate = match compression {
        COMPRESSION_NONE => false,
        COMPRESSION_DEFLATE | COMPRESSION_DEFLATE_OLD => true,
        c => return Err(Error::UnsupportedFeature(format!("compression scheme {c}"))),
    };
    if single(&tags, tag::PLANAR_CONFIG, "PlanarConfiguration", Some(1))? != 1 {
        return Err(Error::UnsupportedFeature("planar (band-sequential) layout".into()));
    }
    if single(&tags, tag::PREDICTOR, "Predictor", Some(1))? != 1 {
        return Err(Error::UnsupportedFeature("predictor".into()));
    }
    let photometric = single(&tags, tag::PHOTOMETRIC, "PhotometricInterpretation", Some(1))?;
    if photometric > 2 {
        return Err(Error::UnsupportedFeature(format!(
            "photometric interpretation {photometric}"
        )));
    }
    let bits = match tags.get(&tag::BITS_PER_SAMPLE) {
        Some(v) => v.ints("BitsPerSample")?.to_vec(),
        None => vec![1],
    };
    if bits.iter().any(|&b| b != bits[0]) {
        return Err(Error::UnsupportedFeature("mixed bit depths".into()));
    }
    let format = match tags.get(&tag::SAMPLE_FORMAT) {
        Some(v) => v.ints("SampleFormat")?.first().copied().unwrap_or(1),
        None => 1,
    };
    let sample_type = match (bits[0], format) {
        (8, 1) => SampleType::U8,
        (16, 1) => SampleType::U16,
        (32, 3) => SampleType::F32,
        (b, f) => {
            return Err(Error::UnsupportedFeature(format!(
                "{b}-bit samples with sample format {f}"
            )))
        }
    };

    let bps = sample_type.bytes();
    let pixel_bytes = bps * spp;
    let mut raw = vec![0u8; width * height * pixel_bytes];

    if tags.contains_key(&tag::TILE_OFFSETS) {
        let tw = single(&tags, tag::TILE_WIDTH, "TileWidth", None)? as usize;
        let th = single(&tags, tag::TILE_LENGTH, "TileLength", None)? as usize;
        if tw == 0 || th == 0 {
            return Err(Error::MalformedFile("zero tile size".into()));
        }
        let offsets = tags[&tag::TILE_OFFSETS].ints("TileOffsets")?;
        let counts = tags
            .get(&tag::TILE_BYTE_COUNTS)
            .ok_or_else(|| Error::MalformedFile("TileByteCounts missing".into()))?
            .ints("TileByteCounts")?;
        let across = width.div_ceil(tw);
        let down = height.div_ceil(th);
        if offsets.len() < across * down || counts.len() < across * down {
            return Err(Error::MalformedFile("too few tile offsets".into()));
        }
        for ty in 0..down {
            for tx in 0..across {
                let k = ty * across + tx;
                let chunk = chunk_bytes(&cur, offsets[k], counts[k], deflate, tw * th * pixel_bytes)?;
                let cols = tw.min(width - tx * tw);
                let rows = th.min(height - ty * th);
                for r in 0..rows {
                    let src = r * tw * pixel_bytes;
                    let dst = ((ty * th + r) * width + tx * tw) * pixel_bytes;
                    raw[dst..dst + cols * pixel_bytes]
                        .copy_from_slice(&chunk[src..src + cols * pixel_bytes]);
                }
            }
        }
    } else {
        let offsets = tags
            .get(&tag::STRIP_OFFSETS)
            .ok_or_else(|| Error::MalformedFile("StripOffsets missing".into()))?
            .ints("StripOffsets")?;
        let counts = tags
            .get(&tag::STRIP_BYTE_COUNTS)
            .ok_or_else(|| Error::MalformedFile("StripByteCounts missing".into()))?
            .ints("StripByteCounts")?;
        let rps = (single(&tags, tag::ROWS_PER_STRIP, "RowsPerStrip", Some(u32::MAX as u64))?
            as usize)
            .clamp(1, height);
        let strips = height.div_ceil(rps);
        if offsets.len() < strips || counts.len() < strips {
            return Err(Error::MalformedFile("too few strip offsets".into()));
        }
        let row_bytes = width * pixel_bytes;
        for s in 0..strips {
            let rows = rps.min(height - s * rps);
            let chunk = chunk_bytes(&cur, offsets[s], counts[s], deflate, rows * row_bytes)?;
            let dst = s * rps * row_bytes;
            raw[dst..dst + rows * row_bytes].copy_from_slice(&chunk[..rows * row_bytes]);
        }
    }

    let samples = match sample_type {
        SampleType::U8 => Samples::U8(raw),
        SampleType::U16 => Samples::U16(
            raw.chunks_exact(2)
                .map(|b| match order {
                    ByteOrder::Little => u16::from_le_bytes([b[0], b[1]]),
                    ByteOrder::Big => u16::from_be_bytes([b[0], b[1]]),
                })
                .collect(),
        ),
        SampleType::F32 => Samples::F32(
            raw.chunks_exact(4)
                .map(|b| {
                    let b = [b[0], b[1], b[2], b[3]];
                    f32::from_bits(match order {
                        ByteOrder::Little => u32::from_le_bytes(b),
                        ByteOrder::Big => u32::from_be_bytes(b),
                    })
                })
                .collect(),
        ),
    };
    let grid = RasterGrid::new(width, height, spp, samples)?;
    Ok((grid, georeference(&tags)))
}

/// Returns at least `expected` decoded bytes of one strip or tile.
fn chunk_bytes(cur: &Cursor<'_>, offset: u64, count: u64, deflate: bool, expected: usize) -> Result<Vec<u8>> {
    let stored = cur
        .bytes(offset as usize, count as usize)
        .map_err(|_| Error::MalformedFile("strip or tile extends past end of file".into()))?;
    let out = if deflate {
        let mut out = Vec::with_capacity(expected);
        ZlibDecoder::new(stored)
            .read_to_end(&mut out)
            .map_err(|e| Error::MalformedFile(format!("bad Deflate stream: {e}")))?;
        out
    } else {
        stored.to_vec()
    };
    if out.len() < expected {
        return Err(Error::MalformedFile(format!(
            "strip or tile holds {} bytes, expected {expected}",
            out.len()
        )));
    }
    Ok(out)
}

fn georeference(tags: &BTreeMap<u16, Value>) -> Option<GeoTransform> {
    let scale = tags.get(&tag::MODEL_PIXEL_SCALE)?.floats();
    let tie = tags.get(&tag::MODEL_TIEPOINT)?.floats();
    if scale.len() < 2 || tie.len() < 6 || scale[0] == 0.0 || scale[1] == 0.0 {
        return None;
    }
    let (i, j, x, y) = (tie[0], tie[1], tie[3], tie[4]);
    let crs_text = match tags.get(&tag::GEO_ASCII_PARAMS) {
        Some(Value::Ascii(s)) => {
            let s = s.trim_end_matches(['|', '\0']).to_string();
            (!s.is_empty()).then_some(s)
        }
        _ => None,
    };
    Some(GeoTransform {
        origin_x: x - i * scale[0],
        origin_y: y + j * scale[1],
        pixel_width: scale[0],
        pixel_height: -scale[1],
        row_rotation: 0.0,
        col_rotation: 0.0,
        crs_text,
    })
}

// ---------------------------------------------------------------------------
// encoding

enum Field {
    Short(Vec<u16>),
    Long(Vec<u32>),
    Double(Vec<f64>),
    Ascii(Vec<u8>),
}

impl Field {
    fn type_code(&self) -> u16 {
        match self {
            Field::Short(_) => 3,
            Field::Long(_) => 4,
            Field::Double(_) => 12,
            Field::Ascii(_) => 2,
        }
    }

    fn count(&self) -> usize {
        match self {
            Field::Short(v) => v.len(),
            Field::Long(v) => v.len(),
            Field::Double(v) => v.len(),
            Field::Ascii(v) => v.len(),
        }
    }

    fn payload(&self, order: ByteOrder) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Field::Short(v) => v.iter().for_each(|x| out.extend(put16(*x, order))),
            Field::Long(v) => v.iter().for_each(|x| out.extend(put32(*x, order))),
            Field::Double(v) => v.iter().for_each(|x| out.extend(put64(x.to_bits(), order))),
            Field::Ascii(v) => out.extend_from_slice(v),
        }
        out
    }
}

fn put16(v: u16, order: ByteOrder) -> [u8; 2] {
    match order {
        ByteOrder::Little => v.to_le_bytes(),
        ByteOrder::Big => v.to_be_bytes(),
    }
}

fn put32(v: u32, order: ByteOrder) -> [u8; 4] {
    match order {
        ByteOrder::Little => v.to_le_bytes(),
        ByteOrder::Big => v.to_be_bytes(),
    }
}

fn put64(v: u64, order: ByteOrder) -> [u8; 8] {
    match order {
        ByteOrder::Little => v.to_le_bytes(),
        ByteOrder::Big => v.to_be_bytes(),
    }
}

fn sample_bytes(grid: &RasterGrid, order: ByteOrder) -> Vec<u8> {
    match grid.samples() {
        Samples::U8(v) => v.clone(),
        Samples::U16(v) => v.iter().flat_map(|&x| put16(x, order)).collect(),
        Samples::F32(v) => v.iter().flat_map(|&x| put32(x.to_bits(), order)).collect(),
    }
}

fn compress(chunk: &[u8], compression: Compression) -> Result<Vec<u8>> {
    match compression {
        Compression::None => Ok(chunk.to_vec()),
        Compression::Deflate => {
            let mut enc = ZlibEncoder::new(Vec::new(), flate2::Compression::default());
            enc.write_all(chunk)
                .and_then(|_| enc.finish())
                .map_err(|e| Error::io("<deflate>", e))
        }
    }
}

/// Serializes a raster to GeoTIFF bytes.
pub fn encode(grid: &RasterGrid, gt: &GeoTransform, opts: &WriteOptions) -> Result<Vec<u8>> {
    gt.validate()?;
    if gt.has_rotation() {
        return Err(Error::UnsupportedFeature(
            "rotated geotransforms cannot be stored as pixel scale + tiepoint".into(),
        ));
    }
    let order = opts.byte_order;
    let (w, h, bands) = (grid.width(), grid.height(), grid.bands());
    let ty = grid.sample_type();
    let pixel_bytes = ty.bytes() * bands;
    let pixels = sample_bytes(grid, order);

    let mut out = Vec::new();
    out.extend_from_slice(match order {
        ByteOrder::Little => b"II",
        ByteOrder::Big => b"MM",
    });
    out.extend(put16(42, order));
    out.extend(put32(0, order));

    let mut chunk_offsets = Vec::new();
    let mut chunk_counts = Vec::new();
    let mut push_chunk = |out: &mut Vec<u8>, chunk: &[u8]| -> Result<()> {
        let stored = compress(chunk, opts.compression)?;
        chunk_offsets.push(out.len() as u32);
        chunk_counts.push(stored.len() as u32);
        out.extend_from_slice(&stored);
        if out.len() % 2 == 1 {
            out.push(0);
        }
        Ok(())
    };

    let mut fields: BTreeMap<u16, Field> = BTreeMap::new();
    match opts.layout {
        ChunkLayout::Strips { rows_per_strip } => {
            let row_bytes = w * pixel_bytes;
            let rps = if rows_per_strip == 0 {
                (8192 / row_bytes.max(1)).clamp(1, h)
            } else {
                rows_per_strip.min(h)
            };
            for start in (0..h).step_by(rps) {
                let end = (start + rps).min(h);
                push_chunk(&mut out, &pixels[start * row_bytes..end * row_bytes])?;
            }
            fields.insert(tag::ROWS_PER_STRIP, Field::Long(vec![rps as u32]));
            fields.insert(tag::STRIP_OFFSETS, Field::Long(chunk_offsets.clone()));
            fields.insert(tag::STRIP_BYTE_COUNTS, Field::Long(chunk_counts.clone()));
        }
        ChunkLayout::Tiles { width: tw, height: th } => {
            if tw == 0 || th == 0 || tw % 16 != 0 || th % 16 != 0 {
                return Err(Error::ConfigInvalid("tile dimensions must be positive multiples of 16".into()));
            }
            for ty0 in (0..h).step_by(th) {
                for tx0 in (0..w).step_by(tw) {
                    let mut tile = vec![0u8; tw * th * pixel_bytes];
                    let cols = tw.min(w - tx0);
                    for r in 0..th.min(h - ty0) {
                        let src = ((ty0 + r) * w + tx0) * pixel_bytes;
                        tile[r * tw * pixel_bytes..][..cols * pixel_bytes]
                            .copy_from_slice(&pixels[src..src + cols * pixel_bytes]);
                    }
                    push_chunk(&mut out, &tile)?;
                }
            }
            fields.insert(tag::TILE_WIDTH, Field::Long(vec![tw as u32]));
            fields.insert(tag::TILE_LENGTH, Field::Long(vec![th as u32]));
            fields.insert(tag::TILE_OFFSETS, Field::Long(chunk_offsets.clone()));
            fields.insert(tag::TILE_BYTE_COUNTS, Field::Long(chunk_counts.clone()));
        }
    }

    fields.insert(tag::IMAGE_WIDTH, Field::Long(vec![w as u32]));
    fields.insert(tag::IMAGE_LENGTH, Field::Long(vec![h as u32]));
    fields.insert(tag::BITS_PER_SAMPLE, Field::Short(vec![ty.bits(); bands]));
    fields.insert(
        tag::COMPRESSION,
        Field::Short(vec![match opts.compression {
            Compression::None => COMPRESSION_NONE,
            Compression::Deflate => COMPRESSION_DEFLATE,
        }]),
    );
    let rgb = bands >= 3;
    fields.insert(tag::PHOTOMETRIC, Field::Short(vec![if rgb { 2 } else { 1 }]));
    fields.insert(tag::SAMPLES_PER_PIXEL, Field::Short(vec![bands as u16]));
    fields.insert(tag::PLANAR_CONFIG, Field::Short(vec![1]));
    let extra = bands - if rgb { 3 } else { 1 };
    if extra > 0 {
        fields.insert(tag::EXTRA_SAMPLES, Field::Short(vec![0; extra]));
    }
    let format = if ty == SampleType::F32 { 3 } else { 1 };
    fields.insert(tag::SAMPLE_FORMAT, Field::Short(vec![format; bands]));
    fields.insert(
        tag::MODEL_PIXEL_SCALE,
        Field::Double(vec![gt.pixel_width.abs(), gt.pixel_height.abs(), 0.0]),
    );
    if gt.pixel_width < 0.0 || gt.pixel_height > 0.0 {
        return Err(Error::UnsupportedFeature(
            "only north-up rasters (positive pixel width, negative pixel height)".into(),
        ));
    }
    let tiepoint = vec![0.0, 0.0, 0.0, gt.origin_x, gt.origin_y, 0.0];
    fields.insert(tag::MODEL_TIEPOINT, Field::Double(tiepoint));
    let mut keys: Vec<u16> = vec![1, 1, 0, 0];
    keys.extend([GT_RASTER_TYPE_KEY, 0, 1, 1]);
    if let Some(crs) = &gt.crs_text {
        let mut ascii: Vec<u8> = crs.bytes().filter(|&b| b != 0).collect();
        ascii.push(b'|');
        keys.extend([GT_CITATION_KEY, tag::GEO_ASCII_PARAMS, ascii.len() as u16, 0]);
        ascii.push(0);
        fields.insert(tag::GEO_ASCII_PARAMS, Field::Ascii(ascii));
    }
    keys[3] = ((keys.len() - 4) / 4) as u16;
    fields.insert(tag::GEO_KEY_DIRECTORY, Field::Short(keys));

    if pixels.is_empty() {
        return Err(Error::shape("empty raster"));
    }
    let ifd_offset = out.len();
    let ifd_len = 2 + 12 * fields.len() + 4;
    let mut overflow_at = ifd_offset + ifd_len;
    let mut ifd = Vec::with_capacity(ifd_len);
    let mut overflow = Vec::new();
    ifd.extend(put16(fields.len() as u16, order));
    for (tag, field) in &fields {
        let payload = field.payload(order);
        ifd.extend(put16(*tag, order));
        ifd.extend(put16(field.type_code(), order));
        ifd.extend(put32(field.count() as u32, order));
        if payload.len() <= 4 {
            let mut inline = payload.clone();
            inline.resize(4, 0);
            ifd.extend_from_slice(&inline);
        } else {
            ifd.extend(put32(overflow_at as u32, order));
            overflow.extend_from_slice(&payload);
            if payload.len() % 2 == 1 {
                overflow.push(0);
            }
            overflow_at = ifd_offset + ifd_len + overflow.len();
        }
    }
    ifd.extend(put32(0, order));
    out.extend_from_slice(&ifd);
    out.extend_from_slice(&overflow);
    if out.len() > u32::MAX as usize {
        return Err(Error::UnsupportedFeature("file larger than 4 GiB (BigTIFF)".into()));
    }
    out[4..8].copy_from_slice(&put32(ifd_offset as u32, order));
    Ok(out)
}

/// Decodes GeoTIFF bytes already in memory.
pub fn decode_bytes(data: &[u8]) -> Result<(RasterGrid, Option<GeoTransform>)> {
    decode(data)
}
