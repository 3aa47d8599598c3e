//! Declarative pipeline configuration (TOML).
//!
//! ```toml
//! seed = 7
//! out_dir = "run"
//!
//! [scene]
//! source = "synthcamp"        # or "paths" with `image` and optional `mask`
//! [scene.synthcamp]
//! width = 256
//! height = 256
//!
//! [[regions]]
//! name = "north"
//! role = "train_large"
//! window = { col_off = 0, row_off = 0, width = 256, height = 128 }
//!
//! [tile]
//! patch_size = 32
//! stride = 16
//! edge_policy = "snap"
//!
//! [model]
//! kind = "adapter"
//! [model.adapter.encoder]
//! image_size = 32
//! ```
//!
//! Relative paths resolve against the config file's directory. The top-level
//! `seed` drives scene generation, initialization and training.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geotiff::read_geotiff;
use crate::nn::{ModelKind, ModelSpec, SegmenterConfig, UnetConfig};
use crate::raster::{GeoTransform, RasterGrid};
use crate::stitch::StitchSpec;
use crate::synthcamp::{generate_scene, SceneConfig};
use crate::tiler::{validate_regions, RegionRole, RegionSpec, TileSpec};
use crate::trainer::TrainConfig;
use crate::upscale::{EdsrConfig, EdsrTrainConfig, UpscaleMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneSource {
    Synthcamp,
    Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub source: SceneSource,
    /// Label used in metrics reports.
    #[serde(default = "default_scene_name")]
    pub name: String,
    #[serde(default)]
    pub synthcamp: Option<SceneConfig>,
    #[serde(default)]
    pub image: Option<PathBuf>,
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

fn default_scene_name() -> String {
    "scene".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpscaleSection {
    pub method: UpscaleMethod,
    #[serde(default = "default_factor")]
    pub factor: usize,
    #[serde(default)]
    pub edsr: EdsrConfig,
    #[serde(default)]
    pub edsr_epochs: Option<usize>,
    #[serde(default)]
    pub edsr_batch_size: Option<usize>,
    #[serde(default)]
    pub edsr_lr: Option<f64>,
}

fn default_factor() -> usize {
    4
}

impl Default for UpscaleSection {
    fn default() -> Self {
        Self {
            method: UpscaleMethod::None,
            factor: 4,
            edsr: EdsrConfig::default(),
            edsr_epochs: None,
            edsr_batch_size: None,
            edsr_lr: None,
        }
    }
}

impl UpscaleSection {
    /// Pixel multiplier applied before segmentation (1 when disabled).
    pub fn effective_factor(&self) -> usize {
        if self.method == UpscaleMethod::None {
            1
        } else {
            self.factor
        }
    }

    pub fn edsr_train(&self, seed: u64) -> EdsrTrainConfig {
        let d = EdsrTrainConfig::default();
        EdsrTrainConfig {
            epochs: self.edsr_epochs.unwrap_or(d.epochs),
            batch_size: self.edsr_batch_size.unwrap_or(d.batch_size),
            lr_init: self.edsr_lr.unwrap_or(d.lr_init),
            lr_min: d.lr_min.min(self.edsr_lr.unwrap_or(d.lr_init)),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default)]
    pub adapter: Option<SegmenterConfig>,
    #[serde(default)]
    pub unet: Option<UnetConfig>,
}

impl ModelSection {
    pub fn spec(&self) -> Result<ModelSpec> {
        match (self.kind, &self.adapter, &self.unet) {
            (ModelKind::Adapter, a, None) => Ok(ModelSpec::Adapter(a.clone().unwrap_or_default())),
            (ModelKind::Unet, None, u) => Ok(ModelSpec::Unet(u.clone().unwrap_or_default())),
            (kind, _, _) => Err(Error::ConfigInvalid(format!(
                "model kind is `{}` but a section for the other model is present",
                kind.as_str()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorizeSection {
    /// Douglas–Peucker tolerance in world units; 0 keeps exact pixel-edge rings.
    #[serde(default)]
    pub simplify_tolerance: f64,
}

impl Default for VectorizeSection {
    fn default() -> Self {
        Self { simplify_tolerance: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub scene: SceneSection,
    pub regions: Vec<RegionSpec>,
    pub tile: TileSpec,
    #[serde(default)]
    pub upscale: UpscaleSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    /// Defaults to model-sized tiles with one-eighth overlap.
    #[serde(default)]
    pub stitch: Option<StitchSpec>,
    #[serde(default)]
    pub vectorize: VectorizeSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("campseg-out")
}

/// A loaded scene: image, optional truth mask and georeference.
pub struct SceneData {
    pub image: RasterGrid,
    pub mask: Option<RasterGrid>,
    pub geo: GeoTransform,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    /// Reads, resolves relative paths against the file's directory and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        if let Some(p) = self.scene.image.as_mut() {
            fix(p);
        }
        if let Some(p) = self.scene.mask.as_mut() {
            fix(p);
        }
    }

    /// Applies the run seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        self.model.spec()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn scene_config(&self) -> Option<SceneConfig> {
        self.scene.synthcamp.clone().map(|s| SceneConfig { seed: self.seed, ..s })
    }

    pub fn stitch_spec(&self) -> Result<StitchSpec> {
        let size = self.model_spec()?.image_size();
        Ok(self.stitch.clone().unwrap_or_else(|| StitchSpec::new(TileSpec::inference(size))))
    }

    pub fn regions_with(&self, pred: impl Fn(RegionRole) -> bool) -> impl Iterator<Item = &RegionSpec> {
        self.regions.iter().filter(move |r| pred(r.role))
    }

    /// Checks everything that can be checked without running a stage.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        let (w, h) = match self.scene.source {
            SceneSource::Synthcamp => {
                let Some(s) = self.scene_config() else {
                    return bad("scene source `synthcamp` needs a [scene.synthcamp] section".into());
                };
                if self.scene.image.is_some() || self.scene.mask.is_some() {
                    return bad("scene paths are only used with source = \"paths\"".into());
                }
                s.validate()?;
                (s.width, s.height)
            }
            SceneSource::Paths => {
                if self.scene.synthcamp.is_some() {
                    return bad("[scene.synthcamp] is only used with source = \"synthcamp\"".into());
                }
                let Some(image) = &self.scene.image else {
                    return bad("scene source `paths` needs `image`".into());
                };
                for p in std::iter::once(image).chain(&self.scene.mask) {
                    if !p.exists() {
                        return bad(format!("scene file {} does not exist", p.display()));
                    }
                }
                let (g, _) = read_geotiff(image)?;
                (g.width(), g.height())
            }
        };
        if self.regions.is_empty() {
            return bad("at least one region is required".into());
        }
        let mut names: Vec<&str> = self.regions.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|p| p[0] == p[1]) {
            return bad("region names must be unique".into());
        }
        if let Some(r) = self.regions.iter().find(|r| {
            r.name.is_empty() || !r.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        }) {
            return bad(format!("region name `{}` must be non-empty [A-Za-z0-9_-]", r.name));
        }
        validate_regions(&self.regions, w, h)?;
        self.tile.validate()?;
        let spec = self.model_spec()?;
        spec.validate()?;
        self.train_config().validate()?;
        let f = self.upscale.effective_factor();
        if f == 0 {
            return bad("upscale factor must be at least 1".into());
        }
        if self.tile.patch_size * f != spec.image_size() {
            return bad(format!(
                "patch size {} x upscale factor {f} must equal the model input size {}",
                self.tile.patch_size,
                spec.image_size()
            ));
        }
        if self.upscale.method == UpscaleMethod::Edsr {
            self.upscale.edsr.validate()?;
            if self.upscale.factor != self.upscale.edsr.scale {
                return bad(format!("edsr upscales by {}, factor is {}", self.upscale.edsr.scale, self.upscale.factor));
            }
            if self.tile.patch_size % self.upscale.factor != 0 {
                return bad("edsr training needs patch sizes divisible by the upscale factor".into());
            }
        }
        let stitch = self.stitch_spec()?;
        stitch.validate()?;
        if stitch.tile.patch_size != spec.image_size() {
            return bad(format!(
                "stitch tiles ({}) must match the model input size ({})",
                stitch.tile.patch_size,
                spec.image_size()
            ));
        }
        if !(self.vectorize.simplify_tolerance >= 0.0) {
            return bad("simplify_tolerance must be >= 0".into());
        }
        Ok(())
    }

    pub fn load_scene(&self) -> Result<SceneData> {
        match self.scene.source {
            SceneSource::Synthcamp => {
                let cfg = self
                    .scene_config()
                    .ok_or_else(|| Error::ConfigInvalid("missing [scene.synthcamp]".into()))?;
                let s = generate_scene(&cfg)?;
                Ok(SceneData {
                    image: s.image,
                    mask: Some(s.mask),
                    geo: s.geo,
                })
            }
            SceneSource::Paths => {
                let image_path = self
                    .scene
                    .image
                    .as_ref()
                    .ok_or_else(|| Error::ConfigInvalid("missing scene image".into()))?;
                let (image, geo) = read_geotiff(image_path)?;
                let mask = match &self.scene.mask {
                    Some(p) => {
                        let (m, _) = read_geotiff(p)?;
                        if !m.same_dims(&image) {
                            return Err(Error::shape("scene mask and image differ in size"));
                        }
                        Some(m)
                    }
                    None => None,
                };
                Ok(SceneData { image, mask, geo })
            }
        }
    }
}
