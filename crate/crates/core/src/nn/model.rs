use serde::{Deserialize, Serialize};

use super::segmenter::{freeze_encoder, init_segmenter, segmenter_graph};
use super::unet::{init_unet, unet_graph};
use super::{Graph, ModelCheckpoint, Scalar, SegmenterConfig, Tensor, UnetConfig, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Adapter,
    Unet,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Adapter => "adapter",
            ModelKind::Unet => "unet",
        }
    }
}

/// A model architecture with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Adapter(SegmenterConfig),
    Unet(UnetConfig),
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Adapter(_) => ModelKind::Adapter,
            ModelSpec::Unet(_) => ModelKind::Unet,
        }
    }

    /// Side length of the square input the model consumes.
    pub fn image_size(&self) -> usize {
        match self {
            ModelSpec::Adapter(c) => c.encoder.image_size,
            ModelSpec::Unet(c) => c.image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Adapter(c) => c.validate(),
            ModelSpec::Unet(c) => c.validate(),
        }
    }

    /// Seeded initial parameters; `freeze_encoder` only affects the adapter model.
    pub fn init(&self, seed: u64, freeze_encoder_weights: bool) -> Result<ModelCheckpoint> {
        match self {
            ModelSpec::Adapter(c) => {
                let mut k = init_segmenter(c, seed)?;
                if freeze_encoder_weights {
                    freeze_encoder(&mut k);
                }
                Ok(k)
            }
            ModelSpec::Unet(c) => init_unet(c, seed),
        }
    }

    /// Records `[3, S, S]` image to `[1, S, S]` logits.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        match self {
            ModelSpec::Adapter(c) => segmenter_graph(g, image, c),
            ModelSpec::Unet(_) => unet_graph(g, image),
        }
    }

    /// Logits for one image, evaluated without gradient tracking.
    pub fn predict(&self, ckpt: &ModelCheckpoint, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::inference(ckpt);
        let x = g.leaf_f32(image.shape(), image.values(), false)?;
        let y = self.forward(&mut g, x)?;
        Tensor::new(g.shape(y).to_vec(), g.value(y).to_vec())
    }
}
