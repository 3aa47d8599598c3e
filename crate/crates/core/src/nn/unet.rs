//! Small three-level U-Net used as the convolutional baseline.

use serde::{Deserialize, Serialize};

use super::checkpoint::init_rng;
use super::layers::{conv1x1, conv3x3, conv_transpose2x2, init_conv1x1, init_conv3x3, init_conv_transpose2x2};
use super::{Graph, ModelCheckpoint, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnetConfig {
    pub image_size: usize,
    pub base_channels: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            base_channels: 8,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::ConfigInvalid(format!(
                "unet needs positive base_channels and image_size divisible by 4 (got {})",
                self.image_size
            )));
        }
        Ok(())
    }
}

pub fn init_unet(cfg: &UnetConfig, seed: u64) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let c = cfg.base_channels;
    let mut rng = init_rng(seed);
    let mut k = ModelCheckpoint::new();
    let convs = [
        ("unet.enc0.a", 3, c),
        ("unet.enc0.b", c, c),
        ("unet.enc1.a", c, 2 * c),
        ("unet.enc1.b", 2 * c, 2 * c),
        ("unet.mid.a", 2 * c, 4 * c),
        ("unet.mid.b", 4 * c, 4 * c),
        ("unet.dec1.a", 4 * c, 2 * c),
        ("unet.dec1.b", 2 * c, 2 * c),
        ("unet.dec0.a", 2 * c, c),
        ("unet.dec0.b", c, c),
    ];
    for (name, cin, cout) in convs {
        init_conv3x3(&mut k, name, cin, cout, &mut rng);
    }
    init_conv_transpose2x2(&mut k, "unet.up1", 4 * c, 2 * c, &mut rng);
    init_conv_transpose2x2(&mut k, "unet.up0", 2 * c, c, &mut rng);
    init_conv1x1(&mut k, "unet.head", c, 1, &mut rng);
    k.meta.seed = seed;
    Ok(k)
}

fn double_conv<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let y = conv3x3(g, x, &format!("{prefix}.a"))?;
    let y = g.relu(y);
    let y = conv3x3(g, y, &format!("{prefix}.b"))?;
    Ok(g.relu(y))
}

/// Records the U-Net on `g`: `[3, S, S]` image to `[1, S, S]` logits.
pub fn unet_graph<T: Scalar>(g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
    match g.shape(image) {
        &[3, h, w] if h % 4 == 0 && w % 4 == 0 => {}
        s => return Err(Error::shape(format!("unet expects [3, H, W] with H, W divisible by 4, got {s:?}"))),
    }
    let e0 = double_conv(g, image, "unet.enc0")?;
    let p0 = g.maxpool2(e0)?;
    let e1 = double_conv(g, p0, "unet.enc1")?;
    let p1 = g.maxpool2(e1)?;
    let m = double_conv(g, p1, "unet.mid")?;
    let u1 = conv_transpose2x2(g, m, "unet.up1")?;
    let c1 = g.concat(&[u1, e1])?;
    let d1 = double_conv(g, c1, "unet.dec1")?;
    let u0 = conv_transpose2x2(g, d1, "unet.up0")?;
    let c0 = g.concat(&[u0, e0])?;
    let d0 = double_conv(g, c0, "unet.dec0")?;
    conv1x1(g, d0, "unet.head")
}

pub fn unet_baseline_forward(image: &Tensor, ckpt: &ModelCheckpoint) -> Result<Tensor> {
    let mut g = Graph::<f32>::inference(ckpt);
    let x = g.leaf_f32(image.shape(), image.values(), false)?;
    let y = unet_graph(&mut g, x)?;
    Tensor::new(g.shape(y).to_vec(), g.value(y).to_vec())
}
