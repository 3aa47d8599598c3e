//! Compact EDSR super-resolution network (x4 via two x2 pixel-shuffle stages).
//!
//! Pixels enter as `v / full_scale - 0.5` and leave as `out * full_scale`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::init_rng;
use crate::nn::layers::{conv3x3, init_conv3x3, pixel_shuffle};
use crate::nn::{adamw_step, AdamW, Graph, ModelCheckpoint, Scalar, Var};
use crate::raster::RasterGrid;
use crate::trainer::cosine_lr_between;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdsrConfig {
    pub feature_channels: usize,
    pub residual_blocks: usize,
    pub residual_scaling: f64,
    pub scale: usize,
}

impl Default for EdsrConfig {
    fn default() -> Self {
        Self {
            feature_channels: 16,
            residual_blocks: 8,
            residual_scaling: 1.0,
            scale: 4,
        }
    }
}

impl EdsrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale != 4 {
            return Err(Error::ConfigInvalid(format!("edsr scale must be 4, got {}", self.scale)));
        }
        if self.feature_channels == 0 || self.residual_blocks == 0 {
            return Err(Error::ConfigInvalid("edsr needs at least one channel and one block".into()));
        }
        if !(self.residual_scaling > 0.0 && self.residual_scaling <= 1.0) {
            return Err(Error::ConfigInvalid("edsr residual_scaling must be in (0, 1]".into()));
        }
        Ok(())
    }
}

pub fn init_edsr(cfg: &EdsrConfig, seed: u64) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let c = cfg.feature_channels;
    let mut rng = init_rng(seed);
    let mut k = ModelCheckpoint::new();
    init_conv3x3(&mut k, "edsr.head", 3, c, &mut rng);
    for i in 0..cfg.residual_blocks {
        init_conv3x3(&mut k, &format!("edsr.blocks.{i}.conv1"), c, c, &mut rng);
        init_conv3x3(&mut k, &format!("edsr.blocks.{i}.conv2"), c, c, &mut rng);
        // start each block near the identity
        let w = k.get_mut(&format!("edsr.blocks.{i}.conv2.w"))?;
        w.values_mut().iter_mut().for_each(|v| *v *= 0.1);
    }
    init_conv3x3(&mut k, "edsr.up0", c, 4 * c, &mut rng);
    init_conv3x3(&mut k, "edsr.up1", c, 4 * c, &mut rng);
    init_conv3x3(&mut k, "edsr.tail", c, 3, &mut rng);
    k.meta.seed = seed;
    Ok(k)
}

/// Records the network on `g`: `[3, H, W]` normalized input to `[3, 4H, 4W]`.
pub fn edsr_graph<T: Scalar>(g: &mut Graph<'_, T>, x: Var, cfg: &EdsrConfig) -> Result<Var> {
    let head = conv3x3(g, x, "edsr.head")?;
    let mut r = head;
    for i in 0..cfg.residual_blocks {
        let y = conv3x3(g, r, &format!("edsr.blocks.{i}.conv1"))?;
        let y = g.relu(y);
        let y = conv3x3(g, y, &format!("edsr.blocks.{i}.conv2"))?;
        let y = if cfg.residual_scaling != 1.0 {
            g.scale(y, cfg.residual_scaling)
        } else {
            y
        };
        r = g.add(r, y)?;
    }
    let mut f = g.add(head, r)?;
    for s in ["edsr.up0", "edsr.up1"] {
        f = conv3x3(g, f, s)?;
        f = pixel_shuffle(g, f, 2)?;
    }
    conv3x3(g, f, "edsr.tail")
}

fn planes(grid: &RasterGrid) -> Result<Vec<f32>> {
    match grid.bands() {
        1 | 3 | 4 => grid.to_model_input(),
        b => Err(Error::shape(format!("edsr takes 1, 3 or 4 band rasters, got {b}"))),
    }
}

/// Super-resolves a raster by 4. Single-band input is replicated to three
/// channels and the output keeps the input's band count (first band for 1).
pub fn edsr_forward(grid: &RasterGrid, params: &ModelCheckpoint, cfg: &EdsrConfig) -> Result<RasterGrid> {
    cfg.validate()?;
    let (w, h) = (grid.width(), grid.height());
    let input = planes(grid)?;
    let mut g = Graph::<f32>::inference(params);
    let x = g.leaf_f32(&[3, h, w], &input, false)?;
    let y = edsr_graph(&mut g, x, cfg)?;
    let (ow, oh) = (w * cfg.scale, h * cfg.scale);
    let scale = grid.sample_type().full_scale();
    let vals = g.value(y);
    let plane = ow * oh;
    let out_bands = grid.bands().min(3);
    let mut out = RasterGrid::zeros(ow, oh, grid.bands(), grid.sample_type())?;
    for r in 0..oh {
        for c in 0..ow {
            for b in 0..out_bands {
                out.set(c, r, b, vals[b * plane + r * ow + c] * scale);
            }
            if grid.bands() == 4 {
                // alpha is not super-resolved
                out.set(c, r, 3, grid.get(c / cfg.scale, r / cfg.scale, 3));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdsrTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub seed: u64,
}

impl Default for EdsrTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            lr_init: 1e-3,
            lr_min: 1e-5,
            seed: 0,
        }
    }
}

/// Fits the network to `(low, high)` resolution pairs with an L1 loss.
///
/// Returns the trained parameters and the mean training loss of each epoch.
pub fn train_edsr(
    pairs: &[(RasterGrid, RasterGrid)],
    cfg: &EdsrConfig,
    train: &EdsrTrainConfig,
) -> Result<(ModelCheckpoint, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("super-resolution pairs".into()));
    }
    let mut samples = Vec::with_capacity(pairs.len());
    for (lo, hi) in pairs {
        if hi.width() != lo.width() * cfg.scale || hi.height() != lo.height() * cfg.scale {
            return Err(Error::shape("high-resolution target is not 4x the input"));
        }
        let target: Vec<f32> = planes(hi)?.iter().map(|v| v + 0.5).collect();
        samples.push((planes(lo)?, lo.width(), lo.height(), target));
    }
    let mut params = init_edsr(cfg, train.seed)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed);
    let mut losses = Vec::with_capacity(train.epochs);
    let batch = train.batch_size.max(1);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let lr = cosine_lr_between(epoch, train.epochs, train.lr_init, train.lr_min);
        let opt = AdamW::with_lr(lr);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut grads: Vec<(String, Vec<f32>)> = Vec::new();
            for &i in chunk {
                let (input, w, h, target) = &samples[i];
                let mut g = Graph::<f32>::new(&params);
                let x = g.leaf_f32(&[3, *h, *w], input, false)?;
                let y = edsr_graph(&mut g, x, cfg)?;
                let loss = g.l1_loss(y, target)?;
                total += g.value(loss)[0] as f64;
                let l = g.scale(loss, 1.0 / chunk.len() as f64);
                g.backward(l)?;
                merge_grads(&mut grads, g.param_grads());
            }
            params.accumulate_grads(grads.iter().map(|(n, v)| (n.as_str(), v.as_slice())))?;
            adamw_step(&mut params, &opt)?;
        }
        losses.push(total / samples.len() as f64);
        log::info!("edsr epoch {} loss {:.5} lr {lr:.2e}", epoch + 1, losses[epoch]);
    }
    Ok((params, losses))
}

/// Adds `new` into `acc`; both are sorted by name.
pub(crate) fn merge_grads(acc: &mut Vec<(String, Vec<f32>)>, new: Vec<(String, Vec<f32>)>) {
    if acc.is_empty() {
        *acc = new;
        return;
    }
    for ((na, a), (nb, b)) in acc.iter_mut().zip(new) {
        debug_assert_eq!(*na, nb);
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
}
