//! Adapter-augmented vision transformer segmenter.
//!
//! The encoder is a plain pre-norm ViT with windowed attention everywhere
//! except a few global layers. After each layer `i` an adapter computes a
//! prompt `P_i = up(GELU(tune_i(F_i)))` from the layer's token features
//! `F_i` and adds it to the layer output. The up projection is one parameter
//! pair shared by every layer. The decoder refines a single learned mask
//! token against the image tokens, upsamples the token grid with transposed
//! convolutions and predicts per-pixel logits through a dynamic head.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::checkpoint::init_rng;
use super::layers::{self, conv_transpose2x2, init_layer_norm, init_linear, layer_norm, linear, tokens_to_map};
use super::{AttnGroup, Graph, ModelCheckpoint, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_embed_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub window_size: usize,
    /// Layer indices using global attention; evenly spaced when absent.
    pub global_attention_layers: Option<Vec<usize>>,
    pub adapter_tune_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            patch_embed_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            window_size: 4,
            global_attention_layers: None,
            adapter_tune_dim: 16,
            mlp_ratio: 4,
        }
    }
}

/// Evenly spaced global-attention layers ending at the last layer.
///
/// Four for deep encoders (depth 32 gives 7, 15, 23, 31), otherwise half the depth.
pub fn default_global_layers(depth: usize) -> Vec<usize> {
    if depth == 0 {
        return Vec::new();
    }
    let n = if depth >= 8 { 4 } else { (depth / 2).max(1) };
    (0..n).map(|k| (k + 1) * depth / n - 1).collect()
}

impl EncoderConfig {
    pub fn global_layers(&self) -> Vec<usize> {
        self.global_attention_layers
            .clone()
            .unwrap_or_else(|| default_global_layers(self.depth))
    }

    /// Tokens per side of the patch grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_embed_size.max(1)
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.patch_embed_size == 0 || self.image_size == 0 || self.image_size % self.patch_embed_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_embed_size {}",
                self.image_size, self.patch_embed_size
            ));
        }
        if !self.patch_embed_size.is_power_of_two() {
            return bad(format!(
                "patch_embed_size {} must be a power of two (the decoder upsamples in x2 stages)",
                self.patch_embed_size
            ));
        }
        if self.depth == 0 || self.embed_dim == 0 || self.adapter_tune_dim == 0 || self.mlp_ratio == 0 {
            return bad("depth, embed_dim, adapter_tune_dim and mlp_ratio must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} is not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.window_size == 0 {
            return bad("window_size must be positive".into());
        }
        if let Some(&l) = self.global_layers().iter().find(|&&l| l >= self.depth) {
            return bad(format!("global attention layer {l} outside depth {}", self.depth));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            blocks: 2,
            mlp_ratio: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let d = &self.decoder;
        if d.heads == 0 || self.encoder.embed_dim % d.heads != 0 || d.blocks == 0 || d.mlp_ratio == 0 {
            return Err(Error::ConfigInvalid(format!(
                "decoder needs positive blocks/mlp_ratio and heads dividing embed_dim {}",
                self.encoder.embed_dim
            )));
        }
        Ok(())
    }
}

/// Channel widths of the decoder's upsampling stages.
fn upsample_channels(embed_dim: usize, stages: usize) -> Vec<usize> {
    let mut c = vec![embed_dim];
    for _ in 0..stages {
        let last = *c.last().expect("non-empty");
        c.push((last / 2).max(4));
    }
    c
}

/// Window partition of a `grid x grid` token lattice; edge windows may be partial.
pub fn window_groups(grid: usize, window: usize) -> Vec<AttnGroup> {
    let mut out = Vec::new();
    for wy in (0..grid).step_by(window.max(1)) {
        for wx in (0..grid).step_by(window.max(1)) {
            let mut idx = Vec::new();
            for y in wy..(wy + window).min(grid) {
                for x in wx..(wx + window).min(grid) {
                    idx.push(y * grid + x);
                }
            }
            out.push(AttnGroup::square(idx));
        }
    }
    out
}

/// Gather table turning a `[C, H, W]` image into `[tokens, C*p*p]` patch rows.
pub fn patchify_index(c: usize, size: usize, p: usize) -> Vec<usize> {
    let grid = size / p;
    let mut idx = Vec::with_capacity(c * size * size);
    for ty in 0..grid {
        for tx in 0..grid {
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        idx.push((ch * size + ty * p + py) * size + tx * p + px);
                    }
                }
            }
        }
    }
    idx
}

/// Fresh parameters for encoder, adapters and decoder.
pub fn init_segmenter(cfg: &SegmenterConfig, seed: u64) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let e = &cfg.encoder;
    let (d, p, n) = (e.embed_dim, e.patch_embed_size, e.tokens());
    let mut rng = init_rng(seed);
    let mut c = ModelCheckpoint::new();
    init_linear(&mut c, "encoder.patch_embed", 3 * p * p, d, &mut rng);
    c.init_normal("encoder.pos_embed", &[n, d], 0.02, &mut rng);
    for i in 0..e.depth {
        let b = format!("encoder.blocks.{i}");
        init_layer_norm(&mut c, &format!("{b}.norm1"), d);
        for proj in ["q", "k", "v", "proj"] {
            init_linear(&mut c, &format!("{b}.attn.{proj}"), d, d, &mut rng);
        }
        init_layer_norm(&mut c, &format!("{b}.norm2"), d);
        init_linear(&mut c, &format!("{b}.mlp.fc1"), d, d * e.mlp_ratio, &mut rng);
        init_linear(&mut c, &format!("{b}.mlp.fc2"), d * e.mlp_ratio, d, &mut rng);
    }
    init_layer_norm(&mut c, "encoder.norm_out", d);
    for i in 0..e.depth {
        init_linear(&mut c, &format!("adapter.tune.{i}"), d, e.adapter_tune_dim, &mut rng);
    }
    // zero up-projection: adapters start as the identity on the frozen backbone
    c.init_const("adapter.up.w", &[e.adapter_tune_dim, d], 0.0);
    c.init_const("adapter.up.b", &[d], 0.0);
    init_decoder(&mut c, cfg, &mut rng);
    c.meta.seed = seed;
    Ok(c)
}

fn init_decoder(c: &mut ModelCheckpoint, cfg: &SegmenterConfig, rng: &mut rand_chacha::ChaCha8Rng) {
    let e = &cfg.encoder;
    let (d, n) = (e.embed_dim, e.tokens());
    c.init_normal("decoder.mask_token", &[1, d], 1.0, rng);
    c.init_normal("decoder.image_pe", &[n, d], 0.02, rng);
    for i in 0..cfg.decoder.blocks {
        let b = format!("decoder.blocks.{i}");
        for att in ["t2i", "i2t"] {
            for proj in ["q", "k", "v", "proj"] {
                init_linear(c, &format!("{b}.{att}.{proj}"), d, d, rng);
            }
        }
        for nm in ["norm1", "norm2", "norm3"] {
            init_layer_norm(c, &format!("{b}.{nm}"), d);
        }
        init_linear(c, &format!("{b}.mlp.fc1"), d, d * cfg.decoder.mlp_ratio, rng);
        init_linear(c, &format!("{b}.mlp.fc2"), d * cfg.decoder.mlp_ratio, d, rng);
    }
    let stages = e.patch_embed_size.trailing_zeros() as usize;
    let ch = upsample_channels(d, stages);
    for s in 0..stages {
        layers::init_conv_transpose2x2(c, &format!("decoder.up{s}"), ch[s], ch[s + 1], rng);
    }
    init_linear(c, "decoder.hyper.fc1", d, d, rng);
    init_linear(c, "decoder.hyper.fc2", d, *ch.last().expect("non-empty"), rng);
    c.init_const("decoder.out_bias", &[1], 0.0);
}

/// Freezes every encoder parameter; adapters and decoder stay trainable.
pub fn freeze_encoder(ckpt: &mut ModelCheckpoint) {
    ckpt.set_frozen("encoder.", true);
}

/// Per-layer tune projections and the shared up projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub tune_weight: Vec<Tensor>,
    pub tune_bias: Vec<Tensor>,
    pub up_weight: Tensor,
    pub up_bias: Tensor,
}

impl AdapterParams {
    pub fn from_checkpoint(ckpt: &ModelCheckpoint, depth: usize) -> Result<Self> {
        let mut tune_weight = Vec::with_capacity(depth);
        let mut tune_bias = Vec::with_capacity(depth);
        for i in 0..depth {
            tune_weight.push(ckpt.get(&format!("adapter.tune.{i}.w"))?.clone());
            tune_bias.push(ckpt.get(&format!("adapter.tune.{i}.b"))?.clone());
        }
        Ok(Self {
            tune_weight,
            tune_bias,
            up_weight: ckpt.get("adapter.up.w")?.clone(),
            up_bias: ckpt.get("adapter.up.b")?.clone(),
        })
    }

    pub fn layers(&self) -> usize {
        self.tune_weight.len()
    }
}

fn adapter_prompt<T: Scalar>(t: &mut Tape<T>, f: Var, tw: Var, tb: Var, uw: Var, ub: Var) -> Result<Var> {
    let h = t.matmul(f, tw)?;
    let h = t.add_bias(h, tb, 1)?;
    let h = t.gelu(h);
    let p = t.matmul(h, uw)?;
    t.add_bias(p, ub, 1)
}

/// Prompt `P_i` for layer `layer` from features `f` of shape `[tokens, embed_dim]`.
pub fn adapter_forward(f: &Tensor, params: &AdapterParams, layer: usize) -> Result<Tensor> {
    if layer >= params.layers() {
        return Err(Error::shape(format!("adapter layer {layer} of {}", params.layers())));
    }
    let shape = f.shape();
    let tw = &params.tune_weight[layer];
    if shape.len() != 2 || tw.shape().first() != Some(&shape[1]) {
        return Err(Error::shape(format!(
            "features {:?} do not match tune projection {:?}",
            shape,
            tw.shape()
        )));
    }
    let mut t = Tape::<f32>::new();
    let fv = t.leaf_f32(shape, f.values(), false)?;
    let twv = t.leaf_f32(tw.shape(), tw.values(), false)?;
    let tbv = t.leaf_f32(params.tune_bias[layer].shape(), params.tune_bias[layer].values(), false)?;
    let uwv = t.leaf_f32(params.up_weight.shape(), params.up_weight.values(), false)?;
    let ubv = t.leaf_f32(params.up_bias.shape(), params.up_bias.values(), false)?;
    let p = adapter_prompt(&mut t, fv, twv, tbv, uwv, ubv)?;
    Tensor::new(t.shape(p).to_vec(), t.value(p).to_vec())
}

/// Self-attention with separate q/k/v/proj linears named under `prefix`.
fn self_attention<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str, heads: usize, groups: Rc<Vec<AttnGroup>>) -> Result<Var> {
    cross_attention(g, x, x, x, prefix, heads, groups)
}

fn cross_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    prefix: &str,
    heads: usize,
    groups: Rc<Vec<AttnGroup>>,
) -> Result<Var> {
    let q = linear(g, q_in, &format!("{prefix}.q"))?;
    let k = linear(g, k_in, &format!("{prefix}.k"))?;
    let v = linear(g, v_in, &format!("{prefix}.v"))?;
    let a = g.attention(q, k, v, heads, groups)?;
    linear(g, a, &format!("{prefix}.proj"))
}

fn mlp<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, x, &format!("{prefix}.fc1"))?;
    let h = g.gelu(h);
    linear(g, h, &format!("{prefix}.fc2"))
}

/// Records the encoder on `g`; `image` is `[3, S, S]`, result `[tokens, embed_dim]`.
pub fn encoder_graph<T: Scalar>(g: &mut Graph<'_, T>, image: Var, cfg: &EncoderConfig, use_adapters: bool) -> Result<Var> {
    let s = cfg.image_size;
    if g.shape(image) != [3, s, s] {
        return Err(Error::shape(format!(
            "encoder expects [3, {s}, {s}], got {:?}",
            g.shape(image)
        )));
    }
    let (p, grid, n) = (cfg.patch_embed_size, cfg.grid(), cfg.tokens());
    let idx = g.index_table("patchify", [3, s, p, 0], || patchify_index(3, s, p));
    let patches = g.gather(image, idx, vec![n, 3 * p * p])?;
    let x = linear(g, patches, "encoder.patch_embed")?;
    let pos = g.param("encoder.pos_embed")?;
    let mut x = g.add(x, pos)?;
    let global = cfg.global_layers();
    let windowed = Rc::new(window_groups(grid, cfg.window_size));
    let all = Rc::new(vec![AttnGroup::square((0..n).collect())]);
    let up = if use_adapters {
        Some((g.param("adapter.up.w")?, g.param("adapter.up.b")?))
    } else {
        None
    };
    for i in 0..cfg.depth {
        let b = format!("encoder.blocks.{i}");
        let groups = if global.contains(&i) { all.clone() } else { windowed.clone() };
        let h = layer_norm(g, x, &format!("{b}.norm1"))?;
        let a = self_attention(g, h, &format!("{b}.attn"), cfg.heads, groups)?;
        x = g.add(x, a)?;
        let h = layer_norm(g, x, &format!("{b}.norm2"))?;
        let m = mlp(g, h, &format!("{b}.mlp"))?;
        x = g.add(x, m)?;
        if let Some((uw, ub)) = up {
            let tw = g.param(&format!("adapter.tune.{i}.w"))?;
            let tb = g.param(&format!("adapter.tune.{i}.b"))?;
            let prompt = adapter_prompt(g, x, tw, tb, uw, ub)?;
            x = g.add(x, prompt)?;
        }
    }
    layer_norm(g, x, "encoder.norm_out")
}

/// Records the decoder on `g`; `emb` is `[tokens, embed_dim]`, result `[1, S, S]` logits.
pub fn decoder_graph<T: Scalar>(g: &mut Graph<'_, T>, emb: Var, cfg: &DecoderConfig) -> Result<Var> {
    let (n, d) = match g.shape(emb) {
        &[n, d] => (n, d),
        s => return Err(Error::shape(format!("decoder expects [tokens, dim], got {s:?}"))),
    };
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::shape(format!("{n} tokens do not form a square grid")));
    }
    let pe = g.param("decoder.image_pe")?;
    if g.shape(pe) != [n, d] {
        return Err(Error::shape(format!(
            "decoder positional table {:?} does not match embeddings {:?}",
            g.shape(pe),
            [n, d]
        )));
    }
    let to_image = Rc::new(vec![AttnGroup {
        q: vec![0],
        kv: (0..n).collect(),
    }]);
    let to_token = Rc::new(vec![AttnGroup {
        q: (0..n).collect(),
        kv: vec![0],
    }]);
    let mut tok = g.param("decoder.mask_token")?;
    let mut img = emb;
    for i in 0..cfg.blocks {
        let b = format!("decoder.blocks.{i}");
        let keyed = g.add(img, pe)?;
        let a = cross_attention(g, tok, keyed, img, &format!("{b}.t2i"), cfg.heads, to_image.clone())?;
        let t = g.add(tok, a)?;
        tok = layer_norm(g, t, &format!("{b}.norm1"))?;
        let m = mlp(g, tok, &format!("{b}.mlp"))?;
        let t = g.add(tok, m)?;
        tok = layer_norm(g, t, &format!("{b}.norm2"))?;
        let a = cross_attention(g, keyed, tok, tok, &format!("{b}.i2t"), cfg.heads, to_token.clone())?;
        let im = g.add(img, a)?;
        img = layer_norm(g, im, &format!("{b}.norm3"))?;
    }
    let mut map = tokens_to_map(g, img)?;
    let mut s = 0;
    while g.checkpoint().contains(&format!("decoder.up{s}.w")) {
        map = conv_transpose2x2(g, map, &format!("decoder.up{s}"))?;
        map = g.gelu(map);
        s += 1;
    }
    let hyper = linear(g, tok, "decoder.hyper.fc1")?;
    let hyper = g.gelu(hyper);
    let hyper = linear(g, hyper, "decoder.hyper.fc2")?;
    let (c, h, w) = match g.shape(map) {
        &[c, h, w] => (c, h, w),
        _ => unreachable!("feature map is rank 3"),
    };
    if g.shape(hyper) != [1, c] {
        return Err(Error::shape("dynamic head width differs from upsampled channels"));
    }
    let feat = g.reshape(map, vec![c, h * w])?;
    let logits = g.matmul(hyper, feat)?;
    let bias = g.param("decoder.out_bias")?;
    let logits = g.add_bias(logits, bias, 0)?;
    g.reshape(logits, vec![1, h, w])
}

/// Full image-to-logits pass of the adapter segmenter.
pub fn segmenter_graph<T: Scalar>(g: &mut Graph<'_, T>, image: Var, cfg: &SegmenterConfig) -> Result<Var> {
    let emb = encoder_graph(g, image, &cfg.encoder, true)?;
    decoder_graph(g, emb, &cfg.decoder)
}

/// Evaluates the encoder on a `[3, S, S]` image.
pub fn encoder_forward(image: &Tensor, ckpt: &ModelCheckpoint, cfg: &EncoderConfig, use_adapters: bool) -> Result<Tensor> {
    let mut g = Graph::<f32>::inference(ckpt);
    let x = g.leaf_f32(image.shape(), image.values(), false)?;
    let y = encoder_graph(&mut g, x, cfg, use_adapters)?;
    Tensor::new(g.shape(y).to_vec(), g.value(y).to_vec())
}

/// Evaluates the decoder on `[tokens, embed_dim]` embeddings.
pub fn decoder_forward(emb: &Tensor, ckpt: &ModelCheckpoint, cfg: &DecoderConfig) -> Result<Tensor> {
    let mut g = Graph::<f32>::inference(ckpt);
    let x = g.leaf_f32(emb.shape(), emb.values(), false)?;
    let y = decoder_graph(&mut g, x, cfg)?;
    Tensor::new(g.shape(y).to_vec(), g.value(y).to_vec())
}
