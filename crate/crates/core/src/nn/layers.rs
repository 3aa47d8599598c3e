//! Parameterized building blocks shared by the models.
//!
//! Weight layouts: linear `[in, out]`, convolution `[out, in*k*k]`,
//! transposed 2x2 convolution `[in, out*4]`. Every layer named `p` reads
//! `p.w` and `p.b` from the checkpoint.

use rand_chacha::ChaCha8Rng;

use super::tape::PAD;
use super::tensor::shuffle_index;
use super::{Graph, ModelCheckpoint, Scalar, Var};
use crate::error::{Error, Result};

fn chw(g: &Graph<'_, impl Scalar>, x: Var) -> Result<(usize, usize, usize)> {
    match g.shape(x) {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::shape(format!("expected [C, H, W], got {s:?}"))),
    }
}

/// `x [n, in] -> x W + b`.
pub fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b, 1)
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param(&format!("{prefix}.g"))?;
    let shift = g.param(&format!("{prefix}.b"))?;
    g.layer_norm(x, gain, shift)
}

/// Index table mapping a `[C, H, W]` tensor to its `[C*9, H*W]` zero-padded patch matrix.
pub fn im2col3x3_index(c: usize, h: usize, w: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(c * 9 * h * w);
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            idx.push(PAD);
                        } else {
                            idx.push((ch * h + sy as usize) * w + sx as usize);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Same-size 3x3 convolution with zero padding.
pub fn conv3x3<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let (c, h, w) = chw(g, x)?;
    let weight = g.param(&format!("{prefix}.w"))?;
    let bias = g.param(&format!("{prefix}.b"))?;
    let (cout, k) = match g.shape(weight) {
        &[o, k] => (o, k),
        s => return Err(Error::shape(format!("conv weight {prefix} has shape {s:?}"))),
    };
    if k != c * 9 {
        return Err(Error::shape(format!("{prefix}: weight expects {} inputs, got {c} channels", k / 9)));
    }
    let idx = g.index_table("im2col3", [c, h, w, 0], || im2col3x3_index(c, h, w));
    let cols = g.gather(x, idx, vec![c * 9, h * w])?;
    let y = g.matmul(weight, cols)?;
    let y = g.add_bias(y, bias, 0)?;
    g.reshape(y, vec![cout, h, w])
}

/// Pointwise convolution.
pub fn conv1x1<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let (c, h, w) = chw(g, x)?;
    let weight = g.param(&format!("{prefix}.w"))?;
    let bias = g.param(&format!("{prefix}.b"))?;
    let cout = g.shape(weight)[0];
    let flat = g.reshape(x, vec![c, h * w])?;
    let y = g.matmul(weight, flat)?;
    let y = g.add_bias(y, bias, 0)?;
    g.reshape(y, vec![cout, h, w])
}

/// Gather table realizing pixel shuffle with factor `r` on `[c*r*r, h, w]`.
pub fn pixel_shuffle_index(c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let n = c * r * r * h * w;
    let mut idx = vec![0; n];
    for i in 0..n {
        idx[shuffle_index(i, c, h, w, r)] = i;
    }
    idx
}

pub fn pixel_shuffle<T: Scalar>(g: &mut Graph<'_, T>, x: Var, r: usize) -> Result<Var> {
    let (cin, h, w) = chw(g, x)?;
    if r == 0 || cin % (r * r) != 0 {
        return Err(Error::IndivisibleChannels {
            channels: cin,
            divisor: r * r,
        });
    }
    let c = cin / (r * r);
    let idx = g.index_table("shuffle", [c, h, w, r], || pixel_shuffle_index(c, h, w, r));
    g.gather(x, idx, vec![c, h * r, w * r])
}

/// Kernel-2 stride-2 transposed convolution: `[Cin, H, W] -> [Cout, 2H, 2W]`.
pub fn conv_transpose2x2<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let (c, h, w) = chw(g, x)?;
    let weight = g.param(&format!("{prefix}.w"))?;
    let bias = g.param(&format!("{prefix}.b"))?;
    if g.shape(weight)[0] != c || g.shape(weight)[1] % 4 != 0 {
        return Err(Error::shape(format!("{prefix}: weight {:?} vs {c} channels", g.shape(weight))));
    }
    let cout4 = g.shape(weight)[1];
    let flat = g.reshape(x, vec![c, h * w])?;
    let y = g.matmul_t(weight, flat, true, false)?;
    let y = g.reshape(y, vec![cout4, h, w])?;
    let y = pixel_shuffle(g, y, 2)?;
    g.add_bias(y, bias, 0)
}

/// `[N, D]` token matrix of a square grid to a `[D, side, side]` feature map.
pub fn tokens_to_map<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let (n, d) = match g.shape(x) {
        &[n, d] => (n, d),
        s => return Err(Error::shape(format!("expected tokens [N, D], got {s:?}"))),
    };
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::shape(format!("{n} tokens do not form a square grid")));
    }
    let t = g.transpose(x)?;
    g.reshape(t, vec![d, side, side])
}

/// Initializes a linear layer: weights N(0, 1/in), zero bias.
pub fn init_linear(ckpt: &mut ModelCheckpoint, prefix: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) {
    ckpt.init_normal(&format!("{prefix}.w"), &[inp, out], (1.0 / inp as f64).sqrt(), rng);
    ckpt.init_const(&format!("{prefix}.b"), &[out], 0.0);
}

/// Initializes a 3x3 convolution with He-scaled weights and zero bias.
pub fn init_conv3x3(ckpt: &mut ModelCheckpoint, prefix: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) {
    ckpt.init_normal(&format!("{prefix}.w"), &[cout, cin * 9], (2.0 / (cin * 9) as f64).sqrt(), rng);
    ckpt.init_const(&format!("{prefix}.b"), &[cout], 0.0);
}

pub fn init_conv1x1(ckpt: &mut ModelCheckpoint, prefix: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) {
    ckpt.init_normal(&format!("{prefix}.w"), &[cout, cin], (1.0 / cin as f64).sqrt(), rng);
    ckpt.init_const(&format!("{prefix}.b"), &[cout], 0.0);
}

pub fn init_conv_transpose2x2(ckpt: &mut ModelCheckpoint, prefix: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) {
    ckpt.init_normal(&format!("{prefix}.w"), &[cin, cout * 4], (1.0 / cin as f64).sqrt(), rng);
    ckpt.init_const(&format!("{prefix}.b"), &[cout], 0.0);
}

pub fn init_layer_norm(ckpt: &mut ModelCheckpoint, prefix: &str, dim: usize) {
    ckpt.init_const(&format!("{prefix}.g"), &[dim], 1.0);
    ckpt.init_const(&format!("{prefix}.b"), &[dim], 0.0);
}
