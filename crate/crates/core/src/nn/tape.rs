//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value and enough saved state
//! to run its adjoint. Gradients are only allocated for nodes that depend on
//! a leaf created with `requires_grad`, so frozen weights cost nothing in the
//! backward pass.

use std::rc::Rc;

use super::Scalar;
use crate::error::{Error, Result};

/// Gather index meaning "emit zero" (used for padding).
pub const PAD: usize = usize::MAX;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention neighbourhood: query rows attend to key/value rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnGroup {
    pub q: Vec<usize>,
    pub kv: Vec<usize>,
}

impl AttnGroup {
    pub fn square(idx: Vec<usize>) -> Self {
        Self { q: idx.clone(), kv: idx }
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias { x: Var, b: Var, mid: usize, inner: usize },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    LayerNorm { x: Var, g: Var, b: Var, mean: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, groups: Rc<Vec<AttnGroup>>, probs: Vec<T> },
    Reshape(Var),
    Transpose(Var),
    Concat(Vec<Var>),
    Gather { a: Var, idx: Rc<Vec<usize>> },
    MaxPool2 { a: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    BceSoftIou { z: Var, target: Vec<T>, iou_weight: T, p: Vec<T>, inter: f64, union: f64 },
    L1 { a: Var, target: Vec<T> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn matrix_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(format!("expected a matrix, got shape {shape:?}"))),
    }
}

/// `c += a * b` with explicit strides, `(rows, cols)` of the product being `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: (isize, isize),
    b: &[T],
    sb: (isize, isize),
    c: &mut [T],
    sc: (isize, isize),
    beta: T,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass buffers whose extents cover every strided index of
    // the m x k, k x n and m x n views; `c` never aliases `a` or `b`.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            sc.0,
            sc.1,
        );
    }
}

/// Numerically stable in-place softmax of each `cols`-wide row.
pub fn softmax_rows<T: Scalar>(values: &mut [T], cols: usize) {
    for row in values.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += v.as_f64();
        }
        let inv = T::from_f64(1.0 / sum);
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::from_f64(0.5)).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last `backward` call's loss w.r.t. `v`, if it was tracked.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Creates an input node. Gradients flow into it only when `requires_grad`.
    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::shape(format!(
                "leaf shape {shape:?} does not hold {} values",
                value.len()
            )));
        }
        Ok(self.push(shape, value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    pub fn leaf_f32(&mut self, shape: &[usize], value: &[f32], requires_grad: bool) -> Result<Var> {
        let v = value.iter().map(|&x| T::from_f64(x as f64)).collect();
        self.leaf(shape.to_vec(), v, requires_grad)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ra, ca) = matrix_dims(self.shape(a))?;
        let (rb, cb) = matrix_dims(self.shape(b))?;
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {:?}{} x {:?}{}",
                self.shape(a),
                if ta { "^T" } else { "" },
                self.shape(b),
                if tb { "^T" } else { "" }
            )));
        }
        let sa = if ta { (1, ca as isize) } else { (ca as isize, 1) };
        let sb = if tb { (1, cb as isize) } else { (cb as isize, 1) };
        let mut out = vec![T::zero(); m * n];
        gemm_acc(m, k, n, self.value(a), sa, self.value(b), sb, &mut out, (n as isize, 1), T::zero());
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let ng = self.ng(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), ng)
    }

    /// Adds `b` along the axis `axis` of `x`, broadcasting over the others.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || numel(self.shape(b)) != shape[axis] {
            return Err(Error::shape(format!(
                "bias of {:?} does not match axis {axis} of {shape:?}",
                self.shape(b)
            )));
        }
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let bv = self.value(b);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[(i / inner) % mid])
            .collect();
        let ng = self.ng(&[x, b]);
        Ok(self.push(shape, out, Op::AddBias { x, b, mid, inner }, ng))
    }

    fn map_op(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(&[a]);
        self.push(self.shape(a).to_vec(), out, op, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map_op(a, gelu_fwd, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.abs(), Op::Abs(a))
    }

    /// Normalizes each row over the last axis, then applies gain `g` and shift `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm of a scalar"))?;
        if numel(self.shape(g)) != d || numel(self.shape(b)) != d {
            return Err(Error::shape("layer_norm gain/shift width differs from feature width"));
        }
        let rows = numel(&shape) / d.max(1);
        let (xv, gv, bv) = (self.value(x), self.value(g), self.value(b));
        let mut out = vec![T::zero(); xv.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + 1e-6).sqrt();
            for j in 0..d {
                let xhat = T::from_f64((row[j].as_f64() - mu) * rs);
                out[r * d + j] = xhat * gv[j] + bv[j];
            }
            mean.push(T::from_f64(mu));
            rstd.push(T::from_f64(rs));
        }
        let ng = self.ng(&[x, g, b]);
        Ok(self.push(shape, out, Op::LayerNorm { x, g, b, mean, rstd }, ng))
    }

    /// Multi-head scaled dot-product attention restricted to `groups`.
    ///
    /// `q` is `[Nq, D]`, `k` and `v` are `[Nk, D]`; `D` is split into `heads`
    /// equal slices. Each query row belongs to at most one group; rows not
    /// listed in any group produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: Rc<Vec<AttnGroup>>) -> Result<Var> {
        let (nq, d) = matrix_dims(self.shape(q))?;
        let (nk, dk) = matrix_dims(self.shape(k))?;
        if self.shape(v) != self.shape(k) || dk != d {
            return Err(Error::shape("attention key/value/query widths differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::IndivisibleChannels { channels: d, divisor: heads });
        }
        let mut seen = vec![false; nq];
        for g in groups.iter() {
            if g.q.iter().any(|&i| i >= nq) || g.kv.iter().any(|&i| i >= nk) || g.kv.is_empty() {
                return Err(Error::shape("attention group indexes out of range"));
            }
            for &i in &g.q {
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::shape(format!("query row {i} is in more than one attention group")));
                }
            }
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); nq * d];
        let mut probs = Vec::new();
        let mut qg = Vec::new();
        let mut kg = Vec::new();
        let mut vg = Vec::new();
        let mut og = Vec::new();
        for g in groups.iter() {
            let (gq, gk) = (g.q.len(), g.kv.len());
            for h in 0..heads {
                let off = h * dh;
                gather_rows(qv, d, off, dh, &g.q, &mut qg);
                gather_rows(kv, d, off, dh, &g.kv, &mut kg);
                gather_rows(vv, d, off, dh, &g.kv, &mut vg);
                let start = probs.len();
                probs.resize(start + gq * gk, T::zero());
                let s = &mut probs[start..];
                gemm_acc(gq, dh, gk, &qg, (dh as isize, 1), &kg, (1, dh as isize), s, (gk as isize, 1), T::zero());
                s.iter_mut().for_each(|x| *x = *x * scale);
                softmax_rows(s, gk);
                og.clear();
                og.resize(gq * dh, T::zero());
                gemm_acc(gq, gk, dh, s, (gk as isize, 1), &vg, (dh as isize, 1), &mut og, (dh as isize, 1), T::zero());
                for (r, &qi) in g.q.iter().enumerate() {
                    out[qi * d + off..qi * d + off + dh].copy_from_slice(&og[r * dh..(r + 1) * dh]);
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            vec![nq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(a)) {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(shape, out, Op::Reshape(a), ng))
    }

    /// Transposes a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = matrix_dims(self.shape(a))?;
        let av = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), ng))
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(format!("concat: trailing dims {:?} vs {tail:?}", s)));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ng = self.ng(parts);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), ng))
    }

    /// `out[i] = a[idx[i]]`, or zero where `idx[i] == PAD`.
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != idx.len() {
            return Err(Error::shape("gather index length differs from output shape"));
        }
        let av = self.value(a);
        let n = av.len();
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            if i == PAD {
                out.push(T::zero());
            } else if i < n {
                out.push(av[i]);
            } else {
                return Err(Error::shape("gather index out of range"));
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(shape, out, Op::Gather { a, idx }, ng))
    }

    /// 2x2 max pooling with stride 2 over a `[C, H, W]` tensor.
    pub fn maxpool2(&mut self, a: Var) -> Result<Var> {
        let [c, h, w] = self.shape(a)[..] else {
            return Err(Error::shape("maxpool2 expects [C, H, W]"));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::IndivisibleDimensions { width: w, height: h, factor: 2 });
        }
        let (oh, ow) = (h / 2, w / 2);
        let av = self.value(a);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = (ch * h + 2 * y) * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (ch * h + 2 * y + dy) * w + 2 * x + dx;
                        if av[i] > av[best] {
                            best = i;
                        }
                    }
                    out.push(av[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(vec![c, oh, ow], out, Op::MaxPool2 { a, argmax }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|v| v.as_f64()).sum::<f64>();
        let ng = self.ng(&[a]);
        self.push(vec![1], vec![T::from_f64(s)], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let vals = self.value(a);
        let s = vals.iter().map(|v| v.as_f64()).sum::<f64>() / vals.len().max(1) as f64;
        let ng = self.ng(&[a]);
        self.push(vec![1], vec![T::from_f64(s)], Op::Mean(a), ng)
    }

    /// Mean binary cross-entropy on logits plus `iou_weight * (1 - soft IoU)`.
    pub fn bce_soft_iou(&mut self, z: Var, target: &[f32], iou_weight: f64) -> Result<Var> {
        let zv = self.value(z);
        if zv.len() != target.len() {
            return Err(Error::shape(format!(
                "loss: {} logits vs {} targets",
                zv.len(),
                target.len()
            )));
        }
        let n = zv.len().max(1) as f64;
        let mut bce = 0.0f64;
        let (mut inter, mut sp, mut st) = (0.0f64, 0.0f64, 0.0f64);
        let mut p = Vec::with_capacity(zv.len());
        for (&zi, &ti) in zv.iter().zip(target) {
            let (zf, tf) = (zi.as_f64(), ti as f64);
            bce += zf.max(0.0) - zf * tf + (-zf.abs()).exp().ln_1p();
            let pi = sigmoid(zi);
            let pf = pi.as_f64();
            inter += pf * tf;
            sp += pf;
            st += tf;
            p.push(pi);
        }
        let union = sp + st - inter + 1e-6;
        let loss = bce / n + iou_weight * (1.0 - inter / union);
        let ng = self.ng(&[z]);
        let target = target.iter().map(|&t| T::from_f64(t as f64)).collect();
        Ok(self.push(
            vec![1],
            vec![T::from_f64(loss)],
            Op::BceSoftIou {
                z,
                target,
                iou_weight: T::from_f64(iou_weight),
                p,
                inter,
                union,
            },
            ng,
        ))
    }

    /// Mean absolute difference to a fixed target.
    pub fn l1_loss(&mut self, a: Var, target: &[f32]) -> Result<Var> {
        let av = self.value(a);
        if av.len() != target.len() {
            return Err(Error::shape("l1 loss: prediction and target lengths differ"));
        }
        let s = av
            .iter()
            .zip(target)
            .map(|(x, &t)| (x.as_f64() - t as f64).abs())
            .sum::<f64>()
            / av.len().max(1) as f64;
        let ng = self.ng(&[a]);
        let target = target.iter().map(|&t| T::from_f64(t as f64)).collect();
        Ok(self.push(vec![1], vec![T::from_f64(s)], Op::L1 { a, target }, ng))
    }

    /// Propagates d(loss)/d(node) back to every tracked leaf.
    ///
    /// Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if matches!(node.op, Op::Leaf) {
            return Err(Error::GraphMissing);
        }
        if node.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !node.needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let tracked = |v: Var| nodes[v.0].needs_grad;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ra, ca) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let (rb, cb) = (nodes[b.0].shape[0], nodes[b.0].shape[1]);
                let (m, k) = if *ta { (ca, ra) } else { (ra, ca) };
                let n = if *tb { rb } else { cb };
                let sa = if *ta { (1, ca as isize) } else { (ca as isize, 1) };
                let sb = if *tb { (1, cb as isize) } else { (cb as isize, 1) };
                if tracked(*a) {
                    // dA_eff = dC * B_eff^T, written through A's storage strides
                    let buf = slot(grads, a.0, ra * ca);
                    gemm_acc(m, n, k, g, (n as isize, 1), &nodes[b.0].value, (sb.1, sb.0), buf, sa, T::one());
                }
                if tracked(*b) {
                    let buf = slot(grads, b.0, rb * cb);
                    gemm_acc(k, m, n, &nodes[a.0].value, (sa.1, sa.0), g, (n as isize, 1), buf, sb, T::one());
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(a, 1.0), (b, 1.0)] {
                    if tracked(*v) {
                        axpy(slot(grads, v.0, g.len()), g, T::from_f64(sign));
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(a, 1.0), (b, -1.0)] {
                    if tracked(*v) {
                        axpy(slot(grads, v.0, g.len()), g, T::from_f64(sign));
                    }
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let other = &nodes[b.0].value;
                    let buf = slot(grads, a.0, g.len());
                    for ((d, &gi), &o) in buf.iter_mut().zip(g).zip(other) {
                        *d = *d + gi * o;
                    }
                }
                if tracked(*b) {
                    let other = &nodes[a.0].value;
                    let buf = slot(grads, b.0, g.len());
                    for ((d, &gi), &o) in buf.iter_mut().zip(g).zip(other) {
                        *d = *d + gi * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if tracked(*a) {
                    axpy(slot(grads, a.0, g.len()), g, *c);
                }
            }
            Op::AddBias { x, b, mid, inner } => {
                if tracked(*x) {
                    axpy(slot(grads, x.0, g.len()), g, T::one());
                }
                if tracked(*b) {
                    let mut acc = vec![0.0f64; *mid];
                    for (j, &gi) in g.iter().enumerate() {
                        acc[(j / inner) % mid] += gi.as_f64();
                    }
                    let buf = slot(grads, b.0, *mid);
                    for (d, a) in buf.iter_mut().zip(acc) {
                        *d = *d + T::from_f64(a);
                    }
                }
            }
            Op::Gelu(a) => unary(grads, nodes, *a, g, |x, _| gelu_grad(x)),
            Op::Relu(a) => unary(grads, nodes, *a, g, |x, _| if x > T::zero() { T::one() } else { T::zero() }),
            Op::Sigmoid(a) => {
                let y = &node.value;
                if tracked(*a) {
                    let buf = slot(grads, a.0, g.len());
                    for ((d, &gi), &yi) in buf.iter_mut().zip(g).zip(y) {
                        *d = *d + gi * yi * (T::one() - yi);
                    }
                }
            }
            Op::Abs(a) => unary(grads, nodes, *a, g, |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }),
            Op::LayerNorm { x, g: gain, b, mean, rstd } => {
                let d = *node.shape.last().unwrap_or(&1);
                let xv = &nodes[x.0].value;
                let gv = &nodes[gain.0].value;
                let rows = mean.len();
                let mut dgain = vec![0.0f64; d];
                let mut dshift = vec![0.0f64; d];
                let mut dx = if tracked(*x) { vec![T::zero(); xv.len()] } else { Vec::new() };
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for j in 0..d {
                        let xhat = (xv[r * d + j] - mu) * rs;
                        let dy = g[r * d + j];
                        dgain[j] += (dy * xhat).as_f64();
                        dshift[j] += dy.as_f64();
                        let dxhat = (dy * gv[j]).as_f64();
                        s1 += dxhat;
                        s2 += dxhat * xhat.as_f64();
                    }
                    if !dx.is_empty() {
                        let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                        for j in 0..d {
                            let xhat = ((xv[r * d + j] - mu) * rs).as_f64();
                            let dxhat = (g[r * d + j] * gv[j]).as_f64();
                            dx[r * d + j] = T::from_f64(rs.as_f64() * (dxhat - m1 - xhat * m2));
                        }
                    }
                }
                if tracked(*x) {
                    axpy(slot(grads, x.0, dx.len()), &dx, T::one());
                }
                if tracked(*gain) {
                    let buf = slot(grads, gain.0, d);
                    for (o, a) in buf.iter_mut().zip(dgain) {
                        *o = *o + T::from_f64(a);
                    }
                }
                if tracked(*b) {
                    let buf = slot(grads, b.0, d);
                    for (o, a) in buf.iter_mut().zip(dshift) {
                        *o = *o + T::from_f64(a);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => {
                let d = nodes[q.0].shape[1];
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let mut dq = vec![T::zero(); if tracked(*q) { qv.len() } else { 0 }];
                let mut dk = vec![T::zero(); if tracked(*k) { kv.len() } else { 0 }];
                let mut dv = vec![T::zero(); if tracked(*v) { vv.len() } else { 0 }];
                let (mut qg, mut kg, mut vg, mut gog) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                let mut dp = Vec::new();
                let mut tmp = Vec::new();
                let mut off_p = 0;
                for grp in groups.iter() {
                    let (gq, gk) = (grp.q.len(), grp.kv.len());
                    for h in 0..*heads {
                        let off = h * dh;
                        let p = &probs[off_p..off_p + gq * gk];
                        off_p += gq * gk;
                        gather_rows(g, d, off, dh, &grp.q, &mut gog);
                        gather_rows(vv, d, off, dh, &grp.kv, &mut vg);
                        if !dv.is_empty() {
                            // dV = P^T dO
                            tmp.clear();
                            tmp.resize(gk * dh, T::zero());
                            gemm_acc(gk, gq, dh, p, (1, gk as isize), &gog, (dh as isize, 1), &mut tmp, (dh as isize, 1), T::zero());
                            scatter_rows(&tmp, &mut dv, d, off, dh, &grp.kv);
                        }
                        if dq.is_empty() && dk.is_empty() {
                            continue;
                        }
                        // dP = dO V^T, then softmax adjoint
                        dp.clear();
                        dp.resize(gq * gk, T::zero());
                        gemm_acc(gq, dh, gk, &gog, (dh as isize, 1), &vg, (1, dh as isize), &mut dp, (gk as isize, 1), T::zero());
                        for r in 0..gq {
                            let row_p = &p[r * gk..(r + 1) * gk];
                            let row_d = &mut dp[r * gk..(r + 1) * gk];
                            let dot: f64 = row_p.iter().zip(row_d.iter()).map(|(a, b)| (*a * *b).as_f64()).sum();
                            let dot = T::from_f64(dot);
                            for (dd, &pp) in row_d.iter_mut().zip(row_p) {
                                *dd = pp * (*dd - dot) * scale;
                            }
                        }
                        if !dq.is_empty() {
                            gather_rows(kv, d, off, dh, &grp.kv, &mut kg);
                            tmp.clear();
                            tmp.resize(gq * dh, T::zero());
                            gemm_acc(gq, gk, dh, &dp, (gk as isize, 1), &kg, (dh as isize, 1), &mut tmp, (dh as isize, 1), T::zero());
                            scatter_rows(&tmp, &mut dq, d, off, dh, &grp.q);
                        }
                        if !dk.is_empty() {
                            gather_rows(qv, d, off, dh, &grp.q, &mut qg);
                            tmp.clear();
                            tmp.resize(gk * dh, T::zero());
                            gemm_acc(gk, gq, dh, &dp, (1, gk as isize), &qg, (dh as isize, 1), &mut tmp, (dh as isize, 1), T::zero());
                            scatter_rows(&tmp, &mut dk, d, off, dh, &grp.kv);
                        }
                    }
                }
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if !buf.is_empty() {
                        axpy(slot(grads, var.0, buf.len()), &buf, T::one());
                    }
                }
            }
            Op::Reshape(a) => {
                if tracked(*a) {
                    axpy(slot(grads, a.0, g.len()), g, T::one());
                }
            }
            Op::Transpose(a) => {
                if tracked(*a) {
                    let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let buf = slot(grads, a.0, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] = buf[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    if tracked(*p) {
                        axpy(slot(grads, p.0, n), &g[off..off + n], T::one());
                    }
                    off += n;
                }
            }
            Op::Gather { a, idx } => {
                if tracked(*a) {
                    let buf = slot(grads, a.0, nodes[a.0].value.len());
                    for (&j, &gi) in idx.iter().zip(g) {
                        if j != PAD {
                            buf[j] = buf[j] + gi;
                        }
                    }
                }
            }
            Op::MaxPool2 { a, argmax } => {
                if tracked(*a) {
                    let buf = slot(grads, a.0, nodes[a.0].value.len());
                    for (&j, &gi) in argmax.iter().zip(g) {
                        buf[j] = buf[j] + gi;
                    }
                }
            }
            Op::Sum(a) => {
                if tracked(*a) {
                    let n = nodes[a.0].value.len();
                    slot(grads, a.0, n).iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(a) => {
                if tracked(*a) {
                    let n = nodes[a.0].value.len();
                    let s = g[0] / T::from_f64(n.max(1) as f64);
                    slot(grads, a.0, n).iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::BceSoftIou {
                z,
                target,
                iou_weight,
                p,
                inter,
                union,
            } => {
                if tracked(*z) {
                    let n = p.len().max(1) as f64;
                    let w = iou_weight.as_f64();
                    let u2 = union * union;
                    let buf = slot(grads, z.0, p.len());
                    for ((d, &pi), &ti) in buf.iter_mut().zip(p).zip(target) {
                        let (pf, tf) = (pi.as_f64(), ti.as_f64());
                        let diou = (tf * union - inter * (1.0 - tf)) / u2;
                        let dz = (pf - tf) / n - w * diou * pf * (1.0 - pf);
                        *d = *d + T::from_f64(dz * g[0].as_f64());
                    }
                }
            }
            Op::L1 { a, target } => {
                if tracked(*a) {
                    let av = &nodes[a.0].value;
                    let s = g[0] / T::from_f64(av.len().max(1) as f64);
                    let buf = slot(grads, a.0, av.len());
                    for ((d, &x), &t) in buf.iter_mut().zip(av).zip(target) {
                        if x > t {
                            *d = *d + s;
                        } else if x < t {
                            *d = *d - s;
                        }
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, len: usize) -> &mut [T] {
    grads[i].get_or_insert_with(|| vec![T::zero(); len])
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], c: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + c * s;
    }
}

fn unary<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], a: Var, g: &[T], f: impl Fn(T, T) -> T) {
    if !nodes[a.0].needs_grad {
        return;
    }
    let x = &nodes[a.0].value;
    let buf = slot(grads, a.0, g.len());
    for ((d, &gi), &xi) in buf.iter_mut().zip(g).zip(x) {
        *d = *d + gi * f(xi, gi);
    }
}

fn gather_rows<T: Scalar>(src: &[T], stride: usize, off: usize, width: usize, rows: &[usize], dst: &mut Vec<T>) {
    dst.clear();
    for &r in rows {
        dst.extend_from_slice(&src[r * stride + off..r * stride + off + width]);
    }
}

fn scatter_rows<T: Scalar>(src: &[T], dst: &mut [T], stride: usize, off: usize, width: usize, rows: &[usize]) {
    for (i, &r) in rows.iter().enumerate() {
        let d = &mut dst[r * stride + off..r * stride + off + width];
        for (a, &b) in d.iter_mut().zip(&src[i * width..(i + 1) * width]) {
            *a = *a + b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient_is_input() {
        let mut t = Tape::<f64>::new();
        let w = t.leaf(vec![3], vec![0.5, -1.0, 2.0], true).unwrap();
        let x = t.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let wx = t.mul(w, x).unwrap();
        let loss = t.sum(wx);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0, 2.0, 3.0]);
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_on_leaf_is_graph_missing() {
        let mut t = Tape::<f32>::new();
        let w = t.leaf(vec![1], vec![1.0], true).unwrap();
        assert!(matches!(t.backward(w), Err(Error::GraphMissing)));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut t = Tape::<f32>::new();
        let w = t.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        let y = t.relu(w);
        assert!(matches!(t.backward(y), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn two_token_attention_matches_hand_softmax() {
        // q = k = v = [[1, 0], [0, 1]], single head of width 2
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let groups = Rc::new(vec![AttnGroup::square(vec![0, 1])]);
        let y = t.attention(x, x, x, 1, groups).unwrap();
        // scores [[1,0],[0,1]] / sqrt 2, softmax row 0 = [e^a, 1] / (e^a + 1)
        let a = 1.0 / 2f64.sqrt();
        let p = a.exp() / (a.exp() + 1.0);
        let expected = [p, 1.0 - p, 1.0 - p, p];
        for (o, e) in t.value(y).iter().zip(expected) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut v: Vec<f32> = (0..60).map(|i| ((i * 37) % 17) as f32 - 8.0).collect();
        softmax_rows(&mut v, 12);
        for row in v.chunks(12) {
            let s: f64 = row.iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut t = Tape::<f32>::new();
        let x = t
            .constant(vec![4, 16], (0..64).map(|i| ((i * 13) % 29) as f32 * 0.7 - 3.0).collect())
            .unwrap();
        let g = t.constant(vec![16], vec![1.0; 16]).unwrap();
        let b = t.constant(vec![16], vec![0.0; 16]).unwrap();
        let y = t.layer_norm(x, g, b).unwrap();
        for row in t.value(y).chunks(16) {
            let mu = row.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            let var = row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / 16.0;
            assert!(mu.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    fn bce_oracle(z: &[f64], t: &[f64], w: f64) -> f64 {
        let n = z.len() as f64;
        let mut bce = 0.0;
        let (mut i, mut sp, mut st) = (0.0, 0.0, 0.0);
        for k in 0..z.len() {
            let p = 1.0 / (1.0 + (-z[k]).exp());
            bce += -(t[k] * p.ln() + (1.0 - t[k]) * (1.0 - p).ln());
            i += p * t[k];
            sp += p;
            st += t[k];
        }
        bce / n + w * (1.0 - i / (sp + st - i + 1e-6))
    }

    #[test]
    fn loss_at_zero_logits_is_ln2() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(vec![6], vec![0.0; 6]).unwrap();
        let l = t.bce_soft_iou(z, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0], 0.0).unwrap();
        assert!((t.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_saturated_perfect_prediction_vanishes() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(vec![4], vec![60.0, -60.0, 60.0, -60.0]).unwrap();
        let l = t.bce_soft_iou(z, &[1.0, 0.0, 1.0, 0.0], 1.0).unwrap();
        assert!(t.value(l)[0].abs() < 1e-6);
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let z: Vec<f64> = (0..25).map(|i| ((i * 7919) % 23) as f64 / 4.0 - 2.8).collect();
        let tg: Vec<f32> = (0..25).map(|i| ((i * 31) % 3 == 0) as u8 as f32).collect();
        let mut t = Tape::<f32>::new();
        let zf: Vec<f32> = z.iter().map(|&v| v as f32).collect();
        let zv = t.leaf_f32(&[25], &zf, false).unwrap();
        let l = t.bce_soft_iou(zv, &tg, 1.0).unwrap();
        let zr: Vec<f64> = zf.iter().map(|&v| v as f64).collect();
        let tr: Vec<f64> = tg.iter().map(|&v| v as f64).collect();
        assert!((t.value(l)[0] as f64 - bce_oracle(&zr, &tr, 1.0)).abs() < 1e-6);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut t = Tape::<f32>::new();
        let w_frozen = t.leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let w = t.leaf(vec![2, 2], vec![0.5; 4], true).unwrap();
        let h = t.matmul(w_frozen, w).unwrap();
        let l = t.mean(h);
        t.backward(l).unwrap();
        assert!(t.grad(w_frozen).is_none());
        assert!(t.grad(w).is_some());
    }
}
