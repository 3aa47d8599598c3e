use crate::error::{Error, Result};

/// Dense `f32` array with an optional gradient of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f32>,
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.values.fill(value);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if g.len() != self.values.len() {
            return Err(Error::shape("gradient length differs from tensor length"));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }
}

/// Elementwise `x * Phi(x)` using the exact error-function form.
pub fn gelu(x: &Tensor) -> Tensor {
    let values = x
        .values
        .iter()
        .map(|&v| {
            let v = v as f64;
            (0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))) as f32
        })
        .collect();
    Tensor {
        shape: x.shape.clone(),
        values,
        grad: None,
        requires_grad: false,
    }
}

/// `out(c, h*r + i, w*r + j) = in(c*r*r + i*r + j, h, w)` for a `[C*r*r, H, W]` tensor.
pub fn pixel_shuffle(t: &Tensor, r: usize) -> Result<Tensor> {
    let [cin, h, w] = t.shape[..] else {
        return Err(Error::shape(format!("pixel_shuffle expects rank 3, got {:?}", t.shape)));
    };
    if r == 0 || cin % (r * r) != 0 {
        return Err(Error::IndivisibleChannels {
            channels: cin,
            divisor: r * r,
        });
    }
    let c = cin / (r * r);
    let mut out = vec![0.0f32; t.values.len()];
    shuffle_into(&t.values, &mut out, c, h, w, r);
    Tensor::new(vec![c, h * r, w * r], out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(t: &Tensor, r: usize) -> Result<Tensor> {
    let [c, hr, wr] = t.shape[..] else {
        return Err(Error::shape("pixel_unshuffle expects rank 3"));
    };
    if r == 0 || hr % r != 0 || wr % r != 0 {
        return Err(Error::IndivisibleDimensions { width: wr, height: hr, factor: r });
    }
    let (h, w) = (hr / r, wr / r);
    let mut out = vec![0.0f32; t.values.len()];
    for (i, o) in out.iter_mut().enumerate() {
        *o = t.values[shuffle_index(i, c, h, w, r)];
    }
    Tensor::new(vec![c * r * r, h, w], out)
}

/// Output index of input element `i` under pixel shuffle.
#[inline]
pub(crate) fn shuffle_index(i: usize, c: usize, h: usize, w: usize, r: usize) -> usize {
    let plane = h * w;
    let (ch, rem) = (i / plane, i % plane);
    let (y, x) = (rem / w, rem % w);
    let (oc, sub) = (ch / (r * r), ch % (r * r));
    let (di, dj) = (sub / r, sub % r);
    debug_assert!(oc < c);
    (oc * h * r + y * r + di) * (w * r) + x * r + dj
}

pub(crate) fn shuffle_into<T: Copy>(src: &[T], dst: &mut [T], c: usize, h: usize, w: usize, r: usize) {
    for (i, &v) in src.iter().enumerate() {
        dst[shuffle_index(i, c, h, w, r)] = v;
    }
}
