use std::collections::HashMap;
use std::ops::{Deref, DerefMut};
use std::rc::Rc;

use super::{ModelCheckpoint, Scalar, Tape, Var};
use crate::error::Result;

/// A tape bound to a checkpoint: parameters are pulled in by name on first use.
///
/// Frozen parameters enter the tape as constants, so no gradient is ever
/// computed for them.
pub struct Graph<'a, T: Scalar> {
    ckpt: &'a ModelCheckpoint,
    tape: Tape<T>,
    bound: HashMap<String, Var>,
    indices: HashMap<(&'static str, [usize; 4]), Rc<Vec<usize>>>,
    track: bool,
    offset: Option<(String, usize, f64)>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// Graph that tracks gradients for unfrozen parameters.
    pub fn new(ckpt: &'a ModelCheckpoint) -> Self {
        Self {
            ckpt,
            tape: Tape::new(),
            bound: HashMap::new(),
            indices: HashMap::new(),
            track: true,
            offset: None,
        }
    }

    /// Graph for evaluation only; nothing is tracked.
    pub fn inference(ckpt: &'a ModelCheckpoint) -> Self {
        Self {
            track: false,
            ..Self::new(ckpt)
        }
    }

    /// Graph in which element `index` of parameter `name` is shifted by `delta`.
    ///
    /// The shift is applied after conversion to `T`, so finite differences in
    /// `f64` are not limited by the checkpoint's `f32` storage.
    pub fn perturbed(ckpt: &'a ModelCheckpoint, name: &str, index: usize, delta: f64) -> Self {
        Self {
            track: false,
            offset: Some((name.to_string(), index, delta)),
            ..Self::new(ckpt)
        }
    }

    pub fn checkpoint(&self) -> &ModelCheckpoint {
        self.ckpt
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.ckpt.get(name)?;
        let trainable = self.track && !self.ckpt.is_frozen(name);
        let mut values: Vec<T> = t.values().iter().map(|&x| T::from_f64(x as f64)).collect();
        if let Some((target, i, delta)) = &self.offset {
            if target == name {
                values[*i] = values[*i] + T::from_f64(*delta);
            }
        }
        let v = self.tape.leaf(t.shape().to_vec(), values, trainable)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Bound parameter handles, for reading gradients after `backward`.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of every tracked parameter as `f32`, sorted by name.
    pub fn param_grads(&self) -> Vec<(String, Vec<f32>)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(name, &v)| {
                self.tape
                    .grad(v)
                    .map(|g| (name.clone(), g.iter().map(|x| x.as_f64() as f32).collect()))
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Memoized index table (im2col maps, window partitions, ...).
    pub fn index_table(&mut self, kind: &'static str, key: [usize; 4], build: impl FnOnce() -> Vec<usize>) -> Rc<Vec<usize>> {
        self.indices.entry((kind, key)).or_insert_with(|| Rc::new(build())).clone()
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }
}

impl<T: Scalar> Deref for Graph<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Scalar> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}
