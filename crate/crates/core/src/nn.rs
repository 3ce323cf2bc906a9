//! Named parameter storage and the convolutional building blocks shared by
//! every network.

use std::collections::HashMap;
use std::ops::Index;

use microanim_tensor::{init, Tape, Tensor, Var};
use rand::Rng;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Ids whose name starts with `prefix`, in insertion order.
    pub fn group(&self, prefix: &str) -> Vec<ParamId> {
        self.ids().filter(|&id| self.names[id.0].starts_with(prefix)).collect()
    }

    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.values[id.0].len()).sum()
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if value.shape() != self.values[i].shape() {
            return Err(Error::invalid(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                self.values[i].shape(),
                value.shape()
            )));
        }
        self.values[i] = value;
        Ok(())
    }

    /// Mutable references to the listed parameters, in the listed order.
    pub fn get_many_mut(&mut self, ids: &[ParamId]) -> Vec<&mut Tensor> {
        let mut slots: Vec<Option<&mut Tensor>> = self.values.iter_mut().map(Some).collect();
        ids.iter()
            .map(|id| slots[id.0].take().expect("parameter listed twice"))
            .collect()
    }

    /// Places every parameter on `tape`; those selected by `trainable` become
    /// gradient-receiving leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| {
                if trainable(name) {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Tape variables of a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Variables already on a tape, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Xavier,
    Zero,
}

/// 2-D convolution with bias and "same" padding.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let shape = [c_out, c_in, k, k];
        let w = match init {
            Init::Xavier => init::xavier_uniform(&shape, rng),
            Init::Zero => Tensor::zeros(&shape),
        };
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(t.conv2d(x, p[self.weight], Some(p[self.bias]), self.stride, self.pad)?)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }
}

/// Encoder-decoder with skip connections. Each encoder level halves the
/// resolution; the output carries `base + in_channels` channels at the input
/// resolution.
#[derive(Clone, Debug)]
pub struct Hourglass {
    down: Vec<Conv>,
    up: Vec<Conv>,
    out_channels: usize,
}

impl Hourglass {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c_in: usize, base: usize, depth: usize) -> Self {
        assert!(depth >= 1);
        let mut chans = vec![c_in];
        for i in 1..=depth {
            chans.push(base << (i - 1));
        }
        let down = (1..=depth)
            .map(|i| Conv::new(store, rng, &format!("{name}.down{i}"), chans[i - 1], chans[i], 3, 1, Init::Xavier))
            .collect();
        let mut up = Vec::new();
        let mut c = chans[depth];
        for j in (1..=depth).rev() {
            let out = if j >= 2 { chans[j - 1] } else { base };
            up.push(Conv::new(store, rng, &format!("{name}.up{j}"), c, out, 3, 1, Init::Xavier));
            c = out + chans[j - 1];
        }
        Self {
            down,
            up,
            out_channels: c,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut skips = vec![x];
        let mut h = x;
        for conv in &self.down {
            let c = conv.forward(t, p, h)?;
            let a = t.relu(c)?;
            h = t.avg_pool2(a)?;
            skips.push(h);
        }
        skips.pop();
        for conv in &self.up {
            let u = t.upsample2(h)?;
            let c = conv.forward(t, p, u)?;
            let a = t.relu(c)?;
            let skip = skips.pop().expect("one skip per level");
            h = t.concat(&[a, skip])?;
        }
        Ok(h)
    }
}

/// Two 3×3 convolutions with an identity shortcut.
#[derive(Clone, Debug)]
pub struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize) -> Self {
        Self {
            a: Conv::new(store, rng, &format!("{name}.a"), c, c, 3, 1, Init::Xavier),
            b: Conv::new(store, rng, &format!("{name}.b"), c, c, 3, 1, Init::Xavier),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.a.forward(t, p, x)?;
        let h = t.relu(h)?;
        let h = self.b.forward(t, p, h)?;
        let s = t.add(x, h)?;
        Ok(t.relu(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hourglass_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hg = Hourglass::new(&mut store, &mut rng, "hg", 4, 8, 2);
        assert_eq!(hg.out_channels(), 12);
        let mut t = Tape::new();
        let p = store.bind(&mut t, |_| true);
        let x = t.constant(Tensor::ones(&[4, 16, 16]));
        let y = hg.forward(&mut t, &p, x).unwrap();
        assert_eq!(t.shape(y), &[12, 16, 16]);
    }

    #[test]
    fn store_groups_and_set() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Conv::new(&mut store, &mut rng, "a.c", 1, 2, 3, 1, Init::Zero);
        Conv::new(&mut store, &mut rng, "b.c", 2, 2, 1, 1, Init::Xavier);
        assert_eq!(store.group("a.").len(), 2);
        assert_eq!(store.count(&store.group("b.")), 6);
        assert!(store.set("a.c.bias", Tensor::zeros(&[3])).is_err());
        store.set("a.c.bias", Tensor::ones(&[2])).unwrap();
        assert_eq!(store.get(store.id("a.c.bias").unwrap()).sum(), 2.0);
    }
}
