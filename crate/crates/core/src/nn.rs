//! Named parameters and the convolutional building blocks shared by the
//! networks.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ops::Conv2d;
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor};

/// Negative slope of every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
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

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces every value; names and shapes must match the current store.
    pub fn set_values(&mut self, values: Vec<Tensor>) {
        assert_eq!(values.len(), self.values.len());
        for (old, new) in self.values.iter().zip(&values) {
            assert_eq!(old.shape(), new.shape());
        }
        self.values = values;
    }

    /// Records every parameter on `tape`; only those accepted by `trainable`
    /// take part in differentiation.
    pub fn bind(&self, tape: &Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| tape.leaf(v.clone(), trainable(n)))
            .collect();
        Bound { vars }
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps externally recorded variables, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// He-normal initialization source with a fixed seed.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        Tensor::new(shape, (0..n).map(|_| dist.sample(&mut self.rng)).collect()).expect("shape")
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub conv: Conv2d,
}

impl ConvLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        conv: Conv2d,
    ) -> Self {
        Self::with_gain(store, init, name, kernel, cin, cout, conv, 1.0)
    }

    /// As [`ConvLayer::new`] with the He standard deviation multiplied by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_gain(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        conv: Conv2d,
        gain: f64,
    ) -> Self {
        let fan_in = (kernel * kernel * cin) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let weight = store.insert(format!("{name}.w"), init.normal(&[kernel, kernel, cin, cout], std));
        let bias = store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        ConvLayer { weight, bias, conv }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.conv)
    }
}

/// Pre-activation residual block: `x + conv(act(conv(act(x))))`, with a 1x1
/// projection on the shortcut when the channel count changes.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub shortcut: Option<ConvLayer>,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize, dilation: usize) -> Self {
        let conv = Conv2d { stride: 1, padding: dilation, dilation };
        let conv1 = ConvLayer::new(store, init, &format!("{name}.conv1"), 3, cin, cout, conv);
        // residual branch starts small so the block is close to identity
        let conv2 = ConvLayer::with_gain(store, init, &format!("{name}.conv2"), 3, cout, cout, conv, 0.5);
        let shortcut = (cin != cout)
            .then(|| ConvLayer::new(store, init, &format!("{name}.proj"), 1, cin, cout, Conv2d::default()));
        ResidualBlock { conv1, conv2, shortcut }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        let a = tape.leaky_relu(x, LEAKY_SLOPE)?;
        let h = self.conv1.forward(tape, p, a)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.conv2.forward(tape, p, h)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(tape, p, a)?,
            None => x,
        };
        tape.add(h, skip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_names_are_unique_and_ordered() {
        let mut s = ParamStore::new();
        let a = s.insert("a", Tensor::zeros(&[2]));
        let b = s.insert("b", Tensor::zeros(&[3]));
        assert_eq!(s.id("b"), Some(b));
        assert_eq!(s.name(a), "a");
        assert_eq!(s.num_scalars(), 5);
        let names: Vec<_> = s.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn residual_block_preserves_spatial_size() {
        let mut s = ParamStore::new();
        let mut init = Init::new(1);
        let block = ResidualBlock::new(&mut s, &mut init, "r", 5, 8, 1);
        let tape = Tape::new();
        let p = s.bind(&tape, |_| true);
        let x = tape.constant(init.normal(&[6, 7, 5], 1.0));
        let y = block.forward(&tape, &p, x).unwrap();
        assert_eq!(tape.shape(y), vec![6, 7, 8]);
    }
}
