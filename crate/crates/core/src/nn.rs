//! Parameter storage and the small convolutional building blocks the
//! networks are assembled from.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::tensor::Tensor;

/// Named weight tensors of one network segment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Check that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Consistency(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (name, t) in &self.tensors {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(Error::Consistency(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    o.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of one segment bound onto a graph, either trainable or frozen.
#[derive(Clone)]
pub struct Bound<'a> {
    graph: Graph,
    store: &'a ParamStore,
    prefix: &'a str,
    trainable: bool,
}

impl<'a> Bound<'a> {
    pub fn new(graph: &Graph, store: &'a ParamStore, prefix: &'a str, trainable: bool) -> Self {
        Self { graph: graph.clone(), store, prefix, trainable }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        let t = self.store.get(name)?;
        Ok(if self.trainable {
            self.graph.param(&format!("{}/{}", self.prefix, name), t)
        } else {
            self.graph.frozen(t)
        })
    }
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// He-uniform for a ReLU layer with `fan_in` inputs.
    pub fn he_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound))
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    name: String,
    geo: ConvGeometry,
}

impl Conv2d {
    /// Register a `k×k` convolution with "same" padding.
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        (cin, cout): (usize, usize),
        k: usize,
    ) -> Self {
        let weight = init.he_uniform(&[cout, cin, k, k], cin * k * k);
        store.insert(format!("{name}.weight"), weight);
        store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { name: name.to_string(), geo: ConvGeometry { stride: 1, pad: k / 2 } }
    }

    /// Same layout as [`Conv2d::register`] but with caller-supplied tensors.
    pub fn register_with(
        store: &mut ParamStore,
        name: &str,
        weight: Tensor,
        bias: Tensor,
    ) -> Self {
        let k = weight.shape()[2];
        store.insert(format!("{name}.weight"), weight);
        store.insert(format!("{name}.bias"), bias);
        Self { name: name.to_string(), geo: ConvGeometry { stride: 1, pad: k / 2 } }
    }

    pub fn forward(&self, p: &Bound<'_>, x: &Var) -> Result<Var> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = p.get(&format!("{}.bias", self.name))?;
        x.conv2d(&w, Some(&b), self.geo)
    }
}

/// Channel widths of an encoder–decoder with skip connections.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HourglassSpec {
    pub blocks: usize,
    pub base: usize,
    pub max: usize,
}

impl HourglassSpec {
    fn width(&self, level: usize) -> usize {
        (self.base << level).min(self.max)
    }
}

/// U-shaped encoder–decoder: each down block is conv–ReLU–avgpool, each up
/// block is upsample–conv–ReLU followed by concatenation with the matching
/// encoder activation. Output resolution equals input resolution.
#[derive(Clone, Debug)]
pub struct Hourglass {
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    out_channels: usize,
}

impl Hourglass {
    pub fn register(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, spec: HourglassSpec) -> Self {
        let mut down = Vec::with_capacity(spec.blocks);
        let mut skip = vec![cin];
        let mut c = cin;
        for i in 0..spec.blocks {
            let out = spec.width(i + 1);
            down.push(Conv2d::register(store, init, &format!("{name}.down{i}"), (c, out), 3));
            skip.push(out);
            c = out;
        }
        let mut up = Vec::with_capacity(spec.blocks);
        skip.pop();
        for i in (0..spec.blocks).rev() {
            let out = spec.width(i);
            up.push(Conv2d::register(store, init, &format!("{name}.up{i}"), (c, out), 3));
            c = out + skip.pop().expect("one skip per block");
        }
        Self { down, up, out_channels: c }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Side length the input must be divisible by.
    pub fn granularity(&self) -> usize {
        1 << self.down.len()
    }

    pub fn forward(&self, p: &Bound<'_>, x: &Var) -> Result<Var> {
        let shape = x.shape();
        let g = self.granularity();
        if shape.len() != 4 || shape[2] % g != 0 || shape[3] % g != 0 {
            return Err(Error::shape(format!("hourglass input {shape:?} must be divisible by {g}")));
        }
        let mut skips = vec![x.clone()];
        let mut h = x.clone();
        for conv in &self.down {
            h = conv.forward(p, &h)?.relu().avg_pool(2)?;
            skips.push(h.clone());
        }
        skips.pop();
        for conv in &self.up {
            h = conv.forward(p, &h.upsample(2)?)?.relu();
            let skip = skips.pop().expect("one skip per block");
            h = Var::concat(&[h, skip], 1)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hourglass_preserves_resolution() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let spec = HourglassSpec { blocks: 3, base: 4, max: 16 };
        let hg = Hourglass::register(&mut store, &mut init, "hg", 3, spec);
        assert_eq!(hg.out_channels(), 4 + 3);
        let g = Graph::new();
        let p = Bound::new(&g, &store, "seg", false);
        let x = g.constant(Tensor::zeros(&[2, 3, 16, 16]));
        let y = hg.forward(&p, &x).unwrap();
        assert_eq!(y.shape(), vec![2, 7, 16, 16]);
        let bad = g.constant(Tensor::zeros(&[1, 3, 12, 12]));
        assert!(hg.forward(&p, &bad).is_err());
    }

    #[test]
    fn layout_check_catches_shape_drift() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::zeros(&[2, 2]));
        let mut b = ParamStore::new();
        b.insert("w", Tensor::zeros(&[2, 3]));
        assert!(matches!(a.check_layout(&b), Err(Error::Consistency(_))));
        assert!(a.check_layout(&a.clone()).is_ok());
    }

    #[test]
    fn trainable_binding_exposes_gradients() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let conv = Conv2d::register(&mut store, &mut init, "c", (1, 2), 3);
        let g = Graph::new();
        let p = Bound::new(&g, &store, "seg", true);
        let x = g.constant(Tensor::ones(&[1, 1, 4, 4]));
        let y = conv.forward(&p, &x).unwrap().sum_all();
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads.param("seg/c.bias").unwrap().data(), &[16.0, 16.0]);
    }
}
