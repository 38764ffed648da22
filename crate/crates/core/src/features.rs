//! Frozen convolutional feature backbone used by the perceptual, contextual
//! and style terms and by the image-quality metrics.
//!
//! The weights are generated from a fixed seed. The first three filters of the
//! first layer pass the colour channels through unchanged so that every layer
//! stays sensitive to colour as well as texture.

use std::sync::OnceLock;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Init, ParamStore};
use crate::tensor::Tensor;

pub const LAYERS: [&str; 4] = ["conv1", "conv2", "conv3", "conv4"];
const WIDTHS: [usize; 4] = [16, 32, 32, 64];
const SEED: u64 = 0x5EED_F00D;

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    params: ParamStore,
    convs: Vec<Conv2d>,
}

impl FeatureExtractor {
    pub fn new() -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(SEED);
        let mut convs = Vec::with_capacity(LAYERS.len());
        let mut cin = 3;
        for (i, (&name, &cout)) in LAYERS.iter().zip(&WIDTHS).enumerate() {
            if i == 0 {
                let mut w = init.he_uniform(&[cout, cin, 3, 3], cin * 9).into_vec();
                let mut b = vec![0.0; cout];
                for c in 0..3 {
                    let filt = &mut w[c * cin * 9..(c + 1) * cin * 9];
                    filt.fill(0.0);
                    filt[c * 9 + 4] = 1.0;
                    b[c] = 0.5;
                }
                convs.push(Conv2d::register_with(
                    &mut params,
                    name,
                    Tensor::new(vec![cout, cin, 3, 3], w).expect("sized above"),
                    Tensor::new(vec![cout], b).expect("sized above"),
                ));
            } else {
                convs.push(Conv2d::register(&mut params, &mut init, name, (cin, cout), 3));
            }
            cin = cout;
        }
        Self { params, convs }
    }

    /// Process-wide shared instance.
    pub fn shared() -> &'static FeatureExtractor {
        static SHARED: OnceLock<FeatureExtractor> = OnceLock::new();
        SHARED.get_or_init(FeatureExtractor::new)
    }

    pub fn layer_index(name: &str) -> Result<usize> {
        LAYERS
            .iter()
            .position(|&l| l == name)
            .ok_or_else(|| Error::Config(format!("unknown feature layer `{name}`; expected one of {LAYERS:?}")))
    }

    /// Frozen weights, named `conv{i}.weight` / `conv{i}.bias`.
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn channels(layer: usize) -> usize {
        WIDTHS[layer]
    }

    /// Activations of layers `0..=upto` for `[n, 3, H, W]` inputs in `[0, 1]`.
    /// Layer `i` runs at `1 / 2^i` of the input resolution.
    pub fn forward_var(&self, x: &Var, upto: usize) -> Result<Vec<Var>> {
        if upto >= LAYERS.len() {
            return Err(Error::Config(format!("feature layer {upto} out of range")));
        }
        let p = Bound::new(x.graph(), &self.params, "features", false);
        let mut out = Vec::with_capacity(upto + 1);
        let mut h = x.offset(-0.5);
        for (i, conv) in self.convs.iter().take(upto + 1).enumerate() {
            if i > 0 {
                h = h.avg_pool(2)?;
            }
            h = conv.forward(&p, &h)?.relu();
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Plain-tensor activations for one `[3, H, W]` image.
    pub fn forward(&self, image: &Tensor, upto: usize) -> Result<Vec<Tensor>> {
        let g = Graph::new();
        let [c, h, w] = match *image.shape() {
            [c, h, w] => [c, h, w],
            _ => return Err(Error::shape(format!("expected [3, h, w], got {:?}", image.shape()))),
        };
        let acts = self.forward_var(&g.constant(image.reshape(&[1, c, h, w])?), upto)?;
        acts.iter()
            .map(|a| {
                let s = a.shape();
                a.value().reshape(&s[1..])
            })
            .collect()
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}
