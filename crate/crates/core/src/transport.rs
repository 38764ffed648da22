//! Confidence masks, the K+1 channel attention and region transportation.

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::correspondence::resample_var;
use crate::error::{Error, Result};
use crate::imaging::{Mask, RgbImage};
use crate::nn::{Bound, Conv2d, Hourglass, HourglassSpec, Init, ParamStore};
use crate::tensor::Tensor;

pub const SEGMENT: &str = "transport";

/// Encoder–decoder mapping `K` warped masks, `K` confidence masks and the
/// exemplar to per-pixel logits.
#[derive(Clone, Debug)]
pub struct AttentionNet {
    net: Hourglass,
    head: Conv2d,
    outputs: usize,
}

impl AttentionNet {
    pub fn register(store: &mut ParamStore, init: &mut Init, k: usize, spec: HourglassSpec, outputs: usize) -> Self {
        let net = Hourglass::register(store, init, "net", 2 * k + 3, spec);
        let c = net.out_channels();
        let head = Conv2d::register_with(store, "head", Tensor::zeros(&[outputs, c, 3, 3]), Tensor::zeros(&[outputs]));
        Self { net, head, outputs }
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Logits `[n, outputs, H, W]`. Inputs whose sides are not a multiple of
    /// the encoder granularity are resampled up and the logits back down.
    pub fn logits_var(&self, p: &Bound<'_>, warped_masks: &Var, conf: &Var, y_b: &Var) -> Result<Var> {
        self.logits_at(p, warped_masks, conf, y_b, None)
    }

    /// Like [`AttentionNet::logits_var`] but runs the network on a
    /// `work×work` resampling of the inputs (rounded up to the granularity).
    pub fn logits_at(&self, p: &Bound<'_>, warped_masks: &Var, conf: &Var, y_b: &Var, work: Option<usize>) -> Result<Var> {
        let [n, k, h, w] = warped_masks.value().dims4()?;
        if conf.shape() != [n, k, h, w] || y_b.shape() != [n, 3, h, w] {
            return Err(Error::shape(format!(
                "attention inputs {:?}, {:?}, {:?} do not line up",
                warped_masks.shape(),
                conf.shape(),
                y_b.shape()
            )));
        }
        let x = Var::concat(&[warped_masks.clone(), conf.clone(), y_b.clone()], 1)?;
        let g = self.net.granularity();
        let (ih, iw) = match work {
            Some(r) => (r.div_ceil(g) * g, r.div_ceil(g) * g),
            None => (h.div_ceil(g) * g, w.div_ceil(g) * g),
        };
        let x = resample_var(&x, ih, iw)?;
        let logits = self.head.forward(p, &self.net.forward(p, &x)?)?;
        resample_var(&logits, h, w)
    }
}

/// Per-pixel softmax over the channel axis of `[n, c, H, W]` logits.
pub fn attention_maps_var(logits: &Var) -> Result<Var> {
    logits.softmax(1)
}

/// Plain-tensor variant of [`attention_maps_var`] for `[c, H, W]` logits.
pub fn attention_maps(logits: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let [c, h, w] = match *logits.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::shape(format!("logits must be [c, h, w], got {:?}", logits.shape()))),
    };
    attention_maps_var(&g.constant(logits.reshape(&[1, c, h, w])?))?.value().reshape(&[c, h, w])
}

/// `x_A − ω_{y_A}^k` for `[n, 1, H, W]` and `[n, K, H, W]`.
pub fn confidence_masks_var(x_a: &Var, warped_masks: &Var) -> Result<Var> {
    let s = warped_masks.shape();
    if x_a.shape() != [s[0], 1, s[2], s[3]] {
        return Err(Error::shape(format!("x_A {:?} vs warped masks {s:?}", x_a.shape())));
    }
    x_a.sub(warped_masks)
}

pub fn confidence_masks(x_a: &Mask, warped_masks: &[Mask]) -> Result<Vec<Tensor>> {
    warped_masks
        .iter()
        .map(|m| {
            if m.dims() != x_a.dims() {
                return Err(Error::shape(format!("{:?} vs {:?}", m.dims(), x_a.dims())));
            }
            x_a.tensor().zip_map(m.tensor(), |a, b| a - b)
        })
        .collect()
}

/// Weighted fusion of the unwarped pair (channel 0) with the `K` warped
/// candidates. Returns `(x̂_A [n, 1, H, W], x̂_B [n, 3, H, W])`.
pub fn transport_var(attn: &Var, warped_images: &Var, warped_masks: &Var, y_b: &Var, y_a: &Var) -> Result<(Var, Var)> {
    let [n, k1, h, w] = attn.value().dims4()?;
    let k = warped_masks.shape()[1];
    if k1 != k + 1 || warped_images.shape() != [n, k, 3, h, w] {
        return Err(Error::shape(format!(
            "{k1} attention channels for {k} mask and {:?} image candidates",
            warped_images.shape()
        )));
    }
    let masks = Var::concat(&[y_a.clone(), warped_masks.clone()], 1)?;
    let x_hat_a = attn.mul(&masks)?.sum_axis(1)?;
    let images = Var::concat(&[y_b.reshape(&[n, 1, 3, h, w])?, warped_images.clone()], 1)?;
    let x_hat_b = attn
        .reshape(&[n, k1, 1, h, w])?
        .mul(&images)?
        .sum_axis(1)?
        .reshape(&[n, 3, h, w])?;
    Ok((x_hat_a, x_hat_b))
}

/// Single-sample fusion. `attn` is `[K+1, H, W]`.
pub fn transport(
    attn: &Tensor,
    warped_images: &[RgbImage],
    warped_masks: &[Mask],
    y_b: &RgbImage,
    y_a: &Mask,
) -> Result<(Mask, RgbImage)> {
    let k = warped_images.len();
    if warped_masks.len() != k || attn.shape().first() != Some(&(k + 1)) {
        return Err(Error::shape(format!(
            "{:?} attention maps for {k} images and {} masks",
            attn.shape(),
            warped_masks.len()
        )));
    }
    let (h, w) = y_b.dims();
    let g = Graph::new();
    let stack = |ts: Vec<Tensor>, shape: &[usize]| -> Result<Var> {
        let data: Vec<f64> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Ok(g.constant(Tensor::new(shape.to_vec(), data)?))
    };
    let images = stack(warped_images.iter().map(|i| i.tensor().clone()).collect(), &[1, k, 3, h, w])?;
    let masks = stack(warped_masks.iter().map(|m| m.tensor().clone()).collect(), &[1, k, h, w])?;
    let (a, b) = transport_var(
        &g.constant(attn.reshape(&[1, k + 1, h, w])?),
        &images,
        &masks,
        &g.constant(y_b.tensor().reshape(&[1, 3, h, w])?),
        &g.constant(y_a.tensor().reshape(&[1, 1, h, w])?),
    )?;
    let x_hat_a = Mask::from_tensor(a.value().reshape(&[1, h, w])?.map(|v| v.clamp(0.0, 1.0)))?;
    let x_hat_b = RgbImage::from_tensor_clamped(b.value().reshape(&[3, h, w])?)?;
    Ok((x_hat_a, x_hat_b))
}

/// Attention network producing the K+1 transport maps.
#[derive(Clone, Debug)]
pub struct TransportModel {
    params: ParamStore,
    net: AttentionNet,
}

impl TransportModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(config.seed ^ 0x7EA5_5027);
        let k = config.keypoints;
        let net = AttentionNet::register(&mut params, &mut init, k, config.attention_net, k + 1);
        Ok(Self { params, net })
    }

    pub fn with_params(config: &ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.params.check_layout(&params)?;
        model.params = params;
        Ok(model)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind<'a>(&'a self, g: &Graph, trainable: bool) -> Bound<'a> {
        Bound::new(g, &self.params, SEGMENT, trainable)
    }

    /// `m^I` as `[n, K+1, H, W]`.
    pub fn attention_var(&self, p: &Bound<'_>, warped_masks: &Var, conf: &Var, y_b: &Var) -> Result<Var> {
        self.attention_at(p, warped_masks, conf, y_b, None)
    }

    pub fn attention_at(&self, p: &Bound<'_>, warped_masks: &Var, conf: &Var, y_b: &Var, work: Option<usize>) -> Result<Var> {
        attention_maps_var(&self.net.logits_at(p, warped_masks, conf, y_b, work)?)
    }

    /// `m^I` for one sample as `[K+1, H, W]`.
    pub fn attention_i(&self, warped_masks: &[Mask], conf: &[Tensor], y_b: &RgbImage) -> Result<Tensor> {
        let g = Graph::new();
        let (m, c, y) = single_inputs(&g, warped_masks, conf, y_b)?;
        let k1 = self.net.outputs();
        let (h, w) = y_b.dims();
        self.attention_var(&self.bind(&g, false), &m, &c, &y)?.value().reshape(&[k1, h, w])
    }
}

/// Stack single-sample attention inputs into batch-of-one graph constants.
pub(crate) fn single_inputs(g: &Graph, warped_masks: &[Mask], conf: &[Tensor], y_b: &RgbImage) -> Result<(Var, Var, Var)> {
    let (h, w) = y_b.dims();
    let k = warped_masks.len();
    if conf.len() != k {
        return Err(Error::shape(format!("{k} warped masks but {} confidence masks", conf.len())));
    }
    let m: Vec<f64> = warped_masks.iter().flat_map(|m| m.data().iter().copied()).collect();
    let c: Vec<f64> = conf.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok((
        g.constant(Tensor::new(vec![1, k, h, w], m)?),
        g.constant(Tensor::new(vec![1, k, h, w], c)?),
        g.constant(y_b.tensor().reshape(&[1, 3, h, w])?),
    ))
}


#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;

    fn fixture(k: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: &[usize], lo: f64, hi: f64| Tensor::from_fn(shape, |_| rng.random_range(lo..hi));
        vec![
            t(&[1, k + 1, h, w], -8.0, 8.0),
            t(&[1, k, 3, h, w], 0.0, 1.0),
            t(&[1, k, h, w], 0.0, 1.0),
            t(&[1, 3, h, w], 0.0, 1.0),
            t(&[1, 1, h, w], 0.0, 1.0),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn attention_sums_to_one(k in 1usize..8, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let logits = &fixture(k, h, w, seed)[0];
            let m = attention_maps(&logits.reshape(&[k + 1, h, w]).unwrap()).unwrap();
            for p in 0..h * w {
                let s: f64 = (0..=k).map(|c| m.data()[c * h * w + p]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn fused_values_stay_in_candidate_hull(k in 1usize..6, h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
            let f = fixture(k, h, w, seed);
            let g = Graph::new();
            let attn = attention_maps_var(&g.constant(f[0].clone())).unwrap();
            let c: Vec<Var> = f[1..].iter().map(|t| g.constant(t.clone())).collect();
            let (xa, xb) = transport_var(&attn, &c[0], &c[1], &c[2], &c[3]).unwrap();
            let hw = h * w;
            for p in 0..hw {
                let masks: Vec<f64> = std::iter::once(f[4].data()[p]).chain((0..k).map(|i| f[2].data()[i * hw + p])).collect();
                let v = xa.value().data()[p];
                prop_assert!(v >= masks.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-12);
                prop_assert!(v <= masks.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-12);
                for ch in 0..3 {
                    let cands: Vec<f64> = std::iter::once(f[3].data()[ch * hw + p])
                        .chain((0..k).map(|i| f[1].data()[(i * 3 + ch) * hw + p]))
                        .collect();
                    let v = xb.value().data()[ch * hw + p];
                    prop_assert!(v >= cands.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-12);
                    prop_assert!(v <= cands.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-12);
                }
            }
        }
    }
}
