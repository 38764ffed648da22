//! Warp-field fusion and the single-warp pseudo ground truth.

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{sample, WarpField};
use crate::imaging::{Mask, RgbImage};
use crate::kernels::Padding;
use crate::nn::{Bound, Init, ParamStore};
use crate::tensor::Tensor;
use crate::transport::{attention_maps_var, single_inputs, AttentionNet};

pub const SEGMENT: &str = "guidance";

/// Fused field and the exemplar pair sampled through it.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoGt {
    pub omega_s: WarpField,
    pub mask: Mask,
    pub image: RgbImage,
}

/// `Σ_k m^T_k · ω_k` for `[n, K, H, W]` weights and `[n, K, H, W, 2]` fields.
pub fn fuse_warpfields_var(attn: &Var, warps: &Var) -> Result<Var> {
    let [n, k, h, w] = attn.value().dims4()?;
    if warps.shape() != [n, k, h, w, 2] {
        return Err(Error::shape(format!("{:?} weights for fields {:?}", attn.shape(), warps.shape())));
    }
    attn.reshape(&[n, k, h, w, 1])?
        .mul(warps)?
        .sum_axis(1)?
        .reshape(&[n, h, w, 2])
}

pub fn fuse_warpfields(attn: &Tensor, fields: &[WarpField]) -> Result<WarpField> {
    let k = fields.len();
    let (h, w) = match (attn.shape(), fields.first()) {
        ([ka, h, w], Some(f)) if *ka == k && f.height() == *h && f.width() == *w => (*h, *w),
        _ => return Err(Error::shape(format!("{:?} weights for {k} fields", attn.shape()))),
    };
    let g = Graph::new();
    let data: Vec<f64> = fields.iter().flat_map(|f| f.target().data().iter().copied()).collect();
    let warps = g.constant(Tensor::new(vec![1, k, h, w, 2], data)?);
    let fused = fuse_warpfields_var(&g.constant(attn.reshape(&[1, k, h, w])?), &warps)?;
    WarpField::from_tensor(fused.value().reshape(&[h, w, 2])?)
}

/// Sample `y_A` (zeros padding) and `y_B` (border padding) through the one
/// fused field `[n, H, W, 2]`.
pub fn pseudo_ground_truth_var(omega_s: &Var, y_a: &Var, y_b: &Var) -> Result<(Var, Var)> {
    Ok((y_a.grid_sample(omega_s, Padding::Zeros)?, y_b.grid_sample(omega_s, Padding::Border)?))
}

pub fn pseudo_ground_truth(omega_s: &WarpField, y_a: &Mask, y_b: &RgbImage) -> Result<PseudoGt> {
    let mask = sample(y_a.tensor(), omega_s, Padding::Zeros)?.map(|v| v.clamp(0.0, 1.0));
    let image = sample(y_b.tensor(), omega_s, Padding::Border)?;
    Ok(PseudoGt {
        omega_s: omega_s.clone(),
        mask: Mask::from_tensor(mask)?,
        image: RgbImage::from_tensor_clamped(image)?,
    })
}

/// Attention network producing the K warp-fusion weights.
#[derive(Clone, Debug)]
pub struct GuidanceModel {
    params: ParamStore,
    net: AttentionNet,
}

impl GuidanceModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(config.seed ^ 0x6D1D_A2CE);
        let k = config.keypoints;
        let net = AttentionNet::register(&mut params, &mut init, k, config.attention_net, k);
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

    /// `m^T` as `[n, K, H, W]`.
    pub fn attention_var(&self, p: &Bound<'_>, warped_masks: &Var, conf: &Var, y_b: &Var) -> Result<Var> {
        self.attention_at(p, warped_masks, conf, y_b, None)
    }

    pub fn attention_at(&self, p: &Bound<'_>, warped_masks: &Var, conf: &Var, y_b: &Var, work: Option<usize>) -> Result<Var> {
        attention_maps_var(&self.net.logits_at(p, warped_masks, conf, y_b, work)?)
    }

    pub fn attention_t(&self, warped_masks: &[Mask], conf: &[Tensor], y_b: &RgbImage) -> Result<Tensor> {
        let g = Graph::new();
        let (m, c, y) = single_inputs(&g, warped_masks, conf, y_b)?;
        let (h, w) = y_b.dims();
        let k = self.net.outputs();
        self.attention_var(&self.bind(&g, false), &m, &c, &y)?.value().reshape(&[k, h, w])
    }
}
