//! The three network segments wired together: correspondence, transport,
//! texture guidance and the cycle pass.

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::correspondence::{CorrespondenceModel, CorrespondenceOutput, CorrespondenceVars};
use crate::error::{Error, Result};
use crate::guidance::{fuse_warpfields_var, pseudo_ground_truth_var, GuidanceModel};
use crate::imaging::{Mask, RgbImage};
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;
use crate::transport::{confidence_masks_var, transport_var, TransportModel};

/// Which segments receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub correspondence: bool,
    pub transport: bool,
    pub guidance: bool,
}

impl Trainable {
    pub const ALL: Self = Self { correspondence: true, transport: true, guidance: true };
    pub const NONE: Self = Self { correspondence: false, transport: false, guidance: false };
}

pub struct Bindings<'a> {
    pub correspondence: Bound<'a>,
    pub transport: Bound<'a>,
    pub guidance: Bound<'a>,
}

/// Correspondence plus region transportation for a batch.
#[derive(Clone)]
pub struct ForwardVars {
    pub corr: CorrespondenceVars,
    /// `[n, K, H, W]`
    pub conf: Var,
    /// `m^I`, `[n, K+1, H, W]`
    pub attn: Var,
    /// `[n, 1, H, W]`
    pub x_hat_a: Var,
    /// `[n, 3, H, W]`
    pub x_hat_b: Var,
}

#[derive(Clone)]
pub struct GuidanceVars {
    /// `m^T`, `[n, K, H, W]`
    pub attn: Var,
    /// `[n, H, W, 2]`
    pub omega_s: Var,
    /// `[n, 1, H, W]`
    pub x_a_p: Var,
    /// `[n, 3, H, W]`
    pub x_b_p: Var,
}

/// Single-sample inference result.
#[derive(Clone, Debug)]
pub struct Manipulation {
    pub output: RgbImage,
    pub mask: Mask,
    pub correspondence: CorrespondenceOutput,
    /// `m^I` as `[K+1, H, W]`.
    pub attention: Tensor,
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: ModelConfig,
    pub correspondence: CorrespondenceModel,
    pub transport: TransportModel,
    pub guidance: GuidanceModel,
    /// Side length the attention networks run at. `None` uses the input
    /// size; inference on large exemplars sets it to the training size.
    pub attention_resolution: Option<usize>,
}

impl Pipeline {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            correspondence: CorrespondenceModel::new(config)?,
            transport: TransportModel::new(config)?,
            guidance: GuidanceModel::new(config)?,
            attention_resolution: None,
        })
    }

    pub fn from_segments(
        config: &ModelConfig,
        correspondence: ParamStore,
        transport: ParamStore,
        guidance: ParamStore,
    ) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            correspondence: CorrespondenceModel::with_params(config, correspondence)?,
            transport: TransportModel::with_params(config, transport)?,
            guidance: GuidanceModel::with_params(config, guidance)?,
            attention_resolution: None,
        })
    }

    pub fn bind<'a>(&'a self, g: &Graph, trainable: Trainable) -> Bindings<'a> {
        Bindings {
            correspondence: self.correspondence.bind(g, trainable.correspondence),
            transport: self.transport.bind(g, trainable.transport),
            guidance: self.guidance.bind(g, trainable.guidance),
        }
    }

    pub fn forward_var(&self, b: &Bindings<'_>, x_a: &Var, y_a: &Var, y_b: &Var) -> Result<ForwardVars> {
        let corr = self.correspondence.correspond_var(&b.correspondence, x_a, y_a, y_b)?;
        let conf = confidence_masks_var(x_a, &corr.warped_masks)?;
        let attn = self.transport.attention_at(&b.transport, &corr.warped_masks, &conf, y_b, self.attention_resolution)?;
        let (x_hat_a, x_hat_b) = transport_var(&attn, &corr.warped_images, &corr.warped_masks, y_b, y_a)?;
        Ok(ForwardVars { corr, conf, attn, x_hat_a, x_hat_b })
    }

    pub fn guidance_var(&self, b: &Bindings<'_>, fwd: &ForwardVars, y_a: &Var, y_b: &Var) -> Result<GuidanceVars> {
        let attn = self.guidance.attention_at(&b.guidance, &fwd.corr.warped_masks, &fwd.conf, y_b, self.attention_resolution)?;
        let omega_s = fuse_warpfields_var(&attn, &fwd.corr.warps)?;
        let (x_a_p, x_b_p) = pseudo_ground_truth_var(&omega_s, y_a, y_b)?;
        Ok(GuidanceVars { attn, omega_s, x_a_p, x_b_p })
    }

    /// Re-run the forward pass with `y_A` as the conditional mask and the
    /// pseudo ground truth as the exemplar pair; returns `ŷ_B`.
    pub fn cycle_var(&self, b: &Bindings<'_>, y_a: &Var, pseudo: &GuidanceVars, detach: bool) -> Result<Var> {
        let (mask, image) = if detach {
            (pseudo.x_a_p.detach(), pseudo.x_b_p.detach())
        } else {
            (pseudo.x_a_p.clone(), pseudo.x_b_p.clone())
        };
        Ok(self.forward_var(b, y_a, &mask, &image)?.x_hat_b)
    }

    pub fn manipulate(&self, x_a: &Mask, y_a: &Mask, y_b: &RgbImage) -> Result<Manipulation> {
        if x_a.dims() != y_b.dims() || y_a.dims() != y_b.dims() {
            return Err(Error::shape(format!(
                "x_A {:?}, y_A {:?} and y_B {:?} must agree",
                x_a.dims(),
                y_a.dims(),
                y_b.dims()
            )));
        }
        let g = Graph::new();
        let (h, w) = y_b.dims();
        let b = self.bind(&g, Trainable::NONE);
        let fwd = self.forward_var(
            &b,
            &g.constant(x_a.tensor().reshape(&[1, 1, h, w])?),
            &g.constant(y_a.tensor().reshape(&[1, 1, h, w])?),
            &g.constant(y_b.tensor().reshape(&[1, 3, h, w])?),
        )?;
        let k1 = self.config.keypoints + 1;
        Ok(Manipulation {
            output: RgbImage::from_tensor_clamped(fwd.x_hat_b.value().reshape(&[3, h, w])?)?,
            mask: Mask::from_tensor(fwd.x_hat_a.value().reshape(&[1, h, w])?.map(|v| v.clamp(0.0, 1.0)))?,
            correspondence: CorrespondenceOutput::from_vars(&fwd.corr, 0)?,
            attention: fwd.attn.value().reshape(&[k1, h, w])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::HourglassSpec;

    fn tiny() -> ModelConfig {
        ModelConfig {
            keypoints: 2,
            internal_resolution: 16,
            keypoint_net: HourglassSpec { blocks: 2, base: 4, max: 8 },
            attention_net: HourglassSpec { blocks: 2, base: 4, max: 8 },
            ..ModelConfig::desk()
        }
    }

    fn inputs() -> (Mask, Mask, RgbImage) {
        let x_a = Mask::from_fn(16, 16, |r, c| (4..12).contains(&r) && (3..10).contains(&c));
        let y_a = Mask::from_fn(16, 16, |r, c| (5..12).contains(&r) && (5..12).contains(&c));
        let y_b = RgbImage::from_tensor(Tensor::from_fn(&[3, 16, 16], |i| ((i * 7) % 16) as f64 / 16.0)).unwrap();
        (x_a, y_a, y_b)
    }

    #[test]
    fn manipulate_is_deterministic_and_in_range() {
        let p = Pipeline::new(&tiny()).unwrap();
        let (x_a, y_a, y_b) = inputs();
        let a = p.manipulate(&x_a, &y_a, &y_b).unwrap();
        let b = p.manipulate(&x_a, &y_a, &y_b).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.attention.shape(), &[3, 16, 16]);
        assert_eq!(a.correspondence.warps.len(), 2);
    }

    #[test]
    fn cycle_gradient_reaches_guidance() {
        let p = Pipeline::new(&tiny()).unwrap();
        let (x_a, y_a, y_b) = inputs();
        let g = Graph::new();
        let b = p.bind(&g, Trainable::ALL);
        let xa = g.constant(x_a.tensor().reshape(&[1, 1, 16, 16]).unwrap());
        let ya = g.constant(y_a.tensor().reshape(&[1, 1, 16, 16]).unwrap());
        let yb = g.constant(y_b.tensor().reshape(&[1, 3, 16, 16]).unwrap());
        let fwd = p.forward_var(&b, &xa, &ya, &yb).unwrap();
        let pseudo = p.guidance_var(&b, &fwd, &ya, &yb).unwrap();
        let y_hat = p.cycle_var(&b, &ya, &pseudo, false).unwrap();
        let loss = y_hat.sub(&yb).unwrap().abs().mean_all();
        let grads = g.backward(&loss).unwrap();
        let head = grads.param("guidance/head.weight").unwrap();
        assert!(head.data().iter().any(|&v| v != 0.0));

        let g2 = Graph::new();
        let b2 = p.bind(&g2, Trainable::ALL);
        let (xa, ya, yb) = (g2.constant(xa.value()), g2.constant(ya.value()), g2.constant(yb.value()));
        let fwd = p.forward_var(&b2, &xa, &ya, &yb).unwrap();
        let pseudo = p.guidance_var(&b2, &fwd, &ya, &yb).unwrap();
        let y_hat = p.cycle_var(&b2, &ya, &pseudo, true).unwrap();
        let grads = g2.backward(&y_hat.sub(&yb).unwrap().abs().mean_all()).unwrap();
        assert!(grads.param("guidance/head.weight").is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    }
}
