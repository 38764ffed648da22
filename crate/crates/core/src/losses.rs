//! Training objectives and their weighted total.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::correspondence::{CorrespondenceModel, KeypointVars};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::geometry::{sample, NormalizedGrid, TpsParams, TpsTransform};
use crate::imaging::{Mask, RgbImage};
use crate::kernels::Padding;
use crate::tensor::Tensor;

/// Weights of the seven terms of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub eq: f64,
    pub perc: f64,
    pub context: f64,
    pub bound: f64,
    pub mask: f64,
    pub rec: f64,
    pub cyc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { eq: 10.0, perc: 10.0, context: 1.0, bound: 10.0, mask: 10.0, rec: 10.0, cyc: 10.0 }
    }
}

impl LossWeights {
    pub const ZERO: Self = Self { eq: 0.0, perc: 0.0, context: 0.0, bound: 0.0, mask: 0.0, rec: 0.0, cyc: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let all = [self.eq, self.perc, self.context, self.bound, self.mask, self.rec, self.cyc];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            eq: self.eq * s,
            perc: self.perc * s,
            context: self.context * s,
            bound: self.bound * s,
            mask: self.mask * s,
            rec: self.rec * s,
            cyc: self.cyc * s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextualConfig {
    pub layers: Vec<String>,
    pub weights: Vec<f64>,
    /// Bandwidth `h` of the similarity kernel.
    pub bandwidth: f64,
    /// Added to the row minimum when normalizing distances.
    pub epsilon: f64,
    /// Feature maps with more positions are average-pooled until they fit.
    pub max_points: usize,
}

impl Default for ContextualConfig {
    fn default() -> Self {
        Self {
            layers: vec!["conv2".into(), "conv3".into(), "conv4".into()],
            weights: vec![1.0; 3],
            bandwidth: 0.5,
            epsilon: 1e-5,
            max_points: 1024,
        }
    }
}

impl ContextualConfig {
    fn resolved(&self) -> Result<Vec<(usize, f64)>> {
        if self.layers.is_empty() || self.layers.len() != self.weights.len() {
            return Err(Error::Config("contextual loss needs one weight per layer and at least one layer".into()));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("contextual layer weights must be non-negative".into()));
        }
        if !(self.bandwidth > 0.0) || !(self.epsilon > 0.0) || self.max_points == 0 {
            return Err(Error::Config("contextual bandwidth, epsilon and max_points must be positive".into()));
        }
        self.layers
            .iter()
            .zip(&self.weights)
            .map(|(l, &w)| Ok((FeatureExtractor::layer_index(l)?, w)))
            .collect()
    }
}

/// Per-term values; `T` is `Var` while building the graph and `f64` in logs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub eq: T,
    pub perc: T,
    pub context: T,
    pub bound: T,
    pub mask_i: T,
    pub mask_t: T,
    pub rec: T,
    pub cyc: T,
}

/// Logged breakdown of one step.
pub type LossBreakdown = LossTerms<f64>;

impl LossTerms<f64> {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.eq * self.eq
            + w.perc * self.perc
            + w.context * self.context
            + w.bound * self.bound
            + w.mask * (self.mask_i + self.mask_t)
            + w.rec * self.rec
            + w.cyc * self.cyc
    }

    pub fn all_finite(&self) -> bool {
        [self.eq, self.perc, self.context, self.bound, self.mask_i, self.mask_t, self.rec, self.cyc]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl LossTerms<Var> {
    pub fn values(&self) -> LossBreakdown {
        LossTerms {
            eq: self.eq.value().item(),
            perc: self.perc.value().item(),
            context: self.context.value().item(),
            bound: self.bound.value().item(),
            mask_i: self.mask_i.value().item(),
            mask_t: self.mask_t.value().item(),
            rec: self.rec.value().item(),
            cyc: self.cyc.value().item(),
        }
    }

    /// Weighted sum on the graph.
    pub fn total(&self, w: &LossWeights) -> Result<Var> {
        let parts = [
            self.eq.scale(w.eq),
            self.perc.scale(w.perc),
            self.context.scale(w.context),
            self.bound.scale(w.bound),
            self.mask_i.add(&self.mask_t)?.scale(w.mask),
            self.rec.scale(w.rec),
            self.cyc.scale(w.cyc),
        ];
        let mut acc = parts[0].clone();
        for p in &parts[1..] {
            acc = acc.add(p)?;
        }
        Ok(acc)
    }
}

fn same_shape(a: &Var, b: &Var, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_var(a: &Var, b: &Var) -> Result<Var> {
    same_shape(a, b, "l1")?;
    Ok(a.sub(b)?.abs().mean_all())
}

/// Band of width `d` inside each mask: `m − erode_d(m)`, with out-of-frame
/// pixels treated as background.
pub fn soft_boundary_var(m: &Var, d: usize) -> Result<Var> {
    m.sub(&m.min_filter(d, 0.0)?)
}

pub const IOU_EPS: f64 = 1e-6;

/// `mean_k (1 − softIoU(bnd(ω_k), bnd(x_A)))` with
/// `softIoU = (Σ min + ε) / (Σ max + ε)`, for `[n, K, H, W]` and `[n, 1, H, W]`.
pub fn boundary_iou_loss_var(warped_masks: &Var, x_a: &Var, d: usize) -> Result<Var> {
    let s = warped_masks.shape();
    if s.len() != 4 || x_a.shape() != [s[0], 1, s[2], s[3]] {
        return Err(Error::shape(format!("warped masks {s:?} vs x_A {:?}", x_a.shape())));
    }
    let bw = soft_boundary_var(warped_masks, d)?;
    let bx = soft_boundary_var(x_a, d)?.broadcast_to(&s)?;
    let spatial = |v: Var| -> Result<Var> { v.sum_axis(3)?.sum_axis(2) };
    let inter = spatial(bw.minimum(&bx)?)?.offset(IOU_EPS);
    let union = spatial(bw.maximum(&bx)?)?.offset(IOU_EPS);
    Ok(inter.div(&union)?.rsub(1.0).mean_all())
}

pub fn boundary_iou_loss(warped_masks: &[Mask], x_a: &Mask, d: usize) -> Result<f64> {
    let (h, w) = x_a.dims();
    let k = warped_masks.len();
    if k == 0 || warped_masks.iter().any(|m| m.dims() != (h, w)) {
        return Err(Error::shape("warped masks must be non-empty and match x_A".to_string()));
    }
    let g = Graph::new();
    let data: Vec<f64> = warped_masks.iter().flat_map(|m| m.data().iter().copied()).collect();
    let wm = g.constant(Tensor::new(vec![1, k, h, w], data)?);
    let xa = g.constant(x_a.tensor().reshape(&[1, 1, h, w])?);
    Ok(boundary_iou_loss_var(&wm, &xa, d)?.value().item())
}

/// Boundary band width for an image of the given size: 2% of the diagonal,
/// at least one pixel.
pub fn default_dilation(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    ((0.02 * diag).round() as usize).max(1)
}

fn pool_to_fit(f: &Var, max_points: usize) -> Result<Var> {
    let mut f = f.clone();
    loop {
        let s = f.shape();
        if s[2] * s[3] <= max_points || s[2] < 2 || s[3] < 2 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Ok(f);
        }
        f = f.avg_pool(2)?;
    }
}

/// `−log CX(x, y)` per batch element for `[n, C, h, w]` feature maps,
/// returned as `[n, 1, 1]`.
pub fn contextual_similarity_loss_var(x: &Var, y: &Var, bandwidth: f64, epsilon: f64) -> Result<Var> {
    same_shape(x, y, "contextual features")?;
    let [n, c, h, w] = x.value().dims4()?;
    let p = h * w;
    let x = x.reshape(&[n, c, p])?;
    let y = y.reshape(&[n, c, p])?;
    let mu = y.mean_axis(2)?;
    let unit = |v: Var| -> Result<Var> {
        let norm = v.square().sum_axis(1)?.offset(1e-12).sqrt();
        v.div(&norm)
    };
    let xn = unit(x.sub(&mu)?)?;
    let yn = unit(y.sub(&mu)?)?;
    let cos = xn.permute(&[0, 2, 1])?.matmul(&yn)?;
    let dist = cos.rsub(1.0);
    let rel = dist.div(&dist.min_axis(2)?.offset(epsilon))?;
    let cx = rel.rsub(1.0).scale(1.0 / bandwidth).softmax(2)?;
    Ok(cx.max_axis(1)?.mean_axis(2)?.ln().neg())
}

/// `Σ_l w_l · (−log CX(φ_l(a), φ_l(b)))`, averaged over the batch.
pub fn contextual_loss_var(a: &Var, b: &Var, cfg: &ContextualConfig, phi: &FeatureExtractor) -> Result<Var> {
    same_shape(a, b, "contextual inputs")?;
    let layers = cfg.resolved()?;
    let upto = layers.iter().map(|l| l.0).max().expect("validated non-empty");
    let n = a.shape()[0];
    let both = phi.forward_var(&Var::concat(&[a.clone(), b.clone()], 0)?, upto)?;
    let mut acc: Option<Var> = None;
    for (layer, weight) in layers {
        let f = pool_to_fit(&both[layer], cfg.max_points)?;
        let term = contextual_similarity_loss_var(&f.narrow(0, 0, n)?, &f.narrow(0, n, n)?, cfg.bandwidth, cfg.epsilon)?
            .mean_all()
            .scale(weight);
        acc = Some(match acc {
            Some(s) => s.add(&term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one layer"))
}

pub fn contextual_loss(a: &RgbImage, b: &RgbImage, cfg: &ContextualConfig, phi: &FeatureExtractor) -> Result<f64> {
    let g = Graph::new();
    let (va, vb) = (batch_of_one(&g, a)?, batch_of_one(&g, b)?);
    Ok(contextual_loss_var(&va, &vb, cfg, phi)?.value().item())
}

pub const PERCEPTUAL_LAYERS: [usize; 3] = [0, 1, 2];

/// `Σ_l mean |φ_l(a) − φ_l(b)|` over the first three backbone layers.
pub fn perceptual_loss_var(a: &Var, b: &Var, phi: &FeatureExtractor) -> Result<Var> {
    same_shape(a, b, "perceptual inputs")?;
    let n = a.shape()[0];
    let upto = PERCEPTUAL_LAYERS[PERCEPTUAL_LAYERS.len() - 1];
    let both = phi.forward_var(&Var::concat(&[a.clone(), b.clone()], 0)?, upto)?;
    let mut acc: Option<Var> = None;
    for l in PERCEPTUAL_LAYERS {
        let term = l1_var(&both[l].narrow(0, 0, n)?, &both[l].narrow(0, n, n)?)?;
        acc = Some(match acc {
            Some(s) => s.add(&term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty layer list"))
}

pub fn perceptual_loss(a: &RgbImage, b: &RgbImage, phi: &FeatureExtractor) -> Result<f64> {
    let g = Graph::new();
    Ok(perceptual_loss_var(&batch_of_one(&g, a)?, &batch_of_one(&g, b)?, phi)?.value().item())
}

/// Keypoint consistency under a known deformation. `deformed` are keypoints
/// of the image resampled through `T`, so a feature at `z` in the deformed
/// image sits at `T(z)` in the original: positions must satisfy
/// `p_image = T(p_deformed)` and Jacobians `J_image = ∇T(p_deformed) · J_deformed`.
/// One transform per batch element.
pub fn equivariance_loss_var(image: &KeypointVars, deformed: &KeypointVars, transforms: &[TpsTransform]) -> Result<Var> {
    let shape = image.positions.shape();
    if deformed.positions.shape() != shape || transforms.len() != shape[0] {
        return Err(Error::shape(format!(
            "keypoints {shape:?} vs {:?} with {} transforms",
            deformed.positions.shape(),
            transforms.len()
        )));
    }
    let g = image.positions.graph();
    let (n, k) = (shape[0], shape[1]);
    let dpos = deformed.positions.value();
    let mut mapped = Vec::with_capacity(n);
    let mut jt = Vec::with_capacity(n * k * 4);
    for (i, t) in transforms.iter().enumerate() {
        mapped.push(t.apply_var(&deformed.positions.narrow(0, i, 1)?)?);
        for j in 0..k {
            let m = t.jacobian([dpos.at(&[i, j, 0]), dpos.at(&[i, j, 1])]);
            jt.extend([m[0][0], m[0][1], m[1][0], m[1][1]]);
        }
    }
    let mapped = Var::concat(&mapped, 0)?;
    let pos_term = l1_var(&mapped, &image.positions)?;

    let jt = g.constant(Tensor::new(vec![n, k, 4], jt)?);
    let e = |v: &Var, m: usize| v.narrow(2, m, 1);
    let jd = &deformed.jacobians;
    let prod = [
        e(&jt, 0)?.mul(&e(jd, 0)?)?.add(&e(&jt, 1)?.mul(&e(jd, 2)?)?)?,
        e(&jt, 0)?.mul(&e(jd, 1)?)?.add(&e(&jt, 1)?.mul(&e(jd, 3)?)?)?,
        e(&jt, 2)?.mul(&e(jd, 0)?)?.add(&e(&jt, 3)?.mul(&e(jd, 2)?)?)?,
        e(&jt, 2)?.mul(&e(jd, 1)?)?.add(&e(&jt, 3)?.mul(&e(jd, 3)?)?)?,
    ];
    let jac_term = l1_var(&Var::concat(&prod, 2)?, &image.jacobians)?;
    pos_term.add(&jac_term)
}

/// Resample each `[3, H, W]` image of a batch through its transform.
pub fn deform_batch(images: &Tensor, transforms: &[TpsTransform]) -> Result<Tensor> {
    let [n, c, h, w] = images.dims4()?;
    if transforms.len() != n {
        return Err(Error::shape(format!("{n} images but {} transforms", transforms.len())));
    }
    let grid = crate::geometry::make_identity_grid(h, w)?;
    let mut parts = Vec::with_capacity(n);
    for (i, t) in transforms.iter().enumerate() {
        let field = warp_of(t, &grid)?;
        let img = images.narrow0(i, 1)?.reshape(&[c, h, w])?;
        parts.push(sample(&img, &field, Padding::Border)?.reshape(&[1, c, h, w])?);
    }
    Tensor::cat0(&parts)
}

fn warp_of(t: &TpsTransform, grid: &NormalizedGrid) -> Result<crate::geometry::WarpField> {
    let mut out = Vec::with_capacity(grid.height() * grid.width() * 2);
    for z in grid.points() {
        out.extend(t.apply(z));
    }
    crate::geometry::WarpField::from_tensor(Tensor::new(vec![grid.height(), grid.width(), 2], out)?)
}

/// Predict keypoints on `image` and on its deformation by `tps`, and score
/// their consistency.
pub fn equivariance_loss(model: &CorrespondenceModel, image: &RgbImage, tps: &TpsParams) -> Result<f64> {
    let t = tps.solve()?;
    let g = Graph::new();
    let (h, w) = image.dims();
    let x = image.tensor().reshape(&[1, 3, h, w])?;
    let d = deform_batch(&x, std::slice::from_ref(&t))?;
    let p = model.bind(&g, false);
    let kp = model.keypoints_var(&p, &g.constant(Tensor::cat0(&[x, d])?))?;
    let narrow = |s: usize| -> Result<KeypointVars> {
        Ok(KeypointVars {
            positions: kp.positions.narrow(0, s, 1)?,
            jacobians: kp.jacobians.narrow(0, s, 1)?,
            heatmaps: kp.heatmaps.narrow(0, s, 1)?,
        })
    };
    Ok(equivariance_loss_var(&narrow(0)?, &narrow(1)?, &[t])?.value().item())
}

/// `(mean|x̂_A − x_A|, mean|x̂_A^P − x_A|)`.
pub fn mask_alignment_losses(x_hat_a: &Mask, x_a_p: &Mask, x_a: &Mask) -> Result<(f64, f64)> {
    let g = Graph::new();
    let c = |m: &Mask| g.constant(m.tensor().clone());
    Ok((
        l1_var(&c(x_hat_a), &c(x_a))?.value().item(),
        l1_var(&c(x_a_p), &c(x_a))?.value().item(),
    ))
}

/// `‖x̂_B − x̂_B^P‖₁ / (3HW)`.
pub fn reconstruction_loss(x_hat_b: &RgbImage, x_b_p: &RgbImage) -> Result<f64> {
    let g = Graph::new();
    Ok(l1_var(&g.constant(x_hat_b.tensor().clone()), &g.constant(x_b_p.tensor().clone()))?.value().item())
}

/// `‖y_B − ŷ_B‖₁ / (3HW)`.
pub fn cycle_loss(y_b: &RgbImage, y_hat_b: &RgbImage) -> Result<f64> {
    reconstruction_loss(y_b, y_hat_b)
}

fn batch_of_one(g: &Graph, img: &RgbImage) -> Result<Var> {
    let (h, w) = img.dims();
    Ok(g.constant(img.tensor().reshape(&[1, 3, h, w])?))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::gradcheck::max_rel_error;
    use crate::geometry::{random_tps, Affine2D, TpsConfig};

    fn noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RgbImage {
        RgbImage::from_tensor(Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0))).unwrap()
    }

    fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
        let data = (0..h * w).map(|_| rng.random_bool(p) as u8 as f64).collect();
        Mask::new(h, w, data).unwrap()
    }

    /// Boundary band by direct distance test: a foreground pixel belongs to
    /// the band when some pixel within Chebyshev distance `d` is background
    /// or outside the frame.
    fn band(m: &Mask, d: usize) -> Vec<bool> {
        let (h, w) = m.dims();
        let d = d as isize;
        let mut out = vec![false; h * w];
        for r in 0..h as isize {
            for c in 0..w as isize {
                if m.at(r as usize, c as usize) < 0.5 {
                    continue;
                }
                'search: for dr in -d..=d {
                    for dc in -d..=d {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize || m.at(rr as usize, cc as usize) < 0.5 {
                            out[(r * w as isize + c) as usize] = true;
                            break 'search;
                        }
                    }
                }
            }
        }
        out
    }

    fn set_biou(a: &Mask, b: &Mask, d: usize) -> f64 {
        let (ba, bb) = (band(a, d), band(b, d));
        let inter = ba.iter().zip(&bb).filter(|(x, y)| **x && **y).count();
        let union = ba.iter().zip(&bb).filter(|(x, y)| **x || **y).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn boundary_loss_cases() {
        let m = Mask::from_fn(12, 12, |r, c| (3..9).contains(&r) && (2..8).contains(&c));
        assert!(boundary_iou_loss(&[m.clone()], &m, 2).unwrap() < 1e-6);
        let other = Mask::from_fn(12, 12, |r, c| r < 2 && c > 9);
        assert!((boundary_iou_loss(&[other], &m, 1).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hard_boundary_loss_matches_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a = rand_mask(&mut rng, 16, 16, 0.6);
            let b = rand_mask(&mut rng, 16, 16, 0.6);
            let soft = boundary_iou_loss(&[a.clone()], &b, 2).unwrap();
            assert!((soft - (1.0 - set_biou(&a, &b, 2))).abs() < 0.02);
        }
    }

    #[test]
    fn boundary_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let warped = Tensor::from_fn(&[1, 2, 8, 8], |_| rng.random_range(0.05..0.95));
        let x = rand_mask(&mut rng, 8, 8, 0.5).tensor().reshape(&[1, 1, 8, 8]).unwrap();
        let err = max_rel_error(&warped, 1e-7, |g, v| boundary_iou_loss_var(v, &g.constant(x.clone()), 1).unwrap());
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn contextual_identity_and_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let phi = FeatureExtractor::shared();
        let cfg = ContextualConfig::default();
        let a = noise(&mut rng, 32, 32);
        let b = noise(&mut rng, 32, 32);
        let same = contextual_loss(&a, &a, &cfg, phi).unwrap();
        assert!(same < 1e-4, "{same}");
        let unrelated = contextual_loss(&a, &RgbImage::filled(32, 32, [0.9, 0.1, 0.2]), &cfg, phi).unwrap();
        assert!(unrelated > 10.0 * same.max(1e-6));
        let other = contextual_loss(&a, &b, &cfg, phi).unwrap();
        assert!(other > same);
    }

    #[test]
    fn contextual_is_spatially_tolerant() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let phi = FeatureExtractor::shared();
        let cfg = ContextualConfig::default();
        let a = noise(&mut rng, 32, 32);
        // Circular shift by whole 8-pixel tiles keeps every deep feature intact
        // away from the seams.
        let t = a.tensor();
        let shifted = Tensor::from_fn(&[3, 32, 32], |i| {
            let (c, r, x) = (i / 1024, (i / 32) % 32, i % 32);
            t.at(&[c, r, (x + 8) % 32])
        });
        let shifted = RgbImage::from_tensor(shifted).unwrap();
        let far = RgbImage::filled(32, 32, [0.2, 0.8, 0.5]);
        let l_shift = contextual_loss(&a, &shifted, &cfg, phi).unwrap();
        let l_far = contextual_loss(&a, &far, &cfg, phi).unwrap();
        assert!(l_shift < 0.2 * l_far, "{l_shift} vs {l_far}");
    }

    #[test]
    fn contextual_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let target = Tensor::from_fn(&[1, 3, 8, 8], |_| rng.random_range(0.0..1.0));
        let x = Tensor::from_fn(&[1, 3, 8, 8], |_| rng.random_range(0.0..1.0));
        let cfg = ContextualConfig { layers: vec!["conv1".into(), "conv2".into()], weights: vec![1.0, 1.0], ..Default::default() };
        let err = max_rel_error(&x, 1e-6, |g, v| {
            contextual_loss_var(v, &g.constant(target.clone()), &cfg, FeatureExtractor::shared()).unwrap()
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn perceptual_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let phi = FeatureExtractor::shared();
        let a = noise(&mut rng, 16, 16);
        assert_eq!(perceptual_loss(&a, &a, phi).unwrap(), 0.0);
        let b = RgbImage::from_tensor_clamped(a.tensor().map(|v| v + 0.05)).unwrap();
        assert!(perceptual_loss(&a, &b, phi).unwrap() > 0.0);
    }

    #[test]
    fn equivariance_zero_cases() {
        let cfg = crate::config::ModelConfig {
            keypoints: 3,
            internal_resolution: 16,
            keypoint_net: crate::nn::HourglassSpec { blocks: 2, base: 4, max: 8 },
            ..crate::config::ModelConfig::desk()
        };
        let model = CorrespondenceModel::new(&cfg).unwrap();
        let img = RgbImage::from_mask(&Mask::from_fn(16, 16, |r, c| r > 4 && c > 6 && r < 13));
        assert!(equivariance_loss(&model, &img, &TpsParams::zero(5)).unwrap() < 1e-6);
        let tps = random_tps(&TpsConfig::default(), 3).unwrap();
        assert!(equivariance_loss(&model, &img, &tps).unwrap() > 0.0);

        // Keypoints moved analytically by a known affine.
        let mut params = TpsParams::zero(3);
        params.jitter = Affine2D::new([[1.1, 0.2], [-0.1, 0.9]], [0.05, -0.02]);
        let t = params.solve().unwrap();
        let inv = crate::geometry::invert_affine(&params.jitter).unwrap();
        let g = Graph::new();
        let pos = [[0.1, -0.3], [0.5, 0.2]];
        let jac = [[[0.9, 0.1], [0.0, 1.2]], [[1.0, -0.3], [0.2, 0.8]]];
        let mk = |p: Vec<f64>, j: Vec<f64>| KeypointVars {
            positions: g.leaf(Tensor::new(vec![1, 2, 2], p).unwrap()),
            jacobians: g.leaf(Tensor::new(vec![1, 2, 4], j).unwrap()),
            heatmaps: g.constant(Tensor::zeros(&[1, 2, 1, 1])),
        };
        let image = mk(pos.iter().flatten().copied().collect(), jac.iter().flatten().flatten().copied().collect());
        let mut dp = Vec::new();
        let mut dj = Vec::new();
        for k in 0..2 {
            dp.extend(inv.apply(pos[k]));
            let m = crate::geometry::mat2_mul(&inv.linear, &jac[k]);
            dj.extend([m[0][0], m[0][1], m[1][0], m[1][1]]);
        }
        let loss = equivariance_loss_var(&image, &mk(dp, dj), &[t]).unwrap().value().item();
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn elementwise_losses() {
        let a = Mask::from_fn(4, 4, |r, _| r < 2);
        assert_eq!(mask_alignment_losses(&a, &a, &a).unwrap(), (0.0, 0.0));
        assert_eq!(mask_alignment_losses(&a.complement(), &a.complement(), &a).unwrap(), (1.0, 1.0));
        let x = RgbImage::filled(4, 4, [0.2, 0.3, 0.4]);
        let y = RgbImage::filled(4, 4, [0.3, 0.4, 0.5]);
        assert!((reconstruction_loss(&x, &y).unwrap() - 0.1).abs() < 1e-12);
        let z = RgbImage::filled(4, 4, [0.4, 0.5, 0.6]);
        assert!((cycle_loss(&x, &z).unwrap() - 0.2).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (p, q) = (noise(&mut rng, 5, 5), noise(&mut rng, 5, 5));
        let want: f64 = p.data().iter().zip(q.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 75.0;
        assert!((reconstruction_loss(&p, &q).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum_and_linear() {
        let terms = LossTerms { eq: 0.1, perc: 0.2, context: 0.3, bound: 0.4, mask_i: 0.5, mask_t: 0.6, rec: 0.7, cyc: 0.8 };
        assert_eq!(terms.total(&LossWeights::ZERO), 0.0);
        let only = LossWeights { rec: 1.0, ..LossWeights::ZERO };
        assert_eq!(terms.total(&only), 0.7);
        let w = LossWeights::default();
        let want = 10.0 * 0.1 + 10.0 * 0.2 + 0.3 + 10.0 * 0.4 + 10.0 * 1.1 + 10.0 * 0.7 + 10.0 * 0.8;
        assert!((terms.total(&w) - want).abs() < 1e-12);
        assert!((terms.total(&w.scaled(2.0)) - 2.0 * want).abs() < 1e-9);

        let g = Graph::new();
        let c = |v: f64| g.constant(Tensor::scalar(v));
        let vars = LossTerms {
            eq: c(0.1),
            perc: c(0.2),
            context: c(0.3),
            bound: c(0.4),
            mask_i: c(0.5),
            mask_t: c(0.6),
            rec: c(0.7),
            cyc: c(0.8),
        };
        assert!((vars.total(&w).unwrap().value().item() - want).abs() < 1e-12);
        assert_eq!(vars.values(), terms);
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights { eq: -1.0, ..LossWeights::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
        assert_eq!(default_dilation(64, 64), 2);
    }
}

#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;

    fn mask(h: usize, w: usize, bits: &[bool]) -> Mask {
        Mask::from_fn(h, w, |r, c| bits[r * w + c])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn boundary_loss_is_bounded_and_symmetric(
            a in proptest::collection::vec(any::<bool>(), 64),
            b in proptest::collection::vec(any::<bool>(), 64),
            d in 1usize..4,
        ) {
            let (ma, mb) = (mask(8, 8, &a), mask(8, 8, &b));
            let ab = boundary_iou_loss(&[ma.clone()], &mb, d).unwrap();
            let ba = boundary_iou_loss(&[mb], &ma, d).unwrap();
            prop_assert!((-1e-9..=1.0 + 1e-9).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(boundary_iou_loss(&[ma.clone()], &ma, d).unwrap().abs() < 1e-9);
        }

        #[test]
        fn default_dilation_is_positive_and_monotone(h in 1usize..2000, w in 1usize..2000) {
            let d = default_dilation(h, w);
            prop_assert!(d >= 1);
            prop_assert!(default_dilation(h + 50, w + 50) >= d);
        }
    }
}
