//! Keypoint prediction, per-keypoint local affines and their dilation into
//! full-resolution warp fields.

use crate::autograd::{Graph, Var};
use crate::config::{DriverInput, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{affine_to_warpfield, compose_affine, invert_affine, make_identity_grid, Affine2D, WarpField};
use crate::imaging::{Mask, RgbImage};
use crate::kernels::Padding;
use crate::nn::{Bound, Conv2d, Hourglass, Init, ParamStore};
use crate::tensor::Tensor;

/// Jacobians of the source side with `|det|` below this fall back to an
/// identity linear part.
pub const DEGENERATE_DET: f64 = 1e-6;

pub const SEGMENT: &str = "correspondence";

/// Keypoints of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub positions: Vec<[f64; 2]>,
    /// Row-major 2×2 local linear parts.
    pub jacobians: Vec<[[f64; 2]; 2]>,
    /// `[K, h, w]`, each map summing to one.
    pub heatmaps: Tensor,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// The local frame of keypoint `k` as an affine map `z ↦ J z + p`.
    pub fn frame(&self, k: usize) -> Affine2D {
        Affine2D::new(self.jacobians[k], self.positions[k])
    }
}

/// Keypoint tensors on a graph for a batch of `n` images.
#[derive(Clone)]
pub struct KeypointVars {
    /// `[n, K, 2]`
    pub positions: Var,
    /// `[n, K, 4]`, row-major 2×2.
    pub jacobians: Var,
    /// `[n, K, h, w]`
    pub heatmaps: Var,
}

impl KeypointVars {
    fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            positions: self.positions.narrow(0, start, len)?,
            jacobians: self.jacobians.narrow(0, start, len)?,
            heatmaps: self.heatmaps.narrow(0, start, len)?,
        })
    }

    /// Read back sample `i` of the batch.
    pub fn to_set(&self, i: usize) -> Result<KeypointSet> {
        let pos = self.positions.value();
        let jac = self.jacobians.value();
        let heat = self.heatmaps.value();
        let [_, k, h, w] = heat.dims4()?;
        let positions = (0..k).map(|j| [pos.at(&[i, j, 0]), pos.at(&[i, j, 1])]).collect();
        let jacobians = (0..k)
            .map(|j| {
                let e = |m| jac.at(&[i, j, m]);
                [[e(0), e(1)], [e(2), e(3)]]
            })
            .collect();
        let heatmaps = heat.narrow0(i, 1)?.reshape(&[k, h, w])?;
        Ok(KeypointSet { positions, jacobians, heatmaps })
    }
}

/// Local affines on a graph.
#[derive(Clone)]
pub struct AffineVars {
    /// `[n, K, 4]`, row-major 2×2.
    pub linear: Var,
    /// `[n, K, 2]`
    pub translation: Var,
    /// One flag per `(n, K)`, row-major.
    pub degenerate: Vec<bool>,
}

impl AffineVars {
    pub fn to_affines(&self, i: usize) -> Vec<Affine2D> {
        let l = self.linear.value();
        let t = self.translation.value();
        let k = l.shape()[1];
        (0..k)
            .map(|j| {
                let e = |m| l.at(&[i, j, m]);
                Affine2D::new([[e(0), e(1)], [e(2), e(3)]], [t.at(&[i, j, 0]), t.at(&[i, j, 1])])
            })
            .collect()
    }
}

/// Everything the correspondence stage produces, on a graph.
#[derive(Clone)]
pub struct CorrespondenceVars {
    pub source: KeypointVars,
    pub driver: KeypointVars,
    pub affines: AffineVars,
    /// `[n, K, H, W, 2]`
    pub warps: Var,
    /// `[n, K, H, W]`
    pub warped_masks: Var,
    /// `[n, K, 3, H, W]`
    pub warped_images: Var,
}

/// Everything the correspondence stage produces for a single sample.
#[derive(Clone, Debug)]
pub struct CorrespondenceOutput {
    pub source: KeypointSet,
    pub driver: KeypointSet,
    pub affines: Vec<Affine2D>,
    pub degenerate: Vec<bool>,
    pub warps: Vec<WarpField>,
    pub warped_masks: Vec<Mask>,
    pub warped_images: Vec<RgbImage>,
}

pub fn masked_exemplar(y_a: &Mask, y_b: &RgbImage) -> Result<RgbImage> {
    y_b.masked(y_a)
}

/// Spatial softmax of `[n, K, h, w]` logits and the expected grid coordinate
/// under each resulting heatmap. Returns `(heatmaps, positions [n, K, 2])`.
pub fn softargmax(logits: &Var, temperature: f64) -> Result<(Var, Var)> {
    let [n, k, h, w] = logits.value().dims4()?;
    let g = logits.graph();
    let flat = logits.scale(1.0 / temperature).reshape(&[n, k, h * w])?.softmax(2)?;
    let grid = make_identity_grid(h, w)?;
    let axis = |a: usize| {
        let t = Tensor::from_fn(&[1, 1, h * w], |i| grid.coords().data()[2 * i + a]);
        g.constant(t)
    };
    let px = flat.mul(&axis(0))?.sum_axis(2)?;
    let py = flat.mul(&axis(1))?.sum_axis(2)?;
    Ok((flat.reshape(&[n, k, h, w])?, Var::concat(&[px, py], 2)?))
}

/// Bring `[n, c, h, w]` to `[n, c, r, r]`, pooling when the factor is an
/// integer and bilinearly resampling otherwise.
pub fn resize_var(x: &Var, r: usize) -> Result<Var> {
    let [_, _, h, w] = x.value().dims4()?;
    if h == w && h % r == 0 && h != r {
        return x.avg_pool(h / r);
    }
    resample_var(x, r, r)
}

/// Bilinear resampling of `[n, c, h, w]` to `[n, c, height, width]` on the
/// corner-aligned grid; a no-op when the size already matches.
pub fn resample_var(x: &Var, height: usize, width: usize) -> Result<Var> {
    let [n, _, h, w] = x.value().dims4()?;
    if h == height && w == width {
        return Ok(x.clone());
    }
    let grid = make_identity_grid(height, width)?;
    let len = height * width * 2;
    let batch = Tensor::from_fn(&[n, height, width, 2], |i| grid.coords().data()[i % len]);
    x.grid_sample(&x.graph().constant(batch), Padding::Border)
}

fn entry(v: &Var, m: usize) -> Result<Var> {
    let last = v.shape().len() - 1;
    v.narrow(last, m, 1)
}

/// `linear = J_drv · J_src⁻¹`, `translation = p_drv − linear · p_src`, with an
/// identity linear part wherever `|det J_src| < DEGENERATE_DET`.
pub fn local_affines_var(src: &KeypointVars, drv: &KeypointVars) -> Result<AffineVars> {
    if src.positions.shape() != drv.positions.shape() {
        return Err(Error::shape(format!(
            "keypoint sets differ: {:?} vs {:?}",
            src.positions.shape(),
            drv.positions.shape()
        )));
    }
    let g = src.positions.graph();
    let js = src.jacobians.value();
    let degenerate: Vec<bool> = js
        .data()
        .chunks_exact(4)
        .map(|j| (j[0] * j[3] - j[1] * j[2]).abs() < DEGENERATE_DET)
        .collect();
    let mut shape = js.shape().to_vec();
    shape[2] = 1;
    let ok = g.constant(Tensor::new(shape, degenerate.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect())?);
    let fallback = ok.rsub(1.0);

    let (a, b, c, d) = (
        entry(&src.jacobians, 0)?,
        entry(&src.jacobians, 1)?,
        entry(&src.jacobians, 2)?,
        entry(&src.jacobians, 3)?,
    );
    let det = a.mul(&d)?.sub(&b.mul(&c)?)?.add(&fallback)?;
    let inv = [d.div(&det)?, b.neg().div(&det)?, c.neg().div(&det)?, a.div(&det)?];
    let jd: Vec<Var> = (0..4).map(|m| entry(&drv.jacobians, m)).collect::<Result<_>>()?;
    let l00 = jd[0].mul(&inv[0])?.add(&jd[1].mul(&inv[2])?)?;
    let l01 = jd[0].mul(&inv[1])?.add(&jd[1].mul(&inv[3])?)?;
    let l10 = jd[2].mul(&inv[0])?.add(&jd[3].mul(&inv[2])?)?;
    let l11 = jd[2].mul(&inv[1])?.add(&jd[3].mul(&inv[3])?)?;
    let eye = [1.0, 0.0, 0.0, 1.0];
    let guard = |l: Var, e: f64| -> Result<Var> { l.mul(&ok)?.add(&fallback.scale(e)) };
    let l00 = guard(l00, eye[0])?;
    let l01 = guard(l01, eye[1])?;
    let l10 = guard(l10, eye[2])?;
    let l11 = guard(l11, eye[3])?;

    let (psx, psy) = (entry(&src.positions, 0)?, entry(&src.positions, 1)?);
    let (pdx, pdy) = (entry(&drv.positions, 0)?, entry(&drv.positions, 1)?);
    let tx = pdx.sub(&l00.mul(&psx)?.add(&l01.mul(&psy)?)?)?;
    let ty = pdy.sub(&l10.mul(&psx)?.add(&l11.mul(&psy)?)?)?;
    Ok(AffineVars {
        linear: Var::concat(&[l00, l01, l10, l11], 2)?,
        translation: Var::concat(&[tx, ty], 2)?,
        degenerate,
    })
}

/// Evaluate each local affine over the full `height × width` grid, giving
/// `[n, K, height, width, 2]`.
pub fn dilate_var(affines: &AffineVars, height: usize, width: usize) -> Result<Var> {
    let g = affines.linear.graph();
    let shape = affines.linear.shape();
    let (n, k) = (shape[0], shape[1]);
    let grid = make_identity_grid(height, width)?;
    let axis = |a: usize| {
        g.constant(Tensor::from_fn(&[1, 1, height, width], |i| grid.coords().data()[2 * i + a]))
    };
    let (gx, gy) = (axis(0), axis(1));
    let coef = |v: &Var, m: usize| -> Result<Var> { entry(v, m)?.reshape(&[n, k, 1, 1]) };
    let l = &affines.linear;
    let t = &affines.translation;
    let x = coef(l, 0)?.mul(&gx)?.add(&coef(l, 1)?.mul(&gy)?)?.add(&coef(t, 0)?)?;
    let y = coef(l, 2)?.mul(&gx)?.add(&coef(l, 3)?.mul(&gy)?)?.add(&coef(t, 1)?)?;
    Var::concat(
        &[x.reshape(&[n, k, height, width, 1])?, y.reshape(&[n, k, height, width, 1])?],
        4,
    )
}

/// Reference route through plain affine algebra: the local affine is the
/// driver frame composed with the inverse of the source frame.
pub fn local_affines(source: &KeypointSet, driver: &KeypointSet) -> Result<(Vec<Affine2D>, Vec<bool>)> {
    if source.len() != driver.len() {
        return Err(Error::shape(format!("{} vs {} keypoints", source.len(), driver.len())));
    }
    let mut out = Vec::with_capacity(source.len());
    let mut flags = Vec::with_capacity(source.len());
    for k in 0..source.len() {
        let src = source.frame(k);
        if src.det().abs() < DEGENERATE_DET {
            let lin = Affine2D::IDENTITY.linear;
            let p = source.positions[k];
            let q = driver.positions[k];
            out.push(Affine2D::new(lin, [q[0] - p[0], q[1] - p[1]]));
            flags.push(true);
        } else {
            out.push(compose_affine(&driver.frame(k), &invert_affine(&src)?));
            flags.push(false);
        }
    }
    Ok((out, flags))
}

pub fn dilate(affines: &[Affine2D], height: usize, width: usize) -> Result<Vec<WarpField>> {
    affines.iter().map(|a| affine_to_warpfield(a, height, width)).collect()
}

/// The shared keypoint predictor.
#[derive(Clone, Debug)]
pub struct CorrespondenceModel {
    config: ModelConfig,
    params: ParamStore,
    net: Hourglass,
    heat: Conv2d,
    jac: Conv2d,
}

impl CorrespondenceModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let k = config.keypoints;
        let mut params = ParamStore::new();
        let mut init = Init::new(config.seed ^ 0xC0AA_E5B0);
        let net = Hourglass::register(&mut params, &mut init, "net", 3, config.keypoint_net);
        let c = net.out_channels();
        let heat = Conv2d::register(&mut params, &mut init, "heat", (c, k), 3);
        let jac_bias = Tensor::from_fn(&[4 * k], |i| if i % 4 == 0 || i % 4 == 3 { 1.0 } else { 0.0 });
        let jac = Conv2d::register_with(&mut params, "jacobian", Tensor::zeros(&[4 * k, c, 3, 3]), jac_bias);
        Ok(Self { config: config.clone(), params, net, heat, jac })
    }

    /// Rebuild with stored weights, checking names and shapes.
    pub fn with_params(config: &ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.params.check_layout(&params)?;
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
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

    /// Keypoints for a batch of `[n, 3, H, W]` inputs.
    pub fn keypoints_var(&self, p: &Bound<'_>, input: &Var) -> Result<KeypointVars> {
        let x = resize_var(input, self.config.internal_resolution)?;
        let feat = self.net.forward(p, &x)?;
        let logits = self.heat.forward(p, &feat)?;
        let (heatmaps, positions) = softargmax(&logits, self.config.temperature)?;
        let [n, k, h, w] = heatmaps.value().dims4()?;
        let weights = heatmaps.reshape(&[n, k, 1, h * w])?;
        let jacobians = self
            .jac
            .forward(p, &feat)?
            .reshape(&[n, k, 4, h * w])?
            .mul(&weights)?
            .sum_axis(3)?
            .reshape(&[n, k, 4])?;
        Ok(KeypointVars { positions, jacobians, heatmaps })
    }

    pub fn predict_keypoints(&self, input: &RgbImage) -> Result<KeypointSet> {
        let g = Graph::new();
        let (h, w) = input.dims();
        let x = g.constant(input.tensor().reshape(&[1, 3, h, w])?);
        self.keypoints_var(&self.bind(&g, false), &x)?.to_set(0)
    }

    /// Full correspondence stage on `[n, 1, H, W]` masks and a `[n, 3, H, W]`
    /// exemplar.
    pub fn correspond_var(&self, p: &Bound<'_>, x_a: &Var, y_a: &Var, y_b: &Var) -> Result<CorrespondenceVars> {
        let [n, _, h, w] = y_b.value().dims4()?;
        for (name, m) in [("x_A", x_a), ("y_A", y_a)] {
            if m.shape() != [n, 1, h, w] {
                return Err(Error::shape(format!("{name} is {:?}, expected {:?}", m.shape(), [n, 1, h, w])));
            }
        }
        let k = self.config.keypoints;
        let rgb = [n, 3, h, w];
        let src_in = x_a.broadcast_to(&rgb)?;
        let drv_in = match self.config.driver_input {
            DriverInput::MaskedExemplar => y_a.mul(y_b)?,
            DriverInput::Mask => y_a.broadcast_to(&rgb)?,
        };
        let both = self.keypoints_var(p, &Var::concat(&[src_in, drv_in], 0)?)?;
        let source = both.narrow(0, n)?;
        let driver = both.narrow(n, n)?;
        let affines = local_affines_var(&source, &driver)?;
        let warps = dilate_var(&affines, h, w)?;
        let grid = warps.reshape(&[n * k, h, w, 2])?;
        let warped_masks = y_a
            .reshape(&[n, 1, h, w])?
            .broadcast_to(&[n, k, h, w])?
            .reshape(&[n * k, 1, h, w])?
            .grid_sample(&grid, Padding::Zeros)?
            .reshape(&[n, k, h, w])?;
        let warped_images = y_b
            .reshape(&[n, 1, 3, h, w])?
            .broadcast_to(&[n, k, 3, h, w])?
            .reshape(&[n * k, 3, h, w])?
            .grid_sample(&grid, Padding::Border)?
            .reshape(&[n, k, 3, h, w])?;
        Ok(CorrespondenceVars { source, driver, affines, warps, warped_masks, warped_images })
    }

    pub fn correspond(&self, x_a: &Mask, y_a: &Mask, y_b: &RgbImage) -> Result<CorrespondenceOutput> {
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
        let vars = self.correspond_var(
            &self.bind(&g, false),
            &g.constant(x_a.tensor().reshape(&[1, 1, h, w])?),
            &g.constant(y_a.tensor().reshape(&[1, 1, h, w])?),
            &g.constant(y_b.tensor().reshape(&[1, 3, h, w])?),
        )?;
        CorrespondenceOutput::from_vars(&vars, 0)
    }
}

impl CorrespondenceOutput {
    pub fn from_vars(vars: &CorrespondenceVars, i: usize) -> Result<Self> {
        let warps_t = vars.warps.value();
        let masks_t = vars.warped_masks.value();
        let images_t = vars.warped_images.value();
        let (k, h, w) = (warps_t.shape()[1], warps_t.shape()[2], warps_t.shape()[3]);
        let mut warps = Vec::with_capacity(k);
        let mut warped_masks = Vec::with_capacity(k);
        let mut warped_images = Vec::with_capacity(k);
        let plane = |t: &Tensor, len: usize, j: usize| {
            let off = (i * k + j) * len;
            t.data()[off..off + len].to_vec()
        };
        for j in 0..k {
            warps.push(WarpField::from_tensor(Tensor::new(vec![h, w, 2], plane(&warps_t, h * w * 2, j))?)?);
            let m = Tensor::new(vec![1, h, w], plane(&masks_t, h * w, j))?;
            warped_masks.push(Mask::from_tensor(m.map(|v| v.clamp(0.0, 1.0)))?);
            let img = Tensor::new(vec![3, h, w], plane(&images_t, 3 * h * w, j))?;
            warped_images.push(RgbImage::from_tensor_clamped(img)?);
        }
        let flags = vars.affines.degenerate[i * k..(i + 1) * k].to_vec();
        Ok(Self {
            source: vars.source.to_set(i)?,
            driver: vars.driver.to_set(i)?,
            affines: vars.affines.to_affines(i),
            degenerate: flags,
            warps,
            warped_masks,
            warped_images,
        })
    }
}

#[cfg(test)]
mod tests {
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::gradcheck::max_rel_error;
    use crate::geometry::sample;

    fn homogeneous(a: &Affine2D) -> Matrix3<f64> {
        Matrix3::new(
            a.linear[0][0], a.linear[0][1], a.translation[0],
            a.linear[1][0], a.linear[1][1], a.translation[1],
            0.0, 0.0, 1.0,
        )
    }

    fn random_set(rng: &mut ChaCha8Rng, k: usize) -> KeypointSet {
        let positions = (0..k).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let jacobians = (0..k)
            .map(|_| {
                [
                    [rng.random_range(0.5..1.5), rng.random_range(-0.4..0.4)],
                    [rng.random_range(-0.4..0.4), rng.random_range(0.5..1.5)],
                ]
            })
            .collect();
        KeypointSet { positions, jacobians, heatmaps: Tensor::zeros(&[k, 1, 1]) }
    }

    fn set_to_vars(g: &Graph, s: &KeypointSet) -> KeypointVars {
        let k = s.len();
        let pos = Tensor::new(vec![1, k, 2], s.positions.iter().flatten().copied().collect()).unwrap();
        let jac = Tensor::new(vec![1, k, 4], s.jacobians.iter().flatten().flatten().copied().collect()).unwrap();
        KeypointVars {
            positions: g.leaf(pos),
            jacobians: g.leaf(jac),
            heatmaps: g.constant(Tensor::zeros(&[1, k, 1, 1])),
        }
    }

    #[test]
    fn masked_exemplar_is_elementwise() {
        let y_b = RgbImage::from_tensor(Tensor::from_fn(&[3, 4, 4], |i| (i % 7) as f64 / 7.0)).unwrap();
        assert_eq!(masked_exemplar(&Mask::ones(4, 4), &y_b).unwrap(), y_b);
        assert!(masked_exemplar(&Mask::zeros(4, 4), &y_b).unwrap().data().iter().all(|&v| v == 0.0));
        let half = Mask::from_fn(4, 4, |_, c| c < 2);
        let out = masked_exemplar(&half, &y_b).unwrap();
        for ch in 0..3 {
            for r in 0..4 {
                for c in 0..4 {
                    let want = if c < 2 { y_b.at(ch, r, c) } else { 0.0 };
                    assert_eq!(out.at(ch, r, c), want);
                }
            }
        }
        assert!(masked_exemplar(&Mask::ones(3, 4), &y_b).is_err());
    }

    #[test]
    fn softargmax_symmetric_and_delta_cases() {
        let g = Graph::new();
        let (heat, pos) = softargmax(&g.constant(Tensor::zeros(&[1, 2, 8, 8])), 0.1).unwrap();
        assert!(pos.value().data().iter().all(|v| v.abs() < 1e-12));
        assert!((heat.value().sum() - 2.0).abs() < 1e-12);

        let logits = Tensor::from_fn(&[1, 1, 8, 8], |i| if i == 3 * 8 + 5 { 1e3 } else { 0.0 });
        let (_, pos) = softargmax(&g.constant(logits), 0.1).unwrap();
        let p = pos.value();
        assert!((p.data()[0] - (-1.0 + 2.0 * 5.0 / 7.0)).abs() < 1e-12);
        assert!((p.data()[1] - (-1.0 + 2.0 * 3.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn equal_keypoints_give_identity_affines() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_set(&mut rng, 5);
        let g = Graph::new();
        let v = set_to_vars(&g, &s);
        let aff = local_affines_var(&v, &v).unwrap();
        for a in aff.to_affines(0) {
            assert!(a.max_abs_diff(&Affine2D::IDENTITY) < 1e-12);
        }
        let warps = dilate_var(&aff, 6, 5).unwrap().value();
        let id = make_identity_grid(6, 5).unwrap();
        for k in 0..5 {
            let field = warps.narrow0(0, 1).unwrap().into_vec();
            let off = k * 6 * 5 * 2;
            for (a, b) in field[off..off + 60].iter().zip(id.coords().data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn translated_driver_gives_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = random_set(&mut rng, 3);
        s.jacobians = vec![Affine2D::IDENTITY.linear; 3];
        let mut d = s.clone();
        for p in &mut d.positions {
            p[0] += 0.2;
        }
        let (affs, flags) = local_affines(&s, &d).unwrap();
        assert!(flags.iter().all(|f| !f));
        for a in affs {
            assert!(a.max_abs_diff(&Affine2D::translation(0.2, 0.0)) < 1e-12);
        }
    }

    #[test]
    fn graph_affines_match_homogeneous_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s = random_set(&mut rng, 4);
            let d = random_set(&mut rng, 4);
            let g = Graph::new();
            let aff = local_affines_var(&set_to_vars(&g, &s), &set_to_vars(&g, &d)).unwrap();
            let (typed, _) = local_affines(&s, &d).unwrap();
            for (k, a) in aff.to_affines(0).iter().enumerate() {
                let want = homogeneous(&d.frame(k)) * homogeneous(&s.frame(k)).try_inverse().unwrap();
                let got = homogeneous(a);
                assert!((want - got).abs().max() < 1e-9);
                assert!(a.max_abs_diff(&typed[k]) < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_source_falls_back_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = random_set(&mut rng, 2);
        s.jacobians[1] = [[1.0, 2.0], [0.5, 1.0]];
        let d = random_set(&mut rng, 2);
        let g = Graph::new();
        let aff = local_affines_var(&set_to_vars(&g, &s), &set_to_vars(&g, &d)).unwrap();
        assert_eq!(aff.degenerate, vec![false, true]);
        let (typed, flags) = local_affines(&s, &d).unwrap();
        assert_eq!(flags, aff.degenerate);
        let a = aff.to_affines(0)[1];
        assert_eq!(a.linear, Affine2D::IDENTITY.linear);
        assert!(a.max_abs_diff(&typed[1]) < 1e-12);
        assert!(aff.linear.value().all_finite());
    }

    #[test]
    fn dilate_matches_per_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_set(&mut rng, 3);
        let d = random_set(&mut rng, 3);
        let g = Graph::new();
        let aff = local_affines_var(&set_to_vars(&g, &s), &set_to_vars(&g, &d)).unwrap();
        let (h, w) = (9, 7);
        let warps = dilate_var(&aff, h, w).unwrap().value();
        for (k, a) in aff.to_affines(0).iter().enumerate() {
            for r in 0..h {
                for c in 0..w {
                    let z = [-1.0 + 2.0 * c as f64 / (w - 1) as f64, -1.0 + 2.0 * r as f64 / (h - 1) as f64];
                    let want = [
                        a.linear[0][0] * z[0] + a.linear[0][1] * z[1] + a.translation[0],
                        a.linear[1][0] * z[0] + a.linear[1][1] * z[1] + a.translation[1],
                    ];
                    for ax in 0..2 {
                        assert!((warps.at(&[0, k, r, c, ax]) - want[ax]).abs() < 1e-12);
                    }
                }
            }
            let typed = dilate(&[*a], h, w).unwrap();
            let off = k * h * w * 2;
            let slice = &warps.data()[off..off + h * w * 2];
            assert!(typed[0].target().data().iter().zip(slice).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn dilation_is_resolution_independent() {
        let a = Affine2D::new([[0.9, 0.1], [-0.2, 1.1]], [0.05, -0.1]);
        let small = dilate(&[a], 5, 5).unwrap();
        let large = dilate(&[a], 9, 9).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let (x, y) = (small[0].at(r, c), large[0].at(2 * r, 2 * c));
                assert!((x[0] - y[0]).abs() < 1e-12 && (x[1] - y[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = random_set(&mut rng, 2);
        let s = random_set(&mut rng, 2);
        let jac = Tensor::new(vec![1, 2, 4], s.jacobians.iter().flatten().flatten().copied().collect()).unwrap();
        let err = max_rel_error(&jac, 1e-6, |g, x| {
            let src = KeypointVars {
                positions: g.constant(Tensor::new(vec![1, 2, 2], s.positions.iter().flatten().copied().collect()).unwrap()),
                jacobians: x.clone(),
                heatmaps: g.constant(Tensor::zeros(&[1, 2, 1, 1])),
            };
            let aff = local_affines_var(&src, &set_to_vars(g, &d)).unwrap();
            let w = dilate_var(&aff, 4, 4).unwrap();
            w.square().sum_all()
        });
        assert!(err < 1e-5, "{err}");
    }

    fn blob(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Mask {
        Mask::from_fn(h, w, |y, x| {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            dx * dx + dy * dy <= r * r
        })
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            keypoints: 3,
            internal_resolution: 16,
            keypoint_net: crate::nn::HourglassSpec { blocks: 2, base: 4, max: 8 },
            attention_net: crate::nn::HourglassSpec { blocks: 2, base: 4, max: 8 },
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn keypoint_invariants_hold() {
        let model = CorrespondenceModel::new(&tiny_config()).unwrap();
        let img = RgbImage::from_mask(&blob(32, 32, 12.0, 18.0, 7.0));
        let kp = model.predict_keypoints(&img).unwrap();
        assert_eq!(kp.len(), 3);
        let [_, h, w] = [3, 16, 16];
        let grid = make_identity_grid(h, w).unwrap();
        for k in 0..3 {
            let map = &kp.heatmaps.data()[k * h * w..(k + 1) * h * w];
            assert!(map.iter().all(|&v| v >= 0.0));
            assert!((map.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            let mut mean = [0.0; 2];
            for (i, &v) in map.iter().enumerate() {
                mean[0] += v * grid.coords().data()[2 * i];
                mean[1] += v * grid.coords().data()[2 * i + 1];
            }
            assert!((mean[0] - kp.positions[k][0]).abs() < 1e-5);
            assert!((mean[1] - kp.positions[k][1]).abs() < 1e-5);
            let j = kp.jacobians[k];
            assert!((j[0][0] - 1.0).abs() < 1e-12 && j[0][1] == 0.0 && j[1][0] == 0.0 && (j[1][1] - 1.0).abs() < 1e-12);
        }
        assert_eq!(model.predict_keypoints(&img).unwrap(), kp);
    }

    #[test]
    fn correspond_identical_inputs_give_identity() {
        let mut cfg = tiny_config();
        cfg.driver_input = DriverInput::Mask;
        let model = CorrespondenceModel::new(&cfg).unwrap();
        let m = blob(16, 16, 8.0, 6.0, 4.0);
        let y_b = RgbImage::from_tensor(Tensor::from_fn(&[3, 16, 16], |i| (i % 11) as f64 / 11.0)).unwrap();
        let out = model.correspond(&m, &m, &y_b).unwrap();
        let id = WarpField::identity(16, 16).unwrap();
        for (k, w) in out.warps.iter().enumerate() {
            assert!(w.target().max_abs_diff(id.target()) < 1e-6);
            assert!(out.warped_images[k].tensor().max_abs_diff(y_b.tensor()) < 1e-6);
            assert!(out.warped_masks[k].tensor().max_abs_diff(m.tensor()) < 1e-6);
        }
        assert_eq!(out.warps.len(), 3);
    }

    #[test]
    fn correspond_handles_empty_masks() {
        let model = CorrespondenceModel::new(&tiny_config()).unwrap();
        let z = Mask::zeros(16, 16);
        let out = model.correspond(&z, &z, &RgbImage::filled(16, 16, [0.2, 0.4, 0.6])).unwrap();
        assert!(out.warps.iter().all(|w| w.target().all_finite()));
        assert_eq!(out.degenerate.len(), 3);
        for p in out.source.positions.iter().chain(&out.driver.positions) {
            assert!(p[0].abs() < 0.2 && p[1].abs() < 0.2, "{p:?}");
        }
    }

    #[test]
    fn warped_outputs_match_single_sample_calls() {
        let model = CorrespondenceModel::new(&tiny_config()).unwrap();
        let x_a = blob(16, 16, 7.0, 9.0, 5.0);
        let y_a = blob(16, 16, 9.0, 7.0, 4.0);
        let y_b = RgbImage::from_tensor(Tensor::from_fn(&[3, 16, 16], |i| (i % 13) as f64 / 13.0)).unwrap();
        let out = model.correspond(&x_a, &y_a, &y_b).unwrap();
        for k in 0..3 {
            let m = sample(y_a.tensor(), &out.warps[k], Padding::Zeros).unwrap();
            assert!(m.max_abs_diff(out.warped_masks[k].tensor()) < 1e-12);
            let img = sample(y_b.tensor(), &out.warps[k], Padding::Border).unwrap();
            assert!(img.max_abs_diff(out.warped_images[k].tensor()) < 1e-12);
        }
    }
}
