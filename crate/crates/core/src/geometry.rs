//! Coordinate conventions, affine algebra, warp fields and thin-plate-spline
//! deformations.
//!
//! All geometry lives in normalized image space `[-1, 1]²` with `x` pointing
//! right and `y` pointing down. Corner pixel *centers* map exactly to `±1`, so
//! affine parameters are independent of resolution.
//!
//! A [`WarpField`] follows the backward-warp convention: for every output
//! pixel it stores the source coordinate to read from.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::{self, Padding};
use crate::tensor::Tensor;

/// Determinant magnitude below which an affine is treated as singular.
pub const SINGULAR_DET: f64 = 1e-8;

#[inline]
pub fn normalized_coord(index: usize, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * index as f64 / (size - 1) as f64
    }
}

/// Per-pixel normalized coordinates, stored `[h, w, 2]` as `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedGrid {
    height: usize,
    width: usize,
    coords: Tensor,
}

pub fn make_identity_grid(height: usize, width: usize) -> Result<NormalizedGrid> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!("grid must be at least 1x1, got {height}x{width}")));
    }
    let coords = Tensor::from_fn(&[height, width, 2], |i| {
        let px = i / 2;
        if i % 2 == 0 {
            normalized_coord(px % width, width)
        } else {
            normalized_coord(px / width, height)
        }
    });
    Ok(NormalizedGrid { height, width, coords })
}

impl NormalizedGrid {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn at(&self, row: usize, col: usize) -> [f64; 2] {
        [self.coords.at(&[row, col, 0]), self.coords.at(&[row, col, 1])]
    }

    pub fn points(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.coords.data().chunks_exact(2).map(|c| [c[0], c[1]])
    }
}

/// `z ↦ linear · z + translation` in normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine2D {
    pub linear: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl Default for Affine2D {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Affine2D {
    pub const IDENTITY: Affine2D = Affine2D { linear: [[1.0, 0.0], [0.0, 1.0]], translation: [0.0, 0.0] };

    pub fn new(linear: [[f64; 2]; 2], translation: [f64; 2]) -> Self {
        Self { linear, translation }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { translation: [tx, ty], ..Self::IDENTITY }
    }

    pub fn det(&self) -> f64 {
        let m = &self.linear;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    #[inline]
    pub fn apply(&self, z: [f64; 2]) -> [f64; 2] {
        let m = &self.linear;
        [
            m[0][0] * z[0] + m[0][1] * z[1] + self.translation[0],
            m[1][0] * z[0] + m[1][1] * z[1] + self.translation[1],
        ]
    }

    pub fn max_abs_diff(&self, other: &Affine2D) -> f64 {
        let mut d: f64 = 0.0;
        for r in 0..2 {
            for c in 0..2 {
                d = d.max((self.linear[r][c] - other.linear[r][c]).abs());
            }
            d = d.max((self.translation[r] - other.translation[r]).abs());
        }
        d
    }
}

pub fn mat2_mul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

/// `a ∘ b`: apply `b` first, then `a`.
pub fn compose_affine(a: &Affine2D, b: &Affine2D) -> Affine2D {
    let linear = mat2_mul(&a.linear, &b.linear);
    let t = a.apply(b.translation);
    Affine2D { linear, translation: t }
}

pub fn invert_affine(a: &Affine2D) -> Result<Affine2D> {
    let det = a.det();
    if det.abs() <= SINGULAR_DET {
        return Err(Error::Singular { det, threshold: SINGULAR_DET });
    }
    let m = &a.linear;
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let t = a.translation;
    let translation = [
        -(inv[0][0] * t[0] + inv[0][1] * t[1]),
        -(inv[1][0] * t[0] + inv[1][1] * t[1]),
    ];
    Ok(Affine2D { linear: inv, translation })
}

/// For every output pixel, the source coordinate to sample. Stored
/// `[h, w, 2]`; values may leave `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpField {
    height: usize,
    width: usize,
    target: Tensor,
}

impl WarpField {
    pub fn identity(height: usize, width: usize) -> Result<Self> {
        Ok(make_identity_grid(height, width)?.into())
    }

    pub fn from_tensor(target: Tensor) -> Result<Self> {
        match *target.shape() {
            [height, width, 2] => {
                if !target.all_finite() {
                    return Err(Error::shape("warp field has non-finite entries"));
                }
                Ok(Self { height, width, target })
            }
            _ => Err(Error::shape(format!("warp field must be [h, w, 2], got {:?}", target.shape()))),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn target(&self) -> &Tensor {
        &self.target
    }

    pub fn at(&self, row: usize, col: usize) -> [f64; 2] {
        [self.target.at(&[row, col, 0]), self.target.at(&[row, col, 1])]
    }

    /// The field as a `[1, h, w, 2]` sampling grid.
    pub fn as_batch(&self) -> Tensor {
        self.target.reshape(&[1, self.height, self.width, 2]).expect("shape is [h,w,2]")
    }
}

impl From<NormalizedGrid> for WarpField {
    fn from(g: NormalizedGrid) -> Self {
        Self { height: g.height, width: g.width, target: g.coords }
    }
}

pub fn affine_to_warpfield(a: &Affine2D, height: usize, width: usize) -> Result<WarpField> {
    let grid = make_identity_grid(height, width)?;
    let mut out = Vec::with_capacity(height * width * 2);
    for z in grid.points() {
        out.extend(a.apply(z));
    }
    WarpField::from_tensor(Tensor::new(vec![height, width, 2], out)?)
}

/// Bilinearly sample a `[c, h, w]` image through `warp`, giving
/// `[c, warp.height, warp.width]`.
pub fn sample(image: &Tensor, warp: &WarpField, padding: Padding) -> Result<Tensor> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape(format!("sample expects [c, h, w], got {:?}", image.shape()))),
    };
    let batched = image.reshape(&[1, c, h, w])?;
    let out = kernels::grid_sample(&batched, &warp.as_batch(), padding)?;
    out.reshape(&[c, warp.height, warp.width])
}

// ---------------------------------------------------------------------------
// Thin-plate splines

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpsConfig {
    /// Control points per side.
    pub grid_size: usize,
    /// Bound on each control displacement component.
    pub sigma: f64,
    /// Bound on the entries of the random global affine perturbation.
    pub affine_sigma: f64,
}

impl Default for TpsConfig {
    fn default() -> Self {
        Self { grid_size: 5, sigma: 0.15, affine_sigma: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpsParams {
    pub grid_size: usize,
    pub displacements: Vec<[f64; 2]>,
    pub jitter: Affine2D,
}

impl TpsParams {
    pub fn zero(grid_size: usize) -> Self {
        Self { grid_size, displacements: vec![[0.0; 2]; grid_size * grid_size], jitter: Affine2D::IDENTITY }
    }

    pub fn control_points(&self) -> Vec<[f64; 2]> {
        let n = self.grid_size;
        (0..n * n).map(|i| [normalized_coord(i % n, n), normalized_coord(i / n, n)]).collect()
    }

    pub fn max_displacement(&self) -> f64 {
        self.displacements.iter().flatten().fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

pub fn random_tps(config: &TpsConfig, seed: u64) -> Result<TpsParams> {
    if config.grid_size < 2 {
        return Err(Error::Config(format!("tps grid must be at least 2x2, got {}", config.grid_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |bound: f64| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 };
    let n = config.grid_size * config.grid_size;
    let displacements = (0..n).map(|_| [draw(config.sigma), draw(config.sigma)]).collect();
    let s = config.affine_sigma;
    let jitter = Affine2D {
        linear: [[1.0 + draw(s), draw(s)], [draw(s), 1.0 + draw(s)]],
        translation: [draw(s), draw(s)],
    };
    Ok(TpsParams { grid_size: config.grid_size, displacements, jitter })
}

const TPS_KERNEL_EPS: f64 = 1e-12;

/// Radial basis `U(r²) = r² · ln(r²)`, regularized at the origin.
#[inline]
fn tps_kernel(r2: f64) -> f64 {
    r2 * (r2 + TPS_KERNEL_EPS).ln()
}

#[inline]
fn tps_kernel_grad_factor(r2: f64) -> f64 {
    // dU/dz = 2 (z - c) · (ln(r² + ε) + r² / (r² + ε))
    2.0 * ((r2 + TPS_KERNEL_EPS).ln() + r2 / (r2 + TPS_KERNEL_EPS))
}

/// A solved thin-plate spline: `T(z) = jitter(z) + f(z)` where `f`
/// interpolates the control displacements exactly.
#[derive(Clone, Debug)]
pub struct TpsTransform {
    control: Vec<[f64; 2]>,
    /// Radial weights, one 2-vector per control point.
    weights: Vec<[f64; 2]>,
    /// Polynomial part `[c, cx, cy]` per output coordinate.
    poly: [[f64; 3]; 2],
    jitter: Affine2D,
}

impl TpsParams {
    pub fn solve(&self) -> Result<TpsTransform> {
        let control = self.control_points();
        let n = control.len();
        if self.displacements.len() != n {
            return Err(Error::Config(format!(
                "tps has {} displacements for {} control points",
                self.displacements.len(),
                n
            )));
        }
        let mut weights = vec![[0.0; 2]; n];
        let mut poly = [[0.0; 3]; 2];
        if self.displacements.iter().flatten().any(|&d| d != 0.0) {
            let size = n + 3;
            let mut sys = DMatrix::<f64>::zeros(size, size);
            for i in 0..n {
                for j in 0..n {
                    let dx = control[i][0] - control[j][0];
                    let dy = control[i][1] - control[j][1];
                    sys[(i, j)] = tps_kernel(dx * dx + dy * dy);
                }
                let p = [1.0, control[i][0], control[i][1]];
                for (k, &v) in p.iter().enumerate() {
                    sys[(i, n + k)] = v;
                    sys[(n + k, i)] = v;
                }
            }
            let lu = sys.lu();
            for axis in 0..2 {
                let mut rhs = DVector::<f64>::zeros(size);
                for i in 0..n {
                    rhs[i] = self.displacements[i][axis];
                }
                let sol = lu
                    .solve(&rhs)
                    .ok_or_else(|| Error::Config("tps system is singular".into()))?;
                for i in 0..n {
                    weights[i][axis] = sol[i];
                }
                for k in 0..3 {
                    poly[axis][k] = sol[n + k];
                }
            }
        }
        Ok(TpsTransform { control, weights, poly, jitter: self.jitter })
    }
}

impl TpsTransform {
    pub fn apply(&self, z: [f64; 2]) -> [f64; 2] {
        let mut out = self.jitter.apply(z);
        for axis in 0..2 {
            let p = &self.poly[axis];
            let mut f = p[0] + p[1] * z[0] + p[2] * z[1];
            for (c, w) in self.control.iter().zip(&self.weights) {
                if w[axis] != 0.0 {
                    let dx = z[0] - c[0];
                    let dy = z[1] - c[1];
                    f += w[axis] * tps_kernel(dx * dx + dy * dy);
                }
            }
            out[axis] += f;
        }
        out
    }

    /// `∂T/∂z` at `z`, rows indexed by output coordinate.
    pub fn jacobian(&self, z: [f64; 2]) -> [[f64; 2]; 2] {
        let mut j = self.jitter.linear;
        for axis in 0..2 {
            j[axis][0] += self.poly[axis][1];
            j[axis][1] += self.poly[axis][2];
        }
        for (c, w) in self.control.iter().zip(&self.weights) {
            let dx = z[0] - c[0];
            let dy = z[1] - c[1];
            let k = tps_kernel_grad_factor(dx * dx + dy * dy);
            for axis in 0..2 {
                j[axis][0] += w[axis] * k * dx;
                j[axis][1] += w[axis] * k * dy;
            }
        }
        j
    }

    /// Apply to points held on a graph (`[..., 2]`), differentiably in the
    /// points.
    pub fn apply_var(&self, points: &Var) -> Result<Var> {
        let shape = points.shape();
        let rank = shape.len();
        if shape.last() != Some(&2) {
            return Err(Error::shape(format!("points must end in 2, got {shape:?}")));
        }
        let g = points.graph();
        let x = points.narrow(rank - 1, 0, 1)?;
        let y = points.narrow(rank - 1, 1, 1)?;
        let lin = &self.jitter.linear;
        let mut axes = Vec::with_capacity(2);
        for axis in 0..2 {
            let p = &self.poly[axis];
            let mut acc = x
                .scale(lin[axis][0] + p[1])
                .add(&y.scale(lin[axis][1] + p[2]))?
                .offset(self.jitter.translation[axis] + p[0]);
            for (c, w) in self.control.iter().zip(&self.weights) {
                if w[axis] == 0.0 {
                    continue;
                }
                let dx = x.offset(-c[0]);
                let dy = y.offset(-c[1]);
                let r2 = dx.square().add(&dy.square())?;
                let u = r2.mul(&r2.offset(TPS_KERNEL_EPS).ln())?;
                acc = acc.add(&u.scale(w[axis]))?;
            }
            axes.push(acc);
        }
        let _ = g;
        Var::concat(&axes, rank - 1)
    }
}

pub fn apply_tps(params: &TpsParams, grid: &NormalizedGrid) -> Result<WarpField> {
    let t = params.solve()?;
    let mut out = Vec::with_capacity(grid.height * grid.width * 2);
    for z in grid.points() {
        out.extend(t.apply(z));
    }
    WarpField::from_tensor(Tensor::new(vec![grid.height, grid.width, 2], out)?)
}
