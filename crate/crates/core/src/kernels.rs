//! Numeric kernels shared by the autodiff graph and the plain tensor APIs:
//! convolution, pooling, resampling and bilinear grid sampling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Out-of-frame behaviour for [`grid_sample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Coordinates are clamped to the frame; edge pixels extend outward.
    #[default]
    Border,
    /// Samples outside the frame read as zero.
    Zeros,
}

// Coordinates within this distance of a pixel center snap onto it, so that
// identity grids reproduce their input bit for bit.
const SNAP_EPS: f64 = 1e-9;

#[derive(Clone, Copy)]
struct Tap {
    i0: isize,
    frac: f64,
    /// d(pixel index)/d(normalized coordinate); zero where clamped.
    scale: f64,
}

#[inline]
fn tap(coord: f64, size: usize, padding: Padding) -> Tap {
    let half = (size as f64 - 1.0) * 0.5;
    let mut ix = (coord + 1.0) * half;
    let mut scale = half;
    if padding == Padding::Border {
        let hi = size as f64 - 1.0;
        if ix <= 0.0 {
            if ix < 0.0 {
                scale = 0.0;
            }
            ix = 0.0;
        } else if ix >= hi {
            if ix > hi {
                scale = 0.0;
            }
            ix = hi;
        }
    }
    let r = ix.round();
    if (ix - r).abs() < SNAP_EPS {
        ix = r;
    }
    let i0 = ix.floor();
    Tap { i0: i0 as isize, frac: ix - i0, scale }
}

#[inline]
fn fetch(plane: &[f64], w: usize, h: usize, x: isize, y: isize) -> f64 {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

fn check_sample_shapes(img: &Tensor, grid: &Tensor) -> Result<([usize; 4], usize, usize)> {
    let [n, c, h, w] = img.dims4()?;
    let [gn, ho, wo, two] = grid.dims4()?;
    if gn != n || two != 2 {
        return Err(Error::shape(format!(
            "grid {:?} does not match image {:?}",
            grid.shape(),
            img.shape()
        )));
    }
    Ok(([n, c, h, w], ho, wo))
}

/// Bilinear backward warp: `out[n,c,p] = img[n,c](grid[n,p])` with
/// corner-aligned normalized coordinates (x rightward, y downward).
pub fn grid_sample(img: &Tensor, grid: &Tensor, padding: Padding) -> Result<Tensor> {
    let ([n, c, h, w], ho, wo) = check_sample_shapes(img, grid)?;
    let mut out = vec![0.0; n * c * ho * wo];
    let src = img.data();
    let g = grid.data();
    out.par_chunks_mut(c * ho * wo).enumerate().for_each(|(b, out_b)| {
        for p in 0..ho * wo {
            let gx = g[(b * ho * wo + p) * 2];
            let gy = g[(b * ho * wo + p) * 2 + 1];
            let tx = tap(gx, w, padding);
            let ty = tap(gy, h, padding);
            let (x0, y0) = (tx.i0, ty.i0);
            for ch in 0..c {
                let plane = &src[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let v00 = fetch(plane, w, h, x0, y0);
                let mut v = v00 * (1.0 - tx.frac) * (1.0 - ty.frac);
                if tx.frac != 0.0 {
                    v += fetch(plane, w, h, x0 + 1, y0) * tx.frac * (1.0 - ty.frac);
                }
                if ty.frac != 0.0 {
                    v += fetch(plane, w, h, x0, y0 + 1) * (1.0 - tx.frac) * ty.frac;
                    if tx.frac != 0.0 {
                        v += fetch(plane, w, h, x0 + 1, y0 + 1) * tx.frac * ty.frac;
                    }
                }
                out_b[ch * ho * wo + p] = v;
            }
        }
    });
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

/// Gradients of [`grid_sample`] with respect to the image and the grid.
pub fn grid_sample_backward(
    img: &Tensor,
    grid: &Tensor,
    padding: Padding,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let [_, c, h, w] = img.dims4().expect("checked in forward");
    let [_, ho, wo, _] = grid.dims4().expect("checked in forward");
    let src = img.data();
    let g = grid.data();
    let mut gimg = vec![0.0; img.numel()];
    let mut ggrid = vec![0.0; grid.numel()];
    let add = |buf: &mut [f64], x: isize, y: isize, v: f64| {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            buf[y as usize * w + x as usize] += v;
        }
    };
    gimg.par_chunks_mut(c * h * w)
        .zip(ggrid.par_chunks_mut(ho * wo * 2))
        .enumerate()
        .for_each(|(b, (gimg_b, ggrid_b))| {
            for p in 0..ho * wo {
                let tx = tap(g[(b * ho * wo + p) * 2], w, padding);
                let ty = tap(g[(b * ho * wo + p) * 2 + 1], h, padding);
                let (x0, y0) = (tx.i0, ty.i0);
                let (fx, fy) = (tx.frac, ty.frac);
                let mut dx = 0.0;
                let mut dy = 0.0;
                for ch in 0..c {
                    let go = grad_out[(b * c + ch) * ho * wo + p];
                    if go == 0.0 {
                        continue;
                    }
                    let plane = &src[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    let v00 = fetch(plane, w, h, x0, y0);
                    let v10 = fetch(plane, w, h, x0 + 1, y0);
                    let v01 = fetch(plane, w, h, x0, y0 + 1);
                    let v11 = fetch(plane, w, h, x0 + 1, y0 + 1);
                    dx += go * ((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy);
                    dy += go * ((v01 - v00) * (1.0 - fx) + (v11 - v10) * fx);
                    let gplane = &mut gimg_b[ch * h * w..(ch + 1) * h * w];
                    add(gplane, x0, y0, go * (1.0 - fx) * (1.0 - fy));
                    add(gplane, x0 + 1, y0, go * fx * (1.0 - fy));
                    add(gplane, x0, y0 + 1, go * (1.0 - fx) * fy);
                    add(gplane, x0 + 1, y0 + 1, go * fx * fy);
                }
                ggrid_b[p * 2] = dx * tx.scale;
                ggrid_b[p * 2 + 1] = dy * ty.scale;
            }
        });
    (gimg, ggrid)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_size(&self, size: usize, k: usize) -> usize {
        (size + 2 * self.pad - k) / self.stride + 1
    }
}

/// Output columns `ox` whose input column `ox*stride + kj - pad` is inside `0..w`.
fn valid_range(wo: usize, w: usize, kj: usize, geo: ConvGeometry) -> (usize, usize) {
    let lo = geo.pad.saturating_sub(kj).div_ceil(geo.stride);
    let hi = if w + geo.pad > kj { ((w + geo.pad - kj - 1) / geo.stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geo: ConvGeometry,
    cols: &mut [f64],
) {
    let ho = geo.out_size(h, kh);
    let wo = geo.out_size(w, kw);
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_range(wo, w, kj, geo);
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &x[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if geo.stride == 1 {
                        let start = lo + kj - geo.pad;
                        line[lo..hi].copy_from_slice(&srow[start..start + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            line[ox] = srow[ox * geo.stride + kj - geo.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geo: ConvGeometry,
    x: &mut [f64],
) {
    let ho = geo.out_size(h, kh);
    let wo = geo.out_size(w, kw);
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_range(wo, w, kj, geo);
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &mut x[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    let line = &src[oy * wo..(oy + 1) * wo];
                    if geo.stride == 1 {
                        let start = lo + kj - geo.pad;
                        for (d, v) in xrow[start..start + hi - lo].iter_mut().zip(&line[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            xrow[ox * geo.stride + kj - geo.pad] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Run `f` with a per-thread buffer of at least `len` elements. The contents
/// are unspecified; `f` must overwrite what it reads.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut buf = cell.take();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        let r = f(&mut buf[..len]);
        cell.replace(buf);
        r
    })
}

/// `c[m×n] (+)= a[m×k] · b[k×n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie inside the slices; the
    // callers construct them from the same dimensions used to size the buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major batched matrix product `[b,m,k] × [b,k,n] → [b,m,n]`.
pub fn batched_matmul(a: &[f64], b: &[f64], (batch, m, k, n): (usize, usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a[i * m * k..],
            (k as isize, 1),
            &b[i * k * n..],
            (n as isize, 1),
            0.0,
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    out
}

/// Gradients of [`batched_matmul`]: `(g·bᵀ, aᵀ·g)`.
pub fn batched_matmul_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    (batch, m, k, n): (usize, usize, usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; batch * m * k];
    let mut gb = vec![0.0; batch * k * n];
    for i in 0..batch {
        gemm(
            m,
            n,
            k,
            &g[i * m * n..],
            (n as isize, 1),
            &b[i * k * n..],
            (1, n as isize),
            0.0,
            &mut ga[i * m * k..(i + 1) * m * k],
        );
        gemm(
            k,
            m,
            n,
            &a[i * m * k..],
            (1, k as isize),
            &g[i * m * n..],
            (n as isize, 1),
            0.0,
            &mut gb[i * k * n..(i + 1) * k * n],
        );
    }
    (ga, gb)
}

/// 2-D cross-correlation. `x: [n,c,h,w]`, `weight: [o,c,kh,kw]`, `bias: [o]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geo: ConvGeometry) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let [o, wc, kh, kw] = weight.dims4()?;
    if wc != c {
        return Err(Error::shape(format!(
            "conv weight {:?} expects {} input channels, got {:?}",
            weight.shape(),
            wc,
            x.shape()
        )));
    }
    if h + 2 * geo.pad < kh || w + 2 * geo.pad < kw {
        return Err(Error::shape(format!("conv kernel {kh}x{kw} larger than padded input {h}x{w}")));
    }
    if let Some(b) = bias {
        if b.numel() != o {
            return Err(Error::shape(format!("conv bias has {} entries, expected {o}", b.numel())));
        }
    }
    let ho = geo.out_size(h, kh);
    let wo = geo.out_size(w, kw);
    let ckk = c * kh * kw;
    let mut out = vec![0.0; n * o * ho * wo];
    let xd = x.data();
    let wd = weight.data();
    out.par_chunks_mut(o * ho * wo).enumerate().for_each(|(b, out_b)| {
        with_scratch(ckk * ho * wo, |cols| {
            im2col(&xd[b * c * h * w..(b + 1) * c * h * w], (c, h, w), (kh, kw), geo, cols);
            let beta = match bias {
                Some(bias) => {
                    for (oc, &bv) in bias.data().iter().enumerate() {
                        out_b[oc * ho * wo..(oc + 1) * ho * wo].fill(bv);
                    }
                    1.0
                }
                None => 0.0,
            };
            gemm(o, ckk, ho * wo, wd, (ckk as isize, 1), cols, ((ho * wo) as isize, 1), beta, out_b);
        });
    });
    Ok(Tensor::from_parts(vec![n, o, ho, wo], out))
}

/// Gradients of [`conv2d`] as `(d_x, d_weight, d_bias)`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    geo: ConvGeometry,
    grad_out: &[f64],
    need_x: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.dims4().expect("checked in forward");
    let [o, _, kh, kw] = weight.dims4().expect("checked in forward");
    let ho = geo.out_size(h, kh);
    let wo = geo.out_size(w, kw);
    let ckk = c * kh * kw;
    let xd = x.data();
    let wd = weight.data();

    let per_sample: Vec<(Option<Vec<f64>>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let go = &grad_out[b * o * ho * wo..(b + 1) * o * ho * wo];
            with_scratch(ckk * ho * wo, |cols| {
                im2col(&xd[b * c * h * w..(b + 1) * c * h * w], (c, h, w), (kh, kw), geo, cols);
                let mut gw = vec![0.0; o * ckk];
                gemm(o, ho * wo, ckk, go, ((ho * wo) as isize, 1), cols, (1, (ho * wo) as isize), 0.0, &mut gw);
                let gx = need_x.then(|| {
                    gemm(ckk, o, ho * wo, wd, (1, ckk as isize), go, ((ho * wo) as isize, 1), 0.0, cols);
                    let mut gx = vec![0.0; c * h * w];
                    col2im(cols, (c, h, w), (kh, kw), geo, &mut gx);
                    gx
                });
                (gx, gw)
            })
        })
        .collect();

    let mut gw = vec![0.0; o * ckk];
    let mut gx = need_x.then(|| Vec::with_capacity(n * c * h * w));
    for (sx, sw) in per_sample {
        for (acc, v) in gw.iter_mut().zip(&sw) {
            *acc += v;
        }
        if let (Some(all), Some(sx)) = (gx.as_mut(), sx) {
            all.extend_from_slice(&sx);
        }
    }
    let mut gb = vec![0.0; o];
    for b in 0..n {
        for (oc, acc) in gb.iter_mut().enumerate() {
            let base = (b * o + oc) * ho * wo;
            *acc += grad_out[base..base + ho * wo].iter().sum::<f64>();
        }
    }
    (gx, gw, gb)
}

/// Non-overlapping `k×k` average pooling.
pub fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(format!("avg_pool({k}) on {h}x{w}")));
    }
    let (ho, wo) = (h / k, w / k);
    let xd = x.data();
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for dy in 0..k {
                    let row = &xd[(p * h + oy * k + dy) * w + ox * k..][..k];
                    s += row.iter().sum::<f64>();
                }
                out[(p * ho + oy) * wo + ox] = s * inv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

pub fn avg_pool_backward(in_shape: &[usize], k: usize, grad_out: &[f64]) -> Vec<f64> {
    let (nc, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut g = vec![0.0; nc * h * w];
    for p in 0..nc {
        for y in 0..h {
            for x in 0..w {
                g[(p * h + y) * w + x] = grad_out[(p * ho + y / k) * wo + x / k] * inv;
            }
        }
    }
    g
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, s: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let (ho, wo) = (h * s, w * s);
    let xd = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        for y in 0..ho {
            for xo in 0..wo {
                out[(p * ho + y) * wo + xo] = xd[(p * h + y / s) * w + xo / s];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

pub fn upsample_nearest_backward(in_shape: &[usize], s: usize, grad_out: &[f64]) -> Vec<f64> {
    let (nc, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h * s, w * s);
    let mut g = vec![0.0; nc * h * w];
    for p in 0..nc {
        for y in 0..ho {
            for x in 0..wo {
                g[(p * h + y / s) * w + x / s] += grad_out[(p * ho + y) * wo + x];
            }
        }
    }
    g
}

pub const PAD_INDEX: u32 = u32::MAX;

/// Stride-1 `(2r+1)²` minimum filter; out-of-frame taps read `pad_value`.
/// Returns the filtered tensor and, per output, the flat input index that
/// supplied the minimum (or [`PAD_INDEX`]).
pub fn min_filter(x: &Tensor, radius: usize, pad_value: f64) -> Result<(Tensor, Vec<u32>)> {
    let [n, c, h, w] = x.dims4()?;
    let xd = x.data();
    let r = radius as isize;
    let mut out = vec![0.0; xd.len()];
    let mut arg = vec![PAD_INDEX; xd.len()];
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut best = f64::INFINITY;
                let mut best_ix = PAD_INDEX;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sy, sx) = (y + dy, xx + dx);
                        let (v, ix) = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            (pad_value, PAD_INDEX)
                        } else {
                            let ix = base + sy as usize * w + sx as usize;
                            (xd[ix], ix as u32)
                        };
                        if v < best {
                            best = v;
                            best_ix = ix;
                        }
                    }
                }
                let o = base + y as usize * w + xx as usize;
                out[o] = best;
                arg[o] = best_ix;
            }
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), arg))
}
