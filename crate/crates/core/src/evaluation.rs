//! Image-quality metrics over edited / unedited regions and batch reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, LAYERS};
use crate::imaging::{load_mask, load_rgb, Mask, RgbImage};
use crate::kernels::min_filter;
use crate::tensor::Tensor;

/// Edited region and its complement.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSpec {
    pub roi: Mask,
    pub rou: Mask,
}

/// Default square dilation applied to the changed pixels.
pub const ROI_DILATION: usize = 3;

/// `roi` is the `(2d+1)×(2d+1)` dilation of `x_A XOR y_A`; `rou` is the rest.
pub fn derive_regions(x_a: &Mask, y_a: &Mask, dilation: usize) -> Result<RegionSpec> {
    if x_a.dims() != y_a.dims() {
        return Err(Error::shape(format!("mask sizes differ: {:?} vs {:?}", x_a.dims(), y_a.dims())));
    }
    let (h, w) = x_a.dims();
    // dilate(m) = 1 - erode(1 - m), with the outside counting as background.
    let not_xor = Tensor::from_fn(&[1, 1, h, w], |i| {
        let changed = (x_a.data()[i] >= 0.5) != (y_a.data()[i] >= 0.5);
        if changed { 0.0 } else { 1.0 }
    });
    let (eroded, _) = min_filter(&not_xor, dilation, 1.0)?;
    let rou = Mask::new(h, w, eroded.into_vec())?;
    Ok(RegionSpec { roi: rou.complement(), rou })
}

fn apply_region(img: &RgbImage, region: Option<&Mask>) -> Result<RgbImage> {
    match region {
        Some(m) => img.masked(m),
        None => Ok(img.clone()),
    }
}

fn check_pair(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("image sizes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `C×C` Gram matrix of a `[C, H, W]` activation, divided by `C·H·W`.
pub fn gram(f: &Tensor) -> Tensor {
    let (c, hw) = (f.shape()[0], f.numel() / f.shape()[0]);
    let norm = (c * hw) as f64;
    let d = f.data();
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let s: f64 = d[i * hw..(i + 1) * hw].iter().zip(&d[j * hw..(j + 1) * hw]).map(|(x, y)| x * y).sum();
            out[i * c + j] = s / norm;
            out[j * c + i] = s / norm;
        }
    }
    Tensor::new(vec![c, c], out).expect("square")
}

/// Mean over all feature layers of the squared Frobenius distance between
/// Gram matrices of the (region-masked) inputs.
pub fn style_loss(a: &RgbImage, b: &RgbImage, region: Option<&Mask>, phi: &FeatureExtractor) -> Result<f64> {
    check_pair(a, b)?;
    let fa = phi.forward(apply_region(a, region)?.tensor(), LAYERS.len() - 1)?;
    let fb = phi.forward(apply_region(b, region)?.tensor(), LAYERS.len() - 1)?;
    let mut acc = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (gx, gy) = (gram(x), gram(y));
        acc += gx.data().iter().zip(gy.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    Ok(acc / fa.len() as f64)
}

/// Mean squared error → decibels with unit peak, capped at 100.
pub const PSNR_CAP: f64 = 100.0;

pub fn psnr(a: &RgbImage, b: &RgbImage, region: Option<&Mask>) -> Result<f64> {
    check_pair(a, b)?;
    let (a, b) = (apply_region(a, region)?, apply_region(b, region)?);
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_SIGMA: f64 = 1.5;
const SSIM_RADIUS: usize = 5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - SSIM_RADIUS as f64;
        *v = (-0.5 * x * x / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Half-sample symmetric index: `d c b a | a b c d | d c b a`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

/// Separable Gaussian filter of one `h×w` plane.
fn blur(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps.iter().enumerate().map(|(t, k)| k * plane[y * w + reflect(x as isize + t as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps.iter().enumerate().map(|(t, k)| k * tmp[reflect(y as isize + t as isize - r, h) * w + x]).sum();
        }
    }
    out
}

/// Per-pixel luminance and contrast-structure maps of one channel.
fn ssim_maps(a: &[f64], b: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let taps = gaussian_taps();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let ux = blur(a, h, w, &taps);
    let uy = blur(b, h, w, &taps);
    let uxx = blur(&prod(|x, _| x * x), h, w, &taps);
    let uyy = blur(&prod(|_, y| y * y), h, w, &taps);
    let uxy = blur(&prod(|x, y| x * y), h, w, &taps);
    let mut lum = vec![0.0; h * w];
    let mut cs = vec![0.0; h * w];
    for i in 0..h * w {
        let vx = uxx[i] - ux[i] * ux[i];
        let vy = uyy[i] - uy[i] * uy[i];
        let vxy = uxy[i] - ux[i] * uy[i];
        lum[i] = (2.0 * ux[i] * uy[i] + c1) / (ux[i] * ux[i] + uy[i] * uy[i] + c1);
        cs[i] = (2.0 * vxy + c2) / (vx + vy + c2);
    }
    (lum, cs)
}

fn cropped_mean(map: &[f64], h: usize, w: usize) -> f64 {
    let r = SSIM_RADIUS;
    let mut acc = 0.0;
    for y in r..h - r {
        for x in r..w - r {
            acc += map[y * w + x];
        }
    }
    acc / ((h - 2 * r) * (w - 2 * r)) as f64
}

fn channel(img: &RgbImage, c: usize) -> &[f64] {
    let hw = img.height() * img.width();
    &img.data()[c * hw..(c + 1) * hw]
}

/// Single-scale SSIM: 11-tap Gaussian window (σ = 1.5), population
/// covariances, symmetric boundary, the filter radius cropped from the
/// border before averaging, then averaged over channels.
pub fn ssim(a: &RgbImage, b: &RgbImage, region: Option<&Mask>) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = a.dims();
    if h <= 2 * SSIM_RADIUS || w <= 2 * SSIM_RADIUS {
        return Err(Error::shape(format!("SSIM needs images larger than 11×11, got {h}×{w}")));
    }
    let (a, b) = (apply_region(a, region)?, apply_region(b, region)?);
    let mut acc = 0.0;
    for c in 0..3 {
        let (lum, cs) = ssim_maps(channel(&a, c), channel(&b, c), h, w);
        let s: Vec<f64> = lum.iter().zip(&cs).map(|(l, c)| l * c).collect();
        acc += cropped_mean(&s, h, w);
    }
    Ok(acc / 3.0)
}

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn halve(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; h2 * w2];
    for y in 0..h2 {
        for x in 0..w2 {
            let p = |dy: usize, dx: usize| plane[(2 * y + dy) * w + 2 * x + dx];
            out[y * w2 + x] = 0.25 * (p(0, 0) + p(0, 1) + p(1, 0) + p(1, 1));
        }
    }
    out
}

/// Five-scale SSIM with 2×2 average downsampling between scales. Needs at
/// least 176 pixels per side.
pub fn ms_ssim(a: &RgbImage, b: &RgbImage, region: Option<&Mask>) -> Result<f64> {
    check_pair(a, b)?;
    let (h0, w0) = a.dims();
    let min = (2 * SSIM_RADIUS + 1) << (MS_SSIM_WEIGHTS.len() - 1);
    if h0 < min || w0 < min {
        return Err(Error::shape(format!("multi-scale SSIM needs at least {min}×{min}, got {h0}×{w0}")));
    }
    let (a, b) = (apply_region(a, region)?, apply_region(b, region)?);
    let mut acc = 0.0;
    for c in 0..3 {
        let (mut pa, mut pb) = (channel(&a, c).to_vec(), channel(&b, c).to_vec());
        let (mut h, mut w) = (h0, w0);
        let mut value = 1.0;
        for (s, &weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (lum, cs) = ssim_maps(&pa, &pb, h, w);
            let term = if s + 1 == MS_SSIM_WEIGHTS.len() {
                let s_map: Vec<f64> = lum.iter().zip(&cs).map(|(l, c)| l * c).collect();
                cropped_mean(&s_map, h, w)
            } else {
                cropped_mean(&cs, h, w)
            };
            value *= term.max(0.0).powf(weight);
            pa = halve(&pa, h, w);
            pb = halve(&pb, h, w);
            h /= 2;
            w /= 2;
        }
        acc += value;
    }
    Ok(acc / 3.0)
}

/// A frozen perceptual distance.
pub trait PerceptualBackend: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64>;
}

/// Stand-in used when no perceptual network is configured: every call
/// reports the metric as unavailable.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoBackend;

impl PerceptualBackend for NoBackend {
    fn name(&self) -> &str {
        "none"
    }

    fn distance(&self, _: &RgbImage, _: &RgbImage) -> Result<f64> {
        Err(Error::Unavailable("no LPIPS backend configured".into()))
    }
}

/// LPIPS-style distance on the frozen feature backbone: per-layer channel
/// unit normalization, squared difference summed over channels, spatial mean,
/// summed over layers. Channel weights are uniform.
#[derive(Clone, Copy, Debug)]
pub struct FeatureLpips {
    pub phi: &'static FeatureExtractor,
}

impl Default for FeatureLpips {
    fn default() -> Self {
        Self { phi: FeatureExtractor::shared() }
    }
}

/// Channel-unit-normalizes a `[C, H, W]` activation.
pub fn unit_normalize_channels(f: &Tensor) -> Tensor {
    let (c, hw) = (f.shape()[0], f.numel() / f.shape()[0]);
    let mut out = f.clone();
    let d = out.data_mut();
    for p in 0..hw {
        let norm = (0..c).map(|i| d[i * hw + p] * d[i * hw + p]).sum::<f64>().sqrt();
        for i in 0..c {
            d[i * hw + p] /= norm + 1e-10;
        }
    }
    out
}

impl PerceptualBackend for FeatureLpips {
    fn name(&self) -> &str {
        "seeded-features"
    }

    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64> {
        check_pair(a, b)?;
        let fa = self.phi.forward(a.tensor(), LAYERS.len() - 1)?;
        let fb = self.phi.forward(b.tensor(), LAYERS.len() - 1)?;
        let mut total = 0.0;
        for (x, y) in fa.iter().zip(&fb) {
            let (x, y) = (unit_normalize_channels(x), unit_normalize_channels(y));
            let hw = x.numel() / x.shape()[0];
            total += x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / hw as f64;
        }
        Ok(total)
    }
}

pub fn lpips(a: &RgbImage, b: &RgbImage, region: Option<&Mask>, backend: &dyn PerceptualBackend) -> Result<f64> {
    check_pair(a, b)?;
    backend.distance(&apply_region(a, region)?, &apply_region(b, region)?)
}

/// Settings of the colour / texture relevance scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelevanceConfig {
    pub bins: usize,
    pub texture_layer: String,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        Self { bins: 32, texture_layer: "conv2".into() }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (false, false) => (dot / (na * nb)).clamp(-1.0, 1.0),
        _ => 0.0,
    }
}

/// Per-channel histograms with `bins` equal bins over `[0, 1]`, concatenated.
pub fn color_histogram(img: &RgbImage, region: Option<&Mask>, bins: usize) -> Vec<f64> {
    let hw = img.height() * img.width();
    let mut hist = vec![0.0; 3 * bins];
    for c in 0..3 {
        for p in 0..hw {
            if region.is_some_and(|m| m.data()[p] < 0.5) {
                continue;
            }
            let v = img.data()[c * hw + p];
            let bin = ((v * bins as f64) as usize).min(bins - 1);
            hist[c * bins + bin] += 1.0;
        }
    }
    hist
}

/// Per-channel mean and standard deviation of one feature layer, over the
/// region's footprint at that layer's resolution.
pub fn feature_statistics(img: &RgbImage, region: Option<&Mask>, layer: usize, phi: &FeatureExtractor) -> Result<Vec<f64>> {
    let f = phi.forward(img.tensor(), layer)?.pop().expect("at least one layer");
    let (c, fh, fw) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let footprint = region.map(|m| m.resize_nearest(fh, fw));
    let keep: Vec<usize> = (0..fh * fw).filter(|&p| footprint.as_ref().is_none_or(|m| m.data()[p] >= 0.5)).collect();
    let keep = if keep.is_empty() { (0..fh * fw).collect() } else { keep };
    let n = keep.len() as f64;
    let mut stats = Vec::with_capacity(2 * c);
    for ch in 0..c {
        let plane = &f.data()[ch * fh * fw..(ch + 1) * fh * fw];
        let mean = keep.iter().map(|&p| plane[p]).sum::<f64>() / n;
        let var = keep.iter().map(|&p| (plane[p] - mean).powi(2)).sum::<f64>() / n;
        stats.push(mean);
        stats.push(var.sqrt());
    }
    Ok(stats)
}

/// `(colour, texture)` cosine similarities between `a` inside `region_a`
/// and `b` inside `region_b`.
pub fn color_texture_relevance(
    a: &RgbImage,
    region_a: Option<&Mask>,
    b: &RgbImage,
    region_b: Option<&Mask>,
    cfg: &RelevanceConfig,
    phi: &FeatureExtractor,
) -> Result<(f64, f64)> {
    if cfg.bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let layer = FeatureExtractor::layer_index(&cfg.texture_layer)?;
    let color = cosine(&color_histogram(a, region_a, cfg.bins), &color_histogram(b, region_b, cfg.bins));
    let texture = cosine(&feature_statistics(a, region_a, layer, phi)?, &feature_statistics(b, region_b, layer, phi)?);
    Ok((color, texture))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    StyleRoi,
    StyleWhole,
    SsimRou,
    PsnrRou,
    LpipsRou,
    ColorRel,
    TextureRel,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::StyleRoi,
        Metric::StyleWhole,
        Metric::SsimRou,
        Metric::PsnrRou,
        Metric::LpipsRou,
        Metric::ColorRel,
        Metric::TextureRel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::StyleRoi => "style_roi",
            Metric::StyleWhole => "style_whole",
            Metric::SsimRou => "ssim_rou",
            Metric::PsnrRou => "psnr_rou",
            Metric::LpipsRou => "lpips_rou",
            Metric::ColorRel => "color_rel",
            Metric::TextureRel => "texture_rel",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

/// One line of an evaluation manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    #[serde(default)]
    pub id: Option<String>,
    pub output: PathBuf,
    pub exemplar: PathBuf,
    pub x_a: PathBuf,
    pub y_a: PathBuf,
    #[serde(default = "default_style")]
    pub style: String,
}

fn default_style() -> String {
    "default".into()
}

pub fn parse_eval_manifest(text: &str, base: &Path) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: EvalRecord = serde_json::from_str(line).map_err(|e| Error::Manifest { line: i + 1, reason: e.to_string() })?;
        for p in [&mut rec.output, &mut rec.exemplar, &mut rec.x_a, &mut rec.y_a] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if rec.id.is_none() {
            rec.id = Some(format!("{}", out.len()));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_eval_manifest(path: &Path) -> Result<Vec<EvalRecord>> {
    parse_eval_manifest(&std::fs::read_to_string(path)?, path.parent().unwrap_or(Path::new(".")))
}

/// An already-decoded evaluation item.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub style: String,
    pub output: RgbImage,
    pub exemplar: RgbImage,
    pub x_a: Mask,
    pub y_a: Mask,
}

impl EvalItem {
    pub fn load(rec: &EvalRecord) -> Result<Self> {
        let item = Self {
            id: rec.id.clone().unwrap_or_default(),
            style: rec.style.clone(),
            output: load_rgb(&rec.output)?,
            exemplar: load_rgb(&rec.exemplar)?,
            x_a: load_mask(&rec.x_a)?,
            y_a: load_mask(&rec.y_a)?,
        };
        let d = item.exemplar.dims();
        if item.output.dims() != d || item.x_a.dims() != d || item.y_a.dims() != d {
            return Err(Error::shape(format!("item `{}`: output, exemplar and masks must share one size", item.id)));
        }
        Ok(item)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    pub dilation: usize,
    pub relevance: RelevanceConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { metrics: Metric::ALL.to_vec(), dilation: ROI_DILATION, relevance: RelevanceConfig::default() }
    }
}

/// Metric values keyed by name. A missing key means "not requested"; a
/// `None` value means the metric was requested but is unavailable.
pub type Scores = BTreeMap<String, Option<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub id: String,
    pub style: String,
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub style: String,
    pub count: usize,
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: Vec<Metric>,
    pub lpips_backend: String,
    pub items: Vec<ItemReport>,
    /// One entry per style, in sorted order, followed by `All`.
    pub groups: Vec<GroupReport>,
}

pub const ALL_GROUP: &str = "All";

pub fn evaluate_item(item: &EvalItem, cfg: &EvalConfig, backend: &dyn PerceptualBackend, phi: &FeatureExtractor) -> Result<ItemReport> {
    let regions = derive_regions(&item.x_a, &item.y_a, cfg.dilation)?;
    let (out, ex) = (&item.output, &item.exemplar);
    let mut scores = Scores::new();
    let mut relevance = None;
    for &m in &cfg.metrics {
        let v = match m {
            Metric::StyleRoi => Some(style_loss(out, ex, Some(&regions.roi), phi)?),
            Metric::StyleWhole => Some(style_loss(out, ex, None, phi)?),
            Metric::SsimRou => Some(ssim(out, ex, Some(&regions.rou))?),
            Metric::PsnrRou => Some(psnr(out, ex, Some(&regions.rou))?),
            Metric::LpipsRou => match lpips(out, ex, Some(&regions.rou), backend) {
                Ok(v) => Some(v),
                Err(Error::Unavailable(_)) => None,
                Err(e) => return Err(e),
            },
            Metric::ColorRel | Metric::TextureRel => {
                if relevance.is_none() {
                    relevance = Some(color_texture_relevance(out, Some(&item.x_a), ex, Some(&item.y_a), &cfg.relevance, phi)?);
                }
                let (c, t) = relevance.expect("set above");
                Some(if m == Metric::ColorRel { c } else { t })
            }
        };
        scores.insert(m.name().to_string(), v);
    }
    Ok(ItemReport { id: item.id.clone(), style: item.style.clone(), scores })
}

fn aggregate(style: &str, items: &[&ItemReport], metrics: &[Metric]) -> GroupReport {
    let mut scores = Scores::new();
    for m in metrics {
        let vals: Option<Vec<f64>> = items.iter().map(|it| it.scores.get(m.name()).copied().flatten()).collect();
        scores.insert(m.name().to_string(), vals.map(|v| v.iter().sum::<f64>() / v.len() as f64));
    }
    GroupReport { style: style.to_string(), count: items.len(), scores }
}

/// Score every item in parallel and aggregate per style and overall.
pub fn run_report(items: &[EvalItem], cfg: &EvalConfig, backend: &dyn PerceptualBackend) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let phi = FeatureExtractor::shared();
    let reports: Vec<ItemReport> = items.par_iter().map(|it| evaluate_item(it, cfg, backend, phi)).collect::<Result<_>>()?;
    let mut by_style: BTreeMap<&str, Vec<&ItemReport>> = BTreeMap::new();
    for r in &reports {
        by_style.entry(r.style.as_str()).or_default().push(r);
    }
    let mut groups: Vec<GroupReport> = by_style.iter().map(|(s, v)| aggregate(s, v, &cfg.metrics)).collect();
    groups.push(aggregate(ALL_GROUP, &reports.iter().collect::<Vec<_>>(), &cfg.metrics));
    Ok(MetricReport { metrics: cfg.metrics.clone(), lpips_backend: backend.name().to_string(), items: reports, groups })
}

pub fn run_report_from_manifest(path: &Path, cfg: &EvalConfig, backend: &dyn PerceptualBackend) -> Result<MetricReport> {
    let recs = read_eval_manifest(path)?;
    let items: Vec<EvalItem> = recs.iter().map(EvalItem::load).collect::<Result<_>>()?;
    run_report(&items, cfg, backend)
}

impl MetricReport {
    /// Items first, then one `mean` row per group. Unavailable values are
    /// written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,id,style,count");
        for m in &self.metrics {
            s.push(',');
            s.push_str(m.name());
        }
        s.push('\n');
        let cell = |v: Option<&Option<f64>>| match v {
            Some(Some(x)) => format!("{x}"),
            _ => "NA".to_string(),
        };
        for it in &self.items {
            s.push_str(&format!("item,{},{},1", it.id, it.style));
            for m in &self.metrics {
                s.push(',');
                s.push_str(&cell(it.scores.get(m.name())));
            }
            s.push('\n');
        }
        for g in &self.groups {
            s.push_str(&format!("mean,,{},{}", g.style, g.count));
            for m in &self.metrics {
                s.push(',');
                s.push_str(&cell(g.scores.get(m.name())));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes CSV or JSON depending on the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => self.to_csv(),
            Some("json") => self.to_json()?,
            other => return Err(Error::Config(format!("report extension must be csv or json, got {other:?}"))),
        };
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn group(&self, style: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.style == style)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(img: &RgbImage, sigma: f64, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(img.tensor().shape(), |i| img.data()[i] + sigma * (rng.random::<f64>() - 0.5));
        RgbImage::from_tensor_clamped(t).unwrap()
    }

    #[test]
    fn regions_match_set_dilation() {
        let x = Mask::from_fn(20, 20, |r, c| (5..12).contains(&r) && (5..12).contains(&c));
        let y = Mask::from_fn(20, 20, |r, c| (7..14).contains(&r) && (5..12).contains(&c));
        let reg = derive_regions(&x, &y, 3).unwrap();
        for r in 0..20isize {
            for c in 0..20isize {
                let mut hit = false;
                for dr in -3..=3 {
                    for dc in -3..=3 {
                        let (rr, cc) = (r + dr, c + dc);
                        if (0..20).contains(&rr) && (0..20).contains(&cc) {
                            let (rr, cc) = (rr as usize, cc as usize);
                            hit |= (x.at(rr, cc) > 0.5) != (y.at(rr, cc) > 0.5);
                        }
                    }
                }
                assert_eq!(reg.roi.at(r as usize, c as usize) > 0.5, hit, "({r},{c})");
            }
        }
        let same = derive_regions(&x, &x, 3).unwrap();
        assert!(same.roi.is_empty());
        let full = derive_regions(&x, &x.complement(), 0).unwrap();
        assert!(full.rou.is_empty());
    }

    #[test]
    fn identical_inputs_hit_the_fixed_points() {
        let s = synthetic_sample(32, 4).image;
        assert_eq!(ssim(&s, &s, None).unwrap(), 1.0);
        assert_eq!(psnr(&s, &s, None).unwrap(), PSNR_CAP);
        assert_eq!(FeatureLpips::default().distance(&s, &s).unwrap(), 0.0);
        assert_eq!(style_loss(&s, &s, None, FeatureExtractor::shared()).unwrap(), 0.0);
        let (c, t) = color_texture_relevance(&s, None, &s, None, &RelevanceConfig::default(), FeatureExtractor::shared()).unwrap();
        assert!((c - 1.0).abs() < 1e-12 && (t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_of_constant_offset() {
        let a = RgbImage::filled(16, 16, [0.2, 0.4, 0.6]);
        let b = RgbImage::filled(16, 16, [0.3, 0.5, 0.7]);
        assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn full_region_equals_unmasked() {
        let a = synthetic_sample(24, 1).image;
        let b = synthetic_sample(24, 2).image;
        let full = Mask::ones(24, 24);
        let phi = FeatureExtractor::shared();
        assert_eq!(ssim(&a, &b, Some(&full)).unwrap(), ssim(&a, &b, None).unwrap());
        assert_eq!(psnr(&a, &b, Some(&full)).unwrap(), psnr(&a, &b, None).unwrap());
        assert_eq!(style_loss(&a, &b, Some(&full), phi).unwrap(), style_loss(&a, &b, None, phi).unwrap());
        let be = FeatureLpips::default();
        assert_eq!(lpips(&a, &b, Some(&full), &be).unwrap(), lpips(&a, &b, None, &be).unwrap());
    }

    #[test]
    fn style_loss_is_symmetric_and_ignores_layout() {
        let phi = FeatureExtractor::shared();
        let a = synthetic_sample(32, 3).image;
        let b = synthetic_sample(32, 8).image;
        let ab = style_loss(&a, &b, None, phi).unwrap();
        assert!((ab - style_loss(&b, &a, None, phi).unwrap()).abs() < 1e-9);

        // Noise texture vs the same texture with its quadrants swapped.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tex = RgbImage::from_tensor(Tensor::from_fn(&[3, 64, 64], |i| {
            let base = [0.7, 0.3, 0.5][i / 4096];
            (base + 0.25 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0)
        }))
        .unwrap();
        let swapped = RgbImage::from_tensor(Tensor::from_fn(&[3, 64, 64], |i| {
            let (c, r, x) = (i / 4096, (i / 64) % 64, i % 64);
            tex.at(c, (r + 32) % 64, (x + 32) % 64)
        }))
        .unwrap();
        let other = RgbImage::from_tensor(tex.tensor().map(|v| 1.0 - v)).unwrap();
        let perm = style_loss(&tex, &swapped, None, phi).unwrap();
        let unrelated = style_loss(&tex, &other, None, phi).unwrap();
        assert!(perm < 0.01 * unrelated, "{perm} vs {unrelated}");
    }

    #[test]
    fn quality_falls_with_noise() {
        let clean = synthetic_sample(32, 6).image;
        let mut last = (f64::INFINITY, f64::INFINITY);
        for (i, sigma) in [0.02, 0.05, 0.1, 0.2, 0.4].into_iter().enumerate() {
            let n = noisy(&clean, sigma, i as u64);
            let cur = (ssim(&clean, &n, None).unwrap(), psnr(&clean, &n, None).unwrap());
            assert!(cur.0 < last.0 && cur.1 < last.1, "sigma {sigma}: {cur:?} vs {last:?}");
            last = cur;
        }
    }

    #[test]
    fn channel_permutation_lowers_colour_relevance() {
        let a = synthetic_sample(32, 9).image;
        let perm = RgbImage::from_tensor(Tensor::from_fn(&[3, 32, 32], |i| {
            let (c, p) = (i / 1024, i % 1024);
            a.data()[((c + 1) % 3) * 1024 + p]
        }))
        .unwrap();
        let (c, _) = color_texture_relevance(&a, None, &perm, None, &RelevanceConfig::default(), FeatureExtractor::shared()).unwrap();
        assert!(c < 1.0);
    }

    #[test]
    fn absent_backend_is_unavailable() {
        let a = synthetic_sample(16, 1).image;
        assert!(matches!(lpips(&a, &a, None, &NoBackend), Err(Error::Unavailable(_))));
    }

    fn item(seed: u64, style: &str) -> EvalItem {
        let s = synthetic_sample(32, seed);
        let t = synthetic_sample(32, seed + 50);
        EvalItem { id: seed.to_string(), style: style.into(), output: t.image, exemplar: s.image, x_a: t.mask, y_a: s.mask }
    }

    #[test]
    fn report_aggregates_are_means() {
        let items: Vec<EvalItem> = (0..6).map(|i| item(i, ["Ab", "Cu", "In"][i as usize % 3])).collect();
        let report = run_report(&items, &EvalConfig::default(), &NoBackend).unwrap();
        assert_eq!(report.groups.len(), 4);
        let all = report.group(ALL_GROUP).unwrap();
        assert_eq!(all.count, 6);
        assert_eq!(all.scores["lpips_rou"], None);
        for m in ["style_roi", "ssim_rou", "psnr_rou", "texture_rel"] {
            let mean = report.items.iter().map(|i| i.scores[m].unwrap()).sum::<f64>() / 6.0;
            assert!((all.scores[m].unwrap() - mean).abs() < 1e-9);
            let cu: Vec<f64> = report.items.iter().filter(|i| i.style == "Cu").map(|i| i.scores[m].unwrap()).collect();
            assert!((report.group("Cu").unwrap().scores[m].unwrap() - cu.iter().sum::<f64>() / 2.0).abs() < 1e-9);
        }
        let single = run_report(&items[..1], &EvalConfig::default(), &FeatureLpips::default()).unwrap();
        assert_eq!(single.items[0].scores, single.group(ALL_GROUP).unwrap().scores);
        assert!(matches!(run_report(&[], &EvalConfig::default(), &NoBackend), Err(Error::EmptyDataset)));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + 6 + 4);
        assert!(csv.lines().nth(1).unwrap().ends_with(",NA") || csv.contains(",NA,"));
    }
}
