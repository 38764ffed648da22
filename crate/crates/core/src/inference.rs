//! Frozen-model inference, mask post-processing and sequential editing
//! sessions.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, SEGMENTS};
use crate::config::DriverInput;
use crate::correspondence::CorrespondenceOutput;
use crate::error::{Error, Result};
use crate::geometry::WarpField;
use crate::imaging::{Mask, RgbImage};
use crate::pipeline::{Pipeline, Trainable};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

/// What `/healthz` and `--info` report about a loaded checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub keypoints: usize,
    pub resolution: usize,
    pub internal_resolution: usize,
    pub driver_input: DriverInput,
    pub step: u64,
    pub parameters: usize,
}

/// A checkpoint loaded for inference. Weights are never mutated.
#[derive(Clone, Debug)]
pub struct Model {
    pipeline: Pipeline,
    config: TrainConfig,
    step: u64,
}

pub fn load_model(path: &Path) -> Result<Model> {
    Model::from_checkpoint(Checkpoint::load(path)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipulateOptions {
    pub diagnostics: bool,
    /// Reserved for a diffusion refinement pass; always rejected.
    pub diffusion_refine: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointPair {
    /// Normalized `(x, y)` in the conditional mask.
    pub source: [f64; 2],
    /// Normalized `(x, y)` in the exemplar.
    pub driver: [f64; 2],
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub keypoints: Vec<KeypointPair>,
    /// `K+1` transport attention maps, background first.
    pub attention: Vec<Mask>,
    /// Fused warp field of the guidance branch.
    pub omega_s: WarpField,
}

#[derive(Clone, Debug)]
pub struct ManipulationResult {
    pub output: RgbImage,
    /// Transported mask `x̂_A`.
    pub mask: Mask,
    pub diagnostics: Option<Diagnostics>,
    pub warnings: Vec<String>,
}

impl Model {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config = ckpt.config;
        config.validate()?;
        let mut pipeline = Pipeline::from_segments(
            &config.model,
            ckpt.segments.get(SEGMENTS[0]).cloned().unwrap_or_default(),
            ckpt.segments.get(SEGMENTS[1]).cloned().unwrap_or_default(),
            ckpt.segments.get(SEGMENTS[2]).cloned().unwrap_or_default(),
        )?;
        pipeline.attention_resolution = Some(config.resolution);
        Ok(Self { pipeline, config, step: ckpt.step })
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn info(&self) -> ModelInfo {
        let p = &self.pipeline;
        ModelInfo {
            keypoints: self.config.model.keypoints,
            resolution: self.config.resolution,
            internal_resolution: self.config.model.internal_resolution,
            driver_input: self.config.model.driver_input,
            step: self.step,
            parameters: p.correspondence.params().num_scalars()
                + p.transport.params().num_scalars()
                + p.guidance.params().num_scalars(),
        }
    }

    /// Transport the exemplar `(y_A, y_B)` onto the conditional mask `x_A`
    /// at the exemplar's resolution.
    pub fn manipulate(&self, y_b: &RgbImage, y_a: &Mask, x_a: &Mask, opts: ManipulateOptions) -> Result<ManipulationResult> {
        if opts.diffusion_refine {
            return Err(Error::NotSupported("diffusion refinement".into()));
        }
        let mut warnings = Vec::new();
        let y_a = conform_mask(y_a, y_b, "exemplar mask", &mut warnings)?;
        let x_a = conform_mask(x_a, y_b, "edited mask", &mut warnings)?;
        let (h, w) = y_b.dims();
        let g = Graph::new();
        let b = self.pipeline.bind(&g, Trainable::NONE);
        let xa = g.constant(x_a.tensor().reshape(&[1, 1, h, w])?);
        let ya = g.constant(y_a.tensor().reshape(&[1, 1, h, w])?);
        let yb = g.constant(y_b.tensor().reshape(&[1, 3, h, w])?);
        let fwd = self.pipeline.forward_var(&b, &xa, &ya, &yb)?;
        let output = RgbImage::from_tensor_clamped(fwd.x_hat_b.value().reshape(&[3, h, w])?)?;
        let mask = Mask::from_tensor(fwd.x_hat_a.value().reshape(&[1, h, w])?.map(|v| v.clamp(0.0, 1.0)))?;
        let diagnostics = if opts.diagnostics {
            let corr = CorrespondenceOutput::from_vars(&fwd.corr, 0)?;
            let keypoints = (0..self.config.model.keypoints)
                .map(|k| KeypointPair {
                    source: corr.source.positions[k],
                    driver: corr.driver.positions[k],
                    degenerate: corr.degenerate[k],
                })
                .collect();
            let attn = fwd.attn.value();
            let hw = h * w;
            let attention = (0..attn.shape()[1])
                .map(|c| Mask::new(h, w, attn.data()[c * hw..(c + 1) * hw].to_vec()))
                .collect::<Result<_>>()?;
            let pseudo = self.pipeline.guidance_var(&b, &fwd, &ya, &yb)?;
            let omega_s = WarpField::from_tensor(pseudo.omega_s.value().reshape(&[h, w, 2])?)?;
            Some(Diagnostics { keypoints, attention, omega_s })
        } else {
            None
        };
        for w in &warnings {
            tracing::warn!(target: "transmask::inference", "{w}");
        }
        Ok(ManipulationResult { output, mask, diagnostics, warnings })
    }
}

fn conform_mask(mask: &Mask, image: &RgbImage, what: &str, warnings: &mut Vec<String>) -> Result<Mask> {
    let (h, w) = image.dims();
    let mut m = mask.clone();
    if m.dims() != (h, w) {
        let (mh, mw) = m.dims();
        let skew = (mh as f64 / mw as f64) / (h as f64 / w as f64);
        if (skew - 1.0).abs() > 0.01 {
            return Err(Error::shape(format!("{what} is {mh}×{mw} but the exemplar is {h}×{w}")));
        }
        warnings.push(format!("{what} resized from {mh}×{mw} to {h}×{w}"));
        m = m.resize_nearest(h, w);
    }
    if !m.is_binary() {
        warnings.push(format!("{what} is not binary; thresholded at 0.5"));
        m = m.threshold(0.5);
    }
    if m.is_empty() {
        warnings.push(format!("{what} is empty"));
    }
    Ok(m)
}

/// Point or box hint forwarded to an external segmenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Prompt {
    Point { x: f64, y: f64, #[serde(default = "positive")] positive: bool },
    Box { x0: f64, y0: f64, x1: f64, y1: f64 },
}

fn positive() -> bool {
    true
}

/// Reduce a raw segmentation to a single connected binary region at the
/// image's resolution. Returns the mask and any warnings.
pub fn finalize_mask(raw: &Mask, image_dims: (usize, usize)) -> Result<(Mask, Vec<String>)> {
    let mut warnings = Vec::new();
    let (h, w) = image_dims;
    let mut m = raw.threshold(0.5);
    if m.dims() != image_dims {
        m = m.resize_nearest(h, w);
    }
    if m.is_empty() {
        warnings.push("segmentation is empty; draw or upload a mask".to_string());
        return Ok((m, warnings));
    }
    let kept = largest_component(&m);
    if kept.area() < m.area() {
        warnings.push(format!("kept the largest of several regions ({} of {} pixels)", kept.area(), m.area()));
    }
    Ok((kept, warnings))
}

/// File backend of mask extraction: decode a single-channel PNG and
/// finalize it against the image size.
pub fn extract_mask_file(path: &Path, image_dims: (usize, usize)) -> Result<(Mask, Vec<String>)> {
    let raw = crate::imaging::load_mask(path)?;
    let (mask, warnings) = finalize_mask(&raw, image_dims)?;
    for w in &warnings {
        tracing::warn!(target: "transmask::inference", "{w}");
    }
    Ok((mask, warnings))
}

/// Largest 4-connected foreground component. Ties keep the one found first
/// in raster order.
pub fn largest_component(m: &Mask) -> Mask {
    let (h, w) = m.dims();
    let mut label = vec![0u32; h * w];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if m.data()[start] < 0.5 || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if m.data()[q] >= 0.5 && label[q] == 0 {
                    label[q] = next;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    Mask::new(h, w, label.iter().map(|&l| if l == best.1 && l != 0 { 1.0 } else { 0.0 }).collect()).expect("same size")
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    /// Exemplar mask the step ran with.
    pub y_a: Mask,
    /// Conditional mask of the step.
    pub x_a: Mask,
    pub output: RgbImage,
    pub transported_mask: Mask,
    pub timestamp_ms: u64,
}

/// A sequential editing session: each step's output and conditional mask
/// become the exemplar pair of the next step.
#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    exemplar: RgbImage,
    mask: Mask,
    mask_override: Option<Mask>,
    history: Vec<HistoryEntry>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl Session {
    pub fn new(id: impl Into<String>, exemplar: RgbImage, mask: Mask) -> Result<Self> {
        if exemplar.dims() != mask.dims() {
            return Err(Error::shape(format!("mask {:?} does not match exemplar {:?}", mask.dims(), exemplar.dims())));
        }
        Ok(Self { id: id.into(), exemplar, mask: mask.threshold(0.5), mask_override: None, history: Vec::new() })
    }

    pub fn initial_exemplar(&self) -> &RgbImage {
        &self.exemplar
    }

    pub fn initial_mask(&self) -> &Mask {
        &self.mask
    }

    /// Image the next step starts from.
    pub fn current_exemplar(&self) -> &RgbImage {
        self.history.last().map_or(&self.exemplar, |e| &e.output)
    }

    /// Exemplar mask the next step starts from.
    pub fn current_mask(&self) -> &Mask {
        if let Some(m) = &self.mask_override {
            return m;
        }
        self.history.last().map_or(&self.mask, |e| &e.x_a)
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    /// Replace the exemplar mask of the next step.
    pub fn set_mask(&mut self, mask: Mask) -> Result<()> {
        if mask.dims() != self.exemplar.dims() {
            return Err(Error::shape(format!("mask {:?} does not match exemplar {:?}", mask.dims(), self.exemplar.dims())));
        }
        self.mask_override = Some(mask.threshold(0.5));
        Ok(())
    }

    pub fn manipulate(&mut self, model: &Model, x_a: &Mask, opts: ManipulateOptions) -> Result<ManipulationResult> {
        let y_a = self.current_mask().clone();
        let result = model.manipulate(self.current_exemplar(), &y_a, x_a, opts)?;
        let x_a = conform_mask(x_a, &self.exemplar, "edited mask", &mut Vec::new())?;
        self.history.push(HistoryEntry {
            y_a,
            x_a,
            output: result.output.clone(),
            transported_mask: result.mask.clone(),
            timestamp_ms: now_ms(),
        });
        self.mask_override = None;
        Ok(result)
    }

    /// Drop the last step. Returns `false` when there is nothing to undo.
    pub fn undo(&mut self) -> bool {
        self.mask_override = None;
        self.history.pop().is_some()
    }

    /// Recompute every recorded step from the initial exemplar and return
    /// the final image.
    pub fn replay(&self, model: &Model) -> Result<RgbImage> {
        let mut image = self.exemplar.clone();
        for e in &self.history {
            image = model.manipulate(&image, &e.y_a, &e.x_a, ManipulateOptions::default())?.output;
        }
        Ok(image)
    }
}

/// Flow preview: displacement from the identity mapped to red/green around
/// mid-grey, scaled so a full-frame shift saturates.
pub fn warp_preview(field: &WarpField) -> Result<RgbImage> {
    let (h, w) = (field.height(), field.width());
    let id = WarpField::identity(h, w)?;
    let t = Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let (r, col) = (p / w, p % w);
        match c {
            0 | 1 => 0.5 + 0.25 * (field.at(r, col)[c] - id.at(r, col)[c]),
            _ => 0.5,
        }
    });
    RgbImage::from_tensor_clamped(t)
}
