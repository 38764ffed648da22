//! Training configuration, the per-step objective and the optimization loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, RngState, SEGMENTS};
use crate::config::{DriverInput, ModelConfig};
use crate::correspondence::KeypointVars;
use crate::data::{mix, synthesize_pair, Dataset};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::geometry::{random_tps, TpsConfig, TpsTransform};
use crate::imaging::{save_rgb, RgbImage};
use crate::losses::{
    boundary_iou_loss_var, contextual_loss_var, default_dilation, deform_batch, equivariance_loss_var, l1_var,
    perceptual_loss_var, ContextualConfig, LossBreakdown, LossTerms, LossWeights,
};
use crate::optim::{Adam, AdamConfig};
use crate::pipeline::{ForwardVars, GuidanceVars, Pipeline, Trainable};
use crate::tensor::Tensor;

/// How the three segments share optimizer steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Every step updates all segments from one objective.
    #[default]
    Joint,
    /// Step `s` updates only segment `s mod 3`.
    RoundRobin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    /// Square side length images are resized to.
    pub resolution: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Deformation used to synthesize the conditional mask.
    pub pair_tps: TpsConfig,
    /// Deformation used by the equivariance term.
    pub equivariance_tps: TpsConfig,
    pub contextual: ContextualConfig,
    /// Boundary band width in pixels; 0 picks 2% of the image diagonal.
    pub boundary_dilation: usize,
    pub schedule: Schedule,
    /// Stop the cycle term's gradient at the pseudo ground truth.
    pub detach_cycle: bool,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Write an image grid every this many steps (0 = never).
    pub validate_every: u64,
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            resolution: 256,
            batch_size: 4,
            steps: 100_000,
            seed: 0,
            weights: LossWeights::default(),
            pair_tps: TpsConfig::default(),
            equivariance_tps: TpsConfig::default(),
            contextual: ContextualConfig::default(),
            boundary_dilation: 0,
            schedule: Schedule::Joint,
            detach_cycle: false,
            checkpoint_every: 5_000,
            validate_every: 0,
            manifest: None,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    /// 64×64, K = 4 settings for CPU runs.
    pub fn desk() -> Self {
        const DESK_TPS: TpsConfig = TpsConfig { grid_size: 3, sigma: 0.1, affine_sigma: 0.05 };
        Self {
            model: ModelConfig::desk(),
            resolution: 64,
            batch_size: 2,
            steps: 2_000,
            checkpoint_every: 500,
            // A 5x5 control grid is too wiggly at 64 px for affine local warps,
            // both for the training pairs and the equivariance targets.
            pair_tps: DESK_TPS,
            equivariance_tps: DESK_TPS,
            optimizer: AdamConfig { lr: 5e-4, ..AdamConfig::default() },
            contextual: ContextualConfig { max_points: 256, ..ContextualConfig::default() },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let cfg: Self = serde_json::from_str(&text)?;
                cfg.validate()?;
                Ok(cfg)
            }
            _ => Self::from_toml(&text),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.weights.validate()?;
        if self.resolution < 2 || self.batch_size == 0 {
            return Err(Error::Config("resolution must be at least 2 and batch_size at least 1".into()));
        }
        let g = 1usize << self.model.attention_net.blocks;
        if self.resolution % g != 0 {
            return Err(Error::Config(format!("resolution {} must be a multiple of {g}", self.resolution)));
        }
        Ok(())
    }

    pub fn dilation(&self) -> usize {
        if self.boundary_dilation == 0 {
            default_dilation(self.resolution, self.resolution)
        } else {
            self.boundary_dilation
        }
    }
}

/// One step's inputs, stacked along the batch axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[n, 1, H, W]`
    pub x_a: Tensor,
    pub y_a: Tensor,
    /// `[n, 3, H, W]`
    pub y_b: Tensor,
    pub equivariance: Vec<TpsTransform>,
    /// Samples whose mask was empty (and so was not deformed).
    pub empty_masks: usize,
}

const TAG_ORDER: u64 = 1;
const TAG_PAIR: u64 = 2;
const TAG_EQ: u64 = 3;

/// Deterministic batch for `step`: indices walk a per-epoch permutation, and
/// every random draw is seeded from `(seed, step, slot)`.
pub fn make_batch(cfg: &TrainConfig, ds: &Dataset, step: u64) -> Result<Batch> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = ds.len() as u64;
    let b = cfg.batch_size as u64;
    let mut perms: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut indices = Vec::with_capacity(cfg.batch_size);
    for j in 0..b {
        let pos = step * b + j;
        let epoch = pos / n;
        let perm = perms.entry(epoch).or_insert_with(|| {
            let mut p: Vec<usize> = (0..ds.len()).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, TAG_ORDER, epoch, 0)));
            p
        });
        indices.push(perm[(pos % n) as usize]);
    }
    let r = ds.resolution;
    let (mut xa, mut ya, mut yb) = (Vec::new(), Vec::new(), Vec::new());
    let mut equivariance = Vec::with_capacity(indices.len());
    let mut empty_masks = 0;
    for (j, &i) in indices.iter().enumerate() {
        let s = &ds.samples[i];
        let (x, empty) = synthesize_pair(&s.mask, &cfg.pair_tps, mix(cfg.seed, TAG_PAIR, step, j as u64))?;
        empty_masks += empty as usize;
        xa.extend_from_slice(x.data());
        ya.extend_from_slice(s.mask.data());
        yb.extend_from_slice(s.image.data());
        equivariance.push(random_tps(&cfg.equivariance_tps, mix(cfg.seed, TAG_EQ, step, j as u64))?.solve()?);
    }
    let n = indices.len();
    Ok(Batch {
        indices,
        x_a: Tensor::new(vec![n, 1, r, r], xa)?,
        y_a: Tensor::new(vec![n, 1, r, r], ya)?,
        y_b: Tensor::new(vec![n, 3, r, r], yb)?,
        equivariance,
        empty_masks,
    })
}

/// Everything built on the graph for one step.
pub struct StepGraph {
    pub graph: Graph,
    pub total: Var,
    pub terms: LossTerms<Var>,
    pub forward: ForwardVars,
    pub guidance: GuidanceVars,
    pub cycle: Var,
}

fn concat_keypoints(a: &KeypointVars, b: &KeypointVars) -> Result<KeypointVars> {
    Ok(KeypointVars {
        positions: Var::concat(&[a.positions.clone(), b.positions.clone()], 0)?,
        jacobians: Var::concat(&[a.jacobians.clone(), b.jacobians.clone()], 0)?,
        heatmaps: Var::concat(&[a.heatmaps.clone(), b.heatmaps.clone()], 0)?,
    })
}

/// Build the full objective for `batch`.
pub fn build_objective(
    pipeline: &Pipeline,
    cfg: &TrainConfig,
    batch: &Batch,
    trainable: Trainable,
    phi: &FeatureExtractor,
) -> Result<StepGraph> {
    let g = Graph::new();
    let b = pipeline.bind(&g, trainable);
    let x_a = g.constant(batch.x_a.clone());
    let y_a = g.constant(batch.y_a.clone());
    let y_b = g.constant(batch.y_b.clone());
    let fwd = pipeline.forward_var(&b, &x_a, &y_a, &y_b)?;
    let pseudo = pipeline.guidance_var(&b, &fwd, &y_a, &y_b)?;
    let cycle = pipeline.cycle_var(&b, &y_a, &pseudo, cfg.detach_cycle)?;

    let [n, _, h, w] = batch.y_b.dims4()?;
    let src_in = batch.x_a.reshape(&[n, 1, h, w])?;
    let src_in = Tensor::from_fn(&[n, 3, h, w], |i| src_in.data()[(i / (3 * h * w)) * h * w + i % (h * w)]);
    let drv_in = match pipeline.config.driver_input {
        DriverInput::MaskedExemplar => Tensor::from_fn(&[n, 3, h, w], |i| {
            batch.y_b.data()[i] * batch.y_a.data()[(i / (3 * h * w)) * h * w + i % (h * w)]
        }),
        DriverInput::Mask => Tensor::from_fn(&[n, 3, h, w], |i| batch.y_a.data()[(i / (3 * h * w)) * h * w + i % (h * w)]),
    };
    let transforms: Vec<TpsTransform> = batch.equivariance.iter().chain(&batch.equivariance).cloned().collect();
    let deformed = deform_batch(&Tensor::cat0(&[src_in, drv_in])?, &transforms)?;
    let kp_deformed = pipeline.correspondence.keypoints_var(&b.correspondence, &g.constant(deformed))?;
    let kp_orig = concat_keypoints(&fwd.corr.source, &fwd.corr.driver)?;

    let terms = LossTerms {
        eq: equivariance_loss_var(&kp_orig, &kp_deformed, &transforms)?,
        perc: perceptual_loss_var(&fwd.x_hat_b, &pseudo.x_b_p, phi)?,
        context: contextual_loss_var(&fwd.x_hat_b, &pseudo.x_b_p, &cfg.contextual, phi)?,
        bound: boundary_iou_loss_var(&fwd.corr.warped_masks, &x_a, cfg.dilation())?,
        mask_i: l1_var(&fwd.x_hat_a, &x_a)?,
        mask_t: l1_var(&pseudo.x_a_p, &x_a)?,
        rec: l1_var(&fwd.x_hat_b, &pseudo.x_b_p)?,
        cyc: l1_var(&cycle, &y_b)?,
    };
    let total = terms.total(&cfg.weights)?;
    Ok(StepGraph { graph: g, total, terms, forward: fwd, guidance: pseudo, cycle })
}

/// What one optimization step reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    pub terms: LossBreakdown,
    /// IoU of the hard-thresholded pseudo ground-truth mask against `x_A`.
    pub layout_iou: f64,
    pub degenerate_keypoints: usize,
    pub empty_masks: usize,
    pub seconds: f64,
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub pipeline: Pipeline,
    pub optimizer: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = config.model.clone();
        model.seed = mix(config.seed, 0x1417, 0, 0);
        Ok(Self {
            pipeline: Pipeline::new(&model)?,
            optimizer: Adam::new(config.optimizer),
            step: 0,
            config,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let mut model = ckpt.config.model.clone();
        model.seed = mix(ckpt.config.seed, 0x1417, 0, 0);
        let mut segs = ckpt.segments;
        let mut take = |name: &str| {
            segs.remove(name).ok_or_else(|| Error::Checkpoint(format!("segment `{name}` is missing")))
        };
        let pipeline = Pipeline::from_segments(&model, take(SEGMENTS[0])?, take(SEGMENTS[1])?, take(SEGMENTS[2])?)?;
        if ckpt.rng.seed != ckpt.config.seed || ckpt.rng.next_step != ckpt.step {
            return Err(Error::Consistency("RNG state does not match the step counter".into()));
        }
        Ok(Self { config: ckpt.config, pipeline, optimizer: ckpt.optimizer, step: ckpt.step })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let segments = BTreeMap::from([
            (SEGMENTS[0].to_string(), self.pipeline.correspondence.params().clone()),
            (SEGMENTS[1].to_string(), self.pipeline.transport.params().clone()),
            (SEGMENTS[2].to_string(), self.pipeline.guidance.params().clone()),
        ]);
        Checkpoint {
            step: self.step,
            config: self.config.clone(),
            rng: RngState { seed: self.config.seed, next_step: self.step },
            segments,
            optimizer: self.optimizer.clone(),
        }
    }

    fn trainable(&self) -> Trainable {
        match self.config.schedule {
            Schedule::Joint => Trainable::ALL,
            Schedule::RoundRobin => match self.step % 3 {
                0 => Trainable { correspondence: true, ..Trainable::NONE },
                1 => Trainable { transport: true, ..Trainable::NONE },
                _ => Trainable { guidance: true, ..Trainable::NONE },
            },
        }
    }

    /// One forward/backward pass and optimizer update.
    pub fn train_step(&mut self, ds: &Dataset, phi: &FeatureExtractor) -> Result<StepRecord> {
        let start = Instant::now();
        let batch = make_batch(&self.config, ds, self.step)?;
        let trainable = self.trainable();
        let sg = build_objective(&self.pipeline, &self.config, &batch, trainable, phi)?;
        let terms = sg.terms.values();
        let total = sg.total.value().item();
        if !total.is_finite() || !terms.all_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                breakdown: serde_json::to_string(&terms).unwrap_or_default(),
            });
        }
        let grads = sg.graph.backward(&sg.total)?;
        let degenerate = sg.forward.corr.affines.degenerate.iter().filter(|&&d| d).count();
        let layout_iou = mean_layout_iou(&sg.guidance.x_a_p.value(), &batch.x_a);
        drop(sg);
        let p = &mut self.pipeline;
        self.optimizer.update(SEGMENTS[0], p.correspondence.params_mut(), &grads)?;
        self.optimizer.update(SEGMENTS[1], p.transport.params_mut(), &grads)?;
        self.optimizer.update(SEGMENTS[2], p.guidance.params_mut(), &grads)?;
        let record = StepRecord {
            step: self.step,
            total,
            terms,
            layout_iou,
            degenerate_keypoints: degenerate,
            empty_masks: batch.empty_masks,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(record)
    }
}

fn mean_layout_iou(pred: &Tensor, target: &Tensor) -> f64 {
    let n = pred.shape()[0];
    let per = pred.numel() / n;
    let mut acc = 0.0;
    for i in 0..n {
        let (mut inter, mut union) = (0.0, 0.0);
        for j in i * per..(i + 1) * per {
            let (a, b) = (pred.data()[j] >= 0.5, target.data()[j] >= 0.5);
            inter += (a && b) as u8 as f64;
            union += (a || b) as u8 as f64;
        }
        acc += if union == 0.0 { 1.0 } else { inter / union };
    }
    acc / n as f64
}

/// Side-by-side grid of the first batch element: exemplar, conditional mask,
/// transported output, pseudo ground truth, then one tile per attention map.
pub fn snapshot(sg: &StepGraph, batch: &Batch) -> Result<RgbImage> {
    let [_, _, h, w] = batch.y_b.dims4()?;
    let hw = h * w;
    let rgb = |t: &Tensor| t.data()[..3 * hw].to_vec();
    let grey = |plane: &[f64]| -> Vec<f64> { plane.iter().cycle().take(3 * hw).copied().collect() };
    let mut tiles = vec![
        rgb(&batch.y_b),
        grey(&batch.x_a.data()[..hw]),
        rgb(&sg.forward.x_hat_b.value()),
        rgb(&sg.guidance.x_b_p.value()),
    ];
    let attn = sg.forward.attn.value();
    let k1 = attn.shape()[1];
    for c in 0..k1 {
        tiles.push(grey(&attn.data()[c * hw..(c + 1) * hw]));
    }
    let cols = tiles.len();
    let out = Tensor::from_fn(&[3, h, w * cols], |i| {
        let (ch, p) = (i / (h * w * cols), i % (h * w * cols));
        let (r, c) = (p / (w * cols), p % (w * cols));
        tiles[c / w][ch * hw + r * w + c % w]
    });
    RgbImage::from_tensor_clamped(out)
}

/// Outcome of [`train_loop`].
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub state: TrainState,
}

/// Run from `state.step` to `state.config.steps`, writing checkpoints,
/// `metrics.ndjson` and snapshots under `output_dir` when given.
pub fn train_loop(mut state: TrainState, ds: &Dataset, output_dir: Option<&Path>) -> Result<TrainReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ds.resolution != state.config.resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} differs from configured {}",
            ds.resolution, state.config.resolution
        )));
    }
    let phi = FeatureExtractor::shared();
    let mut metrics = match output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::OpenOptions::new().create(true).append(true).open(dir.join("metrics.ndjson"))?)
        }
        None => None,
    };
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let save = |state: &TrainState, name: String, list: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = output_dir {
            let path = dir.join(name);
            state.checkpoint().save(&path)?;
            list.push(path);
        }
        Ok(())
    };
    while state.step < state.config.steps {
        let rec = match state.train_step(ds, phi) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                if let Some(dir) = output_dir {
                    std::fs::write(dir.join(format!("nonfinite_step_{}.txt", state.step)), e.to_string())?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        tracing::info!(
            target: "transmask::train",
            step = rec.step,
            total = rec.total,
            eq = rec.terms.eq,
            perc = rec.terms.perc,
            context = rec.terms.context,
            bound = rec.terms.bound,
            mask_i = rec.terms.mask_i,
            mask_t = rec.terms.mask_t,
            rec = rec.terms.rec,
            cyc = rec.terms.cyc,
            layout_iou = rec.layout_iou,
            seconds = rec.seconds,
        );
        if let Some(f) = metrics.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        records.push(rec);
        let every = state.config.validate_every;
        if let (Some(dir), true) = (output_dir, every > 0 && state.step % every == 0) {
            let batch = make_batch(&state.config, ds, state.step)?;
            let sg = build_objective(&state.pipeline, &state.config, &batch, Trainable::NONE, phi)?;
            let snaps = dir.join("snapshots");
            std::fs::create_dir_all(&snaps)?;
            save_rgb(&snapshot(&sg, &batch)?, &snaps.join(format!("step_{:08}.png", state.step)))?;
        }
        let every = state.config.checkpoint_every;
        if every > 0 && state.step % every == 0 && state.step < state.config.steps {
            save(&state, format!("ckpt_{:08}.tmck", state.step), &mut checkpoints)?;
        }
    }
    save(&state, "last.tmck".to_string(), &mut checkpoints)?;
    Ok(TrainReport { records, checkpoints, state })
}

/// Trailing moving average of the total loss with the given window.
pub fn moving_average(records: &[StepRecord], end: usize, window: usize) -> f64 {
    let start = end.saturating_sub(window);
    let slice = &records[start..end.min(records.len())];
    slice.iter().map(|r| r.total).sum::<f64>() / slice.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_sample, Sample};
    use crate::nn::HourglassSpec;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                keypoints: 2,
                internal_resolution: 16,
                keypoint_net: HourglassSpec { blocks: 2, base: 4, max: 8 },
                attention_net: HourglassSpec { blocks: 2, base: 4, max: 8 },
                ..ModelConfig::desk()
            },
            resolution: 16,
            batch_size: 2,
            steps: 3,
            checkpoint_every: 0,
            contextual: ContextualConfig { layers: vec!["conv2".into()], weights: vec![1.0], ..Default::default() },
            ..TrainConfig::desk()
        }
    }

    fn tiny_dataset() -> Dataset {
        let samples: Vec<Sample> = (0..3).map(|i| synthetic_sample(16, i)).collect();
        Dataset::from_samples(16, samples).unwrap()
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TrainConfig::desk();
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        let part = TrainConfig::from_toml("steps = 7\n[optimizer]\nlr = 0.001\n").unwrap();
        assert_eq!(part.steps, 7);
        assert_eq!(part.optimizer.beta1, 0.5);
        assert_eq!(part.model.keypoints, 10);
    }

    #[test]
    fn batches_are_deterministic_and_cover_epochs() {
        let cfg = tiny_config();
        let ds = tiny_dataset();
        let a = make_batch(&cfg, &ds, 4).unwrap();
        let b = make_batch(&cfg, &ds, 4).unwrap();
        assert_eq!(a.x_a, b.x_a);
        assert_eq!(a.indices, b.indices);
        let mut seen: Vec<usize> = (0..3).flat_map(|s| make_batch(&TrainConfig { batch_size: 1, ..cfg.clone() }, &ds, s).unwrap().indices).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let cfg = TrainConfig { weights: LossWeights::ZERO, ..tiny_config() };
        let ds = tiny_dataset();
        let mut state = TrainState::new(cfg).unwrap();
        let before = state.pipeline.correspondence.params().clone();
        let t_before = state.pipeline.transport.params().clone();
        state.train_step(&ds, FeatureExtractor::shared()).unwrap();
        assert_eq!(state.pipeline.correspondence.params(), &before);
        assert_eq!(state.pipeline.transport.params(), &t_before);
    }

    #[test]
    fn steps_are_bitwise_reproducible() {
        let ds = tiny_dataset();
        let run = || {
            let mut s = TrainState::new(tiny_config()).unwrap();
            (0..2).map(|_| s.train_step(&ds, FeatureExtractor::shared()).unwrap().total.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let ds = tiny_dataset();
        let mut s = TrainState::new(tiny_config()).unwrap();
        s.train_step(&ds, FeatureExtractor::shared()).unwrap();
        let bytes = s.checkpoint().encode().unwrap();
        let again = TrainState::from_checkpoint(Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(again.checkpoint().encode().unwrap(), bytes);
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::CheckpointVersion { found: 9, .. })));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let ds = tiny_dataset();
        let straight = train_loop(TrainState::new(tiny_config()).unwrap(), &ds, None).unwrap();
        let mut first = TrainState::new(TrainConfig { steps: 1, ..tiny_config() }).unwrap();
        first.train_step(&ds, FeatureExtractor::shared()).unwrap();
        let mut ckpt = Checkpoint::decode(&first.checkpoint().encode().unwrap()).unwrap();
        ckpt.config.steps = 3;
        let resumed = train_loop(TrainState::from_checkpoint(ckpt).unwrap(), &ds, None).unwrap();
        let tail: Vec<u64> = straight.records[1..].iter().map(|r| r.total.to_bits()).collect();
        let got: Vec<u64> = resumed.records.iter().map(|r| r.total.to_bits()).collect();
        assert_eq!(tail, got);
        assert_eq!(
            straight.state.checkpoint().encode().unwrap(),
            resumed.state.checkpoint().encode().unwrap()
        );
    }

    #[test]
    fn zero_steps_emit_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { steps: 0, ..tiny_config() };
        let report = train_loop(TrainState::new(cfg).unwrap(), &tiny_dataset(), Some(dir.path())).unwrap();
        assert!(report.records.is_empty());
        assert_eq!(report.checkpoints, vec![dir.path().join("last.tmck")]);
        assert_eq!(Checkpoint::load(&report.checkpoints[0]).unwrap().step, 0);
    }

    #[test]
    fn round_robin_updates_one_segment_per_step() {
        let cfg = TrainConfig { schedule: Schedule::RoundRobin, ..tiny_config() };
        let ds = tiny_dataset();
        let mut s = TrainState::new(cfg).unwrap();
        let t0 = s.pipeline.transport.params().clone();
        let c0 = s.pipeline.correspondence.params().clone();
        s.train_step(&ds, FeatureExtractor::shared()).unwrap();
        assert_ne!(s.pipeline.correspondence.params(), &c0);
        assert_eq!(s.pipeline.transport.params(), &t0);
    }

    #[test]
    fn boundary_only_objective_touches_correspondence_only() {
        let cfg = TrainConfig { weights: LossWeights { bound: 1.0, ..LossWeights::ZERO }, ..tiny_config() };
        let ds = tiny_dataset();
        let mut s = TrainState::new(cfg).unwrap();
        let (c0, t0, g0) = (
            s.pipeline.correspondence.params().clone(),
            s.pipeline.transport.params().clone(),
            s.pipeline.guidance.params().clone(),
        );
        s.train_step(&ds, FeatureExtractor::shared()).unwrap();
        assert_ne!(s.pipeline.correspondence.params(), &c0);
        assert_eq!(s.pipeline.transport.params(), &t0);
        assert_eq!(s.pipeline.guidance.params(), &g0);

        let cfg = TrainConfig { weights: LossWeights { bound: 0.0, ..LossWeights::default() }, ..tiny_config() };
        let mut s = TrainState::new(cfg).unwrap();
        s.train_step(&ds, FeatureExtractor::shared()).unwrap();
        assert_ne!(s.pipeline.transport.params(), &t0);
    }
}
