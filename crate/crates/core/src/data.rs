//! Dataset manifests, loading, training-pair synthesis and a procedural
//! image+mask generator for smoke runs.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_tps, make_identity_grid, random_tps, sample, TpsConfig};
use crate::imaging::{load_mask, load_rgb, save_mask, save_rgb, Mask, RgbImage};
use crate::kernels::Padding;
use crate::tensor::Tensor;

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

/// Parse newline-delimited JSON records. Relative paths resolve against
/// `base`. Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: Record = serde_json::from_str(line).map_err(|e| Error::Manifest { line: i + 1, reason: e.to_string() })?;
        for p in [&mut rec.image, &mut rec.mask] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: Mask,
}

/// Images and masks resized to a square training resolution.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub resolution: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_samples(resolution: usize, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let samples = samples
            .into_iter()
            .map(|s| Sample {
                image: s.image.resize(resolution, resolution),
                mask: s.mask.resize_nearest(resolution, resolution),
            })
            .collect();
        Ok(Self { resolution, samples })
    }

    pub fn load(records: &[Record], resolution: usize) -> Result<Self> {
        let mut samples = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let image = load_rgb(&r.image)?;
            let mask = load_mask(&r.mask).map_err(|e| match e {
                Error::Manifest { reason, .. } => Error::Manifest { line: i + 1, reason },
                other => other,
            })?;
            if image.dims() != mask.dims() {
                return Err(Error::Manifest {
                    line: i + 1,
                    reason: format!("mask is {:?} but image is {:?}", mask.dims(), image.dims()),
                });
            }
            samples.push(Sample { image, mask });
        }
        Self::from_samples(resolution, samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Deform `y_a` by a seeded random thin-plate spline and threshold at 0.5.
/// An empty mask is returned unchanged with the flag set.
pub fn synthesize_pair(y_a: &Mask, tps: &TpsConfig, seed: u64) -> Result<(Mask, bool)> {
    if y_a.is_empty() {
        return Ok((y_a.clone(), true));
    }
    let params = random_tps(tps, seed)?;
    let field = apply_tps(&params, &make_identity_grid(y_a.height(), y_a.width())?)?;
    let warped = sample(y_a.tensor(), &field, Padding::Zeros)?;
    Ok((Mask::from_tensor(warped.map(|v| v.clamp(0.0, 1.0)))?.threshold(0.5), false))
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(21) ^ c.rotate_left(42);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A textured scene with a smooth blob in front: the background is a blend
/// of two colours along a low-frequency wave, the blob carries its own
/// colour and stripe pattern.
pub fn synthetic_sample(size: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut colour = || [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
    let (bg0, bg1, fg0, fg1) = (colour(), colour(), colour(), colour());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB10B);
    let s = size as f64;
    let bg_freq = [rng.random_range(-2.0..2.0) * 2.0 * PI / s, rng.random_range(-2.0..2.0) * 2.0 * PI / s];
    let bg_phase = rng.random_range(0.0..2.0 * PI);
    let fg_angle: f64 = rng.random_range(0.0..PI);
    let fg_freq = rng.random_range(3.0..6.0) * 2.0 * PI / s;
    let (cx, cy) = (rng.random_range(0.35..0.65) * s, rng.random_range(0.35..0.65) * s);
    let radius = rng.random_range(0.18..0.3) * s;
    let harmonics: Vec<(f64, f64)> = (2..5).map(|_| (rng.random_range(0.0..0.15), rng.random_range(0.0..2.0 * PI))).collect();

    let inside = |r: usize, c: usize| {
        let (dy, dx) = (r as f64 - cy, c as f64 - cx);
        let theta = dy.atan2(dx);
        let scale = 1.0 + harmonics.iter().enumerate().map(|(i, (a, p))| a * ((i as f64 + 2.0) * theta + p).sin()).sum::<f64>();
        (dx * dx + dy * dy).sqrt() <= radius * scale
    };
    let mask = Mask::from_fn(size, size, inside);
    let hw = size * size;
    let image = Tensor::from_fn(&[3, size, size], |i| {
        let (ch, p) = (i / hw, i % hw);
        let (r, c) = ((p / size) as f64, (p % size) as f64);
        if mask.data()[p] > 0.5 {
            let u = c * fg_angle.cos() + r * fg_angle.sin();
            let t = 0.5 * (1.0 + (fg_freq * u).sin());
            fg0[ch] + (fg1[ch] - fg0[ch]) * t
        } else {
            let t = 0.5 * (1.0 + (bg_freq[0] * c + bg_freq[1] * r + bg_phase).sin());
            bg0[ch] + (bg1[ch] - bg0[ch]) * t
        }
    });
    Sample { image: RgbImage::from_tensor(image).expect("values stay within [0, 1]"), mask }
}

/// Write `count` synthetic samples as PNGs plus `manifest.ndjson` into `dir`.
pub fn write_synthetic_dataset(dir: &Path, count: usize, size: usize, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let s = synthetic_sample(size, mix(seed, 0x5A5A, i as u64, 0));
        let image = PathBuf::from(format!("image_{i:04}.png"));
        let mask = PathBuf::from(format!("mask_{i:04}.png"));
        save_rgb(&s.image, &dir.join(&image))?;
        save_mask(&s.mask, &dir.join(&mask))?;
        records.push(Record { image, mask, split: Some("train".into()) });
    }
    let path = dir.join("manifest.ndjson");
    write_manifest(&path, &records)?;
    Ok(path)
}
