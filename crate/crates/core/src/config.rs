//! Model architecture configuration shared by the three network segments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::HourglassSpec;

/// What the keypoint predictor sees on the exemplar side.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverInput {
    /// The exemplar image with everything outside its mask zeroed.
    #[default]
    MaskedExemplar,
    /// The exemplar mask replicated to three channels.
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of keypoints `K`.
    pub keypoints: usize,
    /// Softmax temperature of the heatmaps.
    pub temperature: f64,
    /// Side length the keypoint predictor runs at.
    pub internal_resolution: usize,
    pub keypoint_net: HourglassSpec,
    /// Shared shape of the transport and guidance attention networks.
    pub attention_net: HourglassSpec,
    pub driver_input: DriverInput,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            keypoints: 10,
            temperature: 0.1,
            internal_resolution: 64,
            keypoint_net: HourglassSpec { blocks: 5, base: 32, max: 1024 },
            attention_net: HourglassSpec { blocks: 4, base: 32, max: 256 },
            driver_input: DriverInput::MaskedExemplar,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small networks for 64×64 CPU training.
    pub fn desk() -> Self {
        Self {
            keypoints: 4,
            internal_resolution: 32,
            keypoint_net: HourglassSpec { blocks: 4, base: 16, max: 64 },
            attention_net: HourglassSpec { blocks: 4, base: 8, max: 32 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.keypoints == 0 {
            return Err(Error::Config("keypoints must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        for (name, spec) in [("keypoint_net", &self.keypoint_net), ("attention_net", &self.attention_net)] {
            if spec.base == 0 || spec.max == 0 {
                return Err(Error::Config(format!("{name} widths must be positive")));
            }
        }
        let g = 1usize << self.keypoint_net.blocks;
        if self.internal_resolution == 0 || self.internal_resolution % g != 0 {
            return Err(Error::Config(format!(
                "internal_resolution {} must be a positive multiple of {g}",
                self.internal_resolution
            )));
        }
        Ok(())
    }
}
