//! Flat JSON configuration shared by training, generation and the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::generation::LossWeights;
use crate::prior::ExponentForm;
use crate::{Error, Result};

/// How driving motion is applied to the target over a clip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every frame uses the motion from the onset to that frame.
    #[default]
    OnsetRelative,
    /// Every frame moves the previous output by the motion between
    /// consecutive driving frames. Errors accumulate over the clip.
    InterFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Side of the square frames the model works on.
    pub image_size: usize,
    /// Image channels (grayscale replicated to 3).
    pub channels: usize,
    pub num_keypoints: usize,
    /// Motion networks run at `image_size × motion_scale`.
    pub motion_scale: f64,
    pub keypoint_base: usize,
    pub dense_base: usize,
    pub hourglass_depth: usize,
    pub generator_base: usize,
    pub residual_blocks: usize,
    pub discriminator_base: usize,
    pub feature_widths: Vec<usize>,

    /// Prior kernel spread; derived from the image size when absent.
    pub sigma: Option<f64>,
    pub exponent_form: ExponentForm,
    /// Keypoint spec file; the bundled default when absent.
    pub keypoint_spec: Option<PathBuf>,

    pub weight_perceptual: f64,
    pub weight_mae: f64,
    pub weight_adversarial: f64,
    pub weight_equivariance: f64,
    /// Trains the detector to follow random thin-plate deformations.
    pub equivariance: bool,
    pub tps_affine_sigma: f64,
    pub tps_sigma: f64,

    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            num_keypoints: 10,
            motion_scale: 0.5,
            keypoint_base: 16,
            dense_base: 16,
            hourglass_depth: 2,
            generator_base: 8,
            residual_blocks: 2,
            discriminator_base: 16,
            feature_widths: vec![8, 16, 32],
            sigma: None,
            exponent_form: ExponentForm::Distance,
            keypoint_spec: None,
            weight_perceptual: 10.0,
            weight_mae: 1.0,
            weight_adversarial: 1.0,
            weight_equivariance: 5.0,
            equivariance: true,
            tps_affine_sigma: 0.05,
            tps_sigma: 0.005,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            steps: 2000,
            batch_size: 4,
            seed: 0,
            mode: Mode::OnsetRelative,
        }
    }
}

/// Architecture fields; two configs with equal digests of this part produce
/// interchangeable checkpoints.
#[derive(Serialize)]
struct Architecture<'a> {
    image_size: usize,
    channels: usize,
    num_keypoints: usize,
    motion_scale: f64,
    keypoint_base: usize,
    dense_base: usize,
    hourglass_depth: usize,
    generator_base: usize,
    residual_blocks: usize,
    discriminator_base: usize,
    feature_widths: &'a [usize],
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            perceptual: self.weight_perceptual,
            mae: self.weight_mae,
            adversarial: self.weight_adversarial,
            equivariance: if self.equivariance { self.weight_equivariance } else { 0.0 },
        }
    }

    pub fn motion_size(&self) -> usize {
        (self.image_size as f64 * self.motion_scale).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        // The raw equivariance weight counts even when the term is disabled.
        LossWeights {
            equivariance: self.weight_equivariance,
            ..self.weights()
        }
        .validate()?;
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("num_keypoints", self.num_keypoints),
            ("keypoint_base", self.keypoint_base),
            ("dense_base", self.dense_base),
            ("hourglass_depth", self.hourglass_depth),
            ("generator_base", self.generator_base),
            ("discriminator_base", self.discriminator_base),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invalid("channels must be 1 or 3"));
        }
        if !self.image_size.is_multiple_of(4) {
            return Err(Error::invalid(format!("image_size {} is not divisible by 4", self.image_size)));
        }
        if !(self.motion_scale > 0.0 && self.motion_scale <= 1.0) {
            return Err(Error::invalid("motion_scale must lie in (0, 1]"));
        }
        let m = self.motion_size();
        if m == 0 || !m.is_multiple_of(1 << self.hourglass_depth) {
            return Err(Error::invalid(format!(
                "motion resolution {m} must be divisible by 2^hourglass_depth"
            )));
        }
        if self.feature_widths.is_empty() || self.feature_widths.contains(&0) {
            return Err(Error::invalid("feature_widths must list positive widths"));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("sigma must be positive, got {s}")));
            }
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("tps_affine_sigma", self.tps_affine_sigma + 1.0),
            ("tps_sigma", self.tps_sigma + 1.0),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} is out of range")));
            }
        }
        if self.tps_affine_sigma < 0.0 || self.tps_sigma < 0.0 {
            return Err(Error::invalid("TPS spreads must be non-negative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the architecture fields.
    pub fn digest(&self) -> [u8; 32] {
        let arch = Architecture {
            image_size: self.image_size,
            channels: self.channels,
            num_keypoints: self.num_keypoints,
            motion_scale: self.motion_scale,
            keypoint_base: self.keypoint_base,
            dense_base: self.dense_base,
            hourglass_depth: self.hourglass_depth,
            generator_base: self.generator_base,
            residual_blocks: self.residual_blocks,
            discriminator_base: self.discriminator_base,
            feature_widths: &self.feature_widths,
        };
        Sha256::digest(serde_json::to_vec(&arch).expect("serializes")).into()
    }
}
