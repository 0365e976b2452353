//! Model, loss and training configuration.
//!
//! Configuration files are TOML documents mirroring [`ShtConfig`]. Unknown keys
//! are rejected at every nesting level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ShtError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShtConfig {
    /// Number of landmarks L.
    pub num_landmarks: usize,
    /// Number of stacked hourglass units T.
    pub num_stacks: usize,
    pub sr_blocks_per_module: usize,
    /// Side of the (square) LR network input.
    pub input_size: usize,
    /// Side of the hallucinated face; 128 or 256.
    pub sr_output_size: usize,
    pub heatmap_size: usize,
    /// Channel width of the pose stream (P).
    pub pose_channels: usize,
    /// Channel width of the hallucination stream (Q).
    pub sr_channels: usize,
    /// Number of pooling levels inside each hourglass.
    pub hourglass_depth: usize,
    /// Bottleneck residual blocks per hourglass level.
    pub hourglass_blocks: usize,
    pub heatmap_sigma: f64,
    /// (γ₁, γ₂, γ₃): heatmap MSE, image L1 and gradient-map L1 weights.
    pub gamma: [f64; 3],
    /// (λ₁, λ₂, λ₃): adversarial, L1 and perceptual L1 weights.
    pub lambda: [f64; 3],
    pub augment: AugmentConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Landmark indices of the outer eye corners, used for NME_io.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interocular: Option<[usize; 2]>,
    pub fptn: FptnConfig,
    pub perceptual: PerceptualConfig,
    pub optim: OptimConfig,
    /// Use -log D(fake) for the generator instead of log(1 - D(fake)).
    pub non_saturating_gan: bool,
    /// Fraction of labeled pairs per batch during weakly-supervised finetuning.
    pub labeled_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotation_std_deg: f64,
    pub rotation_max_deg: f64,
    pub scale_std: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Crop side relative to the larger bounding-box side at scale 1.
    pub crop_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FptnConfig {
    /// Generator width at full resolution; doubled at each downsampling.
    pub channels: usize,
    pub transfer_blocks: usize,
    pub disc_channels: usize,
    /// Fraction of pretraining pairs whose target pose equals the condition pose.
    pub identity_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualConfig {
    pub source: PerceptualSource,
    /// Width of both convolutions (64 for VGG-19).
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum PerceptualSource {
    /// Pretrained first-block weights in a safetensors file with tensors
    /// `conv1_1.weight`, `conv1_1.bias`, `conv1_2.weight`, `conv1_2.bias`.
    File { path: PathBuf },
    /// Frozen, seeded random weights with the same architecture.
    Seeded { seed: u64 },
    /// Drop the perceptual term entirely.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_dhln: f64,
    pub lr_fptn: f64,
    pub betas_dhln: [f64; 2],
    pub betas_fptn: [f64; 2],
    pub eps: f64,
    /// Fractions of a phase at which the learning rate is halved.
    pub decay_at: Vec<f64>,
}

impl Default for ShtConfig {
    fn default() -> Self {
        Self {
            num_landmarks: 68,
            num_stacks: 4,
            sr_blocks_per_module: 4,
            input_size: 64,
            sr_output_size: 128,
            heatmap_size: 64,
            pose_channels: 256,
            sr_channels: 64,
            hourglass_depth: 3,
            hourglass_blocks: 2,
            heatmap_sigma: 1.5,
            gamma: [1.0, 0.01, 0.01],
            lambda: [0.05, 0.01, 0.01],
            augment: AugmentConfig::default(),
            batch_size: 16,
            seed: 0,
            interocular: None,
            fptn: FptnConfig::default(),
            perceptual: PerceptualConfig::default(),
            optim: OptimConfig::default(),
            non_saturating_gan: false,
            labeled_fraction: 0.5,
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_std_deg: 15.0,
            rotation_max_deg: 30.0,
            scale_std: 0.1,
            scale_min: 0.8,
            scale_max: 1.2,
            crop_margin: 1.25,
        }
    }
}

impl Default for FptnConfig {
    fn default() -> Self {
        Self { channels: 64, transfer_blocks: 6, disc_channels: 64, identity_fraction: 0.0 }
    }
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            source: PerceptualSource::File { path: PathBuf::from("weights/vgg19_conv1.safetensors") },
            channels: 64,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_dhln: 1e-4,
            lr_fptn: 2e-4,
            betas_dhln: [0.9, 0.999],
            betas_fptn: [0.5, 0.999],
            eps: 1e-8,
            decay_at: vec![0.6, 0.85],
        }
    }
}

fn invalid(msg: impl Into<String>) -> ShtError {
    ShtError::InvalidConfig(msg.into())
}

impl ShtConfig {
    /// Checks every invariant, naming the first one violated.
    pub fn validate(self) -> Result<Self> {
        let c = &self;
        if c.num_landmarks == 0 {
            return Err(invalid("num_landmarks must be > 0"));
        }
        if c.num_stacks == 0 {
            return Err(invalid("num_stacks must be >= 1"));
        }
        if c.sr_blocks_per_module == 0 {
            return Err(invalid("sr_blocks_per_module must be >= 1"));
        }
        if c.hourglass_depth == 0 || c.hourglass_blocks == 0 {
            return Err(invalid("hourglass_depth and hourglass_blocks must be >= 1"));
        }
        if c.input_size == 0 || c.input_size % (1 << c.hourglass_depth) != 0 {
            return Err(invalid(format!(
                "input_size {} must be a positive multiple of 2^hourglass_depth",
                c.input_size
            )));
        }
        if c.heatmap_size != c.input_size {
            return Err(invalid("heatmap_size must equal input_size (heatmaps are read off P)"));
        }
        if !matches!(c.sr_output_size, 128 | 256) {
            return Err(invalid(format!("sr_output_size {} must be 128 or 256", c.sr_output_size)));
        }
        if c.sr_output_size % c.input_size != 0 || !(c.sr_output_size / c.input_size).is_power_of_two() {
            return Err(invalid(format!(
                "sr_output_size {} must be a power-of-two multiple of input_size {}",
                c.sr_output_size, c.input_size
            )));
        }
        if c.sr_output_size == c.input_size {
            return Err(invalid("sr_output_size must exceed input_size"));
        }
        if c.pose_channels < 2 || c.sr_channels < 2 || c.pose_channels % 2 != 0 || c.sr_channels % 2 != 0 {
            return Err(invalid("pose_channels and sr_channels must be even and >= 2"));
        }
        if !(c.heatmap_sigma > 0.0) {
            return Err(invalid("heatmap_sigma must be > 0"));
        }
        if c.gamma[0] != 0.0 && c.gamma[0] != 1.0 {
            return Err(invalid(format!("gamma1 = {} must be 0 or 1", c.gamma[0])));
        }
        if !(c.gamma[1] > 0.0 && c.gamma[2] > 0.0) {
            return Err(invalid("gamma2 and gamma3 must be > 0"));
        }
        if !c.lambda.iter().all(|&l| l > 0.0) {
            return Err(invalid("lambda1, lambda2 and lambda3 must be > 0"));
        }
        if c.batch_size == 0 || c.batch_size % 2 != 0 {
            return Err(invalid(format!("batch_size {} must be even and > 0", c.batch_size)));
        }
        let a = &c.augment;
        if !(a.rotation_std_deg >= 0.0 && a.rotation_max_deg >= 0.0 && a.scale_std >= 0.0) {
            return Err(invalid("augmentation spreads must be >= 0"));
        }
        if !(a.scale_min > 0.0 && a.scale_min <= 1.0 && a.scale_max >= 1.0) {
            return Err(invalid("scale range must satisfy 0 < scale_min <= 1 <= scale_max"));
        }
        if !(a.crop_margin > 0.0) {
            return Err(invalid("crop_margin must be > 0"));
        }
        if let Some([i, j]) = c.interocular {
            if i == j || i >= c.num_landmarks || j >= c.num_landmarks {
                return Err(invalid("interocular indices must be distinct and < num_landmarks"));
            }
        }
        if c.fptn.channels == 0 || c.fptn.transfer_blocks == 0 || c.fptn.disc_channels == 0 {
            return Err(invalid("fptn widths and transfer_blocks must be >= 1"));
        }
        if !(0.0..=1.0).contains(&c.fptn.identity_fraction) {
            return Err(invalid("fptn.identity_fraction must lie in [0, 1]"));
        }
        if c.perceptual.channels == 0 {
            return Err(invalid("perceptual.channels must be >= 1"));
        }
        let o = &c.optim;
        if !(o.lr_dhln > 0.0 && o.lr_fptn > 0.0 && o.eps > 0.0) {
            return Err(invalid("learning rates and eps must be > 0"));
        }
        if !o.betas_dhln.iter().chain(o.betas_fptn.iter()).all(|b| (0.0..1.0).contains(b)) {
            return Err(invalid("optimizer betas must lie in [0, 1)"));
        }
        if !o.decay_at.iter().all(|f| (0.0..=1.0).contains(f)) {
            return Err(invalid("optim.decay_at entries must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&c.labeled_fraction) {
            return Err(invalid("labeled_fraction must lie in [0, 1]"));
        }
        Ok(self)
    }

    /// Desk-scale setup for the procedural toy faces: 5 landmarks, 64→128,
    /// two stacks at quarter width, a narrow FPTN and a seeded perceptual
    /// extractor.
    pub fn toy() -> Self {
        let d = Self::default();
        Self {
            num_landmarks: crate::data::TOY_LANDMARKS,
            num_stacks: 2,
            sr_output_size: 128,
            pose_channels: d.pose_channels / 4,
            sr_channels: d.sr_channels / 4,
            batch_size: 4,
            interocular: Some(crate::data::TOY_INTEROCULAR),
            fptn: FptnConfig { channels: 8, disc_channels: 8, identity_fraction: 0.2, ..d.fptn },
            perceptual: PerceptualConfig { source: PerceptualSource::Seeded { seed: 0 }, channels: 16 },
            // The narrow toy network sits on the all-zero heatmap plateau for
            // hundreds of steps at the reference rate.
            optim: OptimConfig { lr_dhln: 1e-3, ..d.optim.clone() },
            ..d
        }
    }

    /// Upsampling factor of the hallucination head.
    pub fn sr_scale(&self) -> usize {
        self.sr_output_size / self.input_size
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str::<ShtConfig>(s).map_err(|e| invalid(e.message().to_string()))?.validate()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    /// Applies `key=value` overrides. Keys are dotted paths into the config
    /// document; values are parsed as TOML literals, falling back to strings.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut doc = toml::Value::try_from(&self).map_err(|e| invalid(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| invalid(format!("override `{raw}` is not key=value")))?;
            let value = parse_literal(value.trim());
            set_path(&mut doc, key.trim(), value)?;
        }
        let text = toml::to_string(&doc).map_err(|e| invalid(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

fn parse_literal(v: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {v}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(v.to_string()),
    }
}

fn set_path(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| invalid("empty override key"))?;
    let mut cur = doc;
    for p in parts {
        let table = cur.as_table_mut().ok_or_else(|| invalid(format!("`{key}` is not a table path")))?;
        cur = table
            .get_mut(p)
            .ok_or_else(|| invalid(format!("unknown config key `{key}`")))?;
    }
    let table = cur.as_table_mut().ok_or_else(|| invalid(format!("`{key}` is not a table path")))?;
    table.insert(last.to_string(), value);
    Ok(())
}
