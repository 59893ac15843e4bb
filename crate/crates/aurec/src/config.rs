//! Declarative run configuration: one file with `[model]`, `[data]` and
//! `[train]` sections, loaded from TOML, hashed for checkpoint compatibility
//! and stamped into every artifact directory.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Fixed RoI window side on the fused feature map (6x6 cells).
pub const ROI_WINDOW: usize = 6;
/// Stride of the fused feature map relative to the input image.
pub const MAP_STRIDE: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of action units N.
    pub au_count: usize,
    /// Square input side; must be 12 * 2^k and divisible by 32 (96, 192, ...).
    pub image_size: usize,
    /// Channel width multiplier (1.0 = standard ResNet-18 widths).
    pub width: f64,
    /// Token / query dimension d.
    pub embed_dim: usize,
    /// Attention heads.
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            au_count: 12,
            image_size: 192,
            width: 1.0,
            embed_dim: 128,
            heads: 8,
        }
    }
}

impl ModelConfig {
    /// Side of the stride-4 fused map (48 for 192 input).
    pub fn map_size(&self) -> usize {
        self.image_size / MAP_STRIDE
    }

    /// RoII patch side s in image pixels (48 for 192 input).
    pub fn patch_size(&self) -> usize {
        self.image_size / 4
    }

    /// Spatial side of the predicted flow grid (stride 8).
    pub fn flow_size(&self) -> usize {
        self.image_size / 8
    }

    /// Scale a full-width channel count by the width multiplier.
    pub fn ch(&self, full: usize) -> usize {
        ((full as f64 * self.width).round() as usize).max(4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.au_count == 0 {
            return Err(Error::Config("au_count must be >= 1".into()));
        }
        if !self.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by 32",
                self.image_size
            )));
        }
        let s = self.patch_size();
        let mut v = s;
        while v.is_multiple_of(2) {
            v /= 2;
        }
        if v != 3 {
            return Err(Error::Config(format!(
                "image_size {} unsupported: patch side {} must be 3 * 2^k (use 96, 192, 384, ...)",
                self.image_size, s
            )));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.width.is_finite() || self.width <= 0.0 {
            return Err(Error::Config("width must be positive".into()));
        }
        Ok(())
    }
}

/// One AU-center rule: centers are `landmark[anchor] + offset * (S-1)` on the
/// left side and the x-mirrored offset from the right anchor on the right.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuRule {
    pub left_anchor: usize,
    pub right_anchor: usize,
    /// Fractional (x, y) offset relative to image side.
    pub offset: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub subjects: usize,
    pub samples_per_subject: usize,
    /// Fraction of each subject's samples stripped of labels.
    pub unlabeled_fraction: f64,
    /// Extra margin generated around the crop target (samples are generated
    /// at image_size + 2*margin and cropped downstream).
    pub margin: usize,
    /// Per-AU activation probability for independently sampled AUs.
    pub activation_prob: f64,
    /// Label correlation of the co-occurring pair (AU0, AU1).
    pub co_occur_correlation: f64,
    /// Integer (dx, dy) pixel displacement of the moving patch in frame t+3.
    pub displacement: [i64; 2],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            subjects: 8,
            samples_per_subject: 16,
            unlabeled_fraction: 0.5,
            margin: 4,
            activation_prob: 0.5,
            co_occur_correlation: 0.9,
            displacement: [2, 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Manifest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// JSON-lines manifest of labeled samples (`source = "manifest"`).
    pub manifest: Option<PathBuf>,
    /// Optional manifest of unlabeled samples.
    pub unlabeled_manifest: Option<PathBuf>,
    /// When labels in a manifest are ordinal intensities, values >= this
    /// threshold count as active.
    pub label_threshold: Option<u8>,
    /// AU-center rule table; defaults to the synthetic two-corner scheme.
    pub rules: Option<Vec<AuRule>>,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            manifest: None,
            unlabeled_manifest: None,
            label_threshold: None,
            rules: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Iterations m.
    pub iterations: usize,
    /// Per-stream batch size n (labeled and unlabeled streams are equal).
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_f: f64,
    pub lambda_u: f64,
    /// Sharpening temperature T.
    pub temperature: f64,
    /// Beta(alpha, alpha) mixup concentration.
    pub mix_alpha: f64,
    /// Frame step between flow ground-truth pairs (t and t+step).
    pub flow_step: usize,
    /// Decision threshold for F1 and pseudo hard labels.
    pub threshold: f64,
    /// Number of augmented guesses averaged for pseudo labels (1 = single
    /// forward pass as in the training algorithm).
    pub k_augment: usize,
    /// Evaluate on the held-out set every this many iterations (0 = never).
    pub eval_every: usize,
    /// Checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    /// Optional early-stop thresholds checked at eval points.
    pub stop_at_train_f1: Option<f64>,
    pub stop_at_heldout_f1: Option<f64>,
    /// Ablation switches (all on by default).
    pub enable_semi: bool,
    pub enable_roii: bool,
    pub enable_flow: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 4,
            lr: 3e-4,
            seed: 7,
            lambda1: 0.1,
            lambda2: 0.1,
            lambda_f: 0.2,
            lambda_u: 1.0,
            temperature: 0.5,
            mix_alpha: 0.75,
            flow_step: 3,
            threshold: 0.5,
            k_augment: 1,
            eval_every: 50,
            checkpoint_every: 0,
            stop_at_train_f1: None,
            stop_at_heldout_f1: None,
            enable_semi: true,
            enable_roii: true,
            enable_flow: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 || self.temperature > 1.0 {
            return Err(Error::Config(format!(
                "temperature {} outside (0, 1]",
                self.temperature
            )));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !self.mix_alpha.is_finite() || self.mix_alpha <= 0.0 {
            return Err(Error::Config("mix_alpha must be positive".into()));
        }
        if self.k_augment == 0 {
            return Err(Error::Config("k_augment must be >= 1".into()));
        }
        if self.flow_step == 0 {
            return Err(Error::Config("flow_step must be >= 1".into()));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_f", self.lambda_f),
            ("lambda_u", self.lambda_u),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        if self.lambda1 > 1.0 {
            return Err(Error::Config("lambda1 must be <= 1 (it weights a convex pair)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.source == DataSource::Manifest && self.data.manifest.is_none() {
            return Err(Error::Config(
                "data.source = \"manifest\" requires data.manifest".into(),
            ));
        }
        if let Some(rules) = &self.data.rules {
            if rules.len() != self.model.au_count {
                return Err(Error::Config(format!(
                    "rule table has {} entries, expected au_count = {}",
                    rules.len(),
                    self.model.au_count
                )));
            }
        }
        if self.data.source == DataSource::Synthetic {
            let sy = &self.data.synthetic;
            if sy.subjects == 0 || sy.samples_per_subject == 0 {
                return Err(Error::Config("synthetic set must be nonempty".into()));
            }
            if !(0.0..=1.0).contains(&sy.unlabeled_fraction) {
                return Err(Error::Config("unlabeled_fraction outside [0,1]".into()));
            }
            if !(0.0..=1.0).contains(&sy.activation_prob) {
                return Err(Error::Config("activation_prob outside [0,1]".into()));
            }
            if !(0.0..=1.0).contains(&sy.co_occur_correlation) {
                return Err(Error::Config("co_occur_correlation outside [0,1]".into()));
            }
            if self.model.au_count < 4 {
                return Err(Error::Config(
                    "synthetic scheme needs au_count >= 4 (one co-occurring and one exclusive pair)"
                        .into(),
                ));
            }
        }
        Ok(())
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable content hash used to pair checkpoints with configs. The JSON
    /// encoding follows struct declaration order, so the hash is canonical.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
