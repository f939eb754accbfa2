//! Training configuration: a flat `key = value` file, every field optional,
//! with command-line overrides applied on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::BatchSampler;
use crate::dffn::{BackboneConfig, DffnConfig};
use crate::error::{Error, Result};
use crate::imaging::{DEFAULT_HEIGHT, DEFAULT_WIDTH};
use crate::losses::{LossWeights, LrStandard, Mining, Reduction};
use crate::model::ModelConfig;
use crate::rrn::{EncoderConfig, RrnConfig};

pub const CONFIG_ENV: &str = "MRJL_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Only the HR reconstruction loss and the HR feature branch.
    HrOnly,
    /// Only the LR reconstruction loss and the LR feature branch.
    LrOnly,
    SingleBranchEncoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderPreset {
    /// Eight layers per branch, widths 32 to 128.
    Standard,
    /// Four layers per branch at `encoder_width` channels.
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackbonePreset {
    Resnet50,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_mse: f64,
    pub lr_reid: f64,
    /// Learning rates are multiplied by `lr_decay_factor` once this many
    /// epochs have completed.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub margin: f64,
    pub lr_standard: LrStandard,
    pub mse_reduction: Reduction,
    pub triplet_reduction: Reduction,
    pub mining: Mining,
    pub ablation: Ablation,
    /// Stops re-identification gradients at the reconstructed images.
    pub detach_recon: bool,
    pub seed: u64,
    /// Checkpoint cadence in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub height: usize,
    pub width: usize,
    pub encoder: EncoderPreset,
    pub encoder_width: usize,
    pub backbone: BackbonePreset,
    pub stub_kernel: usize,
    pub persons_per_batch: usize,
    pub hr_per_person: usize,
    pub lr_per_person: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            epochs: 60,
            lr_mse: 3e-3,
            lr_reid: 3e-4,
            lr_decay_epoch: 30,
            lr_decay_factor: 0.1,
            weight_decay: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda: w.lambda,
            gamma: w.gamma,
            margin: w.margin,
            lr_standard: LrStandard::default(),
            mse_reduction: Reduction::Mean,
            triplet_reduction: Reduction::Mean,
            mining: Mining::BatchHard,
            ablation: Ablation::Full,
            detach_recon: false,
            seed: 0,
            checkpoint_every: 0,
            height: DEFAULT_HEIGHT,
            width: DEFAULT_WIDTH,
            encoder: EncoderPreset::Standard,
            encoder_width: 8,
            backbone: BackbonePreset::Resnet50,
            stub_kernel: 3,
            persons_per_batch: 5,
            hr_per_person: 2,
            lr_per_person: 2,
        }
    }
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))
}

/// Reads an override value as a TOML scalar, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    parse_table(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl TrainConfig {
    /// Compact encoder and stub backbone at the given image size, for
    /// desk-scale runs.
    pub fn small(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            encoder: EncoderPreset::Compact,
            encoder_width: 4,
            backbone: BackbonePreset::Stub,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text)?)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Loads `path` (or defaults) and applies `key=value` overrides.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => parse_table(&std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)?,
            None => toml::Table::new(),
        };
        for kv in overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
            table.insert(k.trim().to_string(), override_value(v.trim()));
        }
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            gamma: self.gamma,
            margin: self.margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        let positive = [
            ("lr_mse", self.lr_mse),
            ("lr_reid", self.lr_reid),
            ("lr_decay_factor", self.lr_decay_factor),
            ("weight_decay", self.weight_decay),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.persons_per_batch < 2 || self.hr_per_person == 0 {
            return Err(Error::Config("a batch needs at least 2 persons and 1 HR image each".into()));
        }
        if self.hr_per_person + self.lr_per_person < 2 {
            return Err(Error::Config("triplet mining needs at least 2 images per person".into()));
        }
        if self.encoder_width == 0 {
            return Err(Error::Config("encoder_width must be positive".into()));
        }
        Ok(())
    }

    pub fn rrn_config(&self) -> RrnConfig {
        let enc = match self.encoder {
            EncoderPreset::Standard => EncoderConfig::multi_kernel(),
            EncoderPreset::Compact => EncoderConfig::compact(self.encoder_width),
        };
        let enc = match self.ablation {
            Ablation::SingleBranchEncoder => enc.into_single_branch(),
            _ => enc,
        };
        RrnConfig::from_encoder(enc)
    }

    pub fn dffn_config(&self) -> DffnConfig {
        let backbone = match self.backbone {
            BackbonePreset::Resnet50 => BackboneConfig::resnet50(),
            BackbonePreset::Stub => match BackboneConfig::stub() {
                BackboneConfig::Stub { widths, strides, .. } => BackboneConfig::Stub {
                    widths,
                    strides,
                    kernel: self.stub_kernel,
                },
                other => other,
            },
        };
        DffnConfig { backbone }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            height: self.height,
            width: self.width,
            rrn: self.rrn_config(),
            dffn: self.dffn_config(),
            num_classes,
        }
    }

    pub fn sampler(&self) -> BatchSampler {
        let mut s = BatchSampler::new(self.seed);
        s.persons = self.persons_per_batch;
        s.hr_per_person = self.hr_per_person;
        s.lr_per_person = self.lr_per_person;
        s
    }

    /// `(lr_mse, lr_reid)` for a zero-based epoch.
    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        let f = if epoch >= self.lr_decay_epoch { self.lr_decay_factor } else { 1.0 };
        (self.lr_mse * f, self.lr_reid * f)
    }

    /// Mini-batches per epoch: one pass over the identities, five at a time.
    pub fn batches_per_epoch(&self, identities: usize) -> usize {
        identities.div_ceil(self.persons_per_batch).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.lr_mse, c.lr_reid, c.weight_decay), (60, 3e-3, 3e-4, 5e-4));
        assert_eq!(c.learning_rates(29), (3e-3, 3e-4));
        let (m, r) = c.learning_rates(30);
        assert_eq!((m, r), (3e-3 * 0.1, 3e-4 * 0.1));
        assert_eq!(c.learning_rates(59), (m, r));
        assert_eq!(c.batches_per_epoch(8), 2);
        assert_eq!(c.batches_per_epoch(10), 2);
    }

    #[test]
    fn round_trips_through_text() {
        let mut c = TrainConfig::default();
        c.ablation = Ablation::HrOnly;
        c.backbone = BackbonePreset::Stub;
        c.lr_standard = LrStandard::new(2).unwrap();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_and_overrides() {
        let c = TrainConfig::from_toml("epochs = 3\nablation = \"lr_only\"\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.ablation, Ablation::LrOnly);
        assert_eq!(c.lr_mse, 3e-3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "epochs = 3\nseed = 9\n").unwrap();
        let c = TrainConfig::load_with_overrides(
            Some(&p),
            &["epochs=5".into(), "backbone=stub".into(), "lambda = 0.5".into()],
        )
        .unwrap();
        assert_eq!((c.epochs, c.seed, c.lambda), (5, 9, 0.5));
        assert_eq!(c.backbone, BackbonePreset::Stub);
    }

    #[test]
    fn bad_input_is_config_error() {
        for text in ["epochs = -1", "no_such_key = 1", "lambda = -2.0", "lr_standard = 5", "epochs = "] {
            assert!(matches!(TrainConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
        assert!(TrainConfig::load_with_overrides(None, &["epochs".into()]).is_err());
    }

    #[test]
    fn single_branch_ablation_changes_encoder() {
        let c = TrainConfig {
            ablation: Ablation::SingleBranchEncoder,
            ..TrainConfig::default()
        };
        assert_eq!(c.rrn_config().encoder.kernel_sizes, vec![3]);
        assert!(!c.rrn_config().encoder.attention);
    }
}
