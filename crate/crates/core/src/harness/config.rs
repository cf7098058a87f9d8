use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aslmask::{MaskKind, Normalization};
use crate::error::{ensure, Error, Result};
use crate::features::{AugPolicy, LogMelParams, SpecAugParams};
use crate::models::{LearnedLocalizerConfig, LocalizerKind, ModelConfig, OracleLocalizer, SgdConfig};
use crate::ssl_objective::{LossWeights, ThresholdMode};

pub const CONFIG_SCHEMA_VERSION: &str = "1.0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub labeled: usize,
    /// Unlabeled samples per labeled sample in a step.
    pub ratio: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { labeled: 2, ratio: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    /// Base confidence threshold; also the fixed gate of the mixup loss.
    pub tau: f64,
    pub threshold: ThresholdMode,
    pub hard_pseudo_label: bool,
    pub ema_momentum: f64,
    /// Beta distribution parameters of the mix ratio.
    pub mix_alpha: (f64, f64),
    /// Steps of sigmoid ramp-up applied to all three unlabeled loss
    /// weights; 0 uses the full weights from the first step.
    pub rampup_steps: usize,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            threshold: ThresholdMode::Flex,
            hard_pseudo_label: true,
            ema_momentum: 0.999,
            mix_alpha: (5.0, 10.0),
            rampup_steps: 480,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    #[serde(rename = "type")]
    pub kind: MaskKind,
    pub frames_per_map: usize,
    pub normalization: Normalization,
    pub eps: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            kind: MaskKind::Asl,
            frames_per_map: 1,
            normalization: Normalization::Frame,
            eps: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerConfig {
    pub kind: LocalizerKind,
    pub oracle: OracleLocalizer,
    pub learned: LearnedLocalizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub weak: AugPolicy,
    pub strong: AugPolicy,
    pub specaug: SpecAugParams,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            weak: AugPolicy::weak(),
            strong: AugPolicy::strong(),
            specaug: SpecAugParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalPolicy {
    pub segments: usize,
    pub crops: usize,
    pub crop_size: usize,
    /// Evaluate on the test split every this many epochs; 0 evaluates only
    /// at the end of training.
    pub every_epochs: usize,
}

impl Default for EvalPolicy {
    fn default() -> Self {
        Self {
            segments: 5,
            crops: 3,
            crop_size: 28,
            every_epochs: 0,
        }
    }
}

impl EvalPolicy {
    pub fn views(&self) -> usize {
        self.segments * self.crops
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: String,
    pub dataset: Option<PathBuf>,
    pub seed: u64,
    pub epochs: usize,
    /// Upper bound on optimizer steps regardless of `epochs`.
    pub max_steps: Option<usize>,
    pub batch: BatchConfig,
    pub model: ModelConfig,
    pub optim: SgdConfig,
    pub loss: LossWeights,
    pub ssl: SslConfig,
    pub mask: MaskConfig,
    pub localizer: LocalizerConfig,
    pub aug: AugConfig,
    pub features: LogMelParams,
    pub eval: EvalPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION.into(),
            dataset: None,
            seed: 0,
            epochs: 200,
            max_steps: None,
            batch: BatchConfig::default(),
            model: ModelConfig::default(),
            optim: SgdConfig::default(),
            loss: LossWeights::default(),
            ssl: SslConfig::default(),
            mask: MaskConfig::default(),
            localizer: LocalizerConfig::default(),
            aug: AugConfig::default(),
            features: LogMelParams::default(),
            eval: EvalPolicy::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == CONFIG_SCHEMA_VERSION,
            Config,
            "config schema version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
            self.schema_version
        );
        let w = &self.loss;
        ensure!(
            w.gamma1 >= 0.0 && w.gamma2 >= 0.0 && w.gamma3 >= 0.0,
            Config,
            "loss weights must be non-negative"
        );
        ensure!(self.ssl.tau > 0.0 && self.ssl.tau <= 1.0, Config, "ssl.tau must lie in (0, 1]");
        ensure!(
            (0.0..=1.0).contains(&self.ssl.ema_momentum),
            Config,
            "ssl.ema_momentum must lie in [0, 1]"
        );
        ensure!(
            self.ssl.mix_alpha.0 > 0.0 && self.ssl.mix_alpha.1 > 0.0,
            Config,
            "ssl.mix_alpha entries must be positive"
        );
        ensure!(
            matches!(self.mask.frames_per_map, 1 | 2 | 4 | 8),
            Config,
            "mask.frames_per_map must be one of 1, 2, 4, 8"
        );
        ensure!(self.epochs >= 1, Config, "epochs must be at least 1");
        ensure!(
            self.eval.segments >= 1 && self.eval.crops >= 1,
            Config,
            "eval.segments and eval.crops must be at least 1"
        );
        self.aug.weak.validate()?;
        self.aug.strong.validate()?;
        if let Some(p) = &self.dataset {
            if !p.exists() {
                return Err(Error::MissingPath(p.clone()));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value` overrides with dotted keys, e.g.
    /// `mask.type=tube` or `loss.gamma3=0`. Values parse as TOML and fall
    /// back to bare strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut table, key.trim(), value)?;
        }
        let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    ensure!(parts.iter().all(|p| !p.is_empty()), Config, "malformed key `{key}`");
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_parse() {
        let c = RunConfig::from_toml(
            "schema_version = \"1.0\"\nmask.type = \"tube\"\nmask.frames_per_map = 4\nssl.hard_pseudo_label = false\nmodel.d_model = 32\n",
        )
        .unwrap();
        assert_eq!(c.mask.kind, MaskKind::Tube);
        assert_eq!(c.mask.frames_per_map, 4);
        assert!(!c.ssl.hard_pseudo_label);
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.model.heads, ModelConfig::default().heads);
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::default()
            .with_overrides(&["mask.type=random".into(), "loss.gamma3=0".into(), "seed=9".into()])
            .unwrap();
        assert_eq!(c.mask.kind, MaskKind::Random);
        assert_eq!(c.loss.gamma3, 0.0);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::from_toml("mask.kind = \"asl\"\n").is_err());
        assert!(RunConfig::default().with_overrides(&["ssl.nope=1".into()]).is_err());
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.ssl.tau = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.schema_version = "2.0".into();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.dataset = Some("/definitely/not/here".into());
        assert!(matches!(c.validate(), Err(Error::MissingPath(_))));
    }
}
