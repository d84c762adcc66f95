//! Run configuration: a single TOML tree covering dataset, model, style
//! transform, style losses, training and ablation flags. Unknown keys are
//! hard errors.

use crate::error::{Error, Result};
use crate::pipeline::dataset::DomainSpec;
use crate::prompts::{default_conditions, default_templates};
use crate::sso::SsoConfig;
use crate::tdst::StyleControl;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub n_per_domain: usize,
    pub layout_seed: u64,
    pub train_domains: Vec<String>,
    pub eval_domains: Vec<String>,
    pub domains: BTreeMap<String, DomainSpec>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let mut domains = BTreeMap::new();
        domains.insert(
            "meadow".to_string(),
            DomainSpec {
                hue_shift: 0.0,
                saturation: 1.0,
                illum_gain: 1.0,
                illum_bias: 0.0,
                noise_amp: 0.03,
                noise_scale: 12.0,
                seed: 101,
            },
        );
        domains.insert(
            "canyon".to_string(),
            DomainSpec {
                hue_shift: 0.9,
                saturation: 1.15,
                illum_gain: 0.92,
                illum_bias: 0.04,
                noise_amp: 0.04,
                noise_scale: 10.0,
                seed: 202,
            },
        );
        domains.insert(
            "night".to_string(),
            DomainSpec {
                hue_shift: -0.5,
                saturation: 0.55,
                illum_gain: 0.38,
                illum_bias: -0.03,
                noise_amp: 0.05,
                noise_scale: 8.0,
                seed: 303,
            },
        );
        Self {
            image_size: 64,
            n_per_domain: 40,
            layout_seed: 7,
            train_domains: vec!["meadow".to_string(), "canyon".to_string()],
            eval_domains: vec!["night".to_string()],
            domains,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub d_q: usize,
    pub d_emb: usize,
    pub d_style: usize,
    pub heads: usize,
    pub backbone_channels: [usize; 4],
    pub backbone_seed: u64,
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_queries: 20,
            d_q: 128,
            d_emb: 64,
            d_style: 64,
            heads: 4,
            backbone_channels: [32, 64, 128, 256],
            backbone_seed: 0,
            encoder_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PromptsConfig {
    pub templates: Vec<String>,
    pub conditions: Vec<String>,
}

impl Default for PromptsConfig {
    fn default() -> Self {
        Self {
            templates: default_templates(),
            conditions: default_conditions(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 1e-4,
            weight_decay: 0.05,
            seed: 0,
            eval_interval: 500,
            checkpoint_interval: 500,
        }
    }
}

/// Component toggles spanning the four ablation rows.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub sqb: bool,
    pub tdst: bool,
    pub sso: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            sqb: true,
            tdst: true,
            sso: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub prompts: PromptsConfig,
    pub tdst: StyleControl,
    pub sso: SsoConfig,
    /// Per-layer weights of the style aggregation loss, aligned with the
    /// styled layers.
    pub sa_layer_weights: Vec<f64>,
    pub train: TrainConfig,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            prompts: PromptsConfig::default(),
            tdst: StyleControl::default(),
            sso: SsoConfig::default(),
            sa_layer_weights: vec![0.2, 0.5, 1.0],
            train: TrainConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl RunConfig {
    /// The four-domain setup used for held-out-domain sweeps: two source
    /// domains for training, two unseen domains for evaluation.
    pub fn ablation_default() -> Self {
        let mut cfg = Self::default();
        cfg.dataset.domains.insert(
            "fog".to_string(),
            DomainSpec {
                hue_shift: 0.25,
                saturation: 0.35,
                illum_gain: 0.55,
                illum_bias: 0.38,
                noise_amp: 0.06,
                noise_scale: 16.0,
                seed: 404,
            },
        );
        cfg.dataset.eval_domains = vec!["night".to_string(), "fog".to_string()];
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&raw)
    }

    pub fn from_toml(raw: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(raw).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.image_size % 32 != 0 || self.dataset.image_size == 0 {
            return Err(Error::Config(
                "dataset.image_size must be a positive multiple of 32".into(),
            ));
        }
        if self.dataset.n_per_domain == 0 {
            return Err(Error::Config("dataset.n_per_domain must be positive".into()));
        }
        for name in self
            .dataset
            .train_domains
            .iter()
            .chain(self.dataset.eval_domains.iter())
        {
            if !self.dataset.domains.contains_key(name) {
                return Err(Error::Config(format!(
                    "domain {name:?} is referenced but not defined under [dataset.domains]"
                )));
            }
        }
        if self.dataset.train_domains.is_empty() {
            return Err(Error::Config("at least one training domain is required".into()));
        }
        self.tdst.validate().map_err(|e| Error::Config(e.to_string()))?;
        for &layer in &self.tdst.styled_layers {
            if !(3..=5).contains(&layer) {
                return Err(Error::Config(format!(
                    "styled layer {layer} out of range 3..=5"
                )));
            }
        }
        if self.sa_layer_weights.len() != self.tdst.styled_layers.len() {
            return Err(Error::Config(format!(
                "sa_layer_weights has {} entries for {} styled layers",
                self.sa_layer_weights.len(),
                self.tdst.styled_layers.len()
            )));
        }
        if self.model.d_q % self.model.heads != 0 || self.model.d_emb % self.model.heads != 0 {
            return Err(Error::Config(
                "model.heads must divide both d_q and d_emb".into(),
            ));
        }
        if self.model.num_queries == 0 {
            return Err(Error::Config("model.num_queries must be positive".into()));
        }
        if self.prompts.templates.is_empty() {
            return Err(Error::Config("prompts.templates must be non-empty".into()));
        }
        if self.prompts.conditions.len() < 2 {
            return Err(Error::Config(
                "prompts.conditions needs at least two entries".into(),
            ));
        }
        if self.sso.tau <= 0.0 {
            return Err(Error::Config("sso.tau must be positive".into()));
        }
        if !(self.sso.w_min <= self.sso.w_init && self.sso.w_init <= self.sso.w_max) {
            return Err(Error::Config(
                "sso weight clamp must satisfy w_min <= w_init <= w_max".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.sso.ema_decay) {
            return Err(Error::Config("sso.ema_decay must lie in [0, 1)".into()));
        }
        if self.train.batch_size == 0 || self.train.steps == 0 {
            return Err(Error::Config("train.steps and train.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Domains in manifest order: train first, then eval, then any extras.
    pub fn ordered_domains(&self) -> Vec<(String, DomainSpec)> {
        let mut names: Vec<String> = Vec::new();
        for n in self.dataset.train_domains.iter().chain(&self.dataset.eval_domains) {
            if !names.contains(n) {
                names.push(n.clone());
            }
        }
        for n in self.dataset.domains.keys() {
            if !names.contains(n) {
                names.push(n.clone());
            }
        }
        names
            .into_iter()
            .map(|n| {
                let spec = self.dataset.domains[&n].clone();
                (n, spec)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let toml_text = cfg.to_toml();
        let back = RunConfig::from_toml(&toml_text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let toml_text = "[train]\nsteps = 10\nlearning_rate = 0.1\n";
        let err = RunConfig::from_toml(toml_text);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn missing_domain_definition_names_the_key() {
        let mut cfg = RunConfig::default();
        cfg.dataset.train_domains.push("tundra".to_string());
        let err = cfg.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("tundra"), "error should name the key: {msg}");
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = RunConfig::from_toml("[train]\nsteps = 5\n").unwrap();
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.tdst.alpha, 0.15);
        assert_eq!(cfg.tdst.betas, vec![1.0, 2.0, 4.0]);
        assert_eq!(cfg.sso.lambda, 0.3);
        assert_eq!(cfg.sso.w_init, 1.0);
        assert_eq!(cfg.sa_layer_weights, vec![0.2, 0.5, 1.0]);
    }

    #[test]
    fn ablation_config_has_two_held_out_domains() {
        let cfg = RunConfig::ablation_default();
        cfg.validate().unwrap();
        assert_eq!(cfg.dataset.train_domains.len(), 2);
        assert_eq!(cfg.dataset.eval_domains.len(), 2);
        assert_eq!(cfg.dataset.domains.len(), 4);
    }
}
