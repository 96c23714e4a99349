//! Experiment configuration: one TOML file describes the environment, the
//! reward, the data recipe, the trainer, and the evaluation protocol.
//!
//! Every stochastic stage carries its own seed. `parse(emit(config))` is the
//! identity, and resolved configs are echoed into the output directory so
//! runs are self-describing.

use serde::{Deserialize, Serialize};

use preflab_core::mixtures::{BudgetMode, MixtureSpec};
use preflab_core::reward::{ExploitBonus, LengthPenalty, RewardSpec};
use preflab_core::types::LanguageId;

/// Error carrying the name of the offending config field.
#[derive(Debug, thiserror::Error)]
#[error("config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: &'static str,
    pub message: String,
}

fn bad(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError { field, message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub num_languages: u16,
    pub vocab_size: u32,
    pub max_len: usize,
    pub universal_fraction: f64,
    pub seed: u64,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self { num_languages: 10, vocab_size: 64, max_len: 8, universal_fraction: 0.5, seed: 11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub in_language_weight: f64,
    pub marker_penalty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_penalty: Option<LengthPenalty>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploit: Option<ExploitBonus>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        let spec = RewardSpec::default();
        Self {
            in_language_weight: spec.in_language_weight,
            marker_penalty: spec.marker_penalty,
            length_penalty: None,
            exploit: None,
        }
    }
}

impl RewardConfig {
    pub fn to_spec(&self) -> RewardSpec {
        RewardSpec {
            in_language_weight: self.in_language_weight,
            marker_penalty: self.marker_penalty,
            length_penalty: self.length_penalty,
            exploit: self.exploit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub prompt_len: usize,
    pub completion_len: usize,
    pub tie_epsilon: f64,
    pub seed: u64,
    /// Fixed marker rate for the translated channel. Exactly one of this and
    /// `calibrate_to` must be set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marker_rate: Option<f64>,
    /// Calibrate the marker rate to this translated-rejected fraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrate_to: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            prompt_len: 4,
            completion_len: 8,
            tie_epsilon: 1e-6,
            seed: 22,
            marker_rate: None,
            calibrate_to: Some(0.91),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    /// Named preset: `en-1`, `ml-5`, `ml-all-fixed`, `ml-all-per-lang`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Explicit language list (alternative to `preset`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub languages: Option<Vec<u16>>,
    /// Budget mode for explicit lists: `fixed_total` or `per_language`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// Total budget for fixed-total mixtures.
    pub total: usize,
    /// Per-language budget for per-language mixtures.
    pub per_language: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self { preset: Some("en-1".to_string()), languages: None, mode: None, total: 500, per_language: 230 }
    }
}

impl MixtureConfig {
    /// Resolve to a concrete mixture over a `K`-language registry.
    pub fn resolve(&self, num_languages: u16) -> Result<MixtureSpec, ConfigError> {
        let all: Vec<LanguageId> = (0..num_languages).map(LanguageId).collect();
        let build = |name: &str, languages: Vec<LanguageId>, mode: BudgetMode| {
            MixtureSpec::new(name, languages, mode)
                .map_err(|e| bad("mixture", e.to_string()))
        };
        match (&self.preset, &self.languages) {
            (Some(preset), None) => match preset.as_str() {
                "en-1" => build("en-1", vec![LanguageId(0)], BudgetMode::FixedTotal(self.total)),
                "ml-5" => {
                    if num_languages < 5 {
                        return Err(bad(
                            "mixture.preset",
                            format!("ml-5 needs at least 5 languages, environment has {num_languages}"),
                        ));
                    }
                    build("ml-5", all[..5].to_vec(), BudgetMode::FixedTotal(self.total))
                }
                "ml-all-fixed" => build("ml-all-fixed", all, BudgetMode::FixedTotal(self.total)),
                "ml-all-per-lang" => {
                    build("ml-all-per-lang", all, BudgetMode::PerLanguage(self.per_language))
                }
                other => Err(bad("mixture.preset", format!("unknown preset {other:?}"))),
            },
            (None, Some(list)) => {
                let languages: Vec<LanguageId> = list.iter().map(|&l| LanguageId(l)).collect();
                let mode = match self.mode.as_deref() {
                    Some("fixed_total") | None => BudgetMode::FixedTotal(self.total),
                    Some("per_language") => BudgetMode::PerLanguage(self.per_language),
                    Some(other) => {
                        return Err(bad("mixture.mode", format!("unknown mode {other:?}")))
                    }
                };
                build("custom", languages, mode)
            }
            (Some(_), Some(_)) => {
                Err(bad("mixture", "set either `preset` or `languages`, not both"))
            }
            (None, None) => Err(bad("mixture", "one of `preset` or `languages` is required")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainerKind {
    Dpo,
    Rloo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub kind: TrainerKind,
    #[serde(default)]
    pub dpo: preflab_core::dpo::DpoConfig,
    #[serde(default)]
    pub rloo: preflab_core::rloo::RlooConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            kind: TrainerKind::Dpo,
            dpo: preflab_core::dpo::DpoConfig { seed: 33, ..Default::default() },
            rloo: preflab_core::rloo::RlooConfig { seed: 33, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub prompts_per_language: usize,
    pub tie_epsilon: f64,
    pub temperature: f64,
    pub seed: u64,
    pub position_seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            prompts_per_language: 200,
            tie_epsilon: 1e-6,
            temperature: 0.75,
            seed: 44,
            position_seed: 45,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    /// Keep every Nth per-epoch snapshot (the final one is always kept).
    pub checkpoint_every_epochs: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "runs/default".to_string(), checkpoint_every_epochs: 1 }
    }
}

/// The whole experiment description.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub environment: EnvironmentConfig,
    pub reward: RewardConfig,
    pub data: DataConfig,
    pub mixture: MixtureConfig,
    pub trainer: TrainerConfig,
    pub evaluation: EvaluationConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| bad("(toml)", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn emit(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let env = &self.environment;
        if env.num_languages == 0 {
            return Err(bad("environment.num_languages", "must be at least 1"));
        }
        if env.vocab_size < 2 {
            return Err(bad("environment.vocab_size", "must be at least 2"));
        }
        if env.max_len == 0 {
            return Err(bad("environment.max_len", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&env.universal_fraction) {
            return Err(bad("environment.universal_fraction", "must lie in [0, 1]"));
        }
        if self.reward.marker_penalty < 0.0 {
            return Err(bad("reward.marker_penalty", "must be non-negative"));
        }
        if self.data.prompt_len == 0 || self.data.prompt_len > env.max_len {
            return Err(bad("data.prompt_len", format!("must lie in 1..={}", env.max_len)));
        }
        if self.data.completion_len == 0 || self.data.completion_len > env.max_len {
            return Err(bad("data.completion_len", format!("must lie in 1..={}", env.max_len)));
        }
        if self.data.tie_epsilon < 0.0 {
            return Err(bad("data.tie_epsilon", "must be non-negative"));
        }
        match (self.data.marker_rate, self.data.calibrate_to) {
            (Some(rate), None) => {
                if !(0.0..=1.0).contains(&rate) {
                    return Err(bad("data.marker_rate", "must lie in [0, 1]"));
                }
            }
            (None, Some(target)) => {
                if !(0.0 < target && target < 1.0) {
                    return Err(bad("data.calibrate_to", "must lie in (0, 1)"));
                }
            }
            (Some(_), Some(_)) => {
                return Err(bad("data", "set either `marker_rate` or `calibrate_to`, not both"))
            }
            (None, None) => {
                return Err(bad("data", "one of `marker_rate` or `calibrate_to` is required"))
            }
        }
        self.mixture.resolve(env.num_languages)?;
        self.trainer.dpo.validate().map_err(|e| bad("trainer.dpo", e.to_string()))?;
        self.trainer.rloo.validate().map_err(|e| bad("trainer.rloo", e.to_string()))?;
        if self.evaluation.prompts_per_language == 0 {
            return Err(bad("evaluation.prompts_per_language", "must be at least 1"));
        }
        if !(self.evaluation.temperature > 0.0) {
            return Err(bad("evaluation.temperature", "must be positive"));
        }
        if self.output.checkpoint_every_epochs == 0 {
            return Err(bad("output.checkpoint_every_epochs", "must be at least 1"));
        }
        Ok(())
    }

    /// Re-derive every stage seed from one master seed (the `--seed` flag).
    pub fn override_seed(&mut self, master: u64) {
        use preflab_core::seed::derive;
        self.environment.seed = derive(master, &[1]);
        self.data.seed = derive(master, &[2]);
        self.trainer.dpo.seed = derive(master, &[3]);
        self.trainer.rloo.seed = derive(master, &[3]);
        self.evaluation.seed = derive(master, &[4]);
        self.evaluation.position_seed = derive(master, &[5]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let config = ExperimentConfig::default();
        let text = config.emit();
        let parsed = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(parsed, config);
        assert_eq!(parsed.emit(), text);
    }

    #[test]
    fn mixture_presets_resolve() {
        let m = MixtureConfig::default();
        let spec = m.resolve(10).unwrap();
        assert_eq!(spec.name, "en-1");
        assert_eq!(spec.total(), 500);
        let ml5 = MixtureConfig { preset: Some("ml-5".into()), ..Default::default() };
        assert_eq!(ml5.resolve(10).unwrap().languages.len(), 5);
        assert!(ml5.resolve(3).is_err());
        let per = MixtureConfig { preset: Some("ml-all-per-lang".into()), ..Default::default() };
        assert_eq!(per.resolve(10).unwrap().total(), 2300);
        let unknown = MixtureConfig { preset: Some("nope".into()), ..Default::default() };
        let err = unknown.resolve(10).unwrap_err();
        assert_eq!(err.field, "mixture.preset");
    }

    #[test]
    fn validation_names_the_offending_field() {
        let mut config = ExperimentConfig::default();
        config.data.prompt_len = 99;
        let err = config.validate().unwrap_err();
        assert_eq!(err.field, "data.prompt_len");

        let mut config = ExperimentConfig::default();
        config.data.marker_rate = Some(0.3);
        let err = config.validate().unwrap_err();
        assert_eq!(err.field, "data");
    }

    #[test]
    fn seed_override_changes_every_stage_seed() {
        let mut a = ExperimentConfig::default();
        let before = a.clone();
        a.override_seed(777);
        assert_ne!(a.environment.seed, before.environment.seed);
        assert_ne!(a.data.seed, before.data.seed);
        assert_ne!(a.evaluation.seed, before.evaluation.seed);
        let mut b = ExperimentConfig::default();
        b.override_seed(777);
        assert_eq!(a, b);
    }
}
