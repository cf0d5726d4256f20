//! Experiment configuration: TOML parsing with unknown-key rejection,
//! validation, round-trip emission and sweep overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bound::{OracleConfig, DEFAULT_DELTA};
use crate::error::{Result, SuanError};
use crate::eval::DEFAULT_THRESHOLD;
use crate::scenario::ScenarioConfig;
use crate::trainer::TrainConfig;

/// Optional overrides for the bound inputs; anything left unset is
/// estimated from the trained model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vc_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Per-domain sample count `m`; defaults to the batch size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_risk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical_divergence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub oracle: OracleConfig,
}

impl BoundSettings {
    pub fn delta(&self) -> f64 {
        self.delta.unwrap_or(DEFAULT_DELTA)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Dotted field name, e.g. `scenario.num_target_private`.
    pub parameter: String,
    pub values: Vec<f64>,
    #[serde(default = "default_sweep_seeds")]
    pub seeds: Vec<u64>,
}

fn default_sweep_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Seeds data generation, initialization and batching.
    pub seed: u64,
    pub eval_threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub bound: BoundSettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            eval_threshold: DEFAULT_THRESHOLD,
            output_dir: None,
            scenario: ScenarioConfig::default(),
            train: TrainConfig::default(),
            bound: BoundSettings::default(),
            sweep: None,
        }
    }
}

/// Numeric fields a sweep may vary.
pub const SWEEP_PARAMETERS: &[&str] = &[
    "seed",
    "eval_threshold",
    "scenario.feature_dim",
    "scenario.num_common",
    "scenario.num_source_private",
    "scenario.num_target_private",
    "scenario.source_samples_per_class",
    "scenario.target_samples_per_class",
    "scenario.class_separation",
    "scenario.rotation_deg",
    "scenario.noise_scale",
    "train.max_steps",
    "train.epsilon",
    "train.learning_rate",
    "train.batch_size",
    "train.w0",
    "train.domain_hidden",
];

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

fn parse_error(text: &str, err: toml::de::Error) -> SuanError {
    let message = err.message().to_string();
    if let Some(rest) = message.strip_prefix("unknown field `") {
        if let Some(key) = rest.split('`').next() {
            return SuanError::Validation {
                key: key.to_string(),
                message: "unknown key".into(),
            };
        }
    }
    let (line, column) = err.span().map_or((1, 1), |s| line_col(text, s.start));
    SuanError::Parse { line, column, message }
}

/// First key of `input` that has no counterpart in `known`, as a dotted path.
fn first_unknown_key(input: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (key, value) in input {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (value, known.get(key)) {
            (_, None) => return Some(path),
            (toml::Value::Table(inner), Some(toml::Value::Table(k))) => {
                if let Some(found) = first_unknown_key(inner, k, &path) {
                    return Some(found);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parses a TOML document. Missing keys take their defaults; unknown keys
/// are rejected with a validation error naming the dotted key.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, e))?;
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| parse_error(text, e))?;
    // Every key that was read is written back, so anything missing from the
    // re-serialized form was ignored.
    let known: toml::Table = toml::Table::try_from(&config).map_err(|e| SuanError::Serialize(e.to_string()))?;
    if let Some(key) = first_unknown_key(&table, &known, "") {
        return Err(SuanError::Validation {
            key,
            message: "unknown key".into(),
        });
    }
    let seed = config.seed;
    let config = config.with_seed(seed);
    config.validate()?;
    Ok(config)
}

/// TOML text that parses back to an identical config.
pub fn emit_config(config: &ExperimentConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| SuanError::Serialize(e.to_string()))
}

impl ExperimentConfig {
    /// Sets the top-level seed and propagates it to the sub-configs.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.scenario.seed = seed;
        self.train.seed = seed;
        self.bound.oracle.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.eval_threshold) {
            return Err(SuanError::Validation {
                key: "eval_threshold".into(),
                message: format!("{} is outside [0, 1]", self.eval_threshold),
            });
        }
        if let Some(d) = self.bound.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(SuanError::Validation {
                    key: "bound.delta".into(),
                    message: format!("{d} is outside (0, 1)"),
                });
            }
        }
        if self.bound.vc_dim == Some(0) {
            return Err(SuanError::Validation {
                key: "bound.vc_dim".into(),
                message: "must be at least 1".into(),
            });
        }
        if let Some(sweep) = &self.sweep {
            if !SWEEP_PARAMETERS.contains(&sweep.parameter.as_str()) {
                return Err(SuanError::Validation {
                    key: "sweep.parameter".into(),
                    message: format!("`{}` is not a sweepable field", sweep.parameter),
                });
            }
            if sweep.values.is_empty() || sweep.seeds.is_empty() {
                return Err(SuanError::Validation {
                    key: "sweep".into(),
                    message: "values and seeds must be nonempty".into(),
                });
            }
            for &v in &sweep.values {
                self.clone().with_override(&sweep.parameter, v)?;
            }
        }
        Ok(())
    }

    /// Copy with one numeric field replaced, validated.
    pub fn with_override(mut self, parameter: &str, value: f64) -> Result<Self> {
        let as_count = || -> Result<usize> {
            if value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(SuanError::Validation {
                    key: parameter.into(),
                    message: format!("{value} is not a nonnegative integer"),
                })
            }
        };
        match parameter {
            "seed" => return Ok(self.with_seed(as_count()? as u64)),
            "eval_threshold" => self.eval_threshold = value,
            "scenario.feature_dim" => self.scenario.feature_dim = as_count()?,
            "scenario.num_common" => self.scenario.num_common = as_count()?,
            "scenario.num_source_private" => self.scenario.num_source_private = as_count()?,
            "scenario.num_target_private" => self.scenario.num_target_private = as_count()?,
            "scenario.source_samples_per_class" => self.scenario.source_samples_per_class = as_count()?,
            "scenario.target_samples_per_class" => self.scenario.target_samples_per_class = as_count()?,
            "scenario.class_separation" => self.scenario.class_separation = value,
            "scenario.rotation_deg" => self.scenario.rotation_deg = value,
            "scenario.noise_scale" => self.scenario.noise_scale = value,
            "train.max_steps" => self.train.max_steps = as_count()?,
            "train.epsilon" => self.train.epsilon = value,
            "train.learning_rate" => self.train.learning_rate = value,
            "train.batch_size" => self.train.batch_size = as_count()?,
            "train.w0" => self.train.w0 = Some(u8::try_from(as_count()?).unwrap_or(u8::MAX)),
            "train.domain_hidden" => self.train.domain_hidden = as_count()?,
            other => {
                return Err(SuanError::Validation {
                    key: "sweep.parameter".into(),
                    message: format!("`{other}` is not a sweepable field"),
                })
            }
        }
        Self { sweep: None, ..self.clone() }.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{GrlSchedule, Mode};

    #[test]
    fn empty_document_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.max_steps, 2000);
        assert_eq!(c.train.epsilon, 0.1);
        assert_eq!(c.eval_threshold, 0.5);
        assert_eq!(c.scenario.num_common, 4);
        assert_eq!(c.scenario.num_source_private, 2);
        assert_eq!(c.scenario.num_target_private, 3);
    }

    #[test]
    fn w0_two_rejected() {
        let err = parse_config("[train]\nw0 = 2\n").unwrap_err();
        assert!(matches!(err, SuanError::Validation { ref key, .. } if key == "train.w0"), "{err}");
    }

    #[test]
    fn unknown_keys_named() {
        let err = parse_config("[scenario]\nnum_commons = 3\n").unwrap_err();
        assert!(matches!(err, SuanError::Validation { ref key, .. } if key == "scenario.num_commons"), "{err}");
        let err = parse_config("bogus = 1\n").unwrap_err();
        assert!(matches!(err, SuanError::Validation { ref key, .. } if key == "bogus"), "{err}");
        let err = parse_config("[train.grl]\nkind = \"constant\"\nlambda = 1.0\nextra = 2\n").unwrap_err();
        assert!(matches!(err, SuanError::Validation { ref key, .. } if key == "extra"), "{err}");
    }

    #[test]
    fn malformed_text_reports_line() {
        let err = parse_config("seed = 1\n[train\nmax_steps = 3\n").unwrap_err();
        match err {
            SuanError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::default().with_seed(7);
        c.train.mode = Mode::UanWeighting;
        c.train.w0 = Some(0);
        c.train.grl = GrlSchedule::Ramp { lambda: 0.5 };
        c.scenario.translation = vec![0.5, -0.25];
        c.bound.vc_dim = Some(4);
        c.sweep = Some(SweepConfig {
            parameter: "scenario.num_target_private".into(),
            values: vec![0.0, 2.0, 4.0, 6.0],
            seeds: vec![0, 1],
        });
        let text = emit_config(&c).unwrap();
        assert_eq!(parse_config(&text).unwrap(), c);
    }

    #[test]
    fn seed_propagates() {
        let c = parse_config("seed = 11\n").unwrap();
        assert_eq!((c.scenario.seed, c.train.seed, c.bound.oracle.seed), (11, 11, 11));
    }

    #[test]
    fn overrides() {
        let c = ExperimentConfig::default();
        assert_eq!(c.clone().with_override("scenario.num_target_private", 6.0).unwrap().scenario.num_target_private, 6);
        assert!(c.clone().with_override("scenario.num_target_private", 1.5).is_err());
        assert!(c.clone().with_override("train.nothing", 1.0).is_err());
        assert!(c.clone().with_override("train.w0", 2.0).is_err());
        let err = parse_config("[sweep]\nparameter = \"scenario.nope\"\nvalues = [1.0]\n").unwrap_err();
        assert!(matches!(err, SuanError::Validation { .. }));
    }
}
