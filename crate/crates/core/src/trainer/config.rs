//! Training configuration: a TOML file whose keys can be overridden by
//! `section.key=value` assignments (environment variables and flags).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmod::{ClassMode, Scenario};
use crate::matchloss::LossWeights;
use crate::model::ModelConfig;

/// Prefix of environment variables that override configuration keys.
/// `HOI_MODEL__D=16` sets `model.d`; `HOI_SEED=3` sets `seed`.
pub const ENV_PREFIX: &str = "HOI_";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training annotations.
    pub train: PathBuf,
    /// Evaluation annotations; the training set is used when absent.
    pub eval: Option<PathBuf>,
    /// Layout statistics; fitted on the training set when absent.
    pub stats: Option<PathBuf>,
    /// Embedding table; one-hot embeddings when absent.
    pub embeddings: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Optional cap on optimizer steps.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate multiplier of the backbone parameters.
    pub backbone_lr_mult: f64,
    pub weight_decay: f64,
    /// The learning rate is multiplied by `lr_drop_factor` once this fraction
    /// of the total steps has elapsed.
    pub lr_drop_fraction: f64,
    pub lr_drop_factor: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Draw new spatial samples every step instead of once per image.
    pub resample_spatial: bool,
    /// Feed ground-truth pairs to the support generator.
    pub oracle_oa: bool,
    /// Train object boxes of object-less pairs toward the null box.
    pub null_box_training: bool,
    /// Objectness term for queries matched to object-less pairs.
    pub null_objectness: bool,
    /// Training-set mAP is logged every this many epochs (0: only at the end).
    pub eval_every: usize,
    pub eval_scenario: Scenario,
    pub eval_class_mode: ClassMode,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 150,
            max_steps: None,
            batch_size: 4,
            lr: 1e-3,
            backbone_lr_mult: 0.01,
            weight_decay: 1e-4,
            lr_drop_fraction: 0.43,
            lr_drop_factor: 0.1,
            grad_clip: 0.1,
            resample_spatial: true,
            oracle_oa: false,
            null_box_training: false,
            null_objectness: true,
            eval_every: 10,
            eval_scenario: Scenario::Relaxed,
            eval_class_mode: ClassMode::Action,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Parses TOML text, applies `key.path=value` overrides in order, and
    /// resolves relative data paths against `base_dir`.
    pub fn from_toml(text: &str, base_dir: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, raw) in overrides {
            set_path(&mut table, key, raw)?;
        }
        let mut cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(base) = base_dir {
            cfg.data.resolve(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.backbone_lr_mult >= 0.0) {
            return fail("learning rates must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return fail("weight_decay and grad_clip must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.lr_drop_fraction) || !(self.lr_drop_factor > 0.0) {
            return fail("lr_drop_fraction must lie in [0, 1] and lr_drop_factor must be positive");
        }
        self.model.validate()?;
        self.loss.validate()
    }
}

impl DataConfig {
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train);
        for p in [&mut self.eval, &mut self.stats, &mut self.embeddings].into_iter().flatten() {
            fix(p);
        }
    }
}

/// Parses a raw override value as a TOML literal, falling back to a string.
pub fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets a dotted key in a TOML table, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Overrides from environment variables carrying [`ENV_PREFIX`].
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            (!rest.is_empty()).then(|| (rest.to_lowercase().replace("__", "."), v))
        })
        .collect();
    out.sort();
    out
}

/// Parses `key=value` assignments.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got `{s}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sfg::Aggregation;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_toml(&cfg.to_toml(), None, &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.backbone_lr_mult, 0.01);
        assert_eq!(cfg.weight_decay, 1e-4);
    }

    #[test]
    fn overrides_apply_in_order() {
        let text = "seed = 1\n[model]\nd = 16\nheads = 2\n[data]\ntrain = \"train.json\"\n";
        let ov = vec![
            ("model.d".to_string(), "24".to_string()),
            ("model.aggregation".to_string(), "concat".to_string()),
            ("seed".to_string(), "9".to_string()),
            ("oracle_oa".to_string(), "true".to_string()),
            ("model.d".to_string(), "8".to_string()),
        ];
        let cfg = TrainConfig::from_toml(text, Some(Path::new("/base")), &ov).unwrap();
        assert_eq!(cfg.model.d, 8);
        assert_eq!(cfg.model.heads, 2);
        assert_eq!(cfg.model.aggregation, Aggregation::Concat);
        assert_eq!(cfg.seed, 9);
        assert!(cfg.oracle_oa);
        assert_eq!(cfg.data.train, PathBuf::from("/base/train.json"));
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for (text, ov) in [
            ("bogus = 1", vec![]),
            ("[model]\nd = \"wide\"", vec![]),
            ("batch_size = 0", vec![]),
            ("", vec![("seed.x".to_string(), "1".to_string())]),
            ("", vec![("loss.giou".to_string(), "-1".to_string())]),
        ] {
            let err = TrainConfig::from_toml(text, None, &ov).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn env_variables_map_to_keys() {
        let vars = vec![
            ("HOI_MODEL__TOP_K".to_string(), "2".to_string()),
            ("HOI_SEED".to_string(), "5".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
            ("HOI_".to_string(), "x".to_string()),
        ];
        assert_eq!(
            env_overrides(vars),
            vec![("model.top_k".to_string(), "2".to_string()), ("seed".to_string(), "5".to_string())]
        );
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("one-hot"), toml::Value::String("one-hot".into()));
        assert_eq!(parse_assignment("a.b = 1").unwrap(), ("a.b".to_string(), "1".to_string()));
        assert!(parse_assignment("novalue").is_err());
    }
}
