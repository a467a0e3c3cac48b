//! Run configuration: `[grid]`, `[model]`, `[train]` and `[scene]` sections
//! of a TOML file, with `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AugRanges, SceneTemplate};
use crate::model::ModelConfig;
use crate::pillars::GridConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub epochs: u64,
    pub steps_per_epoch: u64,
    /// Frame pairs averaged into one step's loss.
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_frac: f64,
    pub start_div: f64,
    pub final_div: f64,
    pub seed: u64,
    /// Temporal batch length `n`.
    pub temporal_n: usize,
    /// Default frame gap at evaluation.
    pub inference_gap: usize,
    pub eval_seed: u64,
    pub augment: bool,
    pub aug: AugRanges,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 3e-3,
            epochs: 1,
            steps_per_epoch: 200,
            batch_size: 1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_frac: 0.1,
            start_div: 10.0,
            final_div: 1000.0,
            seed: 0,
            temporal_n: 6,
            inference_gap: 3,
            eval_seed: 1234,
            augment: true,
            aug: AugRanges::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "train.epochs, steps_per_epoch and batch_size must be positive".into(),
            ));
        }
        if self.temporal_n < 3 {
            return Err(Error::Config(format!(
                "train.temporal_n must be at least 3, got {}",
                self.temporal_n
            )));
        }
        if !(1..=5).contains(&self.inference_gap) {
            return Err(Error::Config(format!(
                "train.inference_gap must lie in 1..=5, got {}",
                self.inference_gap
            )));
        }
        if !(self.max_lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
            || !(self.weight_decay >= 0.0)
        {
            return Err(Error::Config("train optimizer settings out of range".into()));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0)
            || !(self.start_div > 0.0)
            || !(self.final_div > 0.0)
        {
            return Err(Error::Config("train schedule settings out of range".into()));
        }
        let a = &self.aug;
        if !(0.0..=1.0).contains(&a.flip_prob) || !(a.scale_min > 0.0 && a.scale_min <= a.scale_max) || !(a.yaw_max >= 0.0) {
            return Err(Error::Config("train.aug ranges out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneTemplate,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        if self.scene.frames < self.train.temporal_n {
            return Err(Error::Config(format!(
                "scene.frames = {} is shorter than train.temporal_n = {}",
                self.scene.frames, self.train.temporal_n
            )));
        }
        Ok(())
    }

    /// Parse TOML text, apply `section.key=value` overrides, validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Set `a.b.c = value` in `table`. The value is read as a TOML literal and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!(
            "override key `{key}` must look like section.key"
        )));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_and_overrides_apply() {
        let text = "[model]\nd_model = 32\n[train]\nmax_lr = 1e-3\n";
        let cfg = RunConfig::from_toml_str(
            text,
            &["model.heads=2".into(), "train.aug.flip_prob=0.0".into(), "grid.range_max=[4.0, 4.0, 4.0]".into()],
        )
        .unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.heads, 2);
        assert_eq!(cfg.train.max_lr, 1e-3);
        assert_eq!(cfg.train.aug.flip_prob, 0.0);
        assert_eq!(cfg.grid.range_max, [4.0, 4.0, 4.0]);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for bad in ["[model]\nd_modle = 8\n", "[trian]\n", "[train.aug]\nflip = 1\n"] {
            let e = RunConfig::from_toml_str(bad, &[]).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{bad}: {e}");
        }
        assert!(RunConfig::from_toml_str("", &["model.nope=1".into()]).is_err());
        assert!(RunConfig::from_toml_str("", &["novalue".into()]).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml_str("[model]\nmask_ratio = 1.0\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("[model]\nd_model = 10\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("[train]\ninference_gap = 6\n", &[]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.model.d_model = 16;
        cfg.scene.seed = 99;
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap(), cfg);
    }
}
