use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::assemblies::NetworkSpec;
use crate::error::{Error, Result};
use crate::tasks::TaskSpec;

use super::optim::{RmsPropConfig, DEFAULT_CLIP};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "MGMEM_SEED";

fn default_clip() -> f64 {
    DEFAULT_CLIP
}
fn default_truncation() -> usize {
    128
}
fn default_eval_count() -> usize {
    100
}
fn default_eval_seed() -> u64 {
    0x5eed_0e7a
}

/// Learning rate as a function of the step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `optimizer.lr` down to `final_lr` over the run's `steps`.
    Cosine { final_lr: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskSpec,
    pub network: NetworkSpec,
    pub seed: u64,
    pub batch_size: usize,
    pub steps: u64,
    #[serde(default)]
    pub optimizer: RmsPropConfig,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
    /// Held-out evaluation every this many steps (0 = only at the end).
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_eval_count")]
    pub eval_count: usize,
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
    /// Checkpoint every this many steps (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    /// Learning rate for the update that takes the run from `step` to `step + 1`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let lr = self.optimizer.lr;
        match self.lr_schedule {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine { final_lr } => {
                let frac = if self.steps == 0 { 1.0 } else { (step as f64 / self.steps as f64).min(1.0) };
                final_lr + 0.5 * (lr - final_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.network.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if self.truncation == 0 {
            return Err(Error::Invalid("truncation length must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Invalid("clip norm must be positive".into()));
        }
        if let LrSchedule::Cosine { final_lr } = self.lr_schedule {
            if !(final_lr >= 0.0 && final_lr <= self.optimizer.lr) {
                return Err(Error::Invalid(format!("final learning rate {final_lr} must lie in [0, lr]")));
            }
        }
        super::data::check_compat(&self.task, &self.network, self.truncation)
    }

    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let env = std::env::var(SEED_ENV).ok();
        Self::from_json_with_env(text, overrides, env.as_deref())
    }

    /// As [`from_json`](Self::from_json) with the environment seed passed in.
    pub fn from_json_with_env(text: &str, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            set_path(&mut doc, "seed", Value::from(seed))?;
        }
        let cfg: TrainConfig = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, falling back to a
/// plain string.
pub fn apply_override(doc: &mut Value, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Invalid(format!("override {item:?} is not of the form path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(doc, path.trim(), value)
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    if path.is_empty() {
        return Err(Error::Invalid("empty override path".into()));
    }
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let k: usize = part
                    .parse()
                    .map_err(|_| Error::Invalid(format!("{path}: {part:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(k)
                    .ok_or_else(|| Error::Invalid(format!("{path}: index {k} out of {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Invalid(format!("{path}: {part:?} is inside a scalar"))),
        };
    }
    unreachable!("loop returns on the last component")
}

#[cfg(test)]
mod tests {
    use super::*;

    const SORT: &str = r#"{
      "task": {"id": "sort", "length": 3, "dim": 2},
      "network": {"pattern": "encoder_decoder",
        "encoder": {"input": {"rows": 2, "cols": 2, "channels": 3},
                    "layers": [{"kind": "lstm", "levels": [{"rows": 2, "cols": 2, "channels": 4}]}]},
        "decoder": {"input": {"rows": 2, "cols": 2, "channels": 1},
                    "layers": [{"kind": "lstm", "levels": [{"rows": 2, "cols": 2, "channels": 4}]}],
                    "head": {"level": 0, "kind": "vector", "outputs": 2}}},
      "seed": 5, "batch_size": 2, "steps": 10, "out_dir": "runs/x"
    }"#;

    #[test]
    fn defaults_and_overrides() {
        let c = TrainConfig::from_json_with_env(SORT, &[], None).unwrap();
        assert_eq!(c.optimizer, RmsPropConfig::default());
        assert_eq!(c.truncation, 128);
        assert_eq!(c.clip_norm, 10.0);
        let c = TrainConfig::from_json_with_env(
            SORT,
            &["steps=3".into(), "optimizer.lr=0.01".into(), "out_dir=elsewhere".into()],
            None,
        )
        .unwrap();
        assert_eq!(c.steps, 3);
        assert_eq!(c.optimizer.lr, 0.01);
        assert_eq!(c.out_dir, PathBuf::from("elsewhere"));
        let c = TrainConfig::from_json_with_env(
            SORT,
            &[
                "network.encoder.layers.0.levels.0.channels=6".into(),
                "network.decoder.layers.0.levels.0.channels=6".into(),
            ],
            None,
        )
        .unwrap();
        match c.network {
            NetworkSpec::EncoderDecoder { encoder, .. } => {
                assert_eq!(encoder.layers[0].levels.level(0).channels, 6)
            }
            _ => panic!(),
        }
    }

    #[test]
    fn env_seed_wins() {
        let c = TrainConfig::from_json_with_env(SORT, &["seed=9".into()], Some("77")).unwrap();
        assert_eq!(c.seed, 77);
        assert!(TrainConfig::from_json_with_env(SORT, &[], Some("x")).is_err());
    }

    #[test]
    fn bad_overrides_and_configs() {
        assert!(TrainConfig::from_json_with_env(SORT, &["steps".into()], None).is_err());
        assert!(TrainConfig::from_json_with_env(SORT, &["seed.x=1".into()], None).is_err());
        assert!(TrainConfig::from_json_with_env(SORT, &["batch_size=0".into()], None).is_err());
        assert!(TrainConfig::from_json_with_env(SORT, &["bogus=1".into()], None).is_err());
        // head width must match the vector dimension
        assert!(TrainConfig::from_json_with_env(SORT, &["task.dim=3".into()], None).is_err());
        // the whole sequence must fit in one unroll
        assert!(TrainConfig::from_json_with_env(SORT, &["truncation=5".into()], None).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints_and_monotone() {
        let c = TrainConfig::from_json_with_env(
            SORT,
            &["optimizer.lr=0.01".into(), r#"lr_schedule={"kind":"cosine","final_lr":0.001}"#.into()],
            None,
        )
        .unwrap();
        assert!((c.lr_at(0) - 0.01).abs() < 1e-15);
        assert!((c.lr_at(5) - 0.0055).abs() < 1e-15);
        assert!((c.lr_at(10) - 0.001).abs() < 1e-15);
        assert_eq!(c.lr_at(50), c.lr_at(10));
        assert!((0..10).all(|k| c.lr_at(k + 1) <= c.lr_at(k)));
        let flat = TrainConfig::from_json_with_env(SORT, &[], None).unwrap();
        assert!((0..12).all(|k| flat.lr_at(k) == flat.optimizer.lr));
        let bad = r#"lr_schedule={"kind":"cosine","final_lr":1.0}"#;
        assert!(TrainConfig::from_json_with_env(SORT, &[bad.into()], None).is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = TrainConfig::from_json_with_env(SORT, &[], None).unwrap();
        let back = TrainConfig::from_json_with_env(&c.to_json(), &[], None).unwrap();
        assert_eq!(c, back);
    }
}
