//! The run configuration: every setting a command needs, stored as a flat
//! `section.key=value` text file.
//!
//! ```text
//! name=default
//! seed=0
//! loss.gamma=2.0
//! network.head_tap_stages=[3,4,5]
//! ```
//!
//! Values are JSON literals except for string settings, which are written
//! bare. Keys not listed here are rejected; missing keys take defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SynthParams;
use crate::error::{Error, Result};
use crate::geometry::AnchorConfig;
use crate::inference::InferParams;
use crate::losses::LossConfig;
use crate::network::NetworkConfig;
use crate::training::{RefineConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset root; empty when the command gets it from elsewhere.
    pub dataset: String,
    /// Tile side and step used by `prepare`.
    pub tile: usize,
    pub step: usize,
    /// Synthetic scenes generated when no dataset is given.
    pub synth_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: String::new(),
            tile: 400,
            step: 200,
            synth_count: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub anchors: AnchorConfig,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub infer: InferParams,
    pub data: DataConfig,
    pub synth: SynthParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "default".into(),
            seed: 0,
            anchors: AnchorConfig::default(),
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            refine: RefineConfig::default(),
            infer: InferParams::default(),
            data: DataConfig::default(),
            synth: SynthParams::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.clone())),
    }
}

fn lookup<'a>(v: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(v, |node, part| node.as_object()?.get(part))
}

fn lookup_mut<'a>(v: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    key.split('.')
        .try_fold(v, |node, part| node.as_object_mut()?.get_mut(part))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\', '\n']) {
            return Err(Error::config(format!("run name `{}` is empty or unsafe", self.name)));
        }
        self.anchors.validate()?;
        self.network.validate()?;
        self.network.check_anchors(&self.anchors)?;
        self.train_config().validate()?;
        self.refine.validate()?;
        self.infer.validate()?;
        self.synth_params().validate()?;
        if self.data.tile < self.network.input_size || self.data.step == 0 {
            return Err(Error::config(format!(
                "data tile {} must be >= the input size {} and step positive",
                self.data.tile, self.network.input_size
            )));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss.clone(),
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            seed: self.seed,
            ..self.refine.clone()
        }
    }

    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    /// Every setting as `(dotted key, JSON value)`, in file order.
    pub fn entries(&self) -> Result<Vec<(String, Value)>> {
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(self)?, &mut out);
        Ok(out)
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        for (k, v) in self.entries()? {
            match v {
                Value::String(text) => s.push_str(&format!("{k}={text}\n")),
                other => s.push_str(&format!("{k}={other}\n")),
            }
        }
        Ok(s)
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let slot = match lookup_mut(&mut tree, key) {
            Some(slot) if !slot.is_object() => slot,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        };
        let raw = raw.trim();
        *slot = if slot.is_string() {
            Value::String(raw.to_string())
        } else {
            let parsed: Value =
                serde_json::from_str(raw).map_err(|e| Error::config(format!("{key}: cannot parse `{raw}`: {e}")))?;
            if std::mem::discriminant(&parsed) != std::mem::discriminant(slot) {
                return Err(Error::config(format!("{key}: `{raw}` has the wrong type")));
            }
            parsed
        };
        *self = serde_json::from_value(tree).map_err(|e| Error::config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Parses config text on top of the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(key.trim(), value)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    /// `default` names the built-in configuration; anything else is a path.
    pub fn load(source: &str) -> Result<Self> {
        if source == "default" {
            return Ok(RunConfig::default());
        }
        let text = fs::read_to_string(source).map_err(|e| Error::io(source, e))?;
        RunConfig::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    /// The value at a dotted key, for display.
    pub fn get(&self, key: &str) -> Result<Value> {
        let tree = serde_json::to_value(self)?;
        lookup(&tree, key)
            .filter(|v| !v.is_object())
            .cloned()
            .ok_or_else(|| Error::config(format!("unknown config key `{key}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.loss.gamma = 1.75;
        cfg.name = "trial one".into();
        cfg.network.head_tap_stages = vec![2, 4, 5];
        cfg.train.mode = crate::training::TrainMode::SegmentationOnly;
        let text = cfg.to_text().unwrap();
        assert!(text.contains("loss.gamma=1.75\n"));
        assert!(text.contains("train.mode=segmentation-only\n"));
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_mistyped_keys_rejected() {
        assert!(RunConfig::parse("loss.gama=2").is_err());
        assert!(RunConfig::parse("loss=2").is_err());
        assert!(RunConfig::parse("loss.gamma=two").is_err());
        assert!(RunConfig::parse("train.batch_size=-1").is_err());
        assert!(RunConfig::parse("train.seed=3").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("train.mode=both").is_err());
    }

    #[test]
    fn comments_and_partial_files() {
        let cfg = RunConfig::parse("# hi\n\nseed=5\ntrain.steps=10\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.train_config().seed, 5);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.loss, LossConfig::default());
    }

    proptest! {
        #[test]
        fn floats_survive_text(g in 0.0f64..10.0, lr in 1e-8f64..1.0) {
            let mut cfg = RunConfig::default();
            cfg.loss.gamma = g;
            cfg.train.det_lr = lr;
            let back = RunConfig::parse(&cfg.to_text().unwrap()).unwrap();
            prop_assert_eq!(back.loss.gamma.to_bits(), g.to_bits());
            prop_assert_eq!(back.train.det_lr.to_bits(), lr.to_bits());
        }
    }
}
