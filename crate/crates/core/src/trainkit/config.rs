use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augmentor::{HeadKind, JointConfig};
use crate::error::{Error, Result};
use crate::gazegen::{BridgeMode, GeneratorConfig};
use crate::textenc::TextEncoderConfig;

/// Every knob of a training run. Settable from a flat `key = value` file;
/// field names are the keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub tau: f64,
    /// Scanpaths per instance, at training and at prediction time.
    pub n_scanpaths_train: usize,
    pub freeze_generator: bool,
    pub pretrained_generator: bool,
    pub seed: u64,
    pub weight_decay: f64,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub l_max: usize,
    pub bridge: BridgeMode,
    pub hard_eval: bool,
    /// Text-only control run.
    pub baseline: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 20,
            patience: 3,
            tau: 0.5,
            n_scanpaths_train: 3,
            freeze_generator: false,
            pretrained_generator: true,
            seed: 42,
            weight_decay: 0.01,
            d_model: 64,
            layers: 2,
            heads: 4,
            max_len: 64,
            l_max: 8,
            bridge: BridgeMode::StraightThrough,
            hard_eval: true,
            baseline: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if self.n_scanpaths_train == 0 {
            return bad("n_scanpaths_train must be >= 1".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0".into());
        }
        self.text_config(2).validate()?;
        self.generator_config(2).validate()
    }

    /// Set one field from its textual value. The value is parsed according
    /// to the current type of the field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut map = match serde_json::to_value(&*self)? {
            Value::Object(m) => m,
            _ => unreachable!(),
        };
        let slot = map
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let parse_err =
            |what: &str| Error::Config(format!("{key}: expected {what}, got {value:?}"));
        *slot = match slot {
            Value::Bool(_) => Value::Bool(value.parse().map_err(|_| parse_err("true or false"))?),
            Value::Number(n) if n.is_u64() => {
                Value::from(value.parse::<u64>().map_err(|_| parse_err("an integer"))?)
            }
            Value::Number(_) => {
                Value::from(value.parse::<f64>().map_err(|_| parse_err("a number"))?)
            }
            _ => Value::String(value.to_string()),
        };
        *self = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Apply a `key = value` file over `self`. Blank lines and `#` comments
    /// are ignored.
    pub fn apply_kv(&mut self, path: &str, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.into(),
                line: i + 1,
                msg: "expected key = value".into(),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: path.into(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_kv(path: &str, text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(path, text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        let Value::Object(map) = serde_json::to_value(self).unwrap() else {
            unreachable!()
        };
        map.iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k} = {s}\n"),
                v => format!("{k} = {v}\n"),
            })
            .collect()
    }

    pub fn text_config(&self, vocab_size: usize) -> TextEncoderConfig {
        let mut t = TextEncoderConfig::new(vocab_size, self.d_model);
        t.layers = self.layers;
        t.heads = self.heads;
        t.max_len = self.max_len;
        t
    }

    pub fn generator_config(&self, vocab_size: usize) -> GeneratorConfig {
        let mut g = GeneratorConfig::new(self.text_config(vocab_size));
        g.l_max = self.l_max;
        g
    }

    pub fn joint_config(&self, vocab_size: usize, head: HeadKind) -> JointConfig {
        let mut j = JointConfig::new(vocab_size, self.d_model, head);
        j.text = self.text_config(vocab_size);
        j.generator = self.generator_config(vocab_size);
        j.gumbel.temperature = self.tau;
        j.gumbel.mode = self.bridge;
        j.gumbel.hard_eval = self.hard_eval;
        j.baseline = self.baseline;
        j
    }
}
