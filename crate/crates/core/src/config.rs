//! Plain `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys not consumed
//! by the caller are reported as errors so typos do not pass silently.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pretrain::TrainPlan;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| Error::Config(format!("`{key} = {v}`: {e}"))),
        }
    }

    fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn model_config(&mut self) -> Result<ModelConfig> {
        let mut c = ModelConfig::default();
        self.take_into("n_layers", &mut c.n_layers)?;
        self.take_into("d_model", &mut c.d_model)?;
        self.take_into("n_heads", &mut c.n_heads)?;
        self.take_into("d_ff", &mut c.d_ff)?;
        self.take_into("vocab_size", &mut c.vocab_size)?;
        self.take_into("max_context", &mut c.max_context)?;
        self.take_into("norm_eps", &mut c.norm_eps)?;
        c.validate()?;
        Ok(c)
    }

    pub fn train_plan(&mut self) -> Result<TrainPlan> {
        let mut p = TrainPlan::default();
        self.take_into("steps", &mut p.steps)?;
        self.take_into("batch", &mut p.batch)?;
        self.take_into("ctx_len", &mut p.ctx_len)?;
        self.take_into("lr", &mut p.lr)?;
        self.take_into("min_lr", &mut p.min_lr)?;
        self.take_into("warmup", &mut p.warmup)?;
        self.take_into("weight_decay", &mut p.weight_decay)?;
        self.take_into("clip", &mut p.clip)?;
        self.take_into("val_fraction", &mut p.val_fraction)?;
        self.take_into("seed", &mut p.seed)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_applies_overrides() {
        let mut kv = KeyValues::parse("# model\nd_model = 64\nn_heads=2\n\nsteps = 7\nlr = 1e-3\n").unwrap();
        let m = kv.model_config().unwrap();
        let p = kv.train_plan().unwrap();
        kv.finish().unwrap();
        assert_eq!((m.d_model, m.n_heads, m.n_layers), (64, 2, 4));
        assert_eq!((p.steps, p.lr), (7, 1e-3));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(KeyValues::parse("novalue").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        let mut kv = KeyValues::parse("d_model = x").unwrap();
        assert!(kv.model_config().is_err());
        let mut kv = KeyValues::parse("typo = 1").unwrap();
        kv.model_config().unwrap();
        assert!(kv.finish().is_err());
    }
}
