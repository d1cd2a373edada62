//! Flat `key = value` run settings.
//!
//! Grammar: one `key = value` per line; blank lines and lines starting with
//! `#` are ignored; keys are the names listed in `KEYS`; a repeated key keeps
//! its last value. Precedence, lowest first: command defaults, the config
//! file, command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use meshvit::{Error, Result};

pub const KEYS: &[&str] = &[
    "preset",
    "width",
    "depth",
    "mlp",
    "heads",
    "patch",
    "image",
    "channels",
    "classes",
    "qk_norm",
    "parallel_block",
    "seed",
    "out",
    "t",
    "k",
    "link_bandwidth",
    "device_flops",
    "bytes_per_float",
    "tokens",
    "shard_threshold",
    "steps",
    "batch",
    "lr",
    "warmup",
    "cooldown",
    "total",
    "wd_head",
    "wd_body",
    "execution",
    "noise",
    "ablate_qk",
    "ablate_lrs",
    "prescale",
    "stride",
    "scope",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn from_pairs(pairs: &[(&str, &str)]) -> Self {
        let mut s = Settings::default();
        for (k, v) in pairs {
            s.values.insert(k.to_string(), v.to_string());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            s.set(k.trim(), v.trim())?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<()> {
        match value {
            Some(v) => self.set(key, &v.to_string()),
            None => Ok(()),
        }
    }

    /// `self` with every key of `over` replacing its own.
    pub fn overlay(mut self, over: &Settings) -> Self {
        for (k, v) in &over.values {
            self.values.insert(k.clone(), v.clone());
        }
        self
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Config(format!("missing `{key}`")))
    }

    pub fn list_f64(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.raw(key).ok_or_else(|| Error::Config(format!("missing `{key}`")))?;
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid number `{p}` in `{key}`")))
            })
            .collect()
    }

    /// Every setting as `key = value`, sorted by key.
    /// Sorted `key = value` lines. The output directory is left out so runs
    /// written to different places produce identical manifests.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.values.iter().filter(|(k, _)| k.as_str() != "out") {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
