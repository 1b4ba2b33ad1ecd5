//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected so that a typo never silently falls back to a default.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::DataKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::KlAnneal;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data_kind: DataKind,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub vocab_path: Option<PathBuf>,
    pub start_token: String,
    pub end_token: String,
    /// Resolved from the data when zero.
    pub frame_width: usize,
    /// Resolved from the vocabulary when zero.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub z_dim: usize,
    pub head_hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub kl_anneal: KlAnneal,
    pub grad_clip_norm: f64,
    pub max_updates: u64,
    pub eval_interval: u64,
    pub eval_iwae_samples: usize,
    pub seed: u64,
    pub max_seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_kind: DataKind::Frames,
            train_path: None,
            valid_path: None,
            vocab_path: None,
            start_token: "<s>".into(),
            end_token: "</s>".into(),
            frame_width: 0,
            vocab_size: 0,
            embed_dim: 16,
            hidden: 32,
            z_dim: 4,
            head_hidden: 32,
            learning_rate: 1e-3,
            batch_size: 16,
            alpha: 0.0025,
            beta: 0.0025,
            kl_anneal: KlAnneal::default(),
            grad_clip_norm: 5.0,
            max_updates: 1000,
            eval_interval: 100,
            eval_iwae_samples: 5,
            seed: 0,
            max_seq_len: 256,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for `{key}`")))
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for `{key}` (expected on/off)"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "data_kind",
        "train_path",
        "valid_path",
        "vocab_path",
        "start_token",
        "end_token",
        "frame_width",
        "vocab_size",
        "embed_dim",
        "hidden",
        "z_dim",
        "head_hidden",
        "learning_rate",
        "batch_size",
        "alpha",
        "beta",
        "kl_anneal",
        "kl_start",
        "kl_increment",
        "kl_cap",
        "grad_clip_norm",
        "max_updates",
        "eval_interval",
        "eval_iwae_samples",
        "seed",
        "max_seq_len",
    ];

    /// Sets one key. Accepts `-` in place of `_` so CLI flag spellings work.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "data_kind" => self.data_kind = value.parse()?,
            "train_path" => self.train_path = opt_path(value),
            "valid_path" => self.valid_path = opt_path(value),
            "vocab_path" => self.vocab_path = opt_path(value),
            "start_token" => self.start_token = value.to_owned(),
            "end_token" => self.end_token = value.to_owned(),
            "frame_width" => self.frame_width = parse(&key, value)?,
            "vocab_size" => self.vocab_size = parse(&key, value)?,
            "embed_dim" => self.embed_dim = parse(&key, value)?,
            "hidden" => self.hidden = parse(&key, value)?,
            "z_dim" => self.z_dim = parse(&key, value)?,
            "head_hidden" => self.head_hidden = parse(&key, value)?,
            "learning_rate" => self.learning_rate = parse(&key, value)?,
            "batch_size" => self.batch_size = parse(&key, value)?,
            "alpha" => self.alpha = parse(&key, value)?,
            "beta" => self.beta = parse(&key, value)?,
            "kl_anneal" => self.kl_anneal.enabled = parse_switch(&key, value)?,
            "kl_start" => self.kl_anneal.start = parse(&key, value)?,
            "kl_increment" => self.kl_anneal.increment = parse(&key, value)?,
            "kl_cap" => self.kl_anneal.cap = parse(&key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = parse(&key, value)?,
            "max_updates" => self.max_updates = parse(&key, value)?,
            "eval_interval" => self.eval_interval = parse(&key, value)?,
            "eval_iwae_samples" => self.eval_iwae_samples = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "max_seq_len" => self.max_seq_len = parse(&key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Reads a config file. Relative data paths are taken relative to the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = Self::from_text(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut c.train_path, &mut c.valid_path, &mut c.vocab_path].into_iter().flatten() {
            if p.is_relative() {
                *p = std::path::absolute(base.join(&*p))
                    .map_err(|e| Error::Data(format!("cannot resolve {}: {e}", p.display())))?;
            }
        }
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let switch = |b: bool| if b { "on" } else { "off" };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data_kind", self.data_kind.to_string());
        kv("train_path", path(&self.train_path));
        kv("valid_path", path(&self.valid_path));
        kv("vocab_path", path(&self.vocab_path));
        kv("start_token", self.start_token.clone());
        kv("end_token", self.end_token.clone());
        kv("frame_width", self.frame_width.to_string());
        kv("vocab_size", self.vocab_size.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("hidden", self.hidden.to_string());
        kv("z_dim", self.z_dim.to_string());
        kv("head_hidden", self.head_hidden.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("kl_anneal", switch(self.kl_anneal.enabled).into());
        kv("kl_start", self.kl_anneal.start.to_string());
        kv("kl_increment", self.kl_anneal.increment.to_string());
        kv("kl_cap", self.kl_anneal.cap.to_string());
        kv("grad_clip_norm", self.grad_clip_norm.to_string());
        kv("max_updates", self.max_updates.to_string());
        kv("eval_interval", self.eval_interval.to_string());
        kv("eval_iwae_samples", self.eval_iwae_samples.to_string());
        kv("seed", self.seed.to_string());
        kv("max_seq_len", self.max_seq_len.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.kl_anneal;
        if !(0.0 <= a.start && a.start <= a.cap && a.cap <= 1.0) {
            return Err(Error::Config(format!(
                "kl_start {} and kl_cap {} must satisfy 0 <= start <= cap <= 1",
                a.start, a.cap
            )));
        }
        if !(a.increment >= 0.0) {
            return Err(Error::Config("kl_increment must be non-negative".into()));
        }
        for (k, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("z_dim", self.z_dim),
            ("head_hidden", self.head_hidden),
            ("batch_size", self.batch_size),
            ("eval_iwae_samples", self.eval_iwae_samples),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be at least 1")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        Ok(())
    }

    /// Model dimensions; `frame_width` / `vocab_size` must already be resolved.
    pub fn model_config(&self, end_id: Option<u32>) -> ModelConfig {
        ModelConfig {
            kind: self.data_kind,
            width: match self.data_kind {
                DataKind::Frames => self.frame_width,
                _ => 1,
            },
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            z_dim: self.z_dim,
            head_hidden: self.head_hidden,
            end_id,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.set("alpha", "0.5").unwrap();
        c.set("kl-anneal", "off").unwrap();
        c.set("train_path", "/tmp/a.bin").unwrap();
        c.set("data_kind", "tokens").unwrap();
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_text("# comment\nalpha = 1\nlearnin_rate = 2\n").unwrap_err();
        assert!(err.to_string().contains("learnin_rate"));
        assert_eq!(err.exit_code(), 2);
        assert!(TrainConfig::from_text("hidden = many").is_err());
        assert!(TrainConfig::from_text("no equals sign").is_err());
    }

    #[test]
    fn schedule_bounds_are_checked() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.kl_anneal.start = 0.9;
        c.kl_anneal.cap = 0.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.kl_anneal.increment = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.hidden = 0;
        assert!(c.validate().is_err());
    }
}
