//! Experiment configuration: defaults, key=value config files, validation.
//!
//! Config files are flat `key = value` lines with `#` comments. Every CLI
//! flag overrides its file counterpart, and the effective configuration is
//! echoed to a sidecar file next to the metrics so a run can be reproduced
//! exactly from its outputs.

use crate::error::{Error, Result};
use crate::nn::Nonlinearity;
use crate::optim::LrSchedule;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub nonlinearity: Nonlinearity,
    pub bn: bool,
    pub lr: f64,
    pub momentum: f64,
    /// 1.0 means a constant learning rate.
    pub lr_decay_factor: f64,
    pub lr_decay_period: usize,
    pub eps: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Hidden block whose pre-nonlinearity input is tracked (0-based).
    pub probe_layer: usize,
    /// Unit within that block.
    pub probe_unit: usize,
    /// Mini-batches used to estimate population statistics when freezing.
    pub freeze_batches: usize,
    /// Threshold pixels to {0, 1} before training.
    pub binarize: bool,
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 50_000,
            batch_size: 60,
            hidden: vec![100, 100, 100],
            nonlinearity: Nonlinearity::Sigmoid,
            bn: true,
            lr: 0.1,
            momentum: 0.9,
            lr_decay_factor: 1.0,
            lr_decay_period: 1000,
            eps: 1e-5,
            seed: 1,
            eval_every: 500,
            probe_layer: 2,
            probe_unit: 0,
            freeze_batches: 100,
            binarize: true,
            init_std: 0.1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("config key '{key}': cannot parse '{value}'")))
}

pub fn parse_nonlinearity(value: &str) -> Result<Nonlinearity> {
    match value.trim() {
        "sigmoid" => Ok(Nonlinearity::Sigmoid),
        "relu" => Ok(Nonlinearity::Relu),
        other => Err(Error::Config(format!(
            "nonlinearity must be 'sigmoid' or 'relu', got '{other}'"
        ))),
    }
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!(
            "config key '{key}': expected on/off, got '{other}'"
        ))),
    }
}

/// Parses "LAYER:UNIT" into probe indices.
pub fn parse_probe(value: &str) -> Result<(usize, usize)> {
    let (layer, unit) = value
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("probe must be LAYER:UNIT, got '{value}'")))?;
    Ok((parse("probe layer", layer)?, parse("probe unit", unit)?))
}

fn parse_hidden(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse("hidden", s))
        .collect::<Result<Vec<usize>>>()
}

impl TrainConfig {
    /// Applies one key=value pair. Unknown keys are config errors so typos
    /// fail loudly instead of silently training the wrong thing.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "hidden" => self.hidden = parse_hidden(value)?,
            "nonlinearity" => self.nonlinearity = parse_nonlinearity(value)?,
            "bn" => self.bn = parse_bool(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, value)?,
            "lr_decay_period" => self.lr_decay_period = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "probe" => {
                let (layer, unit) = parse_probe(value)?;
                self.probe_layer = layer;
                self.probe_unit = unit;
            }
            "freeze_batches" => self.freeze_batches = parse(key, value)?,
            "binarize" => self.binarize = parse_bool(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Reads a flat key=value file over the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key = value, got '{line}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        let min_batch = if self.bn { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::Config(format!(
                "batch_size must be >= {min_batch} (bn {}), got {}",
                if self.bn { "on" } else { "off" },
                self.batch_size
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "hidden layout must be non-empty positive sizes, got {:?}",
                self.hidden
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_period == 0 {
            return Err(Error::Config("lr_decay_period must be >= 1".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.probe_layer >= self.hidden.len() {
            return Err(Error::Config(format!(
                "probe layer {} out of range for {} hidden blocks",
                self.probe_layer,
                self.hidden.len()
            )));
        }
        if self.probe_unit >= self.hidden[self.probe_layer] {
            return Err(Error::Config(format!(
                "probe unit {} out of range for hidden block of {}",
                self.probe_unit, self.hidden[self.probe_layer]
            )));
        }
        if self.freeze_batches == 0 {
            return Err(Error::Config("freeze_batches must be >= 1".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config(format!(
                "init_std must be positive, got {}",
                self.init_std
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        if self.lr_decay_factor < 1.0 {
            LrSchedule::Exponential {
                factor: self.lr_decay_factor,
                period: self.lr_decay_period,
            }
        } else {
            LrSchedule::Constant
        }
    }

    /// Full network layout including input and output dims.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(784);
        dims.extend_from_slice(&self.hidden);
        dims.push(10);
        dims
    }

    /// Key=value dump for the sidecar; parsing it back reproduces `self`.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let hidden = self
            .hidden
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "hidden = {hidden}");
        let _ = writeln!(
            s,
            "nonlinearity = {}",
            match self.nonlinearity {
                Nonlinearity::Sigmoid => "sigmoid",
                Nonlinearity::Relu => "relu",
            }
        );
        let _ = writeln!(s, "bn = {}", if self.bn { "on" } else { "off" });
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "lr_decay_factor = {}", self.lr_decay_factor);
        let _ = writeln!(s, "lr_decay_period = {}", self.lr_decay_period);
        let _ = writeln!(s, "eps = {}", self.eps);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "probe = {}:{}", self.probe_layer, self.probe_unit);
        let _ = writeln!(s, "freeze_batches = {}", self.freeze_batches);
        let _ = writeln!(s, "binarize = {}", if self.binarize { "on" } else { "off" });
        let _ = writeln!(s, "init_std = {}", self.init_std);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let cfg = TrainConfig {
            steps: 1234,
            hidden: vec![50, 30],
            nonlinearity: Nonlinearity::Relu,
            bn: false,
            lr: 0.05,
            probe_layer: 1,
            probe_unit: 7,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        std::fs::write(&path, cfg.to_kv_string()).unwrap();
        let loaded = TrainConfig::from_file(&path).unwrap();
        assert_eq!(loaded, cfg);
    }

    #[test]
    fn file_parsing_handles_comments_and_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        std::fs::write(&path, "# comment\n\n  steps = 42  \nbn=off\n").unwrap();
        let cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.steps, 42);
        assert!(!cfg.bn);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = TrainConfig::default();
        let err = cfg.apply("stepz", "10").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn malformed_line_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        std::fs::write(&path, "steps 42\n").unwrap();
        let err = TrainConfig::from_file(&path).unwrap_err();
        assert!(err.to_string().contains("key = value"), "{err}");
    }

    #[test]
    fn probe_parsing() {
        assert_eq!(parse_probe("2:17").unwrap(), (2, 17));
        assert!(parse_probe("2").is_err());
        assert!(parse_probe("a:b").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        type Break = Box<dyn Fn(&mut TrainConfig)>;
        let ok = TrainConfig::default();
        let cases: Vec<(&str, Break)> = vec![
            ("steps", Box::new(|c| c.steps = 0)),
            ("batch", Box::new(|c| c.batch_size = 1)), // bn on needs >= 2
            ("hidden", Box::new(|c| c.hidden = vec![])),
            ("hidden0", Box::new(|c| c.hidden = vec![100, 0])),
            ("lr", Box::new(|c| c.lr = 0.0)),
            ("momentum", Box::new(|c| c.momentum = 1.0)),
            ("decay", Box::new(|c| c.lr_decay_factor = 0.0)),
            ("period", Box::new(|c| c.lr_decay_period = 0)),
            ("eps", Box::new(|c| c.eps = -1.0)),
            ("eval", Box::new(|c| c.eval_every = 0)),
            ("probe_layer", Box::new(|c| c.probe_layer = 3)),
            ("probe_unit", Box::new(|c| c.probe_unit = 100)),
            ("freeze", Box::new(|c| c.freeze_batches = 0)),
            ("init_std", Box::new(|c| c.init_std = 0.0)),
        ];
        for (name, mutate) in cases {
            let mut bad = ok.clone();
            mutate(&mut bad);
            assert!(bad.validate().is_err(), "case '{name}' should fail");
        }
        // batch_size 1 is fine without bn
        let mut no_bn = ok.clone();
        no_bn.bn = false;
        no_bn.batch_size = 1;
        no_bn.validate().unwrap();
    }

    #[test]
    fn schedule_selection() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.schedule(), LrSchedule::Constant);
        cfg.lr_decay_factor = 0.5;
        cfg.lr_decay_period = 250;
        assert_eq!(
            cfg.schedule(),
            LrSchedule::Exponential {
                factor: 0.5,
                period: 250
            }
        );
    }

    #[test]
    fn dims_include_input_and_output() {
        assert_eq!(TrainConfig::default().dims(), vec![784, 100, 100, 100, 10]);
    }
}
