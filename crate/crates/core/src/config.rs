//! Flat `key = value` configuration files.
//!
//! ```text
//! # FrcSub
//! if = glif
//! batch_size = 16
//! hidden = 512, 256
//! ```

use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::dataio::SplitMode;
use crate::error::{IcdmError, Result};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Everything a config file can set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub split: SplitMode,
    pub test_fraction: f64,
    pub p_n: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            split: SplitMode::Transductive,
            test_fraction: 0.2,
            p_n: 0.2,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| IcdmError::Config(format!("line {line}: `{key}` cannot take the value `{value}`")))
}

impl RunConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    /// Applies one assignment. `line` is only used in messages.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "batch_size" => t.batch_size = parse(key, value, line)?,
            "epochs" => t.epochs = parse(key, value, line)?,
            "lambda_reg" => t.lambda_reg = parse(key, value, line)?,
            "patience" => t.patience = parse(key, value, line)?,
            "lr" => t.lr = parse(key, value, line)?,
            "valid_fraction" => t.valid_fraction = parse(key, value, line)?,
            "eval_metric" => t.eval_metric = value.to_string(),
            "seed" => self.set_seed(parse(key, value, line)?),
            "k" | "K" => t.k = parse(key, value, line)?,
            "alpha" => t.alpha = parse(key, value, line)?,
            "beta" => t.beta = parse(key, value, line)?,
            "d" => t.d = parse(key, value, line)?,
            "if" | "if_kind" => {
                let kind: crate::interaction::IfKind = value.parse()?;
                t.if_kind = kind.to_string();
            }
            "activation" => {
                let a: crate::interaction::Activation = value.parse()?;
                t.activation = a.to_string();
            }
            "hidden" => {
                t.hidden = value
                    .split(',')
                    .map(|w| parse(key, w.trim(), line))
                    .collect::<Result<_>>()?
            }
            "aggregator" => {
                if value != "mean" {
                    return Err(IcdmError::Config(format!(
                        "line {line}: only the mean aggregator is available, got `{value}`"
                    )));
                }
            }
            "n_students" => s.n_students = parse(key, value, line)?,
            "n_exercises" => s.n_exercises = parse(key, value, line)?,
            "n_concepts" => s.n_concepts = parse(key, value, line)?,
            "q_density" => s.q_density = parse(key, value, line)?,
            "guess" => s.guess = parse(key, value, line)?,
            "slip" => s.slip = parse(key, value, line)?,
            "logs_per_student" => s.logs_per_student = parse(key, value, line)?,
            "split" => {
                self.split = match value {
                    "transductive" => SplitMode::Transductive,
                    "inductive" => SplitMode::Inductive,
                    _ => return Err(IcdmError::Config(format!("line {line}: unknown split `{value}`"))),
                }
            }
            "test_fraction" => self.test_fraction = parse(key, value, line)?,
            "p_n" => self.p_n = parse(key, value, line)?,
            _ => return Err(IcdmError::Config(format!("line {line}: unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| IcdmError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(key.trim(), value.trim(), i + 1)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| IcdmError::io(path, e))?;
        Self::parse_str(&text).map_err(|e| match e {
            IcdmError::Config(m) => IcdmError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
