//! Experiment configuration: line-based `key = value` text.
//!
//! `#` starts a comment. Missing keys take the defaults of the selected
//! `profile` (`paper` when absent: batch 500, lr 1e-4, K=100, 800 epochs,
//! kernel 5); unknown keys are errors reported with their line number.

use std::fmt;
use std::str::FromStr;

use crate::codec::Architecture;
use crate::error::{Error, Result};
use crate::quantize::QuantMode;
use crate::sweep::SweepConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::InvalidArgument(format!("unknown profile `{}` (desk|paper)", s))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub mode: QuantMode,
    pub arch: Architecture,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    /// Bag size for ensemble runs.
    pub members: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::for_profile(Profile::Paper)
    }
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (arch, train) = match profile {
            Profile::Desk => (Architecture::desk(), TrainConfig::desk()),
            Profile::Paper => (Architecture::paper(), TrainConfig::paper()),
        };
        ExperimentConfig {
            profile,
            mode: QuantMode::Real,
            arch,
            train,
            sweep: SweepConfig::default(),
            members: crate::ensemble::DEFAULT_MEMBERS,
            seed: 0,
        }
    }

    /// Desk profile defaults.
    pub fn desk() -> Self {
        ExperimentConfig::for_profile(Profile::Desk)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate().map_err(|e| Error::Validation {
            key: "architecture",
            msg: e.to_string(),
        })?;
        self.train.validate()?;
        self.sweep.validate()?;
        if self.members == 0 {
            return Err(Error::Validation {
                key: "members",
                msg: "must be >= 1".into(),
            });
        }
        Ok(())
    }

    /// Training settings with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            seed: self.seed,
            ..self.sweep
        }
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse `{}`", v))
        }
        let a = &mut self.arch;
        let t = &mut self.train;
        let s = &mut self.sweep;
        match key {
            "mode" => self.mode = value.parse().map_err(|e: Error| e.to_string())?,
            "seed" => self.seed = num(value)?,
            "members" => self.members = num(value)?,
            "block_len" | "K" => a.block_len = num(value)?,
            "iterations" | "M" => a.iterations = num(value)?,
            "features" | "F" => a.features = num(value)?,
            "filters" => a.filters = num(value)?,
            "kernel" => a.kernel = num(value)?,
            "enc_layers" => a.enc_layers = num(value)?,
            "dec_layers" => a.dec_layers = num(value)?,
            "batch_size" => t.batch_size = num(value)?,
            "epochs" => t.epochs = num(value)?,
            "lr" => t.lr0 = num(value)?,
            "plateau_patience" => t.plateau_patience = num(value)?,
            "plateau_factor" => t.plateau_factor = num(value)?,
            "plateau_threshold" => t.plateau_threshold = num(value)?,
            "enc_steps" => t.enc_steps = num(value)?,
            "dec_steps" => t.dec_steps = num(value)?,
            "enc_snr_db" => t.enc_snr_db = num(value)?,
            "dec_snr_lo" => t.dec_snr_lo = num(value)?,
            "dec_snr_hi" => t.dec_snr_hi = num(value)?,
            "val_batches" => t.val_batches = num(value)?,
            "val_snr_db" => t.val_snr_db = num(value)?,
            "snr_start" => s.snr_start = num(value)?,
            "snr_end" => s.snr_end = num(value)?,
            "snr_step" => s.snr_step = num(value)?,
            "blocks_per_point" => s.blocks_per_point = num(value)?,
            "target_bit_errors" => s.target_bit_errors = num(value)?,
            "chunk_blocks" => s.chunk_blocks = num(value)?,
            _ => return Err(format!("unknown key `{}`", key)),
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn serialize(&self) -> String {
        let (a, t, s) = (&self.arch, &self.train, &self.sweep);
        let rows: Vec<(&str, String)> = vec![
            ("profile", self.profile.to_string()),
            ("mode", self.mode.to_string()),
            ("seed", self.seed.to_string()),
            ("members", self.members.to_string()),
            ("block_len", a.block_len.to_string()),
            ("iterations", a.iterations.to_string()),
            ("features", a.features.to_string()),
            ("filters", a.filters.to_string()),
            ("kernel", a.kernel.to_string()),
            ("enc_layers", a.enc_layers.to_string()),
            ("dec_layers", a.dec_layers.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("lr", t.lr0.to_string()),
            ("plateau_patience", t.plateau_patience.to_string()),
            ("plateau_factor", t.plateau_factor.to_string()),
            ("plateau_threshold", t.plateau_threshold.to_string()),
            ("enc_steps", t.enc_steps.to_string()),
            ("dec_steps", t.dec_steps.to_string()),
            ("enc_snr_db", t.enc_snr_db.to_string()),
            ("dec_snr_lo", t.dec_snr_lo.to_string()),
            ("dec_snr_hi", t.dec_snr_hi.to_string()),
            ("val_batches", t.val_batches.to_string()),
            ("val_snr_db", t.val_snr_db.to_string()),
            ("snr_start", s.snr_start.to_string()),
            ("snr_end", s.snr_end.to_string()),
            ("snr_step", s.snr_step.to_string()),
            ("blocks_per_point", s.blocks_per_point.to_string()),
            ("target_bit_errors", s.target_bit_errors.to_string()),
            ("chunk_blocks", s.chunk_blocks.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{} = {}\n", k, v)).collect()
    }
}

/// Parses and validates a config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut entries: Vec<(usize, &str, &str)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| Error::Config {
            line,
            msg: format!("expected `key = value`, got `{}`", body),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config {
                line,
                msg: "empty key or value".into(),
            });
        }
        if let Some((prev, _, _)) = entries.iter().find(|(_, k, _)| *k == key) {
            return Err(Error::Config {
                line,
                msg: format!("`{}` already set on line {}", key, prev),
            });
        }
        entries.push((line, key, value));
    }
    let profile = match entries.iter().find(|(_, k, _)| *k == "profile") {
        Some(&(line, _, v)) => v.parse().map_err(|e: Error| Error::Config {
            line,
            msg: e.to_string(),
        })?,
        None => Profile::Paper,
    };
    let mut cfg = ExperimentConfig::for_profile(profile);
    for &(line, key, value) in entries.iter().filter(|(_, k, _)| *k != "profile") {
        cfg.set(key, value).map_err(|msg| Error::Config { line, msg })?;
    }
    cfg.validate()?;
    Ok(cfg)
}
