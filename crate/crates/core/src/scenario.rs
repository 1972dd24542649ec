//! Flat scenario configuration.
//!
//! A config file is `key = value` lines; `#` starts a comment. Command-line
//! flags are merged on top with [`ScenarioConfig::set`], so the last value
//! for a key wins.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exploit::ShellcodeEffect;
use crate::layout::MAX_CORES;
use crate::mitigation::{DualGdtMode, EvalParams, ExitPrecedence, MitigationConfig, VmmPolicy};
use crate::search::{SearchConfig, DEFAULT_FAST_RATIO, DEFAULT_PROBES, PRECISE_RATE};
use crate::timing::{NoiseModel, TimerKind, TimingModel};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Json => "json",
            OutputFormat::Csv => "csv",
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub cores: usize,
    pub noise: NoiseModel,
    pub timer: TimerKind,
    /// Samples per address (before any fast-rate reduction).
    pub samples: usize,
    pub rate: f64,
    pub fast_ratio: usize,
    pub threshold: Option<u64>,
    pub workers: usize,
    pub mitigations: MitigationConfig,
    pub output_dir: Option<PathBuf>,
    pub format: OutputFormat,
    /// Seeds for the matrix: `seed, seed+1, ...`.
    pub seeds: usize,
    pub effect: ShellcodeEffect,
    pub restore: bool,
    pub stop_on_first: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            cores: 1,
            noise: NoiseModel::NONE,
            timer: TimerKind::RdtscpTsx,
            samples: DEFAULT_PROBES,
            rate: PRECISE_RATE,
            fast_ratio: DEFAULT_FAST_RATIO,
            threshold: None,
            workers: 1,
            mitigations: MitigationConfig::default(),
            output_dir: None,
            format: OutputFormat::Json,
            seeds: 10,
            effect: ShellcodeEffect::ElevateToken,
            restore: true,
            stop_on_first: false,
        }
    }
}

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(bad(key, v, "expected a boolean")),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| bad(key, v, e.to_string()))
}

impl ScenarioConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ScenarioConfig::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Sets one key. Keys accept `-` or `_` interchangeably.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let k = key.trim().to_ascii_lowercase().replace('-', "_");
        let v = value.trim();
        match k.as_str() {
            "seed" => {
                self.seed = match v.strip_prefix("0x") {
                    Some(h) => u64::from_str_radix(h, 16).map_err(|e| bad(&k, v, e.to_string()))?,
                    None => parse_num(&k, v)?,
                }
            }
            "cores" => self.cores = parse_num(&k, v)?,
            "noise_sigma" | "noise" | "sigma" => self.noise.sigma = parse_num(&k, v)?,
            "contention_rate" => self.noise.contention_rate = parse_num(&k, v)?,
            "outlier_shift" => self.noise.outlier_shift = parse_num(&k, v)?,
            "timer" => self.timer = TimerKind::parse(v).ok_or_else(|| bad(&k, v, "expected rdtscp, cpuid or thread"))?,
            "samples" => self.samples = parse_num(&k, v)?,
            "rate" => self.rate = parse_num(&k, v)?,
            "fast_ratio" => self.fast_ratio = parse_num(&k, v)?,
            "threshold" => self.threshold = Some(parse_num(&k, v)?),
            "workers" => self.workers = parse_num(&k, v)?,
            "umip" => self.mitigations.umip = parse_bool(&k, v)?,
            "dte" | "descriptor_table_exiting" => self.mitigations.descriptor_table_exiting = parse_bool(&k, v)?,
            "vmm" | "vmm_policy" => {
                self.mitigations.vmm_policy =
                    VmmPolicy::parse(v).ok_or_else(|| bad(&k, v, "expected passthrough, spoof or deny"))?
            }
            "kaiser" => self.mitigations.kaiser = parse_bool(&k, v)?,
            "dual_gdt" => self.mitigations.dual_gdt = parse_bool(&k, v)?,
            "dual_gdt_mode" => {
                self.mitigations.dual_gdt_mode = match v.to_ascii_lowercase().as_str() {
                    "readonly" | "read-only" | "read_only" => DualGdtMode::ReadOnlyUserGdt,
                    "split" | "split-frames" | "split_frames" => DualGdtMode::SplitFrames,
                    _ => return Err(bad(&k, v, "expected readonly or split")),
                }
            }
            "exit_precedence" => {
                self.mitigations.exit_precedence = match v.to_ascii_lowercase().as_str() {
                    "umip" | "umip_first" => ExitPrecedence::UmipFirst,
                    "exit" | "exit_first" => ExitPrecedence::ExitFirst,
                    _ => return Err(bad(&k, v, "expected umip or exit")),
                }
            }
            "mitigation" => {
                for m in v.split(',').map(str::trim).filter(|m| !m.is_empty()) {
                    match m.to_ascii_lowercase().replace('_', "-").as_str() {
                        "umip" => self.mitigations.umip = true,
                        "dte" => self.mitigations.descriptor_table_exiting = true,
                        "kaiser" => self.mitigations.kaiser = true,
                        "dual-gdt" => self.mitigations.dual_gdt = true,
                        "none" => self.mitigations = MitigationConfig::default(),
                        _ => return Err(bad(&k, m, "expected umip, dte, kaiser, dual-gdt or none")),
                    }
                }
            }
            "out" | "output_dir" => self.output_dir = Some(PathBuf::from(v)),
            "format" => {
                self.format = match v.to_ascii_lowercase().as_str() {
                    "json" => OutputFormat::Json,
                    "csv" => OutputFormat::Csv,
                    _ => return Err(bad(&k, v, "expected csv or json")),
                }
            }
            "seeds" => self.seeds = parse_num(&k, v)?,
            "effect" => {
                self.effect = ShellcodeEffect::parse(v)
                    .ok_or_else(|| bad(&k, v, "expected elevate, clear-pt or marker"))?
            }
            "restore" => self.restore = parse_bool(&k, v)?,
            "stop_on_first" => self.stop_on_first = parse_bool(&k, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Range checks that cannot be expressed by the parser alone.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let num = |k: &str, v: String, r: &str| Err(bad(k, &v, r));
        if !(1..=MAX_CORES).contains(&self.cores) {
            return num("cores", self.cores.to_string(), "must be in 1..=64");
        }
        if self.samples == 0 {
            return num("samples", "0".into(), "must be >= 1");
        }
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return num("rate", self.rate.to_string(), "must be > 0");
        }
        if self.fast_ratio == 0 {
            return num("fast_ratio", "0".into(), "must be >= 1");
        }
        if self.workers == 0 {
            return num("workers", "0".into(), "must be >= 1");
        }
        if self.seeds == 0 {
            return num("seeds", "0".into(), "must be >= 1");
        }
        if crate::timing::validate_noise(&self.noise).is_err() {
            return num("noise_sigma", self.noise.sigma.to_string(), "noise parameters out of range");
        }
        Ok(())
    }

    pub fn timing(&self) -> TimingModel {
        TimingModel::new(self.timer)
    }

    pub fn probes_per_address(&self) -> usize {
        SearchConfig::probes_for_rate(self.rate, self.samples, self.fast_ratio)
    }

    /// Search over every configured core.
    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            cores: (0..self.cores).collect(),
            probes_per_address: self.probes_per_address(),
            rate: self.rate,
            timing: self.timing(),
            noise: self.noise,
            threshold: self.threshold,
            parallel_workers: self.workers,
            stop_on_first: self.stop_on_first,
            seed: self.seed,
            record_candidates: false,
        }
    }

    pub fn eval_params(&self) -> EvalParams {
        EvalParams {
            n_cores: self.cores,
            noise: self.noise,
            timing: self.timing(),
            probes_per_address: self.probes_per_address(),
            rate: self.rate,
            workers: self.workers,
            effect: self.effect,
            restore: self.restore,
            ..EvalParams::default()
        }
    }

    pub fn matrix_seeds(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_override() {
        let mut c = ScenarioConfig::from_text(
            "# scenario\nseed = 7\ncores=4\nnoise-sigma = 3\nvmm = deny\ndte = true\nformat=csv\n",
        )
        .unwrap();
        assert_eq!((c.seed, c.cores, c.noise.sigma), (7, 4, 3.0));
        assert_eq!(c.mitigations.vmm_policy, VmmPolicy::Deny);
        assert!(c.mitigations.descriptor_table_exiting);
        c.set("seed", "9").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.format, OutputFormat::Csv);
    }

    #[test]
    fn errors() {
        assert!(matches!(ScenarioConfig::from_text("seed"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(ScenarioConfig::from_text("colour=1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(ScenarioConfig::from_text("timer=hpet"), Err(ConfigError::BadValue { .. })));
        let c = ScenarioConfig::from_text("cores=0").unwrap();
        assert!(c.validate().is_err());
        let c = ScenarioConfig::from_text("samples=0").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn fast_rate_halves_samples() {
        let c = ScenarioConfig::from_text("rate=20\nsamples=16").unwrap();
        assert_eq!(c.probes_per_address(), 8);
        let c = ScenarioConfig::from_text("rate=10\nsamples=16").unwrap();
        assert_eq!(c.probes_per_address(), 16);
    }

    #[test]
    fn mitigation_list() {
        let c = ScenarioConfig::from_text("mitigation=dual-gdt,umip").unwrap();
        assert!(c.mitigations.dual_gdt && c.mitigations.umip && !c.mitigations.kaiser);
    }
}
