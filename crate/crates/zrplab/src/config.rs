//! Experiment configuration: a line-oriented `key = value` format with
//! `[section]` headers, hashed for the manifest.
//!
//! ```text
//! [experiment]
//! rate = staircase:2
//! seed = 42
//! out = runs/staircase
//! probes = certify,constants
//!
//! [grid]
//! L = 2..8
//! N = 1..12
//! max_states = 20000
//!
//! [budgets]
//! restarts = 8
//! iters = 400
//!
//! [kmc]
//! t_max = 10000
//! sample_interval = 0.5
//! ```
//!
//! Ranges are inclusive (`2..8`), lists comma-separated (`2,4,8`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected `key = value` or `[section]`")]
    Syntax(usize),
    #[error("unknown probe `{0}` (expected one of certify, constants, recursion, covariance, expmoment, potential, onedim, kmc)")]
    UnknownProbe(String),
    #[error("bad value for `{key}`: `{value}`")]
    BadValue { key: String, value: String },
    #[error("grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ProbeKind {
    Certify,
    Constants,
    Recursion,
    Covariance,
    ExpMoment,
    Potential,
    Onedim,
    Kmc,
}

impl ProbeKind {
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        match s.trim() {
            "certify" => Ok(Self::Certify),
            "constants" => Ok(Self::Constants),
            "recursion" => Ok(Self::Recursion),
            "covariance" => Ok(Self::Covariance),
            "expmoment" => Ok(Self::ExpMoment),
            "potential" => Ok(Self::Potential),
            "onedim" => Ok(Self::Onedim),
            "kmc" => Ok(Self::Kmc),
            other => Err(ConfigError::UnknownProbe(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Certify => "certify",
            Self::Constants => "constants",
            Self::Recursion => "recursion",
            Self::Covariance => "covariance",
            Self::ExpMoment => "expmoment",
            Self::Potential => "potential",
            Self::Onedim => "onedim",
            Self::Kmc => "kmc",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Budgets {
    pub restarts: usize,
    pub iters: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct KmcSettings {
    pub t_max: f64,
    pub sample_interval: f64,
    pub replicas: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub rate_spec: String,
    pub ells: Vec<usize>,
    pub particle_counts: Vec<usize>,
    pub probes: Vec<ProbeKind>,
    pub seed: u64,
    pub threads: usize,
    pub out_dir: PathBuf,
    pub max_states: usize,
    pub budgets: Budgets,
    pub kmc: KmcSettings,
    /// Spread factor above which a soft stability finding is flagged in
    /// the manifest (reported, never failing).
    pub soft_spread: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rate_spec: "staircase:2".into(),
            ells: (2..=8).collect(),
            particle_counts: (1..=12).collect(),
            probes: vec![ProbeKind::Certify, ProbeKind::Constants],
            seed: 42,
            threads: 0,
            out_dir: PathBuf::from("out"),
            max_states: 20_000,
            budgets: Budgets { restarts: 8, iters: 400 },
            kmc: KmcSettings { t_max: 10_000.0, sample_interval: 0.5, replicas: 1 },
            soft_spread: 3.0,
        }
    }
}

fn parse_usize_list(value: &str, key: &str) -> Result<Vec<usize>, ConfigError> {
    let bad = || ConfigError::BadValue { key: key.to_string(), value: value.to_string() };
    let value = value.trim();
    if let Some((lo, hi)) = value.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if hi < lo {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    value
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect()
}

impl ExperimentConfig {
    /// Parses the line-oriented format; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        let mut section = String::from("experiment");
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax(lineno + 1))?;
            let key = key.trim();
            let value = value.trim();
            let bad = || ConfigError::BadValue { key: key.to_string(), value: value.to_string() };
            match (section.as_str(), key) {
                ("experiment", "rate") => config.rate_spec = value.to_string(),
                ("experiment", "seed") => config.seed = value.parse().map_err(|_| bad())?,
                ("experiment", "threads") => config.threads = value.parse().map_err(|_| bad())?,
                ("experiment", "out") => config.out_dir = PathBuf::from(value),
                ("experiment", "soft_spread") => {
                    config.soft_spread = value.parse().map_err(|_| bad())?
                }
                ("experiment", "probes") => {
                    config.probes = value
                        .split(',')
                        .map(ProbeKind::parse)
                        .collect::<Result<Vec<_>, _>>()?;
                }
                ("grid", "L") => config.ells = parse_usize_list(value, key)?,
                ("grid", "N") => config.particle_counts = parse_usize_list(value, key)?,
                ("grid", "max_states") => config.max_states = value.parse().map_err(|_| bad())?,
                ("budgets", "restarts") => config.budgets.restarts = value.parse().map_err(|_| bad())?,
                ("budgets", "iters") => config.budgets.iters = value.parse().map_err(|_| bad())?,
                ("kmc", "t_max") => config.kmc.t_max = value.parse().map_err(|_| bad())?,
                ("kmc", "sample_interval") => {
                    config.kmc.sample_interval = value.parse().map_err(|_| bad())?
                }
                ("kmc", "replicas") => config.kmc.replicas = value.parse().map_err(|_| bad())?,
                _ => return Err(ConfigError::Syntax(lineno + 1)),
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.ells.is_empty() || self.particle_counts.is_empty() || self.probes.is_empty() {
            return Err(ConfigError::EmptyGrid);
        }
        Ok(())
    }

    /// Canonical serialization hashed into the manifest; seeds and budgets
    /// included, output directory excluded.
    pub fn canonical_lines(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("rate".to_string(), self.rate_spec.clone());
        map.insert(
            "L".to_string(),
            self.ells.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        map.insert(
            "N".to_string(),
            self.particle_counts.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        map.insert(
            "probes".to_string(),
            self.probes.iter().map(|p| p.name().to_string()).collect::<Vec<_>>().join(","),
        );
        map.insert("seed".to_string(), self.seed.to_string());
        map.insert("max_states".to_string(), self.max_states.to_string());
        map.insert("restarts".to_string(), self.budgets.restarts.to_string());
        map.insert("iters".to_string(), self.budgets.iters.to_string());
        map.insert("kmc_t_max".to_string(), self.kmc.t_max.to_string());
        map.insert("kmc_sample_interval".to_string(), self.kmc.sample_interval.to_string());
        map.insert("kmc_replicas".to_string(), self.kmc.replicas.to_string());
        map.insert("soft_spread".to_string(), self.soft_spread.to_string());
        map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_lines().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
