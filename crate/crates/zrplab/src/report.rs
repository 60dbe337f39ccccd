//! Probe reports, CSV emission, and the run manifest.
//!
//! Fixed column layouts, deterministic float formatting (shortest
//! round-trip), and atomic file writes: identical inputs and seeds must
//! produce byte-identical CSV artifacts. The manifest is the one place a
//! timestamp appears.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::SweepRow;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("no input manifests given")]
    EmptyInput,
    #[error("manifest {0} is malformed: {1}")]
    BadManifest(PathBuf, String),
}

/// One probe measurement: a named value with its instance coordinates and
/// free-form metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionalReport {
    pub probe: String,
    pub ell: usize,
    pub particles: usize,
    pub rate: String,
    pub param: String,
    pub value: f64,
    pub fitted_constant: f64,
    pub seed: u64,
}

impl FunctionalReport {
    pub fn new(
        probe: impl Into<String>,
        ell: usize,
        particles: usize,
        rate: impl Into<String>,
        seed: u64,
    ) -> Self {
        Self {
            probe: probe.into(),
            ell,
            particles,
            rate: rate.into(),
            param: String::new(),
            value: f64::NAN,
            fitted_constant: f64::NAN,
            seed,
        }
    }

    pub fn with_param(mut self, param: impl Into<String>) -> Self {
        self.param = param.into();
        self
    }

    pub fn with_value(mut self, value: f64) -> Self {
        self.value = value;
        self
    }

    pub fn with_fitted(mut self, fitted: f64) -> Self {
        self.fitted_constant = fitted;
        self
    }
}

/// `probe,L,N,rate,param,value,fitted_constant,seed` rows.
pub fn write_probe_csv(rows: &[FunctionalReport], mut w: impl Write) -> Result<(), ReportError> {
    writeln!(w, "probe,L,N,rate,param,value,fitted_constant,seed")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.probe, r.ell, r.particles, r.rate, r.param, r.value, r.fitted_constant, r.seed
        )?;
    }
    Ok(())
}

/// `L,N,rate,gap,s_lo,s_up,gamma_lo,gamma_up,seed,restarts` rows.
pub fn write_sweep_csv(rows: &[SweepRow], mut w: impl Write) -> Result<(), ReportError> {
    writeln!(w, "L,N,rate,gap,s_lo,s_up,gamma_lo,gamma_up,seed,restarts")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.ell, r.particles, r.rate, r.gap, r.s_lo, r.s_up, r.gamma_lo, r.gamma_up, r.seed,
            r.restarts
        )?;
    }
    Ok(())
}

/// Density-indexed measurement table: `L,rho,quantity,value`.
pub fn write_density_csv(
    rows: &[(usize, f64, String, f64)],
    mut w: impl Write,
) -> Result<(), ReportError> {
    writeln!(w, "L,rho,quantity,value")?;
    for (ell, rho, quantity, value) in rows {
        writeln!(w, "{ell},{rho},{quantity},{value}")?;
    }
    Ok(())
}

/// Count-indexed measurement table: `L,N,quantity,value`.
pub fn write_count_csv(
    rows: &[(usize, usize, String, f64)],
    mut w: impl Write,
) -> Result<(), ReportError> {
    writeln!(w, "L,N,quantity,value")?;
    for (ell, n, quantity, value) in rows {
        writeln!(w, "{ell},{n},{quantity},{value}")?;
    }
    Ok(())
}

/// Outcome of one probe inside a run: hard invariants pass or fail, soft
/// findings are fitted constants reported without judgment.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ProbeOutcome {
    /// `None` for probes with no hard invariant.
    pub pass: Option<bool>,
    /// Fitted constants and residuals, keyed by name.
    pub findings: BTreeMap<String, f64>,
    /// Artifact files written by the probe, relative to the output dir.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Seconds since the epoch; the only non-reproducible field.
    pub timestamp: u64,
    pub probes: BTreeMap<String, ProbeOutcome>,
}

impl Manifest {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self {
            tool_version: crate::VERSION.to_string(),
            config_hash,
            seed,
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            probes: BTreeMap::new(),
        }
    }

    pub fn all_hard_invariants_pass(&self) -> bool {
        self.probes.values().all(|p| p.pass.unwrap_or(true))
    }

    pub fn save(&self, path: &Path) -> Result<(), ReportError> {
        let body = serde_json::to_string_pretty(self)?;
        write_atomic(path, body.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| ReportError::BadManifest(path.to_path_buf(), e.to_string()))
    }
}

/// Writes through a temporary sibling then renames, so concurrent readers
/// never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Parsed sweep rows keyed by `(L, N)` for side-by-side comparison.
fn load_sweep_rows(path: &Path) -> Option<Vec<(usize, usize, f64, f64)>> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 8 {
            continue;
        }
        let ell = fields[0].parse().ok()?;
        let n = fields[1].parse().ok()?;
        let gap = fields[3].parse().ok()?;
        let gamma_lo = fields[6].parse().ok()?;
        rows.push((ell, n, gap, gamma_lo));
    }
    Some(rows)
}

/// Consolidates manifests into a markdown comparison: per probe, findings
/// side by side, plus a `(L, N)`-joined table of gap and dissipation
/// trends when the runs carry sweep artifacts. Mismatched tool versions
/// are flagged in the header.
pub fn consolidate_manifests(paths: &[PathBuf]) -> Result<String, ReportError> {
    if paths.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let manifests: Vec<(String, Manifest)> = paths
        .iter()
        .map(|p| Manifest::load(p).map(|m| (p.display().to_string(), m)))
        .collect::<Result<_, _>>()?;

    let mut out = String::new();
    out.push_str("# Run comparison\n\n");
    let versions: Vec<&str> = manifests.iter().map(|(_, m)| m.tool_version.as_str()).collect();
    if versions.windows(2).any(|w| w[0] != w[1]) {
        out.push_str("**Warning: tool versions differ across runs.**\n\n");
    }
    out.push_str("| run | version | config | seed | hard invariants |\n");
    out.push_str("|-----|---------|--------|------|------------------|\n");
    for (name, m) in &manifests {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            name,
            m.tool_version,
            &m.config_hash[..12.min(m.config_hash.len())],
            m.seed,
            if m.all_hard_invariants_pass() { "pass" } else { "FAIL" }
        ));
    }
    out.push('\n');

    let mut probe_names: Vec<String> = manifests
        .iter()
        .flat_map(|(_, m)| m.probes.keys().cloned())
        .collect();
    probe_names.sort();
    probe_names.dedup();
    for probe in &probe_names {
        out.push_str(&format!("## {probe}\n\n"));
        let mut keys: Vec<String> = manifests
            .iter()
            .filter_map(|(_, m)| m.probes.get(probe))
            .flat_map(|p| p.findings.keys().cloned())
            .collect();
        keys.sort();
        keys.dedup();
        out.push_str("| finding |");
        for (name, _) in &manifests {
            out.push_str(&format!(" {name} |"));
        }
        out.push('\n');
        out.push_str("|---------|");
        for _ in &manifests {
            out.push_str("---|");
        }
        out.push('\n');
        for key in &keys {
            out.push_str(&format!("| {key} |"));
            for (_, m) in &manifests {
                match m.probes.get(probe).and_then(|p| p.findings.get(key)) {
                    Some(v) => out.push_str(&format!(" {v} |")),
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }

    // Sweep trends joined on (L, N) when the runs carry sweep artifacts.
    let sweeps: Vec<(String, Vec<(usize, usize, f64, f64)>)> = paths
        .iter()
        .zip(&manifests)
        .filter_map(|(p, (name, _))| {
            let candidate = p.parent().unwrap_or(Path::new(".")).join("sweep.csv");
            load_sweep_rows(&candidate).map(|rows| (name.clone(), rows))
        })
        .collect();
    if !sweeps.is_empty() {
        let mut keys: Vec<(usize, usize)> = sweeps
            .iter()
            .flat_map(|(_, rows)| rows.iter().map(|r| (r.0, r.1)))
            .collect();
        keys.sort();
        keys.dedup();
        out.push_str("## sweep trends (gap | gamma_lo)\n\n| L | N |");
        for (name, _) in &sweeps {
            out.push_str(&format!(" {name} |"));
        }
        out.push_str("\n|---|---|");
        for _ in &sweeps {
            out.push_str("---|");
        }
        out.push('\n');
        for (ell, n) in keys {
            out.push_str(&format!("| {ell} | {n} |"));
            for (_, rows) in &sweeps {
                match rows.iter().find(|r| r.0 == ell && r.1 == n) {
                    Some(&(_, _, gap, gamma)) => out.push_str(&format!(" {gap:.5} \\| {gamma:.5} |")),
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}
