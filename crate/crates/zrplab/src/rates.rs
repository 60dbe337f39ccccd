//! Jump-rate functions and their hypothesis certificates.
//!
//! A rate function `c` is tabulated on `0..=n_max` and closed by an affine
//! tail `c(n) = c(n_max) + tail_slope * (n - n_max)` for `n > n_max`, so a
//! finite machine can evaluate it everywhere. Two properties are certified
//! by exhaustive scan over the tabulated window:
//!
//! * increment margin: a pair `(delta, n0)` with `c(m) - c(n) >= delta > 0`
//!   whenever `m >= n + n0`, both in the window;
//! * Lipschitz bound: `|c(n+1) - c(n)| <= lip` over the window and the tail.
//!
//! The [`RateFunction::regularize`] transform produces a uniformly
//! increasing rate equivalent to the original one, which is the handle used
//! by the one-vertex estimates in [`crate::onedim`].

use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RateError {
    #[error("rate table needs at least 2 entries, got {0}")]
    TableTooShort(usize),
    #[error("c(0) must be 0, got {0}")]
    NonzeroAtOrigin(f64),
    #[error("c({index}) = {value}; rates must be positive for n >= 1")]
    NonpositiveRate { index: usize, value: f64 },
    #[error("tail slope must be nonnegative and finite, got {0}")]
    BadTailSlope(f64),
    #[error("rate entry c({index}) = {value} is not finite")]
    NonfiniteRate { index: usize, value: f64 },
    #[error("regularization with n0 = {n0} produced nonpositive rate at n = {index}")]
    DegenerateRegularization { n0: usize, index: usize },
    #[error("regularized rate lost the increasing-increment margin (min increment {0})")]
    LostMonotonicity(f64),
    #[error("n0 must be >= 1")]
    ZeroShift,
    #[error("unknown rate spec `{0}` (expected linear, constant, staircase:<p> or a file path)")]
    UnknownSpec(String),
    #[error("rate file: {0}")]
    FileFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tabulated jump rate with an affine tail.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFunction {
    name: String,
    table: Vec<f64>,
    tail_slope: f64,
}

/// Increment and Lipschitz data certified on a tabulated window.
///
/// `h1` holds `(delta, n0)` when the window admits a positive increment
/// margin; with a positive tail slope the affine closure extends the margin
/// to every occupation number. `h2` holds the Lipschitz bound on unit
/// increments, including the tail slope.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisCertificate {
    pub h1: Option<(f64, usize)>,
    pub h2: Option<f64>,
    /// Inclusive window `0..=window` scanned exhaustively.
    pub window: usize,
}

impl HypothesisCertificate {
    pub fn delta(&self) -> Option<f64> {
        self.h1.map(|(d, _)| d)
    }
    pub fn n0(&self) -> Option<usize> {
        self.h1.map(|(_, n0)| n0)
    }
    pub fn lipschitz(&self) -> Option<f64> {
        self.h2
    }
}

impl fmt::Display for HypothesisCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.h1 {
            Some((d, n0)) => write!(f, "h1: delta={d} n0={n0}")?,
            None => write!(f, "h1: absent")?,
        }
        match self.h2 {
            Some(lip) => write!(f, ", h2: lip={lip}, window 0..={}", self.window),
            None => write!(f, ", h2: absent, window 0..={}", self.window),
        }
    }
}

impl RateFunction {
    pub fn new(name: impl Into<String>, table: Vec<f64>, tail_slope: f64) -> Result<Self, RateError> {
        if table.len() < 2 {
            return Err(RateError::TableTooShort(table.len()));
        }
        for (i, &v) in table.iter().enumerate() {
            if !v.is_finite() {
                return Err(RateError::NonfiniteRate { index: i, value: v });
            }
        }
        if table[0] != 0.0 {
            return Err(RateError::NonzeroAtOrigin(table[0]));
        }
        for (i, &v) in table.iter().enumerate().skip(1) {
            if v <= 0.0 {
                return Err(RateError::NonpositiveRate { index: i, value: v });
            }
        }
        if !tail_slope.is_finite() || tail_slope < 0.0 {
            return Err(RateError::BadTailSlope(tail_slope));
        }
        Ok(Self { name: name.into(), table, tail_slope })
    }

    /// `c(n) = n`; tail slope 1 continues the table exactly.
    pub fn linear(n_max: usize) -> Self {
        let table = (0..=n_max.max(1)).map(|n| n as f64).collect();
        Self { name: "linear".into(), table, tail_slope: 1.0 }
    }

    /// `c(n) = 1` for `n >= 1`; constant tail.
    pub fn constant(n_max: usize) -> Self {
        let mut table = vec![1.0; n_max.max(1) + 1];
        table[0] = 0.0;
        Self { name: "constant".into(), table, tail_slope: 0.0 }
    }

    /// `c(n) = p * ceil(n / p)`: flat stairs of width `p` and height `p`.
    /// Mean slope 1, so the affine tail keeps slope 1.
    pub fn staircase(period: usize, n_max: usize) -> Self {
        let p = period.max(1);
        let table = (0..=n_max.max(1))
            .map(|n| (p * n.div_ceil(p)) as f64)
            .collect();
        Self { name: format!("staircase:{p}"), table, tail_slope: 1.0 }
    }

    /// Parses `linear`, `constant`, `staircase:<p>`, or falls back to
    /// reading a rate file at the given path.
    pub fn from_spec(spec: &str, n_max: usize) -> Result<Self, RateError> {
        match spec {
            "linear" => Ok(Self::linear(n_max)),
            "constant" => Ok(Self::constant(n_max)),
            s if s.starts_with("staircase:") => {
                let p: usize = s["staircase:".len()..]
                    .parse()
                    .map_err(|_| RateError::UnknownSpec(s.into()))?;
                if p == 0 {
                    return Err(RateError::UnknownSpec(s.into()));
                }
                Ok(Self::staircase(p, n_max))
            }
            path if Path::new(path).exists() => Self::from_file(path),
            other => Err(RateError::UnknownSpec(other.into())),
        }
    }

    /// Loads a rate table from a text file: a header line `tail_slope <v>`
    /// followed by `n c(n)` lines (any order, `#` comments allowed).
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, RateError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut tail_slope: Option<f64> = None;
        let mut entries: Vec<(usize, f64)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let first = parts.next().unwrap();
            if first == "tail_slope" {
                let v = parts
                    .next()
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| RateError::FileFormat(format!("line {}: bad tail_slope", lineno + 1)))?;
                tail_slope = Some(v);
                continue;
            }
            let n: usize = first
                .parse()
                .map_err(|_| RateError::FileFormat(format!("line {}: bad index", lineno + 1)))?;
            let v: f64 = parts
                .next()
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| RateError::FileFormat(format!("line {}: bad value", lineno + 1)))?;
            entries.push((n, v));
        }
        let tail_slope = tail_slope
            .ok_or_else(|| RateError::FileFormat("missing `tail_slope <v>` header line".into()))?;
        entries.sort_by_key(|&(n, _)| n);
        let mut table = vec![f64::NAN; entries.last().map(|&(n, _)| n + 1).unwrap_or(0)];
        for (n, v) in entries {
            table[n] = v;
        }
        if table.iter().any(|v| v.is_nan()) {
            return Err(RateError::FileFormat("table indices must cover 0..=n_max".into()));
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "file".into());
        Self::new(name, table, tail_slope)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tail_slope(&self) -> f64 {
        self.tail_slope
    }

    /// Last tabulated occupation number.
    pub fn n_max(&self) -> usize {
        self.table.len() - 1
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Evaluates `c(n)`, using the affine tail beyond the table.
    pub fn value(&self, n: usize) -> f64 {
        let last = self.table.len() - 1;
        if n <= last {
            self.table[n]
        } else {
            self.table[last] + self.tail_slope * (n - last) as f64
        }
    }

    /// Smallest unit increment `c(n+1) - c(n)` over the tabulated window.
    pub fn min_increment(&self) -> f64 {
        self.table
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    /// Certifies the increment margin and Lipschitz bound by exhaustive
    /// scan over the tabulated window. The reported `delta` is the exact
    /// minimum of `c(m) - c(n)` over the certified pairs, attached to the
    /// smallest workable `n0`.
    pub fn certify(&self) -> HypothesisCertificate {
        let w = self.table.len() - 1;
        // Lipschitz bound over window increments plus the tail slope; the
        // junction increment c(w+1)-c(w) equals the tail slope itself.
        let lip = self
            .table
            .windows(2)
            .map(|p| (p[1] - p[0]).abs())
            .fold(self.tail_slope, f64::max);

        // Suffix minima make each n0 scan O(window). A flat tail breaks any
        // window margin at once (pairs far in the tail have zero gap), so h1
        // needs a positive tail slope.
        let mut h1 = None;
        if self.tail_slope > 0.0 {
            let mut suffix_min = self.table.clone();
            for i in (0..w).rev() {
                suffix_min[i] = suffix_min[i].min(suffix_min[i + 1]);
            }
            for n0 in 1..=w {
                let mut delta = f64::INFINITY;
                for n in 0..=(w - n0) {
                    delta = delta.min(suffix_min[n + n0] - self.table[n]);
                }
                if delta > 0.0 {
                    h1 = Some((delta, n0));
                    break;
                }
            }
        }
        HypothesisCertificate { h1, h2: Some(lip), window: w }
    }

    /// Double-averaged smoothing of the rate over a width-`n0` stencil,
    /// linearly interpolated below `n0`. For a rate with a certified
    /// `(delta, n0)` margin the output is uniformly increasing while
    /// staying equivalent to the input (see
    /// [`equivalence_ratio_onesite`]). The output table extends `n0`
    /// entries past the input window so the junction into the affine tail
    /// is tabulated exactly.
    pub fn regularize(&self, n0: usize) -> Result<RateFunction, RateError> {
        if n0 == 0 {
            return Err(RateError::ZeroShift);
        }
        let out_len = self.table.len() + n0;
        let mut out = vec![0.0; out_len];
        for k in n0..out_len {
            let mut acc = self.value(k);
            for j in 1..n0 {
                let weight = (n0 - j) as f64 / (n0 * n0) as f64;
                // c(k-j) with k >= n0 > j stays inside the domain.
                acc += weight * (self.value(k + j) + self.value(k - j) - 2.0 * self.value(k));
            }
            out[k] = acc;
        }
        let anchor = out[n0];
        for k in 1..n0 {
            out[k] = anchor * k as f64 / n0 as f64;
        }
        let reg = RateFunction::new(
            format!("{}~{n0}", self.name),
            out,
            self.tail_slope,
        )
        .map_err(|e| match e {
            RateError::NonpositiveRate { index, .. } => {
                RateError::DegenerateRegularization { n0, index }
            }
            other => other,
        })?;
        if self.certify().h1.is_some() {
            let min_inc = reg.min_increment();
            if min_inc <= 0.0 {
                return Err(RateError::LostMonotonicity(min_inc));
            }
        }
        Ok(reg)
    }
}

/// Min and max over `0..=n_max` of the ratio between the one-site measures
/// built from the regularized and the original rate. Both measures are
/// normalized over the same window, so for `c` with an increment margin the
/// interval stays inside `(0, inf)` and is stable as the window grows.
pub fn equivalence_ratio_onesite(
    c: &RateFunction,
    n0: usize,
    n_max: usize,
) -> Result<(f64, f64), RateError> {
    let reg = c.regularize(n0)?;
    let log_mu = site_log_profile(c, n_max);
    let log_mu_reg = site_log_profile(&reg, n_max);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for n in 0..=n_max {
        let r = (log_mu_reg[n] - log_mu[n]).exp();
        lo = lo.min(r);
        hi = hi.max(r);
    }
    Ok((lo, hi))
}

/// Normalized one-site log-weights `log mu(n)` for `n = 0..=n_max`,
/// `mu(n)` proportional to the reciprocal rate product.
fn site_log_profile(c: &RateFunction, n_max: usize) -> Vec<f64> {
    let mut logw = Vec::with_capacity(n_max + 1);
    let mut acc = 0.0;
    logw.push(0.0);
    for n in 1..=n_max {
        acc -= c.value(n).ln();
        logw.push(acc);
    }
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = logw.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    for l in &mut logw {
        *l -= z;
    }
    logw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_certificate() {
        let c = RateFunction::linear(100);
        let cert = c.certify();
        assert_eq!(cert.h1, Some((1.0, 1)));
        assert_eq!(cert.h2, Some(1.0));
    }

    #[test]
    fn constant_rate_has_no_margin() {
        let c = RateFunction::constant(60);
        let cert = c.certify();
        assert!(cert.h1.is_none());
        assert_eq!(cert.h2, Some(1.0));
        // Lipschitz bound is the jump 0 -> 1 at the origin.
    }

    #[test]
    fn staircase_certificate_matches_exhaustive_scan() {
        let c = RateFunction::staircase(2, 50);
        let cert = c.certify();
        assert_eq!(cert.h1, Some((2.0, 2)));
        assert_eq!(cert.h2, Some(2.0));

        // Independent double loop over the window.
        let table = c.table();
        for n0 in 1..=2usize {
            let mut delta = f64::INFINITY;
            for n in 0..table.len() {
                for m in (n + n0)..table.len() {
                    delta = delta.min(table[m] - table[n]);
                }
            }
            if n0 == 1 {
                assert!(delta <= 0.0);
            } else {
                assert_eq!(delta, 2.0);
            }
        }
    }

    #[test]
    fn certify_monotone_in_window() {
        // Enlarging the window never increases the certified delta.
        let long = RateFunction::staircase(3, 90).certify();
        let short = RateFunction::staircase(3, 30).certify();
        let (d_long, _) = long.h1.unwrap();
        let (d_short, _) = short.h1.unwrap();
        assert!(d_long <= d_short + 1e-15);
    }

    #[test]
    fn certify_rejects_bad_tables() {
        assert!(RateFunction::new("bad", vec![0.0, -1.0], 0.0).is_err());
        assert!(RateFunction::new("bad", vec![0.0, 1.0, 0.0], 0.0).is_err());
        assert!(RateFunction::new("bad", vec![0.5, 1.0], 0.0).is_err());
        assert!(RateFunction::new("bad", vec![0.0], 0.0).is_err());
    }

    #[test]
    fn regularize_fixes_linear_rates() {
        let c = RateFunction::linear(30);
        let reg = c.regularize(3).unwrap();
        for n in 0..=30 {
            assert!((reg.value(n) - c.value(n)).abs() < 1e-12, "n = {n}");
        }
    }

    #[test]
    fn regularize_idempotent_on_affine() {
        let c = RateFunction::new("affine", (0..=20).map(|n| 0.7 * n as f64).collect(), 0.7).unwrap();
        let once = c.regularize(4).unwrap();
        let twice = once.regularize(4).unwrap();
        for n in 0..=20 {
            assert!((once.value(n) - c.value(n)).abs() < 1e-12);
            assert!((twice.value(n) - once.value(n)).abs() < 1e-12);
        }
    }

    #[test]
    fn regularize_staircase_hand_values() {
        // Stencil of width 2: c(k) + (c(k+1) + c(k-1) - 2 c(k)) / 4.
        let c = RateFunction::staircase(2, 12);
        let reg = c.regularize(2).unwrap();
        assert!((reg.value(2) - 2.5).abs() < 1e-14);
        assert!((reg.value(3) - 3.5).abs() < 1e-14);
        assert!((reg.value(1) - 1.25).abs() < 1e-14);
    }

    #[test]
    fn regularized_rate_is_uniformly_increasing() {
        for period in [2usize, 3, 5] {
            let c = RateFunction::staircase(period, 60);
            let n0 = c.certify().n0().unwrap();
            let reg = c.regularize(n0).unwrap();
            let min_inc = reg.min_increment();
            assert!(min_inc > 0.0, "period {period}: min increment {min_inc}");
        }
    }

    #[test]
    fn equivalence_ratio_linear_is_unity() {
        let (lo, hi) = equivalence_ratio_onesite(&RateFunction::linear(80), 3, 60).unwrap();
        assert!((lo - 1.0).abs() < 1e-10 && (hi - 1.0).abs() < 1e-10);
    }

    #[test]
    fn equivalence_ratio_staircase_stable_under_window_growth() {
        let c = RateFunction::staircase(2, 200);
        let (lo60, hi60) = equivalence_ratio_onesite(&c, 2, 60).unwrap();
        assert!(lo60 > 0.0 && hi60.is_finite());
        let (lo120, hi120) = equivalence_ratio_onesite(&c, 2, 120).unwrap();
        // Bounded, no drift toward 0 or infinity as the window doubles.
        assert!(lo120 > 0.5 * lo60);
        assert!(hi120 < 2.0 * hi60);
    }

    #[test]
    fn rate_file_roundtrip() {
        let dir = std::env::temp_dir().join("zrplab-rate-file-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("myrate.txt");
        std::fs::write(&path, "tail_slope 0.5\n0 0\n1 1.5\n2 2.0\n3 3.5\n").unwrap();
        let c = RateFunction::from_file(&path).unwrap();
        assert_eq!(c.name(), "myrate");
        assert_eq!(c.value(2), 2.0);
        assert_eq!(c.value(5), 3.5 + 0.5 * 2.0);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(RateFunction::from_spec("linear", 10).unwrap().name(), "linear");
        assert_eq!(
            RateFunction::from_spec("staircase:4", 10).unwrap().name(),
            "staircase:4"
        );
        assert!(RateFunction::from_spec("nope", 10).is_err());
    }
}
