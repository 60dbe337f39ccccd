//! Single-site, grand-canonical, convolved, and canonical measures.
//!
//! Everything here reduces to weighted sums of the reciprocal rate products
//! `w(n) = prod_{k<=n} 1/c(k)`. Canonical quantities are built from
//! unnormalized `w` and its self-convolutions, so partition functions cancel
//! exactly; grand-canonical quantities tilt `w` by a fugacity solved from
//! the target density. All accumulation happens in log space as soon as the
//! dynamic range demands it.

use thiserror::Error;

use crate::rates::RateFunction;

/// Relative tail mass kept below this level when truncating
/// grand-canonical sums.
const GC_TAIL: f64 = 1e-14;
/// Tail mass allowed past the caller-visible truncation of a solved
/// fugacity profile.
const TRUNCATION_MASS: f64 = 1e-12;
/// Fugacity solves reproduce the target density to this tolerance.
const FUGACITY_TOL: f64 = 1e-10;
/// Weights whose log falls below this switch a vector to log storage.
const LOG_STORAGE_CUTOFF: f64 = -300.0;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("weight {value} at index {index} must be finite and nonnegative")]
    BadWeight { index: usize, value: f64 },
    #[error("density {rho} is not achievable under truncation at n_max = {n_max}")]
    RhoOutOfRange { rho: f64, n_max: usize },
    #[error("fugacity bracket expansion exceeded bound (rho = {0})")]
    NoConvergence(f64),
    #[error("mass beyond the truncation exceeds {TRUNCATION_MASS} at the solution")]
    TruncationMass,
    #[error("potential interior is not convex at n = {0}; the density/boundary-width regime does not apply")]
    NotConvexInterior(usize),
    #[error("boundary convexity not reached before tail constant cap 2^20")]
    TailEscalationFailed,
    #[error("need N >= m + 2 = {0} for a nonempty potential interior")]
    RegimeTooSmall(usize),
    #[error("{0}")]
    BadInput(String),
}

// ---------------------------------------------------------------------------
// MeasureVector

/// Nonnegative weight vector over `0..=K`, optionally normalized, stored in
/// log scale when the dynamic range demands.
#[derive(Debug, Clone)]
pub struct MeasureVector {
    values: Vec<f64>,
    log_scale: bool,
    normalized: bool,
}

impl MeasureVector {
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, MeasureError> {
        for (index, &value) in weights.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(MeasureError::BadWeight { index, value });
            }
        }
        Ok(Self { values: weights, log_scale: false, normalized: false })
    }

    /// Builds from log-weights (`-inf` encodes a zero weight).
    pub fn from_log_weights(log_weights: Vec<f64>) -> Self {
        Self { values: log_weights, log_scale: true, normalized: false }
    }

    /// Normalizes to total mass one, switching to log storage when any
    /// normalized weight would underflow.
    pub fn into_normalized(self) -> Self {
        let mut logs = if self.log_scale {
            self.values
        } else {
            self.values.iter().map(|&v| v.ln()).collect()
        };
        let z = log_sum_exp(&logs);
        for l in &mut logs {
            *l -= z;
        }
        let min_finite = logs.iter().cloned().filter(|l| l.is_finite()).fold(f64::INFINITY, f64::min);
        if min_finite < LOG_STORAGE_CUTOFF {
            Self { values: logs, log_scale: true, normalized: true }
        } else {
            Self {
                values: logs.iter().map(|l| l.exp()).collect(),
                log_scale: false,
                normalized: true,
            }
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn is_log_scale(&self) -> bool {
        self.log_scale
    }

    pub fn weight(&self, n: usize) -> f64 {
        if self.log_scale {
            self.values[n].exp()
        } else {
            self.values[n]
        }
    }

    pub fn log_weight(&self, n: usize) -> f64 {
        if self.log_scale {
            self.values[n]
        } else {
            self.values[n].ln()
        }
    }

    /// Linear weights, materialized.
    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|n| self.weight(n)).collect()
    }

    pub fn total(&self) -> f64 {
        if self.log_scale {
            log_sum_exp(&self.values).exp()
        } else {
            self.values.iter().sum()
        }
    }

    pub fn mean(&self) -> f64 {
        let total = self.total();
        (0..self.len()).map(|n| n as f64 * self.weight(n)).sum::<f64>() / total
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let total = self.total();
        (0..self.len())
            .map(|n| {
                let d = n as f64 - m;
                d * d * self.weight(n)
            })
            .sum::<f64>()
            / total
    }

    /// `true` when the declared normalization holds within `tol`.
    pub fn check_normalized(&self, tol: f64) -> bool {
        !self.normalized || (self.total() - 1.0).abs() <= tol
    }
}

pub(crate) fn log_sum_exp(logs: &[f64]) -> f64 {
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = logs.iter().map(|&l| (l - max).exp()).sum();
    max + sum.ln()
}

// ---------------------------------------------------------------------------
// Single-site and grand-canonical measures

/// Unnormalized one-site log-weights `log w(n) = -sum_{k<=n} log c(k)`,
/// `w(0) = 1`, for `n = 0..=n_max`.
pub fn site_log_weights(c: &RateFunction, n_max: usize) -> Vec<f64> {
    let mut logw = Vec::with_capacity(n_max + 1);
    let mut acc = 0.0;
    logw.push(0.0);
    for n in 1..=n_max {
        acc -= c.value(n).ln();
        logw.push(acc);
    }
    logw
}

/// One-site stationary measure `mu(n) ~ prod_{k<=n} 1/c(k)` normalized over
/// `0..=n_max`.
pub fn single_site(c: &RateFunction, n_max: usize) -> MeasureVector {
    tilted_site_measure(c, 1.0, n_max)
}

/// Fugacity-tilted one-site measure `mu_alpha(n) ~ alpha^n prod 1/c(k)`
/// normalized over `0..=n_max`.
pub fn grand_canonical(c: &RateFunction, alpha: f64, n_max: usize) -> MeasureVector {
    tilted_site_measure(c, alpha, n_max)
}

/// Running product `alpha^n prod 1/c(k)` with exact power-of-two rescaling,
/// so the relative error stays at the bare accumulation level instead of
/// picking up log/exp round-trips.
fn tilted_site_measure(c: &RateFunction, alpha: f64, n_max: usize) -> MeasureVector {
    let two_up = 2.0f64.powi(512);
    let two_down = 2.0f64.powi(-512);
    let mut coeffs = Vec::with_capacity(n_max + 1);
    let mut exps: Vec<i32> = Vec::with_capacity(n_max + 1);
    let mut coeff = 1.0f64;
    let mut exp2 = 0i32;
    coeffs.push(coeff);
    exps.push(exp2);
    for n in 1..=n_max {
        coeff *= alpha / c.value(n);
        while coeff != 0.0 && coeff.abs() < two_down {
            coeff *= two_up;
            exp2 -= 512;
        }
        while coeff.abs() > two_up {
            coeff *= two_down;
            exp2 += 512;
        }
        coeffs.push(coeff);
        exps.push(exp2);
    }
    let max_exp = *exps.iter().max().unwrap();
    // All entries sharing the top binade keep full product accuracy; deep
    // tails fall back to log storage through into_normalized.
    let min_exp = *exps.iter().min().unwrap();
    if max_exp - min_exp <= 512 {
        let weights: Vec<f64> = coeffs
            .iter()
            .zip(&exps)
            .map(|(&c, &e)| c * 2.0f64.powi(e - max_exp))
            .collect();
        let total: f64 = weights.iter().sum();
        MeasureVector {
            values: weights.iter().map(|w| w / total).collect(),
            log_scale: false,
            normalized: true,
        }
    } else {
        let ln2 = std::f64::consts::LN_2;
        let logs: Vec<f64> = coeffs
            .iter()
            .zip(&exps)
            .map(|(&c, &e)| c.ln() + (e - max_exp) as f64 * ln2)
            .collect();
        MeasureVector::from_log_weights(logs).into_normalized()
    }
}

fn gc_log_weights(c: &RateFunction, alpha: f64, n_max: usize) -> Vec<f64> {
    let lal = alpha.ln();
    site_log_weights(c, n_max)
        .into_iter()
        .enumerate()
        .map(|(n, lw)| lw + n as f64 * lal)
        .collect()
}

/// Truncation cap for grand-canonical sums at density `rho`.
pub fn gc_truncation_cap(rho: f64) -> usize {
    (10.0 * (rho + 1.0)).ceil() as usize + 200
}

/// Smallest truncation keeping the relative tail below `GC_TAIL`: weights
/// are accumulated up to `cap` and cut where the remaining mass drops below
/// the threshold.
fn gc_support(logs: &[f64]) -> usize {
    let z = log_sum_exp(logs);
    let mut tail = 0.0;
    for n in (0..logs.len()).rev() {
        tail += (logs[n] - z).exp();
        if tail >= GC_TAIL {
            return (n + 1).min(logs.len() - 1);
        }
    }
    logs.len() - 1
}

/// Density profile of the grand-canonical one-site measure.
#[derive(Debug, Clone, Copy)]
pub struct GrandCanonicalProfile {
    /// Target mean density.
    pub rho: f64,
    /// Solved fugacity `alpha_rho`.
    pub alpha: f64,
    /// One-site variance at the solved fugacity.
    pub sigma2: f64,
    /// `d alpha / d rho = alpha / sigma2`.
    pub alpha_prime: f64,
    /// Truncation used for the moments.
    pub n_max: usize,
}

fn gc_mean_var(c: &RateFunction, alpha: f64, n_max: usize) -> (f64, f64) {
    let logs = gc_log_weights(c, alpha, n_max);
    let z = log_sum_exp(&logs);
    let mut mean = 0.0;
    for (n, &l) in logs.iter().enumerate() {
        mean += n as f64 * (l - z).exp();
    }
    let mut var = 0.0;
    for (n, &l) in logs.iter().enumerate() {
        let d = n as f64 - mean;
        var += d * d * (l - z).exp();
    }
    (mean, var)
}

/// Solves `mean(mu_alpha) = rho` for the fugacity by bracketed bisection on
/// the strictly increasing density map, then one Newton polish using
/// `d rho / d alpha = sigma2 / alpha`.
pub fn solve_fugacity(
    c: &RateFunction,
    rho: f64,
    n_max: usize,
) -> Result<GrandCanonicalProfile, MeasureError> {
    if !(rho > 0.0) || rho >= 0.9 * n_max as f64 {
        return Err(MeasureError::RhoOutOfRange { rho, n_max });
    }
    let mean_at = |alpha: f64| gc_mean_var(c, alpha, n_max).0;

    // Bracket: rates scale the fugacity, so seed with c near the density.
    let mut hi = c.value((rho.ceil() as usize).max(1)).max(1e-6);
    let mut lo = hi;
    let mut guard = 0;
    while mean_at(hi) < rho {
        hi *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(MeasureError::NoConvergence(rho));
        }
    }
    guard = 0;
    while mean_at(lo) > rho {
        lo *= 0.5;
        guard += 1;
        if guard > 400 {
            return Err(MeasureError::NoConvergence(rho));
        }
    }
    for _ in 0..200 {
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut alpha = 0.5 * (lo + hi);
    let (mean, var) = gc_mean_var(c, alpha, n_max);
    if var > 0.0 {
        alpha += (rho - mean) * alpha / var;
    }
    let (mean, sigma2) = gc_mean_var(c, alpha, n_max);
    if (mean - rho).abs() > FUGACITY_TOL {
        return Err(MeasureError::NoConvergence(rho));
    }
    // Mass past the visible truncation, bounded by a geometric tail.
    let logs = gc_log_weights(c, alpha, n_max);
    let z = log_sum_exp(&logs);
    let r = alpha / c.value(n_max + 1);
    if r < 1.0 {
        let tail = (logs[n_max] - z).exp() * r / (1.0 - r);
        if tail > TRUNCATION_MASS {
            return Err(MeasureError::TruncationMass);
        }
    } else {
        return Err(MeasureError::TruncationMass);
    }
    Ok(GrandCanonicalProfile { rho, alpha, sigma2, alpha_prime: alpha / sigma2, n_max })
}

/// Solves the fugacity at the default truncation cap for `rho`.
pub fn solve_fugacity_auto(c: &RateFunction, rho: f64) -> Result<GrandCanonicalProfile, MeasureError> {
    solve_fugacity(c, rho, gc_truncation_cap(rho))
}

// ---------------------------------------------------------------------------
// Convolutions

/// Scaled nonnegative vector `value[k] = coeffs[k] * exp(log_off)`; the
/// coefficient array is kept near unit scale so repeated convolution cannot
/// underflow.
#[derive(Debug, Clone)]
struct ScaledVec {
    coeffs: Vec<f64>,
    log_off: f64,
}

impl ScaledVec {
    fn from_logs(logs: &[f64]) -> Self {
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self {
            coeffs: logs.iter().map(|&l| (l - max).exp()).collect(),
            log_off: max,
        }
    }

    fn from_linear(values: &[f64]) -> Self {
        let max = values.iter().cloned().fold(0.0f64, f64::max);
        if max == 0.0 {
            return Self { coeffs: values.to_vec(), log_off: 0.0 };
        }
        Self {
            coeffs: values.iter().map(|&v| v / max).collect(),
            log_off: max.ln(),
        }
    }

    fn log_value(&self, k: usize) -> f64 {
        self.coeffs[k].ln() + self.log_off
    }

    fn rescaled(mut self) -> Self {
        let max = self.coeffs.iter().cloned().fold(0.0f64, f64::max);
        if max > 0.0 && (max > 1e100 || max < 1e-100) {
            for c in &mut self.coeffs {
                *c /= max;
            }
            self.log_off += max.ln();
        }
        self
    }
}

/// Truncated convolution: entries beyond `cap` are dropped, which is exact
/// for any target that never reads them.
fn conv(a: &ScaledVec, b: &ScaledVec, cap: usize) -> ScaledVec {
    let len = (a.coeffs.len() + b.coeffs.len() - 1).min(cap + 1);
    let mut out = vec![0.0; len];
    for (i, &ai) in a.coeffs.iter().enumerate() {
        if ai == 0.0 || i >= len {
            continue;
        }
        let jmax = (len - i).min(b.coeffs.len());
        for j in 0..jmax {
            out[i + j] += ai * b.coeffs[j];
        }
    }
    ScaledVec { coeffs: out, log_off: a.log_off + b.log_off }.rescaled()
}

/// `ell`-fold self-convolution by binary powering, truncated at `cap`.
fn conv_power(base: &ScaledVec, ell: usize, cap: usize) -> ScaledVec {
    assert!(ell >= 1);
    let mut result: Option<ScaledVec> = None;
    let mut sq = base.clone();
    let mut e = ell;
    while e > 0 {
        if e & 1 == 1 {
            result = Some(match result {
                None => sq.clone(),
                Some(r) => conv(&r, &sq, cap),
            });
        }
        e >>= 1;
        if e > 0 {
            sq = conv(&sq, &sq, cap);
        }
    }
    result.unwrap()
}

/// Log-weights of the `ell`-fold convolution of unnormalized site weights,
/// for totals `k = 0..=cap`.
pub fn convolved_log_weights(site_logw: &[f64], ell: usize, cap: usize) -> Vec<f64> {
    let base = ScaledVec::from_logs(site_logw);
    let powed = conv_power(&base, ell, cap);
    (0..=cap)
        .map(|k| if k < powed.coeffs.len() { powed.log_value(k) } else { f64::NEG_INFINITY })
        .collect()
}

/// Distribution of the total particle count over `ell` independent sites,
/// `mu_ell(k)` for `k = 0..=cap`. The input is interpreted as the one-site
/// distribution; entries beyond `cap` are discarded, not renormalized.
pub fn convolve_counts(mu: &MeasureVector, ell: usize, cap: usize) -> MeasureVector {
    assert!(ell >= 1, "need at least one site");
    let base = if mu.is_log_scale() {
        ScaledVec::from_logs(
            &(0..mu.len()).map(|n| mu.log_weight(n)).collect::<Vec<_>>(),
        )
    } else {
        ScaledVec::from_linear(&mu.weights())
    };
    let powed = conv_power(&base, ell, cap);
    let logs: Vec<f64> = (0..=cap)
        .map(|k| if k < powed.coeffs.len() { powed.log_value(k) } else { f64::NEG_INFINITY })
        .collect();
    let min_finite = logs.iter().cloned().filter(|l| l.is_finite()).fold(f64::INFINITY, f64::min);
    if min_finite < LOG_STORAGE_CUTOFF {
        MeasureVector::from_log_weights(logs)
    } else {
        MeasureVector {
            values: logs.iter().map(|l| l.exp()).collect(),
            log_scale: false,
            normalized: false,
        }
    }
}

/// One-site marginal of the canonical measure on `L` sites with `N`
/// particles: `nu_x(n) = w(n) W_{L-1}(N - n) / W_L(N)`, normalized.
pub fn canonical_marginal(c: &RateFunction, ell: usize, n_total: usize) -> MeasureVector {
    assert!(ell >= 2, "canonical marginal needs at least 2 sites");
    let logw = site_log_weights(c, n_total);
    let log_rest = convolved_log_weights(&logw, ell - 1, n_total);
    let logs: Vec<f64> = (0..=n_total)
        .map(|n| logw[n] + log_rest[n_total - n])
        .collect();
    MeasureVector::from_log_weights(logs).into_normalized()
}

// ---------------------------------------------------------------------------
// Local CLT probe

#[derive(Debug, Clone, Copy)]
pub struct CltPoint {
    pub ell: usize,
    pub rho: f64,
    /// `mu_{L,rho}(rho L) * sqrt(sigma2 L)`.
    pub r: f64,
    /// `sigma2 / rho`.
    pub variance_ratio: f64,
}

/// Evaluates the density of the site-sum at its mean, rescaled by the CLT
/// factor, over a grid of `(L, rho)` with integer `rho * L`.
pub fn local_clt_probe(c: &RateFunction, grid: &[(usize, f64)]) -> Result<Vec<CltPoint>, MeasureError> {
    let mut out = Vec::with_capacity(grid.len());
    for &(ell, rho) in grid {
        let target = rho * ell as f64;
        let k = target.round() as usize;
        if (target - k as f64).abs() > 1e-9 {
            return Err(MeasureError::BadInput(format!(
                "rho * L = {target} must be an integer on the CLT grid"
            )));
        }
        let profile = solve_fugacity_auto(c, rho)?;
        let logs = gc_log_weights(c, profile.alpha, profile.n_max);
        let support = gc_support(&logs);
        let z = log_sum_exp(&logs);
        let site: Vec<f64> = logs[..=support].iter().map(|&l| l - z).collect();
        let base = ScaledVec::from_logs(&site);
        let powed = conv_power(&base, ell, k);
        let log_pk = powed.log_value(k);
        let r = (log_pk + 0.5 * (profile.sigma2 * ell as f64).ln()).exp();
        out.push(CltPoint { ell, rho, r, variance_ratio: profile.sigma2 / rho });
    }
    Ok(out)
}

/// Min and max of `sigma2_rho / rho` over a density grid.
pub fn variance_ratio_interval(c: &RateFunction, rhos: &[f64]) -> Result<(f64, f64), MeasureError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &rho in rhos {
        let p = solve_fugacity_auto(c, rho)?;
        let ratio = p.sigma2 / rho;
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    Ok((lo, hi))
}

fn default_rho_grid(ell: usize, n_total: usize) -> Vec<f64> {
    let hi: f64 = 4.0f64.max(1.5 * n_total as f64 / (ell - 1) as f64);
    let lo: f64 = 0.1;
    let points = 25;
    (0..points)
        .map(|i| lo * (hi / lo).powf(i as f64 / (points - 1) as f64))
        .collect()
}

// ---------------------------------------------------------------------------
// Potential

/// Tilt potential for the canonical count distribution: smooth
/// grand-canonical part on `0..=split_point`, explicit boundary tail above.
#[derive(Debug, Clone)]
pub struct Potential {
    pub values: Vec<f64>,
    /// `N0 = N - m`: last index of the smooth part.
    pub split_point: usize,
    /// Escalated tail constant.
    pub k_tail: f64,
    /// Boundary width `m`.
    pub m: usize,
}

impl Potential {
    /// Discrete second difference `V(n+2) + V(n) - 2 V(n+1)`.
    pub fn second_difference(&self, n: usize) -> f64 {
        self.values[n + 2] + self.values[n] - 2.0 * self.values[n + 1]
    }

    pub fn min_interior_second_difference(&self) -> f64 {
        (0..=self.values.len() - 3)
            .map(|n| self.second_difference(n))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Boundary width from the fitted variance-ratio constant: the smooth part
/// of the potential is convex as long as `N - t` exceeds half that
/// constant, plus discreteness margin.
pub fn default_boundary_width(c: &RateFunction, ell: usize, n_total: usize) -> Result<usize, MeasureError> {
    let (_, c_tilde) = variance_ratio_interval(c, &default_rho_grid(ell, n_total))?;
    Ok(2usize.max((c_tilde / 2.0).ceil() as usize + 2))
}

/// Builds the potential `V` with `exp(-V(n))` equivalent to the
/// count-distribution factor `mu_{L-1}(N - n)`: the smooth part comes from
/// the solved fugacity along the sliding density, the last `m` entries from
/// the explicit boundary form with an escalating tail constant until the
/// two junction second differences are nonnegative.
pub fn build_potential(
    c: &RateFunction,
    ell: usize,
    n_total: usize,
    k_init: f64,
    m_override: Option<usize>,
) -> Result<Potential, MeasureError> {
    if ell < 2 || n_total < 2 {
        return Err(MeasureError::BadInput(format!(
            "potential needs L >= 2 and N >= 2, got L = {ell}, N = {n_total}"
        )));
    }
    let m = match m_override {
        Some(m) => m.max(2),
        None => default_boundary_width(c, ell, n_total)?,
    };
    if n_total < m + 2 {
        return Err(MeasureError::RegimeTooSmall(m + 2));
    }
    let n0 = n_total - m;

    // log Z_1 at a truncation wide enough for every sliding density.
    let rho_max = n_total as f64 / (ell - 1) as f64;
    let cap = gc_truncation_cap(rho_max);
    let logw = site_log_weights(c, cap);
    let log_z1 = log_sum_exp(&logw);

    let mut values = vec![0.0; n_total + 1];
    for (n, value) in values.iter_mut().enumerate().take(n0 + 1) {
        let remaining = (n_total - n) as f64;
        let rho_n = remaining / (ell - 1) as f64;
        let profile = solve_fugacity(c, rho_n, cap)?;
        let log_z_alpha = log_sum_exp(&gc_log_weights(c, profile.alpha, cap));
        *value = remaining * profile.alpha.ln() - (ell as f64 - 1.0) * (log_z_alpha - log_z1)
            + 0.5 * remaining.ln();
    }

    // Interior convexity must hold without help from the tail constant.
    for n in 0..=n0.saturating_sub(2) {
        if values[n + 2] + values[n] - 2.0 * values[n + 1] < 0.0 {
            return Err(MeasureError::NotConvexInterior(n));
        }
    }

    let log_l = (ell as f64).ln();
    let mut k_tail = k_init.max(2.0);
    loop {
        for n in (n0 + 1)..=n_total {
            values[n] = (n as f64 - n_total as f64) * log_l + ell as f64 * log_z1
                + k_tail.powi((n - n0) as i32);
        }
        let junction_a = values[n0 + 1] + values[n0 - 1] - 2.0 * values[n0];
        let junction_b = values[n0 + 2] + values[n0] - 2.0 * values[n0 + 1];
        if junction_a >= 0.0 && junction_b >= 0.0 {
            break;
        }
        k_tail *= 2.0;
        if k_tail > (1u64 << 20) as f64 {
            return Err(MeasureError::TailEscalationFailed);
        }
    }

    let potential = Potential { values, split_point: n0, k_tail, m };
    debug_assert!(potential.min_interior_second_difference() >= -1e-9);
    Ok(potential)
}

/// Equivalence intervals reported alongside a potential: the range of
/// `mu_{L-1}(N - n) exp(V(n))` over all `n`, and the range of the boundary
/// ratio `mu_{L-1}(k) / (L^k mu_x(0)^L)` for `k <= m`.
#[derive(Debug, Clone, Copy)]
pub struct PotentialReport {
    pub equivalence: (f64, f64),
    pub boundary_ratio: (f64, f64),
}

pub fn potential_equivalence_report(
    c: &RateFunction,
    ell: usize,
    n_total: usize,
    potential: &Potential,
) -> PotentialReport {
    let logw = site_log_weights(c, n_total.max(gc_truncation_cap(1.0)));
    let log_z1 = log_sum_exp(&logw);
    let log_counts = convolved_log_weights(&logw, ell - 1, n_total);
    // log mu_{L-1}(k): probability of total k over L-1 independent sites.
    let log_mu = |k: usize| log_counts[k] - (ell as f64 - 1.0) * log_z1;

    let mut eq_lo = f64::INFINITY;
    let mut eq_hi = f64::NEG_INFINITY;
    for n in 0..=n_total {
        let v = (log_mu(n_total - n) + potential.values[n]).exp();
        eq_lo = eq_lo.min(v);
        eq_hi = eq_hi.max(v);
    }
    let mut b_lo = f64::INFINITY;
    let mut b_hi = f64::NEG_INFINITY;
    let log_l = (ell as f64).ln();
    for k in 0..=potential.m.min(n_total) {
        // log mu_x(0)^L = -L log Z_1.
        let v = (log_mu(k) - k as f64 * log_l + ell as f64 * log_z1).exp();
        b_lo = b_lo.min(v);
        b_hi = b_hi.max(v);
    }
    PotentialReport { equivalence: (eq_lo, eq_hi), boundary_ratio: (b_lo, b_hi) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::RateFunction;

    fn factorial(n: usize) -> f64 {
        (1..=n).map(|k| k as f64).product()
    }

    #[test]
    fn single_site_linear_is_truncated_poisson() {
        let mu = single_site(&RateFunction::linear(20), 20);
        assert!(mu.check_normalized(1e-12));
        // Ratios to the Poisson(1) weights are constant in n.
        let base = mu.weight(0);
        for n in 0..=20 {
            let expected = base / factorial(n);
            assert!((mu.weight(n) - expected).abs() < 1e-14 * expected.max(1e-30));
        }
    }

    #[test]
    fn single_site_constant_two_is_geometric() {
        let c = RateFunction::new("two", vec![0.0, 2.0, 2.0, 2.0], 0.0).unwrap();
        let mu = single_site(&c, 30);
        for n in 1..=30 {
            let ratio = mu.weight(n) / mu.weight(n - 1);
            assert!((ratio - 0.5).abs() < 1e-13);
        }
    }

    #[test]
    fn single_site_staircase_matches_product_oracle() {
        let c = RateFunction::staircase(2, 40);
        let mu = single_site(&c, 40);
        // Independent product accumulation, high-to-low to vary rounding.
        let mut raw = vec![1.0f64];
        for n in 1..=40usize {
            let prev = raw[n - 1];
            raw.push(prev / c.value(n));
        }
        let z: f64 = raw.iter().sum();
        for n in 0..=40 {
            let expected = raw[n] / z;
            let got = mu.weight(n);
            assert!(
                (got - expected).abs() <= 1e-14 * expected,
                "n = {n}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn grand_canonical_alpha_one_matches_single_site() {
        let c = RateFunction::staircase(2, 25);
        let a = grand_canonical(&c, 1.0, 25);
        let b = single_site(&c, 25);
        for n in 0..=25 {
            assert!((a.weight(n) - b.weight(n)).abs() < 1e-15);
        }
    }

    #[test]
    fn grand_canonical_linear_is_poisson() {
        let mu = grand_canonical(&RateFunction::linear(40), 2.0, 40);
        // alpha^n / n! ratios.
        for n in 1..=10 {
            let ratio = mu.weight(n) / mu.weight(n - 1);
            assert!((ratio - 2.0 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn grand_canonical_constant_is_geometric() {
        let mu = grand_canonical(&RateFunction::constant(60), 0.5, 60);
        for n in 1..=40 {
            assert!((mu.weight(n) / mu.weight(n - 1) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn fugacity_poisson() {
        let p = solve_fugacity_auto(&RateFunction::linear(10), 3.0).unwrap();
        assert!((p.alpha - 3.0).abs() < 1e-9);
        assert!((p.sigma2 - 3.0).abs() < 1e-8);
        assert!((p.alpha_prime - 1.0).abs() < 1e-8);
    }

    #[test]
    fn fugacity_geometric() {
        // mean = alpha / (1 - alpha) = 1 at alpha = 1/2.
        let p = solve_fugacity_auto(&RateFunction::constant(10), 1.0).unwrap();
        assert!((p.alpha - 0.5).abs() < 1e-9);
    }

    #[test]
    fn fugacity_roundtrip_staircase() {
        let c = RateFunction::staircase(2, 10);
        for rho in [0.25, 0.5, 1.0, 2.0, 5.0] {
            let p = solve_fugacity_auto(&c, rho).unwrap();
            let mu = grand_canonical(&c, p.alpha, p.n_max);
            assert!((mu.mean() - rho).abs() <= 1e-10, "rho = {rho}");
        }
    }

    #[test]
    fn fugacity_rejects_unreachable_density() {
        assert!(matches!(
            solve_fugacity(&RateFunction::linear(10), 9.5, 10),
            Err(MeasureError::RhoOutOfRange { .. })
        ));
    }

    #[test]
    fn convolve_identity_at_one_site() {
        let mu = single_site(&RateFunction::staircase(2, 12), 12);
        let conv = convolve_counts(&mu, 1, 12);
        for k in 0..=12 {
            assert!((conv.weight(k) - mu.weight(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn convolve_poisson_additivity() {
        // L independent Poisson(1) totals: ratios to Poisson(L) constant in k.
        let ell = 5usize;
        let mu = single_site(&RateFunction::linear(40), 40);
        let conv = convolve_counts(&mu, ell, 20);
        let lam = ell as f64;
        let mut ratio0 = None;
        for k in 0..=20 {
            let poisson = (-lam + k as f64 * lam.ln()).exp() / factorial(k);
            let r = conv.weight(k) / poisson;
            match ratio0 {
                None => ratio0 = Some(r),
                Some(r0) => assert!((r - r0).abs() < 1e-10 * r0, "k = {k}"),
            }
        }
    }

    #[test]
    fn convolve_matches_triple_loop() {
        let c = RateFunction::staircase(2, 10);
        let mu = single_site(&c, 10);
        let conv = convolve_counts(&mu, 3, 6);
        for k in 0..=6usize {
            let mut brute = 0.0;
            for a in 0..=k {
                for b in 0..=(k - a) {
                    let c3 = k - a - b;
                    brute += mu.weight(a) * mu.weight(b) * mu.weight(c3);
                }
            }
            assert!(
                (conv.weight(k) - brute).abs() < 1e-14 * brute.max(1e-30),
                "k = {k}"
            );
        }
    }

    #[test]
    fn marginal_linear_is_binomial() {
        // Multinomial conditioning of independent Poissons.
        let ell = 5usize;
        let n = 7usize;
        let nu = canonical_marginal(&RateFunction::linear(n), ell, n);
        let p = 1.0 / ell as f64;
        for k in 0..=n {
            let binom = factorial(n) / (factorial(k) * factorial(n - k))
                * p.powi(k as i32)
                * (1.0 - p).powi((n - k) as i32);
            assert!((nu.weight(k) - binom).abs() < 1e-12, "k = {k}");
        }
    }

    #[test]
    fn marginal_two_sites_one_particle_symmetric() {
        for c in [RateFunction::linear(4), RateFunction::staircase(3, 6)] {
            let nu = canonical_marginal(&c, 2, 1);
            assert!((nu.weight(0) - 0.5).abs() < 1e-14);
            assert!((nu.weight(1) - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn marginal_matches_enumeration() {
        // Full state-space oracle on L = 4, N = 5.
        let c = RateFunction::staircase(2, 8);
        let ell = 4usize;
        let n = 5usize;
        let mu = single_site(&c, n);
        let mut totals = vec![0.0; n + 1];
        let mut z = 0.0;
        for a in 0..=n {
            for b in 0..=(n - a) {
                for d in 0..=(n - a - b) {
                    let e = n - a - b - d;
                    let w = mu.weight(a) * mu.weight(b) * mu.weight(d) * mu.weight(e);
                    totals[a] += w;
                    z += w;
                }
            }
        }
        let nu = canonical_marginal(&c, ell, n);
        for k in 0..=n {
            assert!(
                (nu.weight(k) - totals[k] / z).abs() < 1e-13,
                "k = {k}: {} vs {}",
                nu.weight(k),
                totals[k] / z
            );
        }
    }

    #[test]
    fn convolution_identity_consistency() {
        // sum_n w(n) W_{L-1}(N - n) = W_L(N) up to float rearrangement.
        let c = RateFunction::staircase(2, 12);
        let (ell, n) = (6usize, 9usize);
        let logw = site_log_weights(&c, n);
        let rest = convolved_log_weights(&logw, ell - 1, n);
        let full = convolved_log_weights(&logw, ell, n);
        let terms: Vec<f64> = (0..=n).map(|k| logw[k] + rest[n - k]).collect();
        let lhs = log_sum_exp(&terms);
        assert!((lhs - full[n]).abs() < 1e-12);
    }

    #[test]
    fn tilt_identity() {
        // mu_{L-1}(N - n) = alpha^{n-N} (Z_alpha / Z_1)^{L-1} mu_{L-1,rho_n}(N - n).
        let c = RateFunction::staircase(2, 12);
        let (ell, n_total) = (6usize, 9usize);
        let cap = gc_truncation_cap(n_total as f64);
        let logw = site_log_weights(&c, cap);
        let log_z1 = log_sum_exp(&logw);
        let log_counts = convolved_log_weights(&logw, ell - 1, n_total);
        for n in 0..=n_total - 1 {
            let k = n_total - n;
            let rho_n = k as f64 / (ell - 1) as f64;
            let profile = solve_fugacity(&c, rho_n, cap).unwrap();
            let gc_logs = gc_log_weights(&c, profile.alpha, cap);
            let log_z_alpha = log_sum_exp(&gc_logs);
            // Normalized tilted count distribution over L-1 sites at k.
            let site: Vec<f64> = gc_logs.iter().map(|l| l - log_z_alpha).collect();
            let tilted = convolved_log_weights(&site, ell - 1, k);
            let lhs = log_counts[k] - (ell as f64 - 1.0) * log_z1;
            let rhs = (n as f64 - n_total as f64) * profile.alpha.ln()
                + (ell as f64 - 1.0) * (log_z_alpha - log_z1)
                + tilted[k];
            assert!((lhs - rhs).abs() < 1e-9, "n = {n}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn clt_probe_poisson() {
        let pts = local_clt_probe(&RateFunction::linear(8), &[(100, 1.0)]).unwrap();
        let r = pts[0].r;
        // Stirling series for the Poisson pmf at its mean:
        // e^{-L} L^L / L! = (2 pi L)^{-1/2} (1 - 1/(12 L) + O(L^-2)).
        let ell = 100.0f64;
        let expected = (1.0 / (2.0 * std::f64::consts::PI * ell)).sqrt()
            * (1.0 - 1.0 / (12.0 * ell))
            * ell.sqrt();
        assert!((r - expected).abs() < 1e-4, "{r} vs {expected}");
        assert!((pts[0].variance_ratio - 1.0).abs() < 1e-9);
    }

    #[test]
    fn clt_probe_staircase_window() {
        let grid: Vec<(usize, f64)> = [20usize, 60, 120, 200]
            .iter()
            .flat_map(|&l| [(l, 0.5), (l, 1.0), (l, 2.0)])
            .collect();
        let pts = local_clt_probe(&RateFunction::staircase(2, 16), &grid).unwrap();
        let lo = pts.iter().map(|p| p.r).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.r).fold(f64::NEG_INFINITY, f64::max);
        assert!(lo > 0.0 && hi / lo < 4.0, "window [{lo}, {hi}]");
    }

    #[test]
    fn variance_ratio_constants() {
        let (lo, hi) = variance_ratio_interval(&RateFunction::linear(8), &[0.5, 1.0, 2.0]).unwrap();
        assert!((lo - 1.0).abs() < 1e-8 && (hi - 1.0).abs() < 1e-8);

        // Geometric: sigma2 / rho = 1 + rho, documents why the increment
        // hypothesis matters.
        let c = RateFunction::constant(8);
        for rho in [0.5, 1.0, 3.0] {
            let p = solve_fugacity_auto(&c, rho).unwrap();
            assert!((p.sigma2 / rho - (1.0 + rho)).abs() < 1e-7, "rho = {rho}");
        }

        let (lo, hi) =
            variance_ratio_interval(&RateFunction::staircase(2, 16), &[0.1, 0.5, 1.0, 2.0, 5.0, 10.0])
                .unwrap();
        assert!(lo > 0.0 && hi.is_finite() && hi / lo < 10.0);
    }

    #[test]
    fn potential_linear_interior_convex() {
        let c = RateFunction::linear(40);
        let pot = build_potential(&c, 20, 30, 2.0, None).unwrap();
        for n in 0..=pot.split_point.saturating_sub(2) {
            assert!(pot.second_difference(n) > 0.0, "n = {n}");
        }
        assert!(pot.min_interior_second_difference() >= 0.0);
    }

    #[test]
    fn potential_equivalence_bounded() {
        let c = RateFunction::staircase(2, 30);
        let (ell, n_total) = (8usize, 16usize);
        let pot = build_potential(&c, ell, n_total, 2.0, None).unwrap();
        let report = potential_equivalence_report(&c, ell, n_total, &pot);
        let (lo, hi) = report.equivalence;
        assert!(lo > 0.0 && hi.is_finite(), "equivalence [{lo}, {hi}]");
        let (blo, bhi) = report.boundary_ratio;
        assert!(blo > 0.0 && bhi.is_finite(), "boundary [{blo}, {bhi}]");
    }

    #[test]
    fn potential_regime_guard() {
        // Interior would be empty: N too small for the boundary width.
        let c = RateFunction::linear(10);
        assert!(matches!(
            build_potential(&c, 6, 3, 2.0, Some(4)),
            Err(MeasureError::RegimeTooSmall(_))
        ));
    }

    #[test]
    fn normalized_vectors_sum_to_one() {
        let c = RateFunction::staircase(3, 50);
        for n_max in [10usize, 30, 50] {
            assert!(single_site(&c, n_max).check_normalized(1e-12));
            assert!(canonical_marginal(&c, 4, n_max).check_normalized(1e-12));
        }
    }

    #[test]
    fn log_scale_survives_deep_tails() {
        // Large N forces tiny weights; the vector switches to log storage.
        let c = RateFunction::linear(400);
        let mu = single_site(&c, 400);
        assert!(mu.is_log_scale());
        assert!(mu.check_normalized(1e-12));
        assert!(mu.log_weight(400).is_finite());
    }
}
