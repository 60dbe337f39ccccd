//! Birth-death chains on `{0..N}` and one-vertex entropy dissipation.
//!
//! A chain is stored through its death rates, birth rates and reversible
//! measure, tied together by detailed balance. The central quantity is the
//! entropy-to-dissipation ratio
//!
//! ```text
//! sup_{u >= 0, pi[u] = 1}  pi[u log u] / sum_n pi(n) r_-(n) [u(n) - u(n-1)] log(u(n)/u(n-1))
//! ```
//!
//! estimated from below by multi-restart ascent. When the death increments
//! and birth decrements carry nonnegative margins `delta_-`, `delta_+` with
//! `delta = delta_- + delta_+ > 0`, the ratio is bounded above by
//! `1 / delta`, and the estimate is checked against that bound.
//!
//! Equivalence transfer: if two reversible measures are within a pointwise
//! factor `C` of each other, the entropy numerator moves by at most `C` and
//! the dissipation denominator by at most `1/C` (both integrands are
//! nonnegative), so the dissipation constants differ by at most `C^2`. This
//! elementary two-sided bound is what justifies estimating on a regularized
//! measure; the tests exercise it directly.

use thiserror::Error;

use crate::ascent::{maximize_ratio, AscentBudget, RatioProblem};
use crate::constants::{BoundKind, ConstantEstimate, ConstantKind, Provenance};
use crate::functionals;
use crate::measures::{canonical_marginal, MeasureVector};
use crate::rates::RateFunction;

#[derive(Debug, Error)]
pub enum OneDimError {
    #[error("reversible measure vanishes at interior point {0}")]
    ZeroInterior(usize),
    #[error("death rate at {index} must be positive, got {value}")]
    BadDeathRate { index: usize, value: f64 },
    #[error("death rates must start at r_-(0) = 0, got {0}")]
    NonzeroDeathAtOrigin(f64),
    #[error("birth/death tables have inconsistent lengths: pi has {pi}, death has {death}")]
    LengthMismatch { pi: usize, death: usize },
    #[error("detailed balance residual {0} at level {1}")]
    DetailedBalance(f64, usize),
    #[error("ascent produced {lower}, above the certified bound {upper}")]
    BoundViolation { lower: f64, upper: f64 },
    #[error(transparent)]
    Functional(#[from] crate::functionals::FunctionalError),
}

/// Birth-death chain on `{0..N}` with reversible measure attached.
#[derive(Debug, Clone)]
pub struct BirthDeathChain {
    /// `r_+(n)` for `n = 0..N-1`.
    birth: Vec<f64>,
    /// `r_-(n)` for `n = 0..N`, with `r_-(0) = 0`.
    death: Vec<f64>,
    /// Reversible probability, linear weights.
    pi: Vec<f64>,
}

impl BirthDeathChain {
    /// Builds from explicit rates and measure, verifying detailed balance
    /// `r_-(n) pi(n) = r_+(n-1) pi(n-1)` within `1e-12` relative.
    pub fn new(pi: Vec<f64>, birth: Vec<f64>, death: Vec<f64>) -> Result<Self, OneDimError> {
        if death.len() != pi.len() || birth.len() + 1 != pi.len() {
            return Err(OneDimError::LengthMismatch { pi: pi.len(), death: death.len() });
        }
        if death[0] != 0.0 {
            return Err(OneDimError::NonzeroDeathAtOrigin(death[0]));
        }
        for n in 1..pi.len() {
            let lhs = death[n] * pi[n];
            let rhs = birth[n - 1] * pi[n - 1];
            let scale = lhs.abs().max(rhs.abs()).max(1e-300);
            let residual = (lhs - rhs).abs() / scale;
            if residual > 1e-12 {
                return Err(OneDimError::DetailedBalance(residual, n));
            }
        }
        Ok(Self { birth, death, pi })
    }

    /// Builds the chain from its reversible measure and death rates; birth
    /// rates follow from detailed balance.
    pub fn from_measure(pi: &MeasureVector, death: Vec<f64>) -> Result<Self, OneDimError> {
        let weights = pi.weights();
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        if death.len() != weights.len() {
            return Err(OneDimError::LengthMismatch { pi: weights.len(), death: death.len() });
        }
        if death[0] != 0.0 {
            return Err(OneDimError::NonzeroDeathAtOrigin(death[0]));
        }
        let mut birth = Vec::with_capacity(weights.len() - 1);
        for n in 1..weights.len() {
            if weights[n - 1] <= 0.0 {
                return Err(OneDimError::ZeroInterior(n - 1));
            }
            if death[n] <= 0.0 {
                return Err(OneDimError::BadDeathRate { index: n, value: death[n] });
            }
            birth.push(death[n] * weights[n] / weights[n - 1]);
        }
        Ok(Self { birth, death, pi: weights })
    }

    pub fn levels(&self) -> usize {
        self.pi.len()
    }

    pub fn measure(&self) -> &[f64] {
        &self.pi
    }

    pub fn birth(&self) -> &[f64] {
        &self.birth
    }

    pub fn death(&self) -> &[f64] {
        &self.death
    }

    /// Exact minima of the death increments and birth decrements.
    pub fn increment_margins(&self) -> (f64, f64) {
        let delta_minus = self
            .death
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        let delta_plus = self
            .birth
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(f64::INFINITY, f64::min);
        (delta_minus, delta_plus)
    }

    /// `delta = delta_- + delta_+` when both margins are nonnegative and
    /// the sum is positive; the dissipation ratio is then at most
    /// `1/delta`. Margins within rounding slack of zero count as zero:
    /// birth rates come out of a division, so an exactly flat profile
    /// shows up as `-1e-16`-level decrements.
    pub fn delta_certificate(&self) -> Option<f64> {
        let (dm, dp) = self.increment_margins();
        // Single-level birth tables have no decrement constraint.
        let dp = if self.birth.len() < 2 { 0.0 } else { dp };
        let scale = self
            .death
            .iter()
            .chain(self.birth.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let slack = 1e-12 * scale.max(1.0);
        let dm = if dm >= -slack { dm.max(0.0) } else { return None };
        let dp = if dp >= -slack { dp.max(0.0) } else { return None };
        if dm + dp > 0.0 {
            Some(dm + dp)
        } else {
            None
        }
    }

    /// Numerator and denominator of the dissipation ratio at `u`.
    pub fn ratio_parts(&self, u: &[f64]) -> Result<(f64, f64), OneDimError> {
        let ent = functionals::entropy(&self.pi, u)?;
        let mut den = 0.0;
        for n in 1..self.pi.len() {
            let d = u[n] - u[n - 1];
            if u[n - 1] <= 0.0 || u[n] <= 0.0 {
                // Entropy guards nonnegativity; zero levels only make sense
                // in limits that the ascent never visits.
                continue;
            }
            den += self.pi[n] * self.death[n] * d * (d / u[n - 1]).ln_1p();
        }
        Ok((ent, den))
    }
}

struct ChainRatio<'a> {
    chain: &'a BirthDeathChain,
}

impl RatioProblem for ChainRatio<'_> {
    fn dim(&self) -> usize {
        self.chain.levels()
    }

    fn ratio(&self, u: &[f64]) -> f64 {
        let pi = &self.chain.pi;
        let death = &self.chain.death;
        let num = functionals::entropy(pi, u).unwrap_or(f64::NAN);
        let mut den = 0.0;
        for n in 1..pi.len() {
            let d = u[n] - u[n - 1];
            den += pi[n] * death[n] * d * (d / u[n - 1]).ln_1p();
        }
        num / den
    }

    fn ratio_and_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        let pi = &self.chain.pi;
        let death = &self.chain.death;
        let levels = pi.len();
        let total = functionals::mean(pi, u);
        let num = functionals::entropy(pi, u).unwrap_or(f64::NAN);
        let mut den = 0.0;
        let mut log_ratio = vec![0.0; levels];
        for n in 1..levels {
            let d = u[n] - u[n - 1];
            log_ratio[n] = (d / u[n - 1]).ln_1p();
            den += pi[n] * death[n] * d * log_ratio[n];
        }
        // Partials divided by pi_k precondition the direction.
        for k in 0..levels {
            let dnum = (u[k] / total).ln();
            let mut dden = 0.0;
            if k >= 1 {
                dden += death[k] * (log_ratio[k] + (u[k] - u[k - 1]) / u[k]);
            }
            if k + 1 < levels {
                dden -= pi[k + 1] / pi[k] * death[k + 1]
                    * (log_ratio[k + 1] + (u[k + 1] - u[k]) / u[k]);
            }
            grad[k] = u[k] * (dnum * den - num * dden) / (den * den);
        }
        num / den
    }
}

/// Warm starts covering the shapes that saturate entropy-dissipation
/// ratios on chains: step functions at every level and exponential tilts.
fn chain_warm_starts(levels: usize) -> Vec<Vec<f64>> {
    let mut seeds = Vec::new();
    for k in 1..levels {
        let mut up = vec![1.0; levels];
        for v in up.iter_mut().skip(k) {
            *v = 40.0;
        }
        seeds.push(up);
        let mut down = vec![1.0; levels];
        for v in down.iter_mut().skip(k) {
            *v = 0.02;
        }
        seeds.push(down);
    }
    for theta in [0.5, -0.5, 1.5, -1.5] {
        seeds.push((0..levels).map(|n| (theta * n as f64).exp()).collect());
    }
    seeds
}

/// Lower-bound estimate of the chain's entropy dissipation constant plus
/// the structural `1/delta` upper bound when the increments certify one.
#[derive(Debug, Clone)]
pub struct DissipationReport {
    pub estimate: ConstantEstimate,
    /// `1/delta`, present when the margins certify.
    pub upper: Option<f64>,
}

pub fn bd_dissipation_constant(
    chain: &BirthDeathChain,
    budget: &AscentBudget,
) -> Result<DissipationReport, OneDimError> {
    let problem = ChainRatio { chain };
    let outcome = maximize_ratio(&problem, budget, &chain_warm_starts(chain.levels()));
    let upper = chain.delta_certificate().map(|delta| 1.0 / delta);
    if let Some(up) = upper {
        if outcome.value > up * (1.0 + 1e-6) {
            return Err(OneDimError::BoundViolation { lower: outcome.value, upper: up });
        }
    }
    Ok(DissipationReport {
        estimate: ConstantEstimate {
            kind: ConstantKind::EntropyDissipation,
            value: outcome.value,
            bound: BoundKind::Lower,
            witness: Some(outcome.witness),
            provenance: Provenance {
                restarts: outcome.restarts,
                seed: outcome.seed,
                iterations: outcome.iterations,
                residual: outcome.residual,
            },
        },
        upper,
    })
}

/// One-vertex constant: the dissipation ratio of the canonical marginal
/// `nu_x` with death rates `c`, estimated from below by ascent.
pub fn one_vertex_constant(
    c: &RateFunction,
    ell: usize,
    n_total: usize,
    budget: &AscentBudget,
) -> Result<ConstantEstimate, OneDimError> {
    let marginal = canonical_marginal(c, ell, n_total);
    let death: Vec<f64> = (0..=n_total).map(|n| c.value(n)).collect();
    let chain = BirthDeathChain::from_measure(&marginal, death)?;
    let report = bd_dissipation_constant(&chain, budget)?;
    Ok(report.estimate)
}
