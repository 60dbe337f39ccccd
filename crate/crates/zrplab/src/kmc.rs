//! Event-driven simulation of the zero-range dynamics beyond enumeration
//! scale.
//!
//! Event selection walks a binary indexed tree over per-site exit rates;
//! each event touches two sites, so updates cost `O(log L)`. Stationary
//! starts are exact: configurations are sampled site by site from the
//! canonical conditional marginals, with no burn-in. Replicas draw from
//! independent, seeded generator streams, so a `(seed, replica)` pair pins
//! the event sequence bit for bit.

use std::io::Write;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::measures::{convolved_log_weights, site_log_weights};
use crate::rates::RateFunction;
use crate::statespace::Flavor;

#[derive(Debug, Error)]
pub enum KmcError {
    #[error("simulation needs at least 2 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("horizon must be positive, got {0}")]
    BadHorizon(f64),
    #[error("series too short for autocorrelation analysis ({0} samples)")]
    SeriesTooShort(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Rate tree

/// Fenwick tree over per-site rates; leaves are kept separately so the
/// prefix sums can be rebuilt exactly after many incremental updates.
struct RateTree {
    tree: Vec<f64>,
    leaves: Vec<f64>,
    updates_since_rebuild: u64,
}

const REBUILD_INTERVAL: u64 = 1 << 22;

impl RateTree {
    fn new(leaves: Vec<f64>) -> Self {
        let mut t = Self { tree: vec![0.0; leaves.len() + 1], leaves, updates_since_rebuild: 0 };
        t.rebuild();
        t
    }

    fn rebuild(&mut self) {
        for v in self.tree.iter_mut() {
            *v = 0.0;
        }
        for i in 0..self.leaves.len() {
            let mut idx = i + 1;
            while idx < self.tree.len() {
                self.tree[idx] += self.leaves[i];
                idx += idx & idx.wrapping_neg();
            }
        }
        self.updates_since_rebuild = 0;
    }

    fn set(&mut self, i: usize, value: f64) {
        let delta = value - self.leaves[i];
        self.leaves[i] = value;
        let mut idx = i + 1;
        while idx < self.tree.len() {
            self.tree[idx] += delta;
            idx += idx & idx.wrapping_neg();
        }
        self.updates_since_rebuild += 1;
        if self.updates_since_rebuild >= REBUILD_INTERVAL {
            self.rebuild();
        }
    }

    fn total(&self) -> f64 {
        let mut idx = self.leaves.len();
        let mut acc = 0.0;
        while idx > 0 {
            acc += self.tree[idx];
            idx -= idx & idx.wrapping_neg();
        }
        acc
    }

    /// Largest index whose prefix sum stays below `target`. Rounding in the
    /// prefix sums can land on a zero-rate leaf at the very edge; those are
    /// nudged to the nearest live leaf so the caller always gets a site
    /// that can actually fire.
    fn select(&self, mut target: f64) -> usize {
        let mut idx = 0usize;
        let mut mask = self.tree.len().next_power_of_two() >> 1;
        while mask > 0 {
            let next = idx + mask;
            if next < self.tree.len() && self.tree[next] < target {
                target -= self.tree[next];
                idx = next;
            }
            mask >>= 1;
        }
        let mut idx = idx.min(self.leaves.len() - 1);
        if self.leaves[idx] <= 0.0 {
            idx = (0..self.leaves.len())
                .map(|off| (idx + self.leaves.len() - off) % self.leaves.len())
                .find(|&i| self.leaves[i] > 0.0)
                .unwrap_or(idx);
        }
        idx
    }
}

// ---------------------------------------------------------------------------
// Exact stationary sampling

/// Precomputed count-distribution tables for sequential conditional
/// sampling from the canonical measure.
pub struct StationarySampler {
    site_logw: Vec<f64>,
    /// `rest[m][k] = log W_m(k)` for the last `m` sites holding `k`.
    rest: Vec<Vec<f64>>,
    particles: usize,
}

impl StationarySampler {
    pub fn new(c: &RateFunction, ell: usize, particles: usize) -> Self {
        let site_logw = site_log_weights(c, particles);
        let mut rest = Vec::with_capacity(ell);
        rest.push(vec![f64::NEG_INFINITY; particles + 1]);
        for m in 1..ell {
            rest.push(convolved_log_weights(&site_logw, m, particles));
        }
        Self { site_logw, rest, particles }
    }

    /// Draws an exact sample of the canonical measure, site by site.
    pub fn sample(&self, ell: usize, rng: &mut impl Rng) -> Vec<u32> {
        let mut eta = vec![0u32; ell];
        let mut remaining = self.particles;
        for x in 0..ell {
            let left = ell - x - 1;
            if left == 0 {
                eta[x] = remaining as u32;
                break;
            }
            // P(eta_x = v) ~ w(v) W_left(remaining - v).
            let logs: Vec<f64> = (0..=remaining)
                .map(|v| self.site_logw[v] + self.rest[left][remaining - v])
                .collect();
            let z = crate::measures::log_sum_exp(&logs);
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            let mut chosen = remaining;
            for (v, &l) in logs.iter().enumerate() {
                cum += (l - z).exp();
                if u < cum {
                    chosen = v;
                    break;
                }
            }
            eta[x] = chosen as u32;
            remaining -= chosen;
        }
        eta
    }
}

// ---------------------------------------------------------------------------
// Simulator

#[derive(Debug, Clone, Copy)]
pub enum InitialState {
    /// Exact draw from the canonical measure.
    Stationary,
    /// Particles spread as evenly as the counts allow.
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub from: u32,
    pub to: u32,
}

pub struct Simulator {
    ell: usize,
    particles: usize,
    flavor: Flavor,
    /// `c(n)` cached for `n = 0..=N`.
    rate_table: Vec<f64>,
    eta: Vec<u32>,
    clock: f64,
    /// Absolute time of the next event, drawn in advance so the state can
    /// be observed at fixed times without jump-chain bias.
    next_time: f64,
    rng: ChaCha8Rng,
    tree: RateTree,
    events: u64,
}

impl Simulator {
    pub fn new(
        c: &RateFunction,
        ell: usize,
        particles: usize,
        flavor: Flavor,
        seed: u64,
        replica: u64,
        init: InitialState,
    ) -> Result<Self, KmcError> {
        if ell < 2 {
            return Err(KmcError::TooFewVertices(ell));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(replica);
        let eta = match init {
            InitialState::Stationary => {
                let sampler = StationarySampler::new(c, ell, particles);
                sampler.sample(ell, &mut rng)
            }
            InitialState::Balanced => {
                let base = (particles / ell) as u32;
                let extra = particles % ell;
                (0..ell)
                    .map(|x| base + if x < extra { 1 } else { 0 })
                    .collect()
            }
        };
        let rate_table: Vec<f64> = (0..=particles).map(|n| c.value(n)).collect();
        let mut sim = Self {
            ell,
            particles,
            flavor,
            rate_table,
            eta,
            clock: 0.0,
            next_time: f64::INFINITY,
            rng,
            tree: RateTree::new(vec![0.0; ell]),
            events: 0,
        };
        for x in 0..ell {
            let rate = sim.site_exit_rate(x);
            sim.tree.set(x, rate);
        }
        sim.draw_next_time();
        Ok(sim)
    }

    fn draw_next_time(&mut self) {
        let total = self.tree.total();
        self.next_time = if total > 0.0 {
            self.clock - self.rng.gen::<f64>().max(f64::MIN_POSITIVE).ln() / total
        } else {
            f64::INFINITY
        };
    }

    fn site_exit_rate(&self, x: usize) -> f64 {
        let c = self.rate_table[self.eta[x] as usize];
        match self.flavor {
            // Self-targets are dropped: identical law, fewer events.
            Flavor::Complete => c * (self.ell - 1) as f64 / self.ell as f64,
            Flavor::Local => {
                let neighbors = if x == 0 || x == self.ell - 1 { 1.0 } else { 2.0 };
                c * neighbors
            }
        }
    }

    pub fn state(&self) -> &[u32] {
        &self.eta
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    /// Time of the upcoming event (`inf` when nothing can move).
    pub fn next_event_time(&self) -> f64 {
        self.next_time
    }

    /// Advances one event; `None` when nothing can move.
    pub fn step(&mut self) -> Option<Event> {
        let total = self.tree.total();
        if total <= 0.0 || !self.next_time.is_finite() {
            return None;
        }
        self.clock = self.next_time;
        let from = self.tree.select(self.rng.gen::<f64>() * total);
        let to = match self.flavor {
            Flavor::Complete => {
                let pick = self.rng.gen_range(0..self.ell - 1);
                if pick >= from {
                    pick + 1
                } else {
                    pick
                }
            }
            Flavor::Local => {
                if from == 0 {
                    1
                } else if from == self.ell - 1 {
                    self.ell - 2
                } else if self.rng.gen::<bool>() {
                    from + 1
                } else {
                    from - 1
                }
            }
        };
        debug_assert!(self.eta[from] > 0, "selected an empty site");
        self.eta[from] -= 1;
        self.eta[to] += 1;
        self.events += 1;
        let (a, b) = (from, to);
        let ra = self.site_exit_rate(a);
        self.tree.set(a, ra);
        let rb = self.site_exit_rate(b);
        self.tree.set(b, rb);
        debug_assert_eq!(
            self.eta.iter().map(|&v| v as usize).sum::<usize>(),
            self.particles,
            "conservation broken"
        );
        self.draw_next_time();
        Some(Event { time: self.clock, from: from as u32, to: to as u32 })
    }

    /// Plays out every event up to time `t` and leaves the clock at `t`;
    /// the state afterwards is the configuration at that fixed time
    /// (memorylessness keeps the pre-drawn waiting time exact). Returns the
    /// number of events.
    pub fn run_until(&mut self, t: f64) -> u64 {
        let mut count = 0;
        while self.next_time <= t {
            if self.step().is_none() {
                break;
            }
            count += 1;
        }
        self.clock = self.clock.max(t);
        count
    }

    /// Current value of `sum_x c(eta_x)`.
    pub fn rate_sum(&self) -> f64 {
        self.eta.iter().map(|&n| self.rate_table[n as usize]).sum()
    }

    pub fn occupied_sites(&self) -> usize {
        self.eta.iter().filter(|&&n| n > 0).count()
    }
}

// ---------------------------------------------------------------------------
// Trajectory summaries

#[derive(Debug, Clone)]
pub struct TrajectoryParams {
    pub ell: usize,
    pub particles: usize,
    pub flavor: Flavor,
    pub t_max: f64,
    pub seed: u64,
    pub replica: u64,
    pub sample_interval: f64,
    pub init: InitialState,
}

#[derive(Debug, Clone)]
pub struct TrajectorySummary {
    pub times: Vec<f64>,
    pub rate_sums: Vec<f64>,
    pub occupied: Vec<f64>,
    pub site0: Vec<f64>,
    pub events: u64,
    pub final_state: Vec<u32>,
    /// Time-weighted occupancy histogram over `0..=N`.
    pub occupancy_histogram: Vec<f64>,
}

/// Event-driven run with observables sampled on a uniform time grid.
pub fn simulate(c: &RateFunction, params: &TrajectoryParams) -> Result<TrajectorySummary, KmcError> {
    if params.t_max <= 0.0 {
        return Err(KmcError::BadHorizon(params.t_max));
    }
    let mut sim = Simulator::new(
        c,
        params.ell,
        params.particles,
        params.flavor,
        params.seed,
        params.replica,
        params.init,
    )?;
    let steps = (params.t_max / params.sample_interval).floor() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut rate_sums = Vec::with_capacity(steps + 1);
    let mut occupied = Vec::with_capacity(steps + 1);
    let mut site0 = Vec::with_capacity(steps + 1);
    let mut histogram = vec![0.0; params.particles + 1];

    times.push(0.0);
    rate_sums.push(sim.rate_sum());
    occupied.push(sim.occupied_sites() as f64);
    site0.push(sim.state()[0] as f64);

    // Sample targets between events carry the pre-event observables: a
    // fixed-time snapshot sees the state before the crossing jump.
    let mut pending = 1usize;
    let mut prev_time = 0.0;
    while pending <= steps {
        let rs = sim.rate_sum();
        let occ = sim.occupied_sites() as f64;
        let s0 = sim.state()[0] as f64;
        match sim.step() {
            Some(event) => {
                while pending <= steps && pending as f64 * params.sample_interval <= event.time {
                    times.push(pending as f64 * params.sample_interval);
                    rate_sums.push(rs);
                    occupied.push(occ);
                    site0.push(s0);
                    pending += 1;
                }
                // Site-0 histogram accrues by holding time.
                histogram[s0 as usize] += event.time - prev_time;
                prev_time = event.time;
            }
            None => {
                while pending <= steps {
                    times.push(pending as f64 * params.sample_interval);
                    rate_sums.push(rs);
                    occupied.push(occ);
                    site0.push(s0);
                    pending += 1;
                }
            }
        }
    }
    Ok(TrajectorySummary {
        times,
        rate_sums,
        occupied,
        site0,
        events: sim.events(),
        final_state: sim.state().to_vec(),
        occupancy_histogram: histogram,
    })
}

/// Writes the summary as CSV: `time` plus the observable columns.
pub fn write_summary_csv(summary: &TrajectorySummary, mut w: impl Write) -> Result<(), KmcError> {
    writeln!(w, "time,rate_sum,occupied,site0")?;
    for i in 0..summary.times.len() {
        writeln!(
            w,
            "{},{},{},{}",
            summary.times[i], summary.rate_sums[i], summary.occupied[i], summary.site0[i]
        )?;
    }
    Ok(())
}

/// Binary trace record: little-endian `f64` time, `u32` source, `u32`
/// destination.
pub fn write_binary_trace(events: &[Event], mut w: impl Write) -> Result<(), KmcError> {
    for e in events {
        w.write_all(&e.time.to_le_bytes())?;
        w.write_all(&e.from.to_le_bytes())?;
        w.write_all(&e.to.to_le_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Relaxation diagnostics

#[derive(Debug, Clone, Copy)]
pub struct RelaxationEstimate {
    /// Integrated autocorrelation time, in the units of the sample spacing
    /// times `dt`.
    pub tau: f64,
    /// Standard error of `tau` (windowed estimator).
    pub tau_err: f64,
    /// Self-consistent summation window, in samples.
    pub window: usize,
    /// Effective number of independent samples.
    pub n_eff: f64,
    /// Set when the series is too short for the window to stabilize.
    pub insufficient: bool,
}

/// Integrated autocorrelation time of an evenly spaced series with a
/// self-consistent window (sum while the window is below six times the
/// running estimate) and windowed error bars.
pub fn integrated_autocorrelation(series: &[f64], dt: f64) -> Result<RelaxationEstimate, KmcError> {
    let n = series.len();
    if n < 16 {
        return Err(KmcError::SeriesTooShort(n));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var: f64 = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return Ok(RelaxationEstimate { tau: 0.0, tau_err: 0.0, window: 0, n_eff: n as f64, insufficient: true });
    }
    let max_lag = n / 4;
    let mut tau_units = 0.5;
    let mut window = max_lag;
    for k in 1..=max_lag {
        let mut acc = 0.0;
        for i in 0..n - k {
            acc += (series[i] - mean) * (series[i + k] - mean);
        }
        let rho = acc / ((n - k) as f64 * var);
        tau_units += rho;
        if (k as f64) >= 6.0 * tau_units {
            window = k;
            break;
        }
    }
    let insufficient = window == max_lag || (n as f64) < 50.0 * tau_units;
    let tau = tau_units * dt;
    let tau_err = tau * (2.0 * (2.0 * window as f64 + 1.0) / n as f64).sqrt();
    Ok(RelaxationEstimate {
        tau,
        tau_err,
        window,
        n_eff: n as f64 / (2.0 * tau_units),
        insufficient,
    })
}

// ---------------------------------------------------------------------------
// Chi-square helpers

/// Standard normal quantile (Acklam's rational approximation, relative
/// error below 1.2e-9).
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Upper quantile of the chi-square distribution via the Wilson-Hilferty
/// cube approximation; accurate to well under a percent for df >= 3.
pub fn chi2_quantile(df: f64, p: f64) -> f64 {
    let z = normal_quantile(p);
    let h = 2.0 / (9.0 * df);
    df * (1.0 - h + z * h.sqrt()).powi(3)
}

/// Pearson statistic against expected cell probabilities, merging trailing
/// cells until every expected count reaches 5. Returns `(stat, dof)`.
pub fn chi2_statistic(observed: &[u64], expected_probs: &[f64], total: u64) -> (f64, usize) {
    assert_eq!(observed.len(), expected_probs.len());
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut acc_obs = 0.0;
    let mut acc_exp = 0.0;
    for (o, p) in observed.iter().zip(expected_probs) {
        acc_obs += *o as f64;
        acc_exp += p * total as f64;
        if acc_exp >= 5.0 {
            cells.push((acc_obs, acc_exp));
            acc_obs = 0.0;
            acc_exp = 0.0;
        }
    }
    if acc_exp > 0.0 {
        if let Some(last) = cells.last_mut() {
            last.0 += acc_obs;
            last.1 += acc_exp;
        } else {
            cells.push((acc_obs, acc_exp));
        }
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    (stat, cells.len().saturating_sub(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::canonical_marginal;
    use crate::statespace::{build_generator, StateSpace};

    #[test]
    fn rate_tree_select_and_total() {
        let mut tree = RateTree::new(vec![1.0, 0.0, 2.0, 0.5]);
        assert!((tree.total() - 3.5).abs() < 1e-15);
        assert_eq!(tree.select(0.5), 0);
        assert_eq!(tree.select(1.5), 2);
        assert_eq!(tree.select(3.4), 3);
        tree.set(1, 4.0);
        assert!((tree.total() - 7.5).abs() < 1e-15);
        assert_eq!(tree.select(2.0), 1);
    }

    #[test]
    fn conservation_and_determinism() {
        let c = RateFunction::staircase(2, 40);
        let run = |seed| {
            let mut sim =
                Simulator::new(&c, 16, 40, Flavor::Complete, seed, 0, InitialState::Balanced)
                    .unwrap();
            let mut log = Vec::new();
            for _ in 0..20_000 {
                let e = sim.step().unwrap();
                log.push((e.time.to_bits(), e.from, e.to));
            }
            assert_eq!(sim.state().iter().map(|&v| v as usize).sum::<usize>(), 40);
            log
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn single_particle_holding_times() {
        // One particle, homogeneous unit rates: waits are Exp((L-1)/L).
        let c = RateFunction::constant(2);
        let ell = 10usize;
        let mut sim =
            Simulator::new(&c, ell, 1, Flavor::Complete, 3, 0, InitialState::Balanced).unwrap();
        let n = 100_000;
        let mut last = 0.0;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let e = sim.step().unwrap();
            let dt = e.time - last;
            last = e.time;
            sum += dt;
            sumsq += dt * dt;
        }
        let mean = sum / n as f64;
        let sd = (sumsq / n as f64 - mean * mean).sqrt();
        let expected = ell as f64 / (ell as f64 - 1.0);
        let se = sd / (n as f64).sqrt();
        assert!(
            (mean - expected).abs() < 3.0 * se,
            "mean {mean}, expected {expected}, se {se}"
        );
    }

    #[test]
    fn stationary_sampler_matches_marginal() {
        let c = RateFunction::staircase(2, 12);
        let (ell, n) = (5usize, 7usize);
        let sampler = StationarySampler::new(&c, ell, n);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = 200_000usize;
        let mut counts = vec![0u64; n + 1];
        for _ in 0..samples {
            let eta = sampler.sample(ell, &mut rng);
            assert_eq!(eta.iter().map(|&v| v as usize).sum::<usize>(), n);
            counts[eta[2] as usize] += 1;
        }
        let marginal = canonical_marginal(&c, ell, n).weights();
        let (stat, dof) = chi2_statistic(&counts, &marginal, samples as u64);
        let threshold = chi2_quantile(dof as f64, 0.99);
        assert!(stat < threshold, "chi2 {stat} over threshold {threshold} (dof {dof})");
    }

    #[test]
    fn empirical_distribution_matches_enumeration() {
        // Time-sampled states against the canonical measure on (4, 4),
        // one million quasi-independent samples.
        let c = RateFunction::staircase(2, 8);
        let (ell, n) = (4usize, 4usize);
        let space = StateSpace::enumerate(ell, n).unwrap();
        let gen = build_generator(&space, &c, Flavor::Complete).unwrap();
        let mut sim =
            Simulator::new(&c, ell, n, Flavor::Complete, 19, 0, InitialState::Stationary).unwrap();
        let spacing = 4.0;
        let samples = 1_000_000usize;
        let mut counts = vec![0u64; space.size()];
        let mut eta16 = vec![0u16; ell];
        for k in 1..=samples {
            sim.run_until(k as f64 * spacing);
            for (a, &b) in eta16.iter_mut().zip(sim.state()) {
                *a = b as u16;
            }
            counts[space.rank(&eta16)] += 1;
        }
        let (stat, dof) = chi2_statistic(&counts, gen.stationary(), samples as u64);
        let threshold = chi2_quantile(dof as f64, 0.99);
        assert!(stat < threshold, "chi2 {stat} over threshold {threshold} (dof {dof})");
    }

    #[test]
    fn stationary_edge_flows_balance() {
        // Over a long stationary run the site-pair flows are symmetric
        // within Monte Carlo error.
        let c = RateFunction::staircase(2, 12);
        let ell = 4usize;
        let mut sim =
            Simulator::new(&c, ell, 5, Flavor::Complete, 29, 0, InitialState::Stationary).unwrap();
        let mut flows = vec![0i64; ell * ell];
        let events = 400_000usize;
        for _ in 0..events {
            let e = sim.step().unwrap();
            flows[e.from as usize * ell + e.to as usize] += 1;
        }
        for x in 0..ell {
            for y in (x + 1)..ell {
                let ab = flows[x * ell + y];
                let ba = flows[y * ell + x];
                let asym = (ab - ba).abs() as f64;
                let scale = ((ab + ba) as f64).sqrt();
                assert!(asym < 5.0 * scale, "flow {x}<->{y}: {ab} vs {ba}");
            }
        }
    }

    #[test]
    fn relaxation_single_particle() {
        // tau of the site-0 occupancy is 1/gap = 1 for homogeneous rates.
        let c = RateFunction::constant(2);
        let params = TrajectoryParams {
            ell: 8,
            particles: 1,
            flavor: Flavor::Complete,
            t_max: 20_000.0,
            seed: 5,
            replica: 0,
            sample_interval: 0.25,
            init: InitialState::Stationary,
        };
        let summary = simulate(&c, &params).unwrap();
        let est = integrated_autocorrelation(&summary.site0, 0.25).unwrap();
        assert!(!est.insufficient);
        assert!(
            (est.tau - 1.0).abs() < 5.0 * est.tau_err.max(0.02),
            "tau {} +- {}",
            est.tau,
            est.tau_err
        );
    }

    #[test]
    fn chi2_quantile_reference_values() {
        // Spot values from standard tables.
        assert!((chi2_quantile(10.0, 0.99) - 23.209).abs() < 0.15);
        assert!((chi2_quantile(34.0, 0.99) - 56.061).abs() < 0.2);
        assert!((chi2_quantile(1.0, 0.99) - 6.635).abs() < 0.2);
    }

    #[test]
    fn summary_csv_and_trace_layout() {
        let c = RateFunction::linear(6);
        let params = TrajectoryParams {
            ell: 4,
            particles: 3,
            flavor: Flavor::Complete,
            t_max: 5.0,
            seed: 1,
            replica: 0,
            sample_interval: 1.0,
            init: InitialState::Balanced,
        };
        let summary = simulate(&c, &params).unwrap();
        let mut buf = Vec::new();
        write_summary_csv(&summary, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,rate_sum,occupied,site0\n"));
        assert_eq!(text.lines().count(), summary.times.len() + 1);

        let events = vec![Event { time: 1.5, from: 2, to: 0 }];
        let mut bin = Vec::new();
        write_binary_trace(&events, &mut bin).unwrap();
        assert_eq!(bin.len(), 16);
        assert_eq!(f64::from_le_bytes(bin[0..8].try_into().unwrap()), 1.5);
        assert_eq!(u32::from_le_bytes(bin[8..12].try_into().unwrap()), 2);
    }

    #[test]
    fn local_flavor_moves_are_nearest_neighbor() {
        let c = RateFunction::staircase(2, 20);
        let mut sim =
            Simulator::new(&c, 12, 20, Flavor::Local, 23, 0, InitialState::Balanced).unwrap();
        for _ in 0..50_000 {
            let e = sim.step().unwrap();
            assert_eq!((e.from as i64 - e.to as i64).abs(), 1);
        }
    }
}
