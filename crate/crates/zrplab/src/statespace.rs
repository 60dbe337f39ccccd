//! Configuration space enumeration and sparse generators.
//!
//! Configurations are weak compositions of `N` particles over `L` vertices,
//! enumerated lexicographically and ranked through the combinatorial number
//! system (cumulative composition counts), so `rank`/`unrank` cost `O(L + N)`
//! with a precomputed count table. Generators are stored row-compressed with
//! the diagonal split off; detailed balance against the canonical measure is
//! verified edge by edge at build time.

use std::io::Write;

use thiserror::Error;

use crate::measures::{log_sum_exp, site_log_weights};
use crate::rates::RateFunction;

/// Default cap on the number of enumerated configurations.
pub const DEFAULT_STATE_CAP: usize = 5_000_000;

/// Detailed balance and row-sum checks at generator build time.
const BALANCE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("state space for L = {vertices}, N = {particles} has {size} states, over the cap {cap}")]
    CapExceeded { vertices: usize, particles: usize, size: u64, cap: usize },
    #[error("state space needs L >= 1, got L = 0")]
    NoVertices,
    #[error("detailed balance violated at edge {from} -> {to}: relative residual {residual}")]
    DetailedBalance { from: usize, to: usize, residual: f64 },
    #[error("uniformization needed more than {0} terms; tolerance unreachable")]
    TolUnreachable(usize),
    #[error("function vector has length {got}, state space has {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// State space

/// Enumerated configurations of `particles` over `vertices`, with a
/// lexicographic rank/unrank bijection.
#[derive(Debug, Clone)]
pub struct StateSpace {
    vertices: usize,
    particles: usize,
    size: usize,
    /// `counts[n][p]` = number of weak compositions of `n` into `p` parts.
    counts: Vec<Vec<u64>>,
}

impl StateSpace {
    pub fn enumerate(vertices: usize, particles: usize) -> Result<Self, SpaceError> {
        Self::enumerate_with_cap(vertices, particles, DEFAULT_STATE_CAP)
    }

    pub fn enumerate_with_cap(
        vertices: usize,
        particles: usize,
        cap: usize,
    ) -> Result<Self, SpaceError> {
        if vertices == 0 {
            return Err(SpaceError::NoVertices);
        }
        let mut counts = vec![vec![0u64; vertices + 1]; particles + 1];
        for p in 0..=vertices {
            counts[0][p] = 1;
        }
        for n in 1..=particles {
            for p in 1..=vertices {
                counts[n][p] = counts[n][p - 1].saturating_add(counts[n - 1][p]);
            }
        }
        let size = counts[particles][vertices];
        if size > cap as u64 {
            return Err(SpaceError::CapExceeded { vertices, particles, size, cap });
        }
        Ok(Self { vertices, particles, size: size as usize, counts })
    }

    pub fn vertices(&self) -> usize {
        self.vertices
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Number of configurations of `n` particles on `p` vertices.
    pub fn compositions(&self, n: usize, p: usize) -> u64 {
        self.counts[n][p]
    }

    /// Lexicographic rank of a configuration (coordinate 0 most
    /// significant).
    pub fn rank(&self, eta: &[u16]) -> usize {
        debug_assert_eq!(eta.len(), self.vertices);
        let mut rank = 0u64;
        let mut rem = self.particles;
        for (x, &value) in eta.iter().enumerate() {
            let tail = self.vertices - x - 1;
            for v in 0..value as usize {
                rank += self.counts[rem - v][tail];
            }
            rem -= value as usize;
        }
        rank as usize
    }

    pub fn unrank_into(&self, mut index: usize, eta: &mut [u16]) {
        debug_assert_eq!(eta.len(), self.vertices);
        let mut rem = self.particles;
        for x in 0..self.vertices - 1 {
            let tail = self.vertices - x - 1;
            let mut v = 0usize;
            loop {
                let block = self.counts[rem - v][tail] as usize;
                if index < block {
                    break;
                }
                index -= block;
                v += 1;
            }
            eta[x] = v as u16;
            rem -= v;
        }
        eta[self.vertices - 1] = rem as u16;
    }

    pub fn unrank(&self, index: usize) -> Vec<u16> {
        let mut eta = vec![0u16; self.vertices];
        self.unrank_into(index, &mut eta);
        eta
    }

    /// First configuration in lexicographic order: all mass on the last
    /// vertex.
    pub fn first(&self) -> Vec<u16> {
        let mut eta = vec![0u16; self.vertices];
        eta[self.vertices - 1] = self.particles as u16;
        eta
    }

    /// Advances to the lexicographic successor in place; `false` at the end.
    pub fn next_configuration(&self, eta: &mut [u16]) -> bool {
        // Largest j < L-1 whose suffix still carries mass; move one particle
        // onto j and park the rest of the suffix on the last vertex.
        let last = self.vertices - 1;
        let mut suffix: usize = eta[last] as usize;
        let mut j = last;
        while j > 0 {
            j -= 1;
            if suffix > 0 {
                eta[j] += 1;
                for e in eta.iter_mut().take(last).skip(j + 1) {
                    *e = 0;
                }
                eta[last] = (suffix - 1) as u16;
                return true;
            }
            suffix += eta[j] as usize;
        }
        false
    }

    /// Iterates `(rank, configuration)` pairs in lexicographic order.
    pub fn iter(&self) -> StateIter<'_> {
        StateIter { space: self, eta: self.first(), index: 0 }
    }
}

pub struct StateIter<'a> {
    space: &'a StateSpace,
    eta: Vec<u16>,
    index: usize,
}

impl Iterator for StateIter<'_> {
    type Item = (usize, Vec<u16>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.index >= self.space.size() {
            return None;
        }
        let item = (self.index, self.eta.clone());
        self.index += 1;
        if self.index < self.space.size() {
            let advanced = self.space.next_configuration(&mut self.eta);
            debug_assert!(advanced);
        }
        Some(item)
    }
}

/// Canonical stationary vector over an enumerated space: product weights
/// conditioned on the total, returned in linear and log form.
pub fn stationary_vector(space: &StateSpace, c: &RateFunction) -> (Vec<f64>, Vec<f64>) {
    let logw = site_log_weights(c, space.particles());
    let mut logs = Vec::with_capacity(space.size());
    for (_, eta) in space.iter() {
        logs.push(eta.iter().map(|&n| logw[n as usize]).sum::<f64>());
    }
    let z = log_sum_exp(&logs);
    for l in &mut logs {
        *l -= z;
    }
    let linear: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
    (linear, logs)
}

// ---------------------------------------------------------------------------
// Sparse generator

/// Jump topology of the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    /// Departing particles pick a uniform destination among the other
    /// vertices; per-edge rate `c(eta_x) / L`.
    Complete,
    /// Nearest-neighbor jumps on the open segment; per-edge rate `c` at the
    /// departure site.
    Local,
}

impl Flavor {
    pub fn as_str(&self) -> &'static str {
        match self {
            Flavor::Complete => "complete",
            Flavor::Local => "local",
        }
    }
}

/// Row-compressed generator with split diagonal and the canonical
/// stationary vector attached.
#[derive(Debug, Clone)]
pub struct SparseGenerator {
    space: StateSpace,
    flavor: Flavor,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    rates: Vec<f64>,
    diag: Vec<f64>,
    stationary: Vec<f64>,
    log_stationary: Vec<f64>,
    uniformization_rate: f64,
}

impl SparseGenerator {
    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn flavor(&self) -> Flavor {
        self.flavor
    }

    pub fn size(&self) -> usize {
        self.space.size()
    }

    pub fn edge_count(&self) -> usize {
        self.cols.len()
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    pub fn log_stationary(&self) -> &[f64] {
        &self.log_stationary
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    /// Largest total exit rate; the uniformization constant.
    pub fn uniformization_rate(&self) -> f64 {
        self.uniformization_rate
    }

    /// Off-diagonal entries of row `i` as `(target, rate)` pairs.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.cols[lo..hi]
            .iter()
            .zip(&self.rates[lo..hi])
            .map(|(&j, &r)| (j as usize, r))
    }

    /// `out = L f` (generator applied to a function).
    pub fn apply(&self, f: &[f64], out: &mut [f64]) {
        assert_eq!(f.len(), self.size());
        assert_eq!(out.len(), self.size());
        for i in 0..self.size() {
            let mut acc = self.diag[i] * f[i];
            for (j, r) in self.row(i) {
                acc += r * f[j];
            }
            out[i] = acc;
        }
    }

    /// Expectation under the stationary measure.
    pub fn expectation(&self, f: &[f64]) -> f64 {
        self.stationary.iter().zip(f).map(|(&nu, &v)| nu * v).sum()
    }

    /// Covariance under the stationary measure.
    pub fn covariance(&self, f: &[f64], g: &[f64]) -> f64 {
        let mf = self.expectation(f);
        let mg = self.expectation(g);
        self.stationary
            .iter()
            .zip(f.iter().zip(g))
            .map(|(&nu, (&a, &b))| nu * (a - mf) * (b - mg))
            .sum()
    }

    /// Maximum absolute entry of `nu^T L`; zero for a stationary vector.
    pub fn stationarity_residual(&self) -> f64 {
        let mut acc = vec![0.0; self.size()];
        for i in 0..self.size() {
            acc[i] += self.stationary[i] * self.diag[i];
            for (j, r) in self.row(i) {
                acc[j] += self.stationary[i] * r;
            }
        }
        acc.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Maximum absolute row sum (diagonal plus off-diagonal rates).
    pub fn row_sum_residual(&self) -> f64 {
        (0..self.size())
            .map(|i| self.diag[i] + self.row(i).map(|(_, r)| r).sum::<f64>())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Writes `i j rate` triplets (diagonal included) for external tools.
    pub fn write_coordinate_list(&self, mut w: impl Write) -> Result<(), SpaceError> {
        for i in 0..self.size() {
            writeln!(w, "{} {} {}", i, i, self.diag[i])?;
            for (j, r) in self.row(i) {
                writeln!(w, "{} {} {}", i, j, r)?;
            }
        }
        Ok(())
    }

    /// Writes the stationary vector as `index,weight` CSV.
    pub fn write_stationary_csv(&self, mut w: impl Write) -> Result<(), SpaceError> {
        writeln!(w, "index,weight")?;
        for (i, nu) in self.stationary.iter().enumerate() {
            writeln!(w, "{i},{nu}")?;
        }
        Ok(())
    }
}

/// Assembles the generator for the requested flavor. Self-jumps are no-ops
/// and are dropped; the diagonal absorbs only real motion. Detailed balance
/// against the canonical product measure is checked on every edge.
pub fn build_generator(
    space: &StateSpace,
    c: &RateFunction,
    flavor: Flavor,
) -> Result<SparseGenerator, SpaceError> {
    let ell = space.vertices();
    let size = space.size();
    let (stationary, log_stationary) = stationary_vector(space, c);

    let mut row_ptr = Vec::with_capacity(size + 1);
    let mut cols: Vec<u32> = Vec::new();
    let mut rates: Vec<f64> = Vec::new();
    let mut diag = vec![0.0; size];
    row_ptr.push(0);

    let mut target = vec![0u16; ell];
    for (i, eta) in space.iter() {
        let mut exit = 0.0;
        let mut push_edge = |from: usize, to: usize, rate: f64, target: &mut Vec<u16>| -> Result<(), SpaceError> {
            target.copy_from_slice(&eta);
            target[from] -= 1;
            target[to] += 1;
            let j = space.rank(target);
            // nu(eta) c(eta_from) = nu(eta') c(eta'_to) up to rounding.
            let log_lhs = log_stationary[i] + c.value(eta[from] as usize).ln();
            let log_rhs = log_stationary[j] + c.value(target[to] as usize).ln();
            let residual = (log_lhs - log_rhs).abs();
            if residual > BALANCE_TOL {
                return Err(SpaceError::DetailedBalance { from: i, to: j, residual });
            }
            cols.push(j as u32);
            rates.push(rate);
            Ok(())
        };

        match flavor {
            Flavor::Complete => {
                for x in 0..ell {
                    if eta[x] == 0 {
                        continue;
                    }
                    let rate = c.value(eta[x] as usize) / ell as f64;
                    for y in 0..ell {
                        if y == x {
                            continue;
                        }
                        push_edge(x, y, rate, &mut target)?;
                        exit += rate;
                    }
                }
            }
            Flavor::Local => {
                for x in 0..ell - 1 {
                    if eta[x] > 0 {
                        let rate = c.value(eta[x] as usize);
                        push_edge(x, x + 1, rate, &mut target)?;
                        exit += rate;
                    }
                    if eta[x + 1] > 0 {
                        let rate = c.value(eta[x + 1] as usize);
                        push_edge(x + 1, x, rate, &mut target)?;
                        exit += rate;
                    }
                }
            }
        }
        diag[i] = -exit;
        row_ptr.push(cols.len());
    }

    let uniformization_rate = diag.iter().fold(0.0f64, |m, d| m.max(-d));
    Ok(SparseGenerator {
        space: space.clone(),
        flavor,
        row_ptr,
        cols,
        rates,
        diag,
        stationary,
        log_stationary,
        uniformization_rate,
    })
}

// ---------------------------------------------------------------------------
// Semigroup

/// Largest uniformization step per chunk; keeps Poisson weights well inside
/// the normal floating range.
const UNIFORMIZATION_CHUNK: f64 = 350.0;

/// `f_t = exp(t L) f0` by uniformization: Poisson-weighted powers of the
/// stochastic jump kernel, with sup-norm truncation error below `tol`.
/// Large `lambda t` is split into chunks.
pub fn evolve(gen: &SparseGenerator, f0: &[f64], t: f64, tol: f64) -> Result<Vec<f64>, SpaceError> {
    if f0.len() != gen.size() {
        return Err(SpaceError::DimensionMismatch { got: f0.len(), want: gen.size() });
    }
    assert!(t >= 0.0, "evolution time must be nonnegative");
    let lambda = gen.uniformization_rate();
    if t == 0.0 || lambda == 0.0 {
        return Ok(f0.to_vec());
    }
    let chunks = ((lambda * t) / UNIFORMIZATION_CHUNK).ceil().max(1.0) as usize;
    let dt = t / chunks as f64;
    let tol_chunk = tol / chunks as f64;
    let sup = f0.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    // Sup-norm truncation error is (remaining Poisson mass) * sup; the
    // remainder is bounded geometrically, which keeps working far below
    // machine epsilon where a cumulative-mass test would stall.
    let tail_target = tol_chunk / sup;

    let mut f = f0.to_vec();
    let mut power = vec![0.0; f.len()];
    let mut scratch = vec![0.0; f.len()];
    let mut acc = vec![0.0; f.len()];
    for _ in 0..chunks {
        let a = lambda * dt;
        let cap = (a + 12.0 * a.sqrt() + 80.0) as usize;
        let mut weight = (-a).exp();
        for (o, &v) in acc.iter_mut().zip(f.iter()) {
            *o = weight * v;
        }
        power.copy_from_slice(&f);
        let mut k = 0usize;
        loop {
            let r = a / (k + 1) as f64;
            if r < 1.0 && (weight * r / (1.0 - r) <= tail_target || weight == 0.0) {
                break;
            }
            k += 1;
            if k > cap {
                return Err(SpaceError::TolUnreachable(cap));
            }
            // power <- P power with P = I + L / lambda.
            gen.apply(&power, &mut scratch);
            for (p, lv) in power.iter_mut().zip(scratch.iter()) {
                *p += lv / lambda;
            }
            weight *= a / k as f64;
            for (o, &v) in acc.iter_mut().zip(power.iter()) {
                *o += weight * v;
            }
        }
        f.copy_from_slice(&acc);
    }
    Ok(f)
}

// ---------------------------------------------------------------------------
// Change-of-variable diagnostics

/// Maximum residual of `nu[c_x f] = nu[c_y f^{yx}]` over all ordered vertex
/// pairs and a batch of functions, normalized by `sup |f|`.
pub fn change_of_variable_residual(gen: &SparseGenerator, c: &RateFunction, funcs: &[Vec<f64>]) -> f64 {
    let space = gen.space();
    let ell = space.vertices();
    let nu = gen.stationary();
    let mut worst: f64 = 0.0;
    let mut moved = vec![0u16; ell];
    for f in funcs {
        let sup = f.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        // lhs[x] = nu[c_x f]; rhs[y * L + x] = nu[c_y f^{yx}].
        let mut lhs = vec![0.0; ell];
        let mut rhs = vec![0.0; ell * ell];
        for (i, eta) in space.iter() {
            for y in 0..ell {
                if eta[y] == 0 {
                    continue;
                }
                let cy = c.value(eta[y] as usize);
                lhs[y] += nu[i] * cy * f[i];
                for x in 0..ell {
                    if x == y {
                        continue;
                    }
                    moved.copy_from_slice(&eta);
                    moved[y] -= 1;
                    moved[x] += 1;
                    let j = space.rank(&moved);
                    rhs[y * ell + x] += nu[i] * cy * f[j];
                }
            }
        }
        for x in 0..ell {
            for y in 0..ell {
                if x == y {
                    continue;
                }
                worst = worst.max((lhs[x] - rhs[y * ell + x]).abs() / sup);
            }
        }
    }
    worst
}
