//! C ABI for the zero-range dynamics laboratory.
//!
//! A flat `extern "C"` surface over opaque handles so other languages can
//! bind: rate functions, generators on enumerated configuration spaces,
//! constant estimation, the semigroup, and the event-driven simulator.
//! Every call returns a [`ZrpStatus`]; results come back through out
//! pointers. On failure, [`zrp_last_error_message`] returns a thread-local
//! description of what went wrong. Handles are freed with their matching
//! `*_free` function and must not be shared across threads without
//! external synchronization.
//!
//! The matching C header is generated into `include/zrplab.h` at build
//! time; see `examples/smoke.c` for a complete consumer.
//!
//! Safety contract, uniform across the surface: pointer arguments must be
//! valid for the documented lengths, handles must come from the matching
//! constructor and not be used after `*_free`, and a handle must not be
//! used from two threads at once.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use zrplab::ascent::AscentBudget;
use zrplab::constants::{instance_constants, spectral_gap};
use zrplab::functionals::{dissipation, entropy};
use zrplab::kmc::{InitialState, Simulator};
use zrplab::measures::{canonical_marginal, solve_fugacity_auto};
use zrplab::onedim::one_vertex_constant;
use zrplab::rates::RateFunction;
use zrplab::statespace::{build_generator, evolve, Flavor, SparseGenerator, StateSpace};

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZrpStatus {
    ZrpOk = 0,
    ZrpNullArgument = 1,
    ZrpInvalidArgument = 2,
    ZrpUtf8 = 3,
    ZrpCapExceeded = 4,
    ZrpNoConvergence = 5,
    ZrpIo = 6,
    ZrpInternal = 7,
}

/// Jump topology selector for generator and simulator constructors.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZrpFlavor {
    ZrpComplete = 0,
    ZrpLocal = 1,
}

impl From<ZrpFlavor> for Flavor {
    fn from(f: ZrpFlavor) -> Self {
        match f {
            ZrpFlavor::ZrpComplete => Flavor::Complete,
            ZrpFlavor::ZrpLocal => Flavor::Local,
        }
    }
}

/// Opaque rate function handle.
pub struct ZrpRate {
    inner: RateFunction,
}

/// Opaque generator handle; owns the enumerated space, the rate, and the
/// canonical stationary vector.
pub struct ZrpGenerator {
    gen: SparseGenerator,
    rate: RateFunction,
}

/// Opaque event-driven simulator handle.
pub struct ZrpSimulator {
    sim: Simulator,
    vertices: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: impl AsRef<str>) {
    let sanitized = message.as_ref().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: ZrpStatus, message: impl AsRef<str>) -> ZrpStatus {
    set_error(message);
    status
}

/// Runs a closure with panics converted into `ZrpInternal`.
fn guarded(body: impl FnOnce() -> ZrpStatus) -> ZrpStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let text = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in zrplab".to_string());
            fail(ZrpStatus::ZrpInternal, text)
        }
    }
}

unsafe fn str_arg<'a>(ptr: *const c_char) -> Result<&'a str, ZrpStatus> {
    if ptr.is_null() {
        return Err(ZrpStatus::ZrpNullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| ZrpStatus::ZrpUtf8)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn zrp_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Description of the most recent failure on this thread; valid until the
/// next failing call.
#[no_mangle]
pub extern "C" fn zrp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

// ---------------------------------------------------------------------------
// Rate functions

/// Builds a rate function from a spec string: `linear`, `constant`,
/// `staircase:<p>`, or a path to a rate table file. The table covers
/// `0..=n_max` with an affine tail beyond.
#[no_mangle]
pub unsafe extern "C" fn zrp_rate_new(
    spec: *const c_char,
    n_max: u32,
    out: *mut *mut ZrpRate,
) -> ZrpStatus {
    guarded(|| {
        if out.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "out pointer is null");
        }
        let spec = match str_arg(spec) {
            Ok(s) => s,
            Err(status) => return fail(status, "rate spec string"),
        };
        match RateFunction::from_spec(spec, n_max as usize) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(ZrpRate { inner }));
                ZrpStatus::ZrpOk
            }
            Err(e) => fail(ZrpStatus::ZrpInvalidArgument, e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn zrp_rate_free(rate: *mut ZrpRate) {
    if !rate.is_null() {
        drop(Box::from_raw(rate));
    }
}

/// Evaluates `c(n)` (affine tail beyond the table).
#[no_mangle]
pub unsafe extern "C" fn zrp_rate_value(
    rate: *const ZrpRate,
    n: u32,
    out: *mut f64,
) -> ZrpStatus {
    guarded(|| {
        if rate.is_null() || out.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "rate or out pointer is null");
        }
        *out = (*rate).inner.value(n as usize);
        ZrpStatus::ZrpOk
    })
}

/// Certifies the increment margin and Lipschitz bound. `has_margin` is 0
/// when no `(delta, n0)` pair exists; `delta`/`n0` are zeroed in that case.
#[no_mangle]
pub unsafe extern "C" fn zrp_rate_certify(
    rate: *const ZrpRate,
    has_margin: *mut i32,
    delta: *mut f64,
    n0: *mut u32,
    lipschitz: *mut f64,
) -> ZrpStatus {
    guarded(|| {
        if rate.is_null()
            || has_margin.is_null()
            || delta.is_null()
            || n0.is_null()
            || lipschitz.is_null()
        {
            return fail(ZrpStatus::ZrpNullArgument, "certify output pointers");
        }
        let cert = (*rate).inner.certify();
        match cert.h1 {
            Some((d, shift)) => {
                *has_margin = 1;
                *delta = d;
                *n0 = shift as u32;
            }
            None => {
                *has_margin = 0;
                *delta = 0.0;
                *n0 = 0;
            }
        }
        *lipschitz = cert.h2.unwrap_or(f64::NAN);
        ZrpStatus::ZrpOk
    })
}

/// Uniformly increasing regularization with stencil width `n0`.
#[no_mangle]
pub unsafe extern "C" fn zrp_rate_regularize(
    rate: *const ZrpRate,
    n0: u32,
    out: *mut *mut ZrpRate,
) -> ZrpStatus {
    guarded(|| {
        if rate.is_null() || out.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "rate or out pointer is null");
        }
        match (*rate).inner.regularize(n0 as usize) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(ZrpRate { inner }));
                ZrpStatus::ZrpOk
            }
            Err(e) => fail(ZrpStatus::ZrpInvalidArgument, e.to_string()),
        }
    })
}

/// Solves the fugacity for target density `rho`.
#[no_mangle]
pub unsafe extern "C" fn zrp_fugacity_solve(
    rate: *const ZrpRate,
    rho: f64,
    alpha: *mut f64,
    sigma2: *mut f64,
    alpha_prime: *mut f64,
) -> ZrpStatus {
    guarded(|| {
        if rate.is_null() || alpha.is_null() || sigma2.is_null() || alpha_prime.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "fugacity output pointers");
        }
        match solve_fugacity_auto(&(*rate).inner, rho) {
            Ok(profile) => {
                *alpha = profile.alpha;
                *sigma2 = profile.sigma2;
                *alpha_prime = profile.alpha_prime;
                ZrpStatus::ZrpOk
            }
            Err(e) => fail(ZrpStatus::ZrpNoConvergence, e.to_string()),
        }
    })
}

/// One-coordinate marginal of the canonical measure on `vertices` sites
/// with `particles` particles. `weights` must hold `particles + 1`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn zrp_canonical_marginal(
    rate: *const ZrpRate,
    vertices: u32,
    particles: u32,
    weights: *mut f64,
) -> ZrpStatus {
    guarded(|| {
        if rate.is_null() || weights.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "rate or weights pointer is null");
        }
        if vertices < 2 {
            return fail(ZrpStatus::ZrpInvalidArgument, "need at least 2 vertices");
        }
        let marginal = canonical_marginal(&(*rate).inner, vertices as usize, particles as usize);
        let out = std::slice::from_raw_parts_mut(weights, particles as usize + 1);
        for (o, w) in out.iter_mut().zip(marginal.weights()) {
            *o = w;
        }
        ZrpStatus::ZrpOk
    })
}

/// One-vertex entropy dissipation constant (ascent lower bound).
#[no_mangle]
pub unsafe extern "C" fn zrp_one_vertex_constant(
    rate: *const ZrpRate,
    vertices: u32,
    particles: u32,
    restarts: u32,
    max_iters: u32,
    seed: u64,
    out: *mut f64,
) -> ZrpStatus {
    guarded(|| {
        if rate.is_null() || out.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "rate or out pointer is null");
        }
        let budget =
            AscentBudget { restarts: restarts as usize, max_iters: max_iters as usize, seed };
        match one_vertex_constant(&(*rate).inner, vertices as usize, particles as usize, &budget) {
            Ok(est) => {
                *out = est.value;
                ZrpStatus::ZrpOk
            }
            Err(e) => fail(ZrpStatus::ZrpInvalidArgument, e.to_string()),
        }
    })
}

// ---------------------------------------------------------------------------
// Generators

/// Enumerates the configuration space and assembles the generator. Fails
/// with `ZrpCapExceeded` when the space is larger than `state_cap`
/// (pass 0 for the default cap).
#[no_mangle]
pub unsafe extern "C" fn zrp_generator_new(
    rate: *const ZrpRate,
    vertices: u32,
    particles: u32,
    flavor: ZrpFlavor,
    state_cap: u64,
    out: *mut *mut ZrpGenerator,
) -> ZrpStatus {
    guarded(|| {
        if rate.is_null() || out.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "rate or out pointer is null");
        }
        let cap = if state_cap == 0 {
            zrplab::statespace::DEFAULT_STATE_CAP
        } else {
            state_cap as usize
        };
        let space =
            match StateSpace::enumerate_with_cap(vertices as usize, particles as usize, cap) {
                Ok(space) => space,
                Err(e) => return fail(ZrpStatus::ZrpCapExceeded, e.to_string()),
            };
        let rate_ref = &(*rate).inner;
        match build_generator(&space, rate_ref, flavor.into()) {
            Ok(gen) => {
                *out = Box::into_raw(Box::new(ZrpGenerator { gen, rate: rate_ref.clone() }));
                ZrpStatus::ZrpOk
            }
            Err(e) => fail(ZrpStatus::ZrpInternal, e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn zrp_generator_free(gen: *mut ZrpGenerator) {
    if !gen.is_null() {
        drop(Box::from_raw(gen));
    }
}

/// Number of enumerated configurations.
#[no_mangle]
pub unsafe extern "C" fn zrp_generator_size(gen: *const ZrpGenerator, out: *mut u64) -> ZrpStatus {
    guarded(|| {
        if gen.is_null() || out.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "generator or out pointer is null");
        }
        *out = (*gen).gen.size() as u64;
        ZrpStatus::ZrpOk
    })
}

/// Copies the canonical stationary vector; `weights` must hold
/// `zrp_generator_size` doubles.
#[no_mangle]
pub unsafe extern "C" fn zrp_generator_stationary(
    gen: *const ZrpGenerator,
    weights: *mut f64,
) -> ZrpStatus {
    guarded(|| {
        if gen.is_null() || weights.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "generator or weights pointer is null");
        }
        let nu = (*gen).gen.stationary();
        let out = std::slice::from_raw_parts_mut(weights, nu.len());
        out.copy_from_slice(nu);
        ZrpStatus::ZrpOk
    })
}

/// Point estimate of the spectral gap.
#[no_mangle]
pub unsafe extern "C" fn zrp_spectral_gap(gen: *const ZrpGenerator, out: *mut f64) -> ZrpStatus {
    guarded(|| {
        if gen.is_null() || out.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "generator or out pointer is null");
        }
        match spectral_gap(&(*gen).gen) {
            Ok(est) => {
                *out = est.value;
                ZrpStatus::ZrpOk
            }
            Err(e) => fail(ZrpStatus::ZrpNoConvergence, e.to_string()),
        }
    })
}

/// Full bound set: gap, log-Sobolev `[lo, up]`, entropy dissipation
/// `[lo, up]`.
#[no_mangle]
pub unsafe extern "C" fn zrp_constants(
    gen: *const ZrpGenerator,
    restarts: u32,
    max_iters: u32,
    seed: u64,
    gap: *mut f64,
    s_lo: *mut f64,
    s_up: *mut f64,
    gamma_lo: *mut f64,
    gamma_up: *mut f64,
) -> ZrpStatus {
    guarded(|| {
        if gen.is_null()
            || gap.is_null()
            || s_lo.is_null()
            || s_up.is_null()
            || gamma_lo.is_null()
            || gamma_up.is_null()
        {
            return fail(ZrpStatus::ZrpNullArgument, "constants output pointers");
        }
        let budget =
            AscentBudget { restarts: restarts as usize, max_iters: max_iters as usize, seed };
        match instance_constants(&(*gen).gen, &budget) {
            Ok(k) => {
                *gap = k.gap;
                *s_lo = k.s_lower.value;
                *s_up = k.s_upper.value;
                *gamma_lo = k.gamma_lower.value;
                *gamma_up = k.gamma_upper;
                ZrpStatus::ZrpOk
            }
            Err(e) => fail(ZrpStatus::ZrpNoConvergence, e.to_string()),
        }
    })
}

/// `Ent_nu(f)` for a function vector of length `zrp_generator_size`.
#[no_mangle]
pub unsafe extern "C" fn zrp_entropy(
    gen: *const ZrpGenerator,
    f: *const f64,
    len: usize,
    out: *mut f64,
) -> ZrpStatus {
    guarded(|| {
        if gen.is_null() || f.is_null() || out.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "entropy arguments");
        }
        if len != (*gen).gen.size() {
            return fail(ZrpStatus::ZrpInvalidArgument, "function length mismatch");
        }
        let values = std::slice::from_raw_parts(f, len);
        match entropy((*gen).gen.stationary(), values) {
            Ok(v) => {
                *out = v;
                ZrpStatus::ZrpOk
            }
            Err(e) => fail(ZrpStatus::ZrpInvalidArgument, e.to_string()),
        }
    })
}

/// Entropy dissipation `E(f, log f)` for strictly positive `f`.
#[no_mangle]
pub unsafe extern "C" fn zrp_dissipation(
    gen: *const ZrpGenerator,
    f: *const f64,
    len: usize,
    out: *mut f64,
) -> ZrpStatus {
    guarded(|| {
        if gen.is_null() || f.is_null() || out.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "dissipation arguments");
        }
        if len != (*gen).gen.size() {
            return fail(ZrpStatus::ZrpInvalidArgument, "function length mismatch");
        }
        let values = std::slice::from_raw_parts(f, len);
        match dissipation(&(*gen).gen, values) {
            Ok(v) => {
                *out = v;
                ZrpStatus::ZrpOk
            }
            Err(e) => fail(ZrpStatus::ZrpInvalidArgument, e.to_string()),
        }
    })
}

/// `f_t = exp(t L) f` by uniformization, written to `f_out` (length
/// `zrp_generator_size`).
#[no_mangle]
pub unsafe extern "C" fn zrp_evolve(
    gen: *const ZrpGenerator,
    f: *const f64,
    len: usize,
    t: f64,
    tol: f64,
    f_out: *mut f64,
) -> ZrpStatus {
    guarded(|| {
        if gen.is_null() || f.is_null() || f_out.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "evolve arguments");
        }
        if len != (*gen).gen.size() {
            return fail(ZrpStatus::ZrpInvalidArgument, "function length mismatch");
        }
        let values = std::slice::from_raw_parts(f, len);
        match evolve(&(*gen).gen, values, t, tol) {
            Ok(result) => {
                std::slice::from_raw_parts_mut(f_out, len).copy_from_slice(&result);
                ZrpStatus::ZrpOk
            }
            Err(e) => fail(ZrpStatus::ZrpNoConvergence, e.to_string()),
        }
    })
}

/// Rate value held by the generator at occupancy `n`.
#[no_mangle]
pub unsafe extern "C" fn zrp_generator_rate_value(
    gen: *const ZrpGenerator,
    n: u32,
    out: *mut f64,
) -> ZrpStatus {
    guarded(|| {
        if gen.is_null() || out.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "generator or out pointer is null");
        }
        *out = (*gen).rate.value(n as usize);
        ZrpStatus::ZrpOk
    })
}

// ---------------------------------------------------------------------------
// Simulator

/// Event-driven simulator. `stationary_start != 0` draws the initial
/// configuration exactly from the canonical measure; otherwise particles
/// start spread evenly.
#[no_mangle]
pub unsafe extern "C" fn zrp_simulator_new(
    rate: *const ZrpRate,
    vertices: u32,
    particles: u32,
    flavor: ZrpFlavor,
    seed: u64,
    replica: u64,
    stationary_start: i32,
    out: *mut *mut ZrpSimulator,
) -> ZrpStatus {
    guarded(|| {
        if rate.is_null() || out.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "rate or out pointer is null");
        }
        let init = if stationary_start != 0 {
            InitialState::Stationary
        } else {
            InitialState::Balanced
        };
        match Simulator::new(
            &(*rate).inner,
            vertices as usize,
            particles as usize,
            flavor.into(),
            seed,
            replica,
            init,
        ) {
            Ok(sim) => {
                *out = Box::into_raw(Box::new(ZrpSimulator { sim, vertices: vertices as usize }));
                ZrpStatus::ZrpOk
            }
            Err(e) => fail(ZrpStatus::ZrpInvalidArgument, e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn zrp_simulator_free(sim: *mut ZrpSimulator) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Plays out every event up to time `t`; the state afterwards is the
/// configuration at that fixed time. Returns the number of events played.
#[no_mangle]
pub unsafe extern "C" fn zrp_simulator_run_until(
    sim: *mut ZrpSimulator,
    t: f64,
    events: *mut u64,
) -> ZrpStatus {
    guarded(|| {
        if sim.is_null() || events.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "simulator or events pointer is null");
        }
        *events = (*sim).sim.run_until(t);
        ZrpStatus::ZrpOk
    })
}

/// Copies the occupation vector; `state` must hold `vertices` entries.
#[no_mangle]
pub unsafe extern "C" fn zrp_simulator_state(
    sim: *const ZrpSimulator,
    state: *mut u32,
) -> ZrpStatus {
    guarded(|| {
        if sim.is_null() || state.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "simulator or state pointer is null");
        }
        let eta = (*sim).sim.state();
        std::slice::from_raw_parts_mut(state, (*sim).vertices).copy_from_slice(eta);
        ZrpStatus::ZrpOk
    })
}

#[no_mangle]
pub unsafe extern "C" fn zrp_simulator_clock(sim: *const ZrpSimulator, out: *mut f64) -> ZrpStatus {
    guarded(|| {
        if sim.is_null() || out.is_null() {
            return fail(ZrpStatus::ZrpNullArgument, "simulator or out pointer is null");
        }
        *out = (*sim).sim.clock();
        ZrpStatus::ZrpOk
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;
    use std::ptr;

    fn new_rate(spec: &str) -> *mut ZrpRate {
        let spec = CString::new(spec).unwrap();
        let mut rate: *mut ZrpRate = ptr::null_mut();
        let status = unsafe { zrp_rate_new(spec.as_ptr(), 32, &mut rate) };
        assert_eq!(status, ZrpStatus::ZrpOk);
        rate
    }

    #[test]
    fn version_and_errors() {
        let v = unsafe { CStr::from_ptr(zrp_version()) };
        assert!(!v.to_bytes().is_empty());

        let mut out: *mut ZrpRate = ptr::null_mut();
        let bad = CString::new("nonsense").unwrap();
        let status = unsafe { zrp_rate_new(bad.as_ptr(), 8, &mut out) };
        assert_eq!(status, ZrpStatus::ZrpInvalidArgument);
        let msg = unsafe { CStr::from_ptr(zrp_last_error_message()) };
        assert!(msg.to_string_lossy().contains("nonsense"));
    }

    #[test]
    fn rate_certify_roundtrip() {
        let rate = new_rate("staircase:2");
        let (mut has, mut delta, mut n0, mut lip) = (0i32, 0.0f64, 0u32, 0.0f64);
        let status = unsafe { zrp_rate_certify(rate, &mut has, &mut delta, &mut n0, &mut lip) };
        assert_eq!(status, ZrpStatus::ZrpOk);
        assert_eq!(has, 1);
        assert_eq!(delta, 2.0);
        assert_eq!(n0, 2);
        assert_eq!(lip, 2.0);

        let mut reg: *mut ZrpRate = ptr::null_mut();
        assert_eq!(unsafe { zrp_rate_regularize(rate, 2, &mut reg) }, ZrpStatus::ZrpOk);
        let mut v = 0.0f64;
        assert_eq!(unsafe { zrp_rate_value(reg, 2, &mut v) }, ZrpStatus::ZrpOk);
        assert!((v - 2.5).abs() < 1e-12);
        unsafe {
            zrp_rate_free(reg);
            zrp_rate_free(rate);
        }
    }

    #[test]
    fn generator_and_constants() {
        let rate = new_rate("linear");
        let mut gen: *mut ZrpGenerator = ptr::null_mut();
        let status = unsafe { zrp_generator_new(rate, 3, 2, ZrpFlavor::ZrpComplete, 0, &mut gen) };
        assert_eq!(status, ZrpStatus::ZrpOk);
        let mut size = 0u64;
        assert_eq!(unsafe { zrp_generator_size(gen, &mut size) }, ZrpStatus::ZrpOk);
        assert_eq!(size, 6);

        let mut gap = 0.0f64;
        assert_eq!(unsafe { zrp_spectral_gap(gen, &mut gap) }, ZrpStatus::ZrpOk);
        assert!(gap > 0.0);

        let ones = vec![1.0f64; size as usize];
        let mut ent = -1.0f64;
        assert_eq!(
            unsafe { zrp_entropy(gen, ones.as_ptr(), ones.len(), &mut ent) },
            ZrpStatus::ZrpOk
        );
        assert!(ent.abs() < 1e-12);

        let mut ft = vec![0.0f64; size as usize];
        assert_eq!(
            unsafe { zrp_evolve(gen, ones.as_ptr(), ones.len(), 0.5, 1e-12, ft.as_mut_ptr()) },
            ZrpStatus::ZrpOk
        );
        assert!(ft.iter().all(|v| (v - 1.0).abs() < 1e-10));

        let (mut g, mut slo, mut sup, mut glo, mut gup) = (0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(
            unsafe {
                zrp_constants(gen, 4, 150, 1, &mut g, &mut slo, &mut sup, &mut glo, &mut gup)
            },
            ZrpStatus::ZrpOk
        );
        assert!(glo <= gup + 1e-8 && slo <= sup + 1e-9);

        // Length mismatch is rejected.
        let mut out = 0.0f64;
        assert_eq!(
            unsafe { zrp_entropy(gen, ones.as_ptr(), 3, &mut out) },
            ZrpStatus::ZrpInvalidArgument
        );
        unsafe {
            zrp_generator_free(gen);
            zrp_rate_free(rate);
        }
    }

    #[test]
    fn simulator_conserves_and_is_deterministic() {
        let rate = new_rate("staircase:2");
        let run = |seed: u64| {
            let mut sim: *mut ZrpSimulator = ptr::null_mut();
            let status = unsafe {
                zrp_simulator_new(rate, 8, 20, ZrpFlavor::ZrpComplete, seed, 0, 1, &mut sim)
            };
            assert_eq!(status, ZrpStatus::ZrpOk);
            let mut events = 0u64;
            assert_eq!(
                unsafe { zrp_simulator_run_until(sim, 50.0, &mut events) },
                ZrpStatus::ZrpOk
            );
            let mut state = vec![0u32; 8];
            assert_eq!(unsafe { zrp_simulator_state(sim, state.as_mut_ptr()) }, ZrpStatus::ZrpOk);
            assert_eq!(state.iter().sum::<u32>(), 20);
            let mut clock = 0.0f64;
            assert_eq!(unsafe { zrp_simulator_clock(sim, &mut clock) }, ZrpStatus::ZrpOk);
            assert!(clock >= 50.0);
            unsafe { zrp_simulator_free(sim) };
            (events, state)
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
        unsafe { zrp_rate_free(rate) };
    }

    #[test]
    fn null_arguments_are_rejected() {
        let mut out = 0.0f64;
        assert_eq!(unsafe { zrp_spectral_gap(ptr::null(), &mut out) }, ZrpStatus::ZrpNullArgument);
        assert_eq!(unsafe { zrp_rate_value(ptr::null(), 1, &mut out) }, ZrpStatus::ZrpNullArgument);
    }
}
