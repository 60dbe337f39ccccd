/* C interface to the zero-range dynamics laboratory. */

#ifndef ZRPLAB_H
#define ZRPLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Jump topology selector for generator and simulator constructors.
 */
typedef enum ZrpFlavor {
  ZrpComplete = 0,
  ZrpLocal = 1,
} ZrpFlavor;

/**
 * Status codes returned by every entry point.
 */
typedef enum ZrpStatus {
  ZrpOk = 0,
  ZrpNullArgument = 1,
  ZrpInvalidArgument = 2,
  ZrpUtf8 = 3,
  ZrpCapExceeded = 4,
  ZrpNoConvergence = 5,
  ZrpIo = 6,
  ZrpInternal = 7,
} ZrpStatus;

/**
 * Opaque generator handle; owns the enumerated space, the rate, and the
 * canonical stationary vector.
 */
typedef struct ZrpGenerator ZrpGenerator;

/**
 * Opaque rate function handle.
 */
typedef struct ZrpRate ZrpRate;

/**
 * Opaque event-driven simulator handle.
 */
typedef struct ZrpSimulator ZrpSimulator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *zrp_version(void);

/**
 * Description of the most recent failure on this thread; valid until the
 * next failing call.
 */
const char *zrp_last_error_message(void);

/**
 * Builds a rate function from a spec string: `linear`, `constant`,
 * `staircase:<p>`, or a path to a rate table file. The table covers
 * `0..=n_max` with an affine tail beyond.
 */
enum ZrpStatus zrp_rate_new(const char *spec, uint32_t n_max, struct ZrpRate **out);

void zrp_rate_free(struct ZrpRate *rate);

/**
 * Evaluates `c(n)` (affine tail beyond the table).
 */
enum ZrpStatus zrp_rate_value(const struct ZrpRate *rate, uint32_t n, double *out);

/**
 * Certifies the increment margin and Lipschitz bound. `has_margin` is 0
 * when no `(delta, n0)` pair exists; `delta`/`n0` are zeroed in that case.
 */
enum ZrpStatus zrp_rate_certify(const struct ZrpRate *rate,
                                int32_t *has_margin,
                                double *delta,
                                uint32_t *n0,
                                double *lipschitz);

/**
 * Uniformly increasing regularization with stencil width `n0`.
 */
enum ZrpStatus zrp_rate_regularize(const struct ZrpRate *rate, uint32_t n0, struct ZrpRate **out);

/**
 * Solves the fugacity for target density `rho`.
 */
enum ZrpStatus zrp_fugacity_solve(const struct ZrpRate *rate,
                                  double rho,
                                  double *alpha,
                                  double *sigma2,
                                  double *alpha_prime);

/**
 * One-coordinate marginal of the canonical measure on `vertices` sites
 * with `particles` particles. `weights` must hold `particles + 1`
 * doubles.
 */
enum ZrpStatus zrp_canonical_marginal(const struct ZrpRate *rate,
                                      uint32_t vertices,
                                      uint32_t particles,
                                      double *weights);

/**
 * One-vertex entropy dissipation constant (ascent lower bound).
 */
enum ZrpStatus zrp_one_vertex_constant(const struct ZrpRate *rate,
                                       uint32_t vertices,
                                       uint32_t particles,
                                       uint32_t restarts,
                                       uint32_t max_iters,
                                       uint64_t seed,
                                       double *out);

/**
 * Enumerates the configuration space and assembles the generator. Fails
 * with `ZrpCapExceeded` when the space is larger than `state_cap`
 * (pass 0 for the default cap).
 */
enum ZrpStatus zrp_generator_new(const struct ZrpRate *rate,
                                 uint32_t vertices,
                                 uint32_t particles,
                                 enum ZrpFlavor flavor,
                                 uint64_t state_cap,
                                 struct ZrpGenerator **out);

void zrp_generator_free(struct ZrpGenerator *gen);

/**
 * Number of enumerated configurations.
 */
enum ZrpStatus zrp_generator_size(const struct ZrpGenerator *gen, uint64_t *out);

/**
 * Copies the canonical stationary vector; `weights` must hold
 * `zrp_generator_size` doubles.
 */
enum ZrpStatus zrp_generator_stationary(const struct ZrpGenerator *gen, double *weights);

/**
 * Point estimate of the spectral gap.
 */
enum ZrpStatus zrp_spectral_gap(const struct ZrpGenerator *gen, double *out);

/**
 * Full bound set: gap, log-Sobolev `[lo, up]`, entropy dissipation
 * `[lo, up]`.
 */
enum ZrpStatus zrp_constants(const struct ZrpGenerator *gen,
                             uint32_t restarts,
                             uint32_t max_iters,
                             uint64_t seed,
                             double *gap,
                             double *s_lo,
                             double *s_up,
                             double *gamma_lo,
                             double *gamma_up);

/**
 * `Ent_nu(f)` for a function vector of length `zrp_generator_size`.
 */
enum ZrpStatus zrp_entropy(const struct ZrpGenerator *gen,
                           const double *f,
                           uintptr_t len,
                           double *out);

/**
 * Entropy dissipation `E(f, log f)` for strictly positive `f`.
 */
enum ZrpStatus zrp_dissipation(const struct ZrpGenerator *gen,
                               const double *f,
                               uintptr_t len,
                               double *out);

/**
 * `f_t = exp(t L) f` by uniformization, written to `f_out` (length
 * `zrp_generator_size`).
 */
enum ZrpStatus zrp_evolve(const struct ZrpGenerator *gen,
                          const double *f,
                          uintptr_t len,
                          double t,
                          double tol,
                          double *f_out);

/**
 * Rate value held by the generator at occupancy `n`.
 */
enum ZrpStatus zrp_generator_rate_value(const struct ZrpGenerator *gen, uint32_t n, double *out);

/**
 * Event-driven simulator. `stationary_start != 0` draws the initial
 * configuration exactly from the canonical measure; otherwise particles
 * start spread evenly.
 */
enum ZrpStatus zrp_simulator_new(const struct ZrpRate *rate,
                                 uint32_t vertices,
                                 uint32_t particles,
                                 enum ZrpFlavor flavor,
                                 uint64_t seed,
                                 uint64_t replica,
                                 int32_t stationary_start,
                                 struct ZrpSimulator **out);

void zrp_simulator_free(struct ZrpSimulator *sim);

/**
 * Plays out every event up to time `t`; the state afterwards is the
 * configuration at that fixed time. Returns the number of events played.
 */
enum ZrpStatus zrp_simulator_run_until(struct ZrpSimulator *sim, double t, uint64_t *events);

/**
 * Copies the occupation vector; `state` must hold `vertices` entries.
 */
enum ZrpStatus zrp_simulator_state(const struct ZrpSimulator *sim, uint32_t *state);

enum ZrpStatus zrp_simulator_clock(const struct ZrpSimulator *sim, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ZRPLAB_H */
