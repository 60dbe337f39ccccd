/* Minimal consumer of the zrplab C API.
 *
 * Build (after `cargo build -p zrplab-ffi --release`):
 *   cc -Icrates/zrplab-ffi/include crates/zrplab-ffi/examples/smoke.c \
 *      target/release/libzrplab_ffi.a -lpthread -ldl -lm -o smoke
 */
#include <stdio.h>
#include <stdlib.h>

#include "zrplab.h"

static void check(ZrpStatus status, const char *what) {
    if (status != ZrpOk) {
        fprintf(stderr, "%s failed: %s\n", what, zrp_last_error_message());
        exit(1);
    }
}

int main(void) {
    printf("zrplab %s\n", zrp_version());

    ZrpRate *rate = NULL;
    check(zrp_rate_new("staircase:2", 32, &rate), "rate_new");

    int has_margin = 0;
    double delta = 0.0, lip = 0.0;
    uint32_t n0 = 0;
    check(zrp_rate_certify(rate, &has_margin, &delta, &n0, &lip), "certify");
    printf("margin: %s, delta=%g n0=%u lip=%g\n", has_margin ? "yes" : "no", delta, n0, lip);

    ZrpGenerator *gen = NULL;
    check(zrp_generator_new(rate, 4, 3, ZrpComplete, 0, &gen), "generator_new");
    uint64_t size = 0;
    check(zrp_generator_size(gen, &size), "size");

    double gap = 0, s_lo = 0, s_up = 0, gamma_lo = 0, gamma_up = 0;
    check(zrp_constants(gen, 6, 250, 42, &gap, &s_lo, &s_up, &gamma_lo, &gamma_up), "constants");
    printf("L=4 N=3: %llu states, gap=%.6f s=[%.4f, %.4f] gamma=[%.4f, %.4f]\n",
           (unsigned long long)size, gap, s_lo, s_up, gamma_lo, gamma_up);

    ZrpSimulator *sim = NULL;
    check(zrp_simulator_new(rate, 16, 48, ZrpComplete, 7, 0, 1, &sim), "simulator_new");
    uint64_t events = 0;
    check(zrp_simulator_run_until(sim, 100.0, &events), "run_until");
    uint32_t state[16];
    check(zrp_simulator_state(sim, state), "state");
    uint32_t total = 0;
    for (int x = 0; x < 16; x++) total += state[x];
    printf("simulated %llu events; %u particles conserved\n", (unsigned long long)events, total);

    zrp_simulator_free(sim);
    zrp_generator_free(gen);
    zrp_rate_free(rate);
    return 0;
}
