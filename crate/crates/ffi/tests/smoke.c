#include <math.h>
#include <stdio.h>
#include <string.h>

#include "lozo.h"

int main(void) {
    LozoProblem *problem = NULL;
    if (lozo_problem_from_json("{\"kind\": \"quadratic\", \"shapes\": [[6, 5]]}", &problem) != LOZO_STATUS_OK) {
        fprintf(stderr, "%s\n", lozo_last_error());
        return 1;
    }
    LozoParams *params = NULL;
    lozo_params_zeros(problem, &params);
    LozoOptimizerConfig cfg = lozo_optimizer_config_default();
    cfg.alpha = 0.01;
    cfg.nu = 10;
    cfg.total_steps = 3000;
    cfg.sampler = LOZO_SAMPLER_HAAR;
    LozoOptimizer *opt = NULL;
    if (lozo_optimizer_new(LOZO_ALGORITHM_LOZO, &cfg, problem, &opt) != LOZO_STATUS_OK) {
        fprintf(stderr, "%s\n", lozo_last_error());
        return 1;
    }
    double before = 0.0, after = 0.0;
    lozo_problem_loss(problem, params, &before);
    for (uint64_t t = 0; t < cfg.total_steps; t++) {
        if (lozo_optimizer_step(opt, problem, params, NULL) != LOZO_STATUS_OK) {
            fprintf(stderr, "%s\n", lozo_last_error());
            return 1;
        }
    }
    lozo_problem_loss(problem, params, &after);

    LozoStatus s = lozo_optimizer_step(opt, NULL, params, NULL);
    const char *msg = lozo_last_error();
    int null_ok = s == LOZO_STATUS_NULL_POINTER && msg != NULL && strstr(msg, "problem") != NULL;

    lozo_optimizer_free(opt);
    lozo_params_free(params);
    lozo_problem_free(problem);
    printf("%g %g %d\n", before, after, null_ok);
    return (after < 0.5 * before && isfinite(after) && null_ok) ? 0 : 1;
}
