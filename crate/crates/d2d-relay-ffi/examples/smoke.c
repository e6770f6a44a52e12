/* Runs a two-drop experiment and prints its CSV. */
#include <stdio.h>
#include "d2d_relay.h"

int main(void) {
    const char *spec = "mode = \"robust\"\nnum_drops = 2\nmaster_seed = 3\n";
    D2dExperiment *exp = NULL;
    D2dResults *res = NULL;
    char *csv = NULL;
    if (d2d_experiment_from_toml(spec, &exp) != D2D_STATUS_OK) goto fail;
    if (d2d_experiment_run(exp, 1, &res) != D2D_STATUS_OK) goto fail;
    D2dMetricsRow row;
    if (d2d_results_row(res, 0, &row) != D2D_STATUS_OK) goto fail;
    if (d2d_results_to_csv(res, &csv) != D2D_STATUS_OK) goto fail;
    printf("%s", csv);
    printf("drops=%zu sum_rate=%.6e\n", row.num_drops, row.sum_rate);
    if (d2d_results_row(res, 5, &row) != D2D_STATUS_OUT_OF_RANGE) goto fail;
    d2d_string_free(csv);
    d2d_results_free(res);
    d2d_experiment_free(exp);
    return 0;
fail:
    fprintf(stderr, "error: %s\n", d2d_last_error_message());
    return 1;
}
