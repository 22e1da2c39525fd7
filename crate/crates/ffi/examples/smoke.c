/* Links against the static library and exercises a few entry points. */
#include <math.h>
#include <stdio.h>
#include <stdlib.h>

#include "incremental_audio.h"

int main(void) {
    double lambda = 0.0;
    if (ia_adaptive_lambda(15, 11, 5.0, &lambda) != IA_STATUS_OK || fabs(lambda - 2.581989) > 1e-6) {
        fprintf(stderr, "lambda %f\n", lambda);
        return 1;
    }
    if (ia_adaptive_lambda(3, 3, 5.0, &lambda) != IA_STATUS_PARAMETER || ia_last_error_message() == NULL) {
        return 2;
    }

    size_t n = 16000, frames = 0;
    float *pcm = calloc(n, sizeof(float));
    if (ia_extract_log_mel(pcm, n, 16000, NULL, 0, &frames) != IA_STATUS_OK || frames != 49) {
        fprintf(stderr, "frames %zu\n", frames);
        return 3;
    }
    float *mel = malloc(frames * 40 * sizeof(float));
    if (ia_extract_log_mel(pcm, n, 16000, mel, frames * 40, &frames) != IA_STATUS_OK) {
        return 4;
    }
    IaLearner *learner = NULL;
    if (ia_learner_load("/nonexistent.ckpt", &learner) != IA_STATUS_IO || learner != NULL) {
        return 5;
    }
    ia_learner_free(learner);
    free(mel);
    free(pcm);
    puts("ok");
    return 0;
}
