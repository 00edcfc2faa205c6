#include <math.h>
#include <stdio.h>
#include <string.h>

#include "heartnet.h"

int main(void) {
    if (strlen(hn_version()) == 0) return 1;
    if (hn_segmenter_new(NULL) != HN_STATUS_NULL_POINTER || hn_last_error() == NULL) return 2;

    HnSegmenter *seg = NULL;
    if (hn_segmenter_new(&seg) != HN_STATUS_OK || hn_last_error() != NULL) return 3;

    enum { N = 4000 };
    static double x[N], y[N];
    for (int i = 0; i < N; i++) x[i] = sin(0.3 * i) * exp(-0.001 * i);
    double snr = 0.0;
    if (hn_denoise(x, N, y, &snr) != HN_STATUS_OK) return 4;

    size_t count = 0;
    HnStatus s = hn_segment(seg, x, N, 1000, NULL, 0, &count);
    if (s != HN_STATUS_OK && s != HN_STATUS_BUFFER_TOO_SMALL) return 5;

    HnCnn *cnn = NULL;
    if (hn_cnn_load("/nonexistent", &cnn) != HN_STATUS_IO || cnn != NULL) return 6;

    hn_segmenter_free(seg);
    hn_cnn_free(NULL);
    printf("ok %zu\n", count);
    return 0;
}
