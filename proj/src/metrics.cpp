#include "mugv/metrics.hpp"

#include <cmath>

namespace mugv {

EvalMetrics eval_metrics(const Tensor& reference, const Tensor& candidate) {
    require_same_shape(reference, candidate, "eval_metrics");
    if (reference.rank() != 4) throw DimensionError("eval_metrics: clips must be (T, C, H, W)");
    int64_t T = reference.dim(0), C = reference.dim(1), H = reference.dim(2), W = reference.dim(3);
    if (H < 8 || W < 8) throw DimensionError("eval_metrics: frames must be at least 8x8 for SSIM windows");

    // both clips shifted from [-1, 1] to [0, 1]
    real mse = 0.0;
    for (int64_t i = 0; i < reference.numel(); ++i) {
        real d = (reference[i] - candidate[i]) * 0.5;
        mse += d * d;
    }
    mse /= static_cast<real>(reference.numel());
    real psnr = mse < 1e-10 ? 100.0 : 10.0 * std::log10(1.0 / mse);

    const real c1 = 0.01 * 0.01;
    const real c2 = 0.03 * 0.03;
    const int64_t win = 8;
    real ssim_sum = 0.0;
    for (int64_t t = 0; t < T; ++t) {
        real frame_sum = 0.0;
        int64_t tiles = 0;
        for (int64_t c = 0; c < C; ++c) {
            const real* x = reference.data() + (t * C + c) * H * W;
            const real* y = candidate.data() + (t * C + c) * H * W;
            for (int64_t ti = 0; ti + win <= H; ti += win)
                for (int64_t tj = 0; tj + win <= W; tj += win) {
                    real sx = 0.0, sy = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
                    for (int64_t i = ti; i < ti + win; ++i)
                        for (int64_t j = tj; j < tj + win; ++j) {
                            real a = (x[i * W + j] + 1.0) * 0.5;
                            real b = (y[i * W + j] + 1.0) * 0.5;
                            sx += a;
                            sy += b;
                            sxx += a * a;
                            syy += b * b;
                            sxy += a * b;
                        }
                    real n = static_cast<real>(win * win);
                    real mx = sx / n, my = sy / n;
                    real vx = sxx / n - mx * mx;
                    real vy = syy / n - my * my;
                    real cov = sxy / n - mx * my;
                    frame_sum += (2.0 * mx * my + c1) * (2.0 * cov + c2) /
                                 ((mx * mx + my * my + c1) * (vx + vy + c2));
                    ++tiles;
                }
        }
        ssim_sum += frame_sum / static_cast<real>(tiles);
    }
    return {psnr, ssim_sum / static_cast<real>(T)};
}

}  // namespace mugv
