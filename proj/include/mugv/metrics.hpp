#pragma once

#include "mugv/tensor.hpp"

namespace mugv {

struct EvalMetrics {
    real psnr;  // dB, capped at 100
    real ssim;  // unitless, 1 for identical inputs
};

// Fidelity metrics between two clips of identical (T, C, H, W) shape with
// values in [-1, 1]. Both are mapped to [0, 1] first. PSNR uses the full
// tensor MSE with max value 1 and caps at 100 dB for MSE < 1e-10. SSIM is
// computed per frame and channel over non-overlapping 8x8 windows with
// C1 = 0.01^2, C2 = 0.03^2 and population variances, then averaged over
// frames; partial edge tiles are ignored, so H and W must be at least 8.
EvalMetrics eval_metrics(const Tensor& reference, const Tensor& candidate);

}  // namespace mugv
