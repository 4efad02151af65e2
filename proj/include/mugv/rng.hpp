#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "mugv/tensor.hpp"

namespace mugv {

// Deterministic RNG. Distributions are hand-rolled on top of mt19937_64 so
// streams are identical across standard libraries, which the reproducibility
// contract (same seed -> byte-identical outputs) depends on.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    real uniform() { return static_cast<real>(gen_() >> 11) * 0x1.0p-53; }

    real uniform(real lo, real hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; one fresh pair per two draws.
    real normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        real u1 = uniform();
        real u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        real r = std::sqrt(-2.0 * std::log(u1));
        real a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n).
    int64_t randint(int64_t n) {
        // rejection sampling keeps the draw unbiased
        uint64_t un = static_cast<uint64_t>(n);
        uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x = gen_();
        while (x >= limit) x = gen_();
        return static_cast<int64_t>(x % un);
    }

    // Derives an independent stream; used to give each consumer its own rng.
    Rng fork(uint64_t stream) {
        uint64_t a = gen_();
        return Rng(a ^ (0x9e3779b97f4a7c15ull * (stream + 1)));
    }

    Tensor normal_tensor(std::vector<int64_t> shape, real stddev = 1.0) {
        Tensor t(std::move(shape));
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = stddev * normal();
        return t;
    }

    Tensor uniform_tensor(std::vector<int64_t> shape, real lo, real hi) {
        Tensor t(std::move(shape));
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = uniform(lo, hi);
        return t;
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    real spare_ = 0.0;
};

}  // namespace mugv
