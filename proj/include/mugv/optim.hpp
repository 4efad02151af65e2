#pragma once

#include <map>
#include <string>

#include "mugv/params.hpp"

namespace mugv {

// AdamW with decoupled weight decay. Moment buffers key off parameter names,
// so the update order (sorted names) is deterministic.
class AdamW {
public:
    real lr = 1e-3;
    real beta1 = 0.9;
    real beta2 = 0.999;
    real eps = 1e-8;
    real weight_decay = 0.0;

    explicit AdamW(real lr_ = 1e-3) : lr(lr_) {}

    void update(ParameterSet& params, const std::map<std::string, Tensor>& grads);

    int64_t step_count() const { return step_; }

private:
    int64_t step_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

}  // namespace mugv
