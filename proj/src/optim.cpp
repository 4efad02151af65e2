#include "mugv/optim.hpp"

#include <cmath>

namespace mugv {

void AdamW::update(ParameterSet& params, const std::map<std::string, Tensor>& grads) {
    ++step_;
    real bc1 = 1.0 - std::pow(beta1, static_cast<real>(step_));
    real bc2 = 1.0 - std::pow(beta2, static_cast<real>(step_));
    for (const auto& [name, g] : grads) {
        Tensor& w = params.at(name);
        require_same_shape(w, g, "AdamW::update");
        Tensor& m = m_.try_emplace(name, Tensor::zeros(w.shape())).first->second;
        Tensor& v = v_.try_emplace(name, Tensor::zeros(w.shape())).first->second;
        for (int64_t i = 0; i < w.numel(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            real mh = m[i] / bc1;
            real vh = v[i] / bc2;
            w[i] -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * w[i]);
        }
    }
}

}  // namespace mugv
