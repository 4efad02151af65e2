#include "mugv/graph.hpp"

namespace mugv {

ParamVars register_params(Tape& tape, const ParameterSet& params, bool requires_grad, const std::string& prefix) {
    ParamVars out;
    for (const auto& [name, p] : params.entries())
        if (name.rfind(prefix, 0) == 0) out.put(name, tape.leaf(p.value, requires_grad));
    return out;
}

std::map<std::string, Tensor> collect_grads(Tape& tape, const ParamVars& vars) {
    std::map<std::string, Tensor> out;
    for (const auto& [name, v] : vars.all()) out[name] = tape.grad(v);
    return out;
}

}  // namespace mugv
