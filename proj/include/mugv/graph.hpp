#pragma once

#include <map>
#include <string>

#include "mugv/autodiff.hpp"
#include "mugv/params.hpp"

namespace mugv {

// Tape handles for a set of named parameters; one graph build registers the
// whole ParameterSet once, then layers look tensors up by name.
class ParamVars {
public:
    Var at(const std::string& name) const {
        auto it = vars_.find(name);
        if (it == vars_.end()) throw InputError("no parameter var named \"" + name + "\"");
        return it->second;
    }
    void put(const std::string& name, Var v) { vars_[name] = v; }
    void merge(const ParamVars& other) {
        for (const auto& [name, v] : other.all()) vars_[name] = v;
    }
    const std::map<std::string, Var>& all() const { return vars_; }

private:
    std::map<std::string, Var> vars_;
};

// Registers every tensor whose name starts with prefix as a tape leaf.
ParamVars register_params(Tape& tape, const ParameterSet& params, bool requires_grad,
                          const std::string& prefix = "");

// Gradients of the last backward() per registered parameter.
std::map<std::string, Tensor> collect_grads(Tape& tape, const ParamVars& vars);

}  // namespace mugv
