#pragma once

#include <map>
#include <string>
#include <vector>

#include "mugv/dit.hpp"
#include "mugv/params.hpp"
#include "mugv/rng.hpp"
#include "mugv/tensor.hpp"

namespace mugv::expand {

enum class BiasMode { preserve_function, literal_eq2 };

struct ExpansionConfig {
    int64_t e = 2;          // width multiplier
    real eps_scale = 0.0;   // perturbation half-range per weight entry
    BiasMode bias_mode = BiasMode::preserve_function;
    uint64_t seed = 0;
};

// Splits a weight entry into e addends that restore it exactly: the
// left-to-right floating-point sum of the parts equals w bit for bit,
// because every partial sum is an integer multiple of one shared power
// of two that fits in the mantissa. Perturbations are zero-sum integer
// noise in that frame, drawn within eps_scale/e per part and clipped
// where a full mantissa leaves no headroom. e == 1 returns {w}; with
// eps_scale == 0 and e == 2 both parts are exactly w/2.
std::vector<real> split_exact(real w, int64_t e, real eps_scale, Rng& rng);

struct ExpandedLinear {
    Tensor w;
    Tensor b;
};

// (d_out, d_in) -> (e*d_out, e*d_in). Each row block's e column blocks
// sum to the original matrix exactly, so replicated inputs produce
// replicated outputs up to dot-product rounding. preserve_function
// tiles the bias; literal_eq2 tiles and divides by e, which shifts
// every output by b*(1-1/e).
ExpandedLinear expand_linear(const Tensor& W, const Tensor& b, const ExpansionConfig& cfg);

enum class Role {
    InOut,    // both ends widen: row-tiled, zero-sum column blocks
    OutOnly,  // input dimension fixed: rows tiled verbatim
    InOnly,   // output dimension fixed: zero-sum column blocks only
    Bias,     // tiled per chunk; literal_eq2 divides by e
    TileVec,  // gains, temperatures: tiled per chunk, never scaled
    Fixed,    // copied unchanged
};

struct RoleSpec {
    Role role = Role::InOut;
    int64_t chunks = 1;  // stacked sub-matrices sharing one weight (qkv = 3)
};

using ArchMap = std::map<std::string, RoleSpec>;

// Role assignment for every tensor the token transformer owns.
ArchMap dit_arch_map(const dit::DitConfig& cfg);

// Widened copy of a config: hidden and heads scale by e, head_dim and
// the rotary split stay fixed so duplicated heads see identical phases.
dit::DitConfig expanded_config(const dit::DitConfig& cfg, int64_t e);

// Expands every tensor according to its role. Depth is unchanged. The
// name sets of params and arch must match exactly.
ParameterSet expand_model(const ParameterSet& params, const ArchMap& arch, const ExpansionConfig& cfg);

struct LayerDeviation {
    std::string layer;
    real max_dev = 0.0;
};

struct ExpansionReport {
    std::vector<LayerDeviation> layers;
    real global_dev = 0.0;
    int64_t params_before = 0;
    int64_t params_after = 0;
    real tol = 0.0;
    bool pass = false;
};

struct ProbeInput {
    dit::TokenGrid geom;
    Tensor text;
    real t = 0.5;
    real fps = 8.0;
};

// Runs the original and the widened model on the same inputs and
// compares activations layer by layer, reading the widened model's
// hidden vectors as e stacked copies of the original width.
ExpansionReport verify_preservation(const ParameterSet& orig, const ParameterSet& expanded,
                                    const dit::DitConfig& cfg, int64_t e,
                                    const std::vector<ProbeInput>& inputs, real tol);

}  // namespace mugv::expand
