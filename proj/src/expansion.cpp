#include "mugv/expansion.hpp"

#include <cmath>
#include <cstdlib>
#include <set>

#include "mugv/autodiff.hpp"

namespace mugv::expand {

std::vector<real> split_exact(real w, int64_t e, real eps_scale, Rng& rng) {
    if (e < 1) throw ConfigError("expansion factor must be >= 1");
    if (!(eps_scale >= 0.0) || !std::isfinite(eps_scale))
        throw ConfigError("eps_scale must be finite and >= 0");
    if (!std::isfinite(w)) throw NumericError("cannot split a non-finite weight");
    std::vector<real> parts(static_cast<size_t>(e), 0.0);
    if (e == 1) {
        parts[0] = w;
        return parts;
    }
    // near the subnormal floor there is no room for exact arithmetic;
    // hand the value to the first part unchanged
    if (w != 0.0 && std::fabs(w) < 1e-290) {
        parts[0] = w;
        return parts;
    }
    if (w == 0.0 && eps_scale < 1e-280) return parts;
    if (eps_scale == 0.0 && e == 2) {
        parts[0] = w / 2;
        parts[1] = w / 2;
        return parts;
    }

    // frame: w = m * 2^t with m a mantissa-sized integer; all parts and
    // all partial sums stay integer multiples of 2^t below 2^53, so
    // every addition in the reassembly is exact
    int64_t m = 0;
    int t = 0;
    if (w != 0.0) {
        t = std::ilogb(w) - 52;
        m = std::llround(std::ldexp(w, -t));
    } else {
        t = std::ilogb(eps_scale) - 50;
    }

    int64_t q = m / e;
    int64_t rem = m - q * e;
    int64_t sign = (rem > 0) - (rem < 0);
    int64_t nrem = sign * rem;

    int64_t P = 0;
    if (eps_scale > 0.0) {
        real quanta = std::ldexp(eps_scale / static_cast<real>(e), -t);
        int64_t cap = ((int64_t{1} << 53) - std::llabs(m)) / (2 * e);
        P = std::min<int64_t>(static_cast<int64_t>(std::min(quanta, 1.0e18)), cap);
        if (P < 0) P = 0;
    }

    int64_t sum_d = 0;
    for (int64_t k = 0; k < e; ++k) {
        int64_t d;
        if (k + 1 < e) {
            d = (P > 0) ? rng.randint(2 * P + 1) - P : 0;
            sum_d += d;
        } else {
            d = -sum_d;  // zero-sum across the tile group
        }
        int64_t pi = q + (k < nrem ? sign : 0) + d;
        parts[static_cast<size_t>(k)] = std::ldexp(static_cast<real>(pi), t);
    }
    return parts;
}

namespace {

// rows tiled e times per chunk, columns split into e zero-sum blocks
Tensor widen_in_out(const Tensor& W, int64_t e, int64_t chunks, real eps, Rng& rng) {
    int64_t R = W.dim(0) / chunks, C = W.dim(1);
    Tensor out({W.dim(0) * e, C * e});
    for (int64_t ch = 0; ch < chunks; ++ch)
        for (int64_t j = 0; j < e; ++j)
            for (int64_t r = 0; r < R; ++r)
                for (int64_t c = 0; c < C; ++c) {
                    std::vector<real> parts = split_exact(W[(ch * R + r) * C + c], e, eps, rng);
                    for (int64_t k = 0; k < e; ++k)
                        out[((ch * e + j) * R + r) * (C * e) + k * C + c] = parts[static_cast<size_t>(k)];
                }
    return out;
}

Tensor widen_in_only(const Tensor& W, int64_t e, real eps, Rng& rng) {
    int64_t R = W.dim(0), C = W.dim(1);
    Tensor out({R, C * e});
    for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < C; ++c) {
            std::vector<real> parts = split_exact(W[r * C + c], e, eps, rng);
            for (int64_t k = 0; k < e; ++k) out[r * (C * e) + k * C + c] = parts[static_cast<size_t>(k)];
        }
    return out;
}

Tensor tile_rows(const Tensor& W, int64_t e, int64_t chunks) {
    int64_t R = W.dim(0) / chunks, C = W.dim(1);
    Tensor out({W.dim(0) * e, C});
    for (int64_t ch = 0; ch < chunks; ++ch)
        for (int64_t j = 0; j < e; ++j)
            for (int64_t r = 0; r < R; ++r)
                for (int64_t c = 0; c < C; ++c)
                    out[((ch * e + j) * R + r) * C + c] = W[(ch * R + r) * C + c];
    return out;
}

Tensor tile_vec(const Tensor& v, int64_t e, int64_t chunks, real scale_div) {
    int64_t n = v.dim(0) / chunks;
    Tensor out({v.dim(0) * e});
    for (int64_t ch = 0; ch < chunks; ++ch)
        for (int64_t j = 0; j < e; ++j)
            for (int64_t i = 0; i < n; ++i) out[(ch * e + j) * n + i] = v[ch * n + i] / scale_div;
    return out;
}

void check_chunks(const std::string& name, const Tensor& t, int64_t chunks) {
    if (t.dim(0) % chunks != 0)
        throw ConfigError("tensor \"" + name + "\" is not divisible into " + std::to_string(chunks) +
                          " chunks");
}

}  // namespace

ExpandedLinear expand_linear(const Tensor& W, const Tensor& b, const ExpansionConfig& cfg) {
    if (cfg.e < 1) throw ConfigError("expansion factor must be >= 1");
    if (W.rank() != 2) throw DimensionError("weight must be rank 2, got " + W.shape_str());
    if (b.rank() != 1 || b.dim(0) != W.dim(0))
        throw DimensionError("bias must match the weight's output dimension");
    Rng rng(cfg.seed);
    ExpandedLinear out;
    out.w = widen_in_out(W, cfg.e, 1, cfg.eps_scale, rng);
    real div = (cfg.bias_mode == BiasMode::literal_eq2) ? static_cast<real>(cfg.e) : 1.0;
    out.b = tile_vec(b, cfg.e, 1, div);
    return out;
}

ArchMap dit_arch_map(const dit::DitConfig& cfg) {
    ArchMap m;
    m["dit.patch.w"] = {Role::OutOnly, 1};
    m["dit.patch.b"] = {Role::Bias, 1};
    m["dit.gmlp.in.w"] = {Role::OutOnly, 1};
    m["dit.gmlp.in.b"] = {Role::Bias, 1};
    m["dit.gmlp.out.w"] = {Role::InOut, 1};
    m["dit.gmlp.out.b"] = {Role::Bias, 1};
    m["dit.mod.w"] = {Role::InOut, 6};
    m["dit.mod.b"] = {Role::Bias, 6};
    for (int64_t i = 0; i < cfg.depth; ++i) {
        std::string p = "dit.blk." + std::to_string(i) + ".";
        m[p + "gscale"] = {Role::TileVec, 1};
        m[p + "attn.qkv.w"] = {Role::InOut, 3};
        m[p + "attn.qkv.b"] = {Role::Bias, 3};
        m[p + "attn.temp"] = {Role::TileVec, 1};
        m[p + "attn.out.w"] = {Role::InOut, 1};
        m[p + "attn.out.b"] = {Role::Bias, 1};
        m[p + "xattn.prenorm.g"] = {Role::TileVec, 1};
        m[p + "xattn.q.w"] = {Role::InOut, 1};
        m[p + "xattn.q.b"] = {Role::Bias, 1};
        m[p + "xattn.kv.w"] = {Role::OutOnly, 2};
        m[p + "xattn.kv.b"] = {Role::Bias, 2};
        m[p + "xattn.out.w"] = {Role::InOut, 1};
        m[p + "xattn.out.b"] = {Role::Bias, 1};
        m[p + "xattn.postnorm.g"] = {Role::TileVec, 1};
        m[p + "ffn.in.w"] = {Role::InOut, 1};
        m[p + "ffn.in.b"] = {Role::Bias, 1};
        m[p + "ffn.out.w"] = {Role::InOut, 1};
        m[p + "ffn.out.b"] = {Role::Bias, 1};
    }
    m["dit.final.g"] = {Role::TileVec, 1};
    m["dit.final.w"] = {Role::InOut, 1};
    m["dit.final.b"] = {Role::Bias, 1};
    m["dit.out.w"] = {Role::InOnly, 1};
    m["dit.out.b"] = {Role::Fixed, 1};
    return m;
}

dit::DitConfig expanded_config(const dit::DitConfig& cfg, int64_t e) {
    if (e < 1) throw ConfigError("expansion factor must be >= 1");
    dit::DitConfig big = cfg;
    big.hidden = cfg.hidden * e;
    big.heads = cfg.heads * e;
    dit::validate(big);
    return big;
}

ParameterSet expand_model(const ParameterSet& params, const ArchMap& arch, const ExpansionConfig& cfg) {
    if (cfg.e < 1) throw ConfigError("expansion factor must be >= 1");
    for (const auto& name : params.names())
        if (arch.find(name) == arch.end())
            throw ConfigError("no expansion role for tensor \"" + name + "\"");
    for (const auto& [name, spec] : arch)
        if (!params.has(name)) throw ConfigError("expansion role names missing tensor \"" + name + "\"");

    real bias_div = (cfg.bias_mode == BiasMode::literal_eq2) ? static_cast<real>(cfg.e) : 1.0;
    Rng rng(cfg.seed);
    ParameterSet out;
    for (const auto& [name, spec] : arch) {
        const Tensor& src = params.at(name);
        check_chunks(name, src, spec.chunks);
        switch (spec.role) {
            case Role::InOut:
                out.set(name, widen_in_out(src, cfg.e, spec.chunks, cfg.eps_scale, rng));
                break;
            case Role::OutOnly:
                out.set(name, tile_rows(src, cfg.e, spec.chunks));
                break;
            case Role::InOnly:
                out.set(name, widen_in_only(src, cfg.e, cfg.eps_scale, rng));
                break;
            case Role::Bias:
                out.set(name, tile_vec(src, cfg.e, spec.chunks, bias_div));
                break;
            case Role::TileVec:
                out.set(name, tile_vec(src, cfg.e, spec.chunks, 1.0));
                break;
            case Role::Fixed:
                out.set(name, src);
                break;
        }
    }
    return out;
}

namespace {

// widened tap (N, e*H) against the original (N, H), each copy compared
real replicated_deviation(const Tensor& big, const Tensor& small, int64_t e) {
    int64_t N = small.dim(0), H = small.dim(1);
    real worst = 0.0;
    for (int64_t r = 0; r < N; ++r)
        for (int64_t k = 0; k < e; ++k)
            for (int64_t j = 0; j < H; ++j)
                worst = std::max(worst, std::fabs(big[r * (H * e) + k * H + j] - small[r * H + j]));
    return worst;
}

}  // namespace

ExpansionReport verify_preservation(const ParameterSet& orig, const ParameterSet& expanded,
                                    const dit::DitConfig& cfg, int64_t e,
                                    const std::vector<ProbeInput>& inputs, real tol) {
    dit::DitConfig bigcfg = expanded_config(cfg, e);
    std::vector<std::string> na = orig.names(), nb = expanded.names();
    if (std::set<std::string>(na.begin(), na.end()) != std::set<std::string>(nb.begin(), nb.end()))
        throw ConfigError("original and expanded models name different tensors");

    ExpansionReport rep;
    rep.params_before = orig.total_elements();
    rep.params_after = expanded.total_elements();
    rep.tol = tol;
    rep.layers.push_back({"patch", 0.0});
    for (int64_t i = 0; i < cfg.depth; ++i) rep.layers.push_back({"block." + std::to_string(i), 0.0});
    rep.layers.push_back({"final", 0.0});
    rep.layers.push_back({"velocity", 0.0});

    for (const ProbeInput& in : inputs) {
        Tensor ts = Tensor::full({in.geom.n()}, in.t);
        std::vector<Var> small_taps, big_taps;

        Tape ta;
        ParamVars pa = register_params(ta, orig, false, "dit.");
        dit::velocity_rows_graph(ta, ta.constant(in.geom.tokens), in.geom, ta.constant(in.text), ts,
                                 in.fps, pa, cfg, &small_taps);
        Tape tb;
        ParamVars pb = register_params(tb, expanded, false, "dit.");
        dit::velocity_rows_graph(tb, tb.constant(in.geom.tokens), in.geom, tb.constant(in.text), ts,
                                 in.fps, pb, bigcfg, &big_taps);

        if (small_taps.size() != rep.layers.size() || big_taps.size() != rep.layers.size())
            throw ConfigError("tap count mismatch between the two models");
        for (size_t i = 0; i < rep.layers.size(); ++i) {
            const Tensor& sv = ta.val(small_taps[i]);
            const Tensor& bv = tb.val(big_taps[i]);
            real dev = (i + 1 == rep.layers.size()) ? max_abs_diff(bv, sv)
                                                    : replicated_deviation(bv, sv, e);
            rep.layers[i].max_dev = std::max(rep.layers[i].max_dev, dev);
        }
    }
    for (const auto& l : rep.layers) rep.global_dev = std::max(rep.global_dev, l.max_dev);
    rep.pass = rep.global_dev <= tol;
    return rep;
}

}  // namespace mugv::expand
