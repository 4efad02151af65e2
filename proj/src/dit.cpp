#include "mugv/dit.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "mugv/errors.hpp"

namespace mugv::dit {

namespace {

constexpr real kNormEps = 1e-6;
// Sinusoidal features per global scalar; timestep is stretched so [0, 1]
// sweeps the full frequency range.
constexpr int64_t kFreqDim = 32;
constexpr real kTimestepScale = 1000.0;

std::string blk(int64_t i, const char* suffix) {
    return "dit.blk." + std::to_string(i) + "." + suffix;
}

Tensor linear_w(Rng& rng, int64_t out, int64_t in) {
    return rng.normal_tensor({out, in}, 1.0 / std::sqrt(static_cast<real>(in)));
}

void sinusoid_features(real s, real* out) {
    int64_t half = kFreqDim / 2;
    for (int64_t i = 0; i < half; ++i) {
        real freq = std::exp(-(std::log(10000.0) * static_cast<real>(i)) / static_cast<real>(half));
        out[i] = std::cos(s * freq);
        out[half + i] = std::sin(s * freq);
    }
}

}  // namespace

DitConfig desk_config() { return DitConfig{}; }

DitConfig paper_config() {
    DitConfig cfg;
    cfg.depth = 56;
    cfg.hidden = 3456;
    cfg.heads = 24;
    cfg.text_dim = 4096;
    cfg.rope_split = {48, 48, 48};
    return cfg;
}

void validate(const DitConfig& cfg) {
    if (cfg.depth < 1 || cfg.hidden < 1 || cfg.heads < 1 || cfg.text_dim < 1 || cfg.c_z < 1)
        throw ConfigError("dit config dims must be positive");
    if (cfg.hidden % cfg.heads != 0) throw ConfigError("hidden must be a multiple of heads");
    int64_t sum = 0;
    for (int d : cfg.rope_split) {
        if (d <= 0 || d % 2 != 0) throw ConfigError("rope_split parts must be positive and even");
        sum += d;
    }
    if (sum != cfg.head_dim())
        throw ConfigError("rope_split must sum to head_dim " + std::to_string(cfg.head_dim()));
    if (cfg.text_vocab < 1 || cfg.text_max_len < 1)
        throw ConfigError("text vocab and max length must be positive");
}

std::array<int, 3> default_rope_split(int64_t head_dim, std::array<int64_t, 3> extents) {
    if (head_dim % 2 != 0 || head_dim < 6)
        throw ConfigError("head_dim must be even and at least 6 for a 3-way rotary split");
    for (int64_t e : extents)
        if (e < 1) throw ConfigError("grid extents must be positive");
    // apportion rotation pairs by largest remainder; every axis keeps one
    int64_t left = head_dim / 2 - 3;
    real wsum = static_cast<real>(extents[0] + extents[1] + extents[2]);
    std::array<int64_t, 3> part{1, 1, 1};
    std::array<real, 3> frac{};
    int64_t used = 0;
    for (int a = 0; a < 3; ++a) {
        real want = static_cast<real>(left) * static_cast<real>(extents[a]) / wsum;
        int64_t whole = static_cast<int64_t>(want);
        part[a] += whole;
        frac[a] = want - static_cast<real>(whole);
        used += whole;
    }
    std::array<int, 3> order{0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int x, int y) {
        if (frac[x] != frac[y]) return frac[x] > frac[y];
        return x < y;
    });
    for (int64_t r = 0; r < left - used; ++r) part[order[static_cast<size_t>(r)]] += 1;
    return {static_cast<int>(2 * part[0]), static_cast<int>(2 * part[1]), static_cast<int>(2 * part[2])};
}

TokenGrid latent_rows(const Tensor& grid) {
    if (grid.rank() != 4) throw DimensionError("latent grid must be (U, h, w, C), got " + grid.shape_str());
    int64_t U = grid.dim(0), h = grid.dim(1), w = grid.dim(2), C = grid.dim(3);
    if (h % 2 != 0 || w % 2 != 0) throw DimensionError("patchify needs even spatial dims, got " + grid.shape_str());
    int64_t Hp = h / 2, Wp = w / 2, N = U * Hp * Wp, D = 4 * C;
    Tensor rows({N, D});
    auto coords = std::make_shared<std::vector<std::array<int, 3>>>();
    coords->reserve(static_cast<size_t>(N));
    int64_t i = 0;
    for (int64_t t = 0; t < U; ++t)
        for (int64_t py = 0; py < Hp; ++py)
            for (int64_t px = 0; px < Wp; ++px, ++i) {
                coords->push_back({static_cast<int>(t), static_cast<int>(py), static_cast<int>(px)});
                for (int64_t dy = 0; dy < 2; ++dy)
                    for (int64_t dx = 0; dx < 2; ++dx)
                        for (int64_t c = 0; c < C; ++c)
                            rows[i * D + (dy * 2 + dx) * C + c] =
                                grid[((t * h + 2 * py + dy) * w + 2 * px + dx) * C + c];
            }
    TokenGrid out;
    out.tokens = std::move(rows);
    out.coords = std::move(coords);
    out.dims = {U, Hp, Wp};
    return out;
}

Tensor rows_to_grid(const TokenGrid& rows) {
    const Tensor& tk = rows.tokens;
    if (tk.rank() != 2 || tk.dim(1) % 4 != 0) throw DimensionError("patch rows must be (N, 4*C), got " + tk.shape_str());
    int64_t N = tk.dim(0), C = tk.dim(1) / 4, D = tk.dim(1);
    if (!rows.coords || static_cast<int64_t>(rows.coords->size()) != N || rows.n() != N)
        throw DimensionError("token coords do not match the grid dims");
    int64_t U = rows.dims[0], Hp = rows.dims[1], Wp = rows.dims[2];
    Tensor grid({U, 2 * Hp, 2 * Wp, C});
    std::vector<uint8_t> seen(static_cast<size_t>(N), 0);
    for (int64_t i = 0; i < N; ++i) {
        auto [t, py, px] = (*rows.coords)[static_cast<size_t>(i)];
        if (t < 0 || t >= U || py < 0 || py >= Hp || px < 0 || px >= Wp)
            throw DimensionError("token coord outside the grid");
        size_t slot = static_cast<size_t>((t * Hp + py) * Wp + px);
        if (seen[slot]) throw DimensionError("duplicate token coord");
        seen[slot] = 1;
        for (int64_t dy = 0; dy < 2; ++dy)
            for (int64_t dx = 0; dx < 2; ++dx)
                for (int64_t c = 0; c < C; ++c)
                    grid[((t * 2 * Hp + 2 * py + dy) * 2 * Wp + 2 * px + dx) * C + c] =
                        tk[i * D + (dy * 2 + dx) * C + c];
    }
    return grid;
}

ParameterSet init_dit_params(const DitConfig& cfg, Rng& rng) {
    validate(cfg);
    ParameterSet p;
    int64_t H = cfg.hidden;
    p.set("dit.patch.w", linear_w(rng, H, cfg.patch_dim()));
    p.set("dit.patch.b", Tensor::zeros({H}));
    p.set("dit.gmlp.in.w", linear_w(rng, H, kFreqDim));
    p.set("dit.gmlp.in.b", Tensor::zeros({H}));
    p.set("dit.gmlp.out.w", linear_w(rng, H, H));
    p.set("dit.gmlp.out.b", Tensor::zeros({H}));
    // shared modulation head, zero so every block starts with closed gates
    p.set("dit.mod.w", Tensor::zeros({6 * H, H}));
    p.set("dit.mod.b", Tensor::zeros({6 * H}));
    for (int64_t i = 0; i < cfg.depth; ++i) {
        p.set(blk(i, "gscale"), Tensor::full({H}, 1.0));
        p.set(blk(i, "attn.qkv.w"), linear_w(rng, 3 * H, H));
        p.set(blk(i, "attn.qkv.b"), Tensor::zeros({3 * H}));
        p.set(blk(i, "attn.temp"), Tensor::full({cfg.heads}, std::sqrt(static_cast<real>(cfg.head_dim()))));
        p.set(blk(i, "attn.out.w"), linear_w(rng, H, H));
        p.set(blk(i, "attn.out.b"), Tensor::zeros({H}));
        p.set(blk(i, "xattn.prenorm.g"), Tensor::full({H}, 1.0));
        p.set(blk(i, "xattn.q.w"), linear_w(rng, H, H));
        p.set(blk(i, "xattn.q.b"), Tensor::zeros({H}));
        p.set(blk(i, "xattn.kv.w"), linear_w(rng, 2 * H, cfg.text_dim));
        p.set(blk(i, "xattn.kv.b"), Tensor::zeros({2 * H}));
        p.set(blk(i, "xattn.out.w"), linear_w(rng, H, H));
        p.set(blk(i, "xattn.out.b"), Tensor::zeros({H}));
        p.set(blk(i, "xattn.postnorm.g"), Tensor::full({H}, 1.0));
        p.set(blk(i, "ffn.in.w"), linear_w(rng, 4 * H, H));
        p.set(blk(i, "ffn.in.b"), Tensor::zeros({4 * H}));
        p.set(blk(i, "ffn.out.w"), linear_w(rng, H, 4 * H));
        p.set(blk(i, "ffn.out.b"), Tensor::zeros({H}));
    }
    p.set("dit.final.g", Tensor::full({H}, 1.0));
    // zero head: the untrained model predicts zero velocity
    p.set("dit.final.w", Tensor::zeros({H, H}));
    p.set("dit.final.b", Tensor::zeros({H}));
    p.set("dit.out.w", linear_w(rng, cfg.patch_dim(), H));
    p.set("dit.out.b", Tensor::zeros({cfg.patch_dim()}));
    return p;
}

ParameterSet init_text_params(const DitConfig& cfg, Rng& rng) {
    validate(cfg);
    ParameterSet p;
    p.set("text.embed", rng.normal_tensor({cfg.text_vocab, cfg.text_dim}, 1.0));
    p.set("text.null", rng.normal_tensor({1, cfg.text_dim}, 1.0));
    return p;
}

std::vector<int64_t> tokenize(const std::string& prompt, const DitConfig& cfg) {
    std::vector<int64_t> ids;
    size_t i = 0;
    while (i < prompt.size()) {
        while (i < prompt.size() && std::isspace(static_cast<unsigned char>(prompt[i]))) ++i;
        size_t j = i;
        while (j < prompt.size() && !std::isspace(static_cast<unsigned char>(prompt[j]))) ++j;
        if (j > i) {
            uint64_t h = 1469598103934665603ull;
            for (size_t k = i; k < j; ++k) {
                h ^= static_cast<unsigned char>(prompt[k]);
                h *= 1099511628211ull;
            }
            ids.push_back(static_cast<int64_t>(h % static_cast<uint64_t>(cfg.text_vocab)));
        }
        i = j;
    }
    return ids;
}

Var text_embed_graph(Tape& t, const std::vector<int64_t>& ids, const ParamVars& pv, const DitConfig& cfg) {
    for (int64_t id : ids)
        if (id < 0 || id >= cfg.text_vocab)
            throw InputError("text id " + std::to_string(id) + " outside the vocabulary");
    Var rows = ids.empty() ? pv.at("text.null") : t.select_rows(pv.at("text.embed"), ids);
    return t.rmsnorm_rows(rows, kNormEps);
}

TextEmbedding text_embed(const std::vector<int64_t>& ids, const ParameterSet& text_params,
                         const DitConfig& cfg) {
    validate(cfg);
    TextEmbedding out;
    std::vector<int64_t> use = ids;
    if (static_cast<int64_t>(use.size()) > cfg.text_max_len) {
        use.resize(static_cast<size_t>(cfg.text_max_len));
        out.truncated = true;
    }
    Tape t;
    ParamVars pv = register_params(t, text_params, false, "text.");
    out.emb = t.val(text_embed_graph(t, use, pv, cfg));
    return out;
}

Var global_graph(Tape& t, const Tensor& timesteps, real fps, const ParamVars& pv, const DitConfig& cfg) {
    if (timesteps.rank() != 1) throw DimensionError("timesteps must be (N,), got " + timesteps.shape_str());
    int64_t N = timesteps.dim(0);
    for (int64_t i = 0; i < N; ++i)
        if (!(timesteps[i] >= 0.0 && timesteps[i] <= 1.0)) throw InputError("timestep outside [0, 1]");
    Tensor feat({N, kFreqDim});
    for (int64_t i = 0; i < N; ++i) sinusoid_features(kTimestepScale * timesteps[i], feat.data() + i * kFreqDim);
    Tensor fps_feat({1, kFreqDim});
    sinusoid_features(fps, fps_feat.data());
    auto mlp = [&](Var x) {
        Var h = t.silu(t.add_bias(t.matmul_nt(x, pv.at("dit.gmlp.in.w")), pv.at("dit.gmlp.in.b")));
        return t.add_bias(t.matmul_nt(h, pv.at("dit.gmlp.out.w")), pv.at("dit.gmlp.out.b"));
    };
    Var g_t = mlp(t.constant(std::move(feat)));
    Var g_f = mlp(t.constant(std::move(fps_feat)));
    auto bidx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * cfg.hidden));
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < cfg.hidden; ++j) (*bidx)[static_cast<size_t>(i * cfg.hidden + j)] = j;
    return t.add(g_t, t.rearrange(g_f, bidx, {N, cfg.hidden}));
}

GlobalEmbedding global_embed(const GlobalSignals& signals, const ParameterSet& params, const DitConfig& cfg) {
    validate(cfg);
    Tape t;
    ParamVars pv = register_params(t, params, false, "dit.gmlp.");
    GlobalEmbedding out;
    out.g = t.val(global_graph(t, signals.timestep, signals.fps, pv, cfg));
    for (int64_t i = 0; i < cfg.depth; ++i) out.block_scales.push_back(params.at(blk(i, "gscale")));
    return out;
}

Var dit_core_graph(Tape& t, Var tokens, Var text, Var g, const TokenGrid& geom, const ParamVars& pv,
                   const DitConfig& cfg, std::vector<Var>* taps) {
    int64_t H = cfg.hidden;
    int nh = static_cast<int>(cfg.heads);
    const Tensor& tv = t.val(tokens);
    if (tv.rank() != 2 || tv.dim(1) != H) throw DimensionError("tokens must be (N, hidden), got " + tv.shape_str());
    if (!geom.coords || static_cast<int64_t>(geom.coords->size()) != tv.dim(0) || geom.n() != tv.dim(0))
        throw DimensionError("token count does not match the grid");
    if (t.val(text).rank() != 2 || t.val(text).dim(1) != cfg.text_dim)
        throw DimensionError("text embeddings must be (L, text_dim), got " + t.val(text).shape_str());
    real xscale = 1.0 / std::sqrt(static_cast<real>(cfg.head_dim()));
    Var x = tokens;
    for (int64_t i = 0; i < cfg.depth; ++i) {
        Var gb = t.mul_gain(g, pv.at(blk(i, "gscale")));
        Var m = t.add_bias(t.matmul_nt(gb, pv.at("dit.mod.w")), pv.at("dit.mod.b"));
        Var sh1 = t.slice_cols(m, 0, H), sc1 = t.slice_cols(m, H, H), gt1 = t.slice_cols(m, 2 * H, H);
        Var sh2 = t.slice_cols(m, 3 * H, H), sc2 = t.slice_cols(m, 4 * H, H), gt2 = t.slice_cols(m, 5 * H, H);

        // self-attention: per-head unit-norm q/k, learned temperature on q,
        // rotary phases from the token coords
        Var xm = t.add(t.mul(t.rmsnorm_rows(x, kNormEps), t.add_scalar(sc1, 1.0)), sh1);
        Var qkv = t.add_bias(t.matmul_nt(xm, pv.at(blk(i, "attn.qkv.w"))), pv.at(blk(i, "attn.qkv.b")));
        Var q = t.l2norm_heads(t.slice_cols(qkv, 0, H), nh, kNormEps);
        Var k = t.l2norm_heads(t.slice_cols(qkv, H, H), nh, kNormEps);
        Var v = t.slice_cols(qkv, 2 * H, H);
        q = t.mul_head_scalar(q, pv.at(blk(i, "attn.temp")), nh);
        q = t.rope3d(q, geom.coords, cfg.rope_split, nh);
        k = t.rope3d(k, geom.coords, cfg.rope_split, nh);
        Var ao = t.add_bias(t.matmul_nt(t.mha(q, k, v, nh), pv.at(blk(i, "attn.out.w"))),
                            pv.at(blk(i, "attn.out.b")));
        x = t.add(x, t.mul(ao, gt1));

        // cross-attention to text, normalized on both sides of the residual
        Var cn = t.mul_gain(t.rmsnorm_rows(x, kNormEps), pv.at(blk(i, "xattn.prenorm.g")));
        Var cq = t.add_bias(t.matmul_nt(cn, pv.at(blk(i, "xattn.q.w"))), pv.at(blk(i, "xattn.q.b")));
        Var kv = t.add_bias(t.matmul_nt(text, pv.at(blk(i, "xattn.kv.w"))), pv.at(blk(i, "xattn.kv.b")));
        Var catt = t.mha(t.scale(cq, xscale), t.slice_cols(kv, 0, H), t.slice_cols(kv, H, H), nh);
        Var co = t.add_bias(t.matmul_nt(catt, pv.at(blk(i, "xattn.out.w"))), pv.at(blk(i, "xattn.out.b")));
        x = t.add(x, t.mul_gain(t.rmsnorm_rows(co, kNormEps), pv.at(blk(i, "xattn.postnorm.g"))));

        // feed-forward
        Var fm = t.add(t.mul(t.rmsnorm_rows(x, kNormEps), t.add_scalar(sc2, 1.0)), sh2);
        Var h1 = t.silu(t.add_bias(t.matmul_nt(fm, pv.at(blk(i, "ffn.in.w"))), pv.at(blk(i, "ffn.in.b"))));
        Var ff = t.add_bias(t.matmul_nt(h1, pv.at(blk(i, "ffn.out.w"))), pv.at(blk(i, "ffn.out.b")));
        x = t.add(x, t.mul(ff, gt2));
        if (taps) taps->push_back(x);
    }
    Var fin = t.mul_gain(t.rmsnorm_rows(x, kNormEps), pv.at("dit.final.g"));
    Var out = t.add_bias(t.matmul_nt(fin, pv.at("dit.final.w")), pv.at("dit.final.b"));
    if (taps) taps->push_back(out);
    return out;
}

Var velocity_rows_graph(Tape& t, Var rows, const TokenGrid& geom, Var text, const Tensor& timesteps,
                        real fps, const ParamVars& pv, const DitConfig& cfg, std::vector<Var>* taps) {
    const Tensor& rv = t.val(rows);
    if (rv.rank() != 2 || rv.dim(1) != cfg.patch_dim())
        throw DimensionError("latent rows must be (N, 4*c_z), got " + rv.shape_str());
    if (timesteps.rank() != 1 || timesteps.dim(0) != rv.dim(0))
        throw DimensionError("need one timestep per token");
    Var tokens = t.add_bias(t.matmul_nt(rows, pv.at("dit.patch.w")), pv.at("dit.patch.b"));
    if (taps) taps->push_back(tokens);
    Var g = global_graph(t, timesteps, fps, pv, cfg);
    Var y = dit_core_graph(t, tokens, text, g, geom, pv, cfg, taps);
    Var out = t.add_bias(t.matmul_nt(y, pv.at("dit.out.w")), pv.at("dit.out.b"));
    if (taps) taps->push_back(out);
    return out;
}

TokenGrid patchify(const Tensor& latent_grid, const ParameterSet& params, const DitConfig& cfg) {
    validate(cfg);
    TokenGrid rows = latent_rows(latent_grid);
    if (rows.tokens.dim(1) != cfg.patch_dim())
        throw DimensionError("latent channels do not match c_z " + std::to_string(cfg.c_z));
    Tape t;
    ParamVars pv = register_params(t, params, false, "dit.patch.");
    rows.tokens = t.val(t.add_bias(t.matmul_nt(t.constant(rows.tokens), pv.at("dit.patch.w")), pv.at("dit.patch.b")));
    return rows;
}

Tensor unpatchify(const TokenGrid& tokens, const ParameterSet& params, const DitConfig& cfg) {
    validate(cfg);
    const Tensor& tk = tokens.tokens;
    if (tk.rank() != 2 || tk.dim(1) != cfg.hidden)
        throw DimensionError("tokens must be (N, hidden), got " + tk.shape_str());
    Tape t;
    ParamVars pv = register_params(t, params, false, "dit.out.");
    TokenGrid rows;
    rows.tokens = t.val(t.add_bias(t.matmul_nt(t.constant(tk), pv.at("dit.out.w")), pv.at("dit.out.b")));
    rows.coords = tokens.coords;
    rows.dims = tokens.dims;
    return rows_to_grid(rows);
}

TokenGrid dit_forward(const TokenGrid& tokens, const Tensor& text_emb, const GlobalSignals& signals,
                      const ParameterSet& params, const DitConfig& cfg) {
    validate(cfg);
    if (signals.timestep.rank() != 1 || signals.timestep.dim(0) != tokens.tokens.dim(0))
        throw DimensionError("need one timestep per token");
    Tape t;
    ParamVars pv = register_params(t, params, false, "dit.");
    Var g = global_graph(t, signals.timestep, signals.fps, pv, cfg);
    Var y = dit_core_graph(t, t.constant(tokens.tokens), t.constant(text_emb), g, tokens, pv, cfg);
    TokenGrid out;
    out.tokens = t.val(y);
    out.coords = tokens.coords;
    out.dims = tokens.dims;
    return out;
}

std::vector<TokenGrid> dit_forward_batch(const std::vector<TokenGrid>& batch, const Tensor& text_emb,
                                         const std::vector<GlobalSignals>& signals,
                                         const ParameterSet& params, const DitConfig& cfg) {
    if (batch.size() != signals.size()) throw DimensionError("one GlobalSignals entry per sample");
    std::vector<TokenGrid> out;
    out.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i)
        out.push_back(dit_forward(batch[i], text_emb, signals[i], params, cfg));
    return out;
}

Tensor predict_velocity(const Tensor& rows, const TokenGrid& geom, const Tensor& text_emb,
                        const Tensor& timesteps, real fps, const ParameterSet& params,
                        const DitConfig& cfg) {
    validate(cfg);
    Tape t;
    ParamVars pv = register_params(t, params, false, "dit.");
    Var v = velocity_rows_graph(t, t.constant(rows), geom, t.constant(text_emb), timesteps, fps, pv, cfg);
    return t.val(v);
}

}  // namespace mugv::dit
