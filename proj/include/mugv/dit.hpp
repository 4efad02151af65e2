#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "mugv/graph.hpp"
#include "mugv/rng.hpp"

namespace mugv::dit {

struct DitConfig {
    int64_t depth = 4;
    int64_t hidden = 64;
    int64_t heads = 4;
    int64_t text_dim = 32;
    int64_t c_z = 24;  // latent channels; patch rows carry 4*c_z values
    // Per-head rotary split (d_t, d_h, d_w); each even, summing to head_dim.
    std::array<int, 3> rope_split = {4, 6, 6};
    int64_t text_vocab = 4096;
    int64_t text_max_len = 64;

    int64_t head_dim() const { return hidden / heads; }
    int64_t patch_dim() const { return 4 * c_z; }
};

DitConfig desk_config();
// Recorded large-scale shape; nothing in the test suite runs it.
DitConfig paper_config();

void validate(const DitConfig& cfg);  // throws ConfigError

// Split head_dim across (t, h, w) proportional to the grid extents, rounded
// to even parts that still sum to head_dim.
std::array<int, 3> default_rope_split(int64_t head_dim, std::array<int64_t, 3> extents);

// Tokens in row-major (t, h, w) order over a (T', H', W') grid, one coord per
// row. The feature dim is 4*c_z for patch-latent rows and hidden after the
// patchify projection.
struct TokenGrid {
    Tensor tokens;
    std::shared_ptr<const std::vector<std::array<int, 3>>> coords;
    std::array<int64_t, 3> dims{0, 0, 0};

    int64_t n() const { return dims[0] * dims[1] * dims[2]; }
};

// (U, h, w, C) latent grid -> patch rows (N, 4*C), each row one 2x2 spatial
// block flattened (dy, dx, c); h, w must be even.
TokenGrid latent_rows(const Tensor& latent_grid);

// Inverse of latent_rows; tokens are placed by their coords, so any row order
// with intact coords reproduces the same grid.
Tensor rows_to_grid(const TokenGrid& rows);

ParameterSet init_dit_params(const DitConfig& cfg, Rng& rng);   // dit.*
ParameterSet init_text_params(const DitConfig& cfg, Rng& rng);  // text.*

// Whitespace-split FNV-1a hashing tokenizer; ids in [0, text_vocab).
std::vector<int64_t> tokenize(const std::string& prompt, const DitConfig& cfg);

struct TextEmbedding {
    Tensor emb;  // (L, text_dim), RMS-normalized rows
    bool truncated = false;
};

// Lookup + RMS normalization; empty ids yield the learned null row. Ids at or
// past text_vocab are input errors; sequences past text_max_len truncate.
TextEmbedding text_embed(const std::vector<int64_t>& ids, const ParameterSet& text_params,
                         const DitConfig& cfg);

struct GlobalSignals {
    Tensor timestep;  // (N,), each in [0, 1]; conditioned tokens carry 0
    real fps = 8.0;
};

struct GlobalEmbedding {
    Tensor g;                          // (N, hidden)
    std::vector<Tensor> block_scales;  // depth entries, each (hidden,)
};

GlobalEmbedding global_embed(const GlobalSignals& signals, const ParameterSet& params,
                             const DitConfig& cfg);

// (U, h, w, c_z) -> projected tokens (N, hidden).
TokenGrid patchify(const Tensor& latent_grid, const ParameterSet& params, const DitConfig& cfg);

// Output head hidden -> 4*c_z, then unfold by coords into (U, h, w, c_z).
Tensor unpatchify(const TokenGrid& tokens, const ParameterSet& params, const DitConfig& cfg);

// Block stack + final norm and head; output feature dim equals the input's.
// Single-threaded and pure, so identical inputs give bit-identical outputs.
TokenGrid dit_forward(const TokenGrid& tokens, const Tensor& text_emb, const GlobalSignals& signals,
                      const ParameterSet& params, const DitConfig& cfg);

// Samples are independent: each entry runs exactly as a batch of one.
std::vector<TokenGrid> dit_forward_batch(const std::vector<TokenGrid>& batch, const Tensor& text_emb,
                                         const std::vector<GlobalSignals>& signals,
                                         const ParameterSet& params, const DitConfig& cfg);

// Full velocity model on patch-latent rows: patchify projection, block stack,
// unpatchify head. timesteps is (N,) per token.
Tensor predict_velocity(const Tensor& rows, const TokenGrid& geom, const Tensor& text_emb,
                        const Tensor& timesteps, real fps, const ParameterSet& params,
                        const DitConfig& cfg);

// ---- graph builders ----

Var text_embed_graph(Tape& t, const std::vector<int64_t>& ids, const ParamVars& pv,
                     const DitConfig& cfg);

// Sinusoidal timestep/fps features through the shared MLP; (N, hidden).
Var global_graph(Tape& t, const Tensor& timesteps, real fps, const ParamVars& pv,
                 const DitConfig& cfg);

// tokens (N, hidden) -> (N, hidden); g is the global_graph output.
// taps, when given, receives each block's residual output and the final
// normed projection, in order.
Var dit_core_graph(Tape& t, Var tokens, Var text, Var g, const TokenGrid& geom, const ParamVars& pv,
                   const DitConfig& cfg, std::vector<Var>* taps = nullptr);

// rows (N, 4*c_z) -> velocity rows (N, 4*c_z). taps additionally gets
// the patch embedding first and the velocity rows last.
Var velocity_rows_graph(Tape& t, Var rows, const TokenGrid& geom, Var text, const Tensor& timesteps,
                        real fps, const ParamVars& pv, const DitConfig& cfg,
                        std::vector<Var>* taps = nullptr);

}  // namespace mugv::dit
