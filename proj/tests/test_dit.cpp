#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fd_check.hpp"
#include "mugv/dit.hpp"

using namespace mugv;
using namespace mugv::dit;

namespace {

DitConfig tiny_config() {
    DitConfig cfg;
    cfg.depth = 2;
    cfg.hidden = 12;
    cfg.heads = 2;
    cfg.text_dim = 6;
    cfg.c_z = 2;
    cfg.rope_split = {2, 2, 2};
    return cfg;
}

Tensor eye(int64_t n) {
    Tensor t = Tensor::zeros({n, n});
    for (int64_t i = 0; i < n; ++i) t[i * n + i] = 1.0;
    return t;
}

// The stock init keeps all modulation gates and the final head at zero; give
// them small random values so every pathway carries signal.
void open_gates(ParameterSet& p, uint64_t seed) {
    Rng r(seed);
    p.at("dit.mod.w") = r.normal_tensor(p.at("dit.mod.w").shape(), 0.2);
    p.at("dit.mod.b") = r.normal_tensor(p.at("dit.mod.b").shape(), 0.2);
    p.at("dit.final.w") = r.normal_tensor(p.at("dit.final.w").shape(), 0.2);
    p.at("dit.final.b") = r.normal_tensor(p.at("dit.final.b").shape(), 0.05);
}

// Reference 1D rotary: consecutive pairs rotated by pos * base^(-2i/d).
std::vector<real> rope1d(const std::vector<real>& v, real pos, real base = 10000.0) {
    std::vector<real> out(v.size());
    int64_t d = static_cast<int64_t>(v.size());
    for (int64_t i = 0; i < d / 2; ++i) {
        real th = pos * std::pow(base, -2.0 * static_cast<real>(i) / static_cast<real>(d));
        real c = std::cos(th), s = std::sin(th);
        out[static_cast<size_t>(2 * i)] = v[static_cast<size_t>(2 * i)] * c - v[static_cast<size_t>(2 * i + 1)] * s;
        out[static_cast<size_t>(2 * i + 1)] = v[static_cast<size_t>(2 * i)] * s + v[static_cast<size_t>(2 * i + 1)] * c;
    }
    return out;
}

real rope_pair_dot(const std::vector<real>& q, const std::vector<real>& k, std::array<int, 3> pq,
                   std::array<int, 3> pk, std::array<int, 3> split) {
    int64_t d = static_cast<int64_t>(q.size());
    Tensor x({2, d});
    for (int64_t j = 0; j < d; ++j) {
        x[j] = q[static_cast<size_t>(j)];
        x[d + j] = k[static_cast<size_t>(j)];
    }
    auto coords = std::make_shared<std::vector<std::array<int, 3>>>(std::vector<std::array<int, 3>>{pq, pk});
    Tape t;
    const Tensor& y = t.val(t.rope3d(t.constant(std::move(x)), coords, split, 1));
    real dot = 0.0;
    for (int64_t j = 0; j < d; ++j) dot += y[j] * y[d + j];
    return dot;
}

}  // namespace

TEST_CASE("latent grid to patch rows and back") {
    Rng r(11);
    Tensor grid = r.uniform_tensor({2, 8, 8, 24}, -1.0, 1.0);
    TokenGrid rows = latent_rows(grid);
    CHECK(rows.tokens.dim(0) == 32);
    CHECK(rows.tokens.dim(1) == 96);
    CHECK(rows.dims == std::array<int64_t, 3>{2, 4, 4});
    CHECK((*rows.coords)[0] == std::array<int, 3>{0, 0, 0});
    CHECK((*rows.coords)[1] == std::array<int, 3>{0, 0, 1});
    CHECK((*rows.coords)[5] == std::array<int, 3>{0, 1, 1});
    CHECK((*rows.coords)[16] == std::array<int, 3>{1, 0, 0});
    // one 2x2 block flattened (dy, dx, c): row 1 starts at grid (0, 0, 2, :)
    CHECK(rows.tokens[1 * 96 + 0] == grid[(0 * 8 + 2) * 24 + 0]);
    CHECK(rows.tokens[1 * 96 + 24] == grid[(0 * 8 + 3) * 24 + 0]);
    CHECK(bit_equal(rows_to_grid(rows), grid));

    TokenGrid one = latent_rows(Tensor::full({1, 2, 2, 5}, 0.25));
    CHECK(one.tokens.dim(0) == 1);
    CHECK(one.tokens.dim(1) == 20);

    CHECK_THROWS_AS(latent_rows(Tensor::zeros({1, 3, 4, 2})), DimensionError);
    CHECK_THROWS_AS(latent_rows(Tensor::zeros({1, 4, 5, 2})), DimensionError);
    CHECK_THROWS_AS(latent_rows(Tensor::zeros({4, 4, 2})), DimensionError);
}

TEST_CASE("patchify and unpatchify invert with identity heads") {
    DitConfig cfg;
    cfg.depth = 1;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.rope_split = {2, 2, 4};
    cfg.c_z = 4;
    cfg.text_dim = 6;
    Rng r(3);
    ParameterSet p = init_dit_params(cfg, r);
    p.at("dit.patch.w") = eye(16);
    p.at("dit.patch.b") = Tensor::zeros({16});
    p.at("dit.out.w") = eye(16);
    p.at("dit.out.b") = Tensor::zeros({16});

    Tensor grid = r.uniform_tensor({2, 4, 6, 4}, -1.0, 1.0);
    TokenGrid tokens = patchify(grid, p, cfg);
    CHECK(tokens.tokens.dim(0) == 12);
    CHECK(tokens.tokens.dim(1) == 16);
    CHECK(bit_equal(unpatchify(tokens, p, cfg), grid));

    SUBCASE("unpatchify places tokens by coords, not row order") {
        std::vector<int64_t> perm(12);
        std::iota(perm.begin(), perm.end(), 0);
        Rng shuffle_rng(9);
        for (int64_t i = 11; i > 0; --i) std::swap(perm[i], perm[shuffle_rng.randint(i + 1)]);
        TokenGrid shuffled;
        shuffled.dims = tokens.dims;
        shuffled.tokens = Tensor({12, 16});
        auto coords = std::make_shared<std::vector<std::array<int, 3>>>(12);
        for (int64_t i = 0; i < 12; ++i) {
            (*coords)[i] = (*tokens.coords)[perm[i]];
            for (int64_t j = 0; j < 16; ++j) shuffled.tokens[i * 16 + j] = tokens.tokens[perm[i] * 16 + j];
        }
        shuffled.coords = coords;
        CHECK(bit_equal(unpatchify(shuffled, p, cfg), grid));
    }

    SUBCASE("coord mismatches are rejected") {
        TokenGrid bad = tokens;
        auto coords = std::make_shared<std::vector<std::array<int, 3>>>(*tokens.coords);
        (*coords)[3] = (*coords)[4];  // duplicate
        bad.coords = coords;
        CHECK_THROWS_AS(unpatchify(bad, p, cfg), DimensionError);
        bad.dims = {2, 2, 4};
        CHECK_THROWS_AS(unpatchify(bad, p, cfg), DimensionError);
    }
}

TEST_CASE("dit_forward shape contract, determinism, and zero-init head") {
    DitConfig cfg = tiny_config();
    Rng r(21);
    ParameterSet p = init_dit_params(cfg, r);
    ParameterSet tp = init_text_params(cfg, r);
    Tensor grid = r.uniform_tensor({2, 4, 4, 2}, -1.0, 1.0);
    TokenGrid tokens = patchify(grid, p, cfg);
    int64_t n = tokens.tokens.dim(0);
    Tensor text = text_embed(tokenize("a red cube sliding right", cfg), tp, cfg).emb;
    GlobalSignals sig{Tensor::full({n}, 0.4), 8.0};

    TokenGrid out = dit_forward(tokens, text, sig, p, cfg);
    CHECK(out.tokens.same_shape(tokens.tokens));
    // fresh params keep every gate and the final head at zero
    CHECK(max_abs_diff(out.tokens, Tensor::zeros(out.tokens.shape())) == 0.0);

    open_gates(p, 5);
    TokenGrid a = dit_forward(tokens, text, sig, p, cfg);
    TokenGrid b = dit_forward(tokens, text, sig, p, cfg);
    CHECK(bit_equal(a.tokens, b.tokens));
    CHECK(max_abs_diff(a.tokens, Tensor::zeros(a.tokens.shape())) > 0.0);
}

TEST_CASE("modulation gates isolate tokens at init; open gates mix them") {
    DitConfig cfg = tiny_config();
    Rng r(31);
    ParameterSet p = init_dit_params(cfg, r);
    ParameterSet tp = init_text_params(cfg, r);
    Tensor grid = r.uniform_tensor({3, 2, 2, 2}, -1.0, 1.0);
    Tensor grid2 = grid;
    for (int64_t j = 0; j < 8; ++j) grid2[2 * 8 + j] += 0.3;  // token 2 only

    Tensor text = text_embed(tokenize("probe", cfg), tp, cfg).emb;
    GlobalSignals sig{Tensor::full({3}, 0.5), 8.0};
    // with a random final head but zero gates, self-attention is the only
    // cross-token path and it is multiplied away
    Rng r2(7);
    p.at("dit.final.w") = r2.normal_tensor({cfg.hidden, cfg.hidden}, 0.2);
    TokenGrid base = dit_forward(patchify(grid, p, cfg), text, sig, p, cfg);
    TokenGrid poked = dit_forward(patchify(grid2, p, cfg), text, sig, p, cfg);
    for (int64_t j = 0; j < cfg.hidden; ++j) {
        CHECK(base.tokens[0 * cfg.hidden + j] == poked.tokens[0 * cfg.hidden + j]);
        CHECK(base.tokens[1 * cfg.hidden + j] == poked.tokens[1 * cfg.hidden + j]);
    }

    open_gates(p, 5);
    TokenGrid base_o = dit_forward(patchify(grid, p, cfg), text, sig, p, cfg);
    TokenGrid poked_o = dit_forward(patchify(grid2, p, cfg), text, sig, p, cfg);
    real moved0 = 0.0, moved1 = 0.0;
    for (int64_t j = 0; j < cfg.hidden; ++j) {
        moved0 = std::max(moved0, std::fabs(base_o.tokens[j] - poked_o.tokens[j]));
        moved1 = std::max(moved1, std::fabs(base_o.tokens[cfg.hidden + j] - poked_o.tokens[cfg.hidden + j]));
    }
    CHECK(moved0 > 0.0);
    CHECK(moved1 > 0.0);
}

TEST_CASE("batch entries run exactly as batches of one") {
    DitConfig cfg = tiny_config();
    Rng r(41);
    ParameterSet p = init_dit_params(cfg, r);
    open_gates(p, 6);
    ParameterSet tp = init_text_params(cfg, r);
    Tensor text = text_embed(tokenize("two clips", cfg), tp, cfg).emb;

    std::vector<TokenGrid> batch{patchify(r.uniform_tensor({2, 2, 2, 2}, -1.0, 1.0), p, cfg),
                                 patchify(r.uniform_tensor({1, 4, 4, 2}, -1.0, 1.0), p, cfg)};
    std::vector<GlobalSignals> sig{{Tensor::full({batch[0].tokens.dim(0)}, 0.2), 8.0},
                                   {Tensor::full({batch[1].tokens.dim(0)}, 0.8), 12.0}};
    std::vector<TokenGrid> joint = dit_forward_batch(batch, text, sig, p, cfg);
    REQUIRE(joint.size() == 2);
    CHECK(bit_equal(joint[0].tokens, dit_forward(batch[0], text, sig[0], p, cfg).tokens));
    CHECK(bit_equal(joint[1].tokens, dit_forward(batch[1], text, sig[1], p, cfg).tokens));
    CHECK_THROWS_AS(dit_forward_batch(batch, text, {sig[0]}, p, cfg), DimensionError);
}

TEST_CASE("dit_forward is equivariant under token permutation") {
    DitConfig cfg = tiny_config();
    Rng r(51);
    ParameterSet p = init_dit_params(cfg, r);
    open_gates(p, 8);
    ParameterSet tp = init_text_params(cfg, r);
    Tensor text = text_embed(tokenize("shuffle invariance", cfg), tp, cfg).emb;

    TokenGrid tokens = patchify(r.uniform_tensor({2, 4, 4, 2}, -1.0, 1.0), p, cfg);
    int64_t n = tokens.tokens.dim(0), h = cfg.hidden;
    Tensor ts({n});
    for (int64_t i = 0; i < n; ++i) ts[i] = (i % 2 == 0) ? 0.3 : 0.7;

    std::vector<int64_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng shuffle_rng(17);
    for (int64_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[shuffle_rng.randint(i + 1)]);

    TokenGrid shuffled;
    shuffled.dims = tokens.dims;
    shuffled.tokens = Tensor({n, h});
    Tensor ts_s({n});
    auto coords = std::make_shared<std::vector<std::array<int, 3>>>(n);
    for (int64_t i = 0; i < n; ++i) {
        (*coords)[i] = (*tokens.coords)[perm[i]];
        ts_s[i] = ts[perm[i]];
        for (int64_t j = 0; j < h; ++j) shuffled.tokens[i * h + j] = tokens.tokens[perm[i] * h + j];
    }
    shuffled.coords = coords;

    TokenGrid out = dit_forward(tokens, text, {ts, 8.0}, p, cfg);
    TokenGrid out_s = dit_forward(shuffled, text, {ts_s, 8.0}, p, cfg);
    real worst = 0.0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < h; ++j)
            worst = std::max(worst, std::fabs(out_s.tokens[i * h + j] - out.tokens[perm[i] * h + j]));
    CHECK(worst < 1e-9);
}

TEST_CASE("rotary phases depend only on relative position") {
    std::array<int, 3> split{4, 6, 6};
    Rng r(61);
    real worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<real> q(16), k(16);
        real qn = 0.0, kn = 0.0;
        for (int j = 0; j < 16; ++j) {
            q[j] = r.normal();
            k[j] = r.normal();
            qn += q[j] * q[j];
            kn += k[j] * k[j];
        }
        for (int j = 0; j < 16; ++j) {
            q[j] /= std::sqrt(qn);
            k[j] /= std::sqrt(kn);
        }
        std::array<int, 3> p1, p2, d;
        for (int a = 0; a < 3; ++a) {
            p1[a] = static_cast<int>(r.randint(17)) + 8;
            p2[a] = static_cast<int>(r.randint(17)) + 8;
            d[a] = static_cast<int>(r.randint(17)) - 8;
        }
        real base_dot = rope_pair_dot(q, k, p1, p2, split);
        std::array<int, 3> p1d{p1[0] + d[0], p1[1] + d[1], p1[2] + d[2]};
        std::array<int, 3> p2d{p2[0] + d[0], p2[1] + d[1], p2[2] + d[2]};
        worst = std::max(worst, std::fabs(rope_pair_dot(q, k, p1d, p2d, split) - base_dot));
    }
    CHECK(worst <= 1e-5);
}

TEST_CASE("temporal-only tokens reproduce 1D rotary logits") {
    // h/w slices hold zeros, so only the d_t rotation contributes
    std::array<int, 3> split{4, 2, 2};
    int heads = 2, hd = 8, nt = 5;
    Rng r(71);
    Tensor q({nt, heads * hd}), k({nt, heads * hd});
    for (int64_t i = 0; i < nt; ++i)
        for (int h = 0; h < heads; ++h)
            for (int j = 0; j < 4; ++j) {
                q[i * heads * hd + h * hd + j] = r.normal();
                k[i * heads * hd + h * hd + j] = r.normal();
            }
    auto coords = std::make_shared<std::vector<std::array<int, 3>>>();
    for (int t = 0; t < nt; ++t) coords->push_back({t, 0, 0});

    Tape t;
    Var qr = t.rope3d(t.constant(q), coords, split, heads);
    Var kr = t.rope3d(t.constant(k), coords, split, heads);
    const Tensor& qv = t.val(qr);
    const Tensor& kv = t.val(kr);

    real worst = 0.0;
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < nt; ++i)
            for (int j = 0; j < nt; ++j) {
                real logit = 0.0;
                for (int d = 0; d < hd; ++d)
                    logit += qv[i * heads * hd + h * hd + d] * kv[j * heads * hd + h * hd + d];
                std::vector<real> qs(4), ks(4);
                for (int d = 0; d < 4; ++d) {
                    qs[d] = q[i * heads * hd + h * hd + d];
                    ks[d] = k[j * heads * hd + h * hd + d];
                }
                std::vector<real> q1 = rope1d(qs, i), k1 = rope1d(ks, j);
                real oracle = 0.0;
                for (int d = 0; d < 4; ++d) oracle += q1[d] * k1[d];
                worst = std::max(worst, std::fabs(logit - oracle));
            }
    CHECK(worst <= 1e-6);
}

TEST_CASE("normalized q/k bound self-attention logits by the temperature") {
    int heads = 2, hd = 6;
    int64_t n = 7, hidden = heads * hd;
    Rng r(81);
    Tensor temp({heads});
    temp[0] = 3.0;
    temp[1] = 0.5;
    Tape t;
    Var q = t.l2norm_heads(t.constant(r.normal_tensor({n, hidden}, 2.0)), heads, 1e-6);
    Var k = t.l2norm_heads(t.constant(r.normal_tensor({n, hidden}, 2.0)), heads, 1e-6);
    q = t.mul_head_scalar(q, t.constant(temp), heads);
    const Tensor& qv = t.val(q);
    const Tensor& kv = t.val(k);
    for (int h = 0; h < heads; ++h)
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j) {
                real logit = 0.0;
                for (int d = 0; d < hd; ++d) logit += qv[i * hidden + h * hd + d] * kv[j * hidden + h * hd + d];
                CHECK(std::fabs(logit) <= temp[h] + 1e-9);
            }
}

TEST_CASE("default_rope_split apportions head_dim by grid extents") {
    CHECK(default_rope_split(16, {2, 8, 8}) == std::array<int, 3>{4, 6, 6});
    CHECK(default_rope_split(6, {1, 1, 1}) == std::array<int, 3>{2, 2, 2});
    // 21 free pairs, wants (0.34, 10.33, 10.33): floors then largest remainder
    CHECK(default_rope_split(48, {1, 30, 30}) == std::array<int, 3>{4, 22, 22});
    Rng r(91);
    for (int trial = 0; trial < 50; ++trial) {
        int64_t hd = 2 * (3 + r.randint(30));
        std::array<int64_t, 3> ext{1 + r.randint(32), 1 + r.randint(32), 1 + r.randint(32)};
        auto split = default_rope_split(hd, ext);
        CHECK(split[0] + split[1] + split[2] == hd);
        for (int a = 0; a < 3; ++a) {
            CHECK(split[a] > 0);
            CHECK(split[a] % 2 == 0);
        }
    }
    CHECK_THROWS_AS(default_rope_split(7, {1, 1, 1}), ConfigError);
    CHECK_THROWS_AS(default_rope_split(4, {1, 1, 1}), ConfigError);
    CHECK_THROWS_AS(default_rope_split(16, {0, 1, 1}), ConfigError);
}

TEST_CASE("hashing tokenizer is deterministic and in range") {
    DitConfig cfg = desk_config();
    auto a = tokenize("a cat plays  with\tyarn", cfg);
    auto b = tokenize("  a cat plays with yarn\n", cfg);
    REQUIRE(a.size() == 5);
    CHECK(a == b);
    for (int64_t id : a) {
        CHECK(id >= 0);
        CHECK(id < cfg.text_vocab);
    }
    CHECK(tokenize("", cfg).empty());
    CHECK(tokenize("cat", cfg) != tokenize("dog", cfg));
    CHECK(tokenize("cat cat", cfg)[0] == tokenize("cat cat", cfg)[1]);
}

TEST_CASE("text_embed lookup, normalization, null row, truncation") {
    DitConfig cfg = tiny_config();
    cfg.text_max_len = 4;
    Rng r(101);
    ParameterSet tp = init_text_params(cfg, r);

    std::vector<int64_t> ids{5, 99, 5};
    TextEmbedding e1 = text_embed(ids, tp, cfg);
    TextEmbedding e2 = text_embed(ids, tp, cfg);
    CHECK(bit_equal(e1.emb, e2.emb));
    CHECK(e1.emb.dim(0) == 3);
    CHECK(e1.emb.dim(1) == cfg.text_dim);
    CHECK_FALSE(e1.truncated);
    // repeated ids embed identically; rows are unit RMS
    for (int64_t j = 0; j < cfg.text_dim; ++j)
        CHECK(e1.emb[0 * cfg.text_dim + j] == e1.emb[2 * cfg.text_dim + j]);
    for (int64_t i = 0; i < 3; ++i) {
        real ms = 0.0;
        for (int64_t j = 0; j < cfg.text_dim; ++j) {
            real v = e1.emb[i * cfg.text_dim + j];
            ms += v * v;
        }
        CHECK(ms / cfg.text_dim == doctest::Approx(1.0).epsilon(1e-3));
    }

    SUBCASE("empty prompt embeds the normalized null row") {
        TextEmbedding e = text_embed({}, tp, cfg);
        REQUIRE(e.emb.dim(0) == 1);
        const Tensor& null_row = tp.at("text.null");
        real ms = 0.0;
        for (int64_t j = 0; j < cfg.text_dim; ++j) ms += null_row[j] * null_row[j];
        ms /= static_cast<real>(cfg.text_dim);
        real inv = 1.0 / std::sqrt(ms + 1e-6);
        for (int64_t j = 0; j < cfg.text_dim; ++j)
            CHECK(e.emb[j] == doctest::Approx(null_row[j] * inv).epsilon(1e-12));
    }

    SUBCASE("sequences past max length truncate with the flag set") {
        TextEmbedding e = text_embed({1, 2, 3, 4, 5}, tp, cfg);
        CHECK(e.truncated);
        CHECK(e.emb.dim(0) == 4);
        TextEmbedding head = text_embed({1, 2, 3, 4}, tp, cfg);
        CHECK(bit_equal(e.emb, head.emb));
    }

    SUBCASE("out-of-vocabulary ids are input errors") {
        CHECK_THROWS_AS(text_embed({cfg.text_vocab}, tp, cfg), InputError);
        CHECK_THROWS_AS(text_embed({-1}, tp, cfg), InputError);
    }
}

TEST_CASE("global_embed: per-block scales, equal timesteps, endpoint contrast") {
    DitConfig cfg = tiny_config();
    Rng r(111);
    ParameterSet p = init_dit_params(cfg, r);

    Tensor ts({4});
    ts[0] = 0.0;
    ts[1] = 0.25;
    ts[2] = 0.25;
    ts[3] = 1.0;
    GlobalEmbedding ge = global_embed({ts, 8.0}, p, cfg);
    CHECK(static_cast<int64_t>(ge.block_scales.size()) == cfg.depth);
    CHECK(ge.g.dim(0) == 4);
    CHECK(ge.g.dim(1) == cfg.hidden);
    real diff12 = 0.0, diff03 = 0.0;
    for (int64_t j = 0; j < cfg.hidden; ++j) {
        diff12 = std::max(diff12, std::fabs(ge.g[1 * cfg.hidden + j] - ge.g[2 * cfg.hidden + j]));
        diff03 = std::max(diff03, std::fabs(ge.g[0 * cfg.hidden + j] - ge.g[3 * cfg.hidden + j]));
    }
    CHECK(diff12 == 0.0);
    CHECK(diff03 > 1e-6);

    CHECK_THROWS_AS(global_embed({Tensor::full({2}, 1.5), 8.0}, p, cfg), InputError);
    CHECK_THROWS_AS(global_embed({Tensor::full({2}, -0.1), 8.0}, p, cfg), InputError);
}

TEST_CASE("config validation") {
    CHECK_NOTHROW(validate(desk_config()));
    CHECK_NOTHROW(validate(paper_config()));
    CHECK(paper_config().depth == 56);
    CHECK(paper_config().hidden == 3456);

    DitConfig cfg = desk_config();
    cfg.heads = 3;  // 64 % 3 != 0
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    cfg = desk_config();
    cfg.rope_split = {3, 6, 7};
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    cfg = desk_config();
    cfg.rope_split = {4, 6, 4};
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    cfg = desk_config();
    cfg.depth = 0;
    CHECK_THROWS_AS(validate(cfg), ConfigError);
}

TEST_CASE("velocity model gradients match finite differences") {
    DitConfig cfg = tiny_config();
    Rng r(121);
    ParameterSet p = init_dit_params(cfg, r);
    open_gates(p, 13);

    Tensor grid = r.uniform_tensor({3, 2, 2, 2}, -1.0, 1.0);
    TokenGrid geom = latent_rows(grid);
    Tensor rows = geom.tokens;
    Tensor text = r.normal_tensor({2, cfg.text_dim}, 1.0);
    Tensor ts({3});
    ts[0] = 0.3;
    ts[1] = 0.0;
    ts[2] = 0.9;

    std::vector<std::string> names = p.names();
    std::vector<Tensor> inputs;
    for (const auto& nm : names) inputs.push_back(p.at(nm));

    auto build = [&](Tape& t, const std::vector<Var>& vs) {
        ParamVars pv;
        for (size_t i = 0; i < names.size(); ++i) pv.put(names[i], vs[i]);
        Var v = velocity_rows_graph(t, t.constant(rows), geom, t.constant(text), ts, 8.0, pv, cfg);
        return t.mean_all(t.square(v));
    };
    CHECK(fdtest::fd_max_rel(build, inputs) < 1e-3);
}

TEST_CASE("velocity model output is zero at init and matches the graph value") {
    DitConfig cfg = tiny_config();
    Rng r(131);
    ParameterSet p = init_dit_params(cfg, r);
    Tensor grid = r.uniform_tensor({2, 2, 2, 2}, -1.0, 1.0);
    TokenGrid geom = latent_rows(grid);
    Tensor text = r.normal_tensor({1, cfg.text_dim}, 1.0);
    Tensor ts = Tensor::full({geom.n()}, 0.6);

    Tensor v0 = predict_velocity(geom.tokens, geom, text, ts, 8.0, p, cfg);
    CHECK(v0.same_shape(geom.tokens));
    CHECK(max_abs_diff(v0, Tensor::zeros(v0.shape())) == 0.0);

    open_gates(p, 17);
    Tensor v1 = predict_velocity(geom.tokens, geom, text, ts, 8.0, p, cfg);
    Tensor v2 = predict_velocity(geom.tokens, geom, text, ts, 8.0, p, cfg);
    CHECK(bit_equal(v1, v2));
    CHECK(max_abs_diff(v1, Tensor::zeros(v1.shape())) > 0.0);
}
