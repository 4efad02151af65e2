#include "mugv/videovae.hpp"

#include <cmath>
#include <cstring>

namespace mugv::vae {

namespace {

void add_conv(ParameterSet& ps, Rng& rng, const std::string& name, int64_t ci, int64_t co,
              std::array<int64_t, 3> k) {
    real std = 1.0 / std::sqrt(static_cast<real>(ci * k[0] * k[1] * k[2]));
    ps.set(name + ".w", rng.normal_tensor({co, ci, k[0], k[1], k[2]}, std));
    ps.set(name + ".b", Tensor::zeros({co}));
}

void add_conv2(ParameterSet& ps, Rng& rng, const std::string& name, int64_t ci, int64_t co, int64_t k) {
    real std = 1.0 / std::sqrt(static_cast<real>(ci * k * k));
    ps.set(name + ".w", rng.normal_tensor({co, ci, k, k}, std));
    ps.set(name + ".b", Tensor::zeros({co}));
}

Var conv(Tape& t, Var x, const ParamVars& pv, const std::string& name, std::array<int, 3> stride,
         std::array<int, 3> pad) {
    return t.conv3d(x, pv.at(name + ".w"), pv.at(name + ".b"), stride, pad);
}

constexpr std::array<int, 3> kSpatialPad{0, 1, 1};
constexpr std::array<int, 3> kFullPad{1, 1, 1};
constexpr std::array<int, 3> kUnit{1, 1, 1};

// chunk frames u: (T, C, H, W) -> (C, 8, H, W)
Tensor chunk_of(const Tensor& frames, int64_t u) {
    int64_t C = frames.dim(1), H = frames.dim(2), W = frames.dim(3);
    Tensor out({C, 8, H, W});
    for (int64_t f = 0; f < 8; ++f)
        for (int64_t c = 0; c < C; ++c)
            std::memcpy(out.data() + (c * 8 + f) * H * W, frames.data() + ((8 * u + f) * C + c) * H * W,
                        sizeof(real) * static_cast<size_t>(H * W));
    return out;
}

}  // namespace

ParameterSet init_vae_params(const VaeConfig& cfg, int64_t clip_channels, Rng& rng) {
    int64_t F = cfg.base_channels;
    ParameterSet ps;
    add_conv(ps, rng, "enc.s0", clip_channels, F, {1, 3, 3});
    add_conv(ps, rng, "enc.sd1", F, F, {1, 3, 3});
    add_conv(ps, rng, "enc.td1", F, F, {3, 3, 3});
    add_conv(ps, rng, "enc.sd2", F, F, {1, 3, 3});
    add_conv(ps, rng, "enc.td2", F, F, {3, 3, 3});
    add_conv(ps, rng, "enc.sd3", F, F, {1, 3, 3});
    add_conv(ps, rng, "enc.td3", F, F, {3, 3, 3});
    add_conv(ps, rng, "post.head", F, 2 * cfg.c_z, {1, 3, 3});

    add_conv(ps, rng, "dec.head", cfg.c_z, F, {1, 3, 3});
    add_conv(ps, rng, "dec.t1", F, F, {3, 3, 3});
    add_conv(ps, rng, "dec.s1", F, F, {1, 3, 3});
    add_conv(ps, rng, "dec.t2", F, F, {3, 3, 3});
    add_conv(ps, rng, "dec.s2", F, F, {1, 3, 3});
    add_conv(ps, rng, "dec.t3", F, F, {3, 3, 3});
    add_conv(ps, rng, "dec.s3", F, F, {1, 3, 3});
    add_conv(ps, rng, "dec.out", F, clip_channels, {1, 3, 3});

    add_conv2(ps, rng, "disc.c0", clip_channels, F, 4);
    add_conv2(ps, rng, "disc.c1", F, 2 * F, 4);
    add_conv2(ps, rng, "disc.c2", 2 * F, 1, 3);
    return ps;
}

std::pair<Var, Var> encoder_chunk_graph(Tape& t, Var chunk, const ParamVars& pv, const VaeConfig& cfg) {
    Var x = t.silu(conv(t, chunk, pv, "enc.s0", kUnit, kSpatialPad));
    x = t.silu(conv(t, x, pv, "enc.sd1", {1, 2, 2}, kSpatialPad));
    x = t.silu(conv(t, x, pv, "enc.td1", {2, 1, 1}, kFullPad));
    x = t.silu(conv(t, x, pv, "enc.sd2", {1, 2, 2}, kSpatialPad));
    x = t.silu(conv(t, x, pv, "enc.td2", {2, 1, 1}, kFullPad));
    x = t.silu(conv(t, x, pv, "enc.sd3", {1, 2, 2}, kSpatialPad));
    x = t.silu(conv(t, x, pv, "enc.td3", {2, 1, 1}, kFullPad));
    Var post = conv(t, x, pv, "post.head", kUnit, kSpatialPad);  // (2*C_z, 1, h, w)
    int64_t h = t.val(post).dim(2), w = t.val(post).dim(3);
    Var flat = t.reshape(post, {2 * cfg.c_z, h, w});
    Var mu = t.slice_flat(flat, 0, {cfg.c_z, h, w});
    Var logvar = t.slice_flat(flat, cfg.c_z * h * w, {cfg.c_z, h, w});
    return {mu, logvar};
}

Var decoder_window_graph(Tape& t, Var window, const ParamVars& pv, const VaeConfig& cfg) {
    (void)cfg;
    Var x = t.permute(window, {3, 0, 1, 2});  // (C_z, R, h, w)
    x = t.silu(conv(t, x, pv, "dec.head", kUnit, kSpatialPad));
    x = t.silu(conv(t, t.upsample2x_t(x), pv, "dec.t1", kUnit, kFullPad));
    x = t.silu(conv(t, t.upsample2x_hw(x), pv, "dec.s1", kUnit, kSpatialPad));
    x = t.silu(conv(t, t.upsample2x_t(x), pv, "dec.t2", kUnit, kFullPad));
    x = t.silu(conv(t, t.upsample2x_hw(x), pv, "dec.s2", kUnit, kSpatialPad));
    x = t.silu(conv(t, t.upsample2x_t(x), pv, "dec.t3", kUnit, kFullPad));
    x = t.silu(conv(t, t.upsample2x_hw(x), pv, "dec.s3", kUnit, kSpatialPad));
    x = t.tanh_(conv(t, x, pv, "dec.out", kUnit, kSpatialPad));  // (C, 8R, H, W)
    return t.permute(x, {1, 0, 2, 3});
}

Var critic_graph(Tape& t, Var frames, const ParamVars& pv, const VaeConfig& cfg) {
    (void)cfg;
    Var x = t.leaky_relu(t.conv2d(frames, pv.at("disc.c0.w"), pv.at("disc.c0.b"), 2, 1), 0.2);
    x = t.leaky_relu(t.conv2d(x, pv.at("disc.c1.w"), pv.at("disc.c1.b"), 2, 1), 0.2);
    return t.conv2d(x, pv.at("disc.c2.w"), pv.at("disc.c2.b"), 1, 1);
}

LatentSequence encode(const VideoClip& clip, const ParameterSet& params, const VaeConfig& cfg, Rng* rng) {
    validate_clip(clip);
    const Tensor& frames = clip.frames;
    if (frames.dim(0) % 8 != 0)
        throw DimensionError("encode: axis T = " + std::to_string(frames.dim(0)) + " not divisible by 8");
    if (frames.dim(2) % 8 != 0)
        throw DimensionError("encode: axis H = " + std::to_string(frames.dim(2)) + " not divisible by 8");
    if (frames.dim(3) % 8 != 0)
        throw DimensionError("encode: axis W = " + std::to_string(frames.dim(3)) + " not divisible by 8");
    int64_t U = frames.dim(0) / 8, h = frames.dim(2) / 8, w = frames.dim(3) / 8;

    LatentSequence out;
    out.units = Tensor({U, h, w, cfg.c_z});
    out.post_mean = Tensor({U, h, w, cfg.c_z});
    out.post_logvar = Tensor({U, h, w, cfg.c_z});

    for (int64_t u = 0; u < U; ++u) {
        // one tape per chunk: unit u never sees any other chunk's values
        Tape t;
        ParamVars pv = register_params(t, params, false, "enc.");
        ParamVars post = register_params(t, params, false, "post.");
        for (const auto& [name, var] : post.all()) pv.put(name, var);
        auto [mu, logvar] = encoder_chunk_graph(t, t.constant(chunk_of(frames, u)), pv, cfg);
        const Tensor& m = t.val(mu);
        const Tensor& lv = t.val(logvar);
        for (int64_t c = 0; c < cfg.c_z; ++c)
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j) {
                    int64_t src = (c * h + i) * w + j;
                    int64_t dst = ((u * h + i) * w + j) * cfg.c_z + c;
                    out.post_mean[dst] = m[src];
                    out.post_logvar[dst] = lv[src];
                    out.units[dst] = rng ? m[src] + std::exp(0.5 * lv[src]) * rng->normal() : m[src];
                }
    }
    return out;
}

VideoClip decode(const LatentSequence& latents, int window, const ParameterSet& params, const VaeConfig& cfg,
                 real fps) {
    const Tensor& units = latents.units;
    if (units.rank() != 4 || units.dim(3) != cfg.c_z)
        throw DimensionError("decode: units must be (U, h, w, " + std::to_string(cfg.c_z) + "), got " +
                             units.shape_str());
    if (window != 1 && window != 4 && window != 8)
        throw InputError("decode: window must be 1, 4, or 8, got " + std::to_string(window));
    int64_t U = units.dim(0), h = units.dim(1), w = units.dim(2);
    if (U % window != 0)
        throw DimensionError("decode: U = " + std::to_string(U) + " not divisible by window " +
                             std::to_string(window) + " (no implicit padding)");

    // probe the output channel count from the decoder's last conv
    int64_t C = params.at("dec.out.w").dim(0);
    VideoClip out;
    out.fps = fps;
    out.frames = Tensor({8 * U, C, 8 * h, 8 * w});

    int64_t row = h * w * cfg.c_z;
    for (int64_t w0 = 0; w0 < U; w0 += window) {
        Tape t;
        ParamVars pv = register_params(t, params, false, "dec.");
        Tensor win({window, h, w, cfg.c_z});
        std::memcpy(win.data(), units.data() + w0 * row, sizeof(real) * static_cast<size_t>(window * row));
        Var frames = decoder_window_graph(t, t.constant(std::move(win)), pv, cfg);
        const Tensor& f = t.val(frames);
        std::memcpy(out.frames.data() + 8 * w0 * C * 64 * h * w, f.data(),
                    sizeof(real) * static_cast<size_t>(f.numel()));
    }
    return out;
}

Tensor saliency_weights(const VideoClip& clip) {
    const Tensor& x = clip.frames;
    if (x.rank() != 4) throw DimensionError("saliency_weights: frames must be (T, C, H, W)");
    int64_t T = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (T < 2) throw InputError("saliency_weights: need at least 2 frames for a temporal difference");

    // channel mean then 5-point Laplacian with replicate-edge padding
    Tensor lap({T, H, W});
    std::vector<real> mean(static_cast<size_t>(H * W));
    for (int64_t t = 0; t < T; ++t) {
        for (int64_t i = 0; i < H * W; ++i) {
            real s = 0.0;
            for (int64_t c = 0; c < C; ++c) s += x[(t * C + c) * H * W + i];
            mean[static_cast<size_t>(i)] = s / static_cast<real>(C);
        }
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j) {
                auto at = [&](int64_t a, int64_t b) {
                    a = std::max<int64_t>(0, std::min(H - 1, a));
                    b = std::max<int64_t>(0, std::min(W - 1, b));
                    return mean[static_cast<size_t>(a * W + b)];
                };
                lap[(t * H + i) * W + j] =
                    at(i - 1, j) + at(i + 1, j) + at(i, j - 1) + at(i, j + 1) - 4.0 * at(i, j);
            }
    }
    Tensor out({T, 1, H, W});
    for (int64_t t = 0; t + 1 < T; ++t)
        for (int64_t i = 0; i < H * W; ++i) out[t * H * W + i] = std::fabs(lap[(t + 1) * H * W + i] - lap[t * H * W + i]);
    for (int64_t i = 0; i < H * W; ++i) out[(T - 1) * H * W + i] = out[(T - 2) * H * W + i];
    return out;
}

Var kl_graph(Tape& t, Var mean, Var logvar) {
    // -1/2 (1 + logvar - mu^2 - sigma^2), averaged over elements
    Var inner = t.sub(t.sub(t.add_scalar(logvar, 1.0), t.square(mean)), t.exp_(logvar));
    return t.mean_all(t.scale(inner, -0.5));
}

real kl_divergence(const Tensor& post_mean, const Tensor& post_logvar) {
    require_same_shape(post_mean, post_logvar, "kl_divergence");
    if (!post_mean.all_finite() || !post_logvar.all_finite())
        throw NumericError("kl_divergence: non-finite posterior statistics");
    Tape t;
    return t.val(kl_graph(t, t.constant(post_mean), t.constant(post_logvar)))[0];
}

RecLossVars reconstruction_loss_graph(Tape& t, Var recon, const Tensor& clip, const VaeConfig& cfg,
                                      const Tensor* saliency) {
    require_same_shape(t.val(recon), clip, "reconstruction_loss");
    Var target = t.constant(clip);
    Var diff = t.sub(recon, target);
    Var mse = t.mean_all(t.square(diff));

    Var absd = t.abs_(diff);
    Var l1{};
    if (saliency) {
        if (saliency->rank() != 4 || saliency->dim(0) != clip.dim(0) || saliency->dim(1) != 1 ||
            saliency->dim(2) != clip.dim(2) || saliency->dim(3) != clip.dim(3))
            throw DimensionError("reconstruction_loss: saliency must be (T, 1, H, W) matching the clip");
        real mean = 0.0;
        for (int64_t i = 0; i < saliency->numel(); ++i) mean += (*saliency)[i];
        mean /= static_cast<real>(saliency->numel());
        Tensor weight = *saliency;
        real inv = mean > 0.0 ? 1.0 / mean : 0.0;  // all-static clip keeps only the floor
        for (int64_t i = 0; i < weight.numel(); ++i) weight[i] = weight[i] * inv + cfg.adaptive_floor;
        l1 = t.mean_all(t.mul_chan_bcast(absd, t.constant(std::move(weight))));
    } else {
        l1 = t.mean_all(absd);
    }

    Var perc{};
    if (cfg.w_perc != 0.0) {
        if (clip.dim(2) % 4 != 0 || clip.dim(3) % 4 != 0)
            throw DimensionError("reconstruction_loss: H and W must be divisible by 4 for the 3-scale pyramid");
        Var xr = recon;
        Var xt = target;
        Var acc{};
        for (int s = 0; s < 3; ++s) {
            if (s > 0) {
                xr = t.avgpool2x_hw(xr);
                xt = t.avgpool2x_hw(xt);
            }
            Var level = t.mean_all(t.abs_(t.sub(t.grad_mag(xr, 1e-12), t.grad_mag(xt, 1e-12))));
            acc = s == 0 ? level : t.add(acc, level);
        }
        perc = t.scale(acc, 1.0 / 3.0);
    } else {
        perc = t.constant(Tensor::scalar(0.0));
    }

    Var total = t.add(t.add(t.scale(mse, cfg.w_mse), t.scale(l1, cfg.w_l1)), t.scale(perc, cfg.w_perc));
    return {mse, l1, perc, total};
}

RecComponents reconstruction_loss(const Tensor& clip, const Tensor& recon, const VaeConfig& cfg,
                                  const Tensor* saliency) {
    Tape t;
    RecLossVars v = reconstruction_loss_graph(t, t.constant(recon), clip, cfg, saliency);
    return {t.val(v.mse)[0], t.val(v.l1)[0], t.val(v.perc)[0], t.val(v.total)[0]};
}

VaeLossComponents vae_total_loss(const Tensor& clip, const Tensor& recon, const Tensor& post_mean,
                                 const Tensor& post_logvar, const Tensor* critic_scores, const VaeConfig& cfg) {
    if (cfg.gan_enabled && critic_scores == nullptr)
        throw ConfigError("vae_total_loss: gan_enabled requires critic scores");
    Tape t;
    RecLossVars rec = reconstruction_loss_graph(t, t.constant(recon), clip, cfg, nullptr);
    Var kl = kl_graph(t, t.constant(post_mean), t.constant(post_logvar));
    Var gan = cfg.gan_enabled ? t.neg(t.mean_all(t.constant(*critic_scores))) : t.constant(Tensor::scalar(0.0));
    Var total = t.add(t.add(rec.total, t.scale(kl, cfg.lambda_kl)), t.scale(gan, cfg.gamma_gan));

    VaeLossComponents out;
    out.rec = {t.val(rec.mse)[0], t.val(rec.l1)[0], t.val(rec.perc)[0], t.val(rec.total)[0]};
    out.kl = t.val(kl)[0];
    out.gan = t.val(gan)[0];
    out.total = t.val(total)[0];
    return out;
}

VaeTrainer::VaeTrainer(ParameterSet params, VaeConfig cfg, real lr)
    : params_(std::move(params)), cfg_(std::move(cfg)), opt_(lr), disc_opt_(lr) {}

VaeTrainStats VaeTrainer::step(const VideoClip& clip, Rng& rng) {
    validate_clip(clip);
    Tensor saliency = saliency_weights(clip);
    int64_t U = clip.t() / 8;

    Tape t;
    ParamVars pv;
    for (const char* prefix : {"enc.", "post.", "dec."}) {
        ParamVars part = register_params(t, params_, true, prefix);
        for (const auto& [name, var] : part.all()) pv.put(name, var);
    }
    ParamVars disc = register_params(t, params_, false, "disc.");

    std::vector<Var> zs, mus, lvs;
    for (int64_t u = 0; u < U; ++u) {
        auto [mu, logvar] = encoder_chunk_graph(t, t.constant(chunk_of(clip.frames, u)), pv, cfg_);
        Tensor eps = rng.normal_tensor(t.val(mu).shape());
        Var z = t.add(mu, t.mul(t.exp_(t.scale(logvar, 0.5)), t.constant(std::move(eps))));
        int64_t h = t.val(mu).dim(1), w = t.val(mu).dim(2);
        zs.push_back(t.reshape(t.permute(z, {1, 2, 0}), {1, h, w, cfg_.c_z}));
        mus.push_back(mu);
        lvs.push_back(logvar);
    }
    Var window = zs.size() == 1 ? zs[0] : t.concat0(zs);
    Var recon = decoder_window_graph(t, window, pv, cfg_);

    RecLossVars rec = reconstruction_loss_graph(t, recon, clip.frames, cfg_, &saliency);
    Var kl = kl_graph(t, t.concat0(mus), t.concat0(lvs));
    Var gan = cfg_.gan_enabled ? t.neg(t.mean_all(critic_graph(t, recon, disc, cfg_)))
                               : t.constant(Tensor::scalar(0.0));
    Var total = t.add(t.add(rec.total, t.scale(kl, cfg_.lambda_kl)), t.scale(gan, cfg_.gamma_gan));

    t.backward(total);
    opt_.update(params_, collect_grads(t, pv));

    VaeTrainStats stats;
    stats.loss.rec = {t.val(rec.mse)[0], t.val(rec.l1)[0], t.val(rec.perc)[0], t.val(rec.total)[0]};
    stats.loss.kl = t.val(kl)[0];
    stats.loss.gan = t.val(gan)[0];
    stats.loss.total = t.val(total)[0];

    if (cfg_.gan_enabled) {
        Tape d;
        ParamVars dv = register_params(d, params_, true, "disc.");
        Var real_scores = critic_graph(d, d.constant(clip.frames), dv, cfg_);
        Var fake_scores = critic_graph(d, d.constant(t.val(recon)), dv, cfg_);
        Var d_loss = d.add(d.mean_all(d.relu(d.add_scalar(d.neg(real_scores), 1.0))),
                           d.mean_all(d.relu(d.add_scalar(fake_scores, 1.0))));
        d.backward(d_loss);
        disc_opt_.update(params_, collect_grads(d, dv));
        stats.disc_loss = d.val(d_loss)[0];
    }
    return stats;
}

}  // namespace mugv::vae
