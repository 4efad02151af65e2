#pragma once

#include <optional>

#include "mugv/clip.hpp"
#include "mugv/graph.hpp"
#include "mugv/optim.hpp"
#include "mugv/rng.hpp"

namespace mugv::vae {

struct VaeConfig {
    int64_t c_z = 24;          // latent channels per unit
    int64_t base_channels = 12;
    real lambda_kl = 1e-6;
    real gamma_gan = 0.01;
    real w_mse = 1.0;
    real w_l1 = 1.0;
    real w_perc = 0.1;
    real adaptive_floor = 0.1;
    bool gan_enabled = false;
};

// U latent units, one per 8-frame chunk. Channels-last (U, H/8, W/8, C_z).
// In deterministic encode mode units == post_mean.
struct LatentSequence {
    Tensor units;
    Tensor post_mean;
    Tensor post_logvar;
};

// Fresh parameters under prefixes enc. / post. / dec. / disc. .
ParameterSet init_vae_params(const VaeConfig& cfg, int64_t clip_channels, Rng& rng);

// Each unit is computed from exactly one 8-frame chunk; pass rng to sample
// z = mu + sigma*eps, or nullptr for the deterministic mode z = mu.
LatentSequence encode(const VideoClip& clip, const ParameterSet& params, const VaeConfig& cfg, Rng* rng);

// Decodes in U/window independent calls of `window` contiguous units each.
VideoClip decode(const LatentSequence& latents, int window, const ParameterSet& params, const VaeConfig& cfg,
                 real fps = 8.0);

// |forward temporal difference of the 5-point Laplacian| per pixel, channels
// mean-reduced first; the last frame copies the previous row. (T, 1, H, W).
Tensor saliency_weights(const VideoClip& clip);

real kl_divergence(const Tensor& post_mean, const Tensor& post_logvar);

struct RecComponents {
    real mse = 0.0;
    real l1 = 0.0;   // adaptive-weighted when saliency given
    real perc = 0.0;
    real total = 0.0;
};

RecComponents reconstruction_loss(const Tensor& clip, const Tensor& recon, const VaeConfig& cfg,
                                  const Tensor* saliency);

struct VaeLossComponents {
    RecComponents rec;
    real kl = 0.0;
    real gan = 0.0;
    real total = 0.0;
};

VaeLossComponents vae_total_loss(const Tensor& clip, const Tensor& recon, const Tensor& post_mean,
                                 const Tensor& post_logvar, const Tensor* critic_scores, const VaeConfig& cfg);

// ---- graph builders (shared by the value wrappers, training, and tests) ----

// chunk (C, 8, H, W) -> (mu, logvar), each (C_z, h, w)
std::pair<Var, Var> encoder_chunk_graph(Tape& t, Var chunk, const ParamVars& pv, const VaeConfig& cfg);

// window (R, h, w, C_z) -> frames (8R, C, H, W) in (C, T, H, W) layout
// internally; returned value is (8R, C, H, W)
Var decoder_window_graph(Tape& t, Var window, const ParamVars& pv, const VaeConfig& cfg);

// frames (T, C, H, W) -> critic score map
Var critic_graph(Tape& t, Var frames, const ParamVars& pv, const VaeConfig& cfg);

struct RecLossVars {
    Var mse, l1, perc, total;
};
RecLossVars reconstruction_loss_graph(Tape& t, Var recon, const Tensor& clip, const VaeConfig& cfg,
                                      const Tensor* saliency);

Var kl_graph(Tape& t, Var mean, Var logvar);

// ---- training ----

struct VaeTrainStats {
    VaeLossComponents loss;
    real disc_loss = 0.0;  // only meaningful when the gan phase is on
};

class VaeTrainer {
public:
    VaeTrainer(ParameterSet params, VaeConfig cfg, real lr);

    // One AdamW step on enc./post./dec. (plus a critic step in gan phase).
    // Latents are sampled with rng; saliency comes from the target clip.
    VaeTrainStats step(const VideoClip& clip, Rng& rng);

    const ParameterSet& params() const { return params_; }
    ParameterSet& params() { return params_; }
    const VaeConfig& config() const { return cfg_; }

private:
    ParameterSet params_;
    VaeConfig cfg_;
    AdamW opt_;
    AdamW disc_opt_;
};

}  // namespace mugv::vae
