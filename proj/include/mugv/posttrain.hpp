#pragma once

#include <string>
#include <vector>

#include "mugv/flowtrain.hpp"

namespace mugv::post {

using dit::DitConfig;
using dit::TokenGrid;

// One generation context: latents plus everything needed to evaluate them
// under a model (conditioning, text, fps).
struct SampleRecord {
    TokenGrid geom;           // coords/dims; tokens field unused
    Tensor rows;              // (N, 4*c_z)
    flow::ConditionMask mask;
    Tensor text;              // (L, text_dim)
    real fps = 8.0;
};

// Winner and loser share conditioning; only the latents differ.
struct PreferencePair {
    SampleRecord winner;
    SampleRecord loser;
    std::string source = "human_pairwise";
};

struct LabeledSample {
    SampleRecord sample;
    bool desirable = true;
};

struct PostTrainConfig {
    real beta = 1.0;        // preference temperature
    real alpha_sft = 1.0;   // weight of the SFT regularizer
    real gamma_merge = 0.9;
    real w_d = 1.0;         // desirable-sample weight
    real w_u = 1.0;         // undesirable-sample weight
    std::vector<std::string> interleave{"dpo", "kto"};
};

void validate(const PostTrainConfig& cfg);

// ---- checkpoint ensembling ----

// Normalized weights proportional to gamma^(k-1-i) for i = 0..k-1, so the
// newest (last) checkpoint gets the largest share.
std::vector<real> merge_weights(int64_t k, real gamma);

ParameterSet merge_checkpoints(const std::vector<ParameterSet>& checkpoints, real gamma);

// ---- annealed SFT schedule ----

struct AnnealConfig {
    real lr_start = 1e-4;
    real lr_end = 1e-6;
    int64_t steps = 1000;
};

// Cosine decay; the final step lands on lr_end exactly and steps past the
// horizon stay there.
real anneal_lr(int64_t step, const AnnealConfig& cfg);

// ---- preference losses ----

// The (t, noise) draw shared by every error evaluation of one sample or pair.
struct SharedDraw {
    real t = 0.5;
    Tensor noise;
};

SharedDraw make_draw(const SampleRecord& s, Rng& rng);
std::vector<SharedDraw> make_pair_draws(const std::vector<PreferencePair>& pairs, Rng& rng);
std::vector<SharedDraw> make_label_draws(const std::vector<LabeledSample>& labels, Rng& rng);

// Masked flow regression error of the record's latents at the shared draw.
Var flow_error_graph(Tape& t, ParamVars& pv, const DitConfig& cfg, const SampleRecord& s,
                     const SharedDraw& d);
real flow_error(const ParameterSet& params, const DitConfig& cfg, const SampleRecord& s,
                const SharedDraw& d);

// -log sigmoid(beta * [(e_ref_w - e_th_w) - (e_ref_l - e_th_l)]) on scalars.
real dpo_from_errors(real e_th_w, real e_th_l, real e_ref_w, real e_ref_l, real beta);

Var dpo_loss_graph(Tape& t, ParamVars& pv, const ParameterSet& ref, const DitConfig& cfg,
                   const std::vector<PreferencePair>& pairs, real beta,
                   const std::vector<SharedDraw>& draws);
real dpo_loss(const ParameterSet& model, const ParameterSet& ref, const DitConfig& cfg,
              const std::vector<PreferencePair>& pairs, real beta, Rng& rng);

// Mean of w_d*(1 - sigmoid(r - z0)) over desirable and w_u*(1 - sigmoid(z0 - r))
// over undesirable samples; z0 defaults to the batch mean of r.
real kto_from_rewards(const std::vector<real>& rewards, const std::vector<uint8_t>& desirable,
                      real w_d, real w_u, const real* z0_override = nullptr);

// z0_override pins the baseline (it is detached either way, so gradients
// agree; finite-difference probes need the pin).
Var kto_loss_graph(Tape& t, ParamVars& pv, const ParameterSet& ref, const DitConfig& cfg,
                   const std::vector<LabeledSample>& labels, const PostTrainConfig& pcfg,
                   const std::vector<SharedDraw>& draws, const real* z0_override = nullptr);
real kto_loss(const ParameterSet& model, const ParameterSet& ref, const DitConfig& cfg,
              const std::vector<LabeledSample>& labels, const PostTrainConfig& pcfg, Rng& rng);

// ---- automatic pair construction ----

// Per input record: reverse-integrate its latents to the noise the model
// attributes to them, then generate the winner forward from that noise and
// the loser forward from fresh noise, under identical conditioning and steps.
std::vector<PreferencePair> rdpo_pairs(const std::vector<SampleRecord>& real_samples,
                                       const ParameterSet& params, const DitConfig& cfg,
                                       int64_t steps, uint64_t seed);

// ---- interleaved post-training ----

// tag selects the loss: "dpo" consumes pairs, "kto" consumes labels.
struct PrefBatch {
    std::string tag;
    std::vector<PreferencePair> pairs;
    std::vector<LabeledSample> labels;
};

struct PostTrainState {
    ParameterSet params;
    ParameterSet ref;  // frozen at construction
    DitConfig cfg;
    AdamW opt;
    Rng rng;
    size_t plan_pos = 0;

    PostTrainState(ParameterSet start, DitConfig c, real lr, uint64_t seed);
};

struct PostMetrics {
    real total = 0.0;
    real preference = 0.0;
    real sft = 0.0;
    real grad_norm = 0.0;
};

// preference + alpha_sft * mean SFT flow loss on one tape; pref_out/sft_out
// receive the components when non-null.
Var post_loss_graph(Tape& t, ParamVars& pv, const ParameterSet& ref, const DitConfig& cfg,
                    const PrefBatch& batch, const std::vector<SharedDraw>& draws,
                    const flow::FlowBatch& sft, const PostTrainConfig& pcfg,
                    Var* pref_out = nullptr, Var* sft_out = nullptr);

// One optimizer step; the batch tag must match the interleave plan at the
// current position, which advances only on success. ref is never touched.
PostMetrics post_train_step(PostTrainState& state, const PrefBatch& batch,
                            const flow::FlowBatch& sft, const PostTrainConfig& config);

}  // namespace mugv::post
