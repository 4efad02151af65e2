#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "mugv/dit.hpp"
#include "mugv/optim.hpp"

namespace mugv::flow {

using dit::DitConfig;
using dit::TokenGrid;

// Straight paths: x_t = (1-t)*data + t*noise, so the regression target
// v = noise - data is constant along each path.
struct Interpolated {
    Tensor x_t;
    Tensor v_target;
};

Interpolated interpolate(const Tensor& x_data, const Tensor& noise, real t);

// Mean squared error over the elements of unmasked rows; no unmasked rows
// gives 0 with zero gradients.
real flow_loss(const Tensor& pred_v, const Tensor& v_target, const std::vector<uint8_t>& loss_mask);
Var flow_loss_graph(Tape& t, Var pred_v, const Tensor& v_target, const std::vector<uint8_t>& loss_mask);

// Conditioned token rows; rows must cover whole latent units (every token of
// a unit shares the flag). condition_latents is (N, D) with valid rows at
// conditioned positions, or empty when nothing is conditioned.
struct ConditionMask {
    std::vector<uint8_t> conditioned;
    Tensor condition_latents;

    bool any() const {
        for (uint8_t c : conditioned)
            if (c) return true;
        return false;
    }
};

ConditionMask no_condition(int64_t n);
// Marks every token of unit 0 with the clean rows as condition content.
ConditionMask first_frame_mask(const TokenGrid& geom, const Tensor& clean_rows);

void validate_mask(const ConditionMask& mask, const TokenGrid& geom, int64_t row_dim);

struct MaskedInput {
    Tensor rows;                  // conditioned rows carry the clean latents
    Tensor timesteps;             // (N,), 0 at conditioned tokens
    std::vector<uint8_t> loss_mask;  // complement of conditioned
};

MaskedInput apply_condition_mask(const Tensor& x_t, const Tensor& timesteps, const ConditionMask& mask,
                                 const TokenGrid& geom);

// Velocity of the probability-flow ODE at (rows, per-token timesteps).
using VelocityFn = std::function<Tensor(const Tensor& rows, const Tensor& timesteps)>;

VelocityFn model_velocity(const ParameterSet& dit_params, const DitConfig& cfg, const TokenGrid& geom,
                          const Tensor& text_emb, real fps);

// Euler integration x <- x - dt*v from t=1 to t=0, conditioned rows
// re-imposed after every step. Returns latent rows (N, 4*c_z).
Tensor sample_rows(const VelocityFn& velocity, const TokenGrid& geom, int64_t row_dim,
                   const ConditionMask& mask, int64_t steps, Rng& rng);

// Same integration from a caller-supplied state at t=1 instead of fresh noise.
Tensor forward_sample_rows(const VelocityFn& velocity, const TokenGrid& geom, const Tensor& x_start,
                           const ConditionMask& mask, int64_t steps);

// Same integration, t: 0 -> 1 with x <- x + dt*v; recovers the noise that
// would have generated x under the learned field.
Tensor reverse_sample_rows(const VelocityFn& velocity, const TokenGrid& geom, const Tensor& x_rows,
                           const ConditionMask& mask, int64_t steps);

// Full text(+image)-to-video path: noise -> latent grid (U, h, w, c_z).
Tensor sample(const ParameterSet& dit_params, const DitConfig& cfg, const TokenGrid& geom,
              const Tensor& text_emb, const ConditionMask& mask, int64_t steps, uint64_t seed,
              real fps = 8.0);

// ---- curriculum ----

struct CurriculumConfig {
    int64_t stage1_steps = 1000;
    int64_t stage2_steps = 1000;
    std::array<int64_t, 2> res1{16, 16}, res2{16, 16}, res3{32, 32};  // pixels per frame
    int64_t frames1 = 8, frames2 = 16, frames3 = 16;
    real image_ratio_start = 0.8;
    real image_ratio_end = 0.2;
    real ffm_prob2 = 0.3, ffm_prob3 = 0.3;  // first-frame mask probability
};

void validate(const CurriculumConfig& cfg);

struct StageDescriptor {
    int stage = 1;  // 1..3
    std::array<int64_t, 2> resolution{0, 0};
    int64_t clip_frames = 0;
    real image_ratio = 0.0;
    real first_frame_mask_prob = 0.0;
};

// Piecewise schedule; image_ratio anneals linearly across stage 1 and steps
// past the final boundary clamp to stage 3.
StageDescriptor curriculum_schedule(int64_t step, const CurriculumConfig& cfg);

// ---- training ----

struct FlowSample {
    TokenGrid geom;      // coords/dims; tokens field unused
    Tensor clean_rows;   // (N, 4*c_z)
    Tensor noise;        // same shape
    real t = 0.5;        // in (0, 1)
    ConditionMask mask;  // empty conditioned set for pure text-to-video
};

struct FlowBatch {
    std::vector<FlowSample> samples;
    Tensor text_emb;  // (L, text_dim), shared across the batch
    real fps = 8.0;
};

// Draws noise and t per sample; mask_prob picks first-frame conditioning.
FlowBatch make_batch(const std::vector<Tensor>& latent_grids, const Tensor& text_emb, real fps,
                     real mask_prob, Rng& rng);

struct StepMetrics {
    real loss = 0.0;
    real grad_norm = 0.0;
};

class FlowTrainer {
public:
    FlowTrainer(ParameterSet dit_params, DitConfig cfg, real lr);

    // One forward/backward/update over the batch; loss is the mean of the
    // per-sample masked flow losses. Non-finite loss aborts.
    StepMetrics step(const FlowBatch& batch);

    const ParameterSet& params() const { return params_; }
    ParameterSet& params() { return params_; }
    AdamW& optimizer() { return opt_; }
    const DitConfig& config() const { return cfg_; }

private:
    ParameterSet params_;
    DitConfig cfg_;
    AdamW opt_;
};

// Shared by every trainer in the project: sqrt of the sum of squared
// gradient entries, in sorted name order.
real grad_norm(const std::map<std::string, Tensor>& grads);

}  // namespace mugv::flow
