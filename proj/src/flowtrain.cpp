#include "mugv/flowtrain.hpp"

#include <cmath>

#include "mugv/errors.hpp"

namespace mugv::flow {

Interpolated interpolate(const Tensor& x_data, const Tensor& noise, real t) {
    require_same_shape(x_data, noise, "interpolate");
    if (!(t >= 0.0 && t <= 1.0)) throw InputError("interpolation time outside [0, 1]");
    Interpolated out;
    out.x_t = Tensor(x_data.shape());
    out.v_target = Tensor(x_data.shape());
    for (int64_t i = 0; i < x_data.numel(); ++i) {
        out.x_t[i] = (1.0 - t) * x_data[i] + t * noise[i];
        out.v_target[i] = noise[i] - x_data[i];
    }
    return out;
}

real flow_loss(const Tensor& pred_v, const Tensor& v_target, const std::vector<uint8_t>& loss_mask) {
    require_same_shape(pred_v, v_target, "flow_loss");
    if (pred_v.rank() != 2 || static_cast<int64_t>(loss_mask.size()) != pred_v.dim(0))
        throw DimensionError("flow_loss needs (N, D) rows and one mask entry per row");
    int64_t D = pred_v.dim(1);
    real sum = 0.0;
    int64_t count = 0;
    for (int64_t i = 0; i < pred_v.dim(0); ++i) {
        if (!loss_mask[static_cast<size_t>(i)]) continue;
        for (int64_t j = 0; j < D; ++j) {
            real d = pred_v[i * D + j] - v_target[i * D + j];
            sum += d * d;
        }
        count += D;
    }
    return count > 0 ? sum / static_cast<real>(count) : 0.0;
}

Var flow_loss_graph(Tape& t, Var pred_v, const Tensor& v_target, const std::vector<uint8_t>& loss_mask) {
    return t.masked_mean(t.square(t.sub(pred_v, t.constant(v_target))), loss_mask);
}

ConditionMask no_condition(int64_t n) {
    ConditionMask m;
    m.conditioned.assign(static_cast<size_t>(n), 0);
    return m;
}

ConditionMask first_frame_mask(const TokenGrid& geom, const Tensor& clean_rows) {
    if (clean_rows.rank() != 2 || clean_rows.dim(0) != geom.n())
        throw DimensionError("clean rows do not match the token grid");
    ConditionMask m;
    m.conditioned.assign(static_cast<size_t>(geom.n()), 0);
    for (int64_t i = 0; i < geom.n(); ++i)
        if ((*geom.coords)[static_cast<size_t>(i)][0] == 0) m.conditioned[static_cast<size_t>(i)] = 1;
    m.condition_latents = clean_rows;
    return m;
}

void validate_mask(const ConditionMask& mask, const TokenGrid& geom, int64_t row_dim) {
    int64_t n = geom.n();
    if (static_cast<int64_t>(mask.conditioned.size()) != n || !geom.coords ||
        static_cast<int64_t>(geom.coords->size()) != n)
        throw DimensionError("condition mask does not match the token grid");
    // frame-aligned conditioning: a latent unit is either fully conditioned
    // or fully free
    std::vector<int> unit_flag(static_cast<size_t>(geom.dims[0]), -1);
    for (int64_t i = 0; i < n; ++i) {
        int u = (*geom.coords)[static_cast<size_t>(i)][0];
        int f = mask.conditioned[static_cast<size_t>(i)] ? 1 : 0;
        int& seen = unit_flag[static_cast<size_t>(u)];
        if (seen == -1)
            seen = f;
        else if (seen != f)
            throw InputError("conditioned tokens must cover whole latent units");
    }
    if (mask.any() && (mask.condition_latents.rank() != 2 || mask.condition_latents.dim(0) != n ||
                       mask.condition_latents.dim(1) != row_dim))
        throw InputError("condition mask lacks clean latents for its conditioned tokens");
}

MaskedInput apply_condition_mask(const Tensor& x_t, const Tensor& timesteps, const ConditionMask& mask,
                                 const TokenGrid& geom) {
    if (x_t.rank() != 2 || timesteps.rank() != 1 || timesteps.dim(0) != x_t.dim(0))
        throw DimensionError("apply_condition_mask needs (N, D) rows and (N,) timesteps");
    validate_mask(mask, geom, x_t.dim(1));
    MaskedInput out;
    out.rows = x_t;
    out.timesteps = timesteps;
    out.loss_mask.assign(static_cast<size_t>(x_t.dim(0)), 1);
    int64_t D = x_t.dim(1);
    for (int64_t i = 0; i < x_t.dim(0); ++i) {
        if (!mask.conditioned[static_cast<size_t>(i)]) continue;
        for (int64_t j = 0; j < D; ++j) out.rows[i * D + j] = mask.condition_latents[i * D + j];
        out.timesteps[i] = 0.0;
        out.loss_mask[static_cast<size_t>(i)] = 0;
    }
    return out;
}

VelocityFn model_velocity(const ParameterSet& dit_params, const DitConfig& cfg, const TokenGrid& geom,
                          const Tensor& text_emb, real fps) {
    return [params = dit_params, cfg, geom, text_emb, fps](const Tensor& rows, const Tensor& ts) {
        return dit::predict_velocity(rows, geom, text_emb, ts, fps, params, cfg);
    };
}

namespace {

void impose(Tensor& x, const ConditionMask& mask) {
    if (!mask.any()) return;
    int64_t D = x.dim(1);
    for (int64_t i = 0; i < x.dim(0); ++i)
        if (mask.conditioned[static_cast<size_t>(i)])
            for (int64_t j = 0; j < D; ++j) x[i * D + j] = mask.condition_latents[i * D + j];
}

Tensor step_timesteps(int64_t n, real tc, const ConditionMask& mask) {
    Tensor ts = Tensor::full({n}, tc);
    for (int64_t i = 0; i < n; ++i)
        if (mask.conditioned[static_cast<size_t>(i)]) ts[i] = 0.0;
    return ts;
}

}  // namespace

Tensor sample_rows(const VelocityFn& velocity, const TokenGrid& geom, int64_t row_dim,
                   const ConditionMask& mask, int64_t steps, Rng& rng) {
    if (steps < 1) throw InputError("steps must be >= 1");
    validate_mask(mask, geom, row_dim);
    return forward_sample_rows(velocity, geom, rng.normal_tensor({geom.n(), row_dim}), mask, steps);
}

Tensor forward_sample_rows(const VelocityFn& velocity, const TokenGrid& geom, const Tensor& x_start,
                           const ConditionMask& mask, int64_t steps) {
    if (steps < 1) throw InputError("steps must be >= 1");
    if (x_start.rank() != 2 || x_start.dim(0) != geom.n())
        throw DimensionError("rows do not match the token grid");
    validate_mask(mask, geom, x_start.dim(1));
    int64_t n = geom.n();
    Tensor x = x_start;
    impose(x, mask);
    real dt = 1.0 / static_cast<real>(steps);
    for (int64_t s = 0; s < steps; ++s) {
        real tc = 1.0 - static_cast<real>(s) * dt;
        Tensor v = velocity(x, step_timesteps(n, tc, mask));
        require_same_shape(v, x, "sample velocity");
        for (int64_t i = 0; i < x.numel(); ++i) x[i] -= dt * v[i];
        impose(x, mask);
    }
    return x;
}

Tensor reverse_sample_rows(const VelocityFn& velocity, const TokenGrid& geom, const Tensor& x_rows,
                           const ConditionMask& mask, int64_t steps) {
    if (steps < 1) throw InputError("steps must be >= 1");
    if (x_rows.rank() != 2 || x_rows.dim(0) != geom.n())
        throw DimensionError("rows do not match the token grid");
    validate_mask(mask, geom, x_rows.dim(1));
    Tensor x = x_rows;
    impose(x, mask);
    real dt = 1.0 / static_cast<real>(steps);
    for (int64_t s = 0; s < steps; ++s) {
        real tc = static_cast<real>(s) * dt;
        Tensor v = velocity(x, step_timesteps(geom.n(), tc, mask));
        require_same_shape(v, x, "sample velocity");
        for (int64_t i = 0; i < x.numel(); ++i) x[i] += dt * v[i];
        impose(x, mask);
    }
    return x;
}

Tensor sample(const ParameterSet& dit_params, const DitConfig& cfg, const TokenGrid& geom,
              const Tensor& text_emb, const ConditionMask& mask, int64_t steps, uint64_t seed,
              real fps) {
    Rng rng(seed);
    Tensor rows = sample_rows(model_velocity(dit_params, cfg, geom, text_emb, fps), geom,
                              cfg.patch_dim(), mask, steps, rng);
    TokenGrid out;
    out.tokens = std::move(rows);
    out.coords = geom.coords;
    out.dims = geom.dims;
    return dit::rows_to_grid(out);
}

void validate(const CurriculumConfig& cfg) {
    if (cfg.stage1_steps < 1 || cfg.stage2_steps < 1)
        throw ConfigError("curriculum stages need at least one step");
    if (cfg.image_ratio_start < cfg.image_ratio_end)
        throw ConfigError("image_ratio must not increase within stage 1");
    if (cfg.image_ratio_start > 1.0 || cfg.image_ratio_end < 0.0)
        throw ConfigError("image_ratio endpoints must lie in [0, 1]");
    if (!(cfg.ffm_prob2 > 0.0) || !(cfg.ffm_prob3 > 0.0))
        throw ConfigError("stages 2 and 3 need first_frame_mask_prob > 0");
    if (cfg.res2[0] < cfg.res1[0] || cfg.res2[1] < cfg.res1[1] || cfg.res3[0] < cfg.res2[0] ||
        cfg.res3[1] < cfg.res2[1])
        throw ConfigError("resolution must be non-decreasing across stages");
    if (cfg.frames2 < cfg.frames1 || cfg.frames3 < cfg.frames2)
        throw ConfigError("clip length must be non-decreasing across stages");
}

StageDescriptor curriculum_schedule(int64_t step, const CurriculumConfig& cfg) {
    validate(cfg);
    if (step < 0) throw InputError("curriculum step must be >= 0");
    StageDescriptor d;
    if (step < cfg.stage1_steps) {
        d.stage = 1;
        d.resolution = cfg.res1;
        d.clip_frames = cfg.frames1;
        real span = static_cast<real>(std::max<int64_t>(1, cfg.stage1_steps - 1));
        d.image_ratio =
            cfg.image_ratio_start + (cfg.image_ratio_end - cfg.image_ratio_start) * (static_cast<real>(step) / span);
        d.first_frame_mask_prob = 0.0;
    } else if (step < cfg.stage1_steps + cfg.stage2_steps) {
        d.stage = 2;
        d.resolution = cfg.res2;
        d.clip_frames = cfg.frames2;
        d.image_ratio = cfg.image_ratio_end;
        d.first_frame_mask_prob = cfg.ffm_prob2;
    } else {
        d.stage = 3;
        d.resolution = cfg.res3;
        d.clip_frames = cfg.frames3;
        d.image_ratio = cfg.image_ratio_end;
        d.first_frame_mask_prob = cfg.ffm_prob3;
    }
    return d;
}

FlowBatch make_batch(const std::vector<Tensor>& latent_grids, const Tensor& text_emb, real fps,
                     real mask_prob, Rng& rng) {
    if (latent_grids.empty()) throw InputError("empty batch");
    FlowBatch b;
    b.text_emb = text_emb;
    b.fps = fps;
    for (const Tensor& g : latent_grids) {
        FlowSample s;
        s.geom = dit::latent_rows(g);
        s.clean_rows = s.geom.tokens;
        s.noise = rng.normal_tensor(s.clean_rows.shape());
        real u = rng.uniform();
        while (u <= 0.0) u = rng.uniform();
        s.t = u;
        s.mask = rng.uniform() < mask_prob ? first_frame_mask(s.geom, s.clean_rows)
                                           : no_condition(s.geom.n());
        b.samples.push_back(std::move(s));
    }
    return b;
}

FlowTrainer::FlowTrainer(ParameterSet dit_params, DitConfig cfg, real lr)
    : params_(std::move(dit_params)), cfg_(cfg), opt_(lr) {
    dit::validate(cfg_);
}

StepMetrics FlowTrainer::step(const FlowBatch& batch) {
    if (batch.samples.empty()) throw InputError("empty batch");
    Tape t;
    ParamVars pv = register_params(t, params_, true, "dit.");
    Var text = t.constant(batch.text_emb);
    Var total;
    for (size_t i = 0; i < batch.samples.size(); ++i) {
        const FlowSample& s = batch.samples[i];
        Interpolated ip = interpolate(s.clean_rows, s.noise, s.t);
        Tensor ts = Tensor::full({s.geom.n()}, s.t);
        MaskedInput mi = apply_condition_mask(ip.x_t, ts, s.mask, s.geom);
        Var v = dit::velocity_rows_graph(t, t.constant(mi.rows), s.geom, text, mi.timesteps,
                                         batch.fps, pv, cfg_);
        Var l = flow_loss_graph(t, v, ip.v_target, mi.loss_mask);
        total = (i == 0) ? l : t.add(total, l);
    }
    total = t.scale(total, 1.0 / static_cast<real>(batch.samples.size()));
    StepMetrics m;
    m.loss = t.val(total)[0];
    if (!std::isfinite(m.loss)) throw NumericError("flow loss is not finite");
    t.backward(total);
    auto grads = collect_grads(t, pv);
    m.grad_norm = grad_norm(grads);
    opt_.update(params_, grads);
    return m;
}

real grad_norm(const std::map<std::string, Tensor>& grads) {
    real s = 0.0;
    for (const auto& [name, g] : grads)
        for (int64_t i = 0; i < g.numel(); ++i) s += g[i] * g[i];
    return std::sqrt(s);
}

}  // namespace mugv::flow
