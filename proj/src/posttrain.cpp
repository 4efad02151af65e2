#include "mugv/posttrain.hpp"

#include <cmath>

#include "mugv/errors.hpp"
#include "mugv/graph.hpp"

namespace mugv::post {

namespace {

real sigmoid(real x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    real e = std::exp(x);
    return e / (1.0 + e);
}

real softplus(real x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }

void check_record(const SampleRecord& s) {
    if (s.rows.rank() != 2 || s.rows.dim(0) != s.geom.n())
        throw DimensionError("sample rows do not match the token grid");
    flow::validate_mask(s.mask, s.geom, s.rows.dim(1));
}

void check_pair(const PreferencePair& p) {
    check_record(p.winner);
    check_record(p.loser);
    if (p.winner.rows.shape() != p.loser.rows.shape() ||
        p.winner.mask.conditioned != p.loser.mask.conditioned)
        throw InputError("pair winner and loser must share conditioning");
}

}  // namespace

void validate(const PostTrainConfig& cfg) {
    if (!(cfg.beta > 0.0)) throw ConfigError("beta must be > 0");
    if (!(cfg.alpha_sft >= 0.0)) throw ConfigError("alpha_sft must be >= 0");
    if (!(cfg.gamma_merge > 0.0) || cfg.gamma_merge > 1.0)
        throw ConfigError("gamma_merge must lie in (0, 1]");
    if (!(cfg.w_d > 0.0) || !(cfg.w_u > 0.0))
        throw ConfigError("kto weights must be > 0");
    if (cfg.interleave.empty()) throw ConfigError("interleave plan must not be empty");
    for (const std::string& tag : cfg.interleave)
        if (tag != "dpo" && tag != "kto")
            throw ConfigError("unknown interleave tag: " + tag);
}

std::vector<real> merge_weights(int64_t k, real gamma) {
    if (k < 1) throw InputError("need at least one checkpoint");
    if (!(gamma > 0.0) || gamma > 1.0) throw ConfigError("gamma must lie in (0, 1]");
    std::vector<real> w(static_cast<size_t>(k));
    real total = 0.0;
    for (int64_t i = 0; i < k; ++i) {
        w[static_cast<size_t>(i)] = std::pow(gamma, static_cast<real>(k - 1 - i));
        total += w[static_cast<size_t>(i)];
    }
    for (real& x : w) x /= total;
    return w;
}

ParameterSet merge_checkpoints(const std::vector<ParameterSet>& checkpoints, real gamma) {
    if (checkpoints.empty()) throw InputError("need at least one checkpoint");
    std::vector<real> w = merge_weights(static_cast<int64_t>(checkpoints.size()), gamma);
    const ParameterSet& base = checkpoints.front();
    for (const ParameterSet& c : checkpoints) {
        if (c.names() != base.names())
            throw ConfigError("checkpoints name different tensors");
        for (const auto& [name, p] : c.entries())
            if (p.value.shape() != base.at(name).shape())
                throw ConfigError("checkpoint shape mismatch at " + name);
    }
    ParameterSet out;
    out.metadata = checkpoints.back().metadata;
    for (const auto& [name, p] : base.entries()) {
        Tensor acc = Tensor::zeros(p.value.shape());
        for (size_t i = 0; i < checkpoints.size(); ++i) {
            const Tensor& src = checkpoints[i].at(name);
            for (int64_t j = 0; j < acc.numel(); ++j) acc[j] += w[i] * src[j];
        }
        out.set(name, std::move(acc));
    }
    return out;
}

real anneal_lr(int64_t step, const AnnealConfig& cfg) {
    if (cfg.steps < 2) throw ConfigError("anneal horizon needs at least two steps");
    if (!(cfg.lr_start > 0.0) || !(cfg.lr_end >= 0.0) || cfg.lr_end > cfg.lr_start)
        throw ConfigError("anneal must decay from lr_start to lr_end");
    if (step < 0) throw InputError("anneal step must be >= 0");
    if (step >= cfg.steps - 1) return cfg.lr_end;
    if (step == 0) return cfg.lr_start;
    real frac = static_cast<real>(step) / static_cast<real>(cfg.steps - 1);
    return cfg.lr_end + (cfg.lr_start - cfg.lr_end) * 0.5 * (1.0 + std::cos(M_PI * frac));
}

SharedDraw make_draw(const SampleRecord& s, Rng& rng) {
    SharedDraw d;
    real u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    d.t = u;
    d.noise = rng.normal_tensor(s.rows.shape());
    return d;
}

std::vector<SharedDraw> make_pair_draws(const std::vector<PreferencePair>& pairs, Rng& rng) {
    std::vector<SharedDraw> draws;
    draws.reserve(pairs.size());
    for (const PreferencePair& p : pairs) {
        check_pair(p);
        draws.push_back(make_draw(p.winner, rng));
    }
    return draws;
}

std::vector<SharedDraw> make_label_draws(const std::vector<LabeledSample>& labels, Rng& rng) {
    std::vector<SharedDraw> draws;
    draws.reserve(labels.size());
    for (const LabeledSample& l : labels) {
        check_record(l.sample);
        draws.push_back(make_draw(l.sample, rng));
    }
    return draws;
}

Var flow_error_graph(Tape& t, ParamVars& pv, const DitConfig& cfg, const SampleRecord& s,
                     const SharedDraw& d) {
    check_record(s);
    flow::Interpolated ip = flow::interpolate(s.rows, d.noise, d.t);
    Tensor ts = Tensor::full({s.geom.n()}, d.t);
    flow::MaskedInput mi = flow::apply_condition_mask(ip.x_t, ts, s.mask, s.geom);
    Var v = dit::velocity_rows_graph(t, t.constant(mi.rows), s.geom, t.constant(s.text),
                                     mi.timesteps, s.fps, pv, cfg);
    return flow::flow_loss_graph(t, v, ip.v_target, mi.loss_mask);
}

real flow_error(const ParameterSet& params, const DitConfig& cfg, const SampleRecord& s,
                const SharedDraw& d) {
    Tape t;
    ParamVars pv = register_params(t, params, false, "dit.");
    return t.val(flow_error_graph(t, pv, cfg, s, d))[0];
}

real dpo_from_errors(real e_th_w, real e_th_l, real e_ref_w, real e_ref_l, real beta) {
    real margin = beta * ((e_ref_w - e_th_w) - (e_ref_l - e_th_l));
    return softplus(-margin);
}

Var dpo_loss_graph(Tape& t, ParamVars& pv, const ParameterSet& ref, const DitConfig& cfg,
                   const std::vector<PreferencePair>& pairs, real beta,
                   const std::vector<SharedDraw>& draws) {
    if (pairs.empty()) throw InputError("empty batch");
    if (draws.size() != pairs.size()) throw InputError("one shared draw per pair required");
    Var total;
    for (size_t i = 0; i < pairs.size(); ++i) {
        const PreferencePair& p = pairs[i];
        check_pair(p);
        Var e_th_w = flow_error_graph(t, pv, cfg, p.winner, draws[i]);
        Var e_th_l = flow_error_graph(t, pv, cfg, p.loser, draws[i]);
        real e_ref_w = flow_error(ref, cfg, p.winner, draws[i]);
        real e_ref_l = flow_error(ref, cfg, p.loser, draws[i]);
        Var margin = t.scale(t.add_scalar(t.sub(e_th_l, e_th_w), e_ref_w - e_ref_l), beta);
        Var li = t.softplus(t.scale(margin, -1.0));
        total = (i == 0) ? li : t.add(total, li);
    }
    return t.scale(total, 1.0 / static_cast<real>(pairs.size()));
}

real dpo_loss(const ParameterSet& model, const ParameterSet& ref, const DitConfig& cfg,
              const std::vector<PreferencePair>& pairs, real beta, Rng& rng) {
    if (pairs.empty()) throw InputError("empty batch");
    std::vector<SharedDraw> draws = make_pair_draws(pairs, rng);
    Tape t;
    ParamVars pv = register_params(t, model, false, "dit.");
    return t.val(dpo_loss_graph(t, pv, ref, cfg, pairs, beta, draws))[0];
}

real kto_from_rewards(const std::vector<real>& rewards, const std::vector<uint8_t>& desirable,
                      real w_d, real w_u, const real* z0_override) {
    if (rewards.empty()) throw InputError("empty batch");
    if (rewards.size() != desirable.size())
        throw InputError("one desirability flag per reward required");
    real z0 = 0.0;
    if (z0_override) {
        z0 = *z0_override;
    } else {
        for (real r : rewards) z0 += r;
        z0 /= static_cast<real>(rewards.size());
    }
    real total = 0.0;
    for (size_t i = 0; i < rewards.size(); ++i) {
        real r = rewards[i];
        total += desirable[i] ? w_d * (1.0 - sigmoid(r - z0)) : w_u * (1.0 - sigmoid(z0 - r));
    }
    return total / static_cast<real>(rewards.size());
}

Var kto_loss_graph(Tape& t, ParamVars& pv, const ParameterSet& ref, const DitConfig& cfg,
                   const std::vector<LabeledSample>& labels, const PostTrainConfig& pcfg,
                   const std::vector<SharedDraw>& draws, const real* z0_override) {
    if (labels.empty()) throw InputError("empty batch");
    if (draws.size() != labels.size()) throw InputError("one shared draw per sample required");
    std::vector<Var> rewards;
    rewards.reserve(labels.size());
    real z0 = 0.0;
    for (size_t i = 0; i < labels.size(); ++i) {
        Var e_th = flow_error_graph(t, pv, cfg, labels[i].sample, draws[i]);
        real e_ref = flow_error(ref, cfg, labels[i].sample, draws[i]);
        Var r = t.scale(t.add_scalar(t.scale(e_th, -1.0), e_ref), pcfg.beta);
        z0 += t.val(r)[0];
        rewards.push_back(r);
    }
    z0 /= static_cast<real>(labels.size());  // detached baseline
    if (z0_override) z0 = *z0_override;
    Var total;
    for (size_t i = 0; i < labels.size(); ++i) {
        Var centered = t.add_scalar(rewards[i], -z0);
        // 1 - sigmoid(x) written as sigmoid(-x)
        Var term = labels[i].desirable
                       ? t.scale(t.sigmoid_(t.scale(centered, -1.0)), pcfg.w_d)
                       : t.scale(t.sigmoid_(centered), pcfg.w_u);
        total = (i == 0) ? term : t.add(total, term);
    }
    return t.scale(total, 1.0 / static_cast<real>(labels.size()));
}

real kto_loss(const ParameterSet& model, const ParameterSet& ref, const DitConfig& cfg,
              const std::vector<LabeledSample>& labels, const PostTrainConfig& pcfg, Rng& rng) {
    if (labels.empty()) throw InputError("empty batch");
    std::vector<SharedDraw> draws = make_label_draws(labels, rng);
    Tape t;
    ParamVars pv = register_params(t, model, false, "dit.");
    return t.val(kto_loss_graph(t, pv, ref, cfg, labels, pcfg, draws))[0];
}

std::vector<PreferencePair> rdpo_pairs(const std::vector<SampleRecord>& real_samples,
                                       const ParameterSet& params, const DitConfig& cfg,
                                       int64_t steps, uint64_t seed) {
    Rng rng(seed);
    std::vector<PreferencePair> pairs;
    pairs.reserve(real_samples.size());
    for (const SampleRecord& s : real_samples) {
        check_record(s);
        flow::VelocityFn vel = flow::model_velocity(params, cfg, s.geom, s.text, s.fps);
        Tensor noise_hat = flow::reverse_sample_rows(vel, s.geom, s.rows, s.mask, steps);
        Tensor winner_rows = flow::forward_sample_rows(vel, s.geom, noise_hat, s.mask, steps);
        Tensor fresh = rng.normal_tensor(s.rows.shape());
        Tensor loser_rows = flow::forward_sample_rows(vel, s.geom, fresh, s.mask, steps);
        PreferencePair p;
        p.winner = SampleRecord{s.geom, std::move(winner_rows), s.mask, s.text, s.fps};
        p.loser = SampleRecord{s.geom, std::move(loser_rows), s.mask, s.text, s.fps};
        p.source = "rdpo";
        pairs.push_back(std::move(p));
    }
    return pairs;
}

PostTrainState::PostTrainState(ParameterSet start, DitConfig c, real lr, uint64_t seed)
    : params(std::move(start)), ref(params), cfg(c), opt(lr), rng(seed) {
    dit::validate(cfg);
}

Var post_loss_graph(Tape& t, ParamVars& pv, const ParameterSet& ref, const DitConfig& cfg,
                    const PrefBatch& batch, const std::vector<SharedDraw>& draws,
                    const flow::FlowBatch& sft, const PostTrainConfig& pcfg, Var* pref_out,
                    Var* sft_out) {
    validate(pcfg);
    Var pref;
    if (batch.tag == "dpo") {
        pref = dpo_loss_graph(t, pv, ref, cfg, batch.pairs, pcfg.beta, draws);
    } else if (batch.tag == "kto") {
        pref = kto_loss_graph(t, pv, ref, cfg, batch.labels, pcfg, draws);
    } else {
        throw ConfigError("unknown batch tag: " + batch.tag);
    }
    if (sft.samples.empty()) throw InputError("empty batch");
    Var text = t.constant(sft.text_emb);
    Var sft_total;
    for (size_t i = 0; i < sft.samples.size(); ++i) {
        const flow::FlowSample& s = sft.samples[i];
        flow::Interpolated ip = flow::interpolate(s.clean_rows, s.noise, s.t);
        Tensor ts = Tensor::full({s.geom.n()}, s.t);
        flow::MaskedInput mi = flow::apply_condition_mask(ip.x_t, ts, s.mask, s.geom);
        Var v = dit::velocity_rows_graph(t, t.constant(mi.rows), s.geom, text, mi.timesteps,
                                         sft.fps, pv, cfg);
        Var l = flow::flow_loss_graph(t, v, ip.v_target, mi.loss_mask);
        sft_total = (i == 0) ? l : t.add(sft_total, l);
    }
    sft_total = t.scale(sft_total, 1.0 / static_cast<real>(sft.samples.size()));
    if (pref_out) *pref_out = pref;
    if (sft_out) *sft_out = sft_total;
    return t.add(pref, t.scale(sft_total, pcfg.alpha_sft));
}

PostMetrics post_train_step(PostTrainState& state, const PrefBatch& batch,
                            const flow::FlowBatch& sft, const PostTrainConfig& config) {
    validate(config);
    const std::string& expected =
        config.interleave[state.plan_pos % config.interleave.size()];
    if (batch.tag != expected)
        throw SchedulingError("batch tag '" + batch.tag + "' arrived at a plan position expecting '" +
                              expected + "'");
    std::vector<SharedDraw> draws = batch.tag == "dpo" ? make_pair_draws(batch.pairs, state.rng)
                                                       : make_label_draws(batch.labels, state.rng);
    Tape t;
    ParamVars pv = register_params(t, state.params, true, "dit.");
    Var pref, sftv;
    Var total = post_loss_graph(t, pv, state.ref, state.cfg, batch, draws, sft, config, &pref, &sftv);
    PostMetrics m;
    m.total = t.val(total)[0];
    m.preference = t.val(pref)[0];
    m.sft = t.val(sftv)[0];
    if (!std::isfinite(m.total)) throw NumericError("post-training loss is not finite");
    t.backward(total);
    auto grads = collect_grads(t, pv);
    m.grad_norm = flow::grad_norm(grads);
    state.opt.update(state.params, grads);
    ++state.plan_pos;
    return m;
}

}  // namespace mugv::post
