#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "mugv/flowtrain.hpp"

using namespace mugv;
using namespace mugv::flow;
using mugv::dit::DitConfig;
using mugv::dit::TokenGrid;

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

void open_gates(ParameterSet& p, uint64_t seed) {
    Rng r(seed);
    p.at("dit.mod.w") = r.normal_tensor(p.at("dit.mod.w").shape(), 0.2);
    p.at("dit.mod.b") = r.normal_tensor(p.at("dit.mod.b").shape(), 0.2);
    p.at("dit.final.w") = r.normal_tensor(p.at("dit.final.w").shape(), 0.2);
    p.at("dit.final.b") = r.normal_tensor(p.at("dit.final.b").shape(), 0.05);
}

TokenGrid grid_geom(int64_t U, int64_t h, int64_t w, int64_t C) {
    return dit::latent_rows(Tensor::zeros({U, h, w, C}));
}

}  // namespace

TEST_CASE("interpolate endpoints, midpoint, and target") {
    Rng r(5);
    Tensor x = r.uniform_tensor({3, 4}, 0.1, 1.0);
    Tensor n = r.uniform_tensor({3, 4}, 0.1, 1.0);

    Interpolated e0 = interpolate(x, n, 0.0);
    CHECK(bit_equal(e0.x_t, x));
    Interpolated e1 = interpolate(x, n, 1.0);
    CHECK(bit_equal(e1.x_t, n));
    Interpolated mid = interpolate(x, n, 0.5);
    for (int64_t i = 0; i < x.numel(); ++i) {
        CHECK(mid.x_t[i] == doctest::Approx(0.5 * (x[i] + n[i])).epsilon(1e-15));
        CHECK(mid.v_target[i] == n[i] - x[i]);
    }
    // the target does not depend on t
    CHECK(bit_equal(e0.v_target, e1.v_target));

    CHECK_THROWS_AS(interpolate(x, Tensor::zeros({3, 5}), 0.5), DimensionError);
    CHECK_THROWS_AS(interpolate(x, n, 1.5), InputError);
    CHECK_THROWS_AS(interpolate(x, n, -0.1), InputError);
}

TEST_CASE("flow_loss: hand case, empty mask, graph agreement, gradient exclusion") {
    Tensor pred({1, 3});
    pred[0] = 1.0;
    pred[1] = 2.0;
    pred[2] = 3.0;
    Tensor target({1, 3});
    target[0] = 0.0;
    target[1] = 2.0;
    target[2] = 5.0;
    CHECK(flow_loss(pred, target, {1}) == doctest::Approx(5.0 / 3.0).epsilon(1e-15));
    CHECK(flow_loss(pred, pred, {1}) == 0.0);
    CHECK(flow_loss(pred, target, {0}) == 0.0);
    CHECK_THROWS_AS(flow_loss(pred, target, {1, 1}), DimensionError);

    Rng r(15);
    Tensor p4 = r.normal_tensor({4, 3});
    Tensor t4 = r.normal_tensor({4, 3});
    std::vector<uint8_t> mask{1, 0, 1, 1};

    Tape t;
    Var pv = t.leaf(p4, true);
    Var loss = flow_loss_graph(t, pv, t4, mask);
    CHECK(t.val(loss)[0] == flow_loss(p4, t4, mask));
    t.backward(loss);
    const Tensor& g = t.grad(pv);
    for (int64_t j = 0; j < 3; ++j) {
        CHECK(g[1 * 3 + j] == 0.0);  // masked-out row gets no gradient
        CHECK(g[0 * 3 + j] != 0.0);
    }

    Tape t2;
    Var pv2 = t2.leaf(p4, true);
    Var empty = flow_loss_graph(t2, pv2, t4, {0, 0, 0, 0});
    CHECK(t2.val(empty)[0] == 0.0);
    t2.backward(empty);
    CHECK(max_abs_diff(t2.grad(pv2), Tensor::zeros({4, 3})) == 0.0);
}

TEST_CASE("apply_condition_mask") {
    TokenGrid geom = grid_geom(2, 4, 4, 1);  // units 0 and 1, 4 tokens each
    int64_t n = geom.n(), D = 4;
    Rng r(25);
    Tensor x_t = r.normal_tensor({n, D});
    Tensor ts = Tensor::full({n}, 0.6);
    Tensor clean = r.normal_tensor({n, D});

    SUBCASE("empty mask leaves everything untouched") {
        MaskedInput mi = apply_condition_mask(x_t, ts, no_condition(n), geom);
        CHECK(bit_equal(mi.rows, x_t));
        CHECK(bit_equal(mi.timesteps, ts));
        for (uint8_t f : mi.loss_mask) CHECK(f == 1);
    }

    SUBCASE("first-frame conditioning rewrites unit-0 tokens") {
        ConditionMask m = first_frame_mask(geom, clean);
        MaskedInput mi = apply_condition_mask(x_t, ts, m, geom);
        for (int64_t i = 0; i < n; ++i) {
            bool cond = (*geom.coords)[static_cast<size_t>(i)][0] == 0;
            CHECK(m.conditioned[static_cast<size_t>(i)] == (cond ? 1 : 0));
            CHECK(mi.loss_mask[static_cast<size_t>(i)] == (cond ? 0 : 1));
            CHECK(mi.timesteps[i] == (cond ? 0.0 : 0.6));
            for (int64_t j = 0; j < D; ++j)
                CHECK(mi.rows[i * D + j] == (cond ? clean[i * D + j] : x_t[i * D + j]));
        }
    }

    SUBCASE("loss mask complements arbitrary unit-aligned masks") {
        Rng mr(31);
        for (int trial = 0; trial < 20; ++trial) {
            ConditionMask m = no_condition(n);
            std::array<bool, 2> unit{mr.uniform() < 0.5, mr.uniform() < 0.5};
            for (int64_t i = 0; i < n; ++i)
                m.conditioned[static_cast<size_t>(i)] = unit[(*geom.coords)[static_cast<size_t>(i)][0]] ? 1 : 0;
            if (m.any()) m.condition_latents = clean;
            MaskedInput mi = apply_condition_mask(x_t, ts, m, geom);
            for (int64_t i = 0; i < n; ++i)
                CHECK(static_cast<int>(mi.loss_mask[static_cast<size_t>(i)]) ==
                      1 - static_cast<int>(m.conditioned[static_cast<size_t>(i)]));
        }
    }

    SUBCASE("partially conditioned units are rejected") {
        ConditionMask m = no_condition(n);
        m.conditioned[0] = 1;  // only one token of unit 0
        m.condition_latents = clean;
        CHECK_THROWS_AS(apply_condition_mask(x_t, ts, m, geom), InputError);
    }

    SUBCASE("conditioned tokens without latents are rejected") {
        ConditionMask m = first_frame_mask(geom, clean);
        m.condition_latents = Tensor();
        CHECK_THROWS_AS(apply_condition_mask(x_t, ts, m, geom), InputError);
        m.condition_latents = Tensor::zeros({n, D + 1});
        CHECK_THROWS_AS(apply_condition_mask(x_t, ts, m, geom), InputError);
    }
}

TEST_CASE("Euler sampler is exact on constant velocity fields") {
    TokenGrid geom = grid_geom(2, 4, 4, 1);
    int64_t n = geom.n(), D = 4;
    Rng cr(35);
    Tensor c = cr.normal_tensor({n, D});
    VelocityFn constant_field = [&](const Tensor&, const Tensor&) { return c; };

    // one step from seeded noise lands on x0 - c, bit for bit
    Rng expect_rng(77);
    Tensor x0 = expect_rng.normal_tensor({n, D});
    Tensor expected(x0.shape());
    for (int64_t i = 0; i < x0.numel(); ++i) expected[i] = x0[i] - 1.0 * c[i];
    Rng rng1(77);
    Tensor got1 = sample_rows(constant_field, geom, D, no_condition(n), 1, rng1);
    CHECK(bit_equal(got1, expected));

    // doubling the step count cannot move the endpoint
    Rng rng2(77), rng4(77), rng8(77);
    Tensor got2 = sample_rows(constant_field, geom, D, no_condition(n), 2, rng2);
    Tensor got4 = sample_rows(constant_field, geom, D, no_condition(n), 4, rng4);
    Tensor got8 = sample_rows(constant_field, geom, D, no_condition(n), 8, rng8);
    CHECK(max_abs_diff(got1, got2) <= 1e-12);
    CHECK(max_abs_diff(got2, got4) <= 1e-12);
    CHECK(max_abs_diff(got4, got8) <= 1e-12);

    Rng rng0(77);
    CHECK_THROWS_AS(sample_rows(constant_field, geom, D, no_condition(n), 0, rng0), InputError);
}

TEST_CASE("straight-path field lands on the data point from any noise") {
    TokenGrid geom = grid_geom(1, 4, 4, 2);
    int64_t n = geom.n(), D = 8;
    Rng dr(45);
    Tensor data = dr.normal_tensor({n, D});
    // v(x, t) = (x - data)/t: the marginal field of a point-mass data
    // distribution, constant along each trajectory
    VelocityFn field = [&](const Tensor& x, const Tensor& ts) {
        Tensor v(x.shape());
        real tc = ts[0];
        for (int64_t i = 0; i < x.numel(); ++i) v[i] = (x[i] - data[i]) / tc;
        return v;
    };
    for (int64_t steps : {1, 2, 7}) {
        Rng rng(99);
        Tensor out = sample_rows(field, geom, D, no_condition(n), steps, rng);
        CHECK(max_abs_diff(out, data) <= 1e-9);
    }
}

TEST_CASE("sampler determinism and condition re-imposition") {
    TokenGrid geom = grid_geom(2, 2, 2, 2);
    int64_t n = geom.n(), D = 8;
    Rng cr(55);
    Tensor c = cr.normal_tensor({n, D});
    VelocityFn field = [&](const Tensor&, const Tensor&) { return c; };
    Tensor clean = cr.normal_tensor({n, D});
    ConditionMask mask = first_frame_mask(geom, clean);

    Rng ra(7), rb(7), rc(8);
    Tensor a = sample_rows(field, geom, D, mask, 3, ra);
    Tensor b = sample_rows(field, geom, D, mask, 3, rb);
    Tensor d = sample_rows(field, geom, D, mask, 3, rc);
    CHECK(bit_equal(a, b));
    CHECK(max_abs_diff(a, d) > 0.0);

    for (int64_t i = 0; i < n; ++i) {
        bool cond = mask.conditioned[static_cast<size_t>(i)];
        for (int64_t j = 0; j < D; ++j) {
            if (cond)
                CHECK(a[i * D + j] == clean[i * D + j]);
            else
                CHECK(a[i * D + j] != clean[i * D + j]);
        }
    }

    // the field sees timestep 0 at conditioned tokens
    VelocityFn probe = [&](const Tensor& x, const Tensor& ts) {
        for (int64_t i = 0; i < n; ++i) {
            if (mask.conditioned[static_cast<size_t>(i)])
                CHECK(ts[i] == 0.0);
            else
                CHECK(ts[i] > 0.0);
        }
        return Tensor::zeros(x.shape());
    };
    Rng rp(9);
    sample_rows(probe, geom, D, mask, 2, rp);
}

TEST_CASE("reverse then forward returns to the start on constant velocity") {
    TokenGrid geom = grid_geom(1, 2, 2, 3);
    int64_t n = geom.n(), D = 12;
    Rng r(65);
    Tensor c = r.normal_tensor({n, D});
    VelocityFn field = [&](const Tensor&, const Tensor&) { return c; };

    Tensor x_real = r.normal_tensor({n, D});
    for (int64_t steps : {1, 3, 6}) {
        Tensor noise_hat = reverse_sample_rows(field, geom, x_real, no_condition(n), steps);
        // integrate forward again from the recovered noise
        Tensor x = noise_hat;
        real dt = 1.0 / static_cast<real>(steps);
        for (int64_t s = 0; s < steps; ++s)
            for (int64_t i = 0; i < x.numel(); ++i) x[i] -= dt * c[i];
        CHECK(max_abs_diff(x, x_real) <= 1e-12);
    }
}

TEST_CASE("curriculum schedule") {
    CurriculumConfig cfg;
    CHECK_NOTHROW(validate(cfg));

    StageDescriptor d0 = curriculum_schedule(0, cfg);
    CHECK(d0.stage == 1);
    CHECK(d0.image_ratio == cfg.image_ratio_start);
    CHECK(d0.first_frame_mask_prob == 0.0);
    CHECK(d0.clip_frames == 8);

    StageDescriptor d_last1 = curriculum_schedule(cfg.stage1_steps - 1, cfg);
    CHECK(d_last1.image_ratio == doctest::Approx(cfg.image_ratio_end).epsilon(1e-12));

    StageDescriptor d2 = curriculum_schedule(cfg.stage1_steps, cfg);
    CHECK(d2.stage == 2);
    CHECK(d2.first_frame_mask_prob > 0.0);
    CHECK(d2.image_ratio == cfg.image_ratio_end);

    StageDescriptor d3 = curriculum_schedule(cfg.stage1_steps + cfg.stage2_steps, cfg);
    CHECK(d3.stage == 3);
    CHECK(d3.resolution == std::array<int64_t, 2>{32, 32});
    CHECK(curriculum_schedule(1000000, cfg).stage == 3);

    real prev = 2.0;
    int64_t prev_frames = 0;
    std::array<int64_t, 2> prev_res{0, 0};
    for (int64_t s = 0; s < 2500; ++s) {
        StageDescriptor d = curriculum_schedule(s, cfg);
        CHECK(d.image_ratio <= prev + 1e-12);
        CHECK(d.clip_frames >= prev_frames);
        CHECK(d.resolution[0] >= prev_res[0]);
        CHECK(d.resolution[1] >= prev_res[1]);
        if (d.stage >= 2) CHECK(d.first_frame_mask_prob > 0.0);
        prev = d.image_ratio;
        prev_frames = d.clip_frames;
        prev_res = d.resolution;
    }

    CHECK_THROWS_AS(curriculum_schedule(-1, cfg), InputError);
    CurriculumConfig bad = cfg;
    bad.image_ratio_start = 0.1;  // below the end value
    CHECK_THROWS_AS(curriculum_schedule(0, bad), ConfigError);
    bad = cfg;
    bad.ffm_prob2 = 0.0;
    CHECK_THROWS_AS(curriculum_schedule(0, bad), ConfigError);
    bad = cfg;
    bad.res3 = {8, 8};
    CHECK_THROWS_AS(curriculum_schedule(0, bad), ConfigError);
    bad = cfg;
    bad.frames2 = 4;
    CHECK_THROWS_AS(curriculum_schedule(0, bad), ConfigError);
}

TEST_CASE("make_batch is deterministic and in range") {
    Rng tr(85);
    Tensor text = tr.normal_tensor({2, 6});
    std::vector<Tensor> grids{tr.uniform_tensor({1, 4, 4, 2}, -1.0, 1.0),
                              tr.uniform_tensor({2, 2, 2, 2}, -1.0, 1.0)};

    Rng r1(42), r2(42);
    FlowBatch a = make_batch(grids, text, 8.0, 0.5, r1);
    FlowBatch b = make_batch(grids, text, 8.0, 0.5, r2);
    REQUIRE(a.samples.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
        CHECK(bit_equal(a.samples[i].noise, b.samples[i].noise));
        CHECK(a.samples[i].t == b.samples[i].t);
        CHECK(a.samples[i].t > 0.0);
        CHECK(a.samples[i].t < 1.0);
        CHECK(a.samples[i].mask.conditioned == b.samples[i].mask.conditioned);
        CHECK(a.samples[i].noise.same_shape(a.samples[i].clean_rows));
    }

    Rng r3(42);
    FlowBatch all_masked = make_batch(grids, text, 8.0, 1.0, r3);
    for (const auto& s : all_masked.samples) CHECK(s.mask.any());
    Rng r4(42);
    FlowBatch none_masked = make_batch(grids, text, 8.0, 0.0, r4);
    for (const auto& s : none_masked.samples) CHECK_FALSE(s.mask.any());
    Rng r5(1);
    CHECK_THROWS_AS(make_batch({}, text, 8.0, 0.0, r5), InputError);
}

TEST_CASE("train_step determinism and abort on non-finite loss") {
    DitConfig cfg = tiny_config();
    Rng pr(95);
    ParameterSet params = init_dit_params(cfg, pr);
    Rng tr(96);
    Tensor text = tr.normal_tensor({2, cfg.text_dim});
    std::vector<Tensor> grids{tr.uniform_tensor({2, 4, 4, 2}, -1.0, 1.0)};
    Rng br(97);
    FlowBatch batch = make_batch(grids, text, 8.0, 0.5, br);

    FlowTrainer t1(params, cfg, 1e-3);
    FlowTrainer t2(params, cfg, 1e-3);
    StepMetrics m1 = t1.step(batch);
    StepMetrics m2 = t2.step(batch);
    CHECK(m1.loss == m2.loss);
    CHECK(m1.grad_norm == m2.grad_norm);
    CHECK(m1.grad_norm > 0.0);
    for (const auto& nm : t1.params().names()) CHECK(bit_equal(t1.params().at(nm), t2.params().at(nm)));

    ParameterSet poisoned = params;
    poisoned.at("dit.patch.w")[0] = std::nan("");
    FlowTrainer t3(poisoned, cfg, 1e-3);
    CHECK_THROWS_AS(t3.step(batch), NumericError);
    CHECK_THROWS_AS(t1.step(FlowBatch{}), InputError);
}

TEST_CASE("batch loss gradients match finite differences") {
    DitConfig cfg = tiny_config();
    Rng pr(105);
    ParameterSet params = init_dit_params(cfg, pr);
    open_gates(params, 19);
    Rng tr(106);
    Tensor text = tr.normal_tensor({2, cfg.text_dim});
    std::vector<Tensor> grids{tr.uniform_tensor({2, 2, 2, 2}, -1.0, 1.0),
                              tr.uniform_tensor({1, 4, 4, 2}, -1.0, 1.0)};
    Rng br(107);
    // first sample gets first-frame conditioning, second stays free
    FlowBatch batch = make_batch(grids, text, 8.0, 0.0, br);
    batch.samples[0].mask = first_frame_mask(batch.samples[0].geom, batch.samples[0].clean_rows);
    REQUIRE(batch.samples[0].mask.any());

    std::vector<std::string> names = params.names();
    std::vector<Tensor> inputs;
    for (const auto& nm : names) inputs.push_back(params.at(nm));

    auto build = [&](Tape& t, const std::vector<Var>& vs) {
        ParamVars pv;
        for (size_t i = 0; i < names.size(); ++i) pv.put(names[i], vs[i]);
        Var tx = t.constant(text);
        Var total;
        for (size_t i = 0; i < batch.samples.size(); ++i) {
            const FlowSample& s = batch.samples[i];
            Interpolated ip = interpolate(s.clean_rows, s.noise, s.t);
            Tensor ts = Tensor::full({s.geom.n()}, s.t);
            MaskedInput mi = apply_condition_mask(ip.x_t, ts, s.mask, s.geom);
            Var v = dit::velocity_rows_graph(t, t.constant(mi.rows), s.geom, tx, mi.timesteps, batch.fps, pv, cfg);
            Var l = flow_loss_graph(t, v, ip.v_target, mi.loss_mask);
            total = (i == 0) ? l : t.add(total, l);
        }
        return t.scale(total, 1.0 / static_cast<real>(batch.samples.size()));
    };
    CHECK(fdtest::fd_max_rel(build, inputs) < 1e-3);
}

TEST_CASE("a fixed batch overfits well below its initial loss") {
    DitConfig cfg = tiny_config();
    Rng pr(115);
    ParameterSet params = init_dit_params(cfg, pr);
    Rng tr(116);
    Tensor text = tr.normal_tensor({2, cfg.text_dim});
    std::vector<Tensor> grids{tr.uniform_tensor({2, 4, 4, 2}, -0.8, 0.8)};
    Rng br(117);
    FlowBatch batch = make_batch(grids, text, 8.0, 0.0, br);

    FlowTrainer trainer(params, cfg, 5e-3);
    real initial = trainer.step(batch).loss;
    real last = initial;
    for (int i = 0; i < 199; ++i) last = trainer.step(batch).loss;
    CHECK(last < 0.1 * initial);
}

TEST_CASE("model sampling end to end") {
    DitConfig cfg = tiny_config();
    Rng pr(125);
    ParameterSet params = init_dit_params(cfg, pr);
    open_gates(params, 23);
    Rng tr(126);
    Tensor text = tr.normal_tensor({1, cfg.text_dim});
    TokenGrid geom = grid_geom(2, 4, 4, cfg.c_z);

    Tensor g1 = sample(params, cfg, geom, text, no_condition(geom.n()), 4, 31);
    Tensor g2 = sample(params, cfg, geom, text, no_condition(geom.n()), 4, 31);
    Tensor g3 = sample(params, cfg, geom, text, no_condition(geom.n()), 4, 32);
    CHECK(g1.shape() == std::vector<int64_t>{2, 4, 4, 2});
    CHECK(bit_equal(g1, g2));
    CHECK(max_abs_diff(g1, g3) > 0.0);

    // conditioned units survive sampling bit for bit
    Rng cr(127);
    Tensor clean = cr.normal_tensor({geom.n(), cfg.patch_dim()});
    ConditionMask mask = first_frame_mask(geom, clean);
    Tensor cond_grid = sample(params, cfg, geom, text, mask, 3, 33);
    TokenGrid clean_grid_rows;
    clean_grid_rows.tokens = clean;
    clean_grid_rows.coords = geom.coords;
    clean_grid_rows.dims = geom.dims;
    Tensor clean_grid = dit::rows_to_grid(clean_grid_rows);
    for (int64_t j = 0; j < 4 * 4 * 2; ++j) CHECK(cond_grid[j] == clean_grid[j]);  // unit 0
}
