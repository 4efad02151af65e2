#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "mugv/datapipe.hpp"
#include "mugv/errors.hpp"
#include "mugv/rng.hpp"

using namespace mugv;
using namespace mugv::pipe;

namespace {

VideoClip constant_clip(int64_t T, int64_t H, int64_t W, real value) {
    VideoClip c;
    c.frames = Tensor::full({T, 1, H, W}, value);
    return c;
}

// Every frame is a window into one wide noise texture, shifted `step` px per
// frame, so all motion is a pure horizontal translation.
VideoClip pan_clip(int64_t T, int64_t H, int64_t W, real amp, uint64_t seed, int64_t step = 2) {
    Rng r(seed);
    Tensor wide = r.uniform_tensor({H, W + step * (T - 1)}, -amp, amp);
    VideoClip c;
    c.frames = Tensor({T, 1, H, W});
    int64_t WW = W + step * (T - 1);
    for (int64_t t = 0; t < T; ++t)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                c.frames[(t * H + y) * W + x] = wide[y * WW + x + step * t];
    return c;
}

VideoClip noise_clip(int64_t T, int64_t H, int64_t W, real amp, uint64_t seed) {
    Rng r(seed);
    VideoClip c;
    c.frames = r.uniform_tensor({T, 1, H, W}, -amp, amp);
    return c;
}

Tensor checkerboard(int64_t H, int64_t W) {
    Tensor f({1, H, W});
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) f[y * W + x] = ((x + y) % 2 == 0) ? 1.0 : -1.0;
    return f;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("detect_scenes finds hard cuts at their exact frame") {
    for (int64_t cut : {40, 43}) {
        VideoClip clip;
        clip.frames = Tensor({80, 1, 8, 8});
        for (int64_t t = 0; t < 80; ++t)
            for (int64_t i = 0; i < 64; ++i) clip.frames[t * 64 + i] = t < cut ? -1.0 : 1.0;
        std::vector<int64_t> cuts = detect_scenes(clip, kSceneThreshold);
        REQUIRE(cuts.size() == 1);
        CHECK(cuts[0] == cut);  // shifting the cut shifts the detection
    }

    CHECK(detect_scenes(constant_clip(50, 8, 8, 0.3)).empty());
    CHECK(detect_scenes(noise_clip(20, 16, 16, 0.5, 7),
                        std::numeric_limits<real>::infinity())
              .empty());
    CHECK(detect_scenes(constant_clip(1, 8, 8, 0.0)).empty());

    // smooth panning is not a cut
    CHECK(detect_scenes(pan_clip(20, 32, 32, 0.9, 11)).empty());
}

TEST_CASE("sharpness closed forms: constant and checkerboard") {
    CHECK(sharpness_score(Tensor::full({1, 8, 8}, 0.7)) == 0.0);
    CHECK(sharpness_score(Tensor::full({3, 16, 16}, -0.2)) == 0.0);
    // interior 5-point response alternates +-8, so the variance is exactly 64
    CHECK(sharpness_score(checkerboard(8, 8)) == 64.0);
    CHECK(sharpness_score(checkerboard(16, 32)) == 64.0);
    // too thin for an interior
    CHECK(sharpness_score(Tensor::full({1, 2, 8}, 0.7)) == 0.0);

    // channel-replicated frames score like their grayscale
    Tensor mono = checkerboard(8, 8);
    Tensor rgb({3, 8, 8});
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < 64; ++i) rgb[c * 64 + i] = mono[i];
    CHECK(sharpness_score(rgb) == 64.0);
}

TEST_CASE("motion amplitude: static zero, uniform pan measures its speed") {
    CHECK(motion_amplitude(constant_clip(6, 16, 16, 0.2)) == 0.0);
    // repeated identical noise frames are static too
    VideoClip frozen = pan_clip(6, 32, 32, 0.5, 21, 0);
    CHECK(motion_amplitude(frozen) == 0.0);

    real two = motion_amplitude(pan_clip(6, 32, 32, 0.5, 23, 2));
    CHECK(two == doctest::Approx(2.0).epsilon(0.05));
    real three = motion_amplitude(pan_clip(8, 32, 48, 0.5, 25, 3));
    CHECK(three == doctest::Approx(3.0).epsilon(0.05));

    CHECK_THROWS_AS(motion_amplitude(constant_clip(5, 16, 16, 0.0)), InputError);
    CHECK_THROWS_AS(motion_amplitude(constant_clip(6, 8, 8, 0.0)), InputError);
}

TEST_CASE("filter gates fire in order with the documented reasons") {
    FilterThresholds th;
    Scorers none;
    ClipRecord base;
    base.clip_id = "c";
    base.source_id = "s";
    base.start = 0;
    base.end = 6;

    // moderate noise sits inside the 8-bit variance window [200, 2000]
    VideoClip good = pan_clip(6, 32, 32, 0.1, 31);
    ClipRecord kept = filter_clip(base, good, th, none);
    CHECK(kept.status == "kept");
    CHECK(kept.reasons.empty());
    CHECK(kept.scores.at("sharpness") > th.sharpness_low);
    CHECK(kept.scores.at("sharpness") < th.sharpness_high);
    CHECK(kept.scores.at("motion") == doctest::Approx(2.0).epsilon(0.05));

    // constant: variance 0 rejects before motion is ever computed
    ClipRecord flat = filter_clip(base, constant_clip(6, 32, 32, 0.4), th, none);
    CHECK(flat.status == "rejected");
    CHECK(flat.reasons == std::vector<std::string>{"sharpness"});
    CHECK(flat.scores.count("motion") == 0);

    // full-range checkerboard: far above the window
    VideoClip harsh;
    harsh.frames = Tensor({6, 1, 32, 32});
    Tensor cb = checkerboard(32, 32);
    for (int64_t t = 0; t < 6; ++t)
        for (int64_t i = 0; i < 32 * 32; ++i) harsh.frames[t * 32 * 32 + i] = cb[i];
    ClipRecord sharp_high = filter_clip(base, harsh, th, none);
    CHECK(sharp_high.status == "rejected");
    CHECK(sharp_high.reasons == std::vector<std::string>{"sharpness"});
    CHECK(sharp_high.scores.at("sharpness") > th.sharpness_high);

    // aesthetic 4.4 < 4.5 rejects before motion; 4.5 itself passes
    Scorers low_ae;
    low_ae.aesthetic = constant_scorer(4.4);
    ClipRecord ugly = filter_clip(base, good, th, low_ae);
    CHECK(ugly.status == "rejected");
    CHECK(ugly.reasons == std::vector<std::string>{"aesthetic"});
    CHECK(ugly.scores.count("motion") == 0);
    Scorers edge_ae;
    edge_ae.aesthetic = constant_scorer(4.5);
    CHECK(filter_clip(base, good, th, edge_ae).status == "kept");

    // frozen pan: motion 0 < 1 is "static"
    ClipRecord still = filter_clip(base, pan_clip(6, 32, 32, 0.1, 33, 0), th, none);
    CHECK(still.status == "rejected");
    CHECK(still.reasons == std::vector<std::string>{"static"});

    // the matcher tops out under 20, so the dynamic gate needs a lower bar
    FilterThresholds tight = th;
    tight.motion_high = 1.5;
    ClipRecord fast = filter_clip(base, good, tight, none);
    CHECK(fast.status == "rejected");
    CHECK(fast.reasons == std::vector<std::string>{"dynamic"});

    // mllm verdict comes last
    Scorers veto;
    veto.mllm = constant_scorer(0.0);
    ClipRecord vetoed = filter_clip(base, good, th, veto);
    CHECK(vetoed.status == "rejected");
    CHECK(vetoed.reasons == std::vector<std::string>{"mllm"});
    CHECK(vetoed.scores.count("motion") == 1);

    // all four gates pass together
    Scorers full;
    full.aesthetic = constant_scorer(9.0);
    full.mllm = constant_scorer(1.0);
    ClipRecord all = filter_clip(base, good, th, full);
    CHECK(all.status == "kept");
    CHECK(all.scores.size() == 4);

    FilterThresholds bad = th;
    bad.sharpness_low = bad.sharpness_high;
    CHECK_THROWS_AS(filter_clip(base, good, bad, none), ConfigError);
}

TEST_CASE("contrast aesthetic stub tracks global contrast") {
    CHECK(contrast_aesthetic_scorer()(constant_clip(6, 16, 16, 0.5)) == 0.0);
    real flat_noise = contrast_aesthetic_scorer()(noise_clip(6, 16, 16, 1.0, 41));
    CHECK(flat_noise == doctest::Approx(5.77).epsilon(0.05));
}

TEST_CASE("perceptual hash: split frame pattern and noise robustness") {
    Tensor split({1, 16, 16});
    for (int64_t y = 0; y < 16; ++y)
        for (int64_t x = 0; x < 16; ++x) split[y * 16 + x] = x < 8 ? -1.0 : 1.0;
    CHECK(phash64(split) == 0x0F0F0F0F0F0F0F0Full);

    CHECK_THROWS_AS(phash64(Tensor::full({1, 4, 4}, 0.0)), InputError);

    VideoClip a = noise_clip(10, 32, 32, 0.9, 51);
    VideoClip b = a;
    Rng nr(52);
    for (int64_t i = 0; i < b.frames.numel(); ++i) {
        b.frames[i] += 0.02 * nr.normal();
        b.frames[i] = std::clamp(b.frames[i], -1.0, 1.0);
    }
    CHECK(hamming3(clip_signature(a), clip_signature(b)) <= 12);
    VideoClip c = noise_clip(10, 32, 32, 0.9, 53);
    CHECK(hamming3(clip_signature(a), clip_signature(c)) > 12);
}

TEST_CASE("dedup keeps earliest records and is idempotent") {
    std::vector<VideoClip> clips;
    std::vector<ClipRecord> records;
    auto add = [&](const VideoClip& c, const std::string& id) {
        clips.push_back(c);
        ClipRecord r;
        r.clip_id = id;
        r.source_id = id;
        r.start = 0;
        r.end = c.t();
        records.push_back(r);
    };
    VideoClip base_clip = noise_clip(10, 32, 32, 0.9, 61);
    VideoClip noisy = base_clip;
    Rng nr(62);
    for (int64_t i = 0; i < noisy.frames.numel(); ++i)
        noisy.frames[i] = std::clamp(noisy.frames[i] + 0.02 * nr.normal(), -1.0, 1.0);
    add(base_clip, "orig");
    add(noise_clip(10, 32, 32, 0.9, 63), "other");
    add(base_clip, "exact_copy");
    add(noisy, "noisy_copy");

    FrameAccess frames = [&](const ClipRecord& rec) {
        for (size_t i = 0; i < records.size(); ++i)
            if (records[i].clip_id == rec.clip_id) return clips[i];
        throw PipelineError("unknown record " + rec.clip_id);
    };
    std::vector<ClipRecord> out = dedup(records, frames);
    REQUIRE(out.size() == 2);
    CHECK(out[0].clip_id == "orig");
    CHECK(out[1].clip_id == "other");

    std::vector<ClipRecord> again = dedup(out, frames);
    REQUIRE(again.size() == out.size());
    for (size_t i = 0; i < out.size(); ++i) CHECK(again[i].clip_id == out[i].clip_id);
}

TEST_CASE("a hundred independent clips all survive dedup") {
    std::vector<VideoClip> clips;
    std::vector<ClipRecord> records;
    for (int i = 0; i < 100; ++i) {
        clips.push_back(noise_clip(6, 16, 16, 0.9, 700 + static_cast<uint64_t>(i)));
        ClipRecord r;
        r.clip_id = "n" + std::to_string(i);
        r.start = 0;
        r.end = 6;
        records.push_back(r);
    }
    FrameAccess frames = [&](const ClipRecord& rec) {
        return clips[static_cast<size_t>(std::stoi(rec.clip_id.substr(1)))];
    };
    CHECK(dedup(records, frames).size() == 100);
}

TEST_CASE("tag balancing matches the closed-form expectation") {
    std::vector<ClipRecord> records;
    for (int i = 0; i < 90; ++i) {
        ClipRecord r;
        r.clip_id = "a" + std::to_string(i);
        r.tags = {"walking"};
        r.start = 0;
        r.end = 1;
        records.push_back(r);
    }
    for (int i = 0; i < 10; ++i) {
        ClipRecord r;
        r.clip_id = "b" + std::to_string(i);
        r.tags = {"surfing"};
        r.start = 0;
        r.end = 1;
        records.push_back(r);
    }
    std::map<std::string, real> target{{"walking", 0.5}, {"surfing", 0.5}};
    std::vector<real> w = balance_tags(records, target);
    real sum = 0.0, walking = 0.0, surfing = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
        CHECK(w[i] >= 0.0);
        sum += w[i];
        (i < 90 ? walking : surfing) += w[i];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    // expected draws per tag match the uniform target
    CHECK(walking == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(surfing == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(w[0] == doctest::Approx(w[95] / 9.0).epsilon(1e-9));

    // single-tag corpus: uniform weights, frequency matches exactly
    std::vector<ClipRecord> mono(records.begin(), records.begin() + 90);
    std::vector<real> uw = balance_tags(mono, {{"walking", 1.0}});
    for (real x : uw) CHECK(x == doctest::Approx(1.0 / 90.0).epsilon(1e-12));

    std::vector<std::string> warnings;
    balance_tags(mono, {{"walking", 0.5}, {"skiing", 0.5}}, &warnings);
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("skiing") != std::string::npos);

    CHECK_THROWS_AS(balance_tags(records, {}), InputError);
    CHECK_THROWS_AS(balance_tags(records, {{"walking", 1.0}}), InputError);  // surfing missing
    ClipRecord untagged;
    untagged.clip_id = "u";
    untagged.start = 0;
    untagged.end = 1;
    CHECK_THROWS_AS(balance_tags({untagged}, target), InputError);
    CHECK_THROWS_AS(balance_tags({}, target), InputError);
}

TEST_CASE("manifest lines round-trip and reject malformed input") {
    ClipRecord rec;
    rec.clip_id = "clip_3";
    rec.source_id = "src";
    rec.start = 12;
    rec.end = 60;
    rec.scores = {{"sharpness", 512.25}, {"motion", 2.0}};
    rec.tags = {"walking", "outdoor"};
    rec.status = "rejected";
    rec.reasons = {"dynamic"};

    std::string line = record_json(rec);
    CHECK(line == record_json(rec));  // serialization is stable
    ClipRecord back = record_from_json(line);
    CHECK(back.clip_id == rec.clip_id);
    CHECK(back.source_id == rec.source_id);
    CHECK(back.start == rec.start);
    CHECK(back.end == rec.end);
    CHECK(back.scores == rec.scores);
    CHECK(back.tags == rec.tags);
    CHECK(back.status == rec.status);
    CHECK(back.reasons == rec.reasons);

    CHECK_THROWS_AS(record_from_json("{not json"), PipelineError);
    CHECK_THROWS_AS(record_from_json("{}"), PipelineError);
    ClipRecord empty_range = rec;
    empty_range.end = rec.start;
    CHECK_THROWS_AS(record_from_json(record_json(empty_range)), PipelineError);

    std::string path = "/tmp/mugv_manifest_test.jsonl";
    save_manifest(path, {rec, rec});
    std::vector<ClipRecord> loaded = load_manifest(path);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[1].clip_id == "clip_3");
    std::remove(path.c_str());
    CHECK_THROWS_AS(load_manifest(path), PipelineError);
}

TEST_CASE("pipeline splits, gates, dedups, and is byte-deterministic") {
    // source A: pannable texture, then a hard cut to a flat scene
    VideoClip texture = pan_clip(10, 32, 32, 0.1, 71);
    VideoClip srcA;
    srcA.frames = Tensor({16, 1, 32, 32});
    for (int64_t i = 0; i < 10 * 32 * 32; ++i) srcA.frames[i] = texture.frames[i];
    for (int64_t i = 10 * 32 * 32; i < 16 * 32 * 32; ++i) srcA.frames[i] = 0.8;

    // source B repeats the textured scene, so its segment is a duplicate
    VideoClip srcB = texture;

    // source C: a scene too short to score
    VideoClip srcC;
    srcC.frames = Tensor({9, 1, 32, 32});
    for (int64_t i = 0; i < 6 * 32 * 32; ++i) srcC.frames[i] = -0.5;
    for (int64_t i = 6 * 32 * 32; i < 9 * 32 * 32; ++i) srcC.frames[i] = 0.9;

    std::vector<SourceClip> sources{{"A", srcA, {"outdoor"}}, {"B", srcB, {"outdoor"}},
                                    {"C", srcC, {"indoor"}}};
    PipelineConfig cfg;
    Scorers none;
    std::vector<ClipRecord> records = run_pipeline(sources, cfg, none);

    REQUIRE(records.size() == 5);
    CHECK(records[0].clip_id == "A_0");
    CHECK(records[0].start == 0);
    CHECK(records[0].end == 10);
    CHECK(records[0].status == "kept");
    CHECK(records[1].clip_id == "A_1");
    CHECK(records[1].status == "rejected");
    CHECK(records[1].reasons == std::vector<std::string>{"sharpness"});
    CHECK(records[2].clip_id == "B_0");
    CHECK(records[2].status == "rejected");
    CHECK(records[2].reasons == std::vector<std::string>{"duplicate"});
    CHECK(records[3].clip_id == "C_0");
    CHECK(records[3].reasons == std::vector<std::string>{"sharpness"});
    CHECK(records[4].clip_id == "C_1");
    CHECK(records[4].reasons == std::vector<std::string>{"short"});
    CHECK(records[4].start == 6);
    CHECK(records[4].end == 9);
    for (const ClipRecord& r : records)
        if (r.status == "rejected") CHECK(r.reasons.size() >= 1);

    std::string p1 = "/tmp/mugv_pipe_run1.jsonl", p2 = "/tmp/mugv_pipe_run2.jsonl";
    save_manifest(p1, records);
    save_manifest(p2, run_pipeline(sources, cfg, none));
    CHECK(slurp(p1) == slurp(p2));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}
