#pragma once

#include <array>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mugv/clip.hpp"

namespace mugv::pipe {

// One candidate clip moving through the curation stages. end is exclusive.
struct ClipRecord {
    std::string clip_id;
    std::string source_id;
    int64_t start = 0;
    int64_t end = 0;
    std::map<std::string, real> scores;
    std::vector<std::string> tags;
    std::string status = "pending";  // pending | kept | rejected
    std::vector<std::string> reasons;
};

// sharpness bounds are Laplacian variances on the 8-bit grayscale scale;
// motion bounds are mean block displacements in pixels per sampled pair.
struct FilterThresholds {
    real sharpness_low = 200.0;
    real sharpness_high = 2000.0;
    real motion_low = 1.0;
    real motion_high = 20.0;
    real aesthetic_min = 4.5;
    real mllm_min = 0.5;
};

void validate(const FilterThresholds& th);

// ---- scene splitting ----

// Calibrated against the synthetic suite; hard cuts score near the 2.0
// ceiling of the normalized histogram L1 distance.
inline constexpr real kSceneThreshold = 0.5;

// Frame indices t where the per-channel 16-bin histogram L1 distance between
// frames t-1 and t exceeds the threshold. Fewer than two frames: no cuts.
std::vector<int64_t> detect_scenes(const VideoClip& clip, real threshold = kSceneThreshold);

// ---- per-clip scores ----

// Variance of the 5-point Laplacian over interior pixels of the grayscale
// frame (C, H, W). Frames thinner than 3 px have no interior and score 0.
real sharpness_score(const Tensor& frame);

// The three evenly spaced frame pairs whose leading frames also serve as the
// sharpness sampling points: (0, .), (mid, .), (T-2, .).
std::array<int64_t, 3> sampled_frames(int64_t t_count);

// Mean displacement magnitude of exhaustive 8x8 block matching within +-4 px
// over the three sampled frame pairs. Needs T >= 6 and at least 16x16 frames.
real motion_amplitude(const VideoClip& clip);

// ---- filtering ----

using Scorer = std::function<real(const VideoClip&)>;

Scorer constant_scorer(real value);
// Aesthetic proxy: global pixel contrast mapped onto the predictor's 0-10
// scale. A stand-in with the right shape, not a learned model.
Scorer contrast_aesthetic_scorer();

struct Scorers {
    Scorer aesthetic;  // empty: gate skipped
    Scorer mllm;       // empty: gate skipped
};

// Gates in order sharpness -> aesthetic -> motion -> mllm; the first failure
// rejects with that gate's reason and later scores stay uncomputed.
ClipRecord filter_clip(ClipRecord rec, const VideoClip& clip, const FilterThresholds& th,
                       const Scorers& scorers);

// ---- dedup ----

// 8x8 mean-threshold hash of the grayscale frame, row-major from the MSB.
uint64_t phash64(const Tensor& frame);

// Hashes of the first, middle, and last frame.
std::array<uint64_t, 3> clip_signature(const VideoClip& clip);

int hamming3(const std::array<uint64_t, 3>& a, const std::array<uint64_t, 3>& b);

using FrameAccess = std::function<VideoClip(const ClipRecord&)>;

// Keeps the earliest record of every near-duplicate group: a record survives
// iff its signature is more than max_dist bits from every earlier survivor.
std::vector<ClipRecord> dedup(const std::vector<ClipRecord>& records, const FrameAccess& frames,
                              int max_dist = 12);

// ---- tag balancing ----

// Per-record sampling weight proportional to the sum over its tags of
// target(tag)/count(tag), normalized to sum 1. Target tags unseen in the
// corpus produce warnings; record tags missing from the target are errors.
std::vector<real> balance_tags(const std::vector<ClipRecord>& records,
                               const std::map<std::string, real>& target,
                               std::vector<std::string>* warnings = nullptr);

// ---- manifest ----

std::string record_json(const ClipRecord& rec);
ClipRecord record_from_json(const std::string& line);

void save_manifest(const std::string& path, const std::vector<ClipRecord>& records);
std::vector<ClipRecord> load_manifest(const std::string& path);

// ---- end-to-end ----

struct SourceClip {
    std::string source_id;
    VideoClip clip;
    std::vector<std::string> tags;
};

struct PipelineConfig {
    FilterThresholds thresholds;
    real scene_threshold = kSceneThreshold;
    int dedup_max_dist = 12;
    int64_t min_frames = 6;  // shorter scene segments are rejected outright
};

// Scene-split every source, gate each segment, then mark near-duplicate
// survivors of the kept set. Output order follows sources, then segment
// position; identical inputs give byte-identical manifests.
std::vector<ClipRecord> run_pipeline(const std::vector<SourceClip>& sources,
                                     const PipelineConfig& cfg, const Scorers& scorers);

}  // namespace mugv::pipe
