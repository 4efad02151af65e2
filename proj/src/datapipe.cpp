#include "mugv/datapipe.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "mugv/errors.hpp"

namespace mugv::pipe {

using nlohmann::json;

namespace {

// (C, H, W) frame collapsed to (H, W) by channel mean.
Tensor gray(const Tensor& frame) {
    if (frame.rank() != 3) throw DimensionError("frame must be (C, H, W), got " + frame.shape_str());
    int64_t C = frame.dim(0), H = frame.dim(1), W = frame.dim(2);
    Tensor g({H, W});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < H * W; ++i) g[i] += frame[c * H * W + i];
    for (int64_t i = 0; i < H * W; ++i) g[i] /= static_cast<real>(C);
    return g;
}

Tensor frame_at(const VideoClip& clip, int64_t t) {
    int64_t C = clip.c(), H = clip.h(), W = clip.w();
    Tensor f({C, H, W});
    const Tensor& fr = clip.frames;
    int64_t base = t * C * H * W;
    for (int64_t i = 0; i < C * H * W; ++i) f[i] = fr[base + i];
    return f;
}

// Per-channel 16-bin histogram over [-1, 1], normalized by total pixel count
// so the L1 distance between two frames never exceeds 2.
std::vector<real> frame_histogram(const VideoClip& clip, int64_t t) {
    int64_t C = clip.c(), H = clip.h(), W = clip.w();
    std::vector<real> h(static_cast<size_t>(C) * 16, 0.0);
    const Tensor& fr = clip.frames;
    int64_t base = t * C * H * W;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t i = 0; i < H * W; ++i) {
            real v = fr[base + c * H * W + i];
            int64_t bin = static_cast<int64_t>((v + 1.0) * 8.0);
            bin = std::clamp<int64_t>(bin, 0, 15);
            h[static_cast<size_t>(c * 16 + bin)] += 1.0;
        }
    }
    real total = static_cast<real>(C * H * W);
    for (real& x : h) x /= total;
    return h;
}

}  // namespace

void validate(const FilterThresholds& th) {
    if (!(th.sharpness_low < th.sharpness_high))
        throw ConfigError("sharpness thresholds must satisfy low < high");
    if (!(th.motion_low < th.motion_high))
        throw ConfigError("motion thresholds must satisfy low < high");
}

std::vector<int64_t> detect_scenes(const VideoClip& clip, real threshold) {
    validate_clip(clip);
    std::vector<int64_t> cuts;
    if (clip.t() < 2) return cuts;
    std::vector<real> prev = frame_histogram(clip, 0);
    for (int64_t t = 1; t < clip.t(); ++t) {
        std::vector<real> cur = frame_histogram(clip, t);
        real d = 0.0;
        for (size_t i = 0; i < cur.size(); ++i) d += std::fabs(cur[i] - prev[i]);
        if (d > threshold) cuts.push_back(t);
        prev = std::move(cur);
    }
    return cuts;
}

real sharpness_score(const Tensor& frame) {
    Tensor g = gray(frame);
    int64_t H = g.dim(0), W = g.dim(1);
    if (H < 3 || W < 3) return 0.0;
    real sum = 0.0, sumsq = 0.0;
    int64_t n = (H - 2) * (W - 2);
    for (int64_t y = 1; y + 1 < H; ++y) {
        for (int64_t x = 1; x + 1 < W; ++x) {
            real l = 4.0 * g[y * W + x] - g[(y - 1) * W + x] - g[(y + 1) * W + x] -
                     g[y * W + x - 1] - g[y * W + x + 1];
            sum += l;
            sumsq += l * l;
        }
    }
    real mean = sum / static_cast<real>(n);
    return sumsq / static_cast<real>(n) - mean * mean;
}

std::array<int64_t, 3> sampled_frames(int64_t t_count) {
    if (t_count < 6) throw InputError("need at least 6 frames, got " + std::to_string(t_count));
    return {0, (t_count - 2) / 2, t_count - 2};
}

real motion_amplitude(const VideoClip& clip) {
    validate_clip(clip);
    std::array<int64_t, 3> starts = sampled_frames(clip.t());
    int64_t H = clip.h(), W = clip.w();
    // block origins leave the full +-4 search window inside the frame
    if (H < 16 || W < 16) throw InputError("frames too small for block matching");
    real total = 0.0;
    int64_t blocks = 0;
    for (int64_t s : starts) {
        Tensor a = gray(frame_at(clip, s));
        Tensor b = gray(frame_at(clip, s + 1));
        for (int64_t by = 4; by + 12 <= H; by += 8) {
            for (int64_t bx = 4; bx + 12 <= W; bx += 8) {
                real best_sad = 0.0;
                int64_t best_dy = 0, best_dx = 0;
                bool first = true;
                for (int64_t dy = -4; dy <= 4; ++dy) {
                    for (int64_t dx = -4; dx <= 4; ++dx) {
                        real sad = 0.0;
                        for (int64_t y = 0; y < 8; ++y)
                            for (int64_t x = 0; x < 8; ++x)
                                sad += std::fabs(a[(by + y) * W + bx + x] -
                                                 b[(by + dy + y) * W + bx + dx + x]);
                        int64_t r2 = dy * dy + dx * dx;
                        int64_t b2 = best_dy * best_dy + best_dx * best_dx;
                        bool better = first || sad < best_sad ||
                                      (sad == best_sad &&
                                       (r2 < b2 || (r2 == b2 && (dy < best_dy ||
                                                                 (dy == best_dy && dx < best_dx)))));
                        if (better) {
                            best_sad = sad;
                            best_dy = dy;
                            best_dx = dx;
                            first = false;
                        }
                    }
                }
                total += std::sqrt(static_cast<real>(best_dy * best_dy + best_dx * best_dx));
                ++blocks;
            }
        }
    }
    return total / static_cast<real>(blocks);
}

Scorer constant_scorer(real value) {
    return [value](const VideoClip&) { return value; };
}

Scorer contrast_aesthetic_scorer() {
    return [](const VideoClip& clip) {
        const Tensor& f = clip.frames;
        real mean = 0.0;
        for (int64_t i = 0; i < f.numel(); ++i) mean += f[i];
        mean /= static_cast<real>(f.numel());
        real var = 0.0;
        for (int64_t i = 0; i < f.numel(); ++i) var += (f[i] - mean) * (f[i] - mean);
        var /= static_cast<real>(f.numel());
        return std::min(10.0, 10.0 * std::sqrt(var));
    };
}

ClipRecord filter_clip(ClipRecord rec, const VideoClip& clip, const FilterThresholds& th,
                       const Scorers& scorers) {
    validate(th);
    validate_clip(clip);
    auto reject = [&rec](const char* reason) {
        rec.status = "rejected";
        rec.reasons = {reason};
        return rec;
    };

    std::array<int64_t, 3> frames = sampled_frames(clip.t());
    real sharp = 0.0;
    for (int64_t t : frames) sharp += sharpness_score(frame_at(clip, t));
    // thresholds follow the 8-bit grayscale convention; stored pixels span
    // [-1, 1], a scale on which the stencil variance never exceeds 64
    sharp = sharp / 3.0 * 127.5 * 127.5;
    rec.scores["sharpness"] = sharp;
    if (sharp < th.sharpness_low || sharp > th.sharpness_high) return reject("sharpness");

    if (scorers.aesthetic) {
        real a = scorers.aesthetic(clip);
        rec.scores["aesthetic"] = a;
        if (a < th.aesthetic_min) return reject("aesthetic");
    }

    real motion = motion_amplitude(clip);
    rec.scores["motion"] = motion;
    if (motion < th.motion_low) return reject("static");
    if (motion > th.motion_high) return reject("dynamic");

    if (scorers.mllm) {
        real m = scorers.mllm(clip);
        rec.scores["mllm"] = m;
        if (m < th.mllm_min) return reject("mllm");
    }

    rec.status = "kept";
    rec.reasons.clear();
    return rec;
}

uint64_t phash64(const Tensor& frame) {
    Tensor g = gray(frame);
    int64_t H = g.dim(0), W = g.dim(1);
    if (H < 8 || W < 8) throw InputError("frame too small to hash");
    real cells[64];
    for (int64_t r = 0; r < 8; ++r) {
        for (int64_t c = 0; c < 8; ++c) {
            int64_t y0 = r * H / 8, y1 = (r + 1) * H / 8;
            int64_t x0 = c * W / 8, x1 = (c + 1) * W / 8;
            real acc = 0.0;
            for (int64_t y = y0; y < y1; ++y)
                for (int64_t x = x0; x < x1; ++x) acc += g[y * W + x];
            cells[r * 8 + c] = acc / static_cast<real>((y1 - y0) * (x1 - x0));
        }
    }
    real mean = 0.0;
    for (real v : cells) mean += v;
    mean /= 64.0;
    uint64_t bits = 0;
    for (int i = 0; i < 64; ++i)
        if (cells[i] > mean) bits |= uint64_t{1} << (63 - i);
    return bits;
}

std::array<uint64_t, 3> clip_signature(const VideoClip& clip) {
    validate_clip(clip);
    int64_t T = clip.t();
    std::array<int64_t, 3> picks{0, (T - 1) / 2, T - 1};
    std::array<uint64_t, 3> sig{};
    for (int i = 0; i < 3; ++i) sig[static_cast<size_t>(i)] = phash64(frame_at(clip, picks[static_cast<size_t>(i)]));
    return sig;
}

int hamming3(const std::array<uint64_t, 3>& a, const std::array<uint64_t, 3>& b) {
    int d = 0;
    for (int i = 0; i < 3; ++i) d += std::popcount(a[static_cast<size_t>(i)] ^ b[static_cast<size_t>(i)]);
    return d;
}

std::vector<ClipRecord> dedup(const std::vector<ClipRecord>& records, const FrameAccess& frames,
                              int max_dist) {
    std::vector<ClipRecord> out;
    std::vector<std::array<uint64_t, 3>> sigs;
    for (const ClipRecord& rec : records) {
        std::array<uint64_t, 3> sig = clip_signature(frames(rec));
        bool duplicate = false;
        for (const auto& kept : sigs) {
            if (hamming3(sig, kept) <= max_dist) {
                duplicate = true;
                break;
            }
        }
        if (!duplicate) {
            out.push_back(rec);
            sigs.push_back(sig);
        }
    }
    return out;
}

std::vector<real> balance_tags(const std::vector<ClipRecord>& records,
                               const std::map<std::string, real>& target,
                               std::vector<std::string>* warnings) {
    if (records.empty()) throw InputError("empty batch");
    if (target.empty()) throw InputError("empty target distribution");
    std::map<std::string, int64_t> counts;
    for (const ClipRecord& rec : records) {
        if (rec.tags.empty()) throw InputError("record " + rec.clip_id + " has no tags");
        for (const std::string& tag : rec.tags) {
            if (!target.count(tag))
                throw InputError("tag outside the target distribution: " + tag);
            ++counts[tag];
        }
    }
    if (warnings)
        for (const auto& [tag, share] : target)
            if (!counts.count(tag)) warnings->push_back("target tag never observed: " + tag);

    std::vector<real> w(records.size(), 0.0);
    real total = 0.0;
    for (size_t i = 0; i < records.size(); ++i) {
        for (const std::string& tag : records[i].tags)
            w[i] += target.at(tag) / static_cast<real>(counts.at(tag));
        total += w[i];
    }
    for (real& x : w) x /= total;
    return w;
}

std::string record_json(const ClipRecord& rec) {
    json j;
    j["clip_id"] = rec.clip_id;
    j["source_id"] = rec.source_id;
    j["start"] = rec.start;
    j["end"] = rec.end;
    j["scores"] = json::object();
    for (const auto& [k, v] : rec.scores) j["scores"][k] = v;
    j["tags"] = rec.tags;
    j["status"] = rec.status;
    j["reasons"] = rec.reasons;
    return j.dump();
}

ClipRecord record_from_json(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw PipelineError(std::string("bad manifest line: ") + e.what());
    }
    ClipRecord rec;
    rec.clip_id = j.at("clip_id").get<std::string>();
    rec.source_id = j.at("source_id").get<std::string>();
    rec.start = j.at("start").get<int64_t>();
    rec.end = j.at("end").get<int64_t>();
    for (const auto& [k, v] : j.at("scores").items()) rec.scores[k] = v.get<real>();
    rec.tags = j.at("tags").get<std::vector<std::string>>();
    rec.status = j.at("status").get<std::string>();
    rec.reasons = j.at("reasons").get<std::vector<std::string>>();
    if (rec.end <= rec.start) throw PipelineError("record " + rec.clip_id + " has an empty frame range");
    return rec;
}

void save_manifest(const std::string& path, const std::vector<ClipRecord>& records) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw PipelineError("cannot open " + path + " for writing");
    for (const ClipRecord& rec : records) f << record_json(rec) << "\n";
}

std::vector<ClipRecord> load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw PipelineError("cannot open manifest " + path);
    std::vector<ClipRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(record_from_json(line));
    }
    return out;
}

namespace {

VideoClip segment(const VideoClip& clip, int64_t start, int64_t end) {
    int64_t C = clip.c(), H = clip.h(), W = clip.w();
    VideoClip seg;
    seg.fps = clip.fps;
    seg.frames = Tensor({end - start, C, H, W});
    int64_t per = C * H * W;
    for (int64_t i = 0; i < (end - start) * per; ++i)
        seg.frames[i] = clip.frames[start * per + i];
    return seg;
}

}  // namespace

std::vector<ClipRecord> run_pipeline(const std::vector<SourceClip>& sources,
                                     const PipelineConfig& cfg, const Scorers& scorers) {
    validate(cfg.thresholds);
    std::vector<ClipRecord> records;
    std::vector<VideoClip> segments;
    for (const SourceClip& src : sources) {
        validate_clip(src.clip);
        std::vector<int64_t> cuts = detect_scenes(src.clip, cfg.scene_threshold);
        cuts.push_back(src.clip.t());
        int64_t start = 0;
        int64_t index = 0;
        for (int64_t cut : cuts) {
            ClipRecord rec;
            rec.clip_id = src.source_id + "_" + std::to_string(index);
            rec.source_id = src.source_id;
            rec.start = start;
            rec.end = cut;
            rec.tags = src.tags;
            VideoClip seg = segment(src.clip, start, cut);
            if (cut - start < cfg.min_frames) {
                rec.status = "rejected";
                rec.reasons = {"short"};
            } else {
                rec = filter_clip(std::move(rec), seg, cfg.thresholds, scorers);
            }
            records.push_back(std::move(rec));
            segments.push_back(std::move(seg));
            start = cut;
            ++index;
        }
    }

    // mark kept near-duplicates; earlier survivors win
    std::vector<std::array<uint64_t, 3>> sigs;
    for (size_t i = 0; i < records.size(); ++i) {
        if (records[i].status != "kept") continue;
        std::array<uint64_t, 3> sig = clip_signature(segments[i]);
        bool duplicate = false;
        for (const auto& kept : sigs)
            if (hamming3(sig, kept) <= cfg.dedup_max_dist) {
                duplicate = true;
                break;
            }
        if (duplicate) {
            records[i].status = "rejected";
            records[i].reasons = {"duplicate"};
        } else {
            sigs.push_back(sig);
        }
    }
    return records;
}

}  // namespace mugv::pipe
