#include "mugv/clip.hpp"

#include <bit>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace mugv {

using nlohmann::json;

void validate_clip(const VideoClip& clip, const char* what) {
    const Tensor& f = clip.frames;
    if (f.rank() != 4) throw DimensionError(std::string(what) + ": frames must be (T, C, H, W), got " + f.shape_str());
    if (f.dim(0) < 1) throw DimensionError(std::string(what) + ": needs at least one frame");
    if (f.dim(1) != 1 && f.dim(1) != 3)
        throw DimensionError(std::string(what) + ": channel count must be 1 or 3, got " + std::to_string(f.dim(1)));
    if (!(clip.fps > 0.0)) throw InputError(std::string(what) + ": fps must be positive");
    for (int64_t i = 0; i < f.numel(); ++i) {
        if (!std::isfinite(f[i])) throw NumericError(std::string(what) + ": non-finite frame value");
        if (f[i] < -1.0 || f[i] > 1.0)
            throw InputError(std::string(what) + ": frame value " + std::to_string(f[i]) + " outside [-1, 1]");
    }
}

void save_clip(const std::string& path, const VideoClip& clip) {
    validate_clip(clip);
    std::string bytes;
    bytes.reserve(static_cast<size_t>(clip.frames.numel()) * 4);
    for (int64_t i = 0; i < clip.frames.numel(); ++i) {
        uint32_t u = std::bit_cast<uint32_t>(static_cast<float>(clip.frames[i]));
        for (int k = 0; k < 4; ++k) bytes.push_back(static_cast<char>((u >> (8 * k)) & 0xff));
    }
    {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw PipelineError("cannot open " + path + " for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw PipelineError("write failed for " + path);
    }
    json side = {{"t", clip.t()}, {"c", clip.c()}, {"h", clip.h()}, {"w", clip.w()}, {"fps", clip.fps}};
    std::ofstream sf(path + ".json", std::ios::trunc);
    if (!sf) throw PipelineError("cannot open " + path + ".json for writing");
    sf << side.dump() << "\n";
}

VideoClip load_clip(const std::string& path) {
    json side;
    {
        std::ifstream sf(path + ".json");
        if (!sf) throw PipelineError("missing sidecar " + path + ".json");
        try {
            sf >> side;
        } catch (const json::exception& e) {
            throw PipelineError("bad sidecar " + path + ".json: " + e.what());
        }
    }
    for (const char* k : {"t", "c", "h", "w", "fps"})
        if (!side.contains(k)) throw PipelineError("sidecar " + path + ".json missing \"" + k + "\"");
    int64_t t = side["t"].get<int64_t>();
    int64_t c = side["c"].get<int64_t>();
    int64_t h = side["h"].get<int64_t>();
    int64_t w = side["w"].get<int64_t>();

    std::ifstream f(path, std::ios::binary);
    if (!f) throw PipelineError("cannot open " + path);
    std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    int64_t want = t * c * h * w;
    if (static_cast<int64_t>(raw.size()) != want * 4)
        throw PipelineError(path + ": expected " + std::to_string(want * 4) + " bytes, found " +
                            std::to_string(raw.size()));

    VideoClip clip;
    clip.fps = side["fps"].get<real>();
    clip.frames = Tensor({t, c, h, w});
    const unsigned char* p = reinterpret_cast<const unsigned char*>(raw.data());
    for (int64_t i = 0; i < want; ++i) {
        uint32_t u = 0;
        for (int k = 0; k < 4; ++k) u |= static_cast<uint32_t>(p[4 * i + k]) << (8 * k);
        clip.frames[i] = static_cast<real>(std::bit_cast<float>(u));
    }
    validate_clip(clip, path.c_str());
    return clip;
}

}  // namespace mugv
