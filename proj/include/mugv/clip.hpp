#pragma once

#include <string>

#include "mugv/tensor.hpp"

namespace mugv {

// Dense video clip: frames (T, C, H, W) in [-1, 1], plus frame rate.
struct VideoClip {
    Tensor frames;
    real fps = 8.0;

    int64_t t() const { return frames.dim(0); }
    int64_t c() const { return frames.dim(1); }
    int64_t h() const { return frames.dim(2); }
    int64_t w() const { return frames.dim(3); }
};

// Enforces the clip invariants: rank 4, T >= 1, C in {1, 3}, finite values
// within [-1, 1].
void validate_clip(const VideoClip& clip, const char* what = "clip");

// On-disk format: header-less little-endian f32 in (T, C, H, W) order at
// `path`, with a sidecar JSON {"t","c","h","w","fps"} at `path` + ".json".
void save_clip(const std::string& path, const VideoClip& clip);
VideoClip load_clip(const std::string& path);

}  // namespace mugv
