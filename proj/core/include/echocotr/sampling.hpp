#pragma once

#include <optional>
#include <string>
#include <vector>

#include "echocotr/rng.hpp"
#include "echocotr/tensor.hpp"

namespace echocotr {

enum class SampleMode { Uniform, EsEd, Mirrored };

struct SampleSpec {
    int64_t num_frames = 36;
    int64_t frequency = 4;
    SampleMode mode = SampleMode::Uniform;
    bool random_start = true;   // false => Fixed(fixed_start)
    int64_t fixed_start = 0;

    // EsEd forces num_frames to 2 and ignores frequency.
    void validate() const;
    SampleSpec normalized() const;
};

struct VideoClip {
    TensorT<float> frames;  // [T,H,W], values in [0,1] straight from the container
    std::string source_id;
    std::optional<int64_t> padded_from;  // first all-zero appended frame, if padded

    int64_t t() const { return frames.shape[0]; }
    int64_t h() const { return frames.shape[1]; }
    int64_t w() const { return frames.shape[2]; }
};

VideoClip make_clip(TensorT<float> frames, std::string source_id,
                    std::optional<int64_t> padded_from = std::nullopt);

/// Minimum source length admitting one clip: (N-1)*f + 1.
int64_t required_length(const SampleSpec& spec);

/// Appends zero frames up to target_len; no-op when already long enough.
VideoClip pad_video(const VideoClip& video, int64_t target_len);

struct ClipSample {
    VideoClip clip;                 // [N,H,W]
    int64_t start = 0;
    std::vector<int64_t> indices;   // into the padded video
    std::optional<int64_t> padded_from;
};

/// Start index range after padding: [0, t_padded - required_length], inclusive.
int64_t draw_start(int64_t t_padded, const SampleSpec& spec, RngStream& rng);

ClipSample sample_uniform(const VideoClip& video, const SampleSpec& spec, RngStream& rng);

/// The two annotated frames in chronological order.
VideoClip sample_es_ed(const VideoClip& video, int64_t es_idx, int64_t ed_idx);

/// Palindromic tiling indices over a cycle of length cycle_len:
/// 0,1,..,L-1,L-2,..,1,0,1,.. (continuity preserved at every seam).
std::vector<int64_t> mirrored_indices(int64_t cycle_len, int64_t target_len);

/// Tiles the annotated cycle [min(es,ed) .. max(es,ed)] palindromically
/// until target_len frames are emitted.
VideoClip sample_mirrored(const VideoClip& video, int64_t es_idx, int64_t ed_idx,
                          int64_t target_len);

const char* to_string(SampleMode m);
SampleMode sample_mode_from_string(const std::string& s);

}  // namespace echocotr
