#include "echocotr/sampling.hpp"

#include <algorithm>
#include <cstring>

#include "echocotr/error.hpp"

namespace echocotr {

void SampleSpec::validate() const {
    switch (mode) {
        case SampleMode::Uniform:
            if (num_frames < 2) throw ConfigError("uniform sampling needs num_frames >= 2");
            if (frequency < 1) throw ConfigError("sampling frequency must be >= 1");
            break;
        case SampleMode::EsEd:
            break;  // N forced to 2, f ignored
        case SampleMode::Mirrored:
            if (num_frames < 2) throw ConfigError("mirrored sampling needs num_frames >= 2");
            if (frequency < 1) throw ConfigError("sampling frequency must be >= 1");
            break;
    }
    if (!random_start && fixed_start < 0) throw ConfigError("fixed clip start must be >= 0");
}

SampleSpec SampleSpec::normalized() const {
    SampleSpec s = *this;
    if (s.mode == SampleMode::EsEd) {
        s.num_frames = 2;
        s.frequency = 1;
    }
    s.validate();
    return s;
}

VideoClip make_clip(TensorT<float> frames, std::string source_id,
                    std::optional<int64_t> padded_from) {
    if (frames.rank() != 3)
        throw ShapeError("video clip must be [T,H,W], got " + shape_str(frames.shape));
    VideoClip clip;
    clip.frames = std::move(frames);
    clip.source_id = std::move(source_id);
    clip.padded_from = padded_from;
    return clip;
}

int64_t required_length(const SampleSpec& spec) {
    const SampleSpec s = spec.normalized();
    return (s.num_frames - 1) * s.frequency + 1;
}

VideoClip pad_video(const VideoClip& video, int64_t target_len) {
    if (target_len < 1) throw ConfigError("pad_video: target length must be >= 1");
    if (video.t() >= target_len) return video;
    TensorT<float> padded = TensorT<float>::zeros({target_len, video.h(), video.w()});
    std::memcpy(padded.ptr(), video.frames.ptr(), sizeof(float) * size_t(video.frames.size()));
    return make_clip(std::move(padded), video.source_id, video.t());
}

int64_t draw_start(int64_t t_padded, const SampleSpec& spec, RngStream& rng) {
    const SampleSpec s = spec.normalized();
    const int64_t hi = t_padded - required_length(s);
    if (hi < 0) throw ShapeError("draw_start: video shorter than required length");
    if (!s.random_start) {
        if (s.fixed_start > hi)
            throw ConfigError("fixed clip start " + std::to_string(s.fixed_start) +
                              " exceeds admissible range [0," + std::to_string(hi) + "]");
        return s.fixed_start;
    }
    return rng.uniform_int(0, hi);
}

static VideoClip gather_frames(const VideoClip& video, const std::vector<int64_t>& indices) {
    const int64_t hw = video.h() * video.w();
    TensorT<float> out({int64_t(indices.size()), video.h(), video.w()});
    for (size_t i = 0; i < indices.size(); ++i)
        std::memcpy(out.ptr() + int64_t(i) * hw, video.frames.ptr() + indices[i] * hw,
                    sizeof(float) * size_t(hw));
    return make_clip(std::move(out), video.source_id);
}

ClipSample sample_uniform(const VideoClip& video, const SampleSpec& spec, RngStream& rng) {
    const SampleSpec s = spec.normalized();
    if (s.mode == SampleMode::EsEd)
        throw ConfigError("sample_uniform called with EsEd mode; use sample_es_ed");
    const VideoClip padded = pad_video(video, required_length(s));
    ClipSample out;
    out.start = draw_start(padded.t(), s, rng);
    out.indices.resize(size_t(s.num_frames));
    for (int64_t i = 0; i < s.num_frames; ++i) out.indices[size_t(i)] = out.start + i * s.frequency;
    out.clip = gather_frames(padded, out.indices);
    out.padded_from = padded.padded_from;
    return out;
}

VideoClip sample_es_ed(const VideoClip& video, int64_t es_idx, int64_t ed_idx) {
    if (es_idx < 0 || es_idx >= video.t() || ed_idx < 0 || ed_idx >= video.t())
        throw DataError("es/ed frame index out of range for video of length " +
                        std::to_string(video.t()));
    if (es_idx == ed_idx) throw DataError("es and ed frame indices must differ");
    return gather_frames(video, {std::min(es_idx, ed_idx), std::max(es_idx, ed_idx)});
}

std::vector<int64_t> mirrored_indices(int64_t cycle_len, int64_t target_len) {
    if (cycle_len < 2) throw ConfigError("mirrored tiling needs a cycle of >= 2 frames");
    if (target_len < cycle_len)
        throw ConfigError("mirrored target length " + std::to_string(target_len) +
                          " shorter than the cycle (" + std::to_string(cycle_len) + ")");
    const int64_t period = 2 * cycle_len - 2;
    std::vector<int64_t> idx(static_cast<size_t>(target_len));
    for (int64_t i = 0; i < target_len; ++i) {
        const int64_t j = i % period;
        idx[size_t(i)] = j < cycle_len ? j : period - j;
    }
    return idx;
}

VideoClip sample_mirrored(const VideoClip& video, int64_t es_idx, int64_t ed_idx,
                          int64_t target_len) {
    if (es_idx < 0 || es_idx >= video.t() || ed_idx < 0 || ed_idx >= video.t())
        throw DataError("es/ed frame index out of range for video of length " +
                        std::to_string(video.t()));
    if (es_idx == ed_idx) throw DataError("es and ed frame indices must differ");
    const int64_t first = std::min(es_idx, ed_idx);
    const int64_t last = std::max(es_idx, ed_idx);
    std::vector<int64_t> idx = mirrored_indices(last - first + 1, target_len);
    for (int64_t& i : idx) i += first;
    return gather_frames(video, idx);
}

const char* to_string(SampleMode m) {
    switch (m) {
        case SampleMode::Uniform: return "uniform";
        case SampleMode::EsEd: return "es_ed";
        case SampleMode::Mirrored: return "mirrored";
    }
    return "?";
}

SampleMode sample_mode_from_string(const std::string& s) {
    if (s == "uniform") return SampleMode::Uniform;
    if (s == "es_ed") return SampleMode::EsEd;
    if (s == "mirrored") return SampleMode::Mirrored;
    throw ConfigError("unknown sample mode '" + s + "' (uniform, es_ed, mirrored)");
}

}  // namespace echocotr
