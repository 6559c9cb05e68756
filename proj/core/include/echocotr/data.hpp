#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "echocotr/rng.hpp"
#include "echocotr/sampling.hpp"

namespace echocotr {

enum class Split { Train, Val, Test };

const char* to_string(Split s);
Split split_from_string(std::string s);  // case-insensitive TRAIN/VAL/TEST

struct StudyRecord {
    std::string file_name;
    double ef = 0.0;                       // percent, (0,100)
    std::optional<double> esv, edv;        // mL
    int64_t num_frames = 0;
    int64_t frame_height = 0, frame_width = 0;
    double fps = 0.0;
    Split split = Split::Train;
    std::optional<int64_t> es_idx, ed_idx;

    // Returns a reason string when invalid, empty when fine.
    std::string check() const;
};

struct RowIssue {
    int64_t line = 0;  // 1-based line number in the CSV
    std::string file_name;
    std::string reason;
};

struct DatasetManifest {
    std::vector<StudyRecord> records;
    std::string video_root;
    std::vector<RowIssue> rejected;

    int64_t count(Split s) const;
    std::vector<const StudyRecord*> split_records(Split s) const;
};

/// Header columns FileName,EF,ESV,EDV,FrameHeight,FrameWidth,FPS,NumberOfFrames,Split
/// in any order; ESV/EDV may be empty. Bad rows land in `rejected`, not in `records`.
DatasetManifest load_manifest(const std::string& csv_path);
DatasetManifest parse_manifest(std::istream& in, const std::string& origin);

void write_manifest(const std::string& csv_path, const std::vector<StudyRecord>& records);

/// Sidecar CSV FileName,ESFrame,EDFrame; fills es_idx/ed_idx on matching records.
/// Rows for unknown files or with invalid indices are reported in `rejected`.
void attach_es_ed(DatasetManifest& manifest, const std::string& csv_path);
void write_es_ed(const std::string& csv_path, const std::vector<StudyRecord>& records);

// --- raw video container (magic "ECV1", u32le T,H,W, then T*H*W bytes) ---

void write_video(const std::string& path, int64_t t, int64_t h, int64_t w,
                 const std::vector<uint8_t>& pixels);
VideoClip load_video(const std::string& path);         // u8 -> [0,1] by /255
std::vector<uint8_t> read_video_bytes(const std::string& path, int64_t& t, int64_t& h, int64_t& w);

/// (x - mean) / std elementwise; defaults map [0,1] roughly onto [-2,2].
VideoClip normalize(const VideoClip& clip, float mean = 0.5f, float stddev = 0.25f);

// --- synthetic echo-like generator ---

struct SynthSpec {
    int64_t height = 32, width = 32;
    int64_t frames_per_cycle = 16;  // P
    int64_t num_cycles = 1;
    double ef_lo = 15.0, ef_hi = 85.0;  // must sit inside (5,95)
    double noise_sigma = 0.02;          // in [0,1] pixel units, before quantization
    double fps = 50.0;

    void validate() const;
    int64_t frames() const { return frames_per_cycle * num_cycles; }
};

struct SynthItem {
    StudyRecord record;
    std::vector<uint8_t> pixels;  // frames() * height * width
};

/// One video, fully determined by (seed, index): an ellipse whose area tracks
/// A(t) = A_ed - (A_ed - A_es) * (1 - cos 2*pi*t/P) / 2, label ef = 100*(A_ed-A_es)/A_ed.
SynthItem synth_one(const SynthSpec& spec, uint64_t seed, int64_t index);

std::vector<SynthItem> synth_generate(int64_t count, const SynthSpec& spec, uint64_t seed);

/// Writes <name>.ecv files plus manifest.csv and es_ed.csv under out_dir.
void synth_write(const std::vector<SynthItem>& items, const std::string& out_dir);

}  // namespace echocotr
