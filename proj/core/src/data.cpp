#include "echocotr/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "echocotr/error.hpp"

namespace fs = std::filesystem;

namespace echocotr {

const char* to_string(Split s) {
    switch (s) {
        case Split::Train: return "TRAIN";
        case Split::Val: return "VAL";
        case Split::Test: return "TEST";
    }
    return "?";
}

Split split_from_string(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::toupper(c); });
    if (s == "TRAIN") return Split::Train;
    if (s == "VAL") return Split::Val;
    if (s == "TEST") return Split::Test;
    throw DataError("unknown split '" + s + "' (TRAIN, VAL, TEST)");
}

std::string StudyRecord::check() const {
    if (file_name.empty()) return "empty FileName";
    if (!(ef > 0.0 && ef < 100.0)) return "EF out of (0,100)";
    if (esv.has_value() != edv.has_value()) return "ESV and EDV must be given together";
    if (esv && edv) {
        if (!(*esv > 0.0 && *edv > *esv)) return "volumes must satisfy EDV > ESV > 0";
        const double implied = 100.0 * (*edv - *esv) / *edv;
        if (std::abs(ef - implied) > 1.0) return "EF inconsistent with ESV/EDV";
    }
    if (num_frames < 1) return "NumberOfFrames must be >= 1";
    if (frame_height < 1 || frame_width < 1) return "frame size must be positive";
    if (!(fps > 0.0)) return "FPS must be > 0";
    if (es_idx && ed_idx && *es_idx == *ed_idx) return "ES and ED frame indices equal";
    if (es_idx && (*es_idx < 0 || *es_idx >= num_frames)) return "ES frame index out of range";
    if (ed_idx && (*ed_idx < 0 || *ed_idx >= num_frames)) return "ED frame index out of range";
    return {};
}

int64_t DatasetManifest::count(Split s) const {
    int64_t n = 0;
    for (const auto& r : records) n += (r.split == s);
    return n;
}

std::vector<const StudyRecord*> DatasetManifest::split_records(Split s) const {
    std::vector<const StudyRecord*> out;
    for (const auto& r : records)
        if (r.split == s) out.push_back(&r);
    return out;
}

namespace {

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(trim(cur));
    return out;
}

double parse_double(const std::string& s, const char* what) {
    size_t pos = 0;
    double v;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw DataError(std::string("unparseable ") + what + " '" + s + "'");
    }
    if (pos != s.size()) throw DataError(std::string("unparseable ") + what + " '" + s + "'");
    return v;
}

int64_t parse_int(const std::string& s, const char* what) {
    size_t pos = 0;
    long long v;
    try {
        v = std::stoll(s, &pos);
    } catch (const std::exception&) {
        throw DataError(std::string("unparseable ") + what + " '" + s + "'");
    }
    if (pos != s.size()) throw DataError(std::string("unparseable ") + what + " '" + s + "'");
    return v;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

}  // namespace

DatasetManifest parse_manifest(std::istream& in, const std::string& origin) {
    std::string header;
    if (!std::getline(in, header)) throw FormatError(origin + ": empty manifest");
    const std::vector<std::string> cols = split_csv_line(header);
    std::unordered_map<std::string, size_t> at;
    for (size_t i = 0; i < cols.size(); ++i) at[cols[i]] = i;
    for (const char* req : {"FileName", "EF", "ESV", "EDV", "FrameHeight", "FrameWidth", "FPS",
                            "NumberOfFrames", "Split"})
        if (!at.count(req)) throw FormatError(origin + ": missing required column " + req);

    DatasetManifest m;
    std::unordered_map<std::string, size_t> seen;
    std::string line;
    int64_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        const std::vector<std::string> f = split_csv_line(line);
        StudyRecord r;
        std::string reason;
        try {
            if (f.size() < cols.size()) throw DataError("row has fewer fields than the header");
            r.file_name = f[at["FileName"]];
            r.ef = parse_double(f[at["EF"]], "EF");
            const std::string& esv = f[at["ESV"]];
            const std::string& edv = f[at["EDV"]];
            if (!esv.empty()) r.esv = parse_double(esv, "ESV");
            if (!edv.empty()) r.edv = parse_double(edv, "EDV");
            r.frame_height = parse_int(f[at["FrameHeight"]], "FrameHeight");
            r.frame_width = parse_int(f[at["FrameWidth"]], "FrameWidth");
            r.fps = parse_double(f[at["FPS"]], "FPS");
            r.num_frames = parse_int(f[at["NumberOfFrames"]], "NumberOfFrames");
            r.split = split_from_string(f[at["Split"]]);
            reason = r.check();
            if (reason.empty() && seen.count(r.file_name)) reason = "duplicate FileName";
        } catch (const Error& e) {
            reason = e.what();
        }
        if (reason.empty()) {
            seen[r.file_name] = m.records.size();
            m.records.push_back(std::move(r));
        } else {
            m.rejected.push_back({lineno, r.file_name, reason});
        }
    }
    return m;
}

DatasetManifest load_manifest(const std::string& csv_path) {
    std::ifstream in(csv_path);
    if (!in) throw IoError("cannot open manifest " + csv_path);
    DatasetManifest m = parse_manifest(in, csv_path);
    m.video_root = fs::path(csv_path).parent_path().string();
    return m;
}

void write_manifest(const std::string& csv_path, const std::vector<StudyRecord>& records) {
    std::ofstream out(csv_path, std::ios::binary);  // binary: no CRLF translation anywhere
    if (!out) throw IoError("cannot write manifest " + csv_path);
    out << "FileName,EF,ESV,EDV,FrameHeight,FrameWidth,FPS,NumberOfFrames,Split\n";
    for (const StudyRecord& r : records) {
        out << r.file_name << ',' << fmt_double(r.ef) << ','
            << (r.esv ? fmt_double(*r.esv) : std::string()) << ','
            << (r.edv ? fmt_double(*r.edv) : std::string()) << ',' << r.frame_height << ','
            << r.frame_width << ',' << fmt_double(r.fps) << ',' << r.num_frames << ','
            << to_string(r.split) << '\n';
    }
    if (!out) throw IoError("failed writing manifest " + csv_path);
}

void attach_es_ed(DatasetManifest& manifest, const std::string& csv_path) {
    std::ifstream in(csv_path);
    if (!in) throw IoError("cannot open es/ed sidecar " + csv_path);
    std::string header;
    if (!std::getline(in, header)) throw FormatError(csv_path + ": empty sidecar");
    const std::vector<std::string> cols = split_csv_line(header);
    std::unordered_map<std::string, size_t> at;
    for (size_t i = 0; i < cols.size(); ++i) at[cols[i]] = i;
    for (const char* req : {"FileName", "ESFrame", "EDFrame"})
        if (!at.count(req)) throw FormatError(csv_path + ": missing required column " + req);

    std::unordered_map<std::string, StudyRecord*> by_name;
    for (StudyRecord& r : manifest.records) by_name[r.file_name] = &r;

    std::string line;
    int64_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        const std::vector<std::string> f = split_csv_line(line);
        std::string name, reason;
        try {
            if (f.size() < cols.size()) throw DataError("row has fewer fields than the header");
            name = f[at["FileName"]];
            auto it = by_name.find(name);
            if (it == by_name.end()) throw DataError("no manifest record for this file");
            StudyRecord probe = *it->second;
            probe.es_idx = parse_int(f[at["ESFrame"]], "ESFrame");
            probe.ed_idx = parse_int(f[at["EDFrame"]], "EDFrame");
            reason = probe.check();
            if (reason.empty()) *it->second = probe;
        } catch (const Error& e) {
            reason = e.what();
        }
        if (!reason.empty()) manifest.rejected.push_back({lineno, name, reason});
    }
}

void write_es_ed(const std::string& csv_path, const std::vector<StudyRecord>& records) {
    std::ofstream out(csv_path, std::ios::binary);
    if (!out) throw IoError("cannot write es/ed sidecar " + csv_path);
    out << "FileName,ESFrame,EDFrame\n";
    for (const StudyRecord& r : records)
        if (r.es_idx && r.ed_idx)
            out << r.file_name << ',' << *r.es_idx << ',' << *r.ed_idx << '\n';
    if (!out) throw IoError("failed writing es/ed sidecar " + csv_path);
}

// --- raw video container ---

namespace {

void put_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError(path + ": truncated header");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

}  // namespace

void write_video(const std::string& path, int64_t t, int64_t h, int64_t w,
                 const std::vector<uint8_t>& pixels) {
    if (t < 1 || h < 1 || w < 1) throw ConfigError("video dims must be positive");
    if (int64_t(pixels.size()) != t * h * w)
        throw ConfigError("pixel payload does not match declared dims");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write video " + path);
    out.write("ECV1", 4);
    put_u32(out, uint32_t(t));
    put_u32(out, uint32_t(h));
    put_u32(out, uint32_t(w));
    out.write(reinterpret_cast<const char*>(pixels.data()),
              static_cast<std::streamsize>(pixels.size()));
    if (!out) throw IoError("failed writing video " + path);
}

std::vector<uint8_t> read_video_bytes(const std::string& path, int64_t& t, int64_t& h,
                                      int64_t& w) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open video " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "ECV1", 4) != 0)
        throw FormatError(path + ": bad magic, not an ECV1 file");
    t = get_u32(in, path);
    h = get_u32(in, path);
    w = get_u32(in, path);
    if (t < 1 || h < 1 || w < 1) throw FormatError(path + ": non-positive dimensions");
    std::vector<uint8_t> pixels(static_cast<size_t>(t * h * w));
    if (!in.read(reinterpret_cast<char*>(pixels.data()),
                 static_cast<std::streamsize>(pixels.size())))
        throw FormatError(path + ": payload shorter than declared T*H*W");
    if (in.peek() != std::char_traits<char>::eof())
        throw FormatError(path + ": payload longer than declared T*H*W");
    return pixels;
}

VideoClip load_video(const std::string& path) {
    int64_t t, h, w;
    const std::vector<uint8_t> pixels = read_video_bytes(path, t, h, w);
    TensorT<float> frames({t, h, w});
    for (size_t i = 0; i < pixels.size(); ++i) frames.ptr()[i] = float(pixels[i]) / 255.0f;
    return make_clip(std::move(frames), fs::path(path).filename().string());
}

VideoClip normalize(const VideoClip& clip, float mean, float stddev) {
    if (!(stddev > 0.0f)) throw ConfigError("normalize: std must be > 0");
    TensorT<float> out(clip.frames.shape);
    const float* src = clip.frames.ptr();
    for (int64_t i = 0; i < out.size(); ++i) out.ptr()[i] = (src[i] - mean) / stddev;
    return make_clip(std::move(out), clip.source_id, clip.padded_from);
}

// --- synthetic generator ---

void SynthSpec::validate() const {
    if (height < 8 || width < 8) throw ConfigError("synth: frame must be at least 8x8");
    if (frames_per_cycle < 8) throw ConfigError("synth: frames_per_cycle must be >= 8");
    if (num_cycles < 1) throw ConfigError("synth: num_cycles must be >= 1");
    if (!(ef_lo > 5.0 && ef_hi < 95.0 && ef_lo < ef_hi))
        throw ConfigError("synth: ef range must sit inside (5,95)");
    if (noise_sigma < 0.0) throw ConfigError("synth: noise_sigma must be >= 0");
    if (!(fps > 0.0)) throw ConfigError("synth: fps must be > 0");
    // Largest ellipse must fit with a margin: semi-axes 0.30*W and 0.42*H.
    if (0.42 * double(height) > 0.5 * double(height - 1) ||
        0.30 * double(width) > 0.5 * double(width - 1))
        throw ConfigError("synth: ellipse geometry does not fit the frame");
}

SynthItem synth_one(const SynthSpec& spec, uint64_t seed, int64_t index) {
    spec.validate();
    RngStream rng = RngStream(seed, "synth").substream(uint64_t(index));

    const double ef = std::round(rng.uniform(spec.ef_lo, spec.ef_hi) * 100.0) / 100.0;
    const int64_t frames = spec.frames();
    const int64_t P = spec.frames_per_cycle;

    // Fixed ED geometry across the dataset; only the contraction depth varies.
    const double a_ed = 0.30 * double(spec.width);   // semi-axis along x
    const double b_ed = 0.42 * double(spec.height);  // semi-axis along y
    const double area_ed = M_PI * a_ed * b_ed;
    const double area_es = area_ed * (1.0 - ef / 100.0);

    std::vector<double> area(static_cast<size_t>(frames));
    for (int64_t t = 0; t < frames; ++t) {
        const double phase = (1.0 - std::cos(2.0 * M_PI * double(t) / double(P))) / 2.0;
        area[size_t(t)] = area_ed - (area_ed - area_es) * phase;
    }
    // first occurrence of each extreme (minmax_element would give the last max)
    const auto mn = std::min_element(area.begin(), area.end());
    const auto mx = std::max_element(area.begin(), area.end());

    const double cx = double(spec.width - 1) / 2.0;
    const double cy = double(spec.height - 1) / 2.0;
    const double bg = 0.75, fg = 0.15;  // dark chamber on bright tissue

    SynthItem item;
    item.pixels.resize(size_t(frames * spec.height * spec.width));
    uint8_t* px = item.pixels.data();
    for (int64_t t = 0; t < frames; ++t) {
        const double s = std::sqrt(area[size_t(t)] / area_ed);
        const double a = a_ed * s, b = b_ed * s;
        for (int64_t y = 0; y < spec.height; ++y)
            for (int64_t x = 0; x < spec.width; ++x) {
                const double dx = (double(x) - cx) / a;
                const double dy = (double(y) - cy) / b;
                double v = (dx * dx + dy * dy <= 1.0) ? fg : bg;
                if (spec.noise_sigma > 0.0) v += rng.normal(0.0, spec.noise_sigma);
                v = std::clamp(v, 0.0, 1.0);
                *px++ = static_cast<uint8_t>(std::lround(v * 255.0));
            }
    }

    char name[64];
    std::snprintf(name, sizeof(name), "synth_%05lld.ecv", static_cast<long long>(index));
    StudyRecord& r = item.record;
    r.file_name = name;
    r.ef = ef;
    r.esv = area_es;  // pixel area as a volume proxy
    r.edv = area_ed;
    r.num_frames = frames;
    r.frame_height = spec.height;
    r.frame_width = spec.width;
    r.fps = spec.fps;
    r.ed_idx = mx - area.begin();
    r.es_idx = mn - area.begin();
    const std::string reason = r.check();
    if (!reason.empty()) throw DataError("synth produced an invalid record: " + reason);
    return item;
}

std::vector<SynthItem> synth_generate(int64_t count, const SynthSpec& spec, uint64_t seed) {
    if (count < 0) throw ConfigError("synth: count must be >= 0");
    spec.validate();
    std::vector<SynthItem> items;
    items.reserve(size_t(count));
    for (int64_t i = 0; i < count; ++i) {
        SynthItem item = synth_one(spec, seed, i);
        // 70/15/15 contiguous assignment; callers may relabel for custom splits
        const double frac = count > 1 ? double(i) / double(count) : 0.0;
        item.record.split = frac < 0.70 ? Split::Train : frac < 0.85 ? Split::Val : Split::Test;
        items.push_back(std::move(item));
    }
    return items;
}

void synth_write(const std::vector<SynthItem>& items, const std::string& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output dir " + out_dir + ": " + ec.message());
    std::vector<StudyRecord> records;
    records.reserve(items.size());
    for (const SynthItem& it : items) {
        const StudyRecord& r = it.record;
        write_video((fs::path(out_dir) / r.file_name).string(), r.num_frames, r.frame_height,
                    r.frame_width, it.pixels);
        records.push_back(r);
    }
    write_manifest((fs::path(out_dir) / "manifest.csv").string(), records);
    write_es_ed((fs::path(out_dir) / "es_ed.csv").string(), records);
}

}  // namespace echocotr
