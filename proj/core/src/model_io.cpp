#include <cstdio>
#include <fstream>
#include <sstream>

#include "echocotr/model.hpp"

namespace echocotr {

void ModelConfig::validate() const {
    for (int64_t d : stage_depths)
        if (d < 0) throw ConfigError("stage depths must be >= 0");
    for (int64_t d : stage_dims)
        if (d < 1) throw ConfigError("stage dims must be positive");
    if (head_dim < 1) throw ConfigError("head_dim must be positive");
    if (stage_dims[2] % head_dim != 0 || stage_dims[3] % head_dim != 0)
        throw ConfigError("global-stage dims must be divisible by head_dim");
    if (!(drop_path_max >= 0.0 && drop_path_max < 1.0))
        throw ConfigError("drop_path_max must be in [0,1)");
    if (dpe_kernel < 1 || dpe_kernel % 2 == 0) throw ConfigError("dpe_kernel must be odd");
    if (local_window < 1 || local_window % 2 == 0) throw ConfigError("local_window must be odd");
    if (!(ffn_ratio > 0.0)) throw ConfigError("ffn_ratio must be positive");
    if (in_channels < 1) throw ConfigError("in_channels must be positive");
    if (input_t < 2) throw ConfigError("input_t must be >= 2");
    if (input_h < 4 || input_w < 4) throw ConfigError("input_h/input_w must be >= 4");
}

ModelConfig ModelConfig::preset(const std::string& name) {
    ModelConfig c;
    if (name == "S") {
        c.stage_depths = {3, 4, 8, 3};
        c.drop_path_max = 0.1;
    } else if (name == "B") {
        c.stage_depths = {5, 8, 20, 7};
        c.drop_path_max = 0.3;
    } else {
        throw ConfigError("unknown preset '" + name + "' (expected S or B)");
    }
    return c;
}

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string join4(const std::array<int64_t, 4>& a) {
    std::string s;
    for (size_t i = 0; i < 4; ++i) {
        if (i) s += ',';
        s += std::to_string(a[i]);
    }
    return s;
}

std::array<int64_t, 4> parse4(const std::string& s, const std::string& key) {
    std::array<int64_t, 4> out{};
    std::stringstream ss(s);
    std::string part;
    size_t i = 0;
    while (std::getline(ss, part, ',')) {
        if (i >= 4) throw FormatError("config key " + key + " needs exactly 4 values");
        try {
            out[i++] = std::stoll(part);
        } catch (const std::exception&) {
            throw FormatError("config key " + key + ": bad integer '" + part + "'");
        }
    }
    if (i != 4) throw FormatError("config key " + key + " needs exactly 4 values");
    return out;
}

}  // namespace

std::string ModelConfig::canonical_text() const {
    std::string s;
    s += "dpe_kernel=" + std::to_string(dpe_kernel) + "\n";
    s += "drop_path_max=" + fmt_double(drop_path_max) + "\n";
    s += "ffn_ratio=" + fmt_double(ffn_ratio) + "\n";
    s += "head_dim=" + std::to_string(head_dim) + "\n";
    s += "in_channels=" + std::to_string(in_channels) + "\n";
    s += "input_h=" + std::to_string(input_h) + "\n";
    s += "input_t=" + std::to_string(input_t) + "\n";
    s += "input_w=" + std::to_string(input_w) + "\n";
    s += "local_window=" + std::to_string(local_window) + "\n";
    s += "stage_depths=" + join4(stage_depths) + "\n";
    s += "stage_dims=" + join4(stage_dims) + "\n";
    return s;
}

ModelConfig ModelConfig::parse_text(const std::string& text) {
    ModelConfig c;
    std::stringstream ss(text);
    std::string line;
    int seen = 0;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("config line without '=': " + line);
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        try {
            if (key == "dpe_kernel") c.dpe_kernel = std::stoll(val);
            else if (key == "drop_path_max") c.drop_path_max = std::stod(val);
            else if (key == "ffn_ratio") c.ffn_ratio = std::stod(val);
            else if (key == "head_dim") c.head_dim = std::stoll(val);
            else if (key == "in_channels") c.in_channels = std::stoll(val);
            else if (key == "input_h") c.input_h = std::stoll(val);
            else if (key == "input_t") c.input_t = std::stoll(val);
            else if (key == "input_w") c.input_w = std::stoll(val);
            else if (key == "local_window") c.local_window = std::stoll(val);
            else if (key == "stage_depths") c.stage_depths = parse4(val, key);
            else if (key == "stage_dims") c.stage_dims = parse4(val, key);
            else throw FormatError("unknown model config key '" + key + "'");
        } catch (const Error&) {
            throw;
        } catch (const std::exception&) {
            throw FormatError("bad value for model config key '" + key + "': " + val);
        }
        ++seen;
    }
    if (seen != 11) throw FormatError("model config text must define all 11 keys");
    c.validate();
    return c;
}

namespace {

void put_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& in, const std::string& what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError(what + ": truncated");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

}  // namespace

void save_weights(const std::string& path, EchoCoTrNet& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write weights " + path);
    out.write("ECW1", 4);
    const std::string cfg = model.cfg.canonical_text();
    put_u32(out, uint32_t(cfg.size()));
    out.write(cfg.data(), std::streamsize(cfg.size()));
    for (auto& [name, tensor] : model.named_state()) {
        put_u32(out, uint32_t(name.size()));
        out.write(name.data(), std::streamsize(name.size()));
        save_tensor(out, *tensor);
    }
    if (!out) throw IoError("failed writing weights " + path);
}

EchoCoTrNet load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open weights " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "ECW1", 4) != 0)
        throw FormatError(path + ": bad magic, not an ECW1 file");
    const uint32_t cfg_len = get_u32(in, path);
    std::string cfg_text(cfg_len, '\0');
    if (!in.read(cfg_text.data(), cfg_len)) throw FormatError(path + ": truncated config block");
    EchoCoTrNet model(ModelConfig::parse_text(cfg_text));
    for (auto& [name, tensor] : model.named_state()) {
        const uint32_t name_len = get_u32(in, path);
        std::string stored(name_len, '\0');
        if (!in.read(stored.data(), name_len)) throw FormatError(path + ": truncated tensor name");
        if (stored != name)
            throw FormatError(path + ": tensor order mismatch, expected " + name + " found " +
                              stored);
        TensorT<float> loaded = load_tensor<float>(in);
        if (loaded.shape != tensor->shape)
            throw FormatError(path + ": shape mismatch for " + name + ": file has " +
                              shape_str(loaded.shape) + ", model needs " +
                              shape_str(tensor->shape));
        *tensor->data = *loaded.data;
    }
    if (in.peek() != std::char_traits<char>::eof())
        throw FormatError(path + ": trailing bytes after the last tensor");
    return model;
}

}  // namespace echocotr
