#include "echocotr/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "echocotr/data.hpp"
#include "echocotr/flops.hpp"
#include "echocotr/model.hpp"
#include "echocotr/train.hpp"

namespace fs = std::filesystem;

namespace echocotr {
namespace {

// --- config-file layer: flat key=value lines, # comments, flags override ---

int64_t to_i64(const std::string& s, const std::string& key) {
    size_t pos = 0;
    long long v;
    try {
        v = std::stoll(s, &pos);
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "': bad integer '" + s + "'");
    }
    if (pos != s.size()) throw UsageError("config key '" + key + "': bad integer '" + s + "'");
    return v;
}

double to_f64(const std::string& s, const std::string& key) {
    size_t pos = 0;
    double v;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "': bad number '" + s + "'");
    }
    if (pos != s.size()) throw UsageError("config key '" + key + "': bad number '" + s + "'");
    return v;
}

std::array<int64_t, 4> to_arr4(const std::string& s, const std::string& key) {
    std::array<int64_t, 4> out{};
    std::stringstream ss(s);
    std::string part;
    size_t i = 0;
    while (std::getline(ss, part, ',')) {
        if (i >= 4) throw UsageError("config key '" + key + "' needs exactly 4 integers");
        out[i++] = to_i64(part, key);
    }
    if (i != 4) throw UsageError("config key '" + key + "' needs exactly 4 integers");
    return out;
}

std::string fmt_f64(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string fmt_arr4(const std::array<int64_t, 4>& a) {
    std::string s;
    for (size_t i = 0; i < 4; ++i) {
        if (i) s += ',';
        s += std::to_string(a[i]);
    }
    return s;
}

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

struct KeyBind {
    std::string key;
    CLI::Option* opt = nullptr;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;  // empty result = unset, omitted from the echo
};

struct CmdKeys {
    std::vector<KeyBind> binds;

    std::string valid_keys() const {
        std::string s;
        for (const KeyBind& b : binds) {
            if (!s.empty()) s += ", ";
            s += b.key;
        }
        return s;
    }

    void apply_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config file " + path);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const size_t hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            line = trim(line);
            if (line.empty()) continue;
            const size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
            const std::string key = trim(line.substr(0, eq));
            const std::string val = trim(line.substr(eq + 1));
            auto it = std::find_if(binds.begin(), binds.end(),
                                   [&](const KeyBind& b) { return b.key == key; });
            if (it == binds.end())
                throw UsageError(path + ":" + std::to_string(lineno) + ": unknown config key '" +
                                 key + "'; valid keys: " + valid_keys());
            if (val.empty()) continue;                   // empty = keep default
            if (it->opt && it->opt->count() > 0) continue;  // flags beat the file
            it->set(val);
        }
    }

    void write_resolved(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write resolved config " + path);
        out << "# resolved run configuration; reusable via --config\n";
        for (const KeyBind& b : binds) {
            const std::string v = b.get();
            if (!v.empty()) out << b.key << '=' << v << '\n';
        }
        if (!out) throw IoError("failed writing resolved config " + path);
    }
};

std::string key_of(const std::string& flag) {
    std::string k = flag.substr(flag.find_first_not_of('-'));
    std::replace(k.begin(), k.end(), '-', '_');
    return k;
}

void bind_i64(CmdKeys& keys, CLI::App* cmd, const std::string& flag, int64_t& ref,
              const std::string& desc) {
    const std::string key = key_of(flag);
    CLI::Option* o = cmd->add_option(flag, ref, desc);
    keys.binds.push_back({key, o, [&ref, key](const std::string& v) { ref = to_i64(v, key); },
                          [&ref] { return std::to_string(ref); }});
}

void bind_f64(CmdKeys& keys, CLI::App* cmd, const std::string& flag, double& ref,
              const std::string& desc) {
    const std::string key = key_of(flag);
    CLI::Option* o = cmd->add_option(flag, ref, desc);
    keys.binds.push_back({key, o, [&ref, key](const std::string& v) { ref = to_f64(v, key); },
                          [&ref] { return fmt_f64(ref); }});
}

void bind_str(CmdKeys& keys, CLI::App* cmd, const std::string& flag, std::string& ref,
              const std::string& desc) {
    const std::string key = key_of(flag);
    CLI::Option* o = cmd->add_option(flag, ref, desc);
    keys.binds.push_back({key, o, [&ref](const std::string& v) { ref = v; },
                          [&ref] { return ref; }});
}

// Sentinel-aware 4-int list ({0,0,0,0} = unset, omitted from the echo).
void bind_arr4(CmdKeys& keys, CLI::App* cmd, const std::string& flag,
               std::array<int64_t, 4>& ref, const std::string& desc) {
    const std::string key = key_of(flag);
    auto setter = [&ref, key](const std::string& v) { ref = to_arr4(v, key); };
    CLI::Option* o = cmd->add_option_function<std::string>(flag, setter, desc);
    keys.binds.push_back({key, o, setter, [&ref] {
                              return ref == std::array<int64_t, 4>{} ? std::string()
                                                                     : fmt_arr4(ref);
                          }});
}

// --- shared option groups ---

struct ModelOpts {
    std::string preset = "S";
    std::array<int64_t, 4> depths{}, dims{};  // all-zero = use preset
    int64_t head_dim = -1;
    double drop_path = -1.0;
};

void add_model_opts(CmdKeys& keys, CLI::App* cmd, ModelOpts& m) {
    bind_str(keys, cmd, "--preset", m.preset, "model preset: S or B");
    bind_arr4(keys, cmd, "--stage-depths", m.depths, "blocks per stage, e.g. 1,1,1,1");
    bind_arr4(keys, cmd, "--stage-dims", m.dims, "channel widths per stage");
    bind_i64(keys, cmd, "--head-dim", m.head_dim, "attention head width (-1 = preset)");
    bind_f64(keys, cmd, "--drop-path", m.drop_path, "max drop-path rate (-1 = preset)");
}

ModelConfig build_model_config(const ModelOpts& m, int64_t frames, int64_t h, int64_t w) {
    ModelConfig cfg = ModelConfig::preset(m.preset);
    if (m.depths != std::array<int64_t, 4>{}) cfg.stage_depths = m.depths;
    if (m.dims != std::array<int64_t, 4>{}) cfg.stage_dims = m.dims;
    if (m.head_dim > 0) cfg.head_dim = m.head_dim;
    if (m.drop_path >= 0.0) cfg.drop_path_max = m.drop_path;
    cfg.input_t = frames;
    cfg.input_h = h;
    cfg.input_w = w;
    cfg.validate();
    return cfg;
}

struct SpecOpts {
    int64_t frames = 36, freq = 4, start = -1;  // start -1 = random
    std::string mode = "uniform";
};

void add_spec_opts(CmdKeys& keys, CLI::App* cmd, SpecOpts& s) {
    bind_i64(keys, cmd, "--frames", s.frames, "frames per clip (N)");
    bind_i64(keys, cmd, "--freq", s.freq, "sampling frequency (f)");
    bind_str(keys, cmd, "--mode", s.mode, "sampling mode: uniform, es_ed, mirrored");
    bind_i64(keys, cmd, "--start", s.start, "fixed clip start (-1 = random)");
}

SampleSpec build_spec(const SpecOpts& s) {
    SampleSpec spec;
    spec.num_frames = s.frames;
    spec.frequency = s.freq;
    spec.mode = sample_mode_from_string(s.mode);
    spec.random_start = s.start < 0;
    spec.fixed_start = std::max<int64_t>(s.start, 0);
    return spec.normalized();
}

void report_rejected(const DatasetManifest& m) {
    if (m.rejected.empty()) return;
    std::fprintf(stderr, "rejected %zu manifest row(s):\n", m.rejected.size());
    const size_t show = std::min<size_t>(m.rejected.size(), 5);
    for (size_t i = 0; i < show; ++i)
        std::fprintf(stderr, "  line %lld (%s): %s\n",
                     static_cast<long long>(m.rejected[i].line), m.rejected[i].file_name.c_str(),
                     m.rejected[i].reason.c_str());
    if (show < m.rejected.size())
        std::fprintf(stderr, "  ... and %zu more\n", m.rejected.size() - show);
}

DatasetManifest load_dataset(const std::string& manifest_path, const std::string& es_ed_path,
                             std::string& video_root) {
    if (manifest_path.empty()) throw UsageError("--manifest is required");
    DatasetManifest m = load_manifest(manifest_path);
    if (!es_ed_path.empty()) attach_es_ed(m, es_ed_path);
    report_rejected(m);
    if (video_root.empty()) video_root = m.video_root;
    return m;
}

std::string format_metrics(const MetricsReport& r) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "MAE=%.6g RMSE=%.6g R2=%s n=%lld", r.mae, r.rmse,
                  r.r2 ? fmt_f64(*r.r2).c_str() : "na", static_cast<long long>(r.n));
    return buf;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"spatiotemporal video regression for ejection-fraction estimation"};
    app.require_subcommand(1);

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "generate a synthetic echo-like dataset");
    CmdKeys synth_keys;
    struct {
        std::string out, config;
        int64_t count = 100, seed = 0, size = 32, frames_per_cycle = 16, cycles = 1;
        double ef_lo = 15.0, ef_hi = 85.0, noise = 0.02, fps = 50.0;
    } so;
    bind_str(synth_keys, synth, "--out", so.out, "output directory");
    bind_i64(synth_keys, synth, "--count", so.count, "number of videos");
    bind_i64(synth_keys, synth, "--seed", so.seed, "rng seed");
    bind_i64(synth_keys, synth, "--size", so.size, "frame height = width");
    bind_i64(synth_keys, synth, "--frames-per-cycle", so.frames_per_cycle, "frames per cycle");
    bind_i64(synth_keys, synth, "--cycles", so.cycles, "cardiac cycles per video");
    bind_f64(synth_keys, synth, "--ef-lo", so.ef_lo, "EF range lower end");
    bind_f64(synth_keys, synth, "--ef-hi", so.ef_hi, "EF range upper end");
    bind_f64(synth_keys, synth, "--noise", so.noise, "gaussian pixel noise sigma");
    bind_f64(synth_keys, synth, "--fps", so.fps, "frames per second metadata");
    synth->add_option("--config", so.config, "key=value config file");
    synth->callback([&] {
        if (!so.config.empty()) synth_keys.apply_file(so.config);
        if (so.out.empty()) throw UsageError("--out is required");
        SynthSpec sp;
        sp.height = sp.width = so.size;
        sp.frames_per_cycle = so.frames_per_cycle;
        sp.num_cycles = so.cycles;
        sp.ef_lo = so.ef_lo;
        sp.ef_hi = so.ef_hi;
        sp.noise_sigma = so.noise;
        sp.fps = so.fps;
        synth_write(synth_generate(so.count, sp, uint64_t(so.seed)), so.out);
        std::printf("wrote %lld videos to %s\n", static_cast<long long>(so.count),
                    so.out.c_str());
    });

    // ---- train ----
    auto* tr = app.add_subcommand("train", "train a model");
    CmdKeys train_keys;
    struct {
        std::string config, manifest, video_root, es_ed, out;
        int64_t batch = 25, epochs = 45, seed = 0, workers = 1;
        double lr = 1e-4, wd = 1e-4;
        SpecOpts spec;
        ModelOpts model;
    } to;
    bind_str(train_keys, tr, "--manifest", to.manifest, "dataset manifest CSV");
    bind_str(train_keys, tr, "--video-root", to.video_root, "video directory (default: manifest dir)");
    bind_str(train_keys, tr, "--es-ed", to.es_ed, "ES/ED sidecar CSV");
    bind_str(train_keys, tr, "--out", to.out, "output directory");
    bind_i64(train_keys, tr, "--batch", to.batch, "batch size");
    bind_i64(train_keys, tr, "--epochs", to.epochs, "training epochs");
    bind_f64(train_keys, tr, "--lr", to.lr, "learning rate");
    bind_f64(train_keys, tr, "--wd", to.wd, "weight decay");
    bind_i64(train_keys, tr, "--seed", to.seed, "rng seed");
    bind_i64(train_keys, tr, "--workers", to.workers, "data-loading threads");
    add_spec_opts(train_keys, tr, to.spec);
    add_model_opts(train_keys, tr, to.model);
    tr->add_option("--config", to.config, "key=value config file");
    tr->callback([&] {
        if (!to.config.empty()) train_keys.apply_file(to.config);
        if (to.out.empty()) throw UsageError("--out is required");
        DatasetManifest manifest = load_dataset(to.manifest, to.es_ed, to.video_root);

        TrainConfig cfg;
        cfg.epochs = to.epochs;
        cfg.batch_size = to.batch;
        cfg.lr = to.lr;
        cfg.weight_decay = to.wd;
        cfg.seed = uint64_t(to.seed);
        cfg.workers = to.workers;
        cfg.spec = build_spec(to.spec);
        const auto train_recs = manifest.split_records(Split::Train);
        const int64_t in_h = train_recs.empty() ? 112 : train_recs[0]->frame_height;
        const int64_t in_w = train_recs.empty() ? 112 : train_recs[0]->frame_width;
        cfg.model = build_model_config(to.model, cfg.spec.num_frames, in_h, in_w);

        fs::create_directories(to.out);
        train_keys.write_resolved((fs::path(to.out) / "resolved.cfg").string());
        TrainResult res = train(manifest, file_clip_provider(to.video_root), cfg);
        save_weights((fs::path(to.out) / "weights.ecw").string(), *res.model);
        write_epoch_log((fs::path(to.out) / "train_log.csv").string(), res.log);
        if (res.log.empty())
            std::printf("trained 0 epochs; initialized weights saved\n");
        else
            std::printf("best epoch %lld: %s\n", static_cast<long long>(res.best_epoch),
                        format_metrics(res.log[size_t(res.best_epoch)].val).c_str());
    });

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "evaluate weights on a manifest split");
    CmdKeys eval_keys;
    struct {
        std::string config, weights, manifest, video_root, es_ed, out = ".", split = "test";
        int64_t batch = 25, workers = 1;
        SpecOpts spec;
    } eo;
    bind_str(eval_keys, ev, "--weights", eo.weights, "ECW1 weights file");
    bind_str(eval_keys, ev, "--manifest", eo.manifest, "dataset manifest CSV");
    bind_str(eval_keys, ev, "--video-root", eo.video_root, "video directory (default: manifest dir)");
    bind_str(eval_keys, ev, "--es-ed", eo.es_ed, "ES/ED sidecar CSV");
    bind_str(eval_keys, ev, "--out", eo.out, "output directory for predictions.csv");
    bind_str(eval_keys, ev, "--split", eo.split, "manifest split: train, val or test");
    bind_i64(eval_keys, ev, "--batch", eo.batch, "evaluation batch size");
    bind_i64(eval_keys, ev, "--workers", eo.workers, "data-loading threads");
    add_spec_opts(eval_keys, ev, eo.spec);
    ev->add_option("--config", eo.config, "key=value config file");
    ev->callback([&] {
        if (!eo.config.empty()) eval_keys.apply_file(eo.config);
        if (eo.weights.empty()) throw UsageError("--weights is required");
        EchoCoTrNet model = load_weights(eo.weights);
        DatasetManifest manifest = load_dataset(eo.manifest, eo.es_ed, eo.video_root);
        const Split split = split_from_string(eo.split);
        const auto recs = manifest.split_records(split);
        if (recs.empty())
            throw DataError("manifest has no records in split '" + eo.split + "'");
        EvalResult r = evaluate(model, recs, file_clip_provider(eo.video_root),
                                build_spec(eo.spec), eo.batch, 0.5f, 0.25f, eo.workers);
        fs::create_directories(eo.out);
        write_predictions((fs::path(eo.out) / "predictions.csv").string(), r.predictions);
        std::printf("%s\n", format_metrics(r.metrics).c_str());
    });

    // ---- flops ----
    auto* fl = app.add_subcommand("flops", "count multiply-accumulates for one sample");
    CmdKeys flops_keys;
    struct {
        std::string config;
        int64_t frames = 36, size = 112;
        ModelOpts model;
    } fo;
    bind_i64(flops_keys, fl, "--frames", fo.frames, "input frames");
    bind_i64(flops_keys, fl, "--size", fo.size, "input height = width");
    add_model_opts(flops_keys, fl, fo.model);
    fl->add_option("--config", fo.config, "key=value config file");
    fl->callback([&] {
        if (!fo.config.empty()) flops_keys.apply_file(fo.config);
        const ModelConfig cfg = build_model_config(fo.model, fo.frames, fo.size, fo.size);
        const int64_t n = count_flops(cfg);
        std::printf("%s %lldx%lldx%lld %lld\n", fo.model.preset.c_str(),
                    static_cast<long long>(fo.frames), static_cast<long long>(fo.size),
                    static_cast<long long>(fo.size), static_cast<long long>(n));
    });

    // ---- sample ----
    auto* sa = app.add_subcommand("sample", "dump the frame indices a spec would select");
    CmdKeys sample_keys;
    struct {
        std::string config, video;
        int64_t seed = 0, es = -1, ed = -1, target_len = -1;
        SpecOpts spec;
    } po;
    bind_str(sample_keys, sa, "--video", po.video, "ECV1 video file");
    bind_i64(sample_keys, sa, "--seed", po.seed, "rng seed");
    bind_i64(sample_keys, sa, "--es", po.es, "ES frame index (es_ed/mirrored modes)");
    bind_i64(sample_keys, sa, "--ed", po.ed, "ED frame index (es_ed/mirrored modes)");
    bind_i64(sample_keys, sa, "--target-len", po.target_len,
             "mirrored output length (-1 = required length)");
    add_spec_opts(sample_keys, sa, po.spec);
    sa->add_option("--config", po.config, "key=value config file");
    sa->callback([&] {
        if (!po.config.empty()) sample_keys.apply_file(po.config);
        if (po.video.empty()) throw UsageError("--video is required");
        const VideoClip video = load_video(po.video);
        const SampleSpec spec = build_spec(po.spec);
        auto emit = [&](int64_t start, int64_t f, const std::vector<int64_t>& idx) {
            std::string line = video.source_id + ',' + std::to_string(start) + ',' +
                               std::to_string(f) + ',' + std::to_string(int64_t(idx.size()));
            for (int64_t i : idx) line += ',' + std::to_string(i);
            std::printf("%s\n", line.c_str());
        };
        switch (spec.mode) {
            case SampleMode::Uniform: {
                RngStream rng(uint64_t(po.seed), "sampling");
                const ClipSample cs = sample_uniform(video, spec, rng);
                emit(cs.start, spec.frequency, cs.indices);
                if (cs.padded_from)
                    std::printf("# padded_from=%lld\n", static_cast<long long>(*cs.padded_from));
                break;
            }
            case SampleMode::EsEd: {
                if (po.es < 0 || po.ed < 0)
                    throw UsageError("--es and --ed are required for es_ed mode");
                sample_es_ed(video, po.es, po.ed);  // validates
                const int64_t lo = std::min(po.es, po.ed), hi = std::max(po.es, po.ed);
                emit(lo, spec.frequency, {lo, hi});
                break;
            }
            case SampleMode::Mirrored: {
                if (po.es < 0 || po.ed < 0)
                    throw UsageError("--es and --ed are required for mirrored mode");
                const int64_t first = std::min(po.es, po.ed);
                const int64_t cycle = std::max(po.es, po.ed) - first + 1;
                const int64_t want = po.target_len > 0 ? po.target_len : required_length(spec);
                std::vector<int64_t> idx = mirrored_indices(cycle, want);
                for (int64_t& i : idx) i += first;
                emit(0, spec.frequency, idx);
                break;
            }
        }
    });

    try {
        app.parse(argc, argv);
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}

}  // namespace echocotr
