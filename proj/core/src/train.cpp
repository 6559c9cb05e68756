#include "echocotr/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>

namespace fs = std::filesystem;

namespace echocotr {

void TrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw ConfigError("betas must be in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("eps must be > 0");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (!(norm_std > 0.0f)) throw ConfigError("norm_std must be > 0");
    spec.validate();
    model.validate();
}

ClipProvider file_clip_provider(const std::string& video_root) {
    return [video_root](const StudyRecord& rec) {
        return load_video((fs::path(video_root) / rec.file_name).string());
    };
}

namespace {

// Deterministic regardless of the standard library: explicit Fisher-Yates.
void shuffle_ids(std::vector<int64_t>& ids, RngStream& rng) {
    for (int64_t i = int64_t(ids.size()) - 1; i > 0; --i)
        std::swap(ids[size_t(i)], ids[size_t(rng.uniform_int(0, i))]);
}

VideoClip build_clip(const StudyRecord& rec, const VideoClip& video, const SampleSpec& spec,
                     RngStream& rng) {
    switch (spec.mode) {
        case SampleMode::Uniform:
            return sample_uniform(video, spec, rng).clip;
        case SampleMode::EsEd:
            if (!rec.es_idx || !rec.ed_idx)
                throw ConfigError("record " + rec.file_name +
                                  " lacks ES/ED indices required by es_ed mode");
            return sample_es_ed(video, *rec.es_idx, *rec.ed_idx);
        case SampleMode::Mirrored: {
            if (!rec.es_idx || !rec.ed_idx)
                throw ConfigError("record " + rec.file_name +
                                  " lacks ES/ED indices required by mirrored mode");
            const int64_t cycle = std::abs(*rec.ed_idx - *rec.es_idx) + 1;
            const int64_t need = std::max(cycle, required_length(spec));
            VideoClip base = sample_mirrored(video, *rec.es_idx, *rec.ed_idx, need);
            return sample_uniform(base, spec, rng).clip;
        }
    }
    throw ConfigError("unhandled sample mode");
}

/// Builds [B,1,N,H,W] for the given records. Item rngs derive from
/// (seed, stream, epoch, item_id), so worker count cannot change the result.
TensorT<float> make_batch(const std::vector<const StudyRecord*>& recs,
                          const std::vector<int64_t>& item_ids, const ClipProvider& clips,
                          const SampleSpec& spec, uint64_t seed, const char* stream,
                          int64_t epoch, float mean, float stddev, int64_t workers) {
    const int64_t bsz = int64_t(recs.size());
    TensorT<float> batch;  // allocated once the first clip fixes N,H,W
    std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));

    auto run_range = [&](int64_t lo, int64_t hi, size_t slot) {
        try {
            for (int64_t i = lo; i < hi; ++i) {
                RngStream rng =
                    RngStream(seed, stream).substream(uint64_t(epoch)).substream(uint64_t(item_ids[size_t(i)]));
                const VideoClip video = clips(*recs[size_t(i)]);
                const VideoClip clip = normalize(build_clip(*recs[size_t(i)], video, spec, rng),
                                                 mean, stddev);
                if (clip.frames.shape != Shape{batch.shape[2], batch.shape[3], batch.shape[4]})
                    throw ShapeError("clip shape " + shape_str(clip.frames.shape) + " from " +
                                     recs[size_t(i)]->file_name + " does not match the batch");
                std::memcpy(batch.ptr() + i * clip.frames.size(), clip.frames.ptr(),
                            sizeof(float) * size_t(clip.frames.size()));
            }
        } catch (...) {
            errors[slot] = std::current_exception();
        }
    };

    {
        // First item sizes the batch tensor.
        RngStream rng = RngStream(seed, stream).substream(uint64_t(epoch)).substream(uint64_t(item_ids[0]));
        const VideoClip video = clips(*recs[0]);
        const VideoClip clip = normalize(build_clip(*recs[0], video, spec, rng), mean, stddev);
        batch = TensorT<float>({bsz, 1, clip.t(), clip.h(), clip.w()});
        std::memcpy(batch.ptr(), clip.frames.ptr(), sizeof(float) * size_t(clip.frames.size()));
    }

    const int64_t nthreads = std::min<int64_t>(workers, bsz - 1);
    if (nthreads <= 1) {
        run_range(1, bsz, 0);
    } else {
        std::vector<std::thread> pool;
        const int64_t chunk = (bsz - 1 + nthreads - 1) / nthreads;
        for (int64_t k = 0; k < nthreads; ++k) {
            const int64_t lo = 1 + k * chunk;
            const int64_t hi = std::min(bsz, lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back(run_range, lo, hi, size_t(k));
        }
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return batch;
}

}  // namespace

EvalResult evaluate(EchoCoTrNet& model, const std::vector<const StudyRecord*>& records,
                    const ClipProvider& clips, SampleSpec spec, int64_t batch_size,
                    float norm_mean, float norm_std, int64_t workers) {
    if (records.empty()) throw ConfigError("evaluation split is empty");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    SampleSpec s = spec.normalized();
    s.random_start = false;
    s.fixed_start = 0;

    const bool was_training = model.training;
    model.set_training(false);

    EvalResult out;
    std::vector<double> preds, targets;
    std::vector<int64_t> ids(records.size());
    std::iota(ids.begin(), ids.end(), 0);
    for (size_t off = 0; off < records.size(); off += size_t(batch_size)) {
        const size_t hi = std::min(records.size(), off + size_t(batch_size));
        const std::vector<const StudyRecord*> recs(records.begin() + off, records.begin() + hi);
        const std::vector<int64_t> batch_ids(ids.begin() + off, ids.begin() + hi);
        TensorT<float> x = make_batch(recs, batch_ids, clips, s, 0, "eval", 0, norm_mean,
                                      norm_std, workers);
        TensorT<float> y = model.forward(x);
        for (size_t i = 0; i < recs.size(); ++i) {
            out.predictions.push_back({recs[i]->file_name, recs[i]->ef, double(y[int64_t(i)])});
            preds.push_back(double(y[int64_t(i)]));
            targets.push_back(recs[i]->ef);
        }
    }
    out.metrics = compute_metrics(preds, targets);
    model.set_training(was_training);
    return out;
}

TrainResult train(const DatasetManifest& manifest, const ClipProvider& clips,
                  const TrainConfig& cfg) {
    cfg.validate();
    const SampleSpec spec = cfg.spec.normalized();
    const auto train_recs = manifest.split_records(Split::Train);
    const auto val_recs = manifest.split_records(Split::Val);
    if (train_recs.empty()) throw ConfigError("training split is empty");
    if (val_recs.empty()) throw ConfigError("validation split is empty");

    TrainResult out;
    out.model = std::make_shared<EchoCoTrNet>(cfg.model);
    EchoCoTrNet& model = *out.model;
    RngStream init_rng(cfg.seed, "init");
    model.init(init_rng);
    const std::vector<TensorT<float>*> params = model.parameters();
    for (TensorT<float>* p : params) p->requires_grad = true;
    AdamW opt(params, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps);

    const auto state = model.named_state();
    double best_mae = std::numeric_limits<double>::infinity();
    std::vector<std::vector<float>> best_state;
    int64_t step = 0;

    const int64_t n = int64_t(train_recs.size());
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        model.set_training(true);
        std::vector<int64_t> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        RngStream shuffle_rng = RngStream(cfg.seed, "shuffle").substream(uint64_t(epoch));
        shuffle_ids(order, shuffle_rng);

        double sq_sum = 0.0;
        for (int64_t off = 0; off < n; off += cfg.batch_size) {
            const int64_t bsz = std::min(cfg.batch_size, n - off);
            std::vector<const StudyRecord*> recs(static_cast<size_t>(bsz));
            std::vector<int64_t> ids(static_cast<size_t>(bsz));
            TensorT<float> y({bsz});
            for (int64_t i = 0; i < bsz; ++i) {
                ids[size_t(i)] = order[size_t(off + i)];
                recs[size_t(i)] = train_recs[size_t(ids[size_t(i)])];
                y.ptr()[i] = float(recs[size_t(i)]->ef);
            }
            TensorT<float> x = make_batch(recs, ids, clips, spec, cfg.seed, "sampling", epoch,
                                          cfg.norm_mean, cfg.norm_std, cfg.workers);
            Tape tape;
            RngStream drop_rng =
                RngStream(cfg.seed, "drop_path").substream(uint64_t(epoch)).substream(uint64_t(step));
            TensorT<float> pred = model.forward(x, &tape, &drop_rng);
            TensorT<float> loss = mse_loss(pred, y, &tape);
            opt.zero_grad();
            tape.backward(loss);
            opt.step();
            sq_sum += double(loss.item()) * double(bsz);
            ++step;
        }
        model.set_training(false);

        EpochLog log;
        log.epoch = epoch;
        log.train_loss = sq_sum / double(n);
        log.val = evaluate(model, val_recs, clips, spec, cfg.batch_size, cfg.norm_mean,
                           cfg.norm_std, cfg.workers)
                      .metrics;
        out.log.push_back(log);

        if (log.val.mae < best_mae) {
            best_mae = log.val.mae;
            out.best_epoch = epoch;
            best_state.clear();
            for (const auto& [name, t] : state) best_state.push_back(*t->data);
        }
    }

    if (out.best_epoch >= 0)
        for (size_t i = 0; i < state.size(); ++i) *state[i].second->data = best_state[i];
    return out;
}

namespace {

std::string fmt_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

void write_epoch_log(const std::string& path, const std::vector<EpochLog>& log) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write epoch log " + path);
    out << "epoch,train_loss,val_mae,val_rmse,val_r2\n";
    for (const EpochLog& e : log)
        out << e.epoch << ',' << fmt_g(e.train_loss) << ',' << fmt_g(e.val.mae) << ','
            << fmt_g(e.val.rmse) << ',' << (e.val.r2 ? fmt_g(*e.val.r2) : std::string()) << '\n';
    if (!out) throw IoError("failed writing epoch log " + path);
}

void write_predictions(const std::string& path, const std::vector<Prediction>& preds) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write predictions " + path);
    out << "file_name,true_ef,pred_ef\n";
    for (const Prediction& p : preds)
        out << p.file_name << ',' << fmt_g(p.true_ef) << ',' << fmt_g(p.pred_ef) << '\n';
    if (!out) throw IoError("failed writing predictions " + path);
}

}  // namespace echocotr
