#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "echocotr/data.hpp"
#include "echocotr/metrics.hpp"
#include "echocotr/model.hpp"
#include "echocotr/sampling.hpp"

namespace echocotr {

struct TrainConfig {
    int64_t epochs = 45;
    int64_t batch_size = 25;
    double lr = 1e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    uint64_t seed = 0;
    int64_t workers = 1;
    float norm_mean = 0.5f, norm_std = 0.25f;
    SampleSpec spec;
    ModelConfig model;

    void validate() const;
};

/// Adam with decoupled weight decay. Parameters with no gradient buffer yet
/// still receive the decay term.
template <typename T>
class AdamWT {
public:
    AdamWT(std::vector<TensorT<T>*> params, double lr, double weight_decay, double beta1 = 0.9,
           double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2),
          eps_(eps) {
        if (!(lr_ > 0.0) || !(eps_ > 0.0)) throw ConfigError("adamw: lr and eps must be > 0");
        if (b1_ < 0.0 || b1_ >= 1.0 || b2_ < 0.0 || b2_ >= 1.0)
            throw ConfigError("adamw: betas must be in [0,1)");
        if (wd_ < 0.0) throw ConfigError("adamw: weight decay must be >= 0");
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (TensorT<T>* p : params_) {
            m_.emplace_back(static_cast<size_t>(p->size()), T(0));
            v_.emplace_back(static_cast<size_t>(p->size()), T(0));
        }
    }

    void step() {
        ++t_;
        const T bc1 = static_cast<T>(1.0 - std::pow(b1_, double(t_)));
        const T bc2 = static_cast<T>(1.0 - std::pow(b2_, double(t_)));
        for (size_t i = 0; i < params_.size(); ++i) {
            TensorT<T>& p = *params_[i];
            const T* g = p.grad_ptr();
            T* w = p.ptr();
            T* m = m_[i].data();
            T* v = v_[i].data();
            for (int64_t j = 0; j < p.size(); ++j) {
                const T gj = g ? g[j] : T(0);
                w[j] -= static_cast<T>(lr_ * wd_) * w[j];  // decoupled decay
                m[j] = static_cast<T>(b1_) * m[j] + static_cast<T>(1.0 - b1_) * gj;
                v[j] = static_cast<T>(b2_) * v[j] + static_cast<T>(1.0 - b2_) * gj * gj;
                const T mhat = m[j] / bc1;
                const T vhat = v[j] / bc2;
                w[j] -= static_cast<T>(lr_) * mhat / (std::sqrt(vhat) + static_cast<T>(eps_));
            }
        }
    }

    void zero_grad() {
        for (TensorT<T>* p : params_) p->zero_grad();
    }

    int64_t step_count() const { return t_; }

private:
    std::vector<TensorT<T>*> params_;
    std::vector<std::vector<T>> m_, v_;
    double lr_, wd_, b1_, b2_, eps_;
    int64_t t_ = 0;
};

using AdamW = AdamWT<float>;

/// Maps a manifest record to its raw [0,1] video; pure and thread-safe.
using ClipProvider = std::function<VideoClip(const StudyRecord&)>;

ClipProvider file_clip_provider(const std::string& video_root);

struct EpochLog {
    int64_t epoch = 0;
    double train_loss = 0.0;
    MetricsReport val;
};

struct TrainResult {
    std::shared_ptr<EchoCoTrNet> model;
    std::vector<EpochLog> log;
    int64_t best_epoch = -1;  // -1 when epochs == 0
};

TrainResult train(const DatasetManifest& manifest, const ClipProvider& clips,
                  const TrainConfig& cfg);

struct Prediction {
    std::string file_name;
    double true_ef = 0.0;
    double pred_ef = 0.0;
};

struct EvalResult {
    MetricsReport metrics;
    std::vector<Prediction> predictions;
};

/// Deterministic: forces eval mode and Fixed(0) clip starts.
EvalResult evaluate(EchoCoTrNet& model, const std::vector<const StudyRecord*>& records,
                    const ClipProvider& clips, SampleSpec spec, int64_t batch_size = 8,
                    float norm_mean = 0.5f, float norm_std = 0.25f, int64_t workers = 1);

void write_epoch_log(const std::string& path, const std::vector<EpochLog>& log);
void write_predictions(const std::string& path, const std::vector<Prediction>& preds);

}  // namespace echocotr
