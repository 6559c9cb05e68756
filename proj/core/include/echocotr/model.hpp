#pragma once

#include <array>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "echocotr/conv.hpp"
#include "echocotr/ops.hpp"

namespace echocotr {

struct ModelConfig {
    std::array<int64_t, 4> stage_depths{3, 4, 8, 3};
    std::array<int64_t, 4> stage_dims{64, 128, 320, 512};
    int64_t head_dim = 64;
    double ffn_ratio = 4.0;
    double drop_path_max = 0.1;
    int64_t dpe_kernel = 3;
    int64_t local_window = 5;
    int64_t in_channels = 1;
    int64_t input_t = 36, input_h = 112, input_w = 112;

    void validate() const;
    static ModelConfig preset(const std::string& name);  // "S" or "B"
    std::string canonical_text() const;
    static ModelConfig parse_text(const std::string& text);
    bool operator==(const ModelConfig&) const = default;

    int64_t ffn_hidden(int64_t c) const { return int64_t(std::llround(ffn_ratio * double(c))); }
};

template <typename T>
struct LinearLayerT {
    TensorT<T> w, b;  // w [out,in]
    LinearLayerT(int64_t in_dim, int64_t out_dim)
        : w(TensorT<T>::zeros({out_dim, in_dim})), b(TensorT<T>::zeros({out_dim})) {}
    TensorT<T> forward(const TensorT<T>& x, TapeT<T>* tape) const {
        return linear(x, w, &b, tape);
    }
};

template <typename T>
struct Conv3dLayerT {
    TensorT<T> w, b;
    Dims3 stride{1, 1, 1}, padding{0, 0, 0};
    int64_t groups = 1;
    Conv3dLayerT(int64_t cin, int64_t cout, Dims3 kernel, Dims3 stride_, Dims3 padding_,
                 int64_t groups_)
        : w(TensorT<T>::zeros({cout, cin / groups_, kernel[0], kernel[1], kernel[2]})),
          b(TensorT<T>::zeros({cout})),
          stride(stride_),
          padding(padding_),
          groups(groups_) {}
    TensorT<T> forward(const TensorT<T>& x, TapeT<T>* tape) const {
        return conv3d(x, w, &b, stride, padding, groups, tape);
    }
};

template <typename T>
struct LayerNormLayerT {
    TensorT<T> g, b;
    explicit LayerNormLayerT(int64_t dim)
        : g(TensorT<T>::ones({dim})), b(TensorT<T>::zeros({dim})) {}
    TensorT<T> forward(const TensorT<T>& x, TapeT<T>* tape) const {
        return layer_norm(x, g, b, T(1e-5), tape);
    }
};

// [N,C,T,H,W] <-> [N, T*H*W, C]
template <typename T>
TensorT<T> to_tokens(const TensorT<T>& x, TapeT<T>* tape) {
    auto flat = reshape(x, {x.shape[0], x.shape[1], x.shape[2] * x.shape[3] * x.shape[4]}, tape);
    return transpose_axes(flat, {0, 2, 1}, tape);
}

template <typename T>
TensorT<T> from_tokens(const TensorT<T>& tok, int64_t t, int64_t h, int64_t w, TapeT<T>* tape) {
    auto ct = transpose_axes(tok, {0, 2, 1}, tape);  // [N,C,L]
    return reshape(ct, {tok.shape[0], tok.shape[2], t, h, w}, tape);
}

/// Embedding convolution followed by token-wise layer norm. The first stage
/// uses kernel (3,4,4) stride (2,4,4) pad (1,0,0); later stages (1,2,2)/(1,2,2).
template <typename T>
struct PatchEmbedT {
    Conv3dLayerT<T> conv;
    LayerNormLayerT<T> norm;
    bool first;

    PatchEmbedT(int64_t cin, int64_t cout, bool first_)
        : conv(cin, cout, first_ ? Dims3{3, 4, 4} : Dims3{1, 2, 2},
               first_ ? Dims3{2, 4, 4} : Dims3{1, 2, 2},
               first_ ? Dims3{1, 0, 0} : Dims3{0, 0, 0}, 1),
          norm(cout),
          first(first_) {}

    TensorT<T> forward(const TensorT<T>& x, TapeT<T>* tape) const {
        if (first) {
            if (x.shape[3] < 4 || x.shape[4] < 4)
                throw ConfigError("patch embed needs height and width >= 4, got " +
                                  shape_str(x.shape));
            if (x.shape[2] < 2)
                throw ShapeError("patch embed needs at least 2 frames, got " + shape_str(x.shape));
        }
        auto y = conv.forward(x, tape);
        const int64_t t = y.shape[2], h = y.shape[3], w = y.shape[4];
        return from_tokens(norm.forward(to_tokens(y, tape), tape), t, h, w, tape);
    }
};

/// DPE + local MHRA (pointwise-depthwise-pointwise with a BN pre-norm) + FFN.
template <typename T>
struct LocalBlockT {
    Conv3dLayerT<T> dpe;
    BatchNorm3dT<T> bn1;
    Conv3dLayerT<T> pw1, dw, pw2;
    BatchNorm3dT<T> bn2;
    Conv3dLayerT<T> ffn1, ffn2;
    double drop_rate = 0.0;

    LocalBlockT(int64_t c, int64_t dpe_k, int64_t win, int64_t hidden)
        : dpe(c, c, {dpe_k, dpe_k, dpe_k}, {1, 1, 1}, {dpe_k / 2, dpe_k / 2, dpe_k / 2}, c),
          bn1(c),
          pw1(c, c, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, 1),
          dw(c, c, {win, win, win}, {1, 1, 1}, {win / 2, win / 2, win / 2}, c),
          pw2(c, c, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, 1),
          bn2(c),
          ffn1(c, hidden, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, 1),
          ffn2(hidden, c, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, 1) {}

    TensorT<T> forward(const TensorT<T>& x_in, bool training, RngStream& drop_rng,
                       TapeT<T>* tape) {
        auto x = add(x_in, dpe.forward(x_in, tape), tape);
        {
            auto h = batch_norm3d(x, bn1, training, tape);
            h = pw2.forward(dw.forward(pw1.forward(h, tape), tape), tape);
            x = add(x, drop_path(h, drop_rate, training, drop_rng, tape), tape);
        }
        {
            auto h = batch_norm3d(x, bn2, training, tape);
            h = ffn2.forward(gelu(ffn1.forward(h, tape), tape), tape);
            x = add(x, drop_path(h, drop_rate, training, drop_rng, tape), tape);
        }
        return x;
    }
};

/// DPE + global MHRA (multi-head self-attention over all T*H*W tokens with an
/// LN pre-norm) + FFN.
template <typename T>
struct GlobalBlockT {
    Conv3dLayerT<T> dpe;
    LayerNormLayerT<T> ln1;
    LinearLayerT<T> wq, wk, wv, wo;
    LayerNormLayerT<T> ln2;
    LinearLayerT<T> ffn1, ffn2;
    int64_t heads, head_dim;
    double drop_rate = 0.0;

    GlobalBlockT(int64_t c, int64_t dpe_k, int64_t head_dim_, int64_t hidden)
        : dpe(c, c, {dpe_k, dpe_k, dpe_k}, {1, 1, 1}, {dpe_k / 2, dpe_k / 2, dpe_k / 2}, c),
          ln1(c),
          wq(c, c),
          wk(c, c),
          wv(c, c),
          wo(c, c),
          ln2(c),
          ffn1(c, hidden),
          ffn2(hidden, c),
          heads(c / head_dim_),
          head_dim(head_dim_) {}

    // tok [N,L,C] -> [N,L,C]; scaled dot-product over all L tokens.
    TensorT<T> attention(const TensorT<T>& tok, TapeT<T>* tape) const {
        const int64_t n = tok.shape[0], l = tok.shape[1], c = tok.shape[2];
        auto split = [&](const TensorT<T>& p) {
            return transpose_axes(reshape(p, {n, l, heads, head_dim}, tape), {0, 2, 1, 3}, tape);
        };
        auto q = split(wq.forward(tok, tape));
        auto k = split(wk.forward(tok, tape));
        auto v = split(wv.forward(tok, tape));
        auto scores = matmul(q, transpose_axes(k, {0, 1, 3, 2}, tape), tape);
        scores = scale(scores, static_cast<T>(1.0 / std::sqrt(double(head_dim))), tape);
        auto ctx = matmul(softmax(scores, tape), v, tape);              // [N,h,L,hd]
        ctx = reshape(transpose_axes(ctx, {0, 2, 1, 3}, tape), {n, l, c}, tape);
        return wo.forward(ctx, tape);
    }

    TensorT<T> forward(const TensorT<T>& x_in, bool training, RngStream& drop_rng,
                       TapeT<T>* tape) const {
        auto x = add(x_in, dpe.forward(x_in, tape), tape);
        const int64_t t = x.shape[2], h = x.shape[3], w = x.shape[4];
        auto tok = to_tokens(x, tape);
        tok = add(tok,
                  drop_path(attention(ln1.forward(tok, tape), tape), drop_rate, training,
                            drop_rng, tape),
                  tape);
        auto f = ln2.forward(tok, tape);
        f = ffn2.forward(gelu(ffn1.forward(f, tape), tape), tape);
        tok = add(tok, drop_path(f, drop_rate, training, drop_rng, tape), tape);
        return from_tokens(tok, t, h, w, tape);
    }
};

template <typename T>
struct EchoCoTrNetT {
    ModelConfig cfg;
    PatchEmbedT<T> embed1;
    PatchEmbedT<T> down2, down3, down4;
    std::vector<LocalBlockT<T>> stage1, stage2;
    std::vector<GlobalBlockT<T>> stage3, stage4;
    LayerNormLayerT<T> final_norm;
    LinearLayerT<T> head;
    bool training = false;

    explicit EchoCoTrNetT(const ModelConfig& c)
        : cfg((c.validate(), c)),
          embed1(c.in_channels, c.stage_dims[0], true),
          down2(c.stage_dims[0], c.stage_dims[1], false),
          down3(c.stage_dims[1], c.stage_dims[2], false),
          down4(c.stage_dims[2], c.stage_dims[3], false),
          final_norm(c.stage_dims[3]),
          head(c.stage_dims[3], 1) {
        const int64_t total =
            c.stage_depths[0] + c.stage_depths[1] + c.stage_depths[2] + c.stage_depths[3];
        int64_t idx = 0;
        auto rate = [&](int64_t i) {
            return total > 1 ? c.drop_path_max * double(i) / double(total - 1) : 0.0;
        };
        for (int64_t i = 0; i < c.stage_depths[0]; ++i, ++idx) {
            stage1.emplace_back(c.stage_dims[0], c.dpe_kernel, c.local_window,
                                c.ffn_hidden(c.stage_dims[0]));
            stage1.back().drop_rate = rate(idx);
        }
        for (int64_t i = 0; i < c.stage_depths[1]; ++i, ++idx) {
            stage2.emplace_back(c.stage_dims[1], c.dpe_kernel, c.local_window,
                                c.ffn_hidden(c.stage_dims[1]));
            stage2.back().drop_rate = rate(idx);
        }
        for (int64_t i = 0; i < c.stage_depths[2]; ++i, ++idx) {
            stage3.emplace_back(c.stage_dims[2], c.dpe_kernel, c.head_dim,
                                c.ffn_hidden(c.stage_dims[2]));
            stage3.back().drop_rate = rate(idx);
        }
        for (int64_t i = 0; i < c.stage_depths[3]; ++i, ++idx) {
            stage4.emplace_back(c.stage_dims[3], c.dpe_kernel, c.head_dim,
                                c.ffn_hidden(c.stage_dims[3]));
            stage4.back().drop_rate = rate(idx);
        }
    }

    /// Truncated-normal (sigma 0.02) everywhere except: DPE kernels and each
    /// residual branch's final projection start at zero (blocks ~ identity),
    /// and all biases start at zero.
    void init(RngStream& rng) {
        for (auto& [name, t] : named_state()) {
            const bool is_weight = name.size() > 2 && name.rfind(".w") == name.size() - 2;
            if (!is_weight) continue;
            const bool zero_init = name.find("dpe.w") != std::string::npos ||
                                   name.find("pw2.w") != std::string::npos ||
                                   name.find("wo.w") != std::string::npos ||
                                   name.find("ffn2.w") != std::string::npos;
            if (zero_init) continue;
            for (int64_t i = 0; i < t->size(); ++i)
                t->ptr()[i] = static_cast<T>(rng.trunc_normal(0.02));
        }
    }

    TensorT<T> forward(const TensorT<T>& x, TapeT<T>* tape = nullptr,
                       RngStream* drop_rng = nullptr) {
        if (x.rank() != 5) throw ShapeError("model input must be [N,1,T,H,W]");
        if (x.shape[1] != cfg.in_channels)
            throw ShapeError("model expects " + std::to_string(cfg.in_channels) +
                             " input channel(s), got " + std::to_string(x.shape[1]));
        if (training && !drop_rng)
            throw ConfigError("training forward needs a drop_path rng stream");
        T peak = T(0);
        for (int64_t i = 0; i < x.size(); ++i) peak = std::max(peak, std::abs(x[i]));
        if (peak > T(16))
            std::fprintf(stderr, "warning: input magnitude %.3g looks unnormalized\n",
                         double(peak));
        RngStream dummy(0);
        RngStream& dr = drop_rng ? *drop_rng : dummy;

        auto y = embed1.forward(x, tape);
        for (auto& b : stage1) y = b.forward(y, training, dr, tape);
        y = down2.forward(y, tape);
        for (auto& b : stage2) y = b.forward(y, training, dr, tape);
        y = down3.forward(y, tape);
        for (auto& b : stage3) y = b.forward(y, training, dr, tape);
        y = down4.forward(y, tape);
        for (auto& b : stage4) y = b.forward(y, training, dr, tape);

        auto tok = to_tokens(y, tape);                        // [N,L,C]
        auto pooled = mean_over_axes(final_norm.forward(tok, tape), {1}, tape);  // [N,C]
        return reshape(head.forward(pooled, tape), {x.shape[0]}, tape);
    }

    std::vector<std::pair<std::string, TensorT<T>*>> named_state() {
        std::vector<std::pair<std::string, TensorT<T>*>> out;
        auto conv = [&](const std::string& p, Conv3dLayerT<T>& c) {
            out.push_back({p + ".w", &c.w});
            out.push_back({p + ".b", &c.b});
        };
        auto lin = [&](const std::string& p, LinearLayerT<T>& l) {
            out.push_back({p + ".w", &l.w});
            out.push_back({p + ".b", &l.b});
        };
        auto ln = [&](const std::string& p, LayerNormLayerT<T>& l) {
            out.push_back({p + ".g", &l.g});
            out.push_back({p + ".b", &l.b});
        };
        auto bn = [&](const std::string& p, BatchNorm3dT<T>& b) {
            out.push_back({p + ".gamma", &b.gamma});
            out.push_back({p + ".beta", &b.beta});
            out.push_back({p + ".running_mean", &b.running_mean});
            out.push_back({p + ".running_var", &b.running_var});
            out.push_back({p + ".running_count", &b.running_count});
        };
        auto embed = [&](const std::string& p, PatchEmbedT<T>& e) {
            conv(p + ".conv", e.conv);
            ln(p + ".norm", e.norm);
        };
        auto local = [&](const std::string& p, LocalBlockT<T>& blk) {
            conv(p + ".dpe", blk.dpe);
            bn(p + ".bn1", blk.bn1);
            conv(p + ".pw1", blk.pw1);
            conv(p + ".dw", blk.dw);
            conv(p + ".pw2", blk.pw2);
            bn(p + ".bn2", blk.bn2);
            conv(p + ".ffn1", blk.ffn1);
            conv(p + ".ffn2", blk.ffn2);
        };
        auto global = [&](const std::string& p, GlobalBlockT<T>& blk) {
            conv(p + ".dpe", blk.dpe);
            ln(p + ".ln1", blk.ln1);
            lin(p + ".wq", blk.wq);
            lin(p + ".wk", blk.wk);
            lin(p + ".wv", blk.wv);
            lin(p + ".wo", blk.wo);
            ln(p + ".ln2", blk.ln2);
            lin(p + ".ffn1", blk.ffn1);
            lin(p + ".ffn2", blk.ffn2);
        };
        embed("embed1", embed1);
        for (size_t i = 0; i < stage1.size(); ++i) local("s1.b" + std::to_string(i), stage1[i]);
        embed("down2", down2);
        for (size_t i = 0; i < stage2.size(); ++i) local("s2.b" + std::to_string(i), stage2[i]);
        embed("down3", down3);
        for (size_t i = 0; i < stage3.size(); ++i) global("s3.b" + std::to_string(i), stage3[i]);
        embed("down4", down4);
        for (size_t i = 0; i < stage4.size(); ++i) global("s4.b" + std::to_string(i), stage4[i]);
        ln("final", final_norm);
        lin("head", head);
        return out;
    }

    // Trainables only; BN running stats are state, not parameters.
    std::vector<TensorT<T>*> parameters() {
        std::vector<TensorT<T>*> out;
        for (auto& [name, t] : named_state())
            if (name.find("running_") == std::string::npos) out.push_back(t);
        return out;
    }

    int64_t parameter_count() {
        int64_t n = 0;
        for (TensorT<T>* p : parameters()) n += p->size();
        return n;
    }

    void set_training(bool on) { training = on; }
};

using EchoCoTrNet = EchoCoTrNetT<float>;

// --- weights container (magic "ECW1") ---

void save_weights(const std::string& path, EchoCoTrNet& model);
EchoCoTrNet load_weights(const std::string& path);

}  // namespace echocotr
