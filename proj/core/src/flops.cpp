#include "echocotr/flops.hpp"

namespace echocotr {

int64_t count_flops(const ModelConfig& cfg, int64_t t, int64_t h, int64_t w) {
    cfg.validate();
    if (t < 0) t = cfg.input_t;
    if (h < 0) h = cfg.input_h;
    if (w < 0) w = cfg.input_w;
    if (t < 2 || h < 4 || w < 4) throw ConfigError("count_flops: input too small for stage 1");

    const int64_t k3 = cfg.dpe_kernel * cfg.dpe_kernel * cfg.dpe_kernel;
    const int64_t win3 = cfg.local_window * cfg.local_window * cfg.local_window;
    int64_t total = 0;

    // stage-1 embedding: kernel (3,4,4), stride (2,4,4), pad (1,0,0)
    int64_t gt = conv_out_dim(t, 3, 2, 1);
    int64_t gh = conv_out_dim(h, 4, 4, 0);
    int64_t gw = conv_out_dim(w, 4, 4, 0);
    total += cfg.stage_dims[0] * gt * gh * gw * (3 * 4 * 4 * cfg.in_channels);

    for (int stage = 0; stage < 4; ++stage) {
        const int64_t c = cfg.stage_dims[stage];
        if (stage > 0) {  // downsample (1,2,2)/(1,2,2) from the previous width
            gh = conv_out_dim(gh, 2, 2, 0);
            gw = conv_out_dim(gw, 2, 2, 0);
            total += c * gt * gh * gw * (2 * 2 * cfg.stage_dims[stage - 1]);
        }
        const int64_t l = gt * gh * gw;
        const int64_t e = c * l;
        const int64_t hidden = cfg.ffn_hidden(c);
        int64_t per_block;
        if (stage < 2) {
            per_block = e * k3             // dpe (depthwise)
                        + e * c            // pw1
                        + e * win3         // depthwise aggregation
                        + e * c            // pw2
                        + l * hidden * c   // ffn in
                        + l * c * hidden;  // ffn out
        } else {
            per_block = e * k3             // dpe
                        + 3 * l * c * c    // q,k,v projections
                        + l * l * c        // Q K^T across heads
                        + l * l * c        // attn * V
                        + l * c * c        // output projection
                        + l * hidden * c + l * c * hidden;
        }
        total += per_block * cfg.stage_depths[stage];
    }

    total += cfg.stage_dims[3];  // regression head, one output
    return total;
}

}  // namespace echocotr
