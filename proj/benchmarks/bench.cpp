#include <benchmark/benchmark.h>

#include "echocotr/conv.hpp"
#include "echocotr/model.hpp"
#include "echocotr/ops.hpp"
#include "echocotr/sampling.hpp"

using namespace echocotr;

namespace {

TensorT<float> randn(Shape s, uint64_t seed) {
    RngStream rng(seed, "bench");
    return TensorT<float>::randn(std::move(s), rng);
}

void bm_matmul(benchmark::State& state) {
    const int64_t n = state.range(0);
    TensorT<float> a = randn({n, n}, 1), b = randn({n, n}, 2);
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b).ptr());
    state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(bm_matmul)->Arg(64)->Arg(192)->Arg(384);

void bm_conv3d(benchmark::State& state) {
    // stage-2 downsampling shape from the S preset
    TensorT<float> x = randn({1, 64, 18, 28, 28}, 3);
    TensorT<float> w = randn({128, 64, 1, 2, 2}, 4);
    const ConvAlgo algo = state.range(0) == 0 ? ConvAlgo::Direct : ConvAlgo::Im2col;
    for (auto _ : state)
        benchmark::DoNotOptimize(
            conv3d<float>(x, w, nullptr, {1, 2, 2}, {0, 0, 0}, 1, nullptr, algo).ptr());
}
BENCHMARK(bm_conv3d)->Arg(0)->Arg(1)->ArgNames({"algo"});

void bm_conv3d_depthwise(benchmark::State& state) {
    TensorT<float> x = randn({1, 64, 18, 28, 28}, 5);
    TensorT<float> w = randn({64, 1, 3, 3, 3}, 6);
    for (auto _ : state)
        benchmark::DoNotOptimize(
            conv3d<float>(x, w, nullptr, {1, 1, 1}, {1, 1, 1}, 64).ptr());
}
BENCHMARK(bm_conv3d_depthwise);

void bm_softmax_attention_rows(benchmark::State& state) {
    TensorT<float> scores = randn({1, 8, 392, 392}, 7);
    for (auto _ : state) benchmark::DoNotOptimize(softmax(scores).ptr());
}
BENCHMARK(bm_softmax_attention_rows);

void bm_model_forward(benchmark::State& state) {
    ModelConfig cfg;
    cfg.in_channels = 1;
    cfg.input_t = 8;
    cfg.input_h = cfg.input_w = 32;
    cfg.stage_depths = {1, 1, 1, 1};
    cfg.stage_dims = {8, 16, 32, 64};
    cfg.head_dim = 16;
    cfg.drop_path_max = 0.0;
    EchoCoTrNet net(cfg);
    RngStream ir(8);
    net.init(ir);
    net.set_training(true);  // batch-norm needs stats before eval runs
    RngStream dr(9, "drop");
    TensorT<float> x = randn({1, 1, 8, 32, 32}, 10);
    for (auto _ : state) benchmark::DoNotOptimize(net.forward(x, nullptr, &dr).ptr());
}
BENCHMARK(bm_model_forward);

void bm_sample_uniform(benchmark::State& state) {
    VideoClip video{randn({120, 112, 112}, 11), "bench", std::nullopt};
    SampleSpec spec;  // 36 frames at frequency 4
    RngStream rng(12, "sample");
    for (auto _ : state)
        benchmark::DoNotOptimize(sample_uniform(video, spec, rng).clip.frames.ptr());
}
BENCHMARK(bm_sample_uniform);

}  // namespace

BENCHMARK_MAIN();
