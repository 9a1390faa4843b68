// Microbenchmarks for the paths that dominate wall time: the stock network's
// forward and backward passes (training throughput), feature-inversion
// iterations (generation latency), sprite rendering, and Gaussian fitting.

#include <benchmark/benchmark.h>

#include <vector>

#include "facegen/cgmm.hpp"
#include "facegen/data.hpp"
#include "facegen/generate.hpp"
#include "facegen/nn.hpp"
#include "facegen/rng.hpp"
#include "facegen/tensor.hpp"

using namespace facegen;

namespace {

NetworkSpec stock_spec() {
    NetworkSpec spec;
    spec.trunk = {ConvSpec{16, 3, 1, 1}, ReluSpec{},  MaxPoolSpec{2, 2}, ConvSpec{32, 3, 1, 1},
                  ReluSpec{},           MaxPoolSpec{2, 2}, FlattenSpec{},     DenseSpec{128},
                  ReluSpec{},           DropoutSpec{0.5},  DenseSpec{64},     ReluSpec{},
                  DropoutSpec{0.5}};
    spec.heads = {HeadSpec{"hair_color", 4}, HeadSpec{"skin_tone", 3}, HeadSpec{"eyewear", 3},
                  HeadSpec{"expression", 3}, HeadSpec{"face_shape", 3}, HeadSpec{"accessory", 3}};
    return spec;
}

void bench_forward_eval(benchmark::State& state) {
    const NetworkSpec spec = stock_spec();
    const Parameters params = init_parameters(spec, 1);
    const Tensor x = Tensor::randn({3, 32, 32}, 0.5, 0.2, 2);
    for (auto _ : state) {
        const ForwardTrace trace = forward(spec, params, x, RunMode::eval);
        benchmark::DoNotOptimize(trace.head_probs[0][0]);
    }
}
BENCHMARK(bench_forward_eval);

void bench_train_step(benchmark::State& state) {
    const NetworkSpec spec = stock_spec();
    Parameters params = init_parameters(spec, 1);
    const Tensor x = Tensor::randn({3, 32, 32}, 0.5, 0.2, 2);
    const std::vector<int> labels = {0, 1, 0, 1, 0, 1};
    const FreezeMask freeze = no_freeze(spec);
    std::uint64_t step = 0;
    for (auto _ : state) {
        const ForwardTrace trace = forward(spec, params, x, RunMode::train, step++);
        const Gradients grads = backward(spec, params, trace, multihead_loss_grads(trace, labels));
        params = sgd_step(std::move(params), grads, 0.01, 0.0, freeze);
        benchmark::DoNotOptimize(params.heads[0].bias[0]);
    }
}
BENCHMARK(bench_train_step);

void bench_inversion_iteration(benchmark::State& state) {
    const NetworkSpec spec = stock_spec();
    const Parameters params = init_parameters(spec, 1);
    const Tensor probe = Tensor::randn({3, 32, 32}, 0.5, 0.2, 3);
    const int layer = resolve_layer(spec, "conv_last");
    const Tensor target =
        forward_to_layer(spec, params, probe, layer).trunk[static_cast<std::size_t>(layer)];
    InversionConfig cfg;
    cfg.layer = layer;
    cfg.iterations = 1;
    cfg.seed = 4;
    for (auto _ : state) {
        const GenerationResult res = feature_invert(spec, params, target, cfg);
        benchmark::DoNotOptimize(res.objective_trace.back());
    }
}
BENCHMARK(bench_inversion_iteration);

void bench_blur(benchmark::State& state) {
    const Tensor img = Tensor::randn({3, 32, 32}, 0.5, 0.2, 5);
    for (auto _ : state) {
        const Tensor out = blur(img, 0.5);
        benchmark::DoNotOptimize(out[0]);
    }
}
BENCHMARK(bench_blur);

void bench_render_face(benchmark::State& state) {
    const AttributeSchema schema = default_schema();
    const std::vector<int> labels = {0, 1, 1, 0, 1, 0};
    std::uint64_t seed = 0;
    for (auto _ : state) {
        const Tensor img = render_face(schema, labels, 32, 32, seed, seed + 1);
        ++seed;
        benchmark::DoNotOptimize(img[0]);
    }
}
BENCHMARK(bench_render_face);

void bench_fit_gaussian(benchmark::State& state) {
    std::vector<Tensor> acts;
    Rng rng(6);
    for (int i = 0; i < 200; ++i) acts.push_back(Tensor::randn({128}, 0, 1, rng));
    for (auto _ : state) {
        const AttributeGaussian g = fit_gaussian(acts);
        benchmark::DoNotOptimize(g.mu[0]);
    }
}
BENCHMARK(bench_fit_gaussian);

}  // namespace

BENCHMARK_MAIN();
