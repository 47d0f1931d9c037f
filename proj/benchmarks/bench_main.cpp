#include <benchmark/benchmark.h>

#include <glesam/autodiff.hpp>
#include <glesam/rng.hpp>
#include <glesam/schedule.hpp>

namespace av = glesam::ad;
using glesam::Rng;
using glesam::Tensor;

static void BM_Conv2d3x3(benchmark::State& state) {
    Rng rng(1);
    int c = int(state.range(0));
    Tensor x = Tensor::randn(rng, {4, c, 16, 16});
    Tensor w = Tensor::randn(rng, {c, c, 3, 3});
    Tensor b = Tensor::randn(rng, {c});
    av::NoGradGuard ng;
    for (auto _ : state) {
        av::Value y = av::conv2d(av::leaf(x), av::leaf(w), av::leaf(b), 1, 1);
        benchmark::DoNotOptimize(y->val.data.data());
    }
}
BENCHMARK(BM_Conv2d3x3)->Arg(32)->Arg(64);

static void BM_ConvBackward(benchmark::State& state) {
    Rng rng(2);
    int c = int(state.range(0));
    av::Value x = av::leaf(Tensor::randn(rng, {4, c, 16, 16}), true);
    av::Value w = av::leaf(Tensor::randn(rng, {c, c, 3, 3}), true);
    av::Value b = av::leaf(Tensor::randn(rng, {c}), true);
    for (auto _ : state) {
        av::Value y = av::conv2d(x, w, b, 1, 1);
        av::Value loss = av::mean_all(av::mul(y, y));
        x->grad = Tensor();
        w->grad = Tensor();
        b->grad = Tensor();
        av::backward(loss);
        benchmark::DoNotOptimize(w->grad.data.data());
    }
}
BENCHMARK(BM_ConvBackward)->Arg(32);

static void BM_DftAmplitude(benchmark::State& state) {
    Rng rng(3);
    Tensor x = Tensor::randn(rng, {4, 32, 16, 16});
    av::NoGradGuard ng;
    for (auto _ : state) {
        av::Value y = av::dft_amplitude(av::leaf(x));
        benchmark::DoNotOptimize(y->val.data.data());
    }
}
BENCHMARK(BM_DftAmplitude);

static void BM_ScheduleBuild(benchmark::State& state) {
    for (auto _ : state) {
        auto ns = glesam::build_schedule();
        benchmark::DoNotOptimize(ns.alpha_bars.data());
    }
}
BENCHMARK(BM_ScheduleBuild);

BENCHMARK_MAIN();
