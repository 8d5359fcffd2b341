#include <benchmark/benchmark.h>

#include <vector>

#include "detseg/autograd.hpp"
#include "detseg/detpost.hpp"
#include "detseg/evalmetrics.hpp"
#include "detseg/model.hpp"
#include "detseg/ops.hpp"
#include "detseg/rng.hpp"
#include "detseg/tensor.hpp"

using namespace detseg;

namespace {

Tensor random_tensor(const std::vector<int>& shape, uint64_t seed) {
  Tensor t(shape);
  Rng rng(seed);
  for (auto& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

void bench_conv2d_forward(benchmark::State& state) {
  NoGradGuard ng;
  Var x(random_tensor({1, 32, 64, 64}, 1));
  Var w(random_tensor({32, 32, 3, 3}, 2));
  Var b(random_tensor({32}, 3));
  for (auto _ : state) {
    Var y = ops::conv2d(x, w, b, 1, 1);
    benchmark::DoNotOptimize(y.val().data.data());
  }
}
BENCHMARK(bench_conv2d_forward)->Unit(benchmark::kMillisecond);

void bench_conv2d_backward(benchmark::State& state) {
  for (auto _ : state) {
    Var x(random_tensor({1, 32, 64, 64}, 1));
    Var w(random_tensor({32, 32, 3, 3}, 2));
    Var b(random_tensor({32}, 3));
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    Var y = ops::conv2d(x, w, b, 1, 1);
    Var s = ops::channel_sum(y, 0);
    backward(s);
    benchmark::DoNotOptimize(w.grad().data.data());
  }
}
BENCHMARK(bench_conv2d_backward)->Unit(benchmark::kMillisecond);

void bench_encoder_forward(benchmark::State& state) {
  NoGradGuard ng;
  model::ModelConfig cfg;
  cfg.enc = model::encoder_small();
  cfg.with_det = false;
  cfg.with_seg = false;
  model::Model m(cfg, 7);
  Var x(random_tensor({1, 3, 64, 64}, 4));
  for (auto _ : state) {
    auto levels = m.encode(x);
    benchmark::DoNotOptimize(levels.back().val().data.data());
  }
}
BENCHMARK(bench_encoder_forward)->Unit(benchmark::kMillisecond);

void bench_nms(benchmark::State& state) {
  Rng rng(11);
  std::vector<det::Detection> dets(512);
  for (auto& d : dets) {
    d.x1 = static_cast<float>(rng.uniform(0, 80));
    d.y1 = static_cast<float>(rng.uniform(0, 80));
    d.x2 = d.x1 + static_cast<float>(rng.uniform(4, 40));
    d.y2 = d.y1 + static_cast<float>(rng.uniform(4, 40));
    d.cls = 1;
    d.score = static_cast<float>(rng.uniform());
  }
  for (auto _ : state) {
    auto keep = det::nms_keep(dets, 0.5f);
    benchmark::DoNotOptimize(keep.data());
  }
}
BENCHMARK(bench_nms)->Unit(benchmark::kMicrosecond);

void bench_compute_ap(benchmark::State& state) {
  Rng rng(13);
  std::vector<eval::PredRecord> preds;
  std::vector<eval::GtRecord> gts;
  for (int i = 0; i < 200; ++i) {
    std::string id = "img" + std::to_string(i % 40);
    float x1 = static_cast<float>(rng.uniform(0, 50)), y1 = static_cast<float>(rng.uniform(0, 50));
    float w = static_cast<float>(rng.uniform(5, 30)), h = static_cast<float>(rng.uniform(5, 30));
    preds.push_back({id, x1, y1, x1 + w, y1 + h, 1, static_cast<float>(rng.uniform())});
    if (i % 2 == 0) gts.push_back({id, x1, y1, x1 + w, y1 + h, 1});
  }
  for (auto _ : state) {
    double ap = eval::compute_ap(preds, gts, 1, 0.5f);
    benchmark::DoNotOptimize(ap);
  }
}
BENCHMARK(bench_compute_ap)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
