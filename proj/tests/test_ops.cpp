#include "doctest.h"

#include <cmath>
#include <functional>
#include <vector>

#include "detseg/autograd.hpp"
#include "detseg/loss_ops.hpp"
#include "detseg/ops.hpp"
#include "detseg/rng.hpp"
#include "detseg/tensor.hpp"

using namespace detseg;

namespace {

Tensor rand_tensor(std::vector<int> shape, uint64_t seed, float lo = -1.f, float hi = 1.f) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// Central-difference check of d(loss)/d(x) where f maps the input Var to a
// scalar Var. Most composites here are at most quadratic in x, so the
// central difference is exact up to float rounding.
void check_grad(const Tensor& x0, const std::function<Var(const Var&)>& f, float eps = 1e-2f,
                float rtol = 2e-2f, float atol = 2e-3f) {
  Tensor xc = x0;
  Var vx(std::move(xc));
  vx.set_requires_grad(true);
  Var loss = f(vx);
  REQUIRE(loss.val().numel() == 1);
  backward(loss);
  const Tensor g = vx.grad();

  NoGradGuard ng;
  for (int64_t i = 0; i < x0.numel(); ++i) {
    Tensor xp = x0;
    xp.data[i] += eps;
    Tensor xm = x0;
    xm.data[i] -= eps;
    const double fp = f(Var(std::move(xp))).val().data[0];
    const double fm = f(Var(std::move(xm))).val().data[0];
    const double fd = (fp - fm) / (2.0 * eps);
    CHECK(std::abs(g.data[i] - fd) <= atol + rtol * std::abs(fd));
  }
}

// Fixed random target so mse_loss acts as a generic scalar head.
std::function<Var(const Var&)> mse_head(const std::function<Var(const Var&)>& op,
                                        std::vector<int> out_shape, uint64_t seed) {
  Tensor target = rand_tensor(std::move(out_shape), seed);
  return [op, target](const Var& x) { return ops::mse_loss(op(x), Var(Tensor(target))); };
}

}  // namespace

TEST_SUITE("ops") {
  TEST_CASE("conv2d forward matches a hand computation") {
    // 1x1 input channel, 2x2 image, single 2x2 kernel, no padding.
    Tensor x({1, 1, 2, 2});
    x.data = {1, 2, 3, 4};
    Tensor w({1, 1, 2, 2});
    w.data = {1, 0, 0, 1};
    Tensor b({1});
    b.data = {0.5f};
    Var y = ops::conv2d(Var(std::move(x)), Var(std::move(w)), Var(std::move(b)), 1, 0);
    REQUIRE(y.val().shape == std::vector<int>{1, 1, 1, 1});
    CHECK(y.val().data[0] == doctest::Approx(1 + 4 + 0.5));
  }

  TEST_CASE("conv2d gradients: input, weight, bias") {
    const Tensor x0 = rand_tensor({2, 3, 5, 4}, 10);
    const Tensor w0 = rand_tensor({4, 3, 3, 3}, 11, -0.5f, 0.5f);
    const Tensor b0 = rand_tensor({4}, 12);

    auto via_x = mse_head(
        [&](const Var& v) { return ops::conv2d(v, Var(Tensor(w0)), Var(Tensor(b0)), 1, 1); },
        {2, 4, 5, 4}, 20);
    check_grad(x0, via_x);

    auto via_w = mse_head(
        [&](const Var& v) { return ops::conv2d(Var(Tensor(x0)), v, Var(Tensor(b0)), 2, 0); },
        {2, 4, 2, 1}, 21);
    check_grad(w0, via_w);

    auto via_b = mse_head(
        [&](const Var& v) { return ops::conv2d(Var(Tensor(x0)), Var(Tensor(w0)), v, 1, 1); },
        {2, 4, 5, 4}, 22);
    check_grad(b0, via_b);
  }

  TEST_CASE("group_norm normalizes each group and backprops") {
    const int C = 4, G = 2;
    Tensor x0 = rand_tensor({2, C, 3, 3}, 30);
    Tensor gamma({C}, 1.f), beta({C});
    Var y = ops::group_norm(Var(Tensor(x0)), Var(Tensor(gamma)), Var(Tensor(beta)), G);

    // Per (n, group): mean 0, variance 1 over the group's C/G * H * W cells.
    const auto& v = y.val();
    for (int n = 0; n < 2; ++n)
      for (int g = 0; g < G; ++g) {
        double sum = 0, sq = 0;
        for (int c = g * C / G; c < (g + 1) * C / G; ++c)
          for (int h = 0; h < 3; ++h)
            for (int w = 0; w < 3; ++w) {
              sum += v.at4(n, c, h, w);
              sq += v.at4(n, c, h, w) * v.at4(n, c, h, w);
            }
        const double m = sum / 18.0;
        CHECK(std::abs(m) < 1e-5);
        CHECK(sq / 18.0 - m * m == doctest::Approx(1.0).epsilon(1e-3));
      }

    auto head = mse_head(
        [&](const Var& in) {
          return ops::group_norm(in, Var(Tensor(gamma)), Var(Tensor(beta)), G);
        },
        {2, C, 3, 3}, 31);
    check_grad(x0, head, 1e-2f, 4e-2f, 4e-3f);

    auto via_gamma = mse_head(
        [&](const Var& gv) { return ops::group_norm(Var(Tensor(x0)), gv, Var(Tensor(beta)), G); },
        {2, C, 3, 3}, 32);
    check_grad(gamma, via_gamma);
  }

  TEST_CASE("relu and max_pool2d gradients away from kinks") {
    Tensor x0({1, 1, 4, 4});
    for (int i = 0; i < 16; ++i) x0.data[i] = 0.31f * (i - 8) + 0.13f;  // distinct, nonzero
    auto via_relu = mse_head([](const Var& v) { return ops::relu(v); }, {1, 1, 4, 4}, 40);
    check_grad(x0, via_relu, 1e-3f);
    auto via_pool =
        mse_head([](const Var& v) { return ops::max_pool2d(v, 2, 2, 0); }, {1, 1, 2, 2}, 41);
    check_grad(x0, via_pool, 1e-3f);
  }

  TEST_CASE("max_pool2d forward picks window maxima") {
    Tensor x({1, 1, 2, 4});
    x.data = {5, 1, 2, 8, 3, 9, 7, 4};
    Var y = ops::max_pool2d(Var(std::move(x)), 2, 2, 0);
    REQUIRE(y.val().shape == std::vector<int>{1, 1, 1, 2});
    CHECK(y.val().data[0] == 9);
    CHECK(y.val().data[1] == 8);
  }

  TEST_CASE("add, add_channel_bias, global_avg_pool") {
    const Tensor a0 = rand_tensor({1, 2, 2, 2}, 50);
    const Tensor b0 = rand_tensor({1, 2, 2, 2}, 51);
    Var s = ops::add(Var(Tensor(a0)), Var(Tensor(b0)));
    for (int i = 0; i < 8; ++i) CHECK(s.val().data[i] == doctest::Approx(a0.data[i] + b0.data[i]));

    const Tensor v0 = rand_tensor({1, 2, 1, 1}, 52);
    Var biased = ops::add_channel_bias(Var(Tensor(a0)), Var(Tensor(v0)));
    CHECK(biased.val().at4(0, 1, 1, 0) == doctest::Approx(a0.at4(0, 1, 1, 0) + v0.data[1]));

    Var g = ops::global_avg_pool(Var(Tensor(a0)));
    REQUIRE(g.val().shape == std::vector<int>{1, 2, 1, 1});
    double m = 0;
    for (int i = 0; i < 4; ++i) m += a0.data[i];
    CHECK(g.val().data[0] == doctest::Approx(m / 4.0));

    check_grad(a0, mse_head([&](const Var& v) { return ops::add(v, Var(Tensor(b0))); },
                            {1, 2, 2, 2}, 53));
    check_grad(a0, mse_head([&](const Var& v) { return ops::global_avg_pool(v); },
                            {1, 2, 1, 1}, 54));
    check_grad(v0, mse_head(
                       [&](const Var& v) { return ops::add_channel_bias(Var(Tensor(a0)), v); },
                       {1, 2, 2, 2}, 55));
  }

  TEST_CASE("upsample_nearest2x repeats pixels") {
    Tensor x({1, 1, 1, 2});
    x.data = {3, 7};
    Var y = ops::upsample_nearest2x(Var(std::move(x)));
    REQUIRE(y.val().shape == std::vector<int>{1, 1, 2, 4});
    CHECK(y.val().data == std::vector<float>{3, 3, 7, 7, 3, 3, 7, 7});
  }

  TEST_CASE("upsample_bilinear matches align_corners=false sampling") {
    Tensor x({1, 1, 2, 1});
    x.data = {1.f, 5.f};
    Var y = ops::upsample_bilinear(Var(Tensor(x)), 2);
    REQUIRE(y.val().shape == std::vector<int>{1, 1, 4, 2});
    // Sample centers map to source rows -0.25, 0.25, 0.75, 1.25 (clamped).
    CHECK(y.val().at4(0, 0, 0, 0) == doctest::Approx(1.f));
    CHECK(y.val().at4(0, 0, 1, 0) == doctest::Approx(0.75f * 1 + 0.25f * 5));
    CHECK(y.val().at4(0, 0, 2, 0) == doctest::Approx(0.25f * 1 + 0.75f * 5));
    CHECK(y.val().at4(0, 0, 3, 1) == doctest::Approx(5.f));

    const Tensor x0 = rand_tensor({1, 2, 3, 2}, 60);
    check_grad(x0, mse_head([](const Var& v) { return ops::upsample_bilinear(v, 2); },
                            {1, 2, 6, 4}, 61));
  }

  TEST_CASE("to_anchor_major lays rows out (row, col, anchor)") {
    // A=2, K=1, 1x2 grid: channels hold anchor-major logits.
    Tensor x({1, 2, 1, 2});
    x.data = {10, 11, 20, 21};  // channel 0: cells (0,0),(0,1); channel 1: same
    Var y = ops::to_anchor_major(Var(std::move(x)), 2, 1);
    REQUIRE(y.val().shape == std::vector<int>{1, 4, 1});
    // Expected row order: cell(0,0) anchor0, cell(0,0) anchor1, cell(0,1) a0, a1.
    CHECK(y.val().data == std::vector<float>{10, 20, 11, 21});
  }

  TEST_CASE("concat_rows and flatten_concat stack blocks in order") {
    Tensor a({1, 2, 3});
    a.data = {1, 2, 3, 4, 5, 6};
    Tensor b({1, 1, 3});
    b.data = {7, 8, 9};
    Var cat = ops::concat_rows({Var(std::move(a)), Var(std::move(b))});
    REQUIRE(cat.val().shape == std::vector<int>{1, 3, 3});
    CHECK(cat.val().data == std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});

    Tensor l0({1, 2, 2, 2});
    for (int i = 0; i < 8; ++i) l0.data[i] = float(i);
    Tensor l1({1, 2, 1, 1});
    l1.data = {100, 200};
    Var flat = ops::flatten_concat({Var(std::move(l0)), Var(std::move(l1))});
    REQUIRE(flat.val().shape == std::vector<int>{1, 2, 5});
    CHECK(flat.val().data ==
          std::vector<float>{0, 1, 2, 3, 100, 4, 5, 6, 7, 200});
  }

  TEST_CASE("project_columns applies W x + b per column") {
    Tensor x({1, 2, 2});
    x.data = {1, 2, 3, 4};  // columns (1,3), (2,4)
    Tensor w({3, 2});
    w.data = {1, 0, 0, 1, 1, 1};
    Tensor b({3});
    b.data = {0, 0, 10};
    Var y = ops::project_columns(Var(Tensor(x)), Var(Tensor(w)), Var(Tensor(b)));
    REQUIRE(y.val().shape == std::vector<int>{1, 3, 2});
    CHECK(y.val().data == std::vector<float>{1, 2, 3, 4, 14, 16});

    const Tensor x0 = rand_tensor({2, 3, 4}, 70);
    const Tensor w0 = rand_tensor({2, 3}, 71);
    const Tensor b0 = rand_tensor({2}, 72);
    check_grad(x0, mse_head(
                       [&](const Var& v) {
                         return ops::project_columns(v, Var(Tensor(w0)), Var(Tensor(b0)));
                       },
                       {2, 2, 4}, 73));
    check_grad(w0, mse_head(
                       [&](const Var& v) {
                         return ops::project_columns(Var(Tensor(x0)), v, Var(Tensor(b0)));
                       },
                       {2, 2, 4}, 74));
  }

  TEST_CASE("select_scalar and channel_sum pull gradients through") {
    Tensor x0 = rand_tensor({1, 3, 2, 2}, 80);
    Var v1{Tensor(x0)};
    v1.set_requires_grad(true);
    Var s = ops::select_scalar(v1, 5);
    CHECK(s.val().data[0] == x0.data[5]);
    backward(s);
    for (int64_t i = 0; i < x0.numel(); ++i)
      CHECK(v1.grad().data[i] == (i == 5 ? 1.f : 0.f));

    Var v2{Tensor(x0)};
    v2.set_requires_grad(true);
    Var cs = ops::channel_sum(v2, 1);
    double want = 0;
    for (int h = 0; h < 2; ++h)
      for (int w = 0; w < 2; ++w) want += x0.at4(0, 1, h, w);
    CHECK(cs.val().data[0] == doctest::Approx(want));
    backward(cs);
    CHECK(v2.grad().at4(0, 1, 0, 1) == 1.f);
    CHECK(v2.grad().at4(0, 0, 0, 1) == 0.f);
  }

  TEST_CASE("crop_spatial keeps the top-left window") {
    Tensor x({1, 1, 3, 3});
    for (int i = 0; i < 9; ++i) x.data[i] = float(i);
    Var y = ops::crop_spatial(Var(Tensor(x)), 2, 2);
    REQUIRE(y.val().shape == std::vector<int>{1, 1, 2, 2});
    CHECK(y.val().data == std::vector<float>{0, 1, 3, 4});
    check_grad(x, mse_head([](const Var& v) { return ops::crop_spatial(v, 2, 2); },
                           {1, 1, 2, 2}, 90));
  }

  TEST_CASE("add_scalars and scale") {
    Tensor a({1}), b({1});
    a.data = {2.f};
    b.data = {3.f};
    Var va(std::move(a)), vb(std::move(b));
    va.set_requires_grad(true);
    Var y = ops::scale(ops::add_scalars({va, vb}), 4.f);
    CHECK(y.val().data[0] == doctest::Approx(20.f));
    backward(y);
    CHECK(va.grad().data[0] == doctest::Approx(4.f));
  }

  TEST_CASE("gradients accumulate across backward calls until zero_grad") {
    Tensor a({1});
    a.data = {1.f};
    Var v(std::move(a));
    v.set_requires_grad(true);
    backward(ops::scale(v, 2.f));
    backward(ops::scale(v, 5.f));
    CHECK(v.grad().data[0] == doctest::Approx(7.f));
    v.node()->zero_grad();
    CHECK(v.node()->grad.data.empty());
  }

  TEST_CASE("NoGradGuard suppresses graph recording") {
    Tensor a({1});
    a.data = {1.f};
    Var v(std::move(a));
    v.set_requires_grad(true);
    Var y;
    {
      NoGradGuard ng;
      y = ops::scale(v, 3.f);
    }
    backward(y);
    CHECK(v.node()->grad.data.empty());
  }
}
