#include <cmath>
#include <functional>

#include "doctest.h"
#include "metastab/tensor.hpp"
#include "metastab/util.hpp"

using namespace metastab;

namespace {

using T = Tensor<double>;

void fill_uniform(T& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.value()) v = rng.uniform(lo, hi);
}

/// Central finite differences against the analytic gradients of `build`
/// (which must rebuild the graph from the leaves' current values).
/// Returns the worst norm-relative error across leaves.
double grad_check(const std::function<T()>& build, std::vector<T> leaves,
                  double h = 1e-5) {
  {
    Tape<double> tape;
    T loss = build();
    tape.backward(loss);
  }
  double worst = 0;
  for (auto& leaf : leaves) {
    REQUIRE(leaf.has_grad());
    std::vector<double> analytic = leaf.grad();
    double num = 0, den = 0;
    for (size_t i = 0; i < leaf.value().size(); ++i) {
      const double keep = leaf.value()[i];
      leaf.value()[i] = keep + h;
      const double fp = build().item();
      leaf.value()[i] = keep - h;
      const double fm = build().item();
      leaf.value()[i] = keep;
      const double fd = (fp - fm) / (2 * h);
      num += (analytic[i] - fd) * (analytic[i] - fd);
      den += fd * fd;
    }
    const double rel = std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
    worst = std::max(worst, rel);
    leaf.zero_grad();
  }
  return worst;
}

}  // namespace

TEST_CASE("conv2d of ones: center of full kernel support is 9") {
  auto x = T::full({1, 1, 4, 4}, 1.0);
  auto w = T::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, w, 1, 1);
  CHECK(y.shape() == Shape{1, 1, 4, 4});
  CHECK(y.value()[5] == doctest::Approx(9.0));   // interior
  CHECK(y.value()[0] == doctest::Approx(4.0));   // corner
}

TEST_CASE("relu basics") {
  auto x = T::from({2}, {-2.0, 3.0});
  auto y = relu(x);
  CHECK(y.value()[0] == 0.0);
  CHECK(y.value()[1] == 3.0);
}

TEST_CASE("bilinear sampling at the integer grid is the identity") {
  Rng rng(11);
  auto img = T::zeros({1, 2, 5, 7});
  fill_uniform(img, rng, 0, 1);
  auto gx = T::zeros({1, 1, 5, 7});
  auto gy = T::zeros({1, 1, 5, 7});
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 7; ++x) {
      gx.value()[static_cast<size_t>(y) * 7 + x] = x;
      gy.value()[static_cast<size_t>(y) * 7 + x] = y;
    }
  auto out = grid_sample(img, gx, gy);
  for (size_t i = 0; i < img.value().size(); ++i)
    CHECK(out.value()[i] == doctest::Approx(img.value()[i]).epsilon(1e-12));
}

TEST_CASE("backward of sum(x*x) is 2x") {
  auto x = T::from({3}, {1.0, 2.0, 3.0}, true);
  Tape<double> tape;
  auto loss = sum_all(mul(x, x));
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
  CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("gradient of mean(|x|)") {
  auto x = T::from({3}, {1.0, -1.0, 2.0}, true);
  Tape<double> tape;
  auto loss = mean_all(abs_t(x));
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(1.0 / 3));
  CHECK(x.grad()[1] == doctest::Approx(-1.0 / 3));
  CHECK(x.grad()[2] == doctest::Approx(1.0 / 3));
}

TEST_CASE("backward requires a scalar root") {
  auto x = T::from({2}, {1.0, 2.0}, true);
  Tape<double> tape;
  auto y = mul(x, x);
  CHECK_THROWS_WITH_AS(tape.backward(y), doctest::Contains("scalar"),
                       std::invalid_argument);
}

TEST_CASE("shape mismatch names the op and both shapes") {
  auto a = T::zeros({2, 3});
  auto b = T::zeros({3, 2});
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), std::invalid_argument);
  try {
    add(a, b);
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[3x2]") != std::string::npos);
  }
}

TEST_CASE("requires_grad=false tensors never accumulate gradient") {
  auto x = T::from({2}, {1.0, 2.0}, true);
  auto y = T::from({2}, {3.0, 4.0}, false);
  Tape<double> tape;
  auto loss = sum_all(mul(x, y));
  tape.backward(loss);
  CHECK(x.has_grad());
  CHECK(!y.has_grad());
}

TEST_CASE("tape grows linearly and is cleared by backward") {
  auto x = T::from({4}, {1, 2, 3, 4}, true);
  Tape<double> tape;
  auto h = x;
  for (int i = 0; i < 10; ++i) h = add(h, x);
  auto loss = sum_all(h);
  CHECK(tape.size() == 11);
  tape.backward(loss);
  CHECK(tape.size() == 0);
}

TEST_CASE("gradient check: elementwise primitives") {
  Rng rng(101);
  auto a = T::zeros({2, 6});
  auto b = T::zeros({2, 6});
  fill_uniform(a, rng, 0.2, 1.5);
  fill_uniform(b, rng, 0.3, 1.4);
  a.set_requires_grad(true);
  b.set_requires_grad(true);

  CHECK(grad_check([&] { return sum_all(add(a, b)); }, {a, b}) < 1e-6);
  CHECK(grad_check([&] { return sum_all(square(sub(a, b))); }, {a, b}) < 1e-6);
  CHECK(grad_check([&] { return sum_all(mul(a, b)); }, {a, b}) < 1e-6);
  CHECK(grad_check([&] { return sum_all(divt(a, b)); }, {a, b}) < 1e-6);
  CHECK(grad_check([&] { return mean_all(square(a)); }, {a}) < 1e-6);
  CHECK(grad_check([&] { return sum_all(sqrt_t(a)); }, {a}) < 1e-6);
  CHECK(grad_check([&] { return sum_all(exp_t(scale(a, 0.5))); }, {a}) < 1e-6);
  CHECK(grad_check([&] { return sum_all(log_t(add_scalar(a, 0.5))); }, {a}) < 1e-6);
  CHECK(grad_check([&] { return sum_all(abs_t(sub(a, b))); }, {a, b}) < 1e-5);
  CHECK(grad_check([&] { return sum_all(relu(sub(a, b))); }, {a, b}) < 1e-4);
  CHECK(grad_check([&] { return sum_all(leaky_relu(sub(a, b), 0.1)); }, {a, b}) < 1e-4);
  CHECK(grad_check([&] { return sum_all(clamp(a, 0.25, 1.45)); }, {a}) < 1e-4);
}

TEST_CASE("gradient check: matrix primitives") {
  Rng rng(202);
  auto m = T::zeros({4, 5});
  auto n = T::zeros({5, 3});
  auto v5 = T::zeros({5});
  auto v4 = T::zeros({4});
  fill_uniform(m, rng, 0.2, 1.0);
  fill_uniform(n, rng, 0.2, 1.0);
  fill_uniform(v5, rng, 0.5, 1.5);
  fill_uniform(v4, rng, 0.5, 1.5);
  for (auto* t : {&m, &n, &v5, &v4}) t->set_requires_grad(true);

  CHECK(grad_check([&] { return sum_all(square(matmul(m, n))); }, {m, n}) < 1e-6);
  CHECK(grad_check([&] { return sum_all(square(matmul(m, m, false, true))); }, {m}) < 1e-6);
  CHECK(grad_check([&] { return sum_all(square(matmul(m, m, true, false))); }, {m}) < 1e-6);
  CHECK(grad_check([&] { return sum_all(square(matmul(n, m, true, true))); }, {m, n}) < 1e-6);
  CHECK(grad_check([&] { return sum_all(square(row_sum(m))); }, {m}) < 1e-6);
  CHECK(grad_check([&] { return sum_all(row_min(m)); }, {m}) < 1e-5);
  CHECK(grad_check([&] { return sum_all(row_max(m)); }, {m}) < 1e-5);
  CHECK(grad_check([&] { return sum_all(col_max(m)); }, {m}) < 1e-5);
  CHECK(grad_check([&] { return sum_all(square(div_by_row(m, v4))); }, {m, v4}) < 1e-6);
  CHECK(grad_check([&] { return sum_all(square(sub_colvec(m, v5))); }, {m, v5}) < 1e-6);
  CHECK(grad_check([&] { return sum_all(square(gather_rows(m, {2, 0, 2}))); }, {m}) < 1e-6);
}

TEST_CASE("gradient check: image primitives") {
  Rng rng(303);
  auto x = T::zeros({2, 3, 6, 8});
  auto w = T::zeros({4, 3, 3, 3});
  auto bias = T::zeros({4});
  fill_uniform(x, rng, 0.1, 0.9);
  fill_uniform(w, rng, -0.5, 0.5);
  fill_uniform(bias, rng, -0.2, 0.2);
  for (auto* t : {&x, &w, &bias}) t->set_requires_grad(true);

  CHECK(grad_check([&] { return mean_all(square(conv2d(x, w, bias, 1, 1))); },
                   {x, w, bias}) < 1e-6);
  CHECK(grad_check([&] { return mean_all(square(conv2d(x, w, bias, 2, 1))); },
                   {x, w, bias}) < 1e-6);
  CHECK(grad_check([&] { return mean_all(square(upsample_nearest2(x))); }, {x}) < 1e-6);
  CHECK(grad_check([&] { return mean_all(square(avg_pool2(x))); }, {x}) < 1e-6);
  CHECK(grad_check([&] { return mean_all(square(global_avg_pool(x))); }, {x}) < 1e-6);
  CHECK(grad_check([&] { return mean_all(square(replicate_pad(x, 2))); }, {x}) < 1e-6);
  CHECK(grad_check([&] { return mean_all(square(slice_channels(x, 1, 2))); }, {x}) < 1e-6);
  CHECK(grad_check(
            [&] { return mean_all(square(concat_channels<double>({x, x}))); }, {x}) < 1e-6);

  auto one = T::zeros({1, 2, 6, 8});
  fill_uniform(one, rng, 0.1, 0.9);
  one.set_requires_grad(true);
  CHECK(grad_check([&] { return mean_all(square(chw_to_rows(slice_channels(one, 0, 2)))); },
                   {one}) < 1e-6);
  CHECK(grad_check([&] { return mean_all(square(as_matrix_chw(one))); }, {one}) < 1e-6);
}

TEST_CASE("gradient check: grid_sample in image and coordinates") {
  Rng rng(404);
  auto img = T::zeros({1, 2, 7, 9});
  fill_uniform(img, rng, 0.0, 1.0);
  img.set_requires_grad(true);
  // coordinates strictly inside, away from integer kinks and edges
  auto gx = T::zeros({1, 1, 4, 5});
  auto gy = T::zeros({1, 1, 4, 5});
  for (auto& v : gx.value()) v = rng.uniform(1.3, 7.2);
  for (auto& v : gy.value()) v = rng.uniform(1.3, 5.2);
  for (auto& v : gx.value())
    if (std::abs(v - std::round(v)) < 0.05) v += 0.11;
  for (auto& v : gy.value())
    if (std::abs(v - std::round(v)) < 0.05) v += 0.11;
  gx.set_requires_grad(true);
  gy.set_requires_grad(true);
  CHECK(grad_check([&] { return mean_all(square(grid_sample(img, gx, gy))); },
                   {img, gx, gy}) < 1e-6);
}

TEST_CASE("composed 3-layer conv net gradient matches finite differences") {
  Rng rng(505);
  auto x = T::zeros({1, 2, 8, 8});
  auto w1 = T::zeros({4, 2, 3, 3});
  auto w2 = T::zeros({4, 4, 3, 3});
  auto w3 = T::zeros({2, 4, 3, 3});
  fill_uniform(x, rng, 0.1, 0.9);
  for (auto* w : {&w1, &w2, &w3}) {
    fill_uniform(*w, rng, -0.4, 0.4);
    w->set_requires_grad(true);
  }
  auto net = [&] {
    auto h1 = leaky_relu(conv2d(x, w1, 1, 1), 0.1);
    auto h2 = leaky_relu(conv2d(h1, w2, 2, 1), 0.1);
    auto h3 = conv2d(h2, w3, 1, 1);
    return mean_all(square(h3));
  };
  CHECK(grad_check(net, {w1, w2, w3}, 1e-4) < 1e-5);
}

TEST_CASE("forward results are bit-identical for identical seeds") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    auto x = T::zeros({1, 3, 8, 8});
    auto w = T::zeros({5, 3, 3, 3});
    fill_uniform(x, rng, 0, 1);
    fill_uniform(w, rng, -1, 1);
    return conv2d(x, w, 1, 1).value();
  };
  auto a = run(42), b = run(42), c = run(43);
  CHECK(a == b);
  CHECK(a != c);
}

TEST_CASE("GradPause suppresses recording") {
  auto x = T::from({2}, {1.0, 2.0}, true);
  Tape<double> tape;
  {
    GradPause pause;
    auto y = mul(x, x);
    CHECK(!y.requires_grad());
  }
  CHECK(tape.size() == 0);
}
