#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "metastab/nn.hpp"

using namespace metastab;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir() {
  auto d = fs::temp_directory_path() / "metastab_nn_test";
  fs::create_directories(d);
  return d;
}
}  // namespace

TEST_CASE("sgd_step applies p -= lr*g and zeroes gradients") {
  nn::ParamSet<float> ps;
  auto p = Tensor<float>::from({1}, {1.0f});
  ps.add("p", p);
  p.grad()[0] = 0.5f;
  ps.sgd_step(0.1f);
  CHECK(p.value()[0] == doctest::Approx(0.95f));
  CHECK(!p.has_grad());
}

TEST_CASE("sgd_step with lr=0 leaves parameters unchanged") {
  nn::ParamSet<float> ps;
  auto p = Tensor<float>::from({2}, {1.0f, -2.0f});
  ps.add("p", p);
  p.grad()[0] = 3.f;
  p.grad()[1] = -1.f;
  ps.sgd_step(0.f);
  CHECK(p.value()[0] == 1.0f);
  CHECK(p.value()[1] == -2.0f);
}

TEST_CASE("sgd_step without populated gradient is an error") {
  nn::ParamSet<float> ps;
  ps.add("p", Tensor<float>::from({1}, {1.0f}));
  CHECK_THROWS_WITH_AS(ps.sgd_step(0.1f), doctest::Contains("missing gradient"),
                       std::runtime_error);
}

TEST_CASE("two sgd steps with constant gradient equal one step at summed deltas") {
  auto run_two = [] {
    nn::ParamSet<float> ps;
    auto p = Tensor<float>::from({1}, {2.0f});
    ps.add("p", p);
    p.grad()[0] = 0.25f;
    ps.sgd_step(0.1f);
    p.grad()[0] = 0.25f;
    ps.sgd_step(0.1f);
    return p.value()[0];
  };
  auto run_one = [] {
    nn::ParamSet<float> ps;
    auto p = Tensor<float>::from({1}, {2.0f});
    ps.add("p", p);
    p.grad()[0] = 0.25f;
    ps.sgd_step(0.2f);
    return p.value()[0];
  };
  CHECK(run_two() == doctest::Approx(run_one()));
}

TEST_CASE("MSTB checkpoints round-trip bit-exactly") {
  Rng rng(9);
  nn::ParamSet<float> ps;
  auto a = Tensor<float>::zeros({3, 2, 3, 3});
  auto b = Tensor<float>::zeros({7});
  nn::fill_normal(a, rng, 1.0);
  nn::fill_normal(b, rng, 0.5);
  ps.add("layer.w", a);
  ps.add("layer.b", b);

  const auto path = temp_dir() / "roundtrip.mstb";
  nn::save_params(path, ps);

  nn::ParamSet<float> loaded;
  loaded.add("layer.w", Tensor<float>::zeros({3, 2, 3, 3}));
  loaded.add("layer.b", Tensor<float>::zeros({7}));
  nn::load_params(path, loaded);

  CHECK(loaded[0].second.value() == a.value());
  CHECK(loaded[1].second.value() == b.value());

  // resave and compare the raw bytes
  const auto path2 = temp_dir() / "roundtrip2.mstb";
  nn::save_params(path2, loaded);
  CHECK(hash_file(path) == hash_file(path2));
}

TEST_CASE("MSTB rejects bad magic and missing parameters") {
  const auto path = temp_dir() / "bad.mstb";
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE1234";
  }
  CHECK_THROWS_WITH_AS(nn::load_checkpoint(path), doctest::Contains("magic"),
                       std::runtime_error);

  nn::ParamSet<float> ps;
  ps.add("present", Tensor<float>::zeros({2}));
  const auto ok = temp_dir() / "ok.mstb";
  nn::save_params(ok, ps);
  nn::ParamSet<float> other;
  other.add("absent", Tensor<float>::zeros({2}));
  CHECK_THROWS_WITH_AS(nn::load_params(ok, other), doctest::Contains("absent"),
                       std::runtime_error);
}

TEST_CASE("orthogonal init produces orthonormal rows") {
  Rng rng(4);
  auto w = Tensor<double>::zeros({8, 3, 3, 3});  // rows 8, cols 27
  nn::init_orthogonal(w, rng, 1.0);
  const int rows = 8, cols = 27;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j <= i; ++j) {
      double dot = 0;
      for (int k = 0; k < cols; ++k)
        dot += w.value()[static_cast<size_t>(i) * cols + k] *
               w.value()[static_cast<size_t>(j) * cols + k];
      CHECK(dot == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-9));
    }
}
