#include <cmath>

#include "doctest.h"
#include "vitedit/rng.hpp"
#include "vitedit/tensor.hpp"

using namespace vitedit;

namespace {

// Independent reference: naive triple loop, f64 accumulation in ascending k.
MatF matmul_reference(const MatF& a, const MatF& b) {
  MatF c(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (Eigen::Index k = 0; k < a.cols(); ++k)
        acc = std::fma(static_cast<double>(a(i, k)), static_cast<double>(b(k, j)), acc);
      c(i, j) = static_cast<float>(acc);
    }
  return c;
}

MatF random_mat(Eigen::Index r, Eigen::Index c, uint64_t seed, float scale = 1.0f) {
  Rng rng(seed);
  MatF m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0f, scale);
  return m;
}

double gelu_erf(double x) { return x * 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); }

}  // namespace

TEST_CASE("matmul identity") {
  MatF m = random_mat(3, 5, 11);
  MatF id = MatF::Identity(3, 3);
  MatF out = matmul(id, m);
  CHECK(out == m);
}

TEST_CASE("matmul hand example") {
  MatF a(2, 2), b(2, 1);
  a << 1, 2, 3, 4;
  b << 0, 1;
  MatF c = matmul(a, b);
  CHECK(c(0, 0) == 2.0f);
  CHECK(c(1, 0) == 4.0f);
}

TEST_CASE("matmul all-ones row times column sums K") {
  for (int k : {1, 7, 64, 257}) {
    MatF a = MatF::Ones(1, k), b = MatF::Ones(k, 1);
    CHECK(matmul(a, b)(0, 0) == static_cast<float>(k));
  }
}

TEST_CASE("matmul shape error") {
  MatF a(2, 3), b(4, 2);
  a.setZero();
  b.setZero();
  CHECK_THROWS_AS(matmul(a, b), Error);
}

TEST_CASE("matmul matches naive f64 oracle bit for bit") {
  for (uint64_t seed : {1u, 2u, 3u}) {
    MatF a = random_mat(17, 64, seed, 2.0f);
    MatF b = random_mat(64, 192, seed + 100, 2.0f);
    MatF mine = matmul(a, b);
    MatF ref = matmul_reference(a, b);
    REQUIRE(mine.rows() == ref.rows());
    bool equal = true;
    for (Eigen::Index i = 0; i < mine.size(); ++i)
      if (mine.data()[i] != ref.data()[i]) equal = false;
    CHECK(equal);
  }
}

TEST_CASE("softmax uniform on equal logits") {
  MatF x = MatF::Constant(2, 8, 3.25f);
  MatF p = softmax_rows(x);
  for (Eigen::Index j = 0; j < 8; ++j) CHECK(p(0, j) == doctest::Approx(0.125).epsilon(1e-6));
}

TEST_CASE("softmax large-spike lower bound") {
  const int n = 17;
  for (float gamma : {10.0f, 40.0f, 90.0f}) {
    MatF x = MatF::Zero(1, n);
    x(0, 0) = gamma;
    MatF p = softmax_rows(x);
    const double bound = 1.0 / (1.0 + (n - 1) * std::exp(-static_cast<double>(gamma)));
    CHECK(static_cast<double>(p(0, 0)) >= bound - 1e-9);
  }
}

TEST_CASE("softmax closed form quarter three-quarters") {
  MatF x(1, 2);
  x << 0.0f, std::log(3.0f);
  MatF p = softmax_rows(x);
  CHECK(p(0, 0) == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(p(0, 1) == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("softmax rows sum to one under extreme spread") {
  Rng rng(5);
  MatF x(16, 32);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal(0.0f, 40.0f);
  x(3, 7) = 95.0f;
  x(3, 8) = -95.0f;  // spread well beyond 80
  MatF p = softmax_rows(x);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    CHECK(p.row(i).minCoeff() >= 0.0f);
    CHECK(std::abs(p.row(i).sum() - 1.0f) <= 1e-6f);
  }
}

TEST_CASE("softmax rejects NaN") {
  MatF x(1, 3);
  x << 1.0f, std::nanf(""), 0.0f;
  CHECK_THROWS_AS(softmax_rows(x), Error);
}

TEST_CASE("layer_norm constant row maps to zero") {
  MatF x = MatF::Constant(1, 8, 4.0f);
  VecF g = VecF::Ones(8), b = VecF::Zero(8);
  MatF out = layer_norm(x, g, b);
  for (Eigen::Index j = 0; j < 8; ++j) CHECK(out(0, j) == 0.0f);
}

TEST_CASE("layer_norm two-point row") {
  MatF x(1, 2);
  x << 1.0f, -1.0f;
  MatF out = layer_norm(x, VecF::Ones(2), VecF::Zero(2));
  CHECK(out(0, 0) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(out(0, 1) == doctest::Approx(-1.0).epsilon(1e-5));
}

TEST_CASE("layer_norm zero gain broadcasts bias") {
  MatF x = random_mat(3, 6, 17);
  VecF g = VecF::Zero(6);
  VecF b(6);
  b << 1, 2, 3, 4, 5, 6;
  MatF out = layer_norm(x, g, b);
  for (Eigen::Index i = 0; i < 3; ++i)
    for (Eigen::Index j = 0; j < 6; ++j) CHECK(out(i, j) == b[j]);
}

TEST_CASE("layer_norm row moments before affine") {
  MatF x = random_mat(32, 64, 23, 3.0f);
  MatF out = layer_norm(x, VecF::Ones(64), VecF::Zero(64));
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    double mean = 0, var = 0;
    for (Eigen::Index j = 0; j < 64; ++j) mean += out(i, j);
    mean /= 64;
    for (Eigen::Index j = 0; j < 64; ++j) var += (out(i, j) - mean) * (out(i, j) - mean);
    var /= 64;
    CHECK(std::abs(mean) <= 1e-5);
    CHECK(var >= 1.0 - 1e-4);
    CHECK(var <= 1.0 + 1e-4);
  }
}

TEST_CASE("gelu fixed points") {
  CHECK(gelu(0.0f) == 0.0f);
  CHECK(std::abs(gelu(-10.0f)) < 1e-8f);
  // Tanh form against the erf oracle; the approximation band is ~1e-4 here.
  CHECK(std::abs(static_cast<double>(gelu(-2.0f)) - gelu_erf(-2.0)) < 1e-3);
  CHECK(gelu(-2.0f) == doctest::Approx(-0.0454).epsilon(2e-2));
}

TEST_CASE("gelu sigmoid cross-approximation band") {
  double worst = 0;
  for (double x = -6.0; x <= 6.0; x += 0.004) {
    const double sig = x / (1.0 + std::exp(-1.702 * x));
    worst = std::max(worst, std::abs(static_cast<double>(gelu(static_cast<float>(x))) - sig));
  }
  CHECK(worst <= 0.021);
}

TEST_CASE("gelu monotone above its stationary point") {
  float prev = gelu(-0.74f);
  for (double x = -0.73; x <= 8.0; x += 0.01) {
    const float v = gelu(static_cast<float>(x));
    CHECK(v >= prev - 1e-7f);
    prev = v;
  }
}

TEST_CASE("tensor invariants") {
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.size() == 6);
  CHECK_NOTHROW(t.validate());
  t.shape = {2, 4};
  CHECK_THROWS_AS(t.validate(), Error);
  t.shape = {2, -3};
  CHECK_THROWS_AS(t.validate(), Error);
}
