#pragma once

#include <cstdint>
#include <vector>

#include "vitedit/common.hpp"

namespace vitedit {

// Dense row-major f32 tensor, the unit stored in checkpoints.
struct Tensor {
  std::vector<int64_t> shape;
  VecF data;  // row-major contiguous

  Tensor() = default;
  Tensor(std::vector<int64_t> shape_, VecF data_);
  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor from_matrix(const MatF& m);
  static Tensor from_vector(const VecF& v);

  int64_t size() const;
  int64_t rows() const;
  int64_t cols() const;
  Eigen::Map<MatF> matrix();
  Eigen::Map<const MatF> matrix() const;
  VecF& vec() { return data; }
  const VecF& vec() const { return data; }

  // Shape product must equal data length; every dimension strictly positive.
  void validate(const std::string& name = "") const;
};

// c[i,j] = sum_k a[i,k] * b[k,j], accumulated in f64 (ascending k) and
// rounded to f32 once per entry.
MatF matmul(const MatF& a, const MatF& b);

// Same contract with the right operand pre-widened to f64; `scratch` avoids
// per-call allocation in the forward pass.
void matmul_f64rhs(const MatF& a, const MatD& b, MatF& out, std::vector<double>& scratch);

// Row-wise softmax with per-row max subtraction; exp/sum in f64.
// Throws Error("numeric") on non-finite input.
MatF softmax_rows(const MatF& logits);

// Per-row normalization to zero mean / unit variance (population, +eps),
// then the affine (gain, bias). Moments computed in f64.
MatF layer_norm(const MatF& x, const VecF& gain, const VecF& bias, float eps = 1e-6f);

// GELU, tanh form: 0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3))).
float gelu(float x);
MatF gelu(const MatF& x);

}  // namespace vitedit
