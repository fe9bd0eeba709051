#include "vitedit/tensor.hpp"

#include <cmath>

namespace vitedit {

Tensor::Tensor(std::vector<int64_t> shape_, VecF data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
  validate();
}

Tensor Tensor::zeros(std::vector<int64_t> s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  Tensor t;
  t.shape = std::move(s);
  t.data = VecF::Zero(n);
  t.validate();
  return t;
}

Tensor Tensor::from_matrix(const MatF& m) {
  Tensor t;
  t.shape = {m.rows(), m.cols()};
  t.data = Eigen::Map<const VecF>(m.data(), m.size());
  return t;
}

Tensor Tensor::from_vector(const VecF& v) {
  Tensor t;
  t.shape = {v.size()};
  t.data = v;
  return t;
}

int64_t Tensor::size() const { return data.size(); }

int64_t Tensor::rows() const {
  if (shape.size() != 2) fail("shape", "tensor is not 2-d");
  return shape[0];
}

int64_t Tensor::cols() const {
  if (shape.size() != 2) fail("shape", "tensor is not 2-d");
  return shape[1];
}

Eigen::Map<MatF> Tensor::matrix() {
  return Eigen::Map<MatF>(data.data(), rows(), cols());
}

Eigen::Map<const MatF> Tensor::matrix() const {
  return Eigen::Map<const MatF>(data.data(), rows(), cols());
}

void Tensor::validate(const std::string& name) const {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) fail("shape", "non-positive dimension in tensor " + name);
    n *= d;
  }
  if (n != data.size())
    fail("shape", "shape product does not match data length in tensor " + name);
}

void matmul_f64rhs(const MatF& a, const MatD& b, MatF& out, std::vector<double>& scratch) {
  const Eigen::Index m = a.rows(), kk = a.cols(), n = b.cols();
  if (kk != b.rows()) fail("shape", "matmul inner dimensions disagree");
  out.resize(m, n);
  scratch.assign(n, 0.0);
  double* acc = scratch.data();
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) acc[j] = 0.0;
    const float* arow = a.data() + i * kk;
    Eigen::Index k = 0;
    for (; k + 4 <= kk; k += 4) {
      const double s0 = arow[k + 0], s1 = arow[k + 1];
      const double s2 = arow[k + 2], s3 = arow[k + 3];
      const double* r0 = b.data() + (k + 0) * n;
      const double* r1 = b.data() + (k + 1) * n;
      const double* r2 = b.data() + (k + 2) * n;
      const double* r3 = b.data() + (k + 3) * n;
      for (Eigen::Index j = 0; j < n; ++j) {
        double v = acc[j];
        v = std::fma(s0, r0[j], v);
        v = std::fma(s1, r1[j], v);
        v = std::fma(s2, r2[j], v);
        v = std::fma(s3, r3[j], v);
        acc[j] = v;
      }
    }
    for (; k < kk; ++k) {
      const double s = arow[k];
      const double* r = b.data() + k * n;
      for (Eigen::Index j = 0; j < n; ++j) acc[j] = std::fma(s, r[j], acc[j]);
    }
    float* crow = out.data() + i * n;
    for (Eigen::Index j = 0; j < n; ++j) crow[j] = static_cast<float>(acc[j]);
  }
}

MatF matmul(const MatF& a, const MatF& b) {
  if (a.cols() != b.rows()) fail("shape", "matmul inner dimensions disagree");
  MatD b64 = b.cast<double>();
  MatF out;
  std::vector<double> scratch;
  matmul_f64rhs(a, b64, out, scratch);
  return out;
}

MatF softmax_rows(const MatF& logits) {
  if (!logits.allFinite()) fail("numeric", "softmax input is not finite");
  MatF out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const float rowmax = logits.row(i).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      const double e = std::exp(static_cast<double>(logits(i, j)) - rowmax);
      out(i, j) = static_cast<float>(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (Eigen::Index j = 0; j < logits.cols(); ++j)
      out(i, j) = static_cast<float>(out(i, j) * inv);
  }
  return out;
}

MatF layer_norm(const MatF& x, const VecF& gain, const VecF& bias, float eps) {
  const Eigen::Index d = x.cols();
  if (d < 2) fail("shape", "layer_norm needs at least 2 features");
  if (gain.size() != d || bias.size() != d)
    fail("shape", "layer_norm gain/bias size mismatch");
  MatF out(x.rows(), d);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) mean += x(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const double c = x(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    for (Eigen::Index j = 0; j < d; ++j) {
      const double z = (x(i, j) - mean) * inv;
      out(i, j) = static_cast<float>(z * gain[j] + bias[j]);
    }
  }
  return out;
}

float gelu(float x) {
  const double xd = x;
  const double inner = 0.7978845608 * (xd + 0.044715 * xd * xd * xd);
  return static_cast<float>(0.5 * xd * (1.0 + std::tanh(inner)));
}

MatF gelu(const MatF& x) {
  MatF out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) out.data()[i] = gelu(x.data()[i]);
  return out;
}

}  // namespace vitedit
