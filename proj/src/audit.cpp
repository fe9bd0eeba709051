#include "vitedit/audit.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace vitedit {

VecD singular_values_jacobi(const MatD& m, double tol, int max_sweeps) {
  // Gram matrix of the smaller side keeps the sweep cost minimal.
  MatD g = m.rows() <= m.cols() ? MatD(m * m.transpose()) : MatD(m.transpose() * m);
  const Eigen::Index n = g.rows();
  auto off_norm = [&]() {
    double s = 0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = i + 1; j < n; ++j) s += g(i, j) * g(i, j);
    return std::sqrt(2.0 * s);
  };
  const double scale = std::max(g.norm(), 1.0);
  int sweep = 0;
  while (off_norm() > tol * scale) {
    if (++sweep > max_sweeps)
      fail("numeric", "jacobi eigensolver did not converge within " +
                          std::to_string(max_sweeps) + " sweeps");
    for (Eigen::Index p = 0; p < n - 1; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) {
        if (g(p, q) == 0.0) continue;
        const double theta = (g(q, q) - g(p, p)) / (2.0 * g(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double gkp = g(k, p), gkq = g(k, q);
          g(k, p) = c * gkp - s * gkq;
          g(k, q) = s * gkp + c * gkq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double gpk = g(p, k), gqk = g(q, k);
          g(p, k) = c * gpk - s * gqk;
          g(q, k) = s * gpk + c * gqk;
        }
      }
  }
  VecD sv(n);
  for (Eigen::Index i = 0; i < n; ++i) sv[i] = std::sqrt(std::max(0.0, g(i, i)));
  std::sort(sv.data(), sv.data() + n, std::greater<double>());
  return sv;
}

namespace {
VecD row_norms(const MatF& m) {
  VecD out(m.rows());
  for (Eigen::Index i = 0; i < m.rows(); ++i) out[i] = m.row(i).norm();
  return out;
}
VecD col_norms(const MatF& m) {
  VecD out(m.cols());
  for (Eigen::Index i = 0; i < m.cols(); ++i) out[i] = m.col(i).norm();
  return out;
}
}  // namespace

WeightAudit weight_audit(const Checkpoint& before, const Checkpoint& after, int block) {
  if (!before.config || !after.config) fail("config", "checkpoint has no configuration");
  const ViTConfig& cfg = *before.config;
  if (cfg.embed_dim != after.config->embed_dim || cfg.depth != after.config->depth)
    fail("config", "checkpoints have different configurations");
  if (block < 0 || block >= cfg.depth) fail("config", "block index out of range");

  WeightAudit audit;
  const MatF proj_b = before.at(names::proj_w(block)).matrix();
  const MatF proj_a = after.at(names::proj_w(block)).matrix();
  const MatF fc2_b = before.at(names::fc2_w(block)).matrix();
  const MatF fc2_a = after.at(names::fc2_w(block)).matrix();

  for (int h = 0; h < cfg.num_heads; ++h) {
    SpectrumPair sp;
    sp.name = "proj head " + std::to_string(h);
    const auto cols = Eigen::seqN(h * cfg.head_dim, cfg.head_dim);
    sp.before = singular_values_jacobi(proj_b(Eigen::all, cols).cast<double>());
    sp.after = singular_values_jacobi(proj_a(Eigen::all, cols).cast<double>());
    audit.spectra.push_back(std::move(sp));
  }
  SpectrumPair fs;
  fs.name = "fc2";
  fs.before = singular_values_jacobi(fc2_b.cast<double>());
  fs.after = singular_values_jacobi(fc2_a.cast<double>());
  audit.spectra.push_back(std::move(fs));

  audit.norms.push_back({"proj row", row_norms(proj_b), row_norms(proj_a)});
  audit.norms.push_back({"proj col", col_norms(proj_b), col_norms(proj_a)});
  audit.norms.push_back({"fc2 row", row_norms(fc2_b), row_norms(fc2_a)});
  audit.norms.push_back({"fc2 col", col_norms(fc2_b), col_norms(fc2_a)});
  return audit;
}

std::string WeightAudit::spectra_csv() const {
  std::ostringstream os;
  os.precision(9);
  os << "matrix,index,sv_before,sv_after\n";
  for (const SpectrumPair& sp : spectra)
    for (Eigen::Index i = 0; i < sp.before.size(); ++i)
      os << sp.name << "," << i << "," << sp.before[i] << "," << sp.after[i] << "\n";
  return os.str();
}

std::string WeightAudit::norms_csv() const {
  std::ostringstream os;
  os.precision(9);
  os << "slice,index,norm_before,norm_after\n";
  for (const NormPair& np : norms)
    for (Eigen::Index i = 0; i < np.before.size(); ++i)
      os << np.name << "," << i << "," << np.before[i] << "," << np.after[i] << "\n";
  return os.str();
}

std::string WeightAudit::histogram_csv(int bins) const {
  std::ostringstream os;
  os.precision(9);
  os << "slice,bin_lo,bin_hi,count_before,count_after\n";
  for (const NormPair& np : norms) {
    double lo = 1e300, hi = -1e300;
    for (Eigen::Index i = 0; i < np.before.size(); ++i) {
      lo = std::min({lo, np.before[i], np.after[i]});
      hi = std::max({hi, np.before[i], np.after[i]});
    }
    const double width = (hi - lo) / bins > 0 ? (hi - lo) / bins : 1.0;
    std::vector<int> cb(bins, 0), ca(bins, 0);
    auto slot = [&](double v) {
      return std::min<int>(bins - 1, static_cast<int>((v - lo) / width));
    };
    for (Eigen::Index i = 0; i < np.before.size(); ++i) {
      ++cb[slot(np.before[i])];
      ++ca[slot(np.after[i])];
    }
    for (int i = 0; i < bins; ++i)
      os << np.name << "," << lo + i * width << "," << lo + (i + 1) * width << ","
         << cb[i] << "," << ca[i] << "\n";
  }
  return os.str();
}

}  // namespace vitedit
