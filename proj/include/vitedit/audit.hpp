#pragma once

#include "vitedit/checkpoint.hpp"

namespace vitedit {

// Singular values of a dense matrix via cyclic Jacobi sweeps on the Gram
// matrix of the smaller side; descending order. Throws Error("numeric")
// when the off-diagonal norm has not fallen below tol after max_sweeps.
VecD singular_values_jacobi(const MatD& m, double tol = 1e-10, int max_sweeps = 100);

// Appendix-style weight-distribution diagnostics for one block: head-wise
// singular spectra of the attention projection, the full fc2 spectrum, and
// row/column norms, before vs after an edit.
struct SpectrumPair {
  std::string name;
  VecD before, after;
};
struct NormPair {
  std::string name;  // "<matrix> row" or "<matrix> col"
  VecD before, after;
};
struct WeightAudit {
  std::vector<SpectrumPair> spectra;
  std::vector<NormPair> norms;
  std::string spectra_csv() const;
  std::string norms_csv() const;
  std::string histogram_csv(int bins = 30) const;
};
WeightAudit weight_audit(const Checkpoint& before, const Checkpoint& after, int block);

}  // namespace vitedit
