#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vsr/params.hpp"
#include "vsr/tensor.hpp"

namespace vsr {

struct GradCheckRow {
  std::string name;
  double maxRelErr = 0.0;
  std::size_t checkedElements = 0;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;

  double worst() const;
  bool pass(double tol) const { return worst() < tol; }
};

struct GradCheckOptions {
  double h = 1e-5;
  /// Cap on probed elements per parameter (seeded subsample when exceeded).
  std::size_t maxElementsPerParam = static_cast<std::size_t>(-1);
  std::uint64_t seed = 7;
};

/// Central-difference verification of reverse-mode gradients.
/// `f` must rebuild its graph from the current parameter values and return a
/// scalar. Relative error per element: |ad - fd| / max(1e-8, |ad| + |fd|).
GradCheckReport gradCheck(const std::function<Tensor()>& f,
                          std::span<Parameter> params,
                          const GradCheckOptions& opts = {});

}  // namespace vsr
