#include "vsr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "vsr/errors.hpp"
#include "vsr/rng.hpp"

namespace vsr {

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const GradCheckRow& r : rows) w = std::max(w, r.maxRelErr);
  return w;
}

GradCheckReport gradCheck(const std::function<Tensor()>& f,
                          std::span<Parameter> params,
                          const GradCheckOptions& opts) {
  Sgd::zeroGrad(params);
  Tensor loss = f();
  if (loss.size() != 1) throw ContractError("gradCheck requires a scalar-valued function");
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Parameter& p : params) analytic.push_back(p.tensor.grad());

  auto evalAt = [&]() {
    NoGradGuard ng;
    return f().item();
  };

  GradCheckReport report;
  Rng rng(opts.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = params[pi];
    std::vector<double>& theta = p.tensor.vec();
    std::vector<std::size_t> elems;
    if (theta.size() <= opts.maxElementsPerParam) {
      elems.resize(theta.size());
      for (std::size_t i = 0; i < theta.size(); ++i) elems[i] = i;
    } else {
      // Seeded subsample without replacement.
      std::vector<std::size_t> all(theta.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      for (std::size_t i = 0; i < opts.maxElementsPerParam; ++i) {
        std::size_t j = i + static_cast<std::size_t>(rng.next() % (all.size() - i));
        std::swap(all[i], all[j]);
      }
      elems.assign(all.begin(), all.begin() + static_cast<long>(opts.maxElementsPerParam));
      std::sort(elems.begin(), elems.end());
    }

    GradCheckRow row{p.name, 0.0, elems.size()};
    for (std::size_t e : elems) {
      double saved = theta[e];
      theta[e] = saved + opts.h;
      double up = evalAt();
      theta[e] = saved - opts.h;
      double down = evalAt();
      theta[e] = saved;
      double fd = (up - down) / (2.0 * opts.h);
      double ad = analytic[pi][e];
      double rel = std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd));
      row.maxRelErr = std::max(row.maxRelErr, rel);
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace vsr
