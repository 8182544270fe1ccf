#include "vsr/params.hpp"

#include <cmath>

#include "vsr/errors.hpp"
#include "vsr/kernels.hpp"

namespace vsr {

Tensor ParamStore::addRaw(const std::string& name, Shape shape, std::vector<double> data) {
  for (const Parameter& p : params_) {
    if (p.name == name) throw ContractError("duplicate parameter name '" + name + "'");
  }
  Tensor t = Tensor::leaf(std::move(shape), std::move(data), true);
  params_.push_back({name, t});
  return t;
}

Tensor ParamStore::addWeight(const std::string& name, Shape shape, int fanIn, Rng& rng) {
  if (fanIn <= 0) throw ContractError("fanIn must be positive for '" + name + "'");
  double bound = std::sqrt(1.0 / fanIn);
  std::vector<double> data(numel(shape));
  for (double& v : data) v = rng.uniform(-bound, bound);
  return addRaw(name, std::move(shape), std::move(data));
}

Tensor ParamStore::addZeros(const std::string& name, Shape shape) {
  return addRaw(name, shape, std::vector<double>(numel(shape), 0.0));
}

Tensor ParamStore::addConst(const std::string& name, Shape shape, double value) {
  return addRaw(name, shape, std::vector<double>(numel(shape), value));
}

Tensor ParamStore::find(const std::string& name) const {
  for (const Parameter& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw ContractError("no parameter named '" + name + "'");
}

std::size_t ParamStore::totalElements() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.tensor.size();
  return n;
}

void Sgd::step(std::span<Parameter> params) {
  for (Parameter& p : params) {
    std::vector<double>& theta = p.tensor.vec();
    const std::vector<double>& g = p.tensor.grad();
    std::vector<double>& v = velocity_[p.tensor.node()];
    if (v.empty()) v.assign(theta.size(), 0.0);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = momentum_ * v[i] + (g[i] + weightDecay_ * theta[i]);
      theta[i] -= lr_ * v[i];
    }
  }
}

void Sgd::zeroGrad(std::span<Parameter> params) {
  for (Parameter& p : params) p.tensor.zeroGrad();
}

}  // namespace vsr
