#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "vsr/rng.hpp"
#include "vsr/tensor.hpp"

namespace vsr {

/// A named trainable tensor.
struct Parameter {
  std::string name;
  Tensor tensor;
};

/// Owns the parameters of a model component; names must stay unique.
class ParamStore {
 public:
  /// Weight with uniform(-sqrt(1/fanIn), +sqrt(1/fanIn)) init.
  Tensor addWeight(const std::string& name, Shape shape, int fanIn, Rng& rng);
  /// Zero-initialized (biases).
  Tensor addZeros(const std::string& name, Shape shape);
  /// Constant-initialized (layer-norm gains).
  Tensor addConst(const std::string& name, Shape shape, double value);

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  Tensor find(const std::string& name) const;

  std::size_t totalElements() const;

 private:
  Tensor addRaw(const std::string& name, Shape shape, std::vector<double> data);
  std::vector<Parameter> params_;
};

/// SGD with momentum and decoupled-from-nothing classic weight decay:
/// v = momentum*v + (g + weightDecay*theta); theta -= lr*v.
class Sgd {
 public:
  Sgd(double lr, double momentum = 0.9, double weightDecay = 0.0)
      : lr_(lr), momentum_(momentum), weightDecay_(weightDecay) {}

  void step(std::span<Parameter> params);
  static void zeroGrad(std::span<Parameter> params);
  void setLr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  double lr_, momentum_, weightDecay_;
  std::unordered_map<const TensorImpl*, std::vector<double>> velocity_;
};

/// "VSR1" + single-line JSON header {name -> {shape, offset}} + raw
/// little-endian float64 blobs. Bit-exact round trip.
void saveCheckpoint(const std::string& path, std::span<const Parameter> params);
void loadCheckpoint(const std::string& path, std::span<Parameter> params);

}  // namespace vsr
