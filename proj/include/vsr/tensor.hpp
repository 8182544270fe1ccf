#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "vsr/geometry.hpp"

namespace vsr {

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string shapeToString(const Shape& s);

struct TensorImpl;

/// Per-backward-pass gradient workspace. Keyed by node; keeps concurrent
/// backward passes over shared leaves (parameters) race-free: leaf gradients
/// are folded into their persistent buffers (or a caller-supplied map) only
/// at the end of the pass.
struct GradCtx {
  std::unordered_map<const TensorImpl*, std::vector<double>> grads;

  std::vector<double>& of(const TensorImpl* t);
  std::vector<double>* find(const TensorImpl* t);
  bool wants(const TensorImpl* t) const;
};

/// Backward rule of one op: reads the node's gradient from the context and
/// accumulates into the gradients of its parents. `self` is the op's node.
using BackFn = std::function<void(GradCtx&, const TensorImpl* self)>;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // persistent; leaves only
  bool requiresGrad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  BackFn backfn;  // empty for leaves

  bool isLeaf() const { return !backfn; }
};

/// Gradients of leaf tensors from one backward pass, keyed by node identity.
using GradMap = std::unordered_map<const TensorImpl*, std::vector<double>>;

/// Dense row-major float64 N-d array, optionally tracked by a reverse-mode
/// differentiation graph. Value type: copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor fromVector(Shape shape, std::vector<double> data);
  /// Leaf with gradient tracking (a trainable value).
  static Tensor leaf(Shape shape, std::vector<double> data, bool requiresGrad);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::size_t size() const { return impl_->data.size(); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& vec() { return impl_->data; }
  const std::vector<double>& vec() const { return impl_->data; }
  double at(std::size_t i) const { return impl_->data[i]; }

  /// Scalar extraction; requires size() == 1.
  double item() const;

  bool requiresGrad() const { return impl_ && impl_->requiresGrad; }

  /// Persistent gradient of a leaf (allocated zero on first access).
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zeroGrad();

  /// Reverse-mode pass from a scalar root. Accumulates into leaf .grad
  /// (two passes double the gradient). If `into` is given, leaf gradients
  /// are added there instead of the persistent buffers.
  void backward(GradMap* into = nullptr) const;

  TensorImpl* node() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& handle() const { return impl_; }

  bool allFinite() const;

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend Tensor makeOp(Shape shape, std::vector<double> data,
                       std::vector<Tensor> parents, BackFn fn);
};

/// Builds a graph-tracked op result. `fn` may be empty for detached results.
Tensor makeOp(Shape shape, std::vector<double> data,
              std::vector<Tensor> parents, BackFn fn);

/// RAII guard disabling graph construction (inference / finite differences).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool gradEnabled();

// ---- primitive operations ------------------------------------------------

// Elementwise with trailing-aligned singleton broadcasting (numpy-style,
// stretch only along dims where the smaller operand has size 1).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor addScalar(const Tensor& x, double c);
Tensor mulScalar(const Tensor& x, double c);
/// c - x
Tensor rsubScalar(double c, const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& x);

/// Cross-correlation, [H,W,Cin] * [kh,kw,Cin,Cout] -> [H',W',Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, int stride = 1, int pad = 0);

Tensor maxPool2d(const Tensor& x);        // 2x2, stride 2
Tensor nearestUpsample2(const Tensor& x); // x2 both spatial dims

Tensor softmax(const Tensor& x, int axis = -1);
Tensor layerNorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps = 1e-5);

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor reshape(const Tensor& x, Shape shape);
/// Slice of the last axis, [from, to).
Tensor sliceLast(const Tensor& x, int from, int to);

Tensor sum(const Tensor& x);  // scalar

/// Mean over N of -log softmax(logits)[target]; logits [N,C].
Tensor crossEntropy(const Tensor& logits, const std::vector<int>& targets);
/// Elementwise 0.5 d^2 (|d|<1) else |d|-0.5, averaged over all elements.
Tensor smoothL1(const Tensor& pred, const Tensor& target);

/// x[N,K] * w[K,M] + b[M].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Row gather: table[R,C], idx values in [0,R) -> [n,C].
Tensor gatherRows(const Tensor& table, const std::vector<int>& idx);
/// Pixel paint: rows[R,C] and a per-pixel row index (-1 = untouched/zero)
/// -> [h,w,C].
Tensor paintGrid(const Tensor& rows, const std::vector<int>& pixelRow,
                 int h, int w);
/// Mean of table rows per bag: table[V,C], bags of indices -> [B,C].
Tensor bagMean(const Tensor& table, const std::vector<std::vector<int>>& bags);

/// Bilinear RoI sampling of map [Hp,Wp,D] over `bins` x `bins` bin centers
/// of `box` given in page coordinates -> [1, bins*bins*D].
Tensor bilinearRoi(const Tensor& map, const FloatBox& box, int bins,
                   double pageW, double pageH);

/// Offset decoding (dx,dy,dw,dh per row) against fixed anchor boxes, in the
/// log-width parametrization; zero offsets reproduce the anchors bit-exactly.
Tensor decodeBoxes(const Tensor& offsets, const std::vector<FloatBox>& anchors);

}  // namespace vsr
