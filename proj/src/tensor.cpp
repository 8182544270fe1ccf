#include "vsr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include "vsr/errors.hpp"
#include "vsr/kernels.hpp"

namespace vsr {

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shapeToString(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace {

thread_local bool g_gradEnabled = true;

void checkShape(const Shape& s) {
  if (s.empty()) throw ShapeError("tensor rank must be >= 1");
  for (int d : s) {
    if (d <= 0) throw ShapeError("non-positive dim in shape " + shapeToString(s));
  }
}

}  // namespace

bool gradEnabled() { return g_gradEnabled; }

NoGradGuard::NoGradGuard() : previous_(g_gradEnabled) { g_gradEnabled = false; }
NoGradGuard::~NoGradGuard() { g_gradEnabled = previous_; }

std::vector<double>& GradCtx::of(const TensorImpl* t) {
  auto it = grads.find(t);
  if (it == grads.end()) {
    it = grads.emplace(t, std::vector<double>(t->data.size(), 0.0)).first;
  }
  return it->second;
}

std::vector<double>* GradCtx::find(const TensorImpl* t) {
  auto it = grads.find(t);
  return it == grads.end() ? nullptr : &it->second;
}

bool GradCtx::wants(const TensorImpl* t) const { return t->requiresGrad; }

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
  checkShape(shape);
  std::size_t n = numel(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(n, 0.0);
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::fromVector(Shape shape, std::vector<double> data) {
  checkShape(shape);
  if (numel(shape) != data.size()) {
    throw ShapeError("data size " + std::to_string(data.size()) +
                     " does not match shape " + shapeToString(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::leaf(Shape shape, std::vector<double> data, bool requiresGrad) {
  Tensor t = fromVector(std::move(shape), std::move(data));
  t.impl_->requiresGrad = requiresGrad;
  return t;
}

double Tensor::item() const {
  if (!impl_ || impl_->data.size() != 1) {
    throw ContractError("item() requires a scalar tensor");
  }
  return impl_->data[0];
}

std::vector<double>& Tensor::grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
  return const_cast<Tensor*>(this)->grad();
}

void Tensor::zeroGrad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

bool Tensor::allFinite() const {
  for (double v : impl_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::backward(GradMap* into) const {
  if (!impl_) throw ContractError("backward() on undefined tensor");
  if (impl_->data.size() != 1) throw ContractError("backward() requires a scalar root");
  if (!impl_->requiresGrad) {
    throw ContractError("backward() on a tensor with no gradient graph");
  }

  // Post-order over the grad-requiring ancestry; reversing it gives the
  // propagation order. Iterative: composed-model graphs get deep.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  struct Frame {
    TensorImpl* node;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({impl_.get(), 0});
  visited.insert(impl_.get());
  while (!stack.empty()) {
    Frame& fr = stack.back();
    if (fr.next < fr.node->parents.size()) {
      TensorImpl* p = fr.node->parents[fr.next++].get();
      if (p->requiresGrad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(fr.node);
      stack.pop_back();
    }
  }

  GradCtx ctx;
  ctx.of(impl_.get())[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (!node->backfn) continue;
    if (!ctx.find(node)) continue;  // no downstream gradient reached this node
    node->backfn(ctx, node);
  }

  for (TensorImpl* node : order) {
    if (!node->isLeaf() || !node->requiresGrad) continue;
    const std::vector<double>* g = ctx.find(node);
    if (!g) continue;
    std::vector<double>& sink = into ? (*into)[node] : node->grad;
    if (sink.empty()) sink.assign(node->data.size(), 0.0);
    kern::active().accumulate(g->data(), sink.data(), sink.size());
  }
}

Tensor makeOp(Shape shape, std::vector<double> data,
              std::vector<Tensor> parents, BackFn fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs = false;
  if (g_gradEnabled && fn) {
    for (const Tensor& p : parents) needs = needs || p.requiresGrad();
  }
  if (needs) {
    impl->requiresGrad = true;
    impl->parents.reserve(parents.size());
    for (Tensor& p : parents) impl->parents.push_back(p.handle());
    impl->backfn = std::move(fn);
  }
  return Tensor(std::move(impl));
}

// ---- broadcasting ------------------------------------------------------------

namespace {

struct BcastPlan {
  Shape out;
  std::vector<std::size_t> strideA, strideB;  // per out dim, 0 where stretched
  bool same = false;
};

BcastPlan planBroadcast(const Shape& a, const Shape& b) {
  BcastPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  std::size_t rank = std::max(a.size(), b.size());
  plan.out.resize(rank);
  std::vector<int> da(rank, 1), db(rank, 1);
  for (std::size_t i = 0; i < a.size(); ++i) da[rank - a.size() + i] = a[i];
  for (std::size_t i = 0; i < b.size(); ++i) db[rank - b.size() + i] = b[i];
  for (std::size_t i = 0; i < rank; ++i) {
    if (da[i] != db[i] && da[i] != 1 && db[i] != 1) {
      throw ShapeError("shapes not broadcast-compatible: " + shapeToString(a) +
                       " vs " + shapeToString(b));
    }
    plan.out[i] = std::max(da[i], db[i]);
  }
  plan.strideA.assign(rank, 0);
  plan.strideB.assign(rank, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = rank; i-- > 0;) {
    plan.strideA[i] = (da[i] == 1) ? 0 : sa;
    plan.strideB[i] = (db[i] == 1) ? 0 : sb;
    sa *= static_cast<std::size_t>(da[i]);
    sb *= static_cast<std::size_t>(db[i]);
  }
  return plan;
}

// Walks the broadcast output space in row-major order (fixed accumulation
// order keeps backward deterministic) calling f(outFlat, offA, offB).
template <typename F>
void forEachBroadcast(const BcastPlan& plan, F&& f) {
  std::size_t rank = plan.out.size();
  std::vector<int> idx(rank, 0);
  std::size_t total = numel(plan.out);
  std::size_t offA = 0, offB = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    f(flat, offA, offB);
    for (std::size_t i = rank; i-- > 0;) {
      ++idx[i];
      offA += plan.strideA[i];
      offB += plan.strideB[i];
      if (idx[i] < plan.out[i]) break;
      offA -= plan.strideA[i] * static_cast<std::size_t>(plan.out[i]);
      offB -= plan.strideB[i] * static_cast<std::size_t>(plan.out[i]);
      idx[i] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op) {
  BcastPlan plan = planBroadcast(a.shape(), b.shape());
  const auto& k = kern::active();
  std::vector<double> out(numel(plan.out));

  // Fast paths: identical shapes, and the ubiquitous [rows,C] op [C] bias
  // pattern. Everything else goes through the generic strided walk.
  bool rowwiseB = !plan.same && b.rank() == 1 && a.shape().back() == b.dim(0) &&
                  plan.out == a.shape();
  if (plan.same) {
    switch (op) {
      case BinOp::Add: k.add(a.data(), b.data(), out.data(), out.size()); break;
      case BinOp::Sub: k.sub(a.data(), b.data(), out.data(), out.size()); break;
      case BinOp::Mul: k.mul(a.data(), b.data(), out.data(), out.size()); break;
    }
  } else if (rowwiseB) {
    std::size_t c = static_cast<std::size_t>(b.dim(0));
    std::size_t rows = out.size() / c;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* ra = a.data() + r * c;
      double* ro = out.data() + r * c;
      switch (op) {
        case BinOp::Add: k.add(ra, b.data(), ro, c); break;
        case BinOp::Sub: k.sub(ra, b.data(), ro, c); break;
        case BinOp::Mul: k.mul(ra, b.data(), ro, c); break;
      }
    }
  } else {
    const double* pa = a.data();
    const double* pb = b.data();
    forEachBroadcast(plan, [&](std::size_t flat, std::size_t oa, std::size_t ob) {
      switch (op) {
        case BinOp::Add: out[flat] = pa[oa] + pb[ob]; break;
        case BinOp::Sub: out[flat] = pa[oa] - pb[ob]; break;
        case BinOp::Mul: out[flat] = pa[oa] * pb[ob]; break;
      }
    });
  }

  auto ai = a.handle();
  auto bi = b.handle();
  return makeOp(plan.out, std::move(out), {a, b},
                [ai, bi, plan, op](GradCtx& ctx, const TensorImpl* self) {
    const std::vector<double>& g = *ctx.find(self);
    const auto& k2 = kern::active();
    bool wantA = ctx.wants(ai.get());
    bool wantB = ctx.wants(bi.get());
    if (plan.same) {
      switch (op) {
        case BinOp::Add:
          if (wantA) k2.accumulate(g.data(), ctx.of(ai.get()).data(), g.size());
          if (wantB) k2.accumulate(g.data(), ctx.of(bi.get()).data(), g.size());
          break;
        case BinOp::Sub:
          if (wantA) k2.accumulate(g.data(), ctx.of(ai.get()).data(), g.size());
          if (wantB) {
            auto& gb = ctx.of(bi.get());
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
          }
          break;
        case BinOp::Mul:
          if (wantA) {
            auto& ga = ctx.of(ai.get());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
          }
          if (wantB) {
            auto& gb = ctx.of(bi.get());
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
          }
          break;
      }
      return;
    }
    std::vector<double>* ga = wantA ? &ctx.of(ai.get()) : nullptr;
    std::vector<double>* gb = wantB ? &ctx.of(bi.get()) : nullptr;
    const double* pa = ai->data.data();
    const double* pb = bi->data.data();
    forEachBroadcast(plan, [&](std::size_t flat, std::size_t oa, std::size_t ob) {
      double gv = g[flat];
      switch (op) {
        case BinOp::Add:
          if (ga) (*ga)[oa] += gv;
          if (gb) (*gb)[ob] += gv;
          break;
        case BinOp::Sub:
          if (ga) (*ga)[oa] += gv;
          if (gb) (*gb)[ob] -= gv;
          break;
        case BinOp::Mul:
          if (ga) (*ga)[oa] += gv * pb[ob];
          if (gb) (*gb)[ob] += gv * pa[oa];
          break;
      }
    });
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul); }

// ---- unary ---------------------------------------------------------------------

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  kern::active().relu(x.data(), out.data(), out.size());
  auto xi = x.handle();
  return makeOp(x.shape(), std::move(out), {x},
                [xi](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(xi.get())) return;
    const std::vector<double>& g = *ctx.find(self);
    kern::active().reluGrad(xi->data.data(), g.data(), ctx.of(xi.get()).data(), g.size());
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = x.at(i);
    if (v >= 0) {
      out[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      double e = std::exp(v);
      out[i] = e / (1.0 + e);
    }
  }
  auto xi = x.handle();
  return makeOp(x.shape(), std::move(out), {x},
                [xi](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(xi.get())) return;
    const std::vector<double>& g = *ctx.find(self);
    const std::vector<double>& y = self->data;
    auto& gx = ctx.of(xi.get());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Tensor addScalar(const Tensor& x, double c) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) + c;
  auto xi = x.handle();
  return makeOp(x.shape(), std::move(out), {x},
                [xi](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(xi.get())) return;
    const std::vector<double>& g = *ctx.find(self);
    kern::active().accumulate(g.data(), ctx.of(xi.get()).data(), g.size());
  });
}

Tensor mulScalar(const Tensor& x, double c) {
  std::vector<double> out(x.size());
  kern::active().scale(x.data(), c, out.data(), out.size());
  auto xi = x.handle();
  return makeOp(x.shape(), std::move(out), {x},
                [xi, c](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(xi.get())) return;
    const std::vector<double>& g = *ctx.find(self);
    kern::active().axpy(c, g.data(), ctx.of(xi.get()).data(), g.size());
  });
}

Tensor rsubScalar(double c, const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c - x.at(i);
  auto xi = x.handle();
  return makeOp(x.shape(), std::move(out), {x},
                [xi](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(xi.get())) return;
    const std::vector<double>& g = *ctx.find(self);
    auto& gx = ctx.of(xi.get());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i];
  });
}

// ---- matmul / transpose -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + shapeToString(a.shape()) + " x " +
                     shapeToString(b.shape()));
  }
  int r = a.dim(0), kk = a.dim(1), c = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(r) * c, 0.0);
  const auto& k = kern::active();
  for (int i = 0; i < r; ++i) {
    double* orow = out.data() + static_cast<std::size_t>(i) * c;
    const double* arow = a.data() + static_cast<std::size_t>(i) * kk;
    for (int p = 0; p < kk; ++p) {
      k.axpy(arow[p], b.data() + static_cast<std::size_t>(p) * c, orow,
             static_cast<std::size_t>(c));
    }
  }
  auto ai = a.handle();
  auto bi = b.handle();
  return makeOp({r, c}, std::move(out), {a, b},
                [ai, bi, r, kk, c](GradCtx& ctx, const TensorImpl* self) {
    const std::vector<double>& g = *ctx.find(self);
    const auto& k2 = kern::active();
    if (ctx.wants(ai.get())) {
      // dA[i,:] += sum_j g[i,j] * B^T[j,:]
      std::vector<double> bt(static_cast<std::size_t>(c) * kk);
      for (int p = 0; p < kk; ++p) {
        for (int j = 0; j < c; ++j) {
          bt[static_cast<std::size_t>(j) * kk + p] = bi->data[static_cast<std::size_t>(p) * c + j];
        }
      }
      auto& ga = ctx.of(ai.get());
      for (int i = 0; i < r; ++i) {
        double* garow = ga.data() + static_cast<std::size_t>(i) * kk;
        const double* grow = g.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
          k2.axpy(grow[j], bt.data() + static_cast<std::size_t>(j) * kk, garow,
                  static_cast<std::size_t>(kk));
        }
      }
    }
    if (ctx.wants(bi.get())) {
      // dB[p,:] += sum_i A[i,p] * g[i,:]
      auto& gb = ctx.of(bi.get());
      for (int p = 0; p < kk; ++p) {
        double* gbrow = gb.data() + static_cast<std::size_t>(p) * c;
        for (int i = 0; i < r; ++i) {
          k2.axpy(ai->data[static_cast<std::size_t>(i) * kk + p],
                  g.data() + static_cast<std::size_t>(i) * c, gbrow,
                  static_cast<std::size_t>(c));
        }
      }
    }
  });
}

Tensor transpose2d(const Tensor& x) {
  if (x.rank() != 2) {
    throw ShapeError("transpose2d expects rank 2, got " + shapeToString(x.shape()));
  }
  int r = x.dim(0), c = x.dim(1);
  std::vector<double> out(x.size());
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) {
      out[static_cast<std::size_t>(j) * r + i] = x.at(static_cast<std::size_t>(i) * c + j);
    }
  }
  auto xi = x.handle();
  return makeOp({c, r}, std::move(out), {x},
                [xi, r, c](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(xi.get())) return;
    const std::vector<double>& g = *ctx.find(self);
    auto& gx = ctx.of(xi.get());
    for (int j = 0; j < c; ++j) {
      for (int i = 0; i < r; ++i) {
        gx[static_cast<std::size_t>(i) * c + j] += g[static_cast<std::size_t>(j) * r + i];
      }
    }
  });
}

// ---- conv2d --------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.rank() != 3 || w.rank() != 4) {
    throw ShapeError("conv2d expects x[H,W,Cin], w[kh,kw,Cin,Cout], got " +
                     shapeToString(x.shape()) + " and " + shapeToString(w.shape()));
  }
  int h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  int kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  if (w.dim(2) != cin) {
    throw ShapeError("conv2d channel mismatch: x " + shapeToString(x.shape()) + " vs w " +
                     shapeToString(w.shape()));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d kernel dims must be odd");
  if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
  int hSpan = h + 2 * pad - kh;
  int wSpan = wd + 2 * pad - kw;
  if (hSpan < 0 || wSpan < 0 || hSpan % stride != 0 || wSpan % stride != 0) {
    throw ShapeError("conv2d output size not integral for x " + shapeToString(x.shape()) +
                     ", kernel " + shapeToString(w.shape()) + ", stride " +
                     std::to_string(stride) + ", pad " + std::to_string(pad));
  }
  int oh = hSpan / stride + 1;
  int ow = wSpan / stride + 1;

  std::vector<double> out(static_cast<std::size_t>(oh) * ow * cout, 0.0);
  const auto& k = kern::active();
  const double* px = x.data();
  const double* pw = w.data();
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double* orow = out.data() + (static_cast<std::size_t>(oy) * ow + ox) * cout;
      for (int ky = 0; ky < kh; ++ky) {
        int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= wd) continue;
          const double* xrow = px + (static_cast<std::size_t>(iy) * wd + ix) * cin;
          const double* wrow = pw + (static_cast<std::size_t>(ky) * kw + kx) * cin * cout;
          for (int ci = 0; ci < cin; ++ci) {
            k.axpy(xrow[ci], wrow + static_cast<std::size_t>(ci) * cout, orow,
                   static_cast<std::size_t>(cout));
          }
        }
      }
    }
  }

  auto xi = x.handle();
  auto wi = w.handle();
  return makeOp({oh, ow, cout}, std::move(out), {x, w},
                [xi, wi, h, wd, cin, kh, kw, cout, stride, pad, oh, ow](
                    GradCtx& ctx, const TensorImpl* self) {
    const std::vector<double>& g = *ctx.find(self);
    const auto& k2 = kern::active();
    bool wantX = ctx.wants(xi.get());
    bool wantW = ctx.wants(wi.get());
    std::vector<double>* gx = wantX ? &ctx.of(xi.get()) : nullptr;
    std::vector<double>* gw = wantW ? &ctx.of(wi.get()) : nullptr;
    // Transposed copy of the weights ([kh,kw,Cout,Cin]) so the dx update
    // runs on contiguous rows.
    std::vector<double> wt;
    if (wantX) {
      wt.resize(static_cast<std::size_t>(kh) * kw * cout * cin);
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const double* src = wi->data.data() + (static_cast<std::size_t>(ky) * kw + kx) * cin * cout;
          double* dst = wt.data() + (static_cast<std::size_t>(ky) * kw + kx) * cout * cin;
          for (int ci = 0; ci < cin; ++ci) {
            for (int co = 0; co < cout; ++co) {
              dst[static_cast<std::size_t>(co) * cin + ci] =
                  src[static_cast<std::size_t>(ci) * cout + co];
            }
          }
        }
      }
    }
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const double* grow = g.data() + (static_cast<std::size_t>(oy) * ow + ox) * cout;
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= wd) continue;
            std::size_t xoff = (static_cast<std::size_t>(iy) * wd + ix) * cin;
            if (gw) {
              const double* xrow = xi->data.data() + xoff;
              double* gwrow = gw->data() + (static_cast<std::size_t>(ky) * kw + kx) * cin * cout;
              for (int ci = 0; ci < cin; ++ci) {
                k2.axpy(xrow[ci], grow, gwrow + static_cast<std::size_t>(ci) * cout,
                        static_cast<std::size_t>(cout));
              }
            }
            if (gx) {
              double* gxrow = gx->data() + xoff;
              const double* wtrow = wt.data() + (static_cast<std::size_t>(ky) * kw + kx) * cout * cin;
              for (int co = 0; co < cout; ++co) {
                k2.axpy(grow[co], wtrow + static_cast<std::size_t>(co) * cin, gxrow,
                        static_cast<std::size_t>(cin));
              }
            }
          }
        }
      }
    }
  });
}

// ---- pooling / resampling --------------------------------------------------------

Tensor maxPool2d(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("maxPool2d expects [H,W,C], got " + shapeToString(x.shape()));
  int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxPool2d requires even spatial dims, got " + shapeToString(x.shape()));
  }
  int oh = h / 2, ow = w / 2;
  std::vector<double> out(static_cast<std::size_t>(oh) * ow * c);
  std::vector<std::uint32_t> arg(out.size());
  const double* px = x.data();
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      for (int ch = 0; ch < c; ++ch) {
        std::size_t best = (static_cast<std::size_t>(2 * oy) * w + 2 * ox) * c + ch;
        double bv = px[best];
        static constexpr int kDy[3] = {0, 1, 1};
        static constexpr int kDx[3] = {1, 0, 1};
        for (int t = 0; t < 3; ++t) {
          std::size_t idx =
              (static_cast<std::size_t>(2 * oy + kDy[t]) * w + 2 * ox + kDx[t]) * c + ch;
          if (px[idx] > bv) {  // strict: first maximum wins ties
            bv = px[idx];
            best = idx;
          }
        }
        std::size_t o = (static_cast<std::size_t>(oy) * ow + ox) * c + ch;
        out[o] = bv;
        arg[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  auto xi = x.handle();
  return makeOp({oh, ow, c}, std::move(out), {x},
                [xi, arg = std::move(arg)](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(xi.get())) return;
    const std::vector<double>& g = *ctx.find(self);
    auto& gx = ctx.of(xi.get());
    for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
  });
}

Tensor nearestUpsample2(const Tensor& x) {
  if (x.rank() != 3) {
    throw ShapeError("nearestUpsample2 expects [H,W,C], got " + shapeToString(x.shape()));
  }
  int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  int oh = 2 * h, ow = 2 * w;
  (void)h;
  std::vector<double> out(static_cast<std::size_t>(oh) * ow * c);
  for (int y = 0; y < oh; ++y) {
    for (int xx = 0; xx < ow; ++xx) {
      const double* src = x.data() + (static_cast<std::size_t>(y / 2) * w + xx / 2) * c;
      double* dst = out.data() + (static_cast<std::size_t>(y) * ow + xx) * c;
      std::copy(src, src + c, dst);
    }
  }
  auto xi = x.handle();
  return makeOp({oh, ow, c}, std::move(out), {x},
                [xi, w, c, oh, ow](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(xi.get())) return;
    const std::vector<double>& g = *ctx.find(self);
    auto& gx = ctx.of(xi.get());
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        const double* grow = g.data() + (static_cast<std::size_t>(y) * ow + xx) * c;
        double* dst = gx.data() + (static_cast<std::size_t>(y / 2) * w + xx / 2) * c;
        kern::active().accumulate(grow, dst, static_cast<std::size_t>(c));
      }
    }
  });
}

// ---- softmax / layerNorm -----------------------------------------------------------

namespace {

void axisSpans(const Shape& s, int axis, std::size_t& outer, std::size_t& k,
               std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[i]);
  k = static_cast<std::size_t>(s[axis]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) {
    inner *= static_cast<std::size_t>(s[i]);
  }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  int rank = x.rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("softmax axis out of range");
  for (double v : x.vec()) {
    if (!std::isfinite(v)) throw NumericError("softmax on non-finite input");
  }
  std::size_t outer, k, inner;
  axisSpans(x.shape(), axis, outer, k, inner);
  std::vector<double> out(x.size());
  const double* px = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      std::size_t base = o * k * inner + in;
      double m = px[base];
      for (std::size_t j = 1; j < k; ++j) m = std::max(m, px[base + j * inner]);
      double sumExp = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        double e = std::exp(px[base + j * inner] - m);
        out[base + j * inner] = e;
        sumExp += e;
      }
      double invSum = 1.0 / sumExp;
      for (std::size_t j = 0; j < k; ++j) out[base + j * inner] *= invSum;
    }
  }
  auto xi = x.handle();
  return makeOp(x.shape(), std::move(out), {x},
                [xi, outer, k, inner](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(xi.get())) return;
    const std::vector<double>& g = *ctx.find(self);
    const std::vector<double>& y = self->data;
    auto& gx = ctx.of(xi.get());
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        std::size_t base = o * k * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < k; ++j) {
          std::size_t idx = base + j * inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Tensor layerNorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (gamma.rank() != 1 || beta.rank() != 1) {
    throw ShapeError("layerNorm gamma/beta must be rank 1");
  }
  int c = x.shape().back();
  if (gamma.dim(0) != c || beta.dim(0) != c) {
    throw ShapeError("layerNorm channel mismatch: x " + shapeToString(x.shape()) +
                     ", gamma " + shapeToString(gamma.shape()) + ", beta " +
                     shapeToString(beta.shape()));
  }
  if (eps <= 0) throw ContractError("layerNorm eps must be > 0");
  std::size_t rows = x.size() / static_cast<std::size_t>(c);
  std::vector<double> out(x.size());
  std::vector<double> invStd(rows), means(rows);
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * c;
    double mean = 0.0;
    for (int i = 0; i < c; ++i) mean += row[i];
    mean /= c;
    double var = 0.0;
    for (int i = 0; i < c; ++i) {
      double d = row[i] - mean;
      var += d * d;
    }
    var /= c;
    double inv = 1.0 / std::sqrt(var + eps);
    means[r] = mean;
    invStd[r] = inv;
    double* orow = out.data() + r * c;
    for (int i = 0; i < c; ++i) orow[i] = pg[i] * ((row[i] - mean) * inv) + pb[i];
  }
  auto xi = x.handle();
  auto gi = gamma.handle();
  auto bi = beta.handle();
  return makeOp(x.shape(), std::move(out), {x, gamma, beta},
                [xi, gi, bi, c, rows, means = std::move(means), invStd = std::move(invStd)](
                    GradCtx& ctx, const TensorImpl* self) {
    const std::vector<double>& g = *ctx.find(self);
    bool wantX = ctx.wants(xi.get());
    bool wantG = ctx.wants(gi.get());
    bool wantB = ctx.wants(bi.get());
    if (!wantX && !wantG && !wantB) return;
    std::vector<double>* gx = wantX ? &ctx.of(xi.get()) : nullptr;
    std::vector<double>* gg = wantG ? &ctx.of(gi.get()) : nullptr;
    std::vector<double>* gb = wantB ? &ctx.of(bi.get()) : nullptr;
    const double* px2 = xi->data.data();
    const double* pg2 = gi->data.data();
    std::vector<double> xhat(static_cast<std::size_t>(c));
    std::vector<double> dxhat(static_cast<std::size_t>(c));
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = px2 + r * c;
      const double* grow = g.data() + r * c;
      double inv = invStd[r];
      for (int i = 0; i < c; ++i) xhat[static_cast<std::size_t>(i)] = (row[i] - means[r]) * inv;
      if (gg) {
        for (int i = 0; i < c; ++i) (*gg)[i] += grow[i] * xhat[static_cast<std::size_t>(i)];
      }
      if (gb) {
        for (int i = 0; i < c; ++i) (*gb)[i] += grow[i];
      }
      if (gx) {
        double m1 = 0.0, m2 = 0.0;
        for (int i = 0; i < c; ++i) {
          dxhat[static_cast<std::size_t>(i)] = grow[i] * pg2[i];
          m1 += dxhat[static_cast<std::size_t>(i)];
          m2 += dxhat[static_cast<std::size_t>(i)] * xhat[static_cast<std::size_t>(i)];
        }
        m1 /= c;
        m2 /= c;
        double* gxrow = gx->data() + r * c;
        for (int i = 0; i < c; ++i) {
          gxrow[i] += (dxhat[static_cast<std::size_t>(i)] - m1 -
                       xhat[static_cast<std::size_t>(i)] * m2) * inv;
        }
      }
    }
  });
}

// ---- structural ----------------------------------------------------------------

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  int rank = parts[0].rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("concat axis out of range");
  Shape outShape = parts[0].shape();
  for (std::size_t p = 1; p < parts.size(); ++p) {
    const Shape& s = parts[p].shape();
    if (static_cast<int>(s.size()) != rank) throw ShapeError("concat rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && s[static_cast<std::size_t>(i)] != outShape[static_cast<std::size_t>(i)]) {
        throw ShapeError("concat shape mismatch: " + shapeToString(parts[0].shape()) +
                         " vs " + shapeToString(s));
      }
    }
    outShape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
  }
  std::size_t inner = 1;
  for (int i = axis + 1; i < rank; ++i) inner *= static_cast<std::size_t>(outShape[static_cast<std::size_t>(i)]);
  std::size_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(outShape[static_cast<std::size_t>(i)]);

  std::vector<double> out(numel(outShape));
  std::size_t outRow = static_cast<std::size_t>(outShape[static_cast<std::size_t>(axis)]) * inner;
  std::size_t off = 0;
  std::vector<std::size_t> partOffsets(parts.size());
  std::vector<std::size_t> blocks(parts.size());
  for (std::size_t p = 0; p < parts.size(); ++p) {
    partOffsets[p] = off;
    blocks[p] = static_cast<std::size_t>(parts[p].dim(axis)) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      const double* src = parts[p].data() + o * blocks[p];
      std::copy(src, src + blocks[p], out.data() + o * outRow + off);
    }
    off += blocks[p];
  }

  std::vector<Tensor> parents(parts.begin(), parts.end());
  std::vector<std::shared_ptr<TensorImpl>> handles;
  handles.reserve(parts.size());
  for (const Tensor& t : parts) handles.push_back(t.handle());
  return makeOp(outShape, std::move(out), std::move(parents),
                [handles = std::move(handles), partOffsets = std::move(partOffsets),
                 blocks = std::move(blocks), outer, outRow](GradCtx& ctx, const TensorImpl* self) {
    const std::vector<double>& g = *ctx.find(self);
    for (std::size_t p = 0; p < handles.size(); ++p) {
      if (!ctx.wants(handles[p].get())) continue;
      auto& gp = ctx.of(handles[p].get());
      for (std::size_t o = 0; o < outer; ++o) {
        kern::active().accumulate(g.data() + o * outRow + partOffsets[p],
                                  gp.data() + o * blocks[p], blocks[p]);
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  checkShape(shape);
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape " + shapeToString(x.shape()) + " -> " + shapeToString(shape) +
                     " changes element count");
  }
  auto xi = x.handle();
  return makeOp(std::move(shape), x.vec(), {x},
                [xi](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(xi.get())) return;
    const std::vector<double>& g = *ctx.find(self);
    kern::active().accumulate(g.data(), ctx.of(xi.get()).data(), g.size());
  });
}

Tensor sliceLast(const Tensor& x, int from, int to) {
  int c = x.shape().back();
  if (from < 0 || to > c || from >= to) {
    throw ShapeError("sliceLast [" + std::to_string(from) + "," + std::to_string(to) +
                     ") invalid for last dim " + std::to_string(c));
  }
  Shape outShape = x.shape();
  outShape.back() = to - from;
  std::size_t rows = x.size() / static_cast<std::size_t>(c);
  std::size_t width = static_cast<std::size_t>(to - from);
  std::vector<double> out(rows * width);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = x.data() + r * c + from;
    std::copy(src, src + width, out.data() + r * width);
  }
  auto xi = x.handle();
  return makeOp(outShape, std::move(out), {x},
                [xi, rows, width, c, from](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(xi.get())) return;
    const std::vector<double>& g = *ctx.find(self);
    auto& gx = ctx.of(xi.get());
    for (std::size_t r = 0; r < rows; ++r) {
      kern::active().accumulate(g.data() + r * width, gx.data() + r * c + from, width);
    }
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.vec()) total += v;
  auto xi = x.handle();
  return makeOp({1}, {total}, {x}, [xi](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(xi.get())) return;
    double g = (*ctx.find(self))[0];
    auto& gx = ctx.of(xi.get());
    for (double& v : gx) v += g;
  });
}

// ---- losses --------------------------------------------------------------------

Tensor crossEntropy(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2) {
    throw ShapeError("crossEntropy expects logits [N,C], got " + shapeToString(logits.shape()));
  }
  int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(targets.size()) != n) {
    throw ContractError("crossEntropy target count " + std::to_string(targets.size()) +
                        " != rows " + std::to_string(n));
  }
  for (int t : targets) {
    if (t < 0 || t >= c) {
      throw ContractError("crossEntropy target " + std::to_string(t) + " out of range [0," +
                          std::to_string(c) + ")");
    }
  }
  const double* p = logits.data();
  std::vector<double> lse(static_cast<std::size_t>(n));
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* row = p + static_cast<std::size_t>(i) * c;
    double m = row[0];
    for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += std::exp(row[j] - m);
    lse[static_cast<std::size_t>(i)] = m + std::log(s);
    loss += lse[static_cast<std::size_t>(i)] - row[targets[static_cast<std::size_t>(i)]];
  }
  loss /= n;
  auto li = logits.handle();
  return makeOp({1}, {loss}, {logits},
                [li, targets, lse = std::move(lse), n, c](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(li.get())) return;
    double g = (*ctx.find(self))[0];
    auto& gl = ctx.of(li.get());
    const double* p2 = li->data.data();
    double invN = g / n;
    for (int i = 0; i < n; ++i) {
      const double* row = p2 + static_cast<std::size_t>(i) * c;
      double* grow = gl.data() + static_cast<std::size_t>(i) * c;
      for (int j = 0; j < c; ++j) {
        double prob = std::exp(row[j] - lse[static_cast<std::size_t>(i)]);
        grow[j] += (prob - (j == targets[static_cast<std::size_t>(i)] ? 1.0 : 0.0)) * invN;
      }
    }
  });
}

Tensor smoothL1(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("smoothL1 shape mismatch: " + shapeToString(pred.shape()) + " vs " +
                     shapeToString(target.shape()));
  }
  std::size_t n = pred.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = pred.at(i) - target.at(i);
    double a = std::abs(d);
    loss += a < 1.0 ? 0.5 * d * d : a - 0.5;
  }
  loss /= static_cast<double>(n);
  auto pi = pred.handle();
  auto ti = target.handle();
  return makeOp({1}, {loss}, {pred, target},
                [pi, ti, n](GradCtx& ctx, const TensorImpl* self) {
    double g = (*ctx.find(self))[0] / static_cast<double>(n);
    bool wantP = ctx.wants(pi.get());
    bool wantT = ctx.wants(ti.get());
    if (!wantP && !wantT) return;
    std::vector<double>* gp = wantP ? &ctx.of(pi.get()) : nullptr;
    std::vector<double>* gt = wantT ? &ctx.of(ti.get()) : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      double d = pi->data[i] - ti->data[i];
      double slope = std::clamp(d, -1.0, 1.0);
      if (gp) (*gp)[i] += slope * g;
      if (gt) (*gt)[i] -= slope * g;
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

// ---- gather / paint --------------------------------------------------------------

Tensor gatherRows(const Tensor& table, const std::vector<int>& idx) {
  if (table.rank() != 2) throw ShapeError("gatherRows expects [R,C] table");
  int rows = table.dim(0), c = table.dim(1);
  for (int i : idx) {
    if (i < 0 || i >= rows) {
      throw ContractError("gatherRows index " + std::to_string(i) + " out of range [0," +
                          std::to_string(rows) + ")");
    }
  }
  if (idx.empty()) throw ContractError("gatherRows with empty index list");
  std::vector<double> out(idx.size() * static_cast<std::size_t>(c));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const double* src = table.data() + static_cast<std::size_t>(idx[i]) * c;
    std::copy(src, src + c, out.data() + i * c);
  }
  auto ti = table.handle();
  return makeOp({static_cast<int>(idx.size()), c}, std::move(out), {table},
                [ti, idx, c](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(ti.get())) return;
    const std::vector<double>& g = *ctx.find(self);
    auto& gt = ctx.of(ti.get());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      kern::active().accumulate(g.data() + i * c,
                                gt.data() + static_cast<std::size_t>(idx[i]) * c,
                                static_cast<std::size_t>(c));
    }
  });
}

Tensor paintGrid(const Tensor& rows, const std::vector<int>& pixelRow, int h, int w) {
  if (rows.rank() != 2) throw ShapeError("paintGrid expects rows [R,C]");
  if (static_cast<std::size_t>(h) * static_cast<std::size_t>(w) != pixelRow.size()) {
    throw ShapeError("paintGrid index map size " + std::to_string(pixelRow.size()) + " != " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  int r = rows.dim(0), c = rows.dim(1);
  for (int v : pixelRow) {
    if (v >= r) throw ContractError("paintGrid row index " + std::to_string(v) + " out of range");
  }
  std::vector<double> out(pixelRow.size() * static_cast<std::size_t>(c), 0.0);
  for (std::size_t p = 0; p < pixelRow.size(); ++p) {
    if (pixelRow[p] < 0) continue;
    const double* src = rows.data() + static_cast<std::size_t>(pixelRow[p]) * c;
    std::copy(src, src + c, out.data() + p * c);
  }
  auto ri = rows.handle();
  return makeOp({h, w, c}, std::move(out), {rows},
                [ri, pixelRow, c](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(ri.get())) return;
    const std::vector<double>& g = *ctx.find(self);
    auto& gr = ctx.of(ri.get());
    for (std::size_t p = 0; p < pixelRow.size(); ++p) {
      if (pixelRow[p] < 0) continue;
      kern::active().accumulate(g.data() + p * c,
                                gr.data() + static_cast<std::size_t>(pixelRow[p]) * c,
                                static_cast<std::size_t>(c));
    }
  });
}

Tensor bagMean(const Tensor& table, const std::vector<std::vector<int>>& bags) {
  if (table.rank() != 2) throw ShapeError("bagMean expects [V,C] table");
  int v = table.dim(0), c = table.dim(1);
  for (const auto& bag : bags) {
    for (int i : bag) {
      if (i < 0 || i >= v) {
        throw ContractError("bagMean index " + std::to_string(i) + " out of range [0," +
                            std::to_string(v) + ")");
      }
    }
  }
  if (bags.empty()) throw ContractError("bagMean with zero bags");
  std::vector<double> out(bags.size() * static_cast<std::size_t>(c), 0.0);
  for (std::size_t b = 0; b < bags.size(); ++b) {
    if (bags[b].empty()) continue;
    double* row = out.data() + b * c;
    for (int i : bags[b]) {
      kern::active().accumulate(table.data() + static_cast<std::size_t>(i) * c, row,
                                static_cast<std::size_t>(c));
    }
    double inv = 1.0 / static_cast<double>(bags[b].size());
    kern::active().scale(row, inv, row, static_cast<std::size_t>(c));
  }
  auto ti = table.handle();
  return makeOp({static_cast<int>(bags.size()), c}, std::move(out), {table},
                [ti, bags, c](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(ti.get())) return;
    const std::vector<double>& g = *ctx.find(self);
    auto& gt = ctx.of(ti.get());
    for (std::size_t b = 0; b < bags.size(); ++b) {
      if (bags[b].empty()) continue;
      double inv = 1.0 / static_cast<double>(bags[b].size());
      for (int i : bags[b]) {
        kern::active().axpy(inv, g.data() + b * c,
                            gt.data() + static_cast<std::size_t>(i) * c,
                            static_cast<std::size_t>(c));
      }
    }
  });
}

// ---- RoI sampling / box decoding ---------------------------------------------------

Tensor bilinearRoi(const Tensor& map, const FloatBox& box, int bins,
                   double pageW, double pageH) {
  if (map.rank() != 3) throw ShapeError("bilinearRoi expects [H,W,D] map");
  if (bins < 1) throw ContractError("bilinearRoi bins must be >= 1");
  FloatBox b = box.clamped(pageW, pageH);
  if (b.width() <= 0 || b.height() <= 0) {
    throw ContractError("bilinearRoi degenerate box after clamping");
  }
  int hp = map.dim(0), wp = map.dim(1), d = map.dim(2);
  double sx = static_cast<double>(wp) / pageW;
  double sy = static_cast<double>(hp) / pageH;

  struct Tap {
    std::size_t idx[4];
    double w[4];
  };
  std::vector<Tap> taps(static_cast<std::size_t>(bins) * bins);
  for (int bi = 0; bi < bins; ++bi) {
    for (int bj = 0; bj < bins; ++bj) {
      double cx = b.x0 + (bj + 0.5) * b.width() / bins;
      double cy = b.y0 + (bi + 0.5) * b.height() / bins;
      double mx = std::clamp(cx * sx - 0.5, 0.0, static_cast<double>(wp - 1));
      double my = std::clamp(cy * sy - 0.5, 0.0, static_cast<double>(hp - 1));
      int x0i = std::min(static_cast<int>(mx), wp - 1);
      int y0i = std::min(static_cast<int>(my), hp - 1);
      int x1i = std::min(x0i + 1, wp - 1);
      int y1i = std::min(y0i + 1, hp - 1);
      double fx = mx - x0i;
      double fy = my - y0i;
      Tap& t = taps[static_cast<std::size_t>(bi) * bins + bj];
      t.idx[0] = (static_cast<std::size_t>(y0i) * wp + x0i) * d;
      t.idx[1] = (static_cast<std::size_t>(y0i) * wp + x1i) * d;
      t.idx[2] = (static_cast<std::size_t>(y1i) * wp + x0i) * d;
      t.idx[3] = (static_cast<std::size_t>(y1i) * wp + x1i) * d;
      t.w[0] = (1 - fy) * (1 - fx);
      t.w[1] = (1 - fy) * fx;
      t.w[2] = fy * (1 - fx);
      t.w[3] = fy * fx;
    }
  }

  std::vector<double> out(taps.size() * static_cast<std::size_t>(d), 0.0);
  for (std::size_t t = 0; t < taps.size(); ++t) {
    double* dst = out.data() + t * d;
    for (int q = 0; q < 4; ++q) {
      kern::active().axpy(taps[t].w[q], map.data() + taps[t].idx[q], dst,
                          static_cast<std::size_t>(d));
    }
  }
  auto mi = map.handle();
  return makeOp({1, static_cast<int>(taps.size()) * d}, std::move(out), {map},
                [mi, taps = std::move(taps), d](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(mi.get())) return;
    const std::vector<double>& g = *ctx.find(self);
    auto& gm = ctx.of(mi.get());
    for (std::size_t t = 0; t < taps.size(); ++t) {
      const double* grow = g.data() + t * d;
      for (int q = 0; q < 4; ++q) {
        kern::active().axpy(taps[t].w[q], grow, gm.data() + taps[t].idx[q],
                            static_cast<std::size_t>(d));
      }
    }
  });
}

Tensor decodeBoxes(const Tensor& offsets, const std::vector<FloatBox>& anchors) {
  if (offsets.rank() != 2 || offsets.dim(1) != 4) {
    throw ShapeError("decodeBoxes expects offsets [N,4], got " + shapeToString(offsets.shape()));
  }
  std::size_t n = static_cast<std::size_t>(offsets.dim(0));
  if (anchors.size() != n) {
    throw ContractError("decodeBoxes anchor count " + std::to_string(anchors.size()) +
                        " != rows " + std::to_string(n));
  }
  std::vector<double> out(n * 4);
  const double* p = offsets.data();
  for (std::size_t i = 0; i < n; ++i) {
    const FloatBox& a = anchors[i];
    double w = a.width(), h = a.height();
    double dx = p[i * 4 + 0], dy = p[i * 4 + 1];
    double dw = p[i * 4 + 2], dh = p[i * 4 + 3];
    // expm1 keeps zero offsets an exact identity.
    double gx = 0.5 * w * std::expm1(dw);
    double gy = 0.5 * h * std::expm1(dh);
    out[i * 4 + 0] = a.x0 + dx * w - gx;
    out[i * 4 + 1] = a.y0 + dy * h - gy;
    out[i * 4 + 2] = a.x1 + dx * w + gx;
    out[i * 4 + 3] = a.y1 + dy * h + gy;
  }
  auto oi = offsets.handle();
  return makeOp({static_cast<int>(n), 4}, std::move(out), {offsets},
                [oi, anchors, n](GradCtx& ctx, const TensorImpl* self) {
    if (!ctx.wants(oi.get())) return;
    const std::vector<double>& g = *ctx.find(self);
    auto& go = ctx.of(oi.get());
    const double* p2 = oi->data.data();
    for (std::size_t i = 0; i < n; ++i) {
      const FloatBox& a = anchors[i];
      double w = a.width(), h = a.height();
      double ew = std::exp(p2[i * 4 + 2]);
      double eh = std::exp(p2[i * 4 + 3]);
      double g0 = g[i * 4 + 0], g1 = g[i * 4 + 1], g2 = g[i * 4 + 2], g3 = g[i * 4 + 3];
      go[i * 4 + 0] += w * (g0 + g2);
      go[i * 4 + 1] += h * (g1 + g3);
      go[i * 4 + 2] += 0.5 * w * ew * (g2 - g0);
      go[i * 4 + 3] += 0.5 * h * eh * (g3 - g1);
    }
  });
}

}  // namespace vsr
