#include "vsr/kernels.hpp"

// Reference kernels. These define the numeric behaviour; SIMD variants are
// required to reproduce them bit-for-bit (see tests/test_kernels.cpp).

namespace vsr::kern {
namespace {

void addScalarK(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void subScalarK(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void mulScalarK(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void reluScalarK(const double* x, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void reluGradScalarK(const double* x, const double* g, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i] > 0.0) out[i] += g[i];
  }
}

void axpyScalarK(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void scaleScalarK(const double* x, double a, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a * x[i];
}

void accumulateScalarK(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += x[i];
}

}  // namespace

const Ops& scalarOps() {
  static const Ops ops = {
      "scalar",     addScalarK,  subScalarK,   mulScalarK,
      reluScalarK,  reluGradScalarK, axpyScalarK, scaleScalarK,
      accumulateScalarK,
  };
  return ops;
}

}  // namespace vsr::kern
