// NEON variants (aarch64, two double lanes). Mirrors kernels_avx2.cpp:
// separate mul and add roundings, scalar tail, bit-identical to the
// scalar reference.

#if defined(__aarch64__) && defined(__ARM_NEON)

#include <arm_neon.h>

#include "vsr/kernels.hpp"

namespace vsr::kern {
namespace {

void addNeonK(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vst1q_f64(out + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void subNeonK(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vst1q_f64(out + i, vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mulNeonK(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void reluNeonK(const double* x, double* out, std::size_t n) {
  const float64x2_t zero = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vst1q_f64(out + i, vmaxq_f64(zero, vld1q_f64(x + i)));
  }
  for (; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void reluGradNeonK(const double* x, const double* g, double* out, std::size_t n) {
  const float64x2_t zero = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    uint64x2_t mask = vcgtq_f64(vld1q_f64(x + i), zero);
    float64x2_t gated = vreinterpretq_f64_u64(
        vandq_u64(mask, vreinterpretq_u64_f64(vld1q_f64(g + i))));
    vst1q_f64(out + i, vaddq_f64(vld1q_f64(out + i), gated));
  }
  for (; i < n; ++i) {
    if (x[i] > 0.0) out[i] += g[i];
  }
}

void axpyNeonK(double a, const double* x, double* y, std::size_t n) {
  const float64x2_t av = vdupq_n_f64(a);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    float64x2_t prod = vmulq_f64(av, vld1q_f64(x + i));
    vst1q_f64(y + i, vaddq_f64(vld1q_f64(y + i), prod));
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void scaleNeonK(const double* x, double a, double* out, std::size_t n) {
  const float64x2_t av = vdupq_n_f64(a);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vst1q_f64(out + i, vmulq_f64(av, vld1q_f64(x + i)));
  }
  for (; i < n; ++i) out[i] = a * x[i];
}

void accumulateNeonK(const double* x, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vst1q_f64(y + i, vaddq_f64(vld1q_f64(y + i), vld1q_f64(x + i)));
  }
  for (; i < n; ++i) y[i] += x[i];
}

}  // namespace

const Ops& neonOps() {
  static const Ops ops = {
      "neon",     addNeonK,  subNeonK,   mulNeonK,
      reluNeonK,  reluGradNeonK, axpyNeonK, scaleNeonK,
      accumulateNeonK,
  };
  return ops;
}

}  // namespace vsr::kern

#endif  // aarch64 NEON
