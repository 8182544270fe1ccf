#pragma once

#include <cstddef>
#include <string>

namespace vsr::kern {

// Data-parallel inner loops of the tensor engine. Every entry has a scalar
// reference implementation plus SIMD variants (AVX2 on x86-64, NEON on
// aarch64) selected once per process at startup.
//
// Contract: a SIMD variant must be bit-identical to the scalar reference.
// All entries are element-parallel (no reductions), each output element is
// one mul and/or one add rounded separately, so lane order never matters.
// Reductions (softmax sums, dot products) stay out of this table; the
// tensor ops arrange their loops so accumulation order is fixed by the
// kernel call sequence, not by the backend.
struct Ops {
  const char* name;
  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  void (*sub)(const double* a, const double* b, double* out, std::size_t n);
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  void (*relu)(const double* x, double* out, std::size_t n);
  // out += g where x > 0
  void (*reluGrad)(const double* x, const double* g, double* out, std::size_t n);
  // y += a * x  (the workhorse behind matmul and conv2d)
  void (*axpy)(double a, const double* x, double* y, std::size_t n);
  // out = a * x
  void (*scale)(const double* x, double a, double* out, std::size_t n);
  // y += x
  void (*accumulate)(const double* x, double* y, std::size_t n);
};

enum class Backend { Scalar, Avx2, Neon };

const Ops& scalarOps();
bool available(Backend b);

/// Active kernel table. Resolved on first use: VSR_KERNEL env var
/// (scalar|avx2|neon) if set, otherwise the best available backend.
const Ops& active();
Backend activeBackend();

/// Force a backend (throws ContractError if unavailable). Test hook.
void setBackend(Backend b);

std::string backendName(Backend b);

}  // namespace vsr::kern
