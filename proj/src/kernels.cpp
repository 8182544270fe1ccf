#include "vsr/kernels.hpp"

#include <cstdlib>
#include <string>

#include "vsr/errors.hpp"

namespace vsr::kern {

#if defined(__AVX2__)
const Ops& avx2Ops();
#endif
#if defined(__aarch64__) && defined(__ARM_NEON)
const Ops& neonOps();
#endif

bool available(Backend b) {
  switch (b) {
    case Backend::Scalar:
      return true;
    case Backend::Avx2:
#if defined(__AVX2__)
      return __builtin_cpu_supports("avx2") != 0;
#else
      return false;
#endif
    case Backend::Neon:
#if defined(__aarch64__) && defined(__ARM_NEON)
      return true;
#else
      return false;
#endif
  }
  return false;
}

std::string backendName(Backend b) {
  switch (b) {
    case Backend::Scalar: return "scalar";
    case Backend::Avx2: return "avx2";
    case Backend::Neon: return "neon";
  }
  return "?";
}

namespace {

const Ops* opsFor(Backend b) {
  switch (b) {
    case Backend::Scalar:
      return &scalarOps();
    case Backend::Avx2:
#if defined(__AVX2__)
      return &avx2Ops();
#else
      return nullptr;
#endif
    case Backend::Neon:
#if defined(__aarch64__) && defined(__ARM_NEON)
      return &neonOps();
#else
      return nullptr;
#endif
  }
  return nullptr;
}

Backend defaultBackend() {
  if (const char* env = std::getenv("VSR_KERNEL")) {
    std::string want(env);
    Backend b = Backend::Scalar;
    if (want == "avx2") b = Backend::Avx2;
    else if (want == "neon") b = Backend::Neon;
    else if (want != "scalar")
      throw ContractError("VSR_KERNEL must be scalar, avx2 or neon, got '" + want + "'");
    if (!available(b)) throw ContractError("VSR_KERNEL=" + want + " not available on this host");
    return b;
  }
  if (available(Backend::Avx2)) return Backend::Avx2;
  if (available(Backend::Neon)) return Backend::Neon;
  return Backend::Scalar;
}

Backend& current() {
  static Backend b = defaultBackend();
  return b;
}

}  // namespace

const Ops& active() { return *opsFor(current()); }

Backend activeBackend() { return current(); }

void setBackend(Backend b) {
  if (!available(b)) {
    throw ContractError("kernel backend '" + backendName(b) + "' not available on this host");
  }
  current() = b;
}

}  // namespace vsr::kern
