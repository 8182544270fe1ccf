#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <vector>

#include "vsr/kernels.hpp"
#include "vsr/rng.hpp"
#include "vsr/tensor.hpp"

using namespace vsr;

namespace {

// Sizes straddling the 4-lane AVX2 and 2-lane NEON boundaries.
const std::size_t kSizes[] = {1, 2, 3, 4, 5, 7, 8, 9, 15, 16, 17, 31, 33, 64, 67, 128};

std::vector<double> randomVec(Rng& rng, std::size_t n, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

bool bitEqual(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::vector<kern::Backend> simdBackends() {
  std::vector<kern::Backend> v;
  if (kern::available(kern::Backend::Avx2)) v.push_back(kern::Backend::Avx2);
  if (kern::available(kern::Backend::Neon)) v.push_back(kern::Backend::Neon);
  return v;
}

}  // namespace

TEST_CASE("scalar backend is always available") {
  CHECK(kern::available(kern::Backend::Scalar));
  CHECK(kern::scalarOps().name == std::string("scalar"));
}

TEST_CASE("SIMD kernel variants are bit-identical to the scalar reference") {
  auto backends = simdBackends();
  if (backends.empty()) {
    MESSAGE("no SIMD backend on this host; nothing to compare");
    return;
  }
  kern::Backend original = kern::activeBackend();
  const kern::Ops& ref = kern::scalarOps();
  Rng rng(11);
  for (kern::Backend backend : backends) {
    kern::setBackend(backend);
    const kern::Ops& simd = kern::active();
    CAPTURE(simd.name);
    for (std::size_t n : kSizes) {
      CAPTURE(n);
      auto a = randomVec(rng, n);
      auto b = randomVec(rng, n);
      // Mix in negatives, zeros and denormal-ish values for relu paths.
      if (n > 2) {
        a[n / 2] = 0.0;
        b[n / 2] = -0.0;
      }
      std::vector<double> outRef(n, 0.5), outSimd(n, 0.5);

      ref.add(a.data(), b.data(), outRef.data(), n);
      simd.add(a.data(), b.data(), outSimd.data(), n);
      CHECK(bitEqual(outRef, outSimd));

      ref.sub(a.data(), b.data(), outRef.data(), n);
      simd.sub(a.data(), b.data(), outSimd.data(), n);
      CHECK(bitEqual(outRef, outSimd));

      ref.mul(a.data(), b.data(), outRef.data(), n);
      simd.mul(a.data(), b.data(), outSimd.data(), n);
      CHECK(bitEqual(outRef, outSimd));

      ref.relu(a.data(), outRef.data(), n);
      simd.relu(a.data(), outSimd.data(), n);
      CHECK(bitEqual(outRef, outSimd));

      ref.scale(a.data(), 1.7, outRef.data(), n);
      simd.scale(a.data(), 1.7, outSimd.data(), n);
      CHECK(bitEqual(outRef, outSimd));

      auto accRef = randomVec(rng, n);
      auto accSimd = accRef;
      ref.axpy(-0.3125, a.data(), accRef.data(), n);
      simd.axpy(-0.3125, a.data(), accSimd.data(), n);
      CHECK(bitEqual(accRef, accSimd));

      ref.accumulate(b.data(), accRef.data(), n);
      simd.accumulate(b.data(), accSimd.data(), n);
      CHECK(bitEqual(accRef, accSimd));

      ref.reluGrad(a.data(), b.data(), accRef.data(), n);
      simd.reluGrad(a.data(), b.data(), accSimd.data(), n);
      CHECK(bitEqual(accRef, accSimd));
    }
  }
  kern::setBackend(original);
}

TEST_CASE("whole ops match bit-for-bit across backends") {
  auto backends = simdBackends();
  if (backends.empty()) return;
  kern::Backend original = kern::activeBackend();

  auto runAll = [&](kern::Backend b) {
    kern::setBackend(b);
    Rng local(99);
    Tensor x = Tensor::fromVector({6, 10, 3}, randomVec(local, 180));
    Tensor w = Tensor::leaf({3, 3, 3, 5}, randomVec(local, 135), true);
    Tensor a = Tensor::leaf({7, 9}, randomVec(local, 63), true);
    Tensor b2 = Tensor::leaf({9, 6}, randomVec(local, 54), true);

    Tensor conv = conv2d(x, w, 1, 1);
    Tensor mm = matmul(a, b2);
    Tensor loss = add(sum(conv), sum(mm));
    loss.backward();

    std::vector<double> all;
    auto append = [&](const std::vector<double>& v) { all.insert(all.end(), v.begin(), v.end()); };
    append(conv.vec());
    append(mm.vec());
    append(loss.vec());
    append(w.grad());
    append(a.grad());
    append(b2.grad());
    return all;
  };

  std::vector<double> scalarOut = runAll(kern::Backend::Scalar);
  for (kern::Backend b : backends) {
    std::vector<double> simdOut = runAll(b);
    CHECK(bitEqual(scalarOut, simdOut));
  }
  kern::setBackend(original);
}
