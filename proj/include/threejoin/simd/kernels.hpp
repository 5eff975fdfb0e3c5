#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace threejoin::simd {

// Inner-loop kernels. Every variant computes the same function; vector
// variants may reassociate floating-point sums.
struct KernelTable {
  std::string_view name;
  double (*dot)(const double* x, const double* y, std::size_t n);
  // y[i] += a * x[i]
  void (*axpy)(double a, const double* x, double* y, std::size_t n);
  double (*l2_sq)(const double* x, const double* y, std::size_t n);
  // popcount(x ^ y) over n 64-bit words
  std::uint64_t (*hamming)(const std::uint64_t* x, const std::uint64_t* y,
                           std::size_t n);
};

const KernelTable& scalar_kernels();

// nullptr when the build or the host CPU lacks AVX2+FMA.
const KernelTable* avx2_kernels();

// Best table for this host, chosen once. THREEJOIN_SIMD=scalar forces the
// reference kernels.
const KernelTable& kernels();

inline double dot(const double* x, const double* y, std::size_t n) {
  return kernels().dot(x, y, n);
}
inline void axpy(double a, const double* x, double* y, std::size_t n) {
  kernels().axpy(a, x, y, n);
}
inline double l2_sq(const double* x, const double* y, std::size_t n) {
  return kernels().l2_sq(x, y, n);
}
inline std::uint64_t hamming(const std::uint64_t* x, const std::uint64_t* y,
                             std::size_t n) {
  return kernels().hamming(x, y, n);
}

}  // namespace threejoin::simd
