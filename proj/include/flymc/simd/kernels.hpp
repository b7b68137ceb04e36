#pragma once

// Dense double-precision kernels used by the hot loops of the sampler:
// per-datum margins, bound collapse and autocovariance sums.
//
// Every kernel has a scalar reference implementation. An AVX2/FMA variant is
// compiled into a separate translation unit and selected at runtime when the
// CPU supports it. Setting FLYMC_SIMD=scalar in the environment forces the
// reference path.

#include <cstddef>
#include <span>
#include <string_view>

namespace flymc::simd {

enum class Isa { Scalar, Avx2 };

struct KernelTable {
  Isa isa;
  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // a (n x n, row-major) += alpha * x x^T
  void (*rank1_update)(double alpha, const double* x, std::size_t n, double* a);
  // y = A x with A rows x cols, row-major
  void (*gemv)(const double* a, std::size_t rows, std::size_t cols, const double* x, double* y);
};

const KernelTable& scalar_kernels();

// nullptr when the AVX2 variant was not compiled in or the CPU lacks AVX2/FMA.
const KernelTable* avx2_kernels();

const KernelTable& active_kernels();
Isa active_isa();
std::string_view isa_name(Isa isa);

// Overrides runtime selection. Throws std::invalid_argument if the requested
// ISA is unavailable on this machine.
void force_isa(Isa isa);

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active_kernels().dot(a.data(), b.data(), a.size());
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active_kernels().axpy(alpha, x.data(), y.data(), x.size());
}

inline void rank1_update(double alpha, std::span<const double> x, std::span<double> a) {
  active_kernels().rank1_update(alpha, x.data(), x.size(), a.data());
}

inline void gemv(std::span<const double> a, std::size_t rows, std::size_t cols,
                 std::span<const double> x, std::span<double> y) {
  active_kernels().gemv(a.data(), rows, cols, x.data(), y.data());
}

}  // namespace flymc::simd
