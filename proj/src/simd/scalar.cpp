#include "flymc/simd/kernels.hpp"

namespace flymc::simd {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void rank1_scalar(double alpha, const double* x, std::size_t n, double* a) {
  for (std::size_t i = 0; i < n; ++i) {
    const double s = alpha * x[i];
    double* row = a + i * n;
    for (std::size_t j = 0; j < n; ++j) row[j] += s * x[j];
  }
}

void gemv_scalar(const double* a, std::size_t rows, std::size_t cols, const double* x, double* y) {
  for (std::size_t r = 0; r < rows; ++r) y[r] = dot_scalar(a + r * cols, x, cols);
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{Isa::Scalar, dot_scalar, axpy_scalar, rank1_scalar, gemv_scalar};
  return table;
}

}  // namespace flymc::simd
