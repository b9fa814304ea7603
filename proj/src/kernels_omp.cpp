// OpenMP kernels. Work is split over output rows only; each output element
// still accumulates over the inner dimension in ascending order.

#include <omp.h>

#include <cstdint>
#include <string>

#include "cona/error.hpp"
#include "cona/numerics.hpp"

namespace cona::parallel {

namespace {

void check_inner(std::size_t lhs, std::size_t rhs, const char* op) {
  if (lhs != rhs) {
    fail(ErrorKind::ShapeMismatch, std::string(op) + ": inner dimensions " +
                                       std::to_string(lhs) + " vs " +
                                       std::to_string(rhs));
  }
}

}  // namespace

Matrix matmul_t(const Matrix& a, const Matrix& b) {
  check_inner(a.cols(), b.cols(), "matmul_t");
  Matrix out(a.rows(), b.rows());
  const auto n = static_cast<std::int64_t>(a.rows());
  const std::size_t m = b.rows();
  const std::size_t inner = a.cols();
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    const double* ar = a.row(static_cast<std::size_t>(i)).data();
    double* orow = out.row(static_cast<std::size_t>(i)).data();
    for (std::size_t j = 0; j < m; ++j) {
      const double* br = b.row(j).data();
      double acc = 0.0;
      for (std::size_t k = 0; k < inner; ++k) acc += ar[k] * br[k];
      orow[j] = acc;
    }
  }
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  check_inner(a.cols(), b.rows(), "matmul");
  Matrix out(a.rows(), b.cols());
  const auto n = static_cast<std::int64_t>(a.rows());
  const std::size_t m = b.cols();
  const std::size_t inner = a.cols();
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    const double* ar = a.row(static_cast<std::size_t>(i)).data();
    double* orow = out.row(static_cast<std::size_t>(i)).data();
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = ar[k];
      const double* br = b.row(k).data();
      for (std::size_t j = 0; j < m; ++j) orow[j] += aik * br[j];
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  check_inner(a.rows(), b.rows(), "matmul_tn");
  Matrix out(a.cols(), b.cols());
  const auto n = static_cast<std::int64_t>(a.cols());
  const std::size_t m = b.cols();
  const std::size_t inner = a.rows();
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    double* orow = out.row(static_cast<std::size_t>(i)).data();
    for (std::size_t k = 0; k < inner; ++k) {
      const double aki = a(k, static_cast<std::size_t>(i));
      const double* br = b.row(k).data();
      for (std::size_t j = 0; j < m; ++j) orow[j] += aki * br[j];
    }
  }
  return out;
}

}  // namespace cona::parallel
