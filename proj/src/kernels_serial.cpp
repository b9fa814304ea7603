// Reference kernels. Every output element accumulates over the inner
// dimension in ascending order starting from zero, so results are
// reproducible bit for bit and match the OpenMP kernels exactly.

#include <string>

#include "cona/error.hpp"
#include "cona/numerics.hpp"

namespace cona::serial {

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
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(j, k);
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  check_inner(a.cols(), b.rows(), "matmul");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  check_inner(a.rows(), b.rows(), "matmul_tn");
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

}  // namespace cona::serial
