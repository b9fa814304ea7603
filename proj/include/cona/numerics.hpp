#pragma once

#include <cstddef>
#include <functional>
#include <utility>

#include "cona/matrix.hpp"

namespace cona {

// ---------------------------------------------------------------------------
// Execution policy
//
// Dense kernels come in two flavours: a serial reference with a fixed
// summation order and an OpenMP version that splits work over output rows.
// Deterministic runs always use the serial kernels.

enum class Exec { Serial, Parallel };

Exec current_exec() noexcept;

/// Sets the kernel policy for the current thread until destroyed.
class ExecScope {
 public:
  explicit ExecScope(Exec exec) noexcept;
  ~ExecScope();
  ExecScope(const ExecScope&) = delete;
  ExecScope& operator=(const ExecScope&) = delete;

 private:
  Exec previous_;
};

namespace serial {
Matrix matmul_t(const Matrix& a, const Matrix& b);
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);
}  // namespace serial

namespace parallel {
Matrix matmul_t(const Matrix& a, const Matrix& b);
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);
}  // namespace parallel

/// a · bᵀ, i.e. out(i, j) = dot(a row i, b row j). Throws ShapeMismatch.
Matrix matmul_t(const Matrix& a, const Matrix& b);
/// a · b.
Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ · b.
Matrix matmul_tn(const Matrix& a, const Matrix& b);

/// Sum over rows, as a 1 × cols matrix.
Matrix column_sums(const Matrix& m);

// ---------------------------------------------------------------------------
// Normalization and softmax

/// Scales every row to unit Euclidean norm. Throws ZeroRow for rows with
/// norm below 1e-30.
Matrix l2_normalize_rows(const Matrix& m);

/// Pulls a gradient on the normalized rows `normalized` back onto the raw
/// rows `raw` that produced them.
Matrix l2_normalize_rows_backward(const Matrix& raw, const Matrix& normalized,
                                  const Matrix& upstream);

/// Per-row softmax of m / tau, max-subtracted. Throws BadTemperature.
Matrix row_softmax(const Matrix& m, double tau);

/// Per-row log-softmax of m / tau.
Matrix row_log_softmax(const Matrix& m, double tau);

// ---------------------------------------------------------------------------
// Finite differences

inline constexpr double kDefaultFiniteDiffStep = 1e-4;

using ScalarFn = std::function<double(const Matrix&)>;

/// Central-difference gradient of f at `at`. Throws NonFiniteValue.
Matrix finite_diff_grad(const ScalarFn& f, const Matrix& at,
                        double h = kDefaultFiniteDiffStep);

struct GradCheckReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::pair<std::size_t, std::size_t> worst_coordinate{0, 0};
};

/// Coordinate-wise comparison. The relative error of a coordinate is
/// |a - n| / max(|a|, |n|, floor) with floor = 1e-3 · max|n|, so entries that
/// are negligible next to the gradient's own scale are judged at that scale.
GradCheckReport compare_gradients(const Matrix& analytic,
                                  const Matrix& numeric);

}  // namespace cona
