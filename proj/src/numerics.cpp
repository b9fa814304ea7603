#include "cona/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cona/error.hpp"

namespace cona {

namespace {

thread_local Exec t_exec = Exec::Serial;

constexpr double kMinRowNorm = 1e-30;

void check_temperature(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    fail(ErrorKind::BadTemperature,
         "temperature must be positive, got " + std::to_string(tau));
  }
}

double row_norm(std::span<const double> r) {
  double acc = 0.0;
  for (double v : r) acc += v * v;
  return std::sqrt(acc);
}

}  // namespace

Exec current_exec() noexcept { return t_exec; }

ExecScope::ExecScope(Exec exec) noexcept : previous_(t_exec) { t_exec = exec; }
ExecScope::~ExecScope() { t_exec = previous_; }

Matrix matmul_t(const Matrix& a, const Matrix& b) {
  return t_exec == Exec::Parallel ? parallel::matmul_t(a, b)
                                  : serial::matmul_t(a, b);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  return t_exec == Exec::Parallel ? parallel::matmul(a, b)
                                  : serial::matmul(a, b);
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  return t_exec == Exec::Parallel ? parallel::matmul_tn(a, b)
                                  : serial::matmul_tn(a, b);
}

Matrix column_sums(const Matrix& m) {
  Matrix out(1, m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(0, j) += m(i, j);
  return out;
}

Matrix l2_normalize_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double norm = row_norm(m.row(i));
    if (!(norm >= kMinRowNorm)) {
      fail(ErrorKind::ZeroRow, "row " + std::to_string(i) +
                                   " has norm below 1e-30 or is not finite");
    }
    auto src = m.row(i);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) dst[j] = src[j] / norm;
  }
  return out;
}

Matrix l2_normalize_rows_backward(const Matrix& raw, const Matrix& normalized,
                                  const Matrix& upstream) {
  if (!raw.same_shape(normalized) || !raw.same_shape(upstream)) {
    fail(ErrorKind::ShapeMismatch, "l2_normalize_rows_backward: shapes differ");
  }
  Matrix out(raw.rows(), raw.cols());
  for (std::size_t i = 0; i < raw.rows(); ++i) {
    const double norm = row_norm(raw.row(i));
    auto y = normalized.row(i);
    auto g = upstream.row(i);
    double proj = 0.0;
    for (std::size_t j = 0; j < raw.cols(); ++j) proj += y[j] * g[j];
    auto dst = out.row(i);
    for (std::size_t j = 0; j < raw.cols(); ++j)
      dst[j] = (g[j] - y[j] * proj) / norm;
  }
  return out;
}

Matrix row_softmax(const Matrix& m, double tau) {
  check_temperature(tau);
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto src = m.row(i);
    auto dst = out.row(i);
    const double mx = *std::ranges::max_element(src);
    double denom = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      dst[j] = std::exp((src[j] - mx) / tau);
      denom += dst[j];
    }
    for (double& v : dst) v /= denom;
  }
  return out;
}

Matrix row_log_softmax(const Matrix& m, double tau) {
  check_temperature(tau);
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto src = m.row(i);
    auto dst = out.row(i);
    const double mx = *std::ranges::max_element(src);
    double denom = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      dst[j] = (src[j] - mx) / tau;
      denom += std::exp(dst[j]);
    }
    const double log_denom = std::log(denom);
    for (double& v : dst) v -= log_denom;
  }
  return out;
}

Matrix finite_diff_grad(const ScalarFn& f, const Matrix& at, double h) {
  if (!(h > 0.0)) {
    fail(ErrorKind::BadConfig, "finite difference step must be positive");
  }
  Matrix grad(at.rows(), at.cols());
  Matrix probe = at;
  auto eval = [&](const Matrix& x) {
    const double v = f(x);
    if (!std::isfinite(v)) {
      fail(ErrorKind::NonFiniteValue, "function is not finite near the probe");
    }
    return v;
  };
  for (std::size_t idx = 0; idx < at.size(); ++idx) {
    const double x0 = at.values()[idx];
    probe.values()[idx] = x0 + h;
    const double plus = eval(probe);
    probe.values()[idx] = x0 - h;
    const double minus = eval(probe);
    probe.values()[idx] = x0;
    grad.values()[idx] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

GradCheckReport compare_gradients(const Matrix& analytic,
                                  const Matrix& numeric) {
  if (!analytic.same_shape(numeric)) {
    fail(ErrorKind::ShapeMismatch, "compare_gradients: shapes differ");
  }
  GradCheckReport report;
  const double floor =
      std::max(1e-3 * max_abs(numeric), std::numeric_limits<double>::min());
  for (std::size_t i = 0; i < analytic.rows(); ++i) {
    for (std::size_t j = 0; j < analytic.cols(); ++j) {
      const double a = analytic(i, j);
      const double n = numeric(i, j);
      const double abs_err = std::abs(a - n);
      const double rel_err =
          abs_err / std::max({std::abs(a), std::abs(n), floor});
      report.max_abs_err = std::max(report.max_abs_err, abs_err);
      if (rel_err > report.max_rel_err) {
        report.max_rel_err = rel_err;
        report.worst_coordinate = {i, j};
      }
    }
  }
  return report;
}

}  // namespace cona
