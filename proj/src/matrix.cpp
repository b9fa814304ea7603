#include "cona/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cona/error.hpp"

namespace cona {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    fail(ErrorKind::ShapeMismatch,
         std::string(op) + ": " + std::to_string(a.rows()) + "x" +
             std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
             "x" + std::to_string(b.cols()));
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    fail(ErrorKind::ShapeMismatch, "matrix data length " +
                                       std::to_string(data_.size()) +
                                       " != rows*cols");
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows)
    : rows_(rows.size()), cols_(rows.size() ? rows.begin()->size() : 0) {
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) {
      fail(ErrorKind::ShapeMismatch, "ragged matrix literal");
    }
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix& Matrix::operator+=(const Matrix& other) {
  require_same_shape(*this, other, "operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  require_same_shape(*this, other, "operator-=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), m.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= m.rows()) {
      fail(ErrorKind::ShapeMismatch, "gather_rows: index out of range");
    }
    std::ranges::copy(m.row(indices[r]), out.row(r).begin());
  }
  return out;
}

Matrix slice_rows(const Matrix& m, std::size_t begin, std::size_t end) {
  if (begin > end || end > m.rows()) {
    fail(ErrorKind::ShapeMismatch, "slice_rows: bad range");
  }
  const auto first = m.values().begin() + static_cast<std::ptrdiff_t>(begin * m.cols());
  const auto last = m.values().begin() + static_cast<std::ptrdiff_t>(end * m.cols());
  return Matrix(end - begin, m.cols(), std::vector<double>(first, last));
}

double max_abs(const Matrix& m) {
  double out = 0.0;
  for (double v : m.values()) out = std::max(out, std::abs(v));
  return out;
}

bool all_finite(const Matrix& m) {
  return std::ranges::all_of(m.values(),
                             [](double v) { return std::isfinite(v); });
}

}  // namespace cona
