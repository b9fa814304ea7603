#include "cona/losses.hpp"

#include <cmath>
#include <string>

#include "cona/error.hpp"
#include "cona/numerics.hpp"

namespace cona {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) fail(ErrorKind::ShapeMismatch, what);
}

void check_temperature(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    fail(ErrorKind::BadTemperature,
         "temperature must be positive, got " + std::to_string(tau));
  }
}

void check_pair(const EmbeddingBatch& a, const EmbeddingBatch& b,
                const char* op) {
  require(a.n() == b.n(), std::string(op) + ": batch sizes differ");
  require(a.d() == b.d(), std::string(op) + ": channel sizes differ");
}

// Gradient of a loss with respect to S = a · bᵀ, pushed onto a and b.
void push_similarity_grad(const Matrix& grad_s, const EmbeddingBatch& a,
                          const EmbeddingBatch& b, std::size_t slot_a,
                          std::size_t slot_b, LossValue& out) {
  if (!a.detached()) out.grads[slot_a] = matmul(grad_s, b.matrix());
  if (!b.detached()) out.grads[slot_b] = matmul_tn(grad_s, a.matrix());
}

LossValue kl_forward(const EmbeddingBatch& pred_a, const EmbeddingBatch& pred_b,
                     const EmbeddingBatch& tgt_a, const EmbeddingBatch& tgt_b,
                     double tau) {
  const std::size_t n = pred_a.n();
  const Matrix log_p = row_log_softmax(matmul_t(pred_a.matrix(), pred_b.matrix()), tau);
  const Matrix log_q = row_log_softmax(matmul_t(tgt_a.matrix(), tgt_b.matrix()), tau);

  LossValue out;
  Matrix grad_pred(n, n);
  Matrix grad_tgt(n, n);
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row_kl = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double p = std::exp(log_p(i, j));
      row_kl += p * (log_p(i, j) - log_q(i, j));
    }
    total += row_kl;
    for (std::size_t j = 0; j < n; ++j) {
      const double p = std::exp(log_p(i, j));
      const double q = std::exp(log_q(i, j));
      grad_pred(i, j) = inv_n * p * (log_p(i, j) - log_q(i, j) - row_kl) / tau;
      grad_tgt(i, j) = inv_n * (q - p) / tau;
    }
  }
  out.value = total * inv_n;
  push_similarity_grad(grad_pred, pred_a, pred_b, 0, 1, out);
  push_similarity_grad(grad_tgt, tgt_a, tgt_b, 2, 3, out);
  return out;
}

}  // namespace

EmbeddingBatch::EmbeddingBatch(Matrix matrix, bool detached)
    : matrix_(std::move(matrix)), detached_(detached) {
  for (std::size_t i = 0; i < matrix_.rows(); ++i) {
    double sq = 0.0;
    for (double v : matrix_.row(i)) sq += v * v;
    if (!(std::abs(std::sqrt(sq) - 1.0) <= kUnitNormTolerance)) {
      fail(ErrorKind::NotNormalized,
           "embedding row " + std::to_string(i) + " is not unit norm");
    }
  }
}

EmbeddingBatch EmbeddingBatch::normalized(const Matrix& raw, bool detached) {
  return EmbeddingBatch(Unchecked{}, l2_normalize_rows(raw), detached);
}

EmbeddingBatch EmbeddingBatch::as_detached() const {
  return EmbeddingBatch(Unchecked{}, matrix_, true);
}

EmbeddingBatch EmbeddingBatch::as_attached() const {
  return EmbeddingBatch(Unchecked{}, matrix_, false);
}

SimilarityDistribution similarity_distribution(const EmbeddingBatch& a,
                                               const EmbeddingBatch& b,
                                               double tau) {
  check_temperature(tau);
  require(a.d() == b.d(), "similarity_distribution: channel sizes differ");
  return {row_softmax(matmul_t(a.matrix(), b.matrix()), tau), tau};
}

LossValue infonce(const EmbeddingBatch& a, const EmbeddingBatch& b,
                  double tau) {
  check_temperature(tau);
  check_pair(a, b, "infonce");
  const std::size_t n = a.n();
  const Matrix log_p = row_log_softmax(matmul_t(a.matrix(), b.matrix()), tau);

  LossValue out;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += log_p(i, i);
  out.value = -total / static_cast<double>(n);

  // dL/dS = (P − I) / (N τ)
  Matrix grad_s(n, n);
  const double scale = 1.0 / (static_cast<double>(n) * tau);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      grad_s(i, j) = (std::exp(log_p(i, j)) - (i == j ? 1.0 : 0.0)) * scale;
    }
  }
  push_similarity_grad(grad_s, a, b, 0, 1, out);
  return out;
}

LossValue feature_distance(const EmbeddingBatch& a, const EmbeddingBatch& b) {
  check_pair(a, b, "feature_distance");
  const double nd = static_cast<double>(a.n() * a.d());
  Matrix diff = a.matrix() - b.matrix();

  LossValue out;
  double total = 0.0;
  for (double v : diff.values()) total += v * v;
  out.value = 0.5 * total / nd;

  diff *= 1.0 / nd;
  if (!b.detached()) out.grads[1] = diff * -1.0;
  if (!a.detached()) out.grads[0] = std::move(diff);
  return out;
}

LossValue similarity_distance(const EmbeddingBatch& pred_a,
                              const EmbeddingBatch& pred_b,
                              const EmbeddingBatch& tgt_a,
                              const EmbeddingBatch& tgt_b) {
  const std::size_t n = pred_a.n();
  require(pred_b.n() == n && tgt_a.n() == n && tgt_b.n() == n,
          "similarity_distance: batch sizes differ");
  require(pred_a.d() == pred_b.d(),
          "similarity_distance: prediction channel sizes differ");
  require(tgt_a.d() == tgt_b.d(),
          "similarity_distance: target channel sizes differ");

  Matrix diff = matmul_t(pred_a.matrix(), pred_b.matrix()) -
                matmul_t(tgt_a.matrix(), tgt_b.matrix());
  const double n2 = static_cast<double>(n * n);

  LossValue out;
  double total = 0.0;
  for (double v : diff.values()) total += v * v;
  out.value = 0.5 * total / n2;

  diff *= 1.0 / n2;
  push_similarity_grad(diff, pred_a, pred_b, 0, 1, out);
  diff *= -1.0;
  push_similarity_grad(diff, tgt_a, tgt_b, 2, 3, out);
  return out;
}

LossValue kl_div(const EmbeddingBatch& pred_a, const EmbeddingBatch& pred_b,
                 const EmbeddingBatch& tgt_a, const EmbeddingBatch& tgt_b,
                 double tau, KlDirection direction) {
  check_temperature(tau);
  const std::size_t n = pred_a.n();
  require(pred_b.n() == n && tgt_a.n() == n && tgt_b.n() == n,
          "kl_div: batch sizes differ");
  require(pred_a.d() == pred_b.d(), "kl_div: prediction channel sizes differ");
  require(tgt_a.d() == tgt_b.d(), "kl_div: target channel sizes differ");

  if (direction == KlDirection::Forward) {
    return kl_forward(pred_a, pred_b, tgt_a, tgt_b, tau);
  }
  LossValue swapped = kl_forward(tgt_a, tgt_b, pred_a, pred_b, tau);
  LossValue out;
  out.value = swapped.value;
  out.grads = {std::move(swapped.grads[2]), std::move(swapped.grads[3]),
               std::move(swapped.grads[0]), std::move(swapped.grads[1])};
  return out;
}

}  // namespace cona
