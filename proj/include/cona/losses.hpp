#pragma once

#include <array>
#include <cstddef>
#include <optional>

#include "cona/matrix.hpp"

namespace cona {

inline constexpr double kDefaultTemperature = 0.07;
inline constexpr double kUnitNormTolerance = 1e-9;

/// N × d batch of L2-normalized rows. A detached batch is a constant: losses
/// report no gradient for it.
class EmbeddingBatch {
 public:
  /// Throws NotNormalized unless every row has unit norm within 1e-9.
  explicit EmbeddingBatch(Matrix matrix, bool detached = false);

  /// Normalizes `raw` first; throws ZeroRow on degenerate rows.
  static EmbeddingBatch normalized(const Matrix& raw, bool detached = false);

  const Matrix& matrix() const noexcept { return matrix_; }
  std::size_t n() const noexcept { return matrix_.rows(); }
  std::size_t d() const noexcept { return matrix_.cols(); }
  bool detached() const noexcept { return detached_; }

  EmbeddingBatch as_detached() const;
  EmbeddingBatch as_attached() const;

 private:
  struct Unchecked {};
  EmbeddingBatch(Unchecked, Matrix matrix, bool detached)
      : matrix_(std::move(matrix)), detached_(detached) {}

  Matrix matrix_;
  bool detached_ = false;
};

/// Scalar loss plus one optional gradient per argument slot. Two-argument
/// losses use slots 0 and 1; four-argument losses use (pred_a, pred_b,
/// tgt_a, tgt_b) = slots 0..3.
struct LossValue {
  double value = 0.0;
  std::array<std::optional<Matrix>, 4> grads;
};

/// Row-stochastic p(i, j) = softmax_j(a_i · b_j / tau).
struct SimilarityDistribution {
  Matrix probs;
  double tau = kDefaultTemperature;
};

SimilarityDistribution similarity_distribution(const EmbeddingBatch& a,
                                               const EmbeddingBatch& b,
                                               double tau);

/// −(1/N) Σ_i log p(i, i) over the a → b softmax.
LossValue infonce(const EmbeddingBatch& a, const EmbeddingBatch& b,
                  double tau = kDefaultTemperature);

/// (1/2)(1/(N d)) Σ (a − b)².
LossValue feature_distance(const EmbeddingBatch& a, const EmbeddingBatch& b);

/// (1/2)(1/N²) Σ_{i,j} (pred_a_i · pred_b_j − tgt_a_i · tgt_b_j)².
LossValue similarity_distance(const EmbeddingBatch& pred_a,
                              const EmbeddingBatch& pred_b,
                              const EmbeddingBatch& tgt_a,
                              const EmbeddingBatch& tgt_b);

enum class KlDirection {
  /// (1/N) Σ p_pred log(p_pred / p_tgt): prediction outside the log.
  Forward,
  /// (1/N) Σ p_tgt log(p_tgt / p_pred).
  Reverse,
};

LossValue kl_div(const EmbeddingBatch& pred_a, const EmbeddingBatch& pred_b,
                 const EmbeddingBatch& tgt_a, const EmbeddingBatch& tgt_b,
                 double tau = kDefaultTemperature,
                 KlDirection direction = KlDirection::Forward);

}  // namespace cona
