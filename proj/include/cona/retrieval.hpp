#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cona/losses.hpp"
#include "cona/matrix.hpp"

namespace cona {

/// Exact cosine search over a gallery of precomputed unit-norm embeddings.
/// Immutable once built.
class RetrievalIndex {
 public:
  RetrievalIndex() = default;

  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return embeddings_.cols(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const Matrix& embeddings() const noexcept { return embeddings_; }
  bool contains(const std::string& id) const { return rows_.contains(id); }

  friend RetrievalIndex build_index(std::vector<std::string> ids,
                                    const EmbeddingBatch& embeddings);

 private:
  std::vector<std::string> ids_;
  Matrix embeddings_;
  std::unordered_map<std::string, std::size_t> rows_;
};

/// Throws DuplicateId or ShapeMismatch (ids vs rows).
RetrievalIndex build_index(std::vector<std::string> ids,
                           const EmbeddingBatch& embeddings);

struct Hit {
  std::string id;
  double score;

  friend bool operator==(const Hit&, const Hit&) = default;
};

/// Highest-scoring min(k, size) items, by descending score then ascending
/// id. Throws EmptyIndex, NotNormalized, ShapeMismatch.
std::vector<Hit> topk(const RetrievalIndex& index, std::span<const double> query,
                      std::size_t k);

/// topk for every row of `queries`.
std::vector<std::vector<Hit>> topk_batch(const RetrievalIndex& index,
                                         const EmbeddingBatch& queries,
                                         std::size_t k);

struct RecallReport {
  std::vector<std::size_t> k_values;
  std::map<std::size_t, double> recalls;
  std::size_t num_queries = 0;
};

inline const std::vector<std::size_t> kDefaultRecallKs = {1, 5, 10};

/// Fraction of queries whose ground-truth id is among their top-k hits.
/// Throws UnknownGroundTruthId.
RecallReport recall_at_k(const RetrievalIndex& index,
                         const EmbeddingBatch& queries,
                         const std::vector<std::string>& ground_truth,
                         const std::vector<std::size_t>& ks = kDefaultRecallKs);

/// Container kind "index": header {G, d}, id table, one embedding block.
void save_index(const std::filesystem::path& path, const RetrievalIndex& index);
RetrievalIndex load_index(const std::filesystem::path& path);

}  // namespace cona
