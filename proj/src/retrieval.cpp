#include "cona/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

#include "cona/error.hpp"
#include "cona/io.hpp"
#include "cona/numerics.hpp"

namespace cona {

namespace {

bool ranks_before(double sa, const std::string& ia, double sb,
                  const std::string& ib) {
  if (sa != sb) return sa > sb;
  return ia < ib;
}

std::vector<Hit> select_top(const RetrievalIndex& index,
                            std::span<const double> scores, std::size_t k) {
  const auto& ids = index.ids();
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t take = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take),
                    order.end(), [&](std::size_t a, std::size_t b) {
                      return ranks_before(scores[a], ids[a], scores[b], ids[b]);
                    });
  std::vector<Hit> hits;
  hits.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    hits.push_back({ids[order[i]], std::clamp(scores[order[i]], -1.0, 1.0)});
  }
  return hits;
}

void check_query_shape(const RetrievalIndex& index, std::size_t width) {
  if (index.size() == 0) fail(ErrorKind::EmptyIndex, "index is empty");
  if (width != index.dim()) {
    fail(ErrorKind::ShapeMismatch, "query width " + std::to_string(width) +
                                       " != index dim " + std::to_string(index.dim()));
  }
}

}  // namespace

RetrievalIndex build_index(std::vector<std::string> ids,
                           const EmbeddingBatch& embeddings) {
  if (ids.size() != embeddings.n()) {
    fail(ErrorKind::ShapeMismatch, "id count != embedding rows");
  }
  RetrievalIndex index;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!index.rows_.emplace(ids[i], i).second) {
      fail(ErrorKind::DuplicateId, "duplicate id '" + ids[i] + "'");
    }
  }
  index.ids_ = std::move(ids);
  index.embeddings_ = embeddings.matrix();
  return index;
}

std::vector<Hit> topk(const RetrievalIndex& index, std::span<const double> query,
                      std::size_t k) {
  check_query_shape(index, query.size());
  Matrix q(1, query.size(), std::vector<double>(query.begin(), query.end()));
  const EmbeddingBatch checked(std::move(q));
  const Matrix scores = matmul_t(checked.matrix(), index.embeddings());
  return select_top(index, scores.row(0), k);
}

std::vector<std::vector<Hit>> topk_batch(const RetrievalIndex& index,
                                         const EmbeddingBatch& queries,
                                         std::size_t k) {
  check_query_shape(index, queries.d());
  const Matrix scores = matmul_t(queries.matrix(), index.embeddings());
  std::vector<std::vector<Hit>> out(queries.n());
  const auto n = static_cast<std::int64_t>(queries.n());
  if (current_exec() == Exec::Parallel) {
#pragma omp parallel for schedule(dynamic, 16)
    for (std::int64_t i = 0; i < n; ++i) {
      const auto r = static_cast<std::size_t>(i);
      out[r] = select_top(index, scores.row(r), k);
    }
  } else {
    for (std::size_t r = 0; r < queries.n(); ++r) {
      out[r] = select_top(index, scores.row(r), k);
    }
  }
  return out;
}

RecallReport recall_at_k(const RetrievalIndex& index,
                         const EmbeddingBatch& queries,
                         const std::vector<std::string>& ground_truth,
                         const std::vector<std::size_t>& ks) {
  if (ground_truth.size() != queries.n()) {
    fail(ErrorKind::ShapeMismatch, "one ground-truth id per query required");
  }
  for (const std::string& id : ground_truth) {
    if (!index.contains(id)) {
      fail(ErrorKind::UnknownGroundTruthId, "ground-truth id '" + id + "' not in index");
    }
  }
  RecallReport report;
  report.k_values = ks;
  report.num_queries = queries.n();
  if (ks.empty()) return report;
  for (std::size_t k : ks) {
    if (k < 1) fail(ErrorKind::BadConfig, "recall k must be >= 1");
  }
  const std::size_t max_k = *std::ranges::max_element(ks);
  std::map<std::size_t, std::size_t> hits_at;
  if (queries.n() > 0) {
    const auto results = topk_batch(index, queries, max_k);
    for (std::size_t q = 0; q < queries.n(); ++q) {
      const auto& hits = results[q];
      const auto it = std::ranges::find(hits, ground_truth[q], &Hit::id);
      const auto rank = static_cast<std::size_t>(it - hits.begin());
      for (std::size_t k : ks) {
        if (rank < k) ++hits_at[k];
      }
    }
  }
  for (std::size_t k : ks) {
    report.recalls[k] = queries.n() == 0
                            ? 0.0
                            : static_cast<double>(hits_at[k]) /
                                  static_cast<double>(queries.n());
  }
  return report;
}

void save_index(const std::filesystem::path& path, const RetrievalIndex& index) {
  io::Container c;
  c.header["kind"] = "index";
  c.header["format_version"] = io::kFormatVersion;
  c.header["G"] = index.size();
  c.header["d"] = index.dim();
  c.header["id_count"] = index.size();
  c.ids = index.ids();
  c.add_block("embeddings", index.embeddings());
  io::save_container(path, c);
}

RetrievalIndex load_index(const std::filesystem::path& path) {
  io::Container c = io::load_container(path, "index");
  const Matrix& emb = c.block("embeddings");
  if (c.header.value("G", std::size_t{0}) != emb.rows() ||
      c.header.value("d", std::size_t{0}) != emb.cols()) {
    fail(ErrorKind::FormatError, "index header disagrees with embedding block");
  }
  return build_index(std::move(c.ids), EmbeddingBatch(emb));
}

}  // namespace cona
