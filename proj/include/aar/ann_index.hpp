#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "aar/binary_io.hpp"
#include "aar/corpus_io.hpp"
#include "aar/dual_encoder.hpp"
#include "aar/errors.hpp"
#include "aar/rng.hpp"

namespace aar {

enum class IndexMode { Exact, Ivf };

struct IvfConfig {
  uint32_t n_lists = 16;
  uint32_t n_probe = 4;
};

// Flat inner-product index over document embeddings. Vectors are quantized
// to f32 at build time so that save/load round trips are bit-exact and
// search results do not change across persistence.
struct Index {
  std::vector<std::string> doc_ids;
  Mat vectors;  // count x dim, f32-quantized doubles
  IndexMode mode = IndexMode::Exact;

  uint32_t n_lists = 0;
  uint32_t n_probe = 0;
  Mat centroids;                       // n_lists x dim
  std::vector<uint32_t> assignments;   // one list per vector
  std::vector<std::vector<uint32_t>> lists;

  size_t size() const { return doc_ids.size(); }
  uint32_t dim() const { return static_cast<uint32_t>(vectors.cols()); }

  void rebuild_lists() {
    lists.assign(n_lists, {});
    for (uint32_t i = 0; i < assignments.size(); ++i)
      lists[assignments[i]].push_back(i);
  }
};

namespace detail {

struct KmeansResult {
  Mat centroids;
  std::vector<uint32_t> assignments;
};

inline uint32_t nearest_centroid(const Mat& centroids, const RowVec& x) {
  uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    double d = (centroids.row(c) - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<uint32_t>(c);
    }
  }
  return best;
}

// Lloyd iterations with k-means++ seeding. Ties go to the lowest centroid
// index; an empty cluster keeps its previous centroid.
inline KmeansResult kmeans(const Mat& data, uint32_t k, uint64_t seed, int iterations = 20) {
  const auto n = data.rows();
  KmeansResult res;
  res.centroids.resize(k, data.cols());
  DetRng rng(seed_fold(seed, "kmeans"));

  // k-means++ seeding
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  Eigen::Index first = static_cast<Eigen::Index>(rng.below(static_cast<uint64_t>(n)));
  res.centroids.row(0) = data.row(first);
  for (uint32_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double d = (data.row(i) - res.centroids.row(c - 1)).squaredNorm();
      if (d < d2[i]) d2[i] = d;
      total += d2[i];
    }
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double target = rng.next_double() * total;
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= target) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.below(static_cast<uint64_t>(n)));
    }
    res.centroids.row(c) = data.row(pick);
  }

  res.assignments.assign(n, 0);
  std::vector<Eigen::Index> counts(k, 0);
  for (int it = 0; it < iterations; ++it) {
    for (Eigen::Index i = 0; i < n; ++i)
      res.assignments[i] = nearest_centroid(res.centroids, data.row(i));
    Mat sums = Mat::Zero(k, data.cols());
    std::fill(counts.begin(), counts.end(), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(res.assignments[i]) += data.row(i);
      counts[res.assignments[i]] += 1;
    }
    for (uint32_t c = 0; c < k; ++c)
      if (counts[c] > 0) res.centroids.row(c) = sums.row(c) / static_cast<double>(counts[c]);
  }
  // Final assignment against the last centroid update.
  for (Eigen::Index i = 0; i < n; ++i)
    res.assignments[i] = nearest_centroid(res.centroids, data.row(i));
  return res;
}

}  // namespace detail

inline Index build_index(const Corpus& corpus, const EncoderParams& params,
                         IndexMode mode = IndexMode::Exact, const IvfConfig& ivf = {},
                         uint64_t seed = 0, size_t max_len = 64) {
  require(corpus.size() > 0, "build_index: empty corpus");
  Index index;
  index.mode = mode;
  index.doc_ids.reserve(corpus.size());
  index.vectors.resize(static_cast<Eigen::Index>(corpus.size()), params.embed_dim());
  const TokenizerConfig tok = params.tokenizer(max_len);
  for (size_t i = 0; i < corpus.size(); ++i) {
    const auto& doc = corpus.documents[i];
    index.doc_ids.push_back(doc.id);
    index.vectors.row(static_cast<Eigen::Index>(i)) = encode(params, tokenize(doc.content(), tok));
  }
  detail::quantize_f32(index.vectors);

  if (mode == IndexMode::Ivf) {
    if (ivf.n_lists == 0 || ivf.n_lists > corpus.size())
      throw config_error("build_index: n_lists must be in [1, corpus size]");
    if (ivf.n_probe == 0 || ivf.n_probe > ivf.n_lists)
      throw config_error("build_index: n_probe must be in [1, n_lists]");
    index.n_lists = ivf.n_lists;
    index.n_probe = ivf.n_probe;
    auto km = detail::kmeans(index.vectors, ivf.n_lists, seed);
    index.centroids = km.centroids;
    detail::quantize_f32(index.centroids);
    index.assignments = km.assignments;
    index.rebuild_lists();
  }
  return index;
}

namespace detail {

inline void select_top_k(std::vector<std::pair<std::string, double>>& scored, size_t k) {
  auto cmp = [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  };
  if (scored.size() > k) {
    std::partial_sort(scored.begin(), scored.begin() + static_cast<long>(k), scored.end(), cmp);
    scored.resize(k);
  } else {
    std::sort(scored.begin(), scored.end(), cmp);
  }
}

}  // namespace detail

// Top-k by dot product. Exact mode scans all vectors; IVF scans the n_probe
// lists whose centroids have the highest dot product with the query, probing
// further lists only when those hold fewer than k candidates.
inline RetrievalResult search(const Index& index, const RowVec& q_emb, size_t k) {
  require(k >= 1, "search: k must be >= 1");
  require(index.size() > 0, "search: empty index");
  require(q_emb.cols() == index.vectors.cols(), "search: dimension mismatch");

  RetrievalResult result;
  result.requested_k = k;
  std::vector<std::pair<std::string, double>> scored;

  if (index.mode == IndexMode::Exact) {
    scored.reserve(index.size());
    for (Eigen::Index i = 0; i < index.vectors.rows(); ++i)
      scored.emplace_back(index.doc_ids[static_cast<size_t>(i)],
                          q_emb.dot(index.vectors.row(i)));
  } else {
    std::vector<std::pair<double, uint32_t>> probe_order;  // (-score, list)
    probe_order.reserve(index.n_lists);
    for (uint32_t c = 0; c < index.n_lists; ++c)
      probe_order.emplace_back(-q_emb.dot(index.centroids.row(c)), c);
    std::sort(probe_order.begin(), probe_order.end());
    size_t probed = 0;
    for (const auto& [neg_score, list_id] : probe_order) {
      if (probed >= index.n_probe && scored.size() >= k) break;
      for (uint32_t row : index.lists[list_id])
        scored.emplace_back(index.doc_ids[row], q_emb.dot(index.vectors.row(row)));
      ++probed;
    }
  }

  detail::select_top_k(scored, k);
  result.entries = std::move(scored);
  return result;
}

// Snapshot: magic "AARIDX01", u32 count, u32 dim, u32 mode tag (0 exact,
// 1 ivf), length-prefixed ids, row-major f32 vectors, then for IVF:
// u32 n_lists, u32 n_probe, f32 centroids, u32 assignments.
inline constexpr char kIndexMagic[9] = "AARIDX01";

inline void save_index(const Index& index, const std::string& path) {
  auto os = bin::open_out(path);
  bin::write_magic(os, kIndexMagic);
  bin::write_u32(os, static_cast<uint32_t>(index.size()));
  bin::write_u32(os, index.dim());
  bin::write_u32(os, index.mode == IndexMode::Exact ? 0u : 1u);
  for (const auto& id : index.doc_ids) bin::write_string(os, id);
  for (Eigen::Index i = 0; i < index.vectors.rows(); ++i)
    for (Eigen::Index j = 0; j < index.vectors.cols(); ++j)
      bin::write_f32(os, static_cast<float>(index.vectors(i, j)));
  if (index.mode == IndexMode::Ivf) {
    bin::write_u32(os, index.n_lists);
    bin::write_u32(os, index.n_probe);
    for (Eigen::Index i = 0; i < index.centroids.rows(); ++i)
      for (Eigen::Index j = 0; j < index.centroids.cols(); ++j)
        bin::write_f32(os, static_cast<float>(index.centroids(i, j)));
    for (uint32_t a : index.assignments) bin::write_u32(os, a);
  }
  if (!os) throw io_error("failed writing index snapshot: " + path);
}

inline Index load_index(const std::string& path) {
  auto is = bin::open_in(path);
  bin::check_magic(is, kIndexMagic, path);
  Index index;
  uint32_t count = bin::read_u32(is, "count");
  uint32_t dim = bin::read_u32(is, "dim");
  uint32_t tag = bin::read_u32(is, "mode tag");
  if (tag > 1) throw format_error("index snapshot has unknown mode tag: " + path);
  index.mode = tag == 0 ? IndexMode::Exact : IndexMode::Ivf;
  index.doc_ids.reserve(count);
  std::unordered_set<std::string> seen;
  for (uint32_t i = 0; i < count; ++i) {
    auto id = bin::read_string(is, "doc id");
    if (!seen.insert(id).second)
      throw format_error("index snapshot repeats doc id '" + id + "': " + path);
    index.doc_ids.push_back(std::move(id));
  }
  index.vectors.resize(count, dim);
  for (uint32_t i = 0; i < count; ++i)
    for (uint32_t j = 0; j < dim; ++j)
      index.vectors(i, j) = static_cast<double>(bin::read_f32(is, "vectors"));
  if (index.mode == IndexMode::Ivf) {
    index.n_lists = bin::read_u32(is, "n_lists");
    index.n_probe = bin::read_u32(is, "n_probe");
    if (index.n_lists == 0 || index.n_probe == 0 || index.n_probe > index.n_lists)
      throw format_error("index snapshot has bad IVF parameters: " + path);
    index.centroids.resize(index.n_lists, dim);
    for (uint32_t i = 0; i < index.n_lists; ++i)
      for (uint32_t j = 0; j < dim; ++j)
        index.centroids(i, j) = static_cast<double>(bin::read_f32(is, "centroids"));
    index.assignments.resize(count);
    for (uint32_t i = 0; i < count; ++i) {
      index.assignments[i] = bin::read_u32(is, "assignments");
      if (index.assignments[i] >= index.n_lists)
        throw format_error("index snapshot assignment out of range: " + path);
    }
    index.rebuild_lists();
  }
  return index;
}

}  // namespace aar
