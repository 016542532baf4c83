#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "aar/binary_io.hpp"
#include "aar/errors.hpp"
#include "aar/rng.hpp"

namespace aar {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

using TokenSequence = std::vector<uint32_t>;

struct TokenizerConfig {
  uint32_t vocab_size = 32768;
  size_t max_len = 64;
};

namespace detail {

// Unicode whitespace beyond ASCII. Other non-ASCII code points count as
// token characters; case folding is ASCII-only.
inline bool is_unicode_space(uint32_t cp) {
  switch (cp) {
    case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
    case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}

inline bool is_separator(uint32_t cp) {
  if (cp < 128) {
    char c = static_cast<char>(cp);
    return std::isspace(static_cast<unsigned char>(c)) ||
           std::ispunct(static_cast<unsigned char>(c));
  }
  return is_unicode_space(cp);
}

// Decode one UTF-8 code point; malformed bytes are passed through as their
// own code points so tokenization is total.
inline uint32_t next_codepoint(std::string_view s, size_t& i) {
  unsigned char b0 = s[i];
  if (b0 < 0x80) { ++i; return b0; }
  size_t extra = 0;
  uint32_t cp = 0;
  if ((b0 & 0xE0) == 0xC0) { extra = 1; cp = b0 & 0x1F; }
  else if ((b0 & 0xF0) == 0xE0) { extra = 2; cp = b0 & 0x0F; }
  else if ((b0 & 0xF8) == 0xF0) { extra = 3; cp = b0 & 0x07; }
  else { ++i; return b0; }
  if (i + extra >= s.size()) {  // not enough continuation bytes
    ++i;
    return b0;
  }
  for (size_t k = 1; k <= extra; ++k) {
    unsigned char bk = s[i + k];
    if ((bk & 0xC0) != 0x80) { ++i; return b0; }
    cp = (cp << 6) | (bk & 0x3F);
  }
  i += extra + 1;
  return cp;
}

inline void append_codepoint_lower(std::string& out, std::string_view src, size_t begin, size_t end) {
  for (size_t k = begin; k < end; ++k) {
    char c = src[k];
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    out.push_back(c);
  }
}

}  // namespace detail

// Hash tokenizer: lowercase, split on whitespace/punctuation, map each token
// to fnv1a64(bytes) % vocab_size, truncate to max_len (prefix kept).
inline TokenSequence tokenize(std::string_view text, const TokenizerConfig& config) {
  require(config.vocab_size >= 2, "tokenize: vocab_size must be >= 2");
  TokenSequence ids;
  std::string token;
  auto flush = [&] {
    if (!token.empty() && ids.size() < config.max_len)
      ids.push_back(static_cast<uint32_t>(fnv1a64(token) % config.vocab_size));
    token.clear();
  };
  size_t i = 0;
  while (i < text.size() && ids.size() < config.max_len) {
    size_t start = i;
    uint32_t cp = detail::next_codepoint(text, i);
    if (detail::is_separator(cp))
      flush();
    else
      detail::append_codepoint_lower(token, text, start, i);
  }
  flush();
  return ids;
}

// The retriever g: a hashed embedding table mean-pooled over tokens, followed
// by one square projection. Parameters are doubles in memory; checkpoints
// store f32, so freshly initialized values are quantized to f32 up front to
// make init -> save -> load an identity.
struct EncoderParams {
  Mat embedding_table;  // vocab_size x embed_dim
  Mat projection;       // embed_dim x embed_dim
  uint64_t rng_seed = 0;

  uint32_t vocab_size() const { return static_cast<uint32_t>(embedding_table.rows()); }
  uint32_t embed_dim() const { return static_cast<uint32_t>(embedding_table.cols()); }

  TokenizerConfig tokenizer(size_t max_len = 64) const { return {vocab_size(), max_len}; }
};

namespace detail {

inline void quantize_f32(Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      m(i, j) = static_cast<double>(static_cast<float>(m(i, j)));
}

}  // namespace detail

inline EncoderParams init_encoder(uint32_t vocab_size, uint32_t embed_dim, uint64_t seed) {
  require(vocab_size >= 2 && embed_dim >= 1, "init_encoder: bad dimensions");
  EncoderParams p;
  p.rng_seed = seed;
  DetRng rng(seed_fold(seed, "encoder-init"));
  p.embedding_table.resize(vocab_size, embed_dim);
  for (Eigen::Index i = 0; i < p.embedding_table.rows(); ++i)
    for (Eigen::Index j = 0; j < p.embedding_table.cols(); ++j)
      p.embedding_table(i, j) = rng.uniform(-0.05, 0.05);
  p.projection = Mat::Identity(embed_dim, embed_dim);
  for (Eigen::Index i = 0; i < p.projection.rows(); ++i)
    for (Eigen::Index j = 0; j < p.projection.cols(); ++j)
      p.projection(i, j) += rng.uniform(-0.01, 0.01);
  detail::quantize_f32(p.embedding_table);
  detail::quantize_f32(p.projection);
  return p;
}

// Mean of embedding rows for the tokens, then projected. Empty sequence maps
// to the zero vector.
inline RowVec encode(const EncoderParams& params, const TokenSequence& tokens) {
  const auto dim = params.embedding_table.cols();
  RowVec pooled = RowVec::Zero(dim);
  if (tokens.empty()) return pooled;
  for (uint32_t t : tokens) {
    require(t < params.vocab_size(), "encode: token id out of range");
    pooled += params.embedding_table.row(t);
  }
  pooled /= static_cast<double>(tokens.size());
  return pooled * params.projection;
}

inline double score(const RowVec& q_emb, const RowVec& d_emb) {
  require(q_emb.cols() == d_emb.cols(), "score: dimension mismatch");
  return q_emb.dot(d_emb);
}

struct EncoderGrads {
  Mat embedding_table;
  Mat projection;

  static EncoderGrads zeros_like(const EncoderParams& p) {
    EncoderGrads g;
    g.embedding_table = Mat::Zero(p.embedding_table.rows(), p.embedding_table.cols());
    g.projection = Mat::Zero(p.projection.rows(), p.projection.cols());
    return g;
  }
};

struct PairLoss {
  double value = 0.0;
  EncoderGrads grads;
};

namespace detail {

// softplus(x) = ln(1 + e^x), safe over the whole double range.
inline double softplus(double x) {
  if (x > 0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

// sigmoid without overflow.
inline double sigmoid(double x) {
  if (x >= 0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

struct Pooled {
  RowVec mean;     // pre-projection
  RowVec encoded;  // mean * projection
};

inline Pooled pool(const EncoderParams& params, const TokenSequence& tokens) {
  const auto dim = params.embedding_table.cols();
  Pooled p;
  p.mean = RowVec::Zero(dim);
  for (uint32_t t : tokens) {
    require(t < params.vocab_size(), "encode: token id out of range");
    p.mean += params.embedding_table.row(t);
  }
  if (!tokens.empty()) p.mean /= static_cast<double>(tokens.size());
  p.encoded = p.mean * params.projection;
  return p;
}

// Backprop through one encoding o = mean(E rows) * P given dL/do.
inline void backprop_encoding(const EncoderParams& params, const TokenSequence& tokens,
                              const Pooled& pooled, const RowVec& d_out, EncoderGrads& grads) {
  grads.projection.noalias() += pooled.mean.transpose() * d_out;
  if (tokens.empty()) return;
  RowVec d_mean = d_out * params.projection.transpose();
  d_mean /= static_cast<double>(tokens.size());
  for (uint32_t t : tokens) grads.embedding_table.row(t) += d_mean;
}

// Accumulates loss and gradients of l(f(q,d+), f(q,d-)) into grads.
inline double accumulate_pair(const EncoderParams& params, const TokenSequence& q,
                              const TokenSequence& d_pos, const TokenSequence& d_neg,
                              EncoderGrads& grads) {
  Pooled pq = pool(params, q);
  Pooled pp = pool(params, d_pos);
  Pooled pn = pool(params, d_neg);
  const double delta = pq.encoded.dot(pp.encoded) - pq.encoded.dot(pn.encoded);
  const double value = softplus(-delta);
  const double d_delta = -sigmoid(-delta);  // dL/d(delta)
  RowVec d_q = d_delta * (pp.encoded - pn.encoded);
  RowVec d_pos_out = d_delta * pq.encoded;
  RowVec d_neg_out = -d_delta * pq.encoded;
  backprop_encoding(params, q, pq, d_q, grads);
  backprop_encoding(params, d_pos, pp, d_pos_out, grads);
  backprop_encoding(params, d_neg, pn, d_neg_out, grads);
  return value;
}

}  // namespace detail

// Two-way softmax cross entropy with the positive as the true class:
// value = ln(1 + exp(-(s+ - s-))). Gradients are exact.
inline PairLoss pair_loss(const EncoderParams& params, const TokenSequence& q,
                          const TokenSequence& d_pos, const TokenSequence& d_neg) {
  PairLoss out;
  out.grads = EncoderGrads::zeros_like(params);
  out.value = detail::accumulate_pair(params, q, d_pos, d_neg, out.grads);
  return out;
}

struct BatchInstance {
  std::string query_id;
  TokenSequence query;
  std::vector<TokenSequence> positives;
  std::vector<TokenSequence> negatives;
};

// Triple sum over queries, positives and negatives. Summation, so the value
// is independent of instance order up to roundoff.
inline PairLoss batch_loss_and_grads(const EncoderParams& params,
                                     const std::vector<BatchInstance>& batch) {
  PairLoss out;
  out.grads = EncoderGrads::zeros_like(params);
  for (const auto& inst : batch) {
    if (inst.positives.empty() || inst.negatives.empty())
      throw contract_error("batch_loss_and_grads: empty positive or negative set for query " +
                           inst.query_id);
    for (const auto& pos : inst.positives)
      for (const auto& neg : inst.negatives)
        out.value += detail::accumulate_pair(params, inst.query, pos, neg, out.grads);
  }
  return out;
}

struct AdamConfig {
  double lr = 5e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Mat m_embedding, v_embedding;
  Mat m_projection, v_projection;
  int64_t step = 0;

  static AdamState zeros_like(const EncoderParams& p) {
    AdamState s;
    s.m_embedding = Mat::Zero(p.embedding_table.rows(), p.embedding_table.cols());
    s.v_embedding = Mat::Zero(p.embedding_table.rows(), p.embedding_table.cols());
    s.m_projection = Mat::Zero(p.projection.rows(), p.projection.cols());
    s.v_projection = Mat::Zero(p.projection.rows(), p.projection.cols());
    return s;
  }
};

namespace detail {

inline void adam_block(Mat& param, const Mat& grad, Mat& m, Mat& v, const AdamConfig& c,
                       double bc1, double bc2, const char* block_name) {
  if (!grad.allFinite())
    throw numeric_error(std::string("apply_update: non-finite gradient in ") + block_name);
  m = c.beta1 * m + (1.0 - c.beta1) * grad;
  v = c.beta2 * v + (1.0 - c.beta2) * grad.cwiseProduct(grad);
  Mat m_hat = m / bc1;
  Mat v_hat = v / bc2;
  param -= c.lr * (m_hat.array() / (v_hat.array().sqrt() + c.eps)).matrix();
}

}  // namespace detail

inline void apply_update(EncoderParams& params, const EncoderGrads& grads, AdamState& state,
                         const AdamConfig& config) {
  require(grads.embedding_table.rows() == params.embedding_table.rows() &&
              grads.embedding_table.cols() == params.embedding_table.cols() &&
              grads.projection.rows() == params.projection.rows() &&
              grads.projection.cols() == params.projection.cols(),
          "apply_update: gradient shape mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  detail::adam_block(params.embedding_table, grads.embedding_table, state.m_embedding,
                     state.v_embedding, config, bc1, bc2, "embedding_table");
  detail::adam_block(params.projection, grads.projection, state.m_projection,
                     state.v_projection, config, bc1, bc2, "projection");
}

// Checkpoint: magic "AARENC01", u32 vocab_size, u32 embed_dim, then row-major
// f32 embedding_table followed by projection.
inline constexpr char kEncoderMagic[9] = "AARENC01";

inline void save_encoder(const EncoderParams& params, const std::string& path) {
  auto os = bin::open_out(path);
  bin::write_magic(os, kEncoderMagic);
  bin::write_u32(os, params.vocab_size());
  bin::write_u32(os, params.embed_dim());
  auto write_mat = [&](const Mat& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        bin::write_f32(os, static_cast<float>(m(i, j)));
  };
  write_mat(params.embedding_table);
  write_mat(params.projection);
  if (!os) throw io_error("failed writing encoder checkpoint: " + path);
}

inline EncoderParams load_encoder(const std::string& path) {
  auto is = bin::open_in(path);
  bin::check_magic(is, kEncoderMagic, path);
  uint32_t vocab = bin::read_u32(is, "vocab_size");
  uint32_t dim = bin::read_u32(is, "embed_dim");
  if (vocab < 2 || dim < 1)
    throw format_error("encoder checkpoint has bad dimensions: " + path);
  EncoderParams p;
  p.embedding_table.resize(vocab, dim);
  p.projection.resize(dim, dim);
  auto read_mat = [&](Mat& m, const char* what) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        m(i, j) = static_cast<double>(bin::read_f32(is, what));
  };
  read_mat(p.embedding_table, "embedding_table");
  read_mat(p.projection, "projection");
  if (!p.embedding_table.allFinite() || !p.projection.allFinite())
    throw format_error("encoder checkpoint has non-finite entries: " + path);
  return p;
}

}  // namespace aar
