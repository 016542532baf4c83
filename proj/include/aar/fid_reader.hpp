#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "aar/binary_io.hpp"
#include "aar/corpus_io.hpp"
#include "aar/dual_encoder.hpp"
#include "aar/errors.hpp"
#include "aar/rng.hpp"

namespace aar {

// Toy encoder-decoder reader used as source and target LM. Pre-norm
// transformer, learned absolute positions, greedy decoding. Each retrieved
// document is encoded as its own segment (document text followed by the
// query); the decoder cross-attends over the concatenation of all segments.
//
// Tensor shapes for a config (ln, hn, d, vocab, max_seg):
//   tok_emb: vocab x d      enc_pos, dec_pos: max_seg x d
//   per encoder layer: ln1.g/b 1xd, wq/wk/wv/wo d x d,
//                      ln2.g/b 1xd, mlp.w1 d x 4d, mlp.b1 1x4d,
//                      mlp.w2 4d x d, mlp.b2 1xd
//   per decoder layer: the same plus lnx.g/b and cross.wq/wk/wv/wo
//   enc_final_ln.g/b, dec_final_ln.g/b: 1xd    lm_head: d x vocab
//   cross_affinity: 1 x vocab (planted attention bias, zero by default)
struct ReaderConfig {
  int ln = 2;
  int hn = 2;
  int d_model = 32;
  uint32_t vocab_size = 32768;
  int max_seg_len = 64;
  uint64_t seed = 0;
  // Pointer-style bias: each decoder logit is raised by
  // copy_strength * (occurrences of that token in the encoder input).
  // Zero disables the mechanism.
  double copy_strength = 0.0;

  TokenizerConfig tokenizer() const {
    return {vocab_size, static_cast<size_t>(max_seg_len)};
  }
};

struct ReaderModel {
  ReaderConfig config;
  std::map<std::string, Mat> tensors;

  const Mat& t(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw contract_error("reader tensor missing: " + name);
    return it->second;
  }
};

inline constexpr uint32_t kBosToken = 0;

inline ReaderModel init_reader(const ReaderConfig& config) {
  if (config.ln < 1 || config.hn < 1)
    throw config_error("init_reader: ln and hn must be >= 1");
  if (config.d_model % config.hn != 0)
    throw config_error("init_reader: d_model must be divisible by hn");
  if (config.vocab_size < 2 || config.max_seg_len < 1)
    throw config_error("init_reader: bad vocab_size or max_seg_len");

  ReaderModel model;
  model.config = config;
  DetRng rng(seed_fold(config.seed, "reader-init"));
  const int d = config.d_model;
  const int dff = 4 * d;

  auto randn = [&](int rows, int cols) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        m(i, j) = rng.normal(0.0, 0.02);
    detail::quantize_f32(m);
    return m;
  };
  auto ones = [&](int cols) { return Mat::Ones(1, cols); };
  auto zeros = [&](int rows, int cols) { return Mat::Zero(rows, cols); };

  model.tensors["tok_emb"] = randn(static_cast<int>(config.vocab_size), d);
  model.tensors["enc_pos"] = randn(config.max_seg_len, d);
  model.tensors["dec_pos"] = randn(config.max_seg_len, d);

  auto add_block = [&](const std::string& prefix, bool cross) {
    model.tensors[prefix + ".ln1.g"] = ones(d);
    model.tensors[prefix + ".ln1.b"] = zeros(1, d);
    for (const char* w : {"wq", "wk", "wv", "wo"})
      model.tensors[prefix + ".self." + w] = randn(d, d);
    if (cross) {
      model.tensors[prefix + ".lnx.g"] = ones(d);
      model.tensors[prefix + ".lnx.b"] = zeros(1, d);
      for (const char* w : {"wq", "wk", "wv", "wo"})
        model.tensors[prefix + ".cross." + w] = randn(d, d);
    }
    model.tensors[prefix + ".ln2.g"] = ones(d);
    model.tensors[prefix + ".ln2.b"] = zeros(1, d);
    model.tensors[prefix + ".mlp.w1"] = randn(d, dff);
    model.tensors[prefix + ".mlp.b1"] = zeros(1, dff);
    model.tensors[prefix + ".mlp.w2"] = randn(dff, d);
    model.tensors[prefix + ".mlp.b2"] = zeros(1, d);
  };
  for (int l = 0; l < config.ln; ++l) add_block("enc." + std::to_string(l), false);
  for (int l = 0; l < config.ln; ++l) add_block("dec." + std::to_string(l), true);
  model.tensors["enc_final_ln.g"] = ones(d);
  model.tensors["enc_final_ln.b"] = zeros(1, d);
  model.tensors["dec_final_ln.g"] = ones(d);
  model.tensors["dec_final_ln.b"] = zeros(1, d);
  model.tensors["lm_head"] = randn(d, static_cast<int>(config.vocab_size));
  model.tensors["cross_affinity"] = zeros(1, static_cast<int>(config.vocab_size));
  return model;
}

struct FlopCounter {
  uint64_t encoder_macs = 0;
  uint64_t decoder_macs = 0;
};

struct FidOutput {
  Mat decoder_logits;  // decode steps x vocab
  // cross_attention[layer][head]: decode steps x encoder positions,
  // post-softmax (each row sums to 1).
  std::vector<std::vector<Mat>> cross_attention;
  std::vector<std::pair<int, int>> segment_map;  // enc pos -> (doc idx, token idx)
  std::vector<int> segment_sizes;
  std::vector<uint32_t> generated;  // greedy tokens, one per step
  FlopCounter flops;
};

namespace reader_detail {

inline Mat layer_norm(const Mat& x, const Mat& g, const Mat& b) {
  Mat out(x.rows(), x.cols());
  const double eps = 1e-5;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mean = x.row(i).mean();
    double var = (x.row(i).array() - mean).square().mean();
    out.row(i) = (((x.row(i).array() - mean) / std::sqrt(var + eps)) * g.row(0).array() +
                  b.row(0).array())
                     .matrix();
  }
  return out;
}

inline Mat matmul(const Mat& a, const Mat& b, uint64_t& macs) {
  macs += static_cast<uint64_t>(a.rows()) * static_cast<uint64_t>(a.cols()) *
          static_cast<uint64_t>(b.cols());
  return a * b;
}

inline void softmax_rows(Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    double mx = m.row(i).maxCoeff();
    m.row(i) = (m.row(i).array() - mx).exp().matrix();
    m.row(i) /= m.row(i).sum();
  }
}

inline Mat relu(const Mat& x) { return x.cwiseMax(0.0); }

struct AttentionOut {
  Mat value;                 // rows x d
  std::vector<Mat> weights;  // per head, rows x key count
};

// Multi-head attention of q_input over kv_input. bias (1 x key count) is
// added to every pre-softmax row; causal masks key j > query i.
inline AttentionOut attention(const ReaderModel& model, const std::string& prefix,
                              const Mat& q_input, const Mat& kv_input, const Mat* bias,
                              bool causal, uint64_t& macs, bool keep_weights) {
  const int d = model.config.d_model;
  const int hn = model.config.hn;
  const int dh = d / hn;
  Mat q = matmul(q_input, model.t(prefix + ".wq"), macs);
  Mat k = matmul(kv_input, model.t(prefix + ".wk"), macs);
  Mat v = matmul(kv_input, model.t(prefix + ".wv"), macs);
  Mat concat(q_input.rows(), d);
  AttentionOut out;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < hn; ++h) {
    const Eigen::Index at = static_cast<Eigen::Index>(h) * dh;
    auto qh = q.middleCols(at, dh);
    auto kh = k.middleCols(at, dh);
    auto vh = v.middleCols(at, dh);
    macs += static_cast<uint64_t>(qh.rows()) * static_cast<uint64_t>(dh) *
            static_cast<uint64_t>(kh.rows());
    Mat scores = (qh * kh.transpose()) * scale;
    if (bias) scores.rowwise() += bias->row(0);
    if (causal)
      for (Eigen::Index i = 0; i < scores.rows(); ++i)
        for (Eigen::Index j = i + 1; j < scores.cols(); ++j)
          scores(i, j) = -1e30;
    softmax_rows(scores);
    macs += static_cast<uint64_t>(scores.rows()) * static_cast<uint64_t>(scores.cols()) *
            static_cast<uint64_t>(dh);
    concat.middleCols(at, dh) = scores * vh;
    if (keep_weights) out.weights.push_back(std::move(scores));
  }
  out.value = matmul(concat, model.t(prefix + ".wo"), macs);
  return out;
}

inline Mat mlp(const ReaderModel& model, const std::string& prefix, const Mat& x,
               uint64_t& macs) {
  Mat h = matmul(x, model.t(prefix + ".mlp.w1"), macs);
  h.rowwise() += model.t(prefix + ".mlp.b1").row(0);
  h = relu(h);
  Mat out = matmul(h, model.t(prefix + ".mlp.w2"), macs);
  out.rowwise() += model.t(prefix + ".mlp.b2").row(0);
  return out;
}

inline Mat embed(const ReaderModel& model, const std::vector<uint32_t>& ids,
                 const std::string& pos_table) {
  const auto& emb = model.t("tok_emb");
  const auto& pos = model.t(pos_table);
  Mat x(static_cast<Eigen::Index>(ids.size()), model.config.d_model);
  for (size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] < model.config.vocab_size, "reader token id out of range");
    require(static_cast<Eigen::Index>(i) < pos.rows(), "sequence exceeds position table");
    x.row(static_cast<Eigen::Index>(i)) = emb.row(ids[i]) + pos.row(static_cast<Eigen::Index>(i));
  }
  return x;
}

// Encoder over one segment; self-attention never sees other segments.
inline Mat encode_segment(const ReaderModel& model, const std::vector<uint32_t>& ids,
                          uint64_t& macs) {
  Mat x = embed(model, ids, "enc_pos");
  for (int l = 0; l < model.config.ln; ++l) {
    std::string p = "enc." + std::to_string(l);
    Mat normed = layer_norm(x, model.t(p + ".ln1.g"), model.t(p + ".ln1.b"));
    x += attention(model, p + ".self", normed, normed, nullptr, false, macs, false).value;
    Mat normed2 = layer_norm(x, model.t(p + ".ln2.g"), model.t(p + ".ln2.b"));
    x += mlp(model, p, normed2, macs);
  }
  return layer_norm(x, model.t("enc_final_ln.g"), model.t("enc_final_ln.b"));
}

struct EncodedContext {
  Mat states;                                    // total positions x d
  std::vector<uint32_t> token_ids;               // per encoder position
  std::vector<std::pair<int, int>> segment_map;  // (doc idx, token idx)
  std::vector<int> segment_sizes;
  Mat cross_bias;   // 1 x positions, planted affinity per position
  RowVec copy_boost;  // 1 x vocab, copy_strength * occurrence count
  uint64_t encoder_macs = 0;
};

inline EncodedContext encode_context(const ReaderModel& model, const std::string& query,
                                     const std::vector<Document>& docs) {
  require(!docs.empty(), "fid_forward: document list must not be empty");
  const auto tok = model.config.tokenizer();
  EncodedContext ctx;
  std::vector<Mat> segs;
  for (size_t i = 0; i < docs.size(); ++i) {
    std::string content = docs[i].content();
    std::string seg_text = content.empty() ? query : content + " " + query;
    TokenSequence ids = tokenize(seg_text, tok);
    if (ids.empty()) ids.push_back(kBosToken);
    segs.push_back(encode_segment(model, ids, ctx.encoder_macs));
    for (size_t t = 0; t < ids.size(); ++t) {
      ctx.token_ids.push_back(ids[t]);
      ctx.segment_map.emplace_back(static_cast<int>(i), static_cast<int>(t));
    }
    ctx.segment_sizes.push_back(static_cast<int>(ids.size()));
  }
  Eigen::Index total = static_cast<Eigen::Index>(ctx.token_ids.size());
  ctx.states.resize(total, model.config.d_model);
  Eigen::Index row = 0;
  for (const auto& s : segs) {
    ctx.states.middleRows(row, s.rows()) = s;
    row += s.rows();
  }
  const auto& affinity = model.t("cross_affinity");
  ctx.cross_bias.resize(1, total);
  for (Eigen::Index p = 0; p < total; ++p)
    ctx.cross_bias(0, p) = affinity(0, ctx.token_ids[static_cast<size_t>(p)]);
  ctx.copy_boost = RowVec::Zero(model.config.vocab_size);
  if (model.config.copy_strength != 0.0)
    for (uint32_t id : ctx.token_ids) ctx.copy_boost(0, id) += model.config.copy_strength;
  return ctx;
}

struct DecoderPass {
  Mat logits;                              // prefix length x vocab
  std::vector<std::vector<Mat>> cross;     // layer x head x (prefix x positions)
};

inline DecoderPass decode_prefix(const ReaderModel& model, const EncodedContext& ctx,
                                 const std::vector<uint32_t>& prefix, uint64_t& macs,
                                 bool keep_weights) {
  Mat x = embed(model, prefix, "dec_pos");
  DecoderPass pass;
  for (int l = 0; l < model.config.ln; ++l) {
    std::string p = "dec." + std::to_string(l);
    Mat normed = layer_norm(x, model.t(p + ".ln1.g"), model.t(p + ".ln1.b"));
    x += attention(model, p + ".self", normed, normed, nullptr, true, macs, false).value;
    Mat normedx = layer_norm(x, model.t(p + ".lnx.g"), model.t(p + ".lnx.b"));
    auto cross = attention(model, p + ".cross", normedx, ctx.states, &ctx.cross_bias, false,
                           macs, keep_weights);
    x += cross.value;
    if (keep_weights) pass.cross.push_back(std::move(cross.weights));
    Mat normed2 = layer_norm(x, model.t(p + ".ln2.g"), model.t(p + ".ln2.b"));
    x += mlp(model, p, normed2, macs);
  }
  x = layer_norm(x, model.t("dec_final_ln.g"), model.t("dec_final_ln.b"));
  pass.logits = matmul(x, model.t("lm_head"), macs);
  if (model.config.copy_strength != 0.0) pass.logits.rowwise() += ctx.copy_boost.row(0);
  return pass;
}

inline double log_softmax_at(const Mat& logits, Eigen::Index row, uint32_t target) {
  double mx = logits.row(row).maxCoeff();
  double sum = (logits.row(row).array() - mx).exp().sum();
  return logits(row, target) - mx - std::log(sum);
}

}  // namespace reader_detail

// Run the FiD forward pass: encode each (document, query) segment
// independently, then greedily decode `decode_steps` tokens while recording
// every cross-attention tensor.
inline FidOutput fid_forward(const ReaderModel& model, const std::string& query,
                             const std::vector<Document>& docs, int decode_steps) {
  require(decode_steps >= 1, "fid_forward: decode_steps must be >= 1");
  require(decode_steps <= model.config.max_seg_len,
          "fid_forward: decode_steps exceeds position table");
  auto ctx = reader_detail::encode_context(model, query, docs);

  FidOutput out;
  out.segment_map = ctx.segment_map;
  out.segment_sizes = ctx.segment_sizes;
  out.flops.encoder_macs = ctx.encoder_macs;

  std::vector<uint32_t> prefix{kBosToken};
  for (int step = 0; step < decode_steps - 1; ++step) {
    auto pass = reader_detail::decode_prefix(model, ctx, prefix, out.flops.decoder_macs, false);
    Eigen::Index best = 0;
    pass.logits.row(pass.logits.rows() - 1).maxCoeff(&best);
    prefix.push_back(static_cast<uint32_t>(best));
  }
  // One final pass over the full prefix; causal masking makes its rows agree
  // with the incremental passes.
  auto pass = reader_detail::decode_prefix(model, ctx, prefix, out.flops.decoder_macs, true);
  out.decoder_logits = std::move(pass.logits);
  out.cross_attention = std::move(pass.cross);
  out.generated.reserve(decode_steps);
  for (Eigen::Index t = 0; t < out.decoder_logits.rows(); ++t) {
    Eigen::Index best = 0;
    out.decoder_logits.row(t).maxCoeff(&best);
    out.generated.push_back(static_cast<uint32_t>(best));
  }
  return out;
}

struct FidAttRecord {
  std::string query_id;
  std::vector<std::pair<std::string, double>> scores;  // one per retrieved doc
};

// FiDAtt aggregation: mean of the first decoder step's cross-attention over
// all layers, all heads, and the tokens of each document's segment.
inline FidAttRecord aggregate_fidatt(const FidOutput& output, const std::vector<std::string>& doc_ids) {
  require(doc_ids.size() == output.segment_sizes.size(),
          "aggregate_fidatt: doc_ids do not match segments");
  const size_t ln = output.cross_attention.size();
  require(ln >= 1 && !output.cross_attention[0].empty(), "aggregate_fidatt: no attention recorded");
  const size_t hn = output.cross_attention[0].size();

  FidAttRecord rec;
  std::vector<double> sums(doc_ids.size(), 0.0);
  for (size_t l = 0; l < ln; ++l) {
    for (size_t h = 0; h < hn; ++h) {
      const Mat& att = output.cross_attention[l][h];
      for (Eigen::Index p = 0; p < att.cols(); ++p)
        sums[static_cast<size_t>(output.segment_map[static_cast<size_t>(p)].first)] += att(0, p);
    }
  }
  for (size_t i = 0; i < doc_ids.size(); ++i) {
    double denom = static_cast<double>(ln) * static_cast<double>(hn) *
                   static_cast<double>(output.segment_sizes[i]);
    rec.scores.emplace_back(doc_ids[i], sums[i] / denom);
  }
  return rec;
}

inline void write_fidatt_file(const std::vector<FidAttRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open fidatt file for writing: " + path);
  char buf[40];
  for (const auto& rec : records)
    for (const auto& [doc_id, s] : rec.scores) {
      std::snprintf(buf, sizeof(buf), "%.9e", s);
      out << rec.query_id << " " << doc_id << " " << buf << "\n";
    }
}

enum class PromptTemplate { Mmlu, PopQa };

inline std::string render_prompt(PromptTemplate template_id, const QueryRecord& query,
                                 const std::vector<std::string>& choices = {}) {
  if (template_id == PromptTemplate::PopQa) return "Q: " + query.text + " A:";
  const std::vector<std::string>& c = choices.empty() ? query.choices : choices;
  if (c.size() != 4)
    throw contract_error("render_prompt: MMLU template requires exactly 4 choices (query " +
                         query.id + ")");
  return "Here's a problem to solve: " + query.text + "\n" +
         "Among the 4 following options, which is the correct answer?\n" +
         "- A: " + c[0] + "\n- B: " + c[1] + "\n- C: " + c[2] + "\n- D: " + c[3];
}

// Teacher-forced log-likelihood of each candidate under the FiD decoder.
// Returns (argmax index, per-candidate log-likelihoods); ties take the
// lowest index.
inline std::pair<size_t, std::vector<double>> score_candidates(
    const ReaderModel& model, const std::string& query, const std::vector<Document>& docs,
    const std::vector<std::string>& candidates) {
  require(!candidates.empty(), "score_candidates: candidate list must not be empty");
  auto ctx = reader_detail::encode_context(model, query, docs);
  const auto tok = model.config.tokenizer();
  std::vector<double> lls;
  lls.reserve(candidates.size());
  uint64_t macs = 0;
  for (const auto& cand : candidates) {
    TokenSequence target = tokenize(cand, tok);
    if (target.empty())
      throw contract_error("score_candidates: candidate tokenizes to empty: '" + cand + "'");
    std::vector<uint32_t> prefix{kBosToken};
    prefix.insert(prefix.end(), target.begin(), target.end() - 1);
    auto pass = reader_detail::decode_prefix(model, ctx, prefix, macs, false);
    double ll = 0.0;
    for (size_t t = 0; t < target.size(); ++t)
      ll += reader_detail::log_softmax_at(pass.logits, static_cast<Eigen::Index>(t), target[t]);
    lls.push_back(ll);
  }
  size_t best = 0;
  for (size_t i = 1; i < lls.size(); ++i)
    if (lls[i] > lls[best]) best = i;
  return {best, lls};
}

// Raise the cross-attention weight of positions holding the given tokens.
// Bias is added to the pre-softmax attention logits in every decoder layer
// and head, so segments containing high-affinity tokens draw more attention.
inline ReaderModel plant_preference(const ReaderModel& model,
                                    const std::map<std::string, double>& affinity_table) {
  ReaderModel planted = model;
  Mat& affinity = planted.tensors["cross_affinity"];
  for (const auto& [token, weight] : affinity_table) {
    uint32_t id = static_cast<uint32_t>(fnv1a64(token) % model.config.vocab_size);
    affinity(0, id) += weight;
  }
  detail::quantize_f32(affinity);
  return planted;
}

// Checkpoint: magic "AARFID01", config header, then named tensor sections
// (name, rows, cols, row-major f32 data) in name order.
inline constexpr char kReaderMagic[9] = "AARFID01";

inline void save_reader(const ReaderModel& model, const std::string& path) {
  auto os = bin::open_out(path);
  bin::write_magic(os, kReaderMagic);
  bin::write_u32(os, static_cast<uint32_t>(model.config.ln));
  bin::write_u32(os, static_cast<uint32_t>(model.config.hn));
  bin::write_u32(os, static_cast<uint32_t>(model.config.d_model));
  bin::write_u32(os, model.config.vocab_size);
  bin::write_u32(os, static_cast<uint32_t>(model.config.max_seg_len));
  bin::write_u64(os, model.config.seed);
  bin::write_f64(os, model.config.copy_strength);
  bin::write_u32(os, static_cast<uint32_t>(model.tensors.size()));
  for (const auto& [name, m] : model.tensors) {
    bin::write_string(os, name);
    bin::write_u32(os, static_cast<uint32_t>(m.rows()));
    bin::write_u32(os, static_cast<uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        bin::write_f32(os, static_cast<float>(m(i, j)));
  }
  if (!os) throw io_error("failed writing reader checkpoint: " + path);
}

inline ReaderModel load_reader(const std::string& path) {
  auto is = bin::open_in(path);
  bin::check_magic(is, kReaderMagic, path);
  ReaderModel model;
  model.config.ln = static_cast<int>(bin::read_u32(is, "ln"));
  model.config.hn = static_cast<int>(bin::read_u32(is, "hn"));
  model.config.d_model = static_cast<int>(bin::read_u32(is, "d_model"));
  model.config.vocab_size = bin::read_u32(is, "vocab_size");
  model.config.max_seg_len = static_cast<int>(bin::read_u32(is, "max_seg_len"));
  model.config.seed = bin::read_u64(is, "seed");
  model.config.copy_strength = bin::read_f64(is, "copy_strength");
  uint32_t n = bin::read_u32(is, "tensor count");
  for (uint32_t k = 0; k < n; ++k) {
    std::string name = bin::read_string(is, "tensor name");
    uint32_t rows = bin::read_u32(is, "tensor rows");
    uint32_t cols = bin::read_u32(is, "tensor cols");
    Mat m(rows, cols);
    for (uint32_t i = 0; i < rows; ++i)
      for (uint32_t j = 0; j < cols; ++j)
        m(i, j) = static_cast<double>(bin::read_f32(is, "tensor data"));
    if (!m.allFinite())
      throw format_error("reader checkpoint tensor '" + name + "' has non-finite entries: " + path);
    model.tensors.emplace(std::move(name), std::move(m));
  }
  return model;
}

}  // namespace aar
