#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "aar/ann_index.hpp"
#include "aar/corpus_io.hpp"
#include "aar/dual_encoder.hpp"
#include "aar/errors.hpp"
#include "aar/eval_harness.hpp"
#include "aar/fid_reader.hpp"
#include "aar/rng.hpp"

namespace aar {

enum class PositiveSource { HumanOnly, LmOnly, Union };

inline PositiveSource parse_positive_source(const std::string& s) {
  if (s == "human") return PositiveSource::HumanOnly;
  if (s == "lm") return PositiveSource::LmOnly;
  if (s == "union") return PositiveSource::Union;
  throw config_error("unknown positive source '" + s + "' (expected human|lm|union)");
}

inline const char* to_string(PositiveSource s) {
  switch (s) {
    case PositiveSource::HumanOnly: return "human";
    case PositiveSource::LmOnly: return "lm";
    default: return "union";
  }
}

struct AatConfig {
  int N = 10;                    // retrieved documents per query
  int K = 2;                     // LM-preferred documents kept from the top of D^a
  int M = 100;                   // negative mining depth
  int negatives_per_positive = 4;
  // Steps between index rebuilds: 0 refreshes at each epoch boundary,
  // negative values disable refreshing entirely.
  int64_t refresh_every = 0;
  int batch_size = 8;
  double lr = 5e-6;
  int epochs = 6;
  PositiveSource source = PositiveSource::Union;
  bool full_negative_sum = false;  // train on the whole mined pool (tiny runs only)
  uint64_t seed = 0;
  size_t max_len = 64;
  int fid_decode_steps = 1;  // FiDAtt only needs the first decoder step

  void validate() const {
    if (N < 1) throw config_error("AatConfig: N must be >= 1");
    if (K < 0 || K > N) throw config_error("AatConfig: K must be in [0, N]");
    if (M < N) throw config_error("AatConfig: M must be >= N");
    if (negatives_per_positive < 1)
      throw config_error("AatConfig: negatives_per_positive must be >= 1");
    if (batch_size < 1 || epochs < 1)
      throw config_error("AatConfig: batch_size and epochs must be >= 1");
  }

  // Named presets for the two retriever initializations.
  static AatConfig ance() { return {}; }
  static AatConfig contriever() {
    AatConfig c;
    c.lr = 1e-5;
    c.epochs = 3;
    return c;
  }
};

inline AatConfig make_preset(const std::string& name) {
  if (name == "ance") return AatConfig::ance();
  if (name == "contriever") return AatConfig::contriever();
  throw config_error("unknown preset '" + name + "' (expected ance|contriever)");
}

struct TrainingInstance {
  std::string query_id;
  TokenSequence query_tokens;
  std::set<std::string> positives;      // D^{a+}
  std::vector<std::string> negatives;   // drawn from D^-, rank order preserved
};

// D^{a+} = D^{h+} union Top-K by FiDAtt score (Union), or either side alone
// for the ablations. Top-K ties break by ascending doc_id.
inline std::set<std::string> build_positive_set(const std::string& query_id,
                                                const std::set<std::string>& human_pos,
                                                const FidAttRecord& fidatt, int K,
                                                PositiveSource source) {
  require(K >= 0, "build_positive_set: K must be >= 0");
  require(static_cast<size_t>(K) <= fidatt.scores.size(),
          "build_positive_set: K exceeds the annotated document count");
  if (source != PositiveSource::LmOnly && human_pos.empty())
    throw annotation_error("query " + query_id + ": human positive set is empty");

  std::set<std::string> out;
  if (source != PositiveSource::LmOnly) out = human_pos;
  if (source != PositiveSource::HumanOnly && K > 0) {
    auto ranked = fidatt.scores;
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    for (int i = 0; i < K; ++i) out.insert(ranked[static_cast<size_t>(i)].first);
  }
  return out;
}

// D^- = top-M retrieved minus the positive set, kept in rank order.
inline std::vector<std::string> mine_negatives(const Index& index, const RowVec& q_emb, int M,
                                               const std::set<std::string>& positives,
                                               const std::string& query_id) {
  require(M >= 1 && static_cast<size_t>(M) <= index.size(),
          "mine_negatives: M must be in [1, corpus size]");
  auto result = search(index, q_emb, static_cast<size_t>(M));
  std::vector<std::string> out;
  out.reserve(result.entries.size());
  for (const auto& [doc_id, s] : result.entries)
    if (!positives.count(doc_id)) out.push_back(doc_id);
  if (out.empty())
    throw annotation_error("query " + query_id + ": positives swallow the entire top-" +
                           std::to_string(M));
  return out;
}

namespace detail {

// negatives_per_positive draws per positive, uniform without replacement.
inline std::vector<std::string> sample_negatives(const std::vector<std::string>& pool,
                                                 size_t positives, int per_positive,
                                                 uint64_t seed) {
  size_t want = std::min(pool.size(), positives * static_cast<size_t>(per_positive));
  std::vector<std::string> shuffled = pool;
  DetRng rng(seed);
  for (size_t i = 0; i < want; ++i) {
    size_t j = i + static_cast<size_t>(rng.below(shuffled.size() - i));
    std::swap(shuffled[i], shuffled[j]);
  }
  shuffled.resize(want);
  return shuffled;
}

}  // namespace detail

struct AnnotationReport {
  size_t total = 0;
  size_t annotated = 0;
  size_t dropped = 0;
  std::vector<std::pair<std::string, std::string>> drops;  // (query_id, reason)
};

struct AnnotationResult {
  std::vector<TrainingInstance> instances;
  std::vector<FidAttRecord> fidatt;
  AnnotationReport report;
};

// Full source-task annotation: retrieve top-N, score with the source reader,
// build the positive set, mine negatives. Queries that cannot be annotated
// are dropped and reported, never silently imputed.
inline AnnotationResult annotate_source_task(const std::vector<QueryRecord>& queries,
                                             const Corpus& corpus, const EncoderParams& params,
                                             const ReaderModel& reader, const AatConfig& config) {
  config.validate();
  if (static_cast<size_t>(config.M) > corpus.size())
    throw config_error("annotate_source_task: M exceeds the corpus size");
  AnnotationResult out;
  out.report.total = queries.size();
  Index index = build_index(corpus, params, IndexMode::Exact, {}, config.seed, config.max_len);
  const TokenizerConfig tok = params.tokenizer(config.max_len);

  for (const auto& query : queries) {
    try {
      if (config.source != PositiveSource::LmOnly) {
        if (query.human_positive_ids.empty())
          throw annotation_error("query " + query.id + ": no human positives");
        for (const auto& id : query.human_positive_ids)
          if (!corpus.contains(id))
            throw annotation_error("query " + query.id + ": human positive '" + id +
                                   "' is not in the corpus");
      }
      TokenSequence q_tokens = tokenize(query.text, tok);
      RowVec q_emb = encode(params, q_tokens);
      auto retrieved = search(index, q_emb, static_cast<size_t>(config.N));

      std::vector<Document> docs;
      std::vector<std::string> doc_ids;
      for (const auto& [doc_id, s] : retrieved.entries) {
        docs.push_back(corpus.by_id(doc_id));
        doc_ids.push_back(doc_id);
      }
      auto fid = fid_forward(reader, query.text, docs, config.fid_decode_steps);
      FidAttRecord rec = aggregate_fidatt(fid, doc_ids);
      rec.query_id = query.id;

      TrainingInstance inst;
      inst.query_id = query.id;
      inst.query_tokens = std::move(q_tokens);
      inst.positives =
          build_positive_set(query.id, query.human_positive_ids, rec, config.K, config.source);
      auto pool = mine_negatives(index, q_emb, config.M, inst.positives, query.id);
      inst.negatives =
          config.full_negative_sum
              ? pool
              : detail::sample_negatives(pool, inst.positives.size(),
                                         config.negatives_per_positive,
                                         seed_fold(config.seed, "negsample:" + query.id + ":0"));
      out.fidatt.push_back(std::move(rec));
      out.instances.push_back(std::move(inst));
      ++out.report.annotated;
    } catch (const annotation_error& e) {
      ++out.report.dropped;
      out.report.drops.emplace_back(query.id, e.what());
    }
  }
  return out;
}

inline void write_instances(const std::vector<TrainingInstance>& instances,
                            const std::string& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open instances file for writing: " + path);
  for (const auto& inst : instances) {
    nlohmann::json j;
    j["query_id"] = inst.query_id;
    j["positives"] = std::vector<std::string>(inst.positives.begin(), inst.positives.end());
    j["negatives"] = inst.negatives;
    out << j.dump() << "\n";
  }
}

struct TrainLogRecord {
  int64_t step = 0;
  double loss = 0.0;
  int refresh_id = 0;
  double mrr_at_10 = 0.0;
};

struct TrainLog {
  std::vector<std::string> header;  // "key = value" echo lines
  std::vector<TrainLogRecord> records;
  size_t remine_failures = 0;
};

// Line format: step loss refresh_id mrr_at_10. Header lines start with '#'.
// The step-0 record is the pre-training snapshot (loss printed as 0).
inline void write_train_log(const TrainLog& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open training log for writing: " + path);
  for (const auto& h : log.header) out << "# " << h << "\n";
  char buf[80];
  for (const auto& r : log.records) {
    std::snprintf(buf, sizeof(buf), "%lld %.6f %d %.6f", static_cast<long long>(r.step), r.loss,
                  r.refresh_id, r.mrr_at_10);
    out << buf << "\n";
  }
}

struct TrainResult {
  EncoderParams params;
  TrainLog log;
};

namespace detail {

struct TokenCache {
  std::map<std::string, TokenSequence> docs;

  const TokenSequence& doc(const Corpus& corpus, const std::string& id,
                           const TokenizerConfig& tok) {
    auto it = docs.find(id);
    if (it != docs.end()) return it->second;
    return docs.emplace(id, tokenize(corpus.by_id(id).content(), tok)).first->second;
  }
};

}  // namespace detail

// Contrastive training with periodic index refresh. At every refresh the
// index is rebuilt from the current parameters, negatives are re-mined at
// depth M (queries whose positives swallow the pool keep their previous
// negatives), and MRR@10 against the human labels is snapshot into the log.
inline TrainResult train(std::vector<TrainingInstance> instances,
                         const std::vector<QueryRecord>& queries, const Corpus& corpus,
                         EncoderParams params, const AatConfig& config) {
  config.validate();
  if (instances.empty()) throw contract_error("train: empty instance stream");

  const TokenizerConfig tok = params.tokenizer(config.max_len);
  detail::TokenCache cache;
  Qrels human_qrels;
  for (const auto& q : queries)
    if (!q.human_positive_ids.empty()) human_qrels[q.id] = q.human_positive_ids;

  TrainResult result;
  result.log.header.push_back("lr = " + std::to_string(config.lr));
  result.log.header.push_back("batch_size = " + std::to_string(config.batch_size));
  result.log.header.push_back("epochs = " + std::to_string(config.epochs));
  result.log.header.push_back("source = " + std::string(to_string(config.source)));
  result.log.header.push_back("seed = " + std::to_string(config.seed));

  AdamState state = AdamState::zeros_like(params);
  AdamConfig adam;
  adam.lr = config.lr;

  Index index = build_index(corpus, params, IndexMode::Exact, {}, config.seed, config.max_len);
  auto snapshot_mrr = [&]() {
    RunFile run;
    for (const auto& inst : instances) {
      RowVec q_emb = encode(params, inst.query_tokens);
      run[inst.query_id] = search(index, q_emb, 10);
    }
    return mrr_at_k(run, human_qrels, 10).value;
  };

  int refresh_id = 0;
  double latest_mrr = snapshot_mrr();
  result.log.records.push_back({0, 0.0, 0, latest_mrr});

  auto refresh = [&](int64_t /*step*/) {
    ++refresh_id;
    index = build_index(corpus, params, IndexMode::Exact, {}, config.seed, config.max_len);
    for (auto& inst : instances) {
      RowVec q_emb = encode(params, inst.query_tokens);
      try {
        auto pool = mine_negatives(index, q_emb, config.M, inst.positives, inst.query_id);
        inst.negatives = config.full_negative_sum
                             ? pool
                             : detail::sample_negatives(
                                   pool, inst.positives.size(), config.negatives_per_positive,
                                   seed_fold(config.seed, "negsample:" + inst.query_id + ":" +
                                                             std::to_string(refresh_id)));
      } catch (const annotation_error&) {
        ++result.log.remine_failures;  // keep the previous draw
      }
    }
    latest_mrr = snapshot_mrr();
  };

  int64_t step = 0;
  std::vector<size_t> order(instances.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    DetRng shuffle_rng(seed_fold(config.seed, "shuffle:" + std::to_string(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.below(i))]);

    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(config.batch_size)) {
      std::vector<BatchInstance> batch;
      size_t hi = std::min(order.size(), at + static_cast<size_t>(config.batch_size));
      for (size_t b = at; b < hi; ++b) {
        const auto& inst = instances[order[b]];
        BatchInstance bi;
        bi.query_id = inst.query_id;
        bi.query = inst.query_tokens;
        for (const auto& id : inst.positives) bi.positives.push_back(cache.doc(corpus, id, tok));
        for (const auto& id : inst.negatives) bi.negatives.push_back(cache.doc(corpus, id, tok));
        batch.push_back(std::move(bi));
      }
      PairLoss loss = batch_loss_and_grads(params, batch);
      if (!std::isfinite(loss.value) || loss.value > 1e6)
        throw numeric_error("train: divergence at step " + std::to_string(step + 1) +
                            " (loss = " + std::to_string(loss.value) + ")");
      apply_update(params, loss.grads, state, adam);
      ++step;
      result.log.records.push_back({step, loss.value, refresh_id, latest_mrr});
      if (config.refresh_every > 0 && step % config.refresh_every == 0) {
        refresh(step);
        result.log.records.push_back({step, loss.value, refresh_id, latest_mrr});
      }
    }
    if (config.refresh_every == 0) {
      refresh(step);
      result.log.records.push_back({step, result.log.records.back().loss, refresh_id, latest_mrr});
    }
  }

  result.params = std::move(params);
  return result;
}

// Write the trained retriever as a generic plug-in checkpoint. An existing
// file is overwritten with a warning.
inline void export_retriever(const EncoderParams& params, const std::string& path) {
  if (std::filesystem::exists(path))
    std::fprintf(stderr, "[warn] overwriting existing checkpoint: %s\n", path.c_str());
  save_encoder(params, path);
}

}  // namespace aar
