#pragma once

// Synthetic "planted" retrieval world shared by the trainer tests and the
// acceptance suite.
//
// Per query i the corpus plants:
//   h<i>   human-preferred doc: two of the query's four topic words, the
//          full answer phrase "cue<i> core<i>", plus two foreign entity
//          mentions cue<r1>, cue<r2> (encyclopedic style).
//   la<i>, lb<i>  LM-preferred docs: three topic words, a marker word the
//          planted readers attend to, and the entity cue<i> mentioned
//          twice, never the full answer phrase.
//   x<i>0..x<i>5  hard distractors: three topic words, padding otherwise.
// plus shared filler documents.
//
// Consequences used by the tests: hard distractors beat the true positives
// lexically for an untrained encoder; FiDAtt Top-K lands on the zeta docs;
// the copy channel of the reader makes cue mentions (LM docs) worth more
// than one answer phrase buried among foreign cues (human docs); deleting
// the answer phrase guts the human docs but leaves the LM docs intact.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "aar/aar.hpp"

namespace fixture {

struct FixtureConfig {
  int n_queries = 20;
  int corpus_size = 200;  // >= 7 * n_queries; remainder becomes filler docs
  uint64_t seed = 20240501;
  uint32_t vocab_size = 32768;
  uint32_t embed_dim = 64;
  int reader_d_model = 32;
  int reader_ln = 2;
  int reader_hn = 2;
  int max_seg_len = 64;
  double zeta_affinity = 6.0;
  double copy_strength = 0.5;
  int n_candidates = 16;
};

struct PlantedFixture {
  FixtureConfig config;
  aar::Corpus corpus;
  std::vector<aar::QueryRecord> queries;
  std::map<std::string, std::vector<std::string>> candidates;  // query id -> pool
  std::map<std::string, double> affinity;   // marker words the readers attend to
  std::vector<std::string> zeta_a, zeta_b;  // per-doc markers, collision-proofed
  std::vector<std::string> cues, cores;     // entity and fact words, collision-proofed

  std::string gold_answer(int q) const {
    return cues[static_cast<size_t>(q)] + " " + cores[static_cast<size_t>(q)];
  }

  aar::ReaderConfig reader_config(const std::string& role) const {
    aar::ReaderConfig rc;
    rc.ln = config.reader_ln;
    rc.hn = config.reader_hn;
    rc.d_model = config.reader_d_model;
    rc.vocab_size = config.vocab_size;
    rc.max_seg_len = config.max_seg_len;
    rc.copy_strength = config.copy_strength;
    rc.seed = aar::seed_fold(config.seed, "reader:" + role);
    return rc;
  }

  aar::ReaderModel make_reader(const std::string& role) const {
    return aar::plant_preference(aar::init_reader(reader_config(role)), affinity);
  }

  aar::EncoderParams make_encoder() const {
    return aar::init_encoder(config.vocab_size, config.embed_dim,
                             aar::seed_fold(config.seed, "encoder"));
  }
};

namespace detail {

inline std::string num(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%04d", prefix, i);
  return buf;
}

}  // namespace detail

// Structured names like "core0005" / "pad0009p15" produce correlated FNV
// hashes (a single prefix congruence repeats for every final digit), so
// every generated word carries a hash-derived suffix that decorrelates it.
inline std::string decorate(const std::string& w) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "%03x",
                static_cast<unsigned>(aar::fnv1a64(w + "#decor") & 0xfff));
  return w + buf;
}

inline std::string topic_word(int q, int j) {
  return decorate(detail::num("top", q) + "w" + std::to_string(j));
}
inline std::string fill_word(int j) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "fill%02d", j);
  return decorate(buf);
}
inline std::string pad_word(int q, int j) {
  return decorate(detail::num("pad", q) + "p" + std::to_string(j));
}

inline PlantedFixture make_fixture(const FixtureConfig& config = {}) {
  PlantedFixture f;
  f.config = config;
  const int n = config.n_queries;
  aar::DetRng rng(aar::seed_fold(config.seed, "world"));

  // Words whose token rows carry planted structure (markers for attention,
  // cues/cores for the answer channel and the constructed checkpoint) must
  // not share a hashed id with anything else in the world.
  std::set<uint64_t> taken;
  auto hash_id = [&](const std::string& w) { return aar::fnv1a64(w) % config.vocab_size; };
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 4; ++j) taken.insert(hash_id(topic_word(i, j)));
    for (int j = 0; j < 32; ++j) taken.insert(hash_id(pad_word(i, j)));
  }
  for (int j = 0; j < 40; ++j) taken.insert(hash_id(fill_word(j)));
  auto fresh_word = [&](const std::string& base_word) {
    std::string w = base_word;
    for (int suffix = 0; taken.count(hash_id(w)); ++suffix)
      w = base_word + "x" + std::to_string(suffix);
    taken.insert(hash_id(w));
    return w;
  };
  for (int i = 0; i < n; ++i) {
    f.cues.push_back(fresh_word(decorate(detail::num("cue", i))));
    f.cores.push_back(fresh_word(decorate(detail::num("core", i))));
  }
  // One marker word per LM doc. Every marker carries the same planted
  // affinity, so the readers' "taste" is the marker family as a whole.
  for (int i = 0; i < n; ++i) {
    std::string a = fresh_word(decorate(detail::num("zeta", i) + "a"));
    std::string b = fresh_word(decorate(detail::num("zeta", i) + "b"));
    f.affinity[a] = config.zeta_affinity;
    f.affinity[b] = config.zeta_affinity;
    f.zeta_a.push_back(a);
    f.zeta_b.push_back(b);
  }

  auto filler = [&] { return fill_word(static_cast<int>(rng.below(40))); };
  auto join = [](const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) {
      if (!out.empty()) out += " ";
      out += w;
    }
    return out;
  };

  f.corpus.source_label = "planted";
  for (int i = 0; i < n; ++i) {
    int r1 = (i + 1) % n;
    int r2 = (i + 5) % n;
    if (r2 == i || r2 == r1) r2 = (i + 2) % n;

    aar::QueryRecord q;
    q.id = detail::num("q", i);
    q.text = join({topic_word(i, 0), topic_word(i, 1), topic_word(i, 2), topic_word(i, 3)});
    q.gold_answers = {f.gold_answer(i)};
    q.human_positive_ids = {detail::num("h", i)};
    q.task_tag = "planted";
    f.queries.push_back(q);

    const std::string& cue = f.cues[static_cast<size_t>(i)];
    f.corpus.add({detail::num("h", i), std::nullopt,
                  join({topic_word(i, 0), topic_word(i, 1), cue, f.cores[static_cast<size_t>(i)],
                        f.cues[static_cast<size_t>(r1)], f.cues[static_cast<size_t>(r1)],
                        f.cues[static_cast<size_t>(r2)], f.cues[static_cast<size_t>(r2)],
                        pad_word(i, 0), pad_word(i, 1)})});
    f.corpus.add({detail::num("la", i), std::nullopt,
                  join({topic_word(i, 1), topic_word(i, 2), topic_word(i, 3),
                        f.zeta_a[static_cast<size_t>(i)], cue, cue})});
    f.corpus.add({detail::num("lb", i), std::nullopt,
                  join({topic_word(i, 0), topic_word(i, 2), topic_word(i, 3),
                        f.zeta_b[static_cast<size_t>(i)], cue, cue})});
    for (int k = 0; k < 6; ++k) {
      std::vector<std::string> words;
      for (int j = 0; j < 4; ++j) words.push_back(topic_word(i, j));
      for (int j = 0; j < 4; ++j) words.push_back(pad_word(i, 2 + 4 * k + j));
      f.corpus.add({detail::num("x", i) + "_" + std::to_string(k), std::nullopt, join(words)});
    }

    // candidate pool: gold, the two foreign entities planted in the human
    // doc, then seeded distractor answers
    std::set<std::string> pool{f.gold_answer(i), f.gold_answer(r1), f.gold_answer(r2)};
    const size_t want =
        std::min<size_t>(static_cast<size_t>(config.n_candidates), static_cast<size_t>(n));
    while (pool.size() < want)
      pool.insert(f.gold_answer(static_cast<int>(rng.below(static_cast<uint64_t>(n)))));
    f.candidates[q.id] = {pool.begin(), pool.end()};
  }

  int fillers = config.corpus_size - static_cast<int>(f.corpus.size());
  for (int j = 0; j < fillers; ++j) {
    std::vector<std::string> words;
    for (int w = 0; w < 7; ++w) words.push_back(filler());
    f.corpus.add({detail::num("f", j), std::nullopt, join(words)});
  }
  return f;
}

// Stand-in for an off-the-shelf retriever already trained on human labels:
// starting from the lexical hash encoder, each query's core-word row (which
// appears only in its human doc) is lifted along the query direction until
// the human doc clears every other document by a fixed margin. This gives a
// deterministic "converged on human labels" checkpoint without the norm
// blow-up a from-scratch training phase would bake in.
inline aar::EncoderParams make_pretrained_encoder(const PlantedFixture& f) {
  aar::EncoderParams p = f.make_encoder();
  const aar::TokenizerConfig tok = p.tokenizer();
  const int n = f.config.n_queries;

  for (int i = 0; i < n; ++i) {
    const auto& q = f.queries[static_cast<size_t>(i)];
    aar::TokenSequence q_tokens = aar::tokenize(q.text, tok);
    aar::RowVec q_emb = aar::encode(p, q_tokens);
    size_t h_idx = f.corpus.id_to_index.at(detail::num("h", i));
    double h_score =
        q_emb.dot(aar::encode(p, aar::tokenize(f.corpus.documents[h_idx].content(), tok)));

    // Margin is measured against the query's own planted competitors; the
    // human doc clears unrelated noise docs transitively.
    double best_other = -1e30;
    std::vector<std::string> family{detail::num("la", i), detail::num("lb", i)};
    for (int k = 0; k < 6; ++k) family.push_back(detail::num("x", i) + "_" + std::to_string(k));
    for (const auto& id : family) {
      const auto& d = f.corpus.by_id(id);
      best_other =
          std::max(best_other, q_emb.dot(aar::encode(p, aar::tokenize(d.content(), tok))));
    }
    double target = best_other + std::max(std::abs(best_other), 4e-3);
    if (h_score >= target) continue;

    // The human doc pools h_len rows; adding alpha * m_q to its unique core
    // row moves its score by alpha * |m_q P|^2 / h_len.
    size_t h_len = aar::tokenize(f.corpus.documents[h_idx].content(), tok).size();
    aar::RowVec m_q = aar::RowVec::Zero(p.embed_dim());
    for (uint32_t t : q_tokens) m_q += p.embedding_table.row(t);
    m_q /= static_cast<double>(q_tokens.size());
    double denom = q_emb.squaredNorm();
    if (denom <= 0) continue;
    double alpha = static_cast<double>(h_len) * (target - h_score) / denom;
    uint32_t core_id = aar::tokenize(f.cores[static_cast<size_t>(i)], tok)[0];
    p.embedding_table.row(core_id) += alpha * m_q;
  }

  // The boosts add noise to unrelated scores; one global verification pass
  // repairs the handful of queries whose human doc still trails something
  // (unlike a fixpoint loop, a single pass cannot race against itself).
  {
    std::vector<aar::RowVec> doc_embs;
    doc_embs.reserve(f.corpus.size());
    for (const auto& d : f.corpus.documents)
      doc_embs.push_back(aar::encode(p, aar::tokenize(d.content(), tok)));
    for (int i = 0; i < n; ++i) {
      const auto& q = f.queries[static_cast<size_t>(i)];
      aar::TokenSequence q_tokens = aar::tokenize(q.text, tok);
      aar::RowVec q_emb = aar::encode(p, q_tokens);
      size_t h_idx = f.corpus.id_to_index.at(detail::num("h", i));
      double h_score = q_emb.dot(doc_embs[h_idx]);
      double best_other = -1e30;
      for (size_t d = 0; d < doc_embs.size(); ++d)
        if (d != h_idx) best_other = std::max(best_other, q_emb.dot(doc_embs[d]));
      double target = best_other + std::max(0.5 * std::abs(best_other), 2e-3);
      if (h_score >= target) continue;
      size_t h_len = aar::tokenize(f.corpus.documents[h_idx].content(), tok).size();
      aar::RowVec m_q = aar::RowVec::Zero(p.embed_dim());
      for (uint32_t t : q_tokens) m_q += p.embedding_table.row(t);
      m_q /= static_cast<double>(q_tokens.size());
      double denom = q_emb.squaredNorm();
      if (denom <= 0) continue;
      double alpha = static_cast<double>(h_len) * (target - h_score) / denom;
      uint32_t core_id = aar::tokenize(f.cores[static_cast<size_t>(i)], tok)[0];
      p.embedding_table.row(core_id) += alpha * m_q;
    }
  }
  aar::detail::quantize_f32(p.embedding_table);
  return p;
}

// Continuation run used by the converged-encoder stability check.
inline aar::AatConfig stability_config(const PlantedFixture& f) {
  aar::AatConfig c;
  c.source = aar::PositiveSource::HumanOnly;
  c.lr = 0.002;
  c.negatives_per_positive = 8;
  c.M = std::min<int>(100, static_cast<int>(f.corpus.size()));
  c.epochs = 3;
  c.seed = aar::seed_fold(f.config.seed, "stability");
  return c;
}

inline aar::AatConfig arm_config(const PlantedFixture& f, aar::PositiveSource source) {
  aar::AatConfig c;
  c.source = source;
  c.lr = 0.012;
  c.negatives_per_positive = 8;
  c.M = std::min<int>(100, static_cast<int>(f.corpus.size()));
  c.seed = aar::seed_fold(f.config.seed, std::string("arm:") + aar::to_string(source));
  return c;
}

inline void write_fixture_files(const PlantedFixture& f, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  {
    std::ofstream out(dir + "/corpus.jsonl");
    for (const auto& d : f.corpus.documents) {
      nlohmann::json j{{"id", d.id}, {"text", d.text}};
      if (d.title) j["title"] = *d.title;
      out << j.dump() << "\n";
    }
  }
  {
    std::ofstream out(dir + "/queries.jsonl");
    for (const auto& q : f.queries) {
      nlohmann::json j{{"id", q.id},
                       {"text", q.text},
                       {"gold_answers", q.gold_answers},
                       {"human_positive_ids",
                        std::vector<std::string>(q.human_positive_ids.begin(),
                                                 q.human_positive_ids.end())},
                       {"task_tag", q.task_tag}};
      out << j.dump() << "\n";
    }
  }
  {
    std::ofstream out(dir + "/candidates.jsonl");
    for (const auto& [qid, pool] : f.candidates)
      out << nlohmann::json{{"query_id", qid}, {"candidates", pool}}.dump() << "\n";
  }
  {
    aar::Qrels qrels;
    for (const auto& q : f.queries) qrels[q.id] = q.human_positive_ids;
    aar::save_qrels(qrels, dir + "/human.qrels");
  }
  {
    std::ofstream out(dir + "/affinity.kv");
    for (const auto& [token, w] : f.affinity) out << token << " = " << w << "\n";
  }
}

}  // namespace fixture
