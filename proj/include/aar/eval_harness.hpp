#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "aar/corpus_io.hpp"
#include "aar/errors.hpp"

namespace aar {

using Qrels = std::map<std::string, std::set<std::string>>;

// Four-column qrels lines: query_id 0 doc_id relevance. Relevance > 0 marks
// the document relevant.
inline Qrels load_qrels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open qrels file: " + path);
  Qrels qrels;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::istringstream ss(line);
    std::string qid, zero, doc_id;
    int rel = 0;
    if (!(ss >> qid >> zero >> doc_id >> rel))
      throw format_error(path + ":" + std::to_string(lineno) + ": expected 4 columns");
    if (rel > 0) qrels[qid].insert(doc_id);
  }
  return qrels;
}

inline void save_qrels(const Qrels& qrels, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open qrels file for writing: " + path);
  for (const auto& [qid, docs] : qrels)
    for (const auto& d : docs) out << qid << " 0 " << d << " 1\n";
}

// Every qrels query must exist in the query set.
inline void validate_qrels(const Qrels& qrels, const std::vector<QueryRecord>& queries) {
  std::set<std::string> ids;
  for (const auto& q : queries) ids.insert(q.id);
  for (const auto& [qid, docs] : qrels)
    if (!ids.count(qid))
      throw validation_error("qrels references unknown query id: " + qid);
}

struct MetricResult {
  double value = 0.0;
  std::map<std::string, double> per_query;
  std::vector<std::string> flagged;
};

// Mean reciprocal rank of the first relevant document within the top k.
// Queries absent from the qrels score 0 and are flagged.
inline MetricResult mrr_at_k(const RunFile& run, const Qrels& qrels, size_t k) {
  require(k >= 1, "mrr_at_k: k must be >= 1");
  MetricResult res;
  if (run.empty()) return res;
  double total = 0.0;
  for (const auto& [qid, result] : run) {
    auto it = qrels.find(qid);
    double rr = 0.0;
    if (it == qrels.end() || it->second.empty()) {
      res.flagged.push_back(qid);
    } else {
      size_t limit = std::min(k, result.entries.size());
      for (size_t rank = 1; rank <= limit; ++rank) {
        if (it->second.count(result.entries[rank - 1].first)) {
          rr = 1.0 / static_cast<double>(rank);
          break;
        }
      }
    }
    res.per_query[qid] = rr;
    total += rr;
  }
  res.value = total / static_cast<double>(run.size());
  return res;
}

// Jaccard overlap |a n b| / |a u b| between two positive document sets.
inline double set_overlap(const std::set<std::string>& a, const std::set<std::string>& b) {
  require(!(a.empty() && b.empty()), "set_overlap: both sets empty");
  size_t inter = 0;
  for (const auto& x : a) inter += b.count(x);
  size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

enum class AccuracyMode { MultiChoice, OpenQa };

// Multi-choice: the predicted option letter must equal a gold answer.
// Open QA: a gold answer must appear (case-insensitively) in the prediction.
inline MetricResult answer_accuracy(const std::map<std::string, std::string>& predictions,
                                    const std::vector<QueryRecord>& queries, AccuracyMode mode) {
  MetricResult res;
  if (queries.empty()) return res;
  auto fold = [](std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
  };
  size_t correct = 0;
  for (const auto& q : queries) {
    auto it = predictions.find(q.id);
    bool ok = false;
    if (it == predictions.end()) {
      res.flagged.push_back(q.id);
    } else if (mode == AccuracyMode::MultiChoice) {
      std::string pred = detail::trim(it->second);
      for (const auto& gold : q.gold_answers)
        if (pred == gold) { ok = true; break; }
    } else {
      std::string pred = fold(it->second);
      for (const auto& gold : q.gold_answers) {
        if (gold.empty()) continue;
        if (pred.find(fold(gold)) != std::string::npos) { ok = true; break; }
      }
    }
    res.per_query[q.id] = ok ? 1.0 : 0.0;
    if (ok) ++correct;
  }
  res.value = static_cast<double>(correct) / static_cast<double>(queries.size());
  return res;
}

namespace detail {

inline bool is_word_char(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

inline char ascii_lower(char c) {
  return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
}

// All token-bounded, case-insensitive occurrences of `span` in `text`.
inline std::vector<std::pair<size_t, size_t>> find_spans(const std::string& text,
                                                         const std::string& span) {
  std::vector<std::pair<size_t, size_t>> out;
  if (span.empty() || span.size() > text.size()) return out;
  std::string lt(text), ls(span);
  for (auto& c : lt) c = ascii_lower(c);
  for (auto& c : ls) c = ascii_lower(c);
  size_t pos = 0;
  while ((pos = lt.find(ls, pos)) != std::string::npos) {
    size_t end = pos + ls.size();
    bool left_ok = pos == 0 || !is_word_char(static_cast<unsigned char>(text[pos - 1]));
    bool right_ok = end == text.size() || !is_word_char(static_cast<unsigned char>(text[end]));
    // the span itself must not start/end mid-word against its own edges
    if (left_ok && right_ok) {
      out.emplace_back(pos, end);
      pos = end;
    } else {
      ++pos;
    }
  }
  return out;
}

inline std::string collapse_whitespace(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  bool in_space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      in_space = true;
      continue;
    }
    if (in_space && !out.empty()) out.push_back(' ');
    in_space = false;
    out.push_back(c);
  }
  return out;
}

inline std::string remove_spans_once(const std::string& text,
                                     const std::vector<std::string>& answers) {
  std::string cur = text;
  for (const auto& ans : answers) {
    if (trim(ans).empty()) continue;
    auto spans = find_spans(cur, trim(ans));
    if (spans.empty()) continue;
    std::string next;
    next.reserve(cur.size());
    size_t at = 0;
    for (auto [b, e] : spans) {
      next.append(cur, at, b - at);
      at = e;
    }
    next.append(cur, at, std::string::npos);
    cur = std::move(next);
  }
  return collapse_whitespace(cur);
}

}  // namespace detail

// Token-bounded, case-insensitive containment of `span` in `text`.
inline bool contains_answer_span(const std::string& text, const std::string& span) {
  std::string s = detail::trim(span);
  if (s.empty()) return false;
  return !detail::find_spans(text, s).empty();
}

// Remove every token-bounded, case-insensitive occurrence of every answer,
// collapsing doubled whitespace. Deletion can expose new matches (removal
// joins neighbours), so the pass repeats until a fixpoint, which also makes
// the operation idempotent.
inline std::string delete_answer_spans_text(const std::string& text,
                                            const std::vector<std::string>& answers) {
  std::string cur = detail::collapse_whitespace(text);
  for (;;) {
    std::string next = detail::remove_spans_once(cur, answers);
    if (next == cur) return cur;
    cur = std::move(next);
  }
}

// Per-query corpus view with that query's gold answers removed from every
// document. The shared corpus is never modified; callers normally apply this
// only to the handful of retrieved documents at scoring time.
inline Corpus delete_answer_spans(const Corpus& corpus, const QueryRecord& query) {
  Corpus out;
  out.source_label = corpus.source_label;
  for (const auto& doc : corpus.documents) {
    Document d = doc;
    d.text = delete_answer_spans_text(d.text, query.gold_answers);
    if (d.title) d.title = delete_answer_spans_text(*d.title, query.gold_answers);
    out.add(std::move(d));
  }
  return out;
}

// Fraction of run queries whose top-`top` documents contain a gold answer
// span (token-bounded, case-insensitive).
inline MetricResult exact_match_rate(const RunFile& run, const Corpus& corpus,
                                     const std::vector<QueryRecord>& queries, size_t top) {
  require(top >= 1, "exact_match_rate: top must be >= 1");
  MetricResult res;
  if (run.empty()) return res;
  std::map<std::string, const QueryRecord*> by_id;
  for (const auto& q : queries) by_id[q.id] = &q;
  size_t hits = 0;
  for (const auto& [qid, result] : run) {
    auto it = by_id.find(qid);
    bool hit = false;
    if (it == by_id.end() || it->second->gold_answers.empty()) {
      res.flagged.push_back(qid);
    } else {
      size_t limit = std::min(top, result.entries.size());
      for (size_t r = 0; r < limit && !hit; ++r) {
        const auto& doc_id = result.entries[r].first;
        if (!corpus.contains(doc_id)) continue;
        const std::string content = corpus.by_id(doc_id).content();
        for (const auto& ans : it->second->gold_answers)
          if (contains_answer_span(content, ans)) { hit = true; break; }
      }
    }
    res.per_query[qid] = hit ? 1.0 : 0.0;
    if (hit) ++hits;
  }
  res.value = static_cast<double>(hits) / static_cast<double>(run.size());
  return res;
}

}  // namespace aar
