#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "aar/errors.hpp"

namespace aar {

struct Document {
  std::string id;
  std::optional<std::string> title;
  std::string text;

  // Text used wherever a document is fed to an encoder or reader; an absent
  // title contributes nothing.
  std::string content() const {
    if (title && !title->empty()) return *title + " " + text;
    return text;
  }
};

struct Corpus {
  std::vector<Document> documents;
  std::string source_label;

  std::unordered_map<std::string, size_t> id_to_index;

  size_t size() const { return documents.size(); }
  bool contains(const std::string& id) const { return id_to_index.count(id) > 0; }

  const Document& by_id(const std::string& id) const {
    auto it = id_to_index.find(id);
    if (it == id_to_index.end()) throw validation_error("unknown document id: " + id);
    return documents[it->second];
  }

  void add(Document doc) {
    if (id_to_index.count(doc.id))
      throw validation_error("duplicate document id: " + doc.id);
    id_to_index.emplace(doc.id, documents.size());
    documents.push_back(std::move(doc));
  }
};

struct QueryRecord {
  std::string id;
  std::string text;
  std::vector<std::string> gold_answers;
  std::set<std::string> human_positive_ids;
  std::string task_tag;
  // Optional multi-choice payload (4 option texts); empty for open QA.
  std::vector<std::string> choices;
};

// One ranked result list. Entries are (doc_id, score), best first; equal
// scores are ordered by ascending doc_id.
struct RetrievalResult {
  std::vector<std::pair<std::string, double>> entries;
  size_t requested_k = 0;
};

using RunFile = std::map<std::string, RetrievalResult>;

namespace detail {

inline std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline std::string file_stem(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

inline nlohmann::json parse_line(const std::string& line, const std::string& path, size_t lineno) {
  nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw parse_error(path + ":" + std::to_string(lineno) + ": malformed record");
  return j;
}

inline std::string require_string(const nlohmann::json& j, const char* key,
                                  const std::string& path, size_t lineno) {
  if (!j.contains(key) || !j[key].is_string())
    throw parse_error(path + ":" + std::to_string(lineno) + ": missing string field '" + key + "'");
  return j[key].get<std::string>();
}

}  // namespace detail

// Corpus files are JSON lines: {"id": ..., "text": ..., "title": ...?}.
inline Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open corpus file: " + path);
  Corpus corpus;
  corpus.source_label = detail::file_stem(path);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    auto j = detail::parse_line(line, path, lineno);
    Document doc;
    doc.id = detail::require_string(j, "id", path, lineno);
    doc.text = detail::require_string(j, "text", path, lineno);
    if (doc.id.empty())
      throw validation_error(path + ":" + std::to_string(lineno) + ": empty document id");
    if (detail::trim(doc.text).empty())
      throw validation_error(path + ":" + std::to_string(lineno) + ": empty document text (id " + doc.id + ")");
    if (j.contains("title")) {
      if (!j["title"].is_string())
        throw parse_error(path + ":" + std::to_string(lineno) + ": 'title' must be a string");
      doc.title = j["title"].get<std::string>();
    }
    if (corpus.contains(doc.id))
      throw validation_error(path + ":" + std::to_string(lineno) + ": duplicate document id: " + doc.id);
    corpus.add(std::move(doc));
  }
  return corpus;
}

// Query files are JSON lines with fields id, text, gold_answers,
// human_positive_ids, task_tag (and optional choices for multi-choice eval).
// A record without task_tag inherits the file stem.
inline std::vector<QueryRecord> load_query_set(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open query file: " + path);
  std::vector<QueryRecord> out;
  std::set<std::string> seen;
  std::string line;
  size_t lineno = 0;
  const std::string default_tag = detail::file_stem(path);
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    auto j = detail::parse_line(line, path, lineno);
    QueryRecord q;
    q.id = detail::require_string(j, "id", path, lineno);
    q.text = detail::require_string(j, "text", path, lineno);
    if (q.id.empty())
      throw validation_error(path + ":" + std::to_string(lineno) + ": empty query id");
    if (j.contains("gold_answers"))
      for (const auto& a : j["gold_answers"]) q.gold_answers.push_back(a.get<std::string>());
    if (j.contains("human_positive_ids"))
      for (const auto& d : j["human_positive_ids"]) q.human_positive_ids.insert(d.get<std::string>());
    q.task_tag = j.contains("task_tag") ? j["task_tag"].get<std::string>() : default_tag;
    if (j.contains("choices"))
      for (const auto& c : j["choices"]) q.choices.push_back(c.get<std::string>());
    if (!seen.insert(q.id).second)
      throw validation_error(path + ":" + std::to_string(lineno) + ": duplicate query id: " + q.id);
    out.push_back(std::move(q));
  }
  return out;
}

// Concatenate several query files (multi-task mixing). Query ids must be
// globally unique across all files.
inline std::vector<QueryRecord> load_query_sets(const std::vector<std::string>& paths) {
  std::vector<QueryRecord> out;
  std::map<std::string, std::string> owner;  // id -> file that introduced it
  for (const auto& path : paths) {
    auto records = load_query_set(path);
    for (auto& q : records) {
      auto [it, fresh] = owner.emplace(q.id, path);
      if (!fresh)
        throw validation_error("duplicate query id '" + q.id + "' in " + path +
                               " (first seen in " + it->second + ")");
      out.push_back(std::move(q));
    }
  }
  return out;
}

namespace detail {

inline void check_run_invariants(const std::string& query_id, const RetrievalResult& r) {
  for (size_t i = 0; i + 1 < r.entries.size(); ++i) {
    if (r.entries[i].second < r.entries[i + 1].second)
      throw contract_error("run for query " + query_id + ": scores increase at rank " +
                           std::to_string(i + 2));
    if (r.entries[i].second == r.entries[i + 1].second &&
        r.entries[i].first > r.entries[i + 1].first)
      throw contract_error("run for query " + query_id + ": tie not in ascending doc_id order");
  }
}

}  // namespace detail

// Six-column run format: query_id Q0 doc_id rank score run_tag. Scores are
// printed with six decimal places; consumers that need more precision should
// keep the in-memory RunFile.
inline void write_run_file(const RunFile& results, const std::string& path,
                           const std::string& run_tag = "aar") {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open run file for writing: " + path);
  for (const auto& [qid, result] : results) {
    detail::check_run_invariants(qid, result);
    size_t rank = 1;
    for (const auto& [doc_id, score] : result.entries) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.6f", score);
      out << qid << " Q0 " << doc_id << " " << rank << " " << buf << " " << run_tag << "\n";
      ++rank;
    }
  }
  if (!out) throw io_error("failed writing run file: " + path);
}

inline RunFile read_run_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open run file: " + path);
  RunFile run;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::istringstream ss(line);
    std::string qid, q0, doc_id, tag;
    long rank = 0;
    double score = 0.0;
    if (!(ss >> qid >> q0 >> doc_id >> rank >> score >> tag))
      throw format_error(path + ":" + std::to_string(lineno) + ": expected 6 columns");
    auto& result = run[qid];
    long expected = static_cast<long>(result.entries.size()) + 1;
    if (rank != expected)
      throw format_error(path + ":" + std::to_string(lineno) + ": rank " + std::to_string(rank) +
                         " for query " + qid + ", expected " + std::to_string(expected));
    if (!result.entries.empty() && score > result.entries.back().second)
      throw format_error(path + ":" + std::to_string(lineno) + ": score inversion for query " + qid);
    result.entries.emplace_back(doc_id, score);
    result.requested_k = result.entries.size();
  }
  return run;
}

}  // namespace aar
