#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "aar/aat_trainer.hpp"
#include "aar/ann_index.hpp"
#include "aar/config_file.hpp"
#include "aar/corpus_io.hpp"
#include "aar/dual_encoder.hpp"
#include "aar/errors.hpp"
#include "aar/eval_harness.hpp"
#include "aar/fid_reader.hpp"

namespace aar {

// Declarative experiment over frozen artifacts: one or more retriever
// checkpoints are compared on the same query set with the same target
// reader. Spec keys (flat key = value file):
//
//   corpus = <jsonl>                 required
//   queries = <jsonl>                required
//   reader.target = <ckpt>           required
//   reader.<label> = <ckpt>          optional annotation readers for the
//                                    positive-set overlap analysis
//   retriever.<label> = <ckpt>       one or more
//   aug_docs                         documents fed to the reader; defaults
//                                    to 10 for the mmlu template and 3
//                                    otherwise (0 = standalone LM)
//   retrieve_k = 10                  run depth written per retriever
//   mode = openqa | multichoice
//   template = raw | popqa | mmlu
//   candidates = <jsonl>             optional {"query_id","candidates":[...]}
//   n_candidates = 8                 sampled pool size when no file is given
//   answer_deletion = false          also score with gold spans deleted
//   concat_docs = false              decoder-only simulation: all documents
//                                    merged into one segment
//   overlap_k = 2                    Top-K size for LM positive sets
//   overlap_docs = 10                retrieval depth for the overlap analysis
//   overlap_retriever = <label>      run used for annotation (default: first)
//   seed = 0
struct ExperimentSpec {
  std::string corpus_path;
  std::string queries_path;
  std::string target_reader_path;
  std::map<std::string, std::string> annotation_readers;  // label -> path
  std::map<std::string, std::string> retrievers;          // label -> path
  int aug_docs = -1;  // -1: resolved from the template
  int retrieve_k = 10;
  AccuracyMode mode = AccuracyMode::OpenQa;
  std::string prompt_template = "raw";
  std::string candidates_path;
  int n_candidates = 8;
  bool answer_deletion = false;
  bool concat_docs = false;
  int overlap_k = 2;
  int overlap_docs = 10;
  std::string overlap_retriever;
  uint64_t seed = 0;

  static ExperimentSpec from_file(const std::string& path) {
    return from_map(parse_kv_file(path));
  }

  static ExperimentSpec from_map(const std::map<std::string, std::string>& kv) {
    ExperimentSpec spec;
    for (const auto& [key, value] : kv) {
      if (key == "corpus") spec.corpus_path = value;
      else if (key == "queries") spec.queries_path = value;
      else if (key == "reader.target") spec.target_reader_path = value;
      else if (key.rfind("reader.", 0) == 0) spec.annotation_readers[key.substr(7)] = value;
      else if (key.rfind("retriever.", 0) == 0) spec.retrievers[key.substr(10)] = value;
      else if (key == "aug_docs") spec.aug_docs = static_cast<int>(parse_int(value, key));
      else if (key == "retrieve_k") spec.retrieve_k = static_cast<int>(parse_int(value, key));
      else if (key == "mode") {
        if (value == "openqa") spec.mode = AccuracyMode::OpenQa;
        else if (value == "multichoice") spec.mode = AccuracyMode::MultiChoice;
        else throw config_error("mode must be openqa or multichoice, got '" + value + "'");
      } else if (key == "template") {
        if (value != "raw" && value != "popqa" && value != "mmlu")
          throw config_error("template must be raw, popqa or mmlu, got '" + value + "'");
        spec.prompt_template = value;
      } else if (key == "candidates") spec.candidates_path = value;
      else if (key == "n_candidates") spec.n_candidates = static_cast<int>(parse_int(value, key));
      else if (key == "answer_deletion") spec.answer_deletion = parse_bool(value, key);
      else if (key == "concat_docs") spec.concat_docs = parse_bool(value, key);
      else if (key == "overlap_k") spec.overlap_k = static_cast<int>(parse_int(value, key));
      else if (key == "overlap_docs") spec.overlap_docs = static_cast<int>(parse_int(value, key));
      else if (key == "overlap_retriever") spec.overlap_retriever = value;
      else if (key == "seed") spec.seed = static_cast<uint64_t>(parse_int(value, key));
      else throw config_error("unknown experiment key: " + key);
    }
    spec.validate();
    return spec;
  }

  int resolved_aug_docs() const {
    if (aug_docs >= 0) return aug_docs;
    return prompt_template == "mmlu" ? 10 : 3;
  }

  void validate() const {
    if (corpus_path.empty() || queries_path.empty() || target_reader_path.empty())
      throw config_error("experiment spec requires corpus, queries and reader.target");
    if (retrievers.empty()) throw config_error("experiment spec requires at least one retriever.<label>");
    if (aug_docs < -1 || retrieve_k < 1 || n_candidates < 1 || overlap_k < 0 || overlap_docs < 1)
      throw config_error("experiment spec has out-of-range counts");
    if (!overlap_retriever.empty() && !retrievers.count(overlap_retriever))
      throw config_error("overlap_retriever '" + overlap_retriever + "' is not a retriever label");
  }
};

struct EvalReport {
  std::vector<std::string> config_echo;
  std::map<std::string, double> metrics;
  std::vector<std::string> per_query_lines;

  std::string render() const {
    std::string out = "# aar experiment report\n";
    for (const auto& line : config_echo) out += "# " + line + "\n";
    out += "[metrics]\n";
    char buf[64];
    for (const auto& [name, v] : metrics) {
      std::snprintf(buf, sizeof(buf), "%.6f", v);
      out += name + " = " + buf + "\n";
    }
    if (!per_query_lines.empty()) {
      out += "[per-query]\n";
      for (const auto& line : per_query_lines) out += line + "\n";
    }
    return out;
  }

  void write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw io_error("cannot open report for writing: " + path);
    out << render();
  }
};

namespace experiment_detail {

inline std::map<std::string, std::vector<std::string>> load_candidates_file(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open candidates file: " + path);
  std::map<std::string, std::vector<std::string>> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    auto j = detail::parse_line(line, path, lineno);
    std::string qid = detail::require_string(j, "query_id", path, lineno);
    if (!j.contains("candidates") || !j["candidates"].is_array())
      throw parse_error(path + ":" + std::to_string(lineno) + ": missing candidates array");
    for (const auto& c : j["candidates"]) out[qid].push_back(c.get<std::string>());
  }
  return out;
}

// Default candidate pool: the query's first gold answer plus sampled distinct
// distractor answers from other queries, sorted for a stable order.
inline std::vector<std::string> sample_candidates(const QueryRecord& query,
                                                  const std::vector<std::string>& answer_pool,
                                                  int n_candidates, uint64_t seed) {
  std::set<std::string> chosen;
  if (!query.gold_answers.empty()) chosen.insert(query.gold_answers[0]);
  DetRng rng(seed_fold(seed, "candidates:" + query.id));
  size_t guard = 0;
  while (chosen.size() < static_cast<size_t>(n_candidates) && guard++ < 10000 &&
         chosen.size() < answer_pool.size()) {
    const auto& pick = answer_pool[rng.below(answer_pool.size())];
    if (!query.gold_answers.empty() && pick == query.gold_answers[0]) continue;
    chosen.insert(pick);
  }
  return {chosen.begin(), chosen.end()};
}

inline std::string render_query_prompt(const std::string& tmpl, const QueryRecord& query) {
  if (tmpl == "popqa") return render_prompt(PromptTemplate::PopQa, query);
  if (tmpl == "mmlu") return render_prompt(PromptTemplate::Mmlu, query);
  return query.text;
}

}  // namespace experiment_detail

// Execute the experiment: retrieve, read, score for every configuration,
// plus the positive-set overlap matrix and the answer-deletion comparison
// when requested. Deterministic for a fixed spec and seed.
inline EvalReport run_experiment(const ExperimentSpec& spec,
                                 const std::string& out_dir = "") {
  spec.validate();
  // every named artifact must exist before any compute starts
  {
    std::vector<std::string> paths{spec.corpus_path, spec.queries_path,
                                   spec.target_reader_path};
    for (const auto& [label, path] : spec.retrievers) paths.push_back(path);
    for (const auto& [label, path] : spec.annotation_readers) paths.push_back(path);
    if (!spec.candidates_path.empty()) paths.push_back(spec.candidates_path);
    for (const auto& path : paths)
      if (!std::filesystem::exists(path))
        throw config_error("experiment artifact does not exist: " + path);
  }
  const int aug_docs = spec.resolved_aug_docs();
  EvalReport report;
  report.config_echo.push_back("corpus = " + spec.corpus_path);
  report.config_echo.push_back("queries = " + spec.queries_path);
  report.config_echo.push_back("reader.target = " + spec.target_reader_path);
  for (const auto& [label, path] : spec.retrievers)
    report.config_echo.push_back("retriever." + label + " = " + path);
  report.config_echo.push_back("aug_docs = " + std::to_string(aug_docs));
  report.config_echo.push_back("seed = " + std::to_string(spec.seed));

  const Corpus corpus = load_corpus(spec.corpus_path);
  const auto queries = load_query_set(spec.queries_path);
  const ReaderModel target_reader = load_reader(spec.target_reader_path);

  std::map<std::string, EncoderParams> retrievers;
  for (const auto& [label, path] : spec.retrievers) retrievers.emplace(label, load_encoder(path));

  std::map<std::string, std::vector<std::string>> candidate_map;
  if (!spec.candidates_path.empty())
    candidate_map = experiment_detail::load_candidates_file(spec.candidates_path);
  std::vector<std::string> answer_pool;
  for (const auto& q : queries)
    if (!q.gold_answers.empty()) answer_pool.push_back(q.gold_answers[0]);

  Qrels human_qrels;
  for (const auto& q : queries)
    if (!q.human_positive_ids.empty()) human_qrels[q.id] = q.human_positive_ids;

  auto candidates_for = [&](const QueryRecord& q) -> std::vector<std::string> {
    if (spec.mode == AccuracyMode::MultiChoice) {
      if (q.choices.size() != 4)
        throw validation_error("multichoice mode requires 4 choices (query " + q.id + ")");
      return q.choices;
    }
    auto it = candidate_map.find(q.id);
    if (it != candidate_map.end()) return it->second;
    return experiment_detail::sample_candidates(q, answer_pool, spec.n_candidates, spec.seed);
  };

  std::map<std::string, RunFile> runs;
  for (const auto& [label, params] : retrievers) {
    Index index = build_index(corpus, params, IndexMode::Exact, {}, spec.seed);
    RunFile run;
    const TokenizerConfig tok = params.tokenizer();
    for (const auto& q : queries) {
      size_t k = std::min(static_cast<size_t>(spec.retrieve_k), corpus.size());
      run[q.id] = search(index, encode(params, tokenize(q.text, tok)), k);
    }
    runs[label] = std::move(run);
  }

  for (const auto& [label, run] : runs) {
    std::map<std::string, std::string> predictions, predictions_deleted;
    for (const auto& q : queries) {
      std::vector<Document> docs;
      if (aug_docs > 0) {
        const auto& entries = run.at(q.id).entries;
        for (size_t i = 0; i < std::min(entries.size(), static_cast<size_t>(aug_docs)); ++i)
          docs.push_back(corpus.by_id(entries[i].first));
      }
      if (docs.empty()) docs.push_back(Document{"_empty", std::nullopt, ""});  // standalone LM
      if (spec.concat_docs && docs.size() > 1) {
        // decoder-only simulation: one segment holding every document
        std::string merged;
        for (const auto& d : docs) {
          if (!merged.empty()) merged += " ";
          merged += d.content();
        }
        docs = {Document{"_concat", std::nullopt, std::move(merged)}};
      }

      const std::string prompt = experiment_detail::render_query_prompt(spec.prompt_template, q);
      const auto candidates = candidates_for(q);
      auto [best, lls] = score_candidates(target_reader, prompt, docs, candidates);
      predictions[q.id] = spec.mode == AccuracyMode::MultiChoice
                              ? std::string(1, static_cast<char>('A' + best))
                              : candidates[best];
      if (spec.answer_deletion) {
        std::vector<Document> deleted;
        for (const auto& d : docs) {
          Document dd = d;
          dd.text = delete_answer_spans_text(dd.text, q.gold_answers);
          if (dd.title) dd.title = delete_answer_spans_text(*dd.title, q.gold_answers);
          deleted.push_back(std::move(dd));
        }
        auto [best_d, lls_d] = score_candidates(target_reader, prompt, deleted, candidates);
        predictions_deleted[q.id] = spec.mode == AccuracyMode::MultiChoice
                                        ? std::string(1, static_cast<char>('A' + best_d))
                                        : candidates[best_d];
      }
    }
    auto acc = answer_accuracy(predictions, queries, spec.mode);
    report.metrics["accuracy." + label] = acc.value;
    for (const auto& q : queries)
      report.per_query_lines.push_back(label + " " + q.id + " " +
                                       (acc.per_query[q.id] > 0 ? "1" : "0") + " " +
                                       predictions[q.id]);
    if (spec.answer_deletion) {
      auto acc_del = answer_accuracy(predictions_deleted, queries, spec.mode);
      report.metrics["accuracy_deleted." + label] = acc_del.value;
      report.metrics["deletion_drop." + label] = acc.value - acc_del.value;
    }
    if (!human_qrels.empty())
      report.metrics["mrr10." + label] = mrr_at_k(run, human_qrels, 10).value;
    if (aug_docs > 0)
      report.metrics["em_top" + std::to_string(aug_docs) + "." + label] =
          exact_match_rate(run, corpus, queries, static_cast<size_t>(aug_docs)).value;
    if (!out_dir.empty())
      write_run_file(run, out_dir + "/run." + label + ".trec", label);
  }

  // Positive-set overlap analysis: annotate the same baseline run with each
  // reader's FiDAtt Top-K and compare against the human sets.
  if (!spec.annotation_readers.empty() && spec.overlap_k > 0) {
    const std::string base_label =
        spec.overlap_retriever.empty() ? runs.begin()->first : spec.overlap_retriever;
    const EncoderParams& base_params = retrievers.at(base_label);
    Index base_index = build_index(corpus, base_params, IndexMode::Exact, {}, spec.seed);
    const TokenizerConfig tok = base_params.tokenizer();

    std::map<std::string, std::map<std::string, std::set<std::string>>> sets;  // config -> qid -> set
    for (const auto& q : queries)
      if (!q.human_positive_ids.empty()) sets["human"][q.id] = q.human_positive_ids;

    for (const auto& [rlabel, rpath] : spec.annotation_readers) {
      const ReaderModel reader = load_reader(rpath);
      for (const auto& q : queries) {
        size_t k = std::min(static_cast<size_t>(spec.overlap_docs), corpus.size());
        if (k < static_cast<size_t>(spec.overlap_k)) continue;
        auto retrieved = search(base_index, encode(base_params, tokenize(q.text, tok)), k);
        std::vector<Document> docs;
        std::vector<std::string> doc_ids;
        for (const auto& [doc_id, s] : retrieved.entries) {
          docs.push_back(corpus.by_id(doc_id));
          doc_ids.push_back(doc_id);
        }
        auto fid = fid_forward(reader, q.text, docs, 1);
        auto rec = aggregate_fidatt(fid, doc_ids);
        rec.query_id = q.id;
        sets["lm_" + rlabel][q.id] =
            build_positive_set(q.id, {}, rec, spec.overlap_k, PositiveSource::LmOnly);
      }
    }

    for (auto a = sets.begin(); a != sets.end(); ++a) {
      for (auto b = a; b != sets.end(); ++b) {
        double total = 0.0;
        size_t n = 0;
        for (const auto& [qid, sa] : a->second) {
          auto it = b->second.find(qid);
          if (it == b->second.end()) continue;
          if (sa.empty() && it->second.empty()) continue;
          total += set_overlap(sa, it->second);
          ++n;
        }
        if (n > 0)
          report.metrics["overlap." + a->first + "." + b->first] = total / static_cast<double>(n);
      }
    }
  }
  return report;
}

}  // namespace aar
