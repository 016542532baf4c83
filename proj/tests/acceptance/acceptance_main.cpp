// Acceptance suite: one line per criterion, nonzero exit if any fails.
// Usage: aar_acceptance [path-to-aar-cli]

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "aar/aar.hpp"
#include "../support/fixture.hpp"

using namespace aar;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void report(int criterion, const std::string& what, bool ok, const std::string& detail) {
  std::printf("%s  criterion %d: %s (%s)\n", ok ? "PASS" : "FAIL", criterion, what.c_str(),
              detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof(buf), f, args);
  va_end(args);
  return buf;
}

// ---------------------------------------------------------------- criterion 1

void criterion_gradients() {
  auto t0 = std::chrono::steady_clock::now();
  const double h = 1e-5;
  DetRng rng(90210);
  double worst = 0.0;
  int checked = 0;
  for (int trial = 0; trial < 10; ++trial) {
    uint32_t vocab = 5 + static_cast<uint32_t>(rng.below(46));
    uint32_t dim = 2 + static_cast<uint32_t>(rng.below(7));
    EncoderParams p = init_encoder(vocab, dim, rng.next_u64());
    auto tokens = [&](size_t lo, size_t hi) {
      TokenSequence t(lo + rng.below(hi - lo + 1));
      for (auto& id : t) id = static_cast<uint32_t>(rng.below(vocab));
      return t;
    };
    TokenSequence q = tokens(1, 6), dp = tokens(1, 6), dn = tokens(1, 6);
    PairLoss pl = pair_loss(p, q, dp, dn);
    auto loss_at = [&]() {
      EncoderGrads scratch = EncoderGrads::zeros_like(p);
      return detail::accumulate_pair(p, q, dp, dn, scratch);
    };
    auto sweep = [&](Mat& block, const Mat& analytic) {
      for (Eigen::Index i = 0; i < block.rows(); ++i)
        for (Eigen::Index j = 0; j < block.cols(); ++j) {
          double keep = block(i, j);
          block(i, j) = keep + h;
          double up = loss_at();
          block(i, j) = keep - h;
          double down = loss_at();
          block(i, j) = keep;
          double numeric = (up - down) / (2 * h);
          double a = analytic(i, j);
          double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
          worst = std::max(worst, std::abs(a - numeric) / denom);
          ++checked;
        }
    };
    sweep(p.embedding_table, pl.grads.embedding_table);
    sweep(p.projection, pl.grads.projection);
  }
  double dt = seconds_since(t0);
  report(1, "analytic gradients match central finite differences",
         worst < 1e-4 && dt < 60.0,
         fmt("%d partials over 10 configs, worst rel err %.2e, %.1fs", checked, worst, dt));
}

// ---------------------------------------------------------------- criterion 2

Mat clustered(int n, int dim, int n_clusters, uint64_t seed, DetRng& rng) {
  Mat centers(n_clusters, dim);
  DetRng crng(seed);
  for (Eigen::Index i = 0; i < centers.rows(); ++i)
    for (Eigen::Index j = 0; j < centers.cols(); ++j) centers(i, j) = crng.normal(0.0, 1.0);
  Mat data(n, dim);
  for (int i = 0; i < n; ++i) {
    Eigen::Index c = static_cast<Eigen::Index>(rng.below(static_cast<uint64_t>(n_clusters)));
    for (int j = 0; j < dim; ++j) data(i, j) = centers(c, j) + rng.normal(0.0, 0.4);
  }
  return data;
}

void criterion_retrieval() {
  auto t0 = std::chrono::steady_clock::now();
  DetRng rng(424242);
  Mat vectors = clustered(1000, 32, 24, 77, rng);
  detail::quantize_f32(vectors);

  auto make_index = [&](IndexMode mode, IvfConfig ivf, uint64_t seed) {
    Index index;
    for (int i = 0; i < 1000; ++i) index.doc_ids.push_back(fmt("d%04d", i));
    index.vectors = vectors;
    index.mode = mode;
    if (mode == IndexMode::Ivf) {
      index.n_lists = ivf.n_lists;
      index.n_probe = ivf.n_probe;
      auto km = detail::kmeans(index.vectors, ivf.n_lists, seed);
      index.centroids = km.centroids;
      detail::quantize_f32(index.centroids);
      index.assignments = km.assignments;
      index.rebuild_lists();
    }
    return index;
  };
  Index exact = make_index(IndexMode::Exact, {}, 0);
  Index ivf_full = make_index(IndexMode::Ivf, {16, 16}, 5);
  Index ivf_probe = make_index(IndexMode::Ivf, {16, 4}, 5);

  auto oracle = [&](const RowVec& q, size_t k) {
    std::vector<std::pair<std::string, double>> scored;
    for (Eigen::Index i = 0; i < vectors.rows(); ++i)
      scored.emplace_back(exact.doc_ids[static_cast<size_t>(i)], q.dot(vectors.row(i)));
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    if (scored.size() > k) scored.resize(k);
    return scored;
  };

  bool exact_ok = true, full_probe_ok = true;
  double recall_sum = 0.0;
  for (int t = 0; t < 200; ++t) {
    Eigen::Index base = static_cast<Eigen::Index>(rng.below(1000));
    RowVec q = vectors.row(base);
    for (int j = 0; j < 32; ++j) q(j) += rng.normal(0.0, 0.2);

    for (size_t k : {10ul, 1000ul}) {
      auto want = oracle(q, k);
      auto got = search(exact, q, k);
      auto ivf_got = search(ivf_full, q, k);
      if (got.entries != want) exact_ok = false;
      if (ivf_got.entries != got.entries) full_probe_ok = false;
    }
    auto truth = search(exact, q, 10);
    auto approx = search(ivf_probe, q, 10);
    std::set<std::string> truth_set;
    for (const auto& [id, s] : truth.entries) truth_set.insert(id);
    size_t hits = 0;
    for (const auto& [id, s] : approx.entries) hits += truth_set.count(id);
    recall_sum += static_cast<double>(hits) / 10.0;
  }
  double recall = recall_sum / 200.0;
  double dt = seconds_since(t0);
  report(2, "exact equals brute force; full-probe IVF equals exact; IVF recall@10 >= 0.9",
         exact_ok && full_probe_ok && recall >= 0.9 && dt < 60.0,
         fmt("recall@10 = %.3f over 200 queries x 1000 docs, %.1fs", recall, dt));
}

// ---------------------------------------------------------------- criterion 3

void criterion_fidatt() {
  auto t0 = std::chrono::steady_clock::now();
  bool rows_ok = true, agg_ok = true;
  double worst_row = 0.0, worst_agg = 0.0;
  for (int ln = 1; ln <= 4; ++ln) {
    for (int hn : {1, 2, 4}) {
      ReaderConfig cfg;
      cfg.ln = ln;
      cfg.hn = hn;
      cfg.d_model = 16;
      cfg.vocab_size = 512;
      cfg.max_seg_len = 16;
      cfg.seed = static_cast<uint64_t>(1000 + ln * 10 + hn);
      ReaderModel model = init_reader(cfg);

      std::vector<Document> docs{{"a", std::nullopt, "uno dos tres quattro cinco seis"},
                                 {"b", std::nullopt, "sept"},
                                 {"c", std::nullopt, "acht neun zehn elf zwolf"}};
      FidOutput out = fid_forward(model, "short query", docs, 2);

      for (const auto& per_layer : out.cross_attention)
        for (const auto& att : per_layer)
          for (Eigen::Index r = 0; r < att.rows(); ++r) {
            double sum = 0.0;
            for (Eigen::Index p = 0; p < att.cols(); ++p) sum += att(r, p);
            worst_row = std::max(worst_row, std::abs(sum - 1.0));
            if (std::abs(sum - 1.0) > 1e-6) rows_ok = false;
          }

      auto rec = aggregate_fidatt(out, {"a", "b", "c"});
      for (size_t seg = 0; seg < 3; ++seg) {
        double sum = 0.0;
        for (int l = 0; l < ln; ++l)
          for (int h = 0; h < hn; ++h)
            for (size_t p = 0; p < out.segment_map.size(); ++p)
              if (out.segment_map[p].first == static_cast<int>(seg))
                sum += out.cross_attention[static_cast<size_t>(l)][static_cast<size_t>(h)](
                    0, static_cast<Eigen::Index>(p));
        double expected = sum / (ln * hn * out.segment_sizes[seg]);
        double err = std::abs(rec.scores[seg].second - expected);
        worst_agg = std::max(worst_agg, err);
        if (err > 1e-6) agg_ok = false;
      }
    }
  }
  report(3, "FiDAtt equals the triple-loop oracle; attention rows sum to 1",
         rows_ok && agg_ok,
         fmt("ln,hn <= 4, segments <= 16 tokens; worst row dev %.1e, worst agg err %.1e, %.1fs",
             worst_row, worst_agg, seconds_since(t0)));
}

// ---------------------------------------------------------------- criterion 4

void criterion_set_algebra() {
  auto t0 = std::chrono::steady_clock::now();
  DetRng rng(161803);
  bool ok = true;
  int swallow_cases = 0, k0_cases = 0, full_overlap_cases = 0;
  for (int trial = 0; trial < 1000 && ok; ++trial) {
    int n_docs = 3 + static_cast<int>(rng.below(10));
    FidAttRecord fidatt;
    std::vector<std::pair<std::string, double>> docs;
    for (int d = 0; d < n_docs; ++d) {
      std::string id = "d" + std::to_string(d);
      fidatt.scores.emplace_back(id, std::round(rng.uniform(0, 1) * 4) / 4.0);
      docs.emplace_back(id, rng.normal(0.0, 1.0));
    }
    std::set<std::string> human;
    // sweep edge regimes: empty, random, everything (full overlap)
    int regime = trial % 4;
    for (int d = 0; d < n_docs; ++d)
      if (regime == 3 || (regime != 0 && rng.next_double() < 0.3))
        human.insert("d" + std::to_string(d));
    if (regime == 3) ++full_overlap_cases;
    int K = trial % 5 == 0 ? 0 : static_cast<int>(rng.below(static_cast<uint64_t>(n_docs + 1)));
    if (K == 0) ++k0_cases;
    PositiveSource source = trial % 3 == 0   ? PositiveSource::Union
                            : trial % 3 == 1 ? PositiveSource::LmOnly
                                             : PositiveSource::HumanOnly;

    auto ranked = fidatt.scores;
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    std::set<std::string> expected;
    if (source != PositiveSource::LmOnly) expected = human;
    if (source != PositiveSource::HumanOnly)
      for (int r = 0; r < K; ++r) expected.insert(ranked[static_cast<size_t>(r)].first);

    std::set<std::string> got;
    if (source != PositiveSource::LmOnly && human.empty()) {
      try {
        build_positive_set("q", human, fidatt, K, source);
        ok = false;
      } catch (const annotation_error&) {
      }
      continue;
    }
    got = build_positive_set("q", human, fidatt, K, source);
    if (got != expected) ok = false;

    Index index;
    index.vectors = Mat::Zero(n_docs, 1);
    for (int d = 0; d < n_docs; ++d) {
      index.doc_ids.push_back(docs[static_cast<size_t>(d)].first);
      index.vectors(d, 0) = docs[static_cast<size_t>(d)].second;
    }
    RowVec q(1);
    q << 1.0;
    int M = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(n_docs)));
    auto sorted = docs;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    std::vector<std::string> expected_negs;
    for (int r = 0; r < M; ++r)
      if (!got.count(sorted[static_cast<size_t>(r)].first))
        expected_negs.push_back(sorted[static_cast<size_t>(r)].first);
    if (expected_negs.empty()) {
      ++swallow_cases;
      try {
        mine_negatives(index, q, M, got, "q");
        ok = false;
      } catch (const annotation_error&) {
      }
    } else if (mine_negatives(index, q, M, got, "q") != expected_negs) {
      ok = false;
    }
  }
  report(4, "positive-set and negative-mining match brute-force set algebra",
         ok && k0_cases > 0 && swallow_cases > 0 && full_overlap_cases > 0,
         fmt("1000 cases (%d with K=0, %d swallow-top-M, %d full-overlap), %.1fs", k0_cases,
             swallow_cases, full_overlap_cases, seconds_since(t0)));
}

// ---------------------------------------------------------------- criterion 5

void criterion_overlap() {
  auto t0 = std::chrono::steady_clock::now();
  DetRng rng(271828);
  bool ok = true;
  for (int trial = 0; trial < 1000 && ok; ++trial) {
    std::set<std::string> a, b;
    for (int i = 0; i < 10; ++i) {
      if (rng.next_double() < 0.4) a.insert("e" + std::to_string(rng.below(14)));
      if (rng.next_double() < 0.4) b.insert("e" + std::to_string(rng.below(14)));
    }
    if (a.empty() && b.empty()) {
      try {
        set_overlap(a, b);
        ok = false;
      } catch (const contract_error&) {
      }
      continue;
    }
    size_t inter = 0;
    for (const auto& x : a) inter += b.count(x);
    size_t uni = a.size() + b.size() - inter;
    double expected = static_cast<double>(inter) / static_cast<double>(uni);
    double got = set_overlap(a, b);
    if (got != expected) ok = false;                  // exact rational agreement
    if (set_overlap(b, a) != got) ok = false;         // symmetry
    if ((got == 1.0) != (a == b)) ok = false;         // identity
    if (got < 0.0 || got > 1.0) ok = false;
  }
  report(5, "set overlap agrees exactly with enumeration; symmetry and identity hold", ok,
         fmt("1000 random pairs, %.1fs", seconds_since(t0)));
}

// ------------------------------------------------------- criteria 6, 7 and 8

void criteria_planted_experiment() {
  auto t0 = std::chrono::steady_clock::now();
  fixture::FixtureConfig fc;
  fc.n_queries = 200;
  fc.corpus_size = 2000;
  auto f = fixture::make_fixture(fc);

  auto dir = fs::temp_directory_path() / "aar_acceptance_world";
  fs::create_directories(dir);
  fixture::write_fixture_files(f, dir.string());
  save_reader(f.make_reader("target"), (dir / "target.reader").string());
  save_reader(f.make_reader("source"), (dir / "source.reader").string());
  save_reader(f.make_reader("alt"), (dir / "alt.reader").string());

  EncoderParams base = fixture::make_pretrained_encoder(f);
  save_encoder(base, (dir / "base.ckpt").string());
  ReaderModel source = f.make_reader("source");

  // Train the three arms with the stock defaults N=10, K=2, M=100.
  std::map<std::string, TrainLog> logs;
  AnnotationResult union_annotation;
  for (auto src : {PositiveSource::Union, PositiveSource::LmOnly, PositiveSource::HumanOnly}) {
    AatConfig config = fixture::arm_config(f, src);
    auto ann = annotate_source_task(f.queries, f.corpus, base, source, config);
    if (src == PositiveSource::Union) union_annotation = ann;
    auto result = train(ann.instances, f.queries, f.corpus, base, config);
    export_retriever(result.params, (dir / (std::string(to_string(src)) + ".ckpt")).string());
    logs[to_string(src)] = std::move(result.log);
  }

  std::map<std::string, std::string> kv{
      {"corpus", (dir / "corpus.jsonl").string()},
      {"queries", (dir / "queries.jsonl").string()},
      {"reader.target", (dir / "target.reader").string()},
      {"reader.source", (dir / "source.reader").string()},
      {"reader.alt", (dir / "alt.reader").string()},
      {"retriever.base", (dir / "base.ckpt").string()},
      {"retriever.union", (dir / "union.ckpt").string()},
      {"retriever.lm", (dir / "lm.ckpt").string()},
      {"retriever.human", (dir / "human.ckpt").string()},
      {"candidates", (dir / "candidates.jsonl").string()},
      {"aug_docs", "3"},
      {"answer_deletion", "true"},
      {"overlap_k", "2"},
      {"overlap_retriever", "base"},
      {"seed", std::to_string(f.config.seed)},
  };
  EvalReport report_eval = run_experiment(ExperimentSpec::from_map(kv), dir.string());
  report_eval.write((dir / "report.txt").string());
  auto metric = [&](const std::string& name) {
    auto it = report_eval.metrics.find(name);
    if (it == report_eval.metrics.end()) return -1.0;
    return it->second;
  };

  double acc_base = metric("accuracy.base");
  double acc_union = metric("accuracy.union");
  double acc_lm = metric("accuracy.lm");
  double acc_human = metric("accuracy.human");

  // 6a: the adapted retriever beats the pre-training retriever by >= 5 points
  bool a_ok = acc_union >= acc_base + 0.05;
  // 6b: union >= lm-only >= human-only (ties within one point)
  bool b_ok = acc_union >= acc_lm - 0.01 && acc_lm >= acc_human - 0.01;
  // 6c: human-label MRR@10 dips below its step-0 value at the first refresh
  // while downstream accuracy rises
  const TrainLog& union_log = logs.at("union");
  double mrr0 = union_log.records.front().mrr_at_10;
  double mrr_first_refresh = -1.0;
  for (const auto& r : union_log.records)
    if (r.refresh_id == 1) {
      mrr_first_refresh = r.mrr_at_10;
      break;
    }
  bool c_ok = mrr_first_refresh >= 0.0 && mrr_first_refresh < mrr0 && acc_union > acc_base;
  double dt = seconds_since(t0);
  report(6, "planted end-to-end experiment reproduces the adaptation trends",
         a_ok && b_ok && c_ok && dt < 600.0,
         fmt("acc base %.3f union %.3f lm %.3f human %.3f; mrr %.3f -> %.3f at refresh 1; %.0fs",
             acc_base, acc_union, acc_lm, acc_human, mrr0, mrr_first_refresh, dt));

  // 7: the answer-deletion drop is strictly larger for the human-label
  // retriever, and LM-preferred positives contain fewer literal answers
  double drop_human = metric("deletion_drop.human");
  double drop_lm = metric("deletion_drop.lm");
  RunFile lm_positive_run, human_positive_run;
  for (const auto& rec : union_annotation.fidatt) {
    auto top2 = build_positive_set(rec.query_id, {}, rec, 2, PositiveSource::LmOnly);
    auto& entry = lm_positive_run[rec.query_id];
    double score = 2.0;
    for (const auto& id : top2) entry.entries.emplace_back(id, score -= 0.5);
  }
  for (const auto& q : f.queries) {
    auto& entry = human_positive_run[q.id];
    double score = 2.0;
    for (const auto& id : q.human_positive_ids) entry.entries.emplace_back(id, score -= 0.5);
  }
  double em_lm = exact_match_rate(lm_positive_run, f.corpus, f.queries, 2).value;
  double em_human = exact_match_rate(human_positive_run, f.corpus, f.queries, 2).value;
  report(7, "answer deletion hurts the human-label retriever more; LM positives carry fewer spans",
         drop_human > drop_lm && em_lm < em_human,
         fmt("deletion drop human %.3f vs lm %.3f; exact-match lm %.3f vs human %.3f", drop_human,
             drop_lm, em_lm, em_human));

  // 8: LM-vs-LM positive sets overlap more than either LM set does with the
  // human sets
  double lm_lm = metric("overlap.lm_alt.lm_source");
  double source_human = metric("overlap.human.lm_source");
  double alt_human = metric("overlap.human.lm_alt");
  report(8, "positive-set overlap: LM-vs-LM exceeds LM-vs-human",
         lm_lm > source_human && lm_lm > alt_human,
         fmt("lm-lm %.3f vs lm-human %.3f / %.3f", lm_lm, source_human, alt_human));
}

// ---------------------------------------------------------------- criterion 9

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void criterion_determinism(const std::string& cli) {
  auto t0 = std::chrono::steady_clock::now();
  if (cli.empty()) {
    report(9, "pipeline reruns are byte-identical", false, "no CLI path given");
    return;
  }
  auto dir = fs::temp_directory_path() / "aar_acceptance_cli";
  fs::create_directories(dir);
  fixture::FixtureConfig fc;
  fc.n_queries = 8;
  fc.corpus_size = 100;
  auto f = fixture::make_fixture(fc);
  fixture::write_fixture_files(f, dir.string());
  save_encoder(f.make_encoder(), (dir / "enc.ckpt").string());
  save_reader(f.make_reader("source"), (dir / "source.reader").string());
  save_reader(f.make_reader("target"), (dir / "target.reader").string());

  auto sh = [&](const std::string& args) {
    std::string cmd = cli + " " + args + " >/dev/null 2>&1";
    return std::system(cmd.c_str()) == 0;
  };
  const std::string d = dir.string();
  bool ran = true;
  ran = ran && sh("index --corpus " + d + "/corpus.jsonl --encoder " + d +
                  "/enc.ckpt --seed 3 --out " + d + "/a.idx");
  ran = ran && sh("index --corpus " + d + "/corpus.jsonl --encoder " + d +
                  "/enc.ckpt --seed 3 --out " + d + "/b.idx");
  ran = ran && sh("retrieve --index " + d + "/a.idx --encoder " + d + "/enc.ckpt --queries " + d +
                  "/queries.jsonl --seed 3 --out " + d + "/a.trec");
  ran = ran && sh("retrieve --index " + d + "/b.idx --encoder " + d + "/enc.ckpt --queries " + d +
                  "/queries.jsonl --seed 3 --out " + d + "/b.trec");
  std::string train_args = "train --corpus " + d + "/corpus.jsonl --queries " + d +
                           "/queries.jsonl --reader " + d + "/source.reader --encoder " + d +
                           "/enc.ckpt --lr 0.01 --epochs 2 --seed 7 --out-dir ";
  ran = ran && sh(train_args + d + "/ta");
  ran = ran && sh(train_args + d + "/tb");
  {
    std::ofstream spec(d + "/exp.conf");
    spec << "corpus = " << d << "/corpus.jsonl\nqueries = " << d
         << "/queries.jsonl\nreader.target = " << d << "/target.reader\nretriever.t = " << d
         << "/ta/retriever.ckpt\ncandidates = " << d << "/candidates.jsonl\nseed = 5\n";
  }
  ran = ran && sh("experiment --spec " + d + "/exp.conf --out-dir " + d + "/ea");
  ran = ran && sh("experiment --spec " + d + "/exp.conf --out-dir " + d + "/eb");

  bool ok = ran && slurp(d + "/a.idx") == slurp(d + "/b.idx") &&
            slurp(d + "/a.trec") == slurp(d + "/b.trec") &&
            slurp(d + "/ta/retriever.ckpt") == slurp(d + "/tb/retriever.ckpt") &&
            slurp(d + "/ta/train.log") == slurp(d + "/tb/train.log") &&
            slurp(d + "/ea/report.txt") == slurp(d + "/eb/report.txt") &&
            !slurp(d + "/ta/retriever.ckpt").empty();
  report(9, "pipeline reruns are byte-identical (index, run, checkpoint, log, report)", ok,
         fmt("%s, %.0fs", ran ? "all commands ran" : "a command failed", seconds_since(t0)));
}

}  // namespace

int main(int argc, char** argv) {
  std::string cli = argc > 1 ? argv[1] : "";
  criterion_gradients();
  criterion_retrieval();
  criterion_fidatt();
  criterion_set_algebra();
  criterion_overlap();
  criteria_planted_experiment();
  criterion_determinism(cli);
  if (g_failures > 0) {
    std::printf("%d criterion(s) failed\n", g_failures);
    return 1;
  }
  std::printf("all acceptance criteria passed\n");
  return 0;
}
