// Command-line pipeline around the AAR toolkit: build indexes, retrieve,
// annotate with FiDAtt, run augmentation-adapted training, and evaluate.
// All commands print their resolved configuration and seed before running,
// and every source of randomness is derived from the one --seed value, so
// reruns are byte-identical.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aar/aar.hpp"
#include "aar/pipeline_config.hpp"

namespace {

using namespace aar;

struct CommonFlags {
  std::string config_path;
  std::string out_dir = ".";
  long seed = 0;
  bool seed_given = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "key = value config file");
  cmd->add_option("--out-dir", flags.out_dir, "output directory");
  cmd->add_option("--seed", flags.seed, "root seed")->each([&](const std::string&) {
    flags.seed_given = true;
  });
}

void resolve(PipelineConfig& config, const CommonFlags& flags) {
  if (!flags.config_path.empty()) config.load_file(flags.config_path);
  config.apply_overrides();
  if (flags.seed_given) config.set("seed", std::to_string(flags.seed));
  config.print(stdout);
  std::fprintf(stdout, "[seed] %ld\n", parse_int(config.get("seed"), "seed"));
}

void ensure_out_dir(const std::string& dir) {
  if (dir.empty() || dir == ".") return;
  std::filesystem::create_directories(dir);
}

IndexMode parse_mode(const std::string& s) {
  if (s == "exact") return IndexMode::Exact;
  if (s == "ivf") return IndexMode::Ivf;
  throw config_error("mode must be exact or ivf, got '" + s + "'");
}

int cmd_index(const CommonFlags& flags, const std::string& corpus_path,
              const std::string& encoder_path, const std::string& out_path,
              PipelineConfig& config) {
  resolve(config, flags);
  const Corpus corpus = load_corpus(corpus_path);
  const EncoderParams params = load_encoder(encoder_path);
  IvfConfig ivf{static_cast<uint32_t>(config.get_int("n_lists")),
                static_cast<uint32_t>(config.get_int("n_probe"))};
  Index index = build_index(corpus, params, parse_mode(config.get("mode")), ivf,
                            config.stage_seed("index"),
                            static_cast<size_t>(config.get_int("max_len")));
  save_index(index, out_path);
  std::fprintf(stdout, "[index] count = %zu dim = %u mode = %s -> %s\n", index.size(),
               index.dim(), config.get("mode").c_str(), out_path.c_str());
  return 0;
}

int cmd_retrieve(const CommonFlags& flags, const std::string& index_path,
                 const std::string& encoder_path, const std::string& queries_path,
                 const std::string& out_path, PipelineConfig& config) {
  resolve(config, flags);
  const Index index = load_index(index_path);
  const EncoderParams params = load_encoder(encoder_path);
  const auto queries = load_query_set(queries_path);
  const TokenizerConfig tok = params.tokenizer(static_cast<size_t>(config.get_int("max_len")));
  const size_t k = std::min(static_cast<size_t>(config.get_int("k")), index.size());
  RunFile run;
  for (const auto& q : queries) run[q.id] = search(index, encode(params, tokenize(q.text, tok)), k);
  write_run_file(run, out_path, config.get("run_tag"));
  std::fprintf(stdout, "[retrieve] %zu queries, k = %zu -> %s\n", run.size(), k,
               out_path.c_str());
  return 0;
}

AatConfig aat_from_config(const PipelineConfig& config) {
  AatConfig aat = make_preset(config.get("preset"));
  aat.N = static_cast<int>(config.get_int("N"));
  aat.K = static_cast<int>(config.get_int("K"));
  aat.M = static_cast<int>(config.get_int("M"));
  aat.negatives_per_positive = static_cast<int>(config.get_int("negatives_per_positive"));
  aat.refresh_every = config.get_int("refresh_every");
  aat.batch_size = static_cast<int>(config.get_int("batch_size"));
  if (config.get("lr") != "preset") aat.lr = config.get_double("lr");
  if (config.get("epochs") != "preset") aat.epochs = static_cast<int>(config.get_int("epochs"));
  aat.source = parse_positive_source(config.get("source"));
  aat.full_negative_sum = config.get_bool("full_negative_sum");
  aat.max_len = static_cast<size_t>(config.get_int("max_len"));
  aat.fid_decode_steps = static_cast<int>(config.get_int("fid_decode_steps"));
  aat.seed = config.stage_seed("aat");
  aat.validate();
  return aat;
}

void declare_aat(PipelineConfig& config) {
  config.declare("preset", "ance");
  config.declare("N", "10");
  config.declare("K", "2");
  config.declare("M", "100");
  config.declare("negatives_per_positive", "4");
  config.declare("refresh_every", "0");
  config.declare("batch_size", "8");
  config.declare("lr", "preset");
  config.declare("epochs", "preset");
  config.declare("source", "union");
  config.declare("full_negative_sum", "false");
  config.declare("max_len", "64");
  config.declare("fid_decode_steps", "1");
}

void print_annotation_report(const AnnotationReport& report) {
  std::fprintf(stdout, "[annotate] queries = %zu annotated = %zu dropped = %zu\n", report.total,
               report.annotated, report.dropped);
  for (const auto& [qid, reason] : report.drops)
    std::fprintf(stdout, "[annotate] dropped %s: %s\n", qid.c_str(), reason.c_str());
}

int cmd_annotate(const CommonFlags& flags, const std::string& corpus_path,
                 const std::string& queries_path, const std::string& encoder_path,
                 const std::string& reader_path, PipelineConfig& config) {
  resolve(config, flags);
  ensure_out_dir(flags.out_dir);
  const Corpus corpus = load_corpus(corpus_path);
  const auto queries = load_query_set(queries_path);
  const EncoderParams params = load_encoder(encoder_path);
  const ReaderModel reader = load_reader(reader_path);
  auto result = annotate_source_task(queries, corpus, params, reader, aat_from_config(config));
  write_fidatt_file(result.fidatt, flags.out_dir + "/fidatt.txt");
  write_instances(result.instances, flags.out_dir + "/instances.jsonl");
  print_annotation_report(result.report);
  return 0;
}

int cmd_train(const CommonFlags& flags, const std::string& corpus_path,
              const std::string& queries_path, const std::string& encoder_path,
              const std::string& reader_path, PipelineConfig& config) {
  resolve(config, flags);
  ensure_out_dir(flags.out_dir);
  const Corpus corpus = load_corpus(corpus_path);
  const auto queries = load_query_set(queries_path);
  const ReaderModel reader = load_reader(reader_path);
  AatConfig aat = aat_from_config(config);

  EncoderParams params =
      encoder_path.empty()
          ? init_encoder(static_cast<uint32_t>(config.get_int("vocab_size")),
                         static_cast<uint32_t>(config.get_int("embed_dim")),
                         config.stage_seed("encoder-init"))
          : load_encoder(encoder_path);

  auto annotation = annotate_source_task(queries, corpus, params, reader, aat);
  print_annotation_report(annotation.report);
  if (annotation.instances.empty())
    throw validation_error("train: no queries survived annotation");
  auto result = train(annotation.instances, queries, corpus, std::move(params), aat);
  export_retriever(result.params, flags.out_dir + "/retriever.ckpt");
  write_train_log(result.log, flags.out_dir + "/train.log");
  std::fprintf(stdout, "[train] steps = %lld final mrr@10 = %.6f -> %s\n",
               static_cast<long long>(result.log.records.back().step),
               result.log.records.back().mrr_at_10, (flags.out_dir + "/retriever.ckpt").c_str());
  return 0;
}

int cmd_eval(const CommonFlags& flags, const std::string& run_path, const std::string& qrels_path,
             const std::string& corpus_path, const std::string& queries_path,
             PipelineConfig& config) {
  resolve(config, flags);
  const RunFile run = read_run_file(run_path);
  if (!qrels_path.empty()) {
    const Qrels qrels = load_qrels(qrels_path);
    const size_t k = static_cast<size_t>(config.get_int("k"));
    auto mrr = mrr_at_k(run, qrels, k);
    std::fprintf(stdout, "[eval] mrr@%zu = %.6f (flagged %zu)\n", k, mrr.value,
                 mrr.flagged.size());
  }
  if (!corpus_path.empty() && !queries_path.empty()) {
    const Corpus corpus = load_corpus(corpus_path);
    const auto queries = load_query_set(queries_path);
    if (!qrels_path.empty()) validate_qrels(load_qrels(qrels_path), queries);
    const size_t top = static_cast<size_t>(config.get_int("top"));
    auto em = exact_match_rate(run, corpus, queries, top);
    std::fprintf(stdout, "[eval] exact_match@%zu = %.6f (flagged %zu)\n", top, em.value,
                 em.flagged.size());
  }
  return 0;
}

int cmd_experiment(const CommonFlags& flags, const std::string& spec_path,
                   PipelineConfig& config) {
  resolve(config, flags);
  ensure_out_dir(flags.out_dir);
  ExperimentSpec spec = ExperimentSpec::from_file(spec_path);
  if (config.get("seed") != "0") spec.seed = static_cast<uint64_t>(config.get_int("seed"));
  EvalReport report = run_experiment(spec, flags.out_dir);
  report.write(flags.out_dir + "/report.txt");
  std::fprintf(stdout, "%s", report.render().c_str());
  return 0;
}

int cmd_make_reader(const CommonFlags& flags, const std::string& out_path,
                    const std::string& affinity_path, PipelineConfig& config) {
  resolve(config, flags);
  ReaderConfig rc;
  rc.ln = static_cast<int>(config.get_int("ln"));
  rc.hn = static_cast<int>(config.get_int("hn"));
  rc.d_model = static_cast<int>(config.get_int("d_model"));
  rc.vocab_size = static_cast<uint32_t>(config.get_int("vocab_size"));
  rc.max_seg_len = static_cast<int>(config.get_int("max_seg_len"));
  rc.copy_strength = config.get_double("copy_strength");
  rc.seed = config.stage_seed("reader-init");
  ReaderModel model = init_reader(rc);
  if (!affinity_path.empty()) {
    std::map<std::string, double> table;
    for (const auto& [token, w] : parse_kv_file(affinity_path))
      table[token] = parse_double(w, token);
    model = plant_preference(model, table);
  }
  save_reader(model, out_path);
  std::fprintf(stdout, "[make-reader] ln = %d hn = %d d_model = %d -> %s\n", rc.ln, rc.hn,
               rc.d_model, out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"augmentation-adapted retriever pipeline"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string corpus_path, queries_path, encoder_path, reader_path, index_path;
  std::string out_path, run_path, qrels_path, spec_path, affinity_path;

  PipelineConfig index_cfg;
  index_cfg.declare("seed", "0");
  index_cfg.declare("mode", "exact");
  index_cfg.declare("n_lists", "16");
  index_cfg.declare("n_probe", "4");
  index_cfg.declare("max_len", "64");
  auto* index_cmd = app.add_subcommand("index", "encode a corpus and build an index");
  add_common(index_cmd, flags);
  index_cmd->add_option("--corpus", corpus_path)->required();
  index_cmd->add_option("--encoder", encoder_path)->required();
  index_cmd->add_option("--out", out_path)->required();
  index_cmd->add_option("--mode", [&](const std::vector<std::string>& v) {
    index_cfg.set("mode", v.back());
    return true;
  }, "exact or ivf");
  index_cmd->add_option("--n-lists", [&](const std::vector<std::string>& v) {
    index_cfg.set("n_lists", v.back());
    return true;
  });
  index_cmd->add_option("--n-probe", [&](const std::vector<std::string>& v) {
    index_cfg.set("n_probe", v.back());
    return true;
  });

  PipelineConfig retrieve_cfg;
  retrieve_cfg.declare("seed", "0");
  retrieve_cfg.declare("k", "10");
  retrieve_cfg.declare("max_len", "64");
  retrieve_cfg.declare("run_tag", "aar");
  auto* retrieve_cmd = app.add_subcommand("retrieve", "write a ranked run file");
  add_common(retrieve_cmd, flags);
  retrieve_cmd->add_option("--index", index_path)->required();
  retrieve_cmd->add_option("--encoder", encoder_path)->required();
  retrieve_cmd->add_option("--queries", queries_path)->required();
  retrieve_cmd->add_option("--out", out_path)->required();
  retrieve_cmd->add_option("--k", [&](const std::vector<std::string>& v) {
    retrieve_cfg.set("k", v.back());
    return true;
  });
  retrieve_cmd->add_option("--run-tag", [&](const std::vector<std::string>& v) {
    retrieve_cfg.set("run_tag", v.back());
    return true;
  });

  PipelineConfig annotate_cfg;
  annotate_cfg.declare("seed", "0");
  declare_aat(annotate_cfg);
  auto* annotate_cmd = app.add_subcommand("annotate", "FiDAtt annotation and negative mining");
  add_common(annotate_cmd, flags);
  annotate_cmd->add_option("--corpus", corpus_path)->required();
  annotate_cmd->add_option("--queries", queries_path)->required();
  annotate_cmd->add_option("--encoder", encoder_path)->required();
  annotate_cmd->add_option("--reader", reader_path)->required();
  annotate_cmd->add_option("--source", [&](const std::vector<std::string>& v) {
    annotate_cfg.set("source", v.back());
    return true;
  }, "human | lm | union");

  PipelineConfig train_cfg;
  train_cfg.declare("seed", "0");
  train_cfg.declare("vocab_size", "32768");
  train_cfg.declare("embed_dim", "32");
  declare_aat(train_cfg);
  auto* train_cmd = app.add_subcommand("train", "augmentation-adapted training");
  add_common(train_cmd, flags);
  train_cmd->add_option("--corpus", corpus_path)->required();
  train_cmd->add_option("--queries", queries_path)->required();
  train_cmd->add_option("--reader", reader_path)->required();
  train_cmd->add_option("--encoder", encoder_path,
                        "starting checkpoint; omit to initialize from the seed");
  train_cmd->add_option("--source", [&](const std::vector<std::string>& v) {
    train_cfg.set("source", v.back());
    return true;
  }, "human | lm | union");
  train_cmd->add_option("--preset", [&](const std::vector<std::string>& v) {
    train_cfg.set("preset", v.back());
    return true;
  }, "ance | contriever");
  train_cmd->add_option("--lr", [&](const std::vector<std::string>& v) {
    train_cfg.set("lr", v.back());
    return true;
  });
  train_cmd->add_option("--epochs", [&](const std::vector<std::string>& v) {
    train_cfg.set("epochs", v.back());
    return true;
  });

  PipelineConfig eval_cfg;
  eval_cfg.declare("seed", "0");
  eval_cfg.declare("k", "10");
  eval_cfg.declare("top", "10");
  auto* eval_cmd = app.add_subcommand("eval", "retrieval metrics over a run file");
  add_common(eval_cmd, flags);
  eval_cmd->add_option("--run", run_path)->required();
  eval_cmd->add_option("--qrels", qrels_path);
  eval_cmd->add_option("--corpus", corpus_path);
  eval_cmd->add_option("--queries", queries_path);
  eval_cmd->add_option("--k", [&](const std::vector<std::string>& v) {
    eval_cfg.set("k", v.back());
    return true;
  });
  eval_cmd->add_option("--top", [&](const std::vector<std::string>& v) {
    eval_cfg.set("top", v.back());
    return true;
  });

  PipelineConfig experiment_cfg;
  experiment_cfg.declare("seed", "0");
  auto* experiment_cmd = app.add_subcommand("experiment", "run a declarative experiment spec");
  add_common(experiment_cmd, flags);
  experiment_cmd->add_option("--spec", spec_path)->required();

  PipelineConfig reader_cfg;
  reader_cfg.declare("seed", "0");
  reader_cfg.declare("ln", "2");
  reader_cfg.declare("hn", "2");
  reader_cfg.declare("d_model", "32");
  reader_cfg.declare("vocab_size", "32768");
  reader_cfg.declare("max_seg_len", "64");
  reader_cfg.declare("copy_strength", "0");
  auto* reader_cmd = app.add_subcommand("make-reader", "initialize a toy reader checkpoint");
  add_common(reader_cmd, flags);
  reader_cmd->add_option("--out", out_path)->required();
  reader_cmd->add_option("--affinity", affinity_path, "token = weight file for planted bias");
  reader_cmd->add_option("--ln", [&](const std::vector<std::string>& v) {
    reader_cfg.set("ln", v.back());
    return true;
  });
  reader_cmd->add_option("--hn", [&](const std::vector<std::string>& v) {
    reader_cfg.set("hn", v.back());
    return true;
  });
  reader_cmd->add_option("--d-model", [&](const std::vector<std::string>& v) {
    reader_cfg.set("d_model", v.back());
    return true;
  });
  reader_cmd->add_option("--vocab-size", [&](const std::vector<std::string>& v) {
    reader_cfg.set("vocab_size", v.back());
    return true;
  });
  reader_cmd->add_option("--copy-strength", [&](const std::vector<std::string>& v) {
    reader_cfg.set("copy_strength", v.back());
    return true;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (index_cmd->parsed())
      return cmd_index(flags, corpus_path, encoder_path, out_path, index_cfg);
    if (retrieve_cmd->parsed())
      return cmd_retrieve(flags, index_path, encoder_path, queries_path, out_path, retrieve_cfg);
    if (annotate_cmd->parsed())
      return cmd_annotate(flags, corpus_path, queries_path, encoder_path, reader_path,
                          annotate_cfg);
    if (train_cmd->parsed())
      return cmd_train(flags, corpus_path, queries_path, encoder_path, reader_path, train_cfg);
    if (eval_cmd->parsed())
      return cmd_eval(flags, run_path, qrels_path, corpus_path, queries_path, eval_cfg);
    if (experiment_cmd->parsed()) return cmd_experiment(flags, spec_path, experiment_cfg);
    if (reader_cmd->parsed()) return cmd_make_reader(flags, out_path, affinity_path, reader_cfg);
    return 2;
  } catch (const usage_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const config_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const contract_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const error& e) {  // parse/format/validation/io/annotation
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
