#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "metatask/analysis.hpp"
#include "metatask/config.hpp"
#include "metatask/corpus.hpp"
#include "metatask/curriculum.hpp"
#include "metatask/embeddings.hpp"
#include "metatask/kmeans.hpp"
#include "metatask/metalearner.hpp"
#include "metatask/synthetic.hpp"
#include "metatask/taskgen.hpp"
#include "metatask/trainer.hpp"

namespace metatask::cli {

namespace fs = std::filesystem;

/// Options shared by every subcommand.
struct Common {
  std::string config;
  std::vector<std::string> sets;  ///< "section.key=value"
  std::optional<std::uint64_t> seed;
  std::string out;
  bool deterministic = false;
};

struct IngestArgs {
  std::vector<std::string> inputs;
  std::string synthetic;
  std::optional<std::uint64_t> synthetic_seed;
  std::string lexicon;  ///< snapshot whose lexicon is reused and frozen
};

struct ClusterArgs {
  std::string corpus;
  std::string what = "both";
  std::optional<int> k_words, k_sentences;
  std::string embeddings;
};

struct GenArgs {
  std::string corpus, word_clusters, sent_clusters, dist;
  long n_tasks = 100;
};

struct TrainArgs {
  std::string corpus, word_clusters, sent_clusters, resume;
  std::optional<long> steps;
};

struct EvalArgs {
  std::string corpus, word_clusters, sent_clusters;
  std::vector<std::string> models;  ///< name=checkpoint
  std::vector<std::string> untrained;
  std::vector<std::string> tasks;   ///< name=train[:test]
  std::optional<int> synthetic_topic;
};

/// Config file, then environment, then --set, then dedicated flags. Throws ConfigError
/// with every violation found.
inline RunConfig resolve(const Common& c, bool need_corpus = false) {
  RunConfig rc = load_run_config(c.config);
  std::vector<std::string> errors;
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      errors.push_back("--set expects key=value, got '" + s + "'");
      continue;
    }
    try {
      set_config_value(rc, detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
    } catch (const ConfigError& e) {
      errors.insert(errors.end(), e.violations().begin(), e.violations().end());
    }
  }
  if (!errors.empty()) throw ConfigError(errors);
  if (c.seed) rc.seed = c.seed;
  if (!c.out.empty()) rc.out_dir = c.out;
  if (c.deterministic) rc.deterministic = true;
  validate_config(rc, need_corpus);
  return rc;
}

inline void echo_config(const RunConfig& rc, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream out(dir / "resolved.conf", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "resolved.conf").string());
  write_run_config(rc, out);
}

inline SyntheticSpec synthetic_spec(const std::string& s) {
  return s == "default" ? SyntheticSpec{} : SyntheticSpec::parse_file(s);
}

/// Corpus from a snapshot, a synthetic spec, or text files (in that order of preference).
inline Corpus build_corpus(const RunConfig& rc, const std::string& lexicon_snapshot = {}) {
  if (!rc.snapshot.empty()) return load_corpus_file(rc.snapshot);
  if (!rc.synthetic.empty()) return gen_synthetic(synthetic_spec(rc.synthetic), rc.synthetic_seed).corpus;
  IngestConfig ic;
  ic.lowercase = rc.lowercase;
  ic.doc_mode = rc.doc_mode == "whole-file" ? DocMode::WholeStream : DocMode::BlankLine;
  CorpusBuilder b = lexicon_snapshot.empty() ? CorpusBuilder() : CorpusBuilder(load_corpus_file(lexicon_snapshot).lexicon, true);
  for (const auto& p : rc.corpus_paths) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot read " + p);
    b.add_stream(in, ic);
  }
  return b.finish();
}

inline std::shared_ptr<const TaskContext> load_context(const std::string& snapshot, const RunConfig& rc) {
  if (snapshot.empty()) throw ConfigError("--corpus snapshot is required");
  return make_context(load_corpus_file(snapshot), rc.effective_min_sentences());
}

inline std::shared_ptr<const Clustering> maybe_clustering(const std::string& path) {
  if (path.empty()) return nullptr;
  return std::make_shared<const Clustering>(load_clustering_file(path));
}

inline PresetInputs preset_inputs(const RunConfig& rc, std::shared_ptr<const TaskContext> ctx, const std::string& words,
                                  const std::string& sentences) {
  PresetInputs in;
  in.ctx = std::move(ctx);
  in.word_clusters = maybe_clustering(words);
  in.sent_clusters = maybe_clustering(sentences);
  in.cfg = rc.sampler_config();
  in.sentpair_prob = rc.sentpair_prob;
  in.frequency_share = rc.frequency_share;
  return in;
}

inline std::pair<std::string, std::string> split_named(const std::string& s, const char* what) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == s.size())
    throw ConfigError(std::string(what) + " expects name=path, got '" + s + "'");
  return {s.substr(0, eq), s.substr(eq + 1)};
}

inline ModelParams untrained_params(const RunConfig& rc, int vocab) {
  return init_params(rc.model_spec(vocab), Rng::derive(*rc.seed, "model"), rc.init_config());
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline int cmd_ingest(const Common& c, const IngestArgs& a, std::ostream& log) {
  RunConfig rc = resolve(c);
  if (!a.inputs.empty()) rc.corpus_paths = a.inputs;
  if (!a.synthetic.empty()) rc.synthetic = a.synthetic;
  if (a.synthetic_seed) rc.synthetic_seed = *a.synthetic_seed;
  if (!a.inputs.empty() || !a.synthetic.empty()) rc.snapshot.clear();
  validate_config(rc, true);
  Corpus corpus = build_corpus(rc, a.lexicon);
  const fs::path dir(rc.out_dir);
  echo_config(rc, dir);
  save_corpus_file(corpus, (dir / "corpus.snap").string());
  log << "corpus: " << corpus.documents.size() << " documents, " << corpus.sentences.size() << " sentences, "
      << corpus.lexicon.size() << " lexicon entries -> " << (dir / "corpus.snap").string() << '\n';
  return 0;
}

inline int cmd_cluster(const Common& c, const ClusterArgs& a, std::ostream& log) {
  RunConfig rc = resolve(c);
  if (!a.embeddings.empty()) {
    rc.embedding_source = "file";
    rc.embedding_path = a.embeddings;
  }
  if (a.k_words) rc.word_clusters = *a.k_words;
  if (a.k_sentences) rc.sentence_clusters = *a.k_sentences;
  if (a.what != "words" && a.what != "sentences" && a.what != "both") throw ConfigError("--what must be words, sentences or both");
  validate_config(rc);
  auto ctx = load_context(a.corpus, rc);
  const std::uint64_t seed = *rc.seed;
  EmbeddingTable table = rc.embedding_source == "file"
                             ? load_embeddings_file(rc.embedding_path, ctx->vocab)
                             : cooc_embeddings(ctx->corpus, ctx->vocab, rc.embedding_dim, rc.embedding_window,
                                               Rng::derive(seed, "embeddings"));
  const fs::path dir(rc.out_dir);
  echo_config(rc, dir);
  {
    std::ofstream out(dir / "embeddings.vec", std::ios::binary);
    save_embeddings(table, ctx->corpus.lexicon, out);
  }
  KMeansOptions opt{rc.kmeans_max_iters, rc.kmeans_tol};
  if (a.what != "sentences") {
    auto wc = cluster_words(table, ctx->vocab, rc.word_clusters, Rng::derive(seed, "word-kmeans"), opt);
    save_clustering_file(wc, (dir / "words.clust").string());
    log << "word clusters: k = " << wc.k << ", " << wc.items.size() << " words, inertia " << wc.inertia << '\n';
  }
  if (a.what != "words") {
    auto sc = cluster_sentences(ctx->corpus, table, rc.sentence_clusters, Rng::derive(seed, "sentence-kmeans"), opt);
    save_clustering_file(sc, (dir / "sentences.clust").string());
    log << "sentence clusters: k = " << sc.k << ", " << sc.items.size() << " sentences, inertia " << sc.inertia << '\n';
  }
  return 0;
}

inline int cmd_gen_tasks(const Common& c, const GenArgs& a, std::ostream& log) {
  Common cc = c;
  cc.out.clear();
  RunConfig rc = resolve(cc);
  if (!a.dist.empty()) rc.preset = a.dist;
  validate_config(rc);
  if (a.n_tasks < 0) throw ConfigError("--n-tasks must be >= 0");
  if (c.out.empty()) throw ConfigError("--out is required");
  auto ctx = load_context(a.corpus, rc);
  auto sampler = make_preset(rc.preset, preset_inputs(rc, ctx, a.word_clusters, a.sent_clusters));
  const fs::path file(c.out);
  const fs::path dir = file.has_parent_path() ? file.parent_path() : fs::path(".");
  rc.out_dir = dir.string();
  echo_config(rc, dir);
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  Rng rng = Rng::stream(*rc.seed, "gen-tasks");
  for (long i = 0; i < a.n_tasks; ++i) {
    Episode ep = sampler->next_episode(rng);
    check_episode(ep, ctx->corpus, nullptr);
    write_episode(ep, out);
  }
  log << a.n_tasks << " " << rc.preset << " episodes -> " << file.string() << '\n';
  return 0;
}

inline int cmd_train(const Common& c, const TrainArgs& a, std::ostream& log) {
  RunConfig rc = resolve(c);
  if (a.steps) rc.total_steps = *a.steps;
  validate_config(rc);
  auto ctx = load_context(a.corpus, rc);
  auto in = preset_inputs(rc, ctx, a.word_clusters, a.sent_clusters);
  auto sampler = make_preset(rc.preset, in);
  const fs::path dir(rc.out_dir);
  echo_config(rc, dir);

  TrainConfig tc = rc.train_config();
  tc.checkpoint_dir = (dir / "checkpoints").string();
  tc.log_path = (dir / "train.log.jsonl").string();
  TrainState state = a.resume.empty()
                         ? start_state(untrained_params(rc, static_cast<int>(ctx->corpus.lexicon.size())), tc)
                         : load_checkpoint_file(a.resume);
  if (state.params.spec().vocab != static_cast<int>(ctx->corpus.lexicon.size()))
    throw ConsistencyError("checkpoint vocabulary does not match the corpus lexicon");

  std::unique_ptr<EpisodeSource> source;
  if (rc.curriculum) {
    CurriculumConfig cc = rc.curriculum_config();
    cc.audit_path = (dir / "refresh.audit.jsonl").string();
    SamplerConfig dyn = rc.sampler_config();
    source = std::make_unique<Curriculum>(ctx, sampler, dyn, cc);
  } else {
    source = std::make_unique<SamplerSource>(sampler);
  }
  auto res = train(std::move(state), *source, tc, [&](const StepRecord& r) {
    if ((r.step + 1) % 500 == 0) log << "step " << r.step + 1 << " query_acc " << r.query_accuracy << '\n';
  });
  log << "trained to step " << res.state.step << " -> " << tc.checkpoint_dir << "/final.ckpt\n";
  return 0;
}

inline int cmd_xeval(const Common& c, const EvalArgs& a, std::ostream& log) {
  RunConfig rc = resolve(c);
  auto ctx = load_context(a.corpus, rc);
  const int vocab = static_cast<int>(ctx->corpus.lexicon.size());
  std::vector<NamedModel> models;
  for (const auto& u : a.untrained)
    models.push_back({u, std::make_shared<const ModelParams>(untrained_params(rc, vocab)), EvalMode::Proto, 0});
  for (const auto& m : a.models) {
    auto [name, path] = split_named(m, "--model");
    models.push_back({name, std::make_shared<const ModelParams>(load_checkpoint_file(path).params), EvalMode::Adapted,
                      rc.adapt_steps});
  }
  if (models.empty()) throw ConfigError("xeval needs at least one --model or --untrained row");
  auto cols = eval_columns(preset_inputs(rc, ctx, a.word_clusters, a.sent_clusters), rc.eval_distributions, rc.eval_classes);
  auto m = cross_eval(models, cols, rc.eval_tasks, Rng::derive(*rc.seed, "xeval"));
  const fs::path dir(rc.out_dir);
  echo_config(rc, dir);
  export_report(m, ReportFormat::Csv, (dir / "xeval.csv").string());
  export_report(m, ReportFormat::Json, (dir / "xeval.json").string());
  for (std::size_t r = 0; r < m.rows.size(); ++r) {
    log << m.rows[r];
    for (std::size_t col = 0; col < m.columns.size(); ++col) log << "  " << m.columns[col] << ' ' << m.cells[r][col].accuracy;
    log << '\n';
  }
  return m.complete() ? 0 : 3;
}

inline int cmd_report(const Common& c, const EvalArgs& a, std::ostream& log) {
  RunConfig rc = resolve(c);
  if (a.corpus.empty()) throw ConfigError("--corpus snapshot is required (it fixes the lexicon)");
  const Corpus corpus = load_corpus_file(a.corpus);
  const int vocab = static_cast<int>(corpus.lexicon.size());
  std::vector<FewShotTask> tasks;
  for (const auto& t : a.tasks) {
    auto [name, paths] = split_named(t, "--task");
    const auto colon = paths.find(':');
    LabeledDataset train = read_labeled_file(paths.substr(0, colon), corpus.lexicon, name);
    if (colon == std::string::npos) {
      tasks.push_back(split_task(train, rc.test_per_class, *rc.seed));
    } else {
      tasks.push_back({name, train, read_labeled_file(paths.substr(colon + 1), corpus.lexicon, name)});
    }
  }
  if (a.synthetic_topic) {
    if (rc.synthetic.empty()) throw ConfigError("--synthetic-topic needs corpus.synthetic");
    auto sc = gen_synthetic(synthetic_spec(rc.synthetic), rc.synthetic_seed);
    if (sc.corpus.lexicon.size() != corpus.lexicon.size()) throw ConsistencyError("synthetic lexicon does not match --corpus");
    tasks.push_back(split_task(synthetic_topic_dataset(sc, *a.synthetic_topic, *rc.seed), rc.test_per_class, *rc.seed));
  }
  if (tasks.empty()) throw ConfigError("report needs at least one --task or --synthetic-topic");
  std::vector<std::pair<std::string, ModelParams>> models;
  for (const auto& u : a.untrained) models.emplace_back(u, untrained_params(rc, vocab));
  for (const auto& m : a.models) {
    auto [name, path] = split_named(m, "--model");
    models.emplace_back(name, load_checkpoint_file(path).params);
  }
  if (models.empty()) throw ConfigError("report needs at least one --model or --untrained");
  FewShotConfig fc{rc.k_values, rc.resamples, rc.eval_steps, Rng::derive(*rc.seed, "few-shot")};
  const fs::path dir(rc.out_dir);
  echo_config(rc, dir);
  for (const auto& [name, params] : models) {
    if (params.spec().vocab != vocab) throw ConsistencyError("model '" + name + "' vocabulary does not match --corpus");
    auto rep = few_shot_report(params, tasks, fc, name);
    export_report(rep, ReportFormat::Csv, (dir / ("fewshot-" + name + ".csv")).string());
    export_report(rep, ReportFormat::Json, (dir / ("fewshot-" + name + ".json")).string());
    std::ofstream plot(dir / ("plot-" + name + ".json"), std::ios::binary);
    plot << plot_data(rep).dump(2) << '\n';
    for (const auto& e : rep.entries)
      log << name << ' ' << e.task << " k=" << e.k << ' ' << (e.skipped.empty() ? std::to_string(e.mean) : "skipped: " + e.skipped)
          << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

/// Parses and runs one command line. Returns the process exit code: 0 success, 1 runtime
/// failure, 2 usage or configuration error, 3 incomplete evaluation.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Self-supervised task distributions and a desk-scale meta-learner"};
  app.require_subcommand(1);
  app.footer("Configuration keys (file, METATASK_<SECTION>_<KEY> environment, or --set):\n" + config_reference());

  Common common;
  auto add_common = [&common](CLI::App* s) {
    s->add_option("-c,--config", common.config, "key = value config file");
    s->add_option("--set", common.sets, "override one key: section.key=value");
    s->add_option("--seed", common.seed, "master seed");
    s->add_option("-o,--out", common.out, "output directory (gen-tasks: output file)");
    s->add_flag("--deterministic", common.deterministic, "single-threaded, synchronous refresh, reproducible files");
  };

  IngestArgs ia;
  auto* ingest = app.add_subcommand("ingest", "text files or a synthetic spec -> corpus snapshot");
  add_common(ingest);
  ingest->add_option("-i,--input", ia.inputs, "text files (blank line ends a document)");
  ingest->add_option("--synthetic", ia.synthetic, "synthetic spec file or 'default'");
  ingest->add_option("--synthetic-seed", ia.synthetic_seed, "seed of the synthetic generator");
  ingest->add_option("--lexicon", ia.lexicon, "reuse (and freeze) the lexicon of this snapshot");

  ClusterArgs ca;
  auto* cluster = app.add_subcommand("cluster", "embeddings + k-means over words and/or sentences");
  add_common(cluster);
  cluster->add_option("--corpus", ca.corpus, "corpus snapshot")->required();
  cluster->add_option("--what", ca.what, "words | sentences | both")->capture_default_str();
  cluster->add_option("--k-words", ca.k_words, "word clusters (clusters.words)");
  cluster->add_option("--k-sentences", ca.k_sentences, "sentence clusters (clusters.sentences)");
  cluster->add_option("--embeddings", ca.embeddings, "word-vector file instead of co-occurrence embeddings");

  GenArgs ga;
  auto* gen = app.add_subcommand("gen-tasks", "sample episodes to a JSONL file");
  add_common(gen);
  gen->add_option("--corpus", ga.corpus, "corpus snapshot")->required();
  gen->add_option("--word-clusters", ga.word_clusters, "word clustering snapshot");
  gen->add_option("--sent-clusters", ga.sent_clusters, "sentence clustering snapshot");
  gen->add_option("--dist", ga.dist, "uniform|frequency|cluster|intra-cluster|inter-cluster|sentcluster|sentpair|mix");
  gen->add_option("--n-tasks", ga.n_tasks, "episodes to write")->capture_default_str();

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "meta-train; writes checkpoints and a JSONL log");
  add_common(trn);
  trn->add_option("--corpus", ta.corpus, "corpus snapshot")->required();
  trn->add_option("--word-clusters", ta.word_clusters, "word clustering snapshot");
  trn->add_option("--sent-clusters", ta.sent_clusters, "sentence clustering snapshot");
  trn->add_option("--resume", ta.resume, "continue from a checkpoint");
  trn->add_option("--steps", ta.steps, "total steps (train.total_steps)");

  EvalArgs xa;
  auto* xeval = app.add_subcommand("xeval", "cross-distribution accuracy matrix");
  add_common(xeval);
  xeval->add_option("--corpus", xa.corpus, "evaluation corpus snapshot")->required();
  xeval->add_option("--word-clusters", xa.word_clusters, "word clustering of the evaluation corpus");
  xeval->add_option("--sent-clusters", xa.sent_clusters, "sentence clustering of the evaluation corpus");
  xeval->add_option("--model", xa.models, "row: name=checkpoint (adapted evaluation)");
  xeval->add_option("--untrained", xa.untrained, "row: freshly initialized model (prototype evaluation)");

  EvalArgs ra;
  auto* report = app.add_subcommand("report", "few-shot fine-tuning report");
  add_common(report);
  report->add_option("--corpus", ra.corpus, "corpus snapshot whose lexicon the models use")->required();
  report->add_option("--model", ra.models, "name=checkpoint");
  report->add_option("--untrained", ra.untrained, "freshly initialized model name");
  report->add_option("--task", ra.tasks, "name=train.tsv[:test.tsv]");
  report->add_option("--synthetic-topic", ra.synthetic_topic, "add the synthetic topic task with this many examples per class");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  try {
    if (*ingest) return cmd_ingest(common, ia, out);
    if (*cluster) return cmd_cluster(common, ca, out);
    if (*gen) return cmd_gen_tasks(common, ga, out);
    if (*trn) return cmd_train(common, ta, out);
    if (*xeval) return cmd_xeval(common, xa, out);
    if (*report) return cmd_report(common, ra, out);
  } catch (const ConfigError& e) {
    err << "error: invalid configuration\n";
    for (const auto& v : e.violations()) err << "  " << v << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace metatask::cli
