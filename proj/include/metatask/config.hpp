#pragma once

#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "metatask/curriculum.hpp"
#include "metatask/error.hpp"
#include "metatask/kmeans.hpp"
#include "metatask/metalearner.hpp"
#include "metatask/taskgen.hpp"
#include "metatask/trainer.hpp"

namespace metatask {

inline constexpr const char* kEnvPrefix = "METATASK_";

/// Everything a pipeline run needs. Defaults follow the hyper-parameter table used by
/// the reference setup, scaled where noted (outer lr, cluster counts are desk-sized by config).
struct RunConfig {
  // [run]
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  bool deterministic = false;

  // [corpus]
  std::vector<std::string> corpus_paths;
  std::string synthetic;  ///< spec file, or "default" for the built-in spec
  std::uint64_t synthetic_seed = 1;
  std::string snapshot;   ///< corpus snapshot to load instead of ingesting
  int min_sentences = 0;  ///< 0: support + query need of the sampler config
  bool lowercase = true;
  std::string doc_mode = "blank-line";

  // [embeddings]
  std::string embedding_source = "cooc";  ///< cooc | file
  std::string embedding_path;
  int embedding_dim = 32;
  int embedding_window = 5;

  // [clusters]
  int word_clusters = 500;
  int sentence_clusters = 200000;
  int kmeans_max_iters = 100;
  double kmeans_tol = 1e-4;

  // [tasks]
  std::string preset = "cluster";
  std::vector<int> n_choices{2, 3, 4, 5};
  int support_total = 80;
  int query_total = 10;
  int max_retries = 20;
  double sentpair_prob = 1.0 / 16.0;
  double frequency_share = 0.25;

  // [model]
  int dim = 64;
  int hidden = 64;
  int gen_hidden = 64;
  double inner_lr = 0.1;
  double embedding_scale = 0.1;
  std::vector<std::string> adapt{"enc1", "enc2", "head"};

  // [train]
  double outer_lr = 1e-3;
  int tasks_per_batch = 4;
  int adapt_steps = 7;
  long total_steps = 3000;
  long checkpoint_every = 0;
  int threads = 1;

  // [curriculum]
  bool curriculum = false;
  long refresh_interval = 5000;
  int sample_size = 32;
  int dynamic_clusters = 500;
  std::string lambda = "anneal";
  bool async_refresh = true;

  // [eval]
  long eval_tasks = 1000;
  int eval_classes = 4;
  std::vector<std::string> eval_distributions{"uniform", "intra-cluster", "inter-cluster", "sentcluster"};
  std::vector<int> k_values{8, 16, 32};
  int resamples = 10;
  int eval_steps = 7;
  int test_per_class = 20;

  SamplerConfig sampler_config() const {
    SamplerConfig c;
    c.n_choices = n_choices;
    c.support_total = support_total;
    c.query_total = query_total;
    c.max_retries = max_retries;
    return c;
  }
  int effective_min_sentences() const { return min_sentences > 0 ? min_sentences : sampler_config().max_class_need(); }

  ModelSpec model_spec(int vocab) const {
    ModelSpec s;
    s.vocab = vocab;
    s.dim = dim;
    s.hidden = hidden;
    s.gen_hidden = gen_hidden;
    s.adapt = {false, false, false};
    for (const auto& a : adapt)
      for (int l = 0; l < kLayers; ++l)
        if (a == layer_name(l)) s.adapt[static_cast<std::size_t>(l)] = true;
    return s;
  }
  InitConfig init_config() const {
    InitConfig c;
    c.inner_lr = inner_lr;
    c.embedding_scale = embedding_scale;
    return c;
  }
  TrainConfig train_config() const {
    TrainConfig t;
    t.outer_lr = outer_lr;
    t.tasks_per_batch = tasks_per_batch;
    t.adapt_steps = adapt_steps;
    t.total_steps = total_steps;
    t.seed = seed.value_or(0);
    t.checkpoint_every = checkpoint_every;
    t.threads = deterministic ? 1 : threads;
    return t;
  }
  CurriculumConfig curriculum_config() const {
    CurriculumConfig c;
    c.total_steps = total_steps;
    c.refresh_interval = refresh_interval;
    c.sample_size = sample_size;
    c.clusters = dynamic_clusters;
    c.lambda = LambdaMode::parse(lambda);
    c.async = !deterministic && async_refresh;
    c.seed = Rng::derive(seed.value_or(0), "curriculum");
    c.record_wall_time = !deterministic;
    return c;
  }
};

namespace detail {

inline std::string trim(std::string x) {
  auto b = x.find_first_not_of(" \t\r");
  auto e = x.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : x.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

/// One key of the schema: how to read and print it.
struct Field {
  std::string key;  ///< "section.name"
  std::string help;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <class I>
I parse_int(const std::string& v) {
  std::size_t used = 0;
  long long x = std::stoll(v, &used);
  if (used != v.size()) throw std::invalid_argument(v);
  return static_cast<I>(x);
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument(v);
}

inline std::vector<Field> schema(RunConfig& c) {
  std::vector<Field> f;
  auto str = [&f](std::string k, std::string h, std::string& x) {
    f.push_back({std::move(k), std::move(h), [&x](const std::string& v) { x = v; }, [&x] { return x; }});
  };
  auto num = [&f](std::string k, std::string h, auto& x) {
    using T = std::decay_t<decltype(x)>;
    f.push_back({std::move(k), std::move(h),
                 [&x](const std::string& v) {
                   if constexpr (std::is_floating_point_v<T>) {
                     x = parse_double(v, 0);
                   } else {
                     x = parse_int<T>(v);
                   }
                 },
                 [&x] {
                   if constexpr (std::is_floating_point_v<T>) return format_double(x);
                   else return std::to_string(x);
                 }});
  };
  auto flag = [&f](std::string k, std::string h, bool& x) {
    f.push_back({std::move(k), std::move(h), [&x](const std::string& v) { x = parse_bool(v); },
                 [&x] { return std::string(x ? "true" : "false"); }});
  };
  auto ints = [&f](std::string k, std::string h, std::vector<int>& x) {
    f.push_back({std::move(k), std::move(h),
                 [&x](const std::string& v) {
                   x.clear();
                   for (const auto& s : split_list(v)) x.push_back(parse_int<int>(s));
                 },
                 [&x] { return join(x); }});
  };
  auto strs = [&f](std::string k, std::string h, std::vector<std::string>& x) {
    f.push_back({std::move(k), std::move(h), [&x](const std::string& v) { x = split_list(v); }, [&x] { return join(x); }});
  };

  f.push_back({"run.seed", "master seed (required)",
               [&c](const std::string& v) { c.seed = parse_int<std::uint64_t>(v); },
               [&c] { return c.seed ? std::to_string(*c.seed) : std::string(); }});
  str("run.out_dir", "output directory", c.out_dir);
  flag("run.deterministic", "single-threaded, synchronous refresh", c.deterministic);

  strs("corpus.paths", "comma-separated text files", c.corpus_paths);
  str("corpus.synthetic", "synthetic spec file, or 'default'", c.synthetic);
  num("corpus.synthetic_seed", "seed of the synthetic generator", c.synthetic_seed);
  str("corpus.snapshot", "corpus snapshot to load", c.snapshot);
  num("corpus.min_sentences", "label eligibility threshold (0: support + query need)", c.min_sentences);
  flag("corpus.lowercase", "lowercase tokens", c.lowercase);
  str("corpus.doc_mode", "blank-line | whole-file", c.doc_mode);

  str("embeddings.source", "cooc | file", c.embedding_source);
  str("embeddings.path", "word-vector file when source = file", c.embedding_path);
  num("embeddings.dim", "co-occurrence embedding size", c.embedding_dim);
  num("embeddings.window", "co-occurrence window", c.embedding_window);

  num("clusters.words", "word clusters M", c.word_clusters);
  num("clusters.sentences", "sentence clusters", c.sentence_clusters);
  num("clusters.max_iters", "k-means iteration cap", c.kmeans_max_iters);
  num("clusters.tol", "k-means relative centroid shift tolerance", c.kmeans_tol);

  str("tasks.preset", "task distribution preset", c.preset);
  ints("tasks.n_choices", "class counts drawn per episode", c.n_choices);
  num("tasks.support_total", "support examples per task", c.support_total);
  num("tasks.query_total", "query examples per task", c.query_total);
  num("tasks.max_retries", "label redraws before giving up", c.max_retries);
  num("tasks.sentpair_prob", "probability of a sentence-pair episode", c.sentpair_prob);
  num("tasks.frequency_share", "Frequency weight inside the cluster preset", c.frequency_share);

  num("model.dim", "representation size", c.dim);
  num("model.hidden", "encoder hidden width", c.hidden);
  num("model.gen_hidden", "head-generator hidden width", c.gen_hidden);
  num("model.inner_lr", "initial per-layer inner rate", c.inner_lr);
  num("model.embedding_scale", "std of the initial embeddings", c.embedding_scale);
  strs("model.adapt", "layers adapted in the inner loop (enc1, enc2, head)", c.adapt);

  num("train.outer_lr", "outer Adam rate", c.outer_lr);
  num("train.tasks_per_batch", "episodes per outer step", c.tasks_per_batch);
  num("train.adapt_steps", "inner steps G", c.adapt_steps);
  num("train.total_steps", "outer steps", c.total_steps);
  num("train.checkpoint_every", "checkpoint period in steps (0: off)", c.checkpoint_every);
  num("train.threads", "parallel per-task gradients", c.threads);

  flag("curriculum.enabled", "use the dynamic curriculum", c.curriculum);
  num("curriculum.refresh_interval", "steps between reclusterings", c.refresh_interval);
  num("curriculum.sample_size", "sentences per word representation", c.sample_size);
  num("curriculum.clusters", "clusters of the dynamic distribution", c.dynamic_clusters);
  str("curriculum.lambda", "anneal | fixed:<x>", c.lambda);
  flag("curriculum.async", "refresh on a background thread", c.async_refresh);

  num("eval.n_tasks", "episodes per cross-eval cell", c.eval_tasks);
  num("eval.n_classes", "classes per evaluation episode", c.eval_classes);
  strs("eval.distributions", "cross-eval columns", c.eval_distributions);
  ints("eval.k_values", "shots per class in few-shot reports", c.k_values);
  num("eval.resamples", "k-shot sets per (task, k)", c.resamples);
  num("eval.steps", "fine-tuning steps per k-shot set", c.eval_steps);
  num("eval.test_per_class", "held-out test examples per class when a task has no test file", c.test_per_class);
  return f;
}

inline std::string env_name(const std::string& key) {
  std::string n = kEnvPrefix;
  for (char ch : key) n += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return n;
}

}  // namespace detail

/// Applies "key = value" text with optional [section] headers. Collects every problem
/// (unknown keys, unparsable values) and throws them together.
inline void apply_config_text(RunConfig& c, std::istream& in, std::vector<std::string>& errors) {
  auto fields = detail::schema(c);
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') {
        errors.push_back(where + "unterminated section header");
        continue;
      }
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      errors.push_back(where + "expected key = value");
      continue;
    }
    std::string key = detail::trim(line.substr(0, eq));
    if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
    const std::string val = detail::trim(line.substr(eq + 1));
    bool found = false;
    for (auto& f : fields) {
      if (f.key != key) continue;
      found = true;
      try {
        f.set(val);
      } catch (const std::exception&) {
        errors.push_back(where + "bad value '" + val + "' for " + key);
      }
    }
    if (!found) errors.push_back(where + "unknown key '" + key + "'");
  }
}

/// METATASK_<SECTION>_<KEY> variables override file values.
inline void apply_env(RunConfig& c, std::vector<std::string>& errors,
                      const std::function<const char*(const char*)>& getenv_fn = [](const char* n) { return std::getenv(n); }) {
  for (auto& f : detail::schema(c)) {
    const std::string name = detail::env_name(f.key);
    if (const char* v = getenv_fn(name.c_str())) {
      try {
        f.set(v);
      } catch (const std::exception&) {
        errors.push_back(name + ": bad value '" + std::string(v) + "' for " + f.key);
      }
    }
  }
}

/// Sets one key ("section.name") from a command-line override.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (auto& f : detail::schema(c))
    if (f.key == key) {
      try {
        f.set(value);
      } catch (const std::exception&) {
        throw ConfigError("bad value '" + value + "' for " + key);
      }
      return;
    }
  throw ConfigError("unknown key '" + key + "'");
}

/// Every violation of the schema's constraints, each naming its field.
inline std::vector<std::string> config_violations(const RunConfig& c, bool need_corpus = false) {
  std::vector<std::string> v;
  namespace fs = std::filesystem;
  if (!c.seed) v.push_back("run.seed is required");
  for (const auto& p : c.corpus_paths)
    if (!fs::exists(p)) v.push_back("corpus.paths: no such file '" + p + "'");
  if (!c.synthetic.empty() && c.synthetic != "default" && !fs::exists(c.synthetic))
    v.push_back("corpus.synthetic: no such file '" + c.synthetic + "'");
  if (!c.snapshot.empty() && !fs::exists(c.snapshot)) v.push_back("corpus.snapshot: no such file '" + c.snapshot + "'");
  if (need_corpus && c.corpus_paths.empty() && c.synthetic.empty() && c.snapshot.empty())
    v.push_back("corpus: one of corpus.paths, corpus.synthetic or corpus.snapshot is required");
  if (c.min_sentences < 0) v.push_back("corpus.min_sentences must be >= 0");
  if (c.doc_mode != "blank-line" && c.doc_mode != "whole-file") v.push_back("corpus.doc_mode must be blank-line or whole-file");
  if (c.embedding_source != "cooc" && c.embedding_source != "file") v.push_back("embeddings.source must be cooc or file");
  if (c.embedding_source == "file" && (c.embedding_path.empty() || !fs::exists(c.embedding_path)))
    v.push_back("embeddings.path: missing word-vector file '" + c.embedding_path + "'");
  if (c.embedding_dim < 1) v.push_back("embeddings.dim must be >= 1");
  if (c.embedding_window < 1) v.push_back("embeddings.window must be >= 1");
  if (c.word_clusters < 1) v.push_back("clusters.words must be >= 1");
  if (c.sentence_clusters < 1) v.push_back("clusters.sentences must be >= 1");
  if (c.kmeans_max_iters < 1) v.push_back("clusters.max_iters must be >= 1");
  if (!(c.kmeans_tol >= 0)) v.push_back("clusters.tol must be >= 0");
  bool known = false;
  for (const auto& n : preset_names()) known = known || n == c.preset;
  if (!known) v.push_back("tasks.preset: unknown preset '" + c.preset + "'");
  try {
    c.sampler_config().validate();
  } catch (const ConfigError& e) {
    for (const auto& x : e.violations()) v.push_back("tasks: " + x);
  }
  if (!(c.sentpair_prob >= 0 && c.sentpair_prob <= 1)) v.push_back("tasks.sentpair_prob must lie in [0,1]");
  if (!(c.frequency_share >= 0 && c.frequency_share <= 1)) v.push_back("tasks.frequency_share must lie in [0,1]");
  if (c.dim < 1 || c.hidden < 1 || c.gen_hidden < 1) v.push_back("model: dim, hidden and gen_hidden must be >= 1");
  if (!(c.inner_lr > 0)) v.push_back("model.inner_lr must be > 0");
  if (!(c.embedding_scale > 0)) v.push_back("model.embedding_scale must be > 0");
  for (const auto& a : c.adapt)
    if (a != "enc1" && a != "enc2" && a != "head") v.push_back("model.adapt: unknown layer '" + a + "'");
  try {
    c.train_config().validate();
  } catch (const ConfigError& e) {
    for (const auto& x : e.violations()) v.push_back(x);
  }
  if (c.refresh_interval < 1) v.push_back("curriculum.refresh_interval must be >= 1");
  if (c.sample_size < 1) v.push_back("curriculum.sample_size must be >= 1");
  if (c.dynamic_clusters < 1) v.push_back("curriculum.clusters must be >= 1");
  try {
    LambdaMode::parse(c.lambda);
  } catch (const ConfigError& e) {
    v.push_back(std::string("curriculum.lambda: ") + e.what());
  }
  if (c.eval_tasks < 1) v.push_back("eval.n_tasks must be >= 1");
  if (c.eval_classes < 2) v.push_back("eval.n_classes must be >= 2");
  for (const auto& d : c.eval_distributions) {
    bool ok = false;
    for (const auto& n : preset_names()) ok = ok || n == d;
    if (!ok) v.push_back("eval.distributions: unknown distribution '" + d + "'");
  }
  for (int k : c.k_values)
    if (k < 1) v.push_back("eval.k_values entries must be >= 1");
  if (c.resamples < 1) v.push_back("eval.resamples must be >= 1");
  if (c.eval_steps < 0) v.push_back("eval.steps must be >= 0");
  if (c.test_per_class < 1) v.push_back("eval.test_per_class must be >= 1");
  return v;
}

inline void validate_config(const RunConfig& c, bool need_corpus = false) {
  auto v = config_violations(c, need_corpus);
  if (!v.empty()) throw ConfigError(v);
}

/// File (optional), then environment. Parse problems are thrown together.
inline RunConfig load_run_config(const std::string& path,
                                 const std::function<const char*(const char*)>& getenv_fn = [](const char* n) { return std::getenv(n); }) {
  RunConfig c;
  std::vector<std::string> errors;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path);
    apply_config_text(c, in, errors);
  }
  apply_env(c, errors, getenv_fn);
  if (!errors.empty()) throw ConfigError(errors);
  return c;
}

/// The fully resolved configuration in the same format it is read from.
inline void write_run_config(const RunConfig& c, std::ostream& out) {
  RunConfig copy = c;
  std::string section;
  for (const auto& f : detail::schema(copy)) {
    const auto dot = f.key.find('.');
    const std::string s = f.key.substr(0, dot);
    if (s != section) {
      out << (section.empty() ? "" : "\n") << '[' << s << "]\n";
      section = s;
    }
    out << f.key.substr(dot + 1) << " = " << f.get() << '\n';
  }
}

/// Keys, defaults and help text for --help output.
inline std::string config_reference() {
  RunConfig c;
  std::ostringstream os;
  for (const auto& f : detail::schema(c))
    os << "  " << f.key << " = " << f.get() << "    # " << f.help << " (env " << detail::env_name(f.key) << ")\n";
  return os.str();
}

}  // namespace metatask
