#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "metatask/corpus.hpp"
#include "metatask/error.hpp"
#include "metatask/kmeans.hpp"
#include "metatask/metalearner.hpp"
#include "metatask/stats.hpp"
#include "metatask/synthetic.hpp"
#include "metatask/taskgen.hpp"

namespace metatask {

// ---------------------------------------------------------------------------
// Cross-distribution evaluation
// ---------------------------------------------------------------------------

enum class EvalMode { Proto, Adapted };

/// A model row. Untrained encoders use Proto; meta-trained ones are evaluated the way
/// they were trained (head generation plus `steps` inner updates).
struct NamedModel {
  std::string name;
  std::shared_ptr<const ModelParams> params;
  EvalMode mode = EvalMode::Adapted;
  int steps = 7;
};

struct NamedSampler {
  std::string name;
  SamplerPtr sampler;
};

struct EvalCell {
  double accuracy = 0;
  double std_error = 0;
  long episodes = 0;
  bool complete = true;
  std::string note;  ///< why the cell is incomplete

  friend bool operator==(const EvalCell&, const EvalCell&) = default;
};

struct CrossEvalMatrix {
  std::vector<std::string> rows;
  std::vector<std::string> columns;
  std::vector<std::vector<EvalCell>> cells;  ///< [row][column]
  std::vector<std::uint64_t> column_hash;    ///< combined hash of each column's episode stream

  const EvalCell& at(const std::string& row, const std::string& col) const {
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < columns.size(); ++c)
        if (rows[r] == row && columns[c] == col) return cells[r][c];
    throw ArgumentError("no cell (" + row + ", " + col + ")");
  }
  bool complete() const {
    for (const auto& r : cells)
      for (const auto& c : r)
        if (!c.complete) return false;
    return true;
  }
  friend bool operator==(const CrossEvalMatrix&, const CrossEvalMatrix&) = default;
};

inline double evaluate_episode(const NamedModel& m, const Episode& ep) {
  return m.mode == EvalMode::Proto ? proto_eval(*m.params, ep) : adapted_eval(*m.params, ep, m.steps);
}

/// Every row sees the same episodes in a column: one stream per column, named after it.
/// A column whose sampler runs dry keeps the episodes drawn so far and is marked incomplete.
inline CrossEvalMatrix cross_eval(const std::vector<NamedModel>& models, const std::vector<NamedSampler>& dists,
                                  long n_tasks, std::uint64_t seed) {
  if (n_tasks < 1) throw ArgumentError("n_tasks must be >= 1");
  CrossEvalMatrix out;
  for (const auto& m : models) {
    if (!m.params) throw ArgumentError("model '" + m.name + "' has no parameters");
    if (m.params->spec().vocab != models.front().params->spec().vocab)
      throw ArgumentError("models do not share a vocabulary");
    out.rows.push_back(m.name);
  }
  for (const auto& d : dists) out.columns.push_back(d.name);
  out.cells.assign(models.size(), std::vector<EvalCell>(dists.size()));
  out.column_hash.assign(dists.size(), 0);

  for (std::size_t c = 0; c < dists.size(); ++c) {
    Rng rng = Rng::stream(seed, "xeval/" + dists[c].name);
    std::vector<std::vector<double>> acc(models.size());
    std::uint64_t h = 1469598103934665603ULL;
    std::string note;
    for (long t = 0; t < n_tasks; ++t) {
      Episode ep;
      try {
        ep = dists[c].sampler->next_episode(rng);
      } catch (const ExhaustionError& e) {
        note = e.what();
        break;
      }
      h = (h ^ episode_hash(ep)) * 1099511628211ULL;
      for (std::size_t r = 0; r < models.size(); ++r) acc[r].push_back(evaluate_episode(models[r], ep));
    }
    out.column_hash[c] = h;
    for (std::size_t r = 0; r < models.size(); ++r) {
      EvalCell& cell = out.cells[r][c];
      cell.episodes = static_cast<long>(acc[r].size());
      cell.complete = note.empty();
      cell.note = note;
      if (!acc[r].empty()) {
        cell.accuracy = stats::mean(acc[r]);
        cell.std_error = acc[r].size() > 1 ? stats::stddev(acc[r]) / std::sqrt(static_cast<double>(acc[r].size())) : 0.0;
      }
    }
  }
  return out;
}

/// Evaluation columns: the named presets at a fixed class count and without SentPair mixing.
/// "sentpair" is always binary.
inline std::vector<NamedSampler> eval_columns(PresetInputs in, const std::vector<std::string>& names, int n_classes) {
  in.cfg.n_choices = {n_classes};
  in.sentpair_prob = 0.0;
  std::vector<NamedSampler> out;
  for (const auto& n : names) out.push_back({n, make_preset(n, in)});
  return out;
}

// ---------------------------------------------------------------------------
// Labeled datasets and few-shot reports
// ---------------------------------------------------------------------------

struct LabeledDataset {
  std::string name;
  std::vector<std::string> labels;
  std::vector<Example> examples;

  std::vector<std::vector<std::size_t>> by_class() const {
    std::vector<std::vector<std::size_t>> out(labels.size());
    for (std::size_t i = 0; i < examples.size(); ++i) out[static_cast<std::size_t>(examples[i].label)].push_back(i);
    return out;
  }
};

/// Token ids of a text under a fixed lexicon. "[SEP]" and "[MASK]" map to the reserved
/// ids; words outside the lexicon become UNK.
inline std::vector<TokenId> encode_text(std::string_view text, const Lexicon& lex) {
  std::vector<TokenId> out;
  std::size_t pos = 0;
  auto flush = [&](std::string_view piece) {
    for (const auto& w : tokenize(piece)) {
      const TokenId id = lex.find(w);
      out.push_back(id < 0 ? kUnkId : id);
    }
  };
  while (pos < text.size()) {
    const auto s = text.find(kSepText, pos), m = text.find(kMaskText, pos);
    const auto next = std::min(s, m);
    if (next == std::string_view::npos) {
      flush(text.substr(pos));
      break;
    }
    flush(text.substr(pos, next - pos));
    out.push_back(next == s ? kSepId : kMaskId);
    pos = next + (next == s ? kSepText.size() : kMaskText.size());
  }
  return out;
}

/// "labels: a b c" header, then one "label<TAB>text" record per line. Blank lines and
/// lines starting with '#' are skipped. Records without tokens are errors.
inline LabeledDataset read_labeled(std::istream& in, const Lexicon& lex, std::string name = {}) {
  LabeledDataset ds;
  ds.name = std::move(name);
  std::map<std::string, int> index;
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line.rfind("labels:", 0) != 0) throw FormatError(line_no, "expected 'labels:' header");
      std::istringstream ls(line.substr(7));
      std::string l;
      while (ls >> l) {
        if (index.count(l)) throw FormatError(line_no, "duplicate label '" + l + "'");
        index[l] = static_cast<int>(ds.labels.size());
        ds.labels.push_back(l);
      }
      if (ds.labels.size() < 2) throw FormatError(line_no, "need at least two labels");
      header = true;
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError(line_no, "expected label<TAB>text");
    auto it = index.find(line.substr(0, tab));
    if (it == index.end()) throw FormatError(line_no, "label '" + line.substr(0, tab) + "' not in header");
    Example ex;
    ex.tokens = encode_text(std::string_view(line).substr(tab + 1), lex);
    if (ex.tokens.empty()) throw FormatError(line_no, "record has no tokens");
    ex.label = it->second;
    ds.examples.push_back(std::move(ex));
  }
  if (!header) throw FormatError(line_no, "missing 'labels:' header");
  return ds;
}

inline LabeledDataset read_labeled_file(const std::string& path, const Lexicon& lex, std::string name = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  return read_labeled(in, lex, name.empty() ? path : std::move(name));
}

inline void write_labeled(const LabeledDataset& ds, const Lexicon& lex, std::ostream& out) {
  out << "labels:";
  for (const auto& l : ds.labels) out << ' ' << l;
  out << '\n';
  for (const auto& e : ds.examples) {
    out << ds.labels[static_cast<std::size_t>(e.label)] << '\t';
    for (std::size_t i = 0; i < e.tokens.size(); ++i) out << (i ? " " : "") << lex.word(e.tokens[i]);
    out << '\n';
  }
}

/// A downstream task: examples to draw k-shot sets from, and a fixed test set.
struct FewShotTask {
  std::string name;
  LabeledDataset train;
  LabeledDataset test;
};

/// Per-class split of a dataset into a train pool and a test set of `test_per_class`
/// examples per class.
inline FewShotTask split_task(const LabeledDataset& ds, int test_per_class, std::uint64_t seed) {
  FewShotTask t{ds.name, {ds.name, ds.labels, {}}, {ds.name, ds.labels, {}}};
  Rng rng = Rng::stream(seed, "split/" + ds.name);
  for (const auto& idx : ds.by_class()) {
    if (idx.size() <= static_cast<std::size_t>(test_per_class))
      throw PreconditionError("dataset '" + ds.name + "' has too few examples to split");
    auto order = rng.sample_indices(idx.size(), idx.size());
    for (std::size_t j = 0; j < order.size(); ++j)
      (j < static_cast<std::size_t>(test_per_class) ? t.test : t.train).examples.push_back(ds.examples[idx[order[j]]]);
  }
  return t;
}

/// Topic classification over sentences of a synthetic corpus: the bundled held-out task.
inline LabeledDataset synthetic_topic_dataset(const SyntheticCorpus& sc, int per_class, std::uint64_t seed) {
  const int topics = static_cast<int>(*std::max_element(sc.ledger.doc_topic.begin(), sc.ledger.doc_topic.end())) + 1;
  LabeledDataset ds;
  ds.name = "synthetic-topic";
  for (int t = 0; t < topics; ++t) ds.labels.push_back("topic" + std::to_string(t));
  std::vector<std::vector<SentId>> pool(static_cast<std::size_t>(topics));
  for (std::size_t s = 0; s < sc.ledger.sentence_topic.size(); ++s)
    pool[static_cast<std::size_t>(sc.ledger.sentence_topic[s])].push_back(static_cast<SentId>(s));
  Rng rng = Rng::stream(seed, "synthetic-topic");
  for (int t = 0; t < topics; ++t) {
    const auto& p = pool[static_cast<std::size_t>(t)];
    for (std::size_t i : rng.sample_indices(p.size(), std::min(p.size(), static_cast<std::size_t>(per_class))))
      ds.examples.push_back({sc.corpus.sentence(p[i]).tokens, t, {p[i]}});
  }
  return ds;
}

struct FewShotEntry {
  std::string task;
  int k = 0;
  double mean = 0;
  double std = 0;
  int resamples = 0;
  std::vector<double> accuracies;
  std::string skipped;  ///< reason when the task could not be run at this k

  friend bool operator==(const FewShotEntry&, const FewShotEntry&) = default;
};

struct FewShotReport {
  std::string model;
  std::vector<FewShotEntry> entries;

  friend bool operator==(const FewShotReport&, const FewShotReport&) = default;
};

struct FewShotConfig {
  std::vector<int> k_values{8, 16, 32};
  int resamples = 10;
  int steps = 7;
  std::uint64_t seed = 0;
};

/// For each task and k: `resamples` independent k-per-class sets, each fine-tuned from the
/// generated head and scored on the task's test set.
inline FewShotReport few_shot_report(const ModelParams& p, const std::vector<FewShotTask>& tasks, const FewShotConfig& cfg,
                                     std::string model_name = "model") {
  if (cfg.resamples < 1) throw ArgumentError("resamples must be >= 1");
  if (cfg.steps < 0) throw ArgumentError("steps must be >= 0");
  FewShotReport rep;
  rep.model = std::move(model_name);
  for (const auto& task : tasks) {
    const auto classes = task.train.by_class();
    for (int k : cfg.k_values) {
      FewShotEntry e;
      e.task = task.name;
      e.k = k;
      std::size_t smallest = classes.empty() ? 0 : classes.front().size();
      for (const auto& c : classes) smallest = std::min(smallest, c.size());
      if (k < 1) e.skipped = "k must be >= 1";
      else if (classes.size() < 2) e.skipped = "fewer than two classes";
      else if (smallest < static_cast<std::size_t>(k))
        e.skipped = "a class has " + std::to_string(smallest) + " training examples, k = " + std::to_string(k);
      else if (task.test.examples.empty()) e.skipped = "empty test set";
      if (!e.skipped.empty()) {
        rep.entries.push_back(std::move(e));
        continue;
      }
      for (int r = 0; r < cfg.resamples; ++r) {
        Rng rng = Rng::stream(cfg.seed, task.name + "/k" + std::to_string(k) + "/r" + std::to_string(r));
        std::vector<Example> shot;
        for (const auto& c : classes)
          for (std::size_t i : rng.sample_indices(c.size(), static_cast<std::size_t>(k))) shot.push_back(task.train.examples[c[i]]);
        e.accuracies.push_back(finetune_eval(p, shot, task.test.examples, static_cast<int>(classes.size()), cfg.steps));
      }
      e.resamples = cfg.resamples;
      e.mean = stats::mean(e.accuracies);
      e.std = e.accuracies.size() > 1 ? stats::stddev(e.accuracies) : 0.0;
      rep.entries.push_back(std::move(e));
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

inline void write_csv(const CrossEvalMatrix& m, std::ostream& out) {
  out << "model,distribution,accuracy,std_error,episodes,complete\n";
  for (std::size_t r = 0; r < m.rows.size(); ++r)
    for (std::size_t c = 0; c < m.columns.size(); ++c) {
      const auto& x = m.cells[r][c];
      out << m.rows[r] << ',' << m.columns[c] << ',' << format_double(x.accuracy) << ',' << format_double(x.std_error) << ','
          << x.episodes << ',' << (x.complete ? 1 : 0) << '\n';
    }
}

inline void write_csv(const FewShotReport& rep, std::ostream& out) {
  out << "model,task,k,mean,std,resamples,skipped\n";
  for (const auto& e : rep.entries)
    out << rep.model << ',' << e.task << ',' << e.k << ',' << format_double(e.mean) << ',' << format_double(e.std) << ','
        << e.resamples << ',' << (e.skipped.empty() ? "" : "\"" + e.skipped + "\"") << '\n';
}

inline nlohmann::json to_json(const CrossEvalMatrix& m) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& row : m.cells) {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& x : row)
      r.push_back({{"accuracy", x.accuracy},
                   {"std_error", x.std_error},
                   {"episodes", x.episodes},
                   {"complete", x.complete},
                   {"note", x.note}});
    cells.push_back(std::move(r));
  }
  return {{"rows", m.rows}, {"columns", m.columns}, {"cells", cells}, {"column_hash", m.column_hash}};
}

inline CrossEvalMatrix cross_eval_from_json(const nlohmann::json& j) {
  try {
    CrossEvalMatrix m;
    m.rows = j.at("rows").get<std::vector<std::string>>();
    m.columns = j.at("columns").get<std::vector<std::string>>();
    m.column_hash = j.at("column_hash").get<std::vector<std::uint64_t>>();
    for (const auto& r : j.at("cells")) {
      std::vector<EvalCell> row;
      for (const auto& x : r)
        row.push_back({x.at("accuracy").get<double>(), x.at("std_error").get<double>(), x.at("episodes").get<long>(),
                       x.at("complete").get<bool>(), x.at("note").get<std::string>()});
      m.cells.push_back(std::move(row));
    }
    if (m.cells.size() != m.rows.size()) throw FormatError(0, "cell rows do not match row names");
    for (const auto& r : m.cells)
      if (r.size() != m.columns.size()) throw FormatError(0, "cell columns do not match column names");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(0, std::string("bad cross-eval json: ") + e.what());
  }
}

inline nlohmann::json to_json(const FewShotReport& rep) {
  nlohmann::json es = nlohmann::json::array();
  for (const auto& e : rep.entries)
    es.push_back({{"task", e.task},
                  {"k", e.k},
                  {"mean", e.mean},
                  {"std", e.std},
                  {"resamples", e.resamples},
                  {"accuracies", e.accuracies},
                  {"skipped", e.skipped}});
  return {{"model", rep.model}, {"entries", es}};
}

inline FewShotReport few_shot_from_json(const nlohmann::json& j) {
  try {
    FewShotReport rep;
    rep.model = j.at("model").get<std::string>();
    for (const auto& x : j.at("entries"))
      rep.entries.push_back({x.at("task").get<std::string>(), x.at("k").get<int>(), x.at("mean").get<double>(),
                             x.at("std").get<double>(), x.at("resamples").get<int>(),
                             x.at("accuracies").get<std::vector<double>>(), x.at("skipped").get<std::string>()});
    return rep;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(0, std::string("bad few-shot json: ") + e.what());
  }
}

/// Accuracy-vs-k series per task, for external plotting.
inline nlohmann::json plot_data(const FewShotReport& rep) {
  std::vector<std::string> order;
  std::map<std::string, nlohmann::json> series;
  for (const auto& e : rep.entries) {
    if (!e.skipped.empty()) continue;
    if (!series.count(e.task)) {
      order.push_back(e.task);
      series[e.task] = {{"task", e.task}, {"x", nlohmann::json::array()}, {"y", nlohmann::json::array()}, {"err", nlohmann::json::array()}};
    }
    auto& s = series[e.task];
    s["x"].push_back(e.k);
    s["y"].push_back(e.mean);
    s["err"].push_back(e.std);
  }
  nlohmann::json out = {{"model", rep.model}, {"series", nlohmann::json::array()}};
  for (const auto& t : order) out["series"].push_back(series[t]);
  return out;
}

enum class ReportFormat { Csv, Json };

inline ReportFormat parse_format(const std::string& s) {
  if (s == "csv") return ReportFormat::Csv;
  if (s == "json") return ReportFormat::Json;
  throw ConfigError("report format must be csv or json, got '" + s + "'");
}

template <class Report>
void export_report(const Report& r, ReportFormat f, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  if (f == ReportFormat::Csv) write_csv(r, out);
  else out << to_json(r).dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace metatask
