#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"

#include "metatask/corpus.hpp"
#include "metatask/error.hpp"
#include "metatask/kmeans.hpp"
#include "metatask/rng.hpp"

namespace metatask {

enum class TaskKind { Uniform, Frequency, IntraCluster, InterCluster, SentCluster, SentPair, DynamicCluster };

inline const char* kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::Uniform: return "Uniform";
    case TaskKind::Frequency: return "Frequency";
    case TaskKind::IntraCluster: return "IntraCluster";
    case TaskKind::InterCluster: return "InterCluster";
    case TaskKind::SentCluster: return "SentCluster";
    case TaskKind::SentPair: return "SentPair";
    case TaskKind::DynamicCluster: return "DynamicCluster";
  }
  return "?";
}

inline TaskKind parse_kind(const std::string& s) {
  for (int i = 0; i <= static_cast<int>(TaskKind::DynamicCluster); ++i)
    if (s == kind_name(static_cast<TaskKind>(i))) return static_cast<TaskKind>(i);
  throw FormatError(0, "unknown task kind '" + s + "'");
}

inline bool is_smlmt(TaskKind k) {
  return k == TaskKind::Uniform || k == TaskKind::Frequency || k == TaskKind::IntraCluster ||
         k == TaskKind::InterCluster || k == TaskKind::DynamicCluster;
}

struct Example {
  std::vector<TokenId> tokens;
  int label = 0;
  std::vector<SentId> sources;  ///< one sentence, or two for sentence pairs

  friend bool operator==(const Example&, const Example&) = default;
};

struct Episode {
  TaskKind kind = TaskKind::Uniform;
  int n_classes = 0;
  int k_support = 0;  ///< per class
  int k_query = 0;    ///< per class
  std::vector<Example> support;
  std::vector<Example> query;
  std::vector<std::int32_t> meta;  ///< word id (SMLMT) or cluster id (SentCluster) per label

  friend bool operator==(const Episode&, const Episode&) = default;
};

struct SamplerConfig {
  std::vector<int> n_choices{2, 3, 4, 5};
  int support_total = 80;  ///< per task, divided among classes
  int query_total = 10;
  int k_support = 0;       ///< per class override when > 0
  int k_query = 0;
  int max_retries = 20;

  int support_per_class(int n) const { return k_support > 0 ? k_support : support_total / n; }
  int query_per_class(int n) const { return k_query > 0 ? k_query : (query_total + n - 1) / n; }

  /// Largest support+query need over the N choices; the natural eligibility threshold.
  int max_class_need() const {
    int m = 0;
    for (int n : n_choices) m = std::max(m, support_per_class(n) + query_per_class(n));
    return m;
  }

  void validate() const {
    std::vector<std::string> v;
    if (n_choices.empty()) v.push_back("n_choices is empty");
    for (int n : n_choices)
      if (n < 2) v.push_back("n_choices entries must be >= 2");
    if (k_support <= 0 && support_total < 1) v.push_back("support_total must be >= 1");
    if (k_query <= 0 && query_total < 1) v.push_back("query_total must be >= 1");
    for (int n : n_choices)
      if (n >= 2 && support_per_class(n) < 1) v.push_back("fewer than one support example per class at N=" + std::to_string(n));
    if (max_retries < 0) v.push_back("max_retries must be >= 0");
    if (!v.empty()) throw ConfigError(v);
  }
};

/// Corpus, vocabulary and index bundled for the samplers.
struct TaskContext {
  Corpus corpus;
  Vocabulary vocab;
  InvertedIndex index;
};

inline std::shared_ptr<const TaskContext> make_context(Corpus corpus, std::int32_t min_sentences) {
  auto ctx = std::make_shared<TaskContext>();
  ctx->corpus = std::move(corpus);
  ctx->vocab = build_vocabulary(ctx->corpus, min_sentences);
  ctx->index = build_index(ctx->corpus, ctx->vocab);
  return ctx;
}

// ---------------------------------------------------------------------------
// Label samplers
// ---------------------------------------------------------------------------

class UniformLabels {
 public:
  explicit UniformLabels(const Vocabulary& v) : words_(v.eligible_words()) {}
  std::vector<TokenId> draw(int n, Rng& rng) const {
    if (n < 1 || static_cast<std::size_t>(n) > words_.size())
      throw ExhaustionError("need " + std::to_string(n) + " eligible words, have " + std::to_string(words_.size()));
    std::vector<TokenId> out;
    for (std::size_t i : rng.sample_indices(words_.size(), static_cast<std::size_t>(n))) out.push_back(words_[i]);
    return out;
  }
  const std::vector<TokenId>& words() const { return words_; }

 private:
  std::vector<TokenId> words_;
};

/// Successive draws without replacement, weight log(1 + freq).
class LogFrequencyLabels {
 public:
  explicit LogFrequencyLabels(const Vocabulary& v) : words_(v.eligible_words()) {
    for (TokenId w : words_) weights_.push_back(std::log1p(static_cast<double>(v.freq[static_cast<std::size_t>(w)])));
  }
  std::vector<TokenId> draw(int n, Rng& rng) const {
    if (n < 1 || static_cast<std::size_t>(n) > words_.size())
      throw ExhaustionError("need " + std::to_string(n) + " eligible words, have " + std::to_string(words_.size()));
    std::vector<double> w = weights_;
    std::vector<TokenId> out;
    for (int i = 0; i < n; ++i) {
      const std::size_t j = rng.weighted_index(w);
      out.push_back(words_[j]);
      w[j] = 0.0;
    }
    return out;
  }
  const std::vector<TokenId>& words() const { return words_; }
  const std::vector<double>& weights() const { return weights_; }

 private:
  std::vector<TokenId> words_;
  std::vector<double> weights_;
};

namespace detail {
inline std::vector<std::vector<TokenId>> eligible_members(const Clustering& c, const Vocabulary& v) {
  std::vector<std::vector<TokenId>> out(static_cast<std::size_t>(c.k));
  for (std::size_t i = 0; i < c.items.size(); ++i)
    if (v.is_eligible(c.items[i])) out[static_cast<std::size_t>(c.assignment[i])].push_back(c.items[i]);
  return out;
}
}  // namespace detail

/// Cluster i with probability |C_i| / sum |C_t| over clusters holding >= N eligible words,
/// then N distinct words uniformly inside it.
class IntraClusterLabels {
 public:
  IntraClusterLabels(const Clustering& c, const Vocabulary& v) : members_(detail::eligible_members(c, v)) {}
  std::vector<TokenId> draw(int n, Rng& rng, int* cluster_out = nullptr) const {
    std::vector<double> w(members_.size(), 0.0);
    double total = 0;
    for (std::size_t i = 0; i < members_.size(); ++i)
      if (members_[i].size() >= static_cast<std::size_t>(n)) total += (w[i] = static_cast<double>(members_[i].size()));
    if (n < 1 || total <= 0) throw ExhaustionError("no cluster has " + std::to_string(n) + " eligible words");
    const std::size_t c = rng.weighted_index(w);
    if (cluster_out) *cluster_out = static_cast<int>(c);
    std::vector<TokenId> out;
    for (std::size_t i : rng.sample_indices(members_[c].size(), static_cast<std::size_t>(n))) out.push_back(members_[c][i]);
    return out;
  }
  const std::vector<std::vector<TokenId>>& members() const { return members_; }

 private:
  std::vector<std::vector<TokenId>> members_;
};

/// N distinct clusters drawn in proportion to eligible size without replacement,
/// one uniform eligible word from each.
class InterClusterLabels {
 public:
  InterClusterLabels(const Clustering& c, const Vocabulary& v) : members_(detail::eligible_members(c, v)) {}
  std::vector<TokenId> draw(int n, Rng& rng, std::vector<int>* clusters_out = nullptr) const {
    std::vector<double> w(members_.size());
    std::size_t nonempty = 0;
    for (std::size_t i = 0; i < members_.size(); ++i) {
      w[i] = static_cast<double>(members_[i].size());
      nonempty += members_[i].empty() ? 0 : 1;
    }
    if (n < 1 || nonempty < static_cast<std::size_t>(n))
      throw ExhaustionError("need " + std::to_string(n) + " nonempty clusters, have " + std::to_string(nonempty));
    std::vector<TokenId> out;
    if (clusters_out) clusters_out->clear();
    for (int i = 0; i < n; ++i) {
      const std::size_t c = rng.weighted_index(w);
      w[c] = 0.0;
      if (clusters_out) clusters_out->push_back(static_cast<int>(c));
      out.push_back(members_[c][rng.index(members_[c].size())]);
    }
    return out;
  }
  const std::vector<std::vector<TokenId>>& members() const { return members_; }

 private:
  std::vector<std::vector<TokenId>> members_;
};

inline std::vector<TokenId> sample_labels_uniform(const Vocabulary& v, int n, Rng& rng) {
  return UniformLabels(v).draw(n, rng);
}
inline std::vector<TokenId> sample_labels_log_frequency(const Vocabulary& v, int n, Rng& rng) {
  return LogFrequencyLabels(v).draw(n, rng);
}
inline std::vector<TokenId> sample_labels_intra_cluster(const Clustering& c, const Vocabulary& v, int n, Rng& rng) {
  return IntraClusterLabels(c, v).draw(n, rng);
}
inline std::vector<TokenId> sample_labels_inter_cluster(const Clustering& c, const Vocabulary& v, int n, Rng& rng) {
  return InterClusterLabels(c, v).draw(n, rng);
}

// ---------------------------------------------------------------------------
// Episode builders
// ---------------------------------------------------------------------------

/// One masked-word task. Label l is the l-th word of `labels`; sentences are
/// distinct across the whole episode.
inline Episode build_smlmt_task(const std::vector<TokenId>& labels, const InvertedIndex& index, const Corpus& corpus,
                                const Vocabulary& vocab, int k_support, int k_query, Rng& rng,
                                TaskKind kind = TaskKind::Uniform) {
  if (labels.empty()) throw ArgumentError("no labels");
  if (k_support < 1 || k_query < 1) throw ArgumentError("k_support and k_query must be >= 1");
  Episode ep;
  ep.kind = kind;
  ep.n_classes = static_cast<int>(labels.size());
  ep.k_support = k_support;
  ep.k_query = k_query;
  ep.meta.assign(labels.begin(), labels.end());
  const auto need = static_cast<std::size_t>(k_support + k_query);
  std::unordered_set<SentId> used;
  std::vector<SentId> cand;
  for (std::size_t l = 0; l < labels.size(); ++l) {
    auto post = index.postings(labels[l]);
    if (post.size() < need)
      throw ExhaustionError("word " + std::to_string(labels[l]) + " occurs in only " + std::to_string(post.size()) +
                            " sentences");
    cand.clear();
    for (SentId s : post)
      if (!used.count(s)) cand.push_back(s);
    if (cand.size() < need) throw ExhaustionError("not enough unused sentences for word " + std::to_string(labels[l]));
    auto pick = rng.sample_indices(cand.size(), need);
    for (std::size_t j = 0; j < need; ++j) {
      const SentId sid = cand[pick[j]];
      used.insert(sid);
      MaskedExample m = mask_sentence(corpus.sentence(sid), labels[l], vocab);
      Example ex{std::move(m.tokens), static_cast<int>(l), {sid}};
      (j < static_cast<std::size_t>(k_support) ? ep.support : ep.query).push_back(std::move(ex));
    }
  }
  return ep;
}

/// Sentence-cluster task: N qualifying clusters drawn uniformly, relabelled by a fresh permutation.
inline Episode build_sentcluster_task(const Clustering& sent_clusters, const Corpus& corpus, int n, int k_support,
                                      int k_query, Rng& rng) {
  if (n < 1 || k_support < 1 || k_query < 1) throw ArgumentError("bad episode shape");
  const auto need = static_cast<std::size_t>(k_support + k_query);
  std::vector<int> qualifying;
  for (int c = 0; c < sent_clusters.k; ++c)
    if (sent_clusters.members[static_cast<std::size_t>(c)].size() >= need) qualifying.push_back(c);
  if (qualifying.size() < static_cast<std::size_t>(n))
    throw ExhaustionError("need " + std::to_string(n) + " sentence clusters with " + std::to_string(need) +
                          " members, have " + std::to_string(qualifying.size()));
  auto picked = rng.sample_indices(qualifying.size(), static_cast<std::size_t>(n));
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  rng.shuffle(perm);

  Episode ep;
  ep.kind = TaskKind::SentCluster;
  ep.n_classes = n;
  ep.k_support = k_support;
  ep.k_query = k_query;
  ep.meta.assign(static_cast<std::size_t>(n), -1);
  for (int i = 0; i < n; ++i) ep.meta[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = qualifying[picked[static_cast<std::size_t>(i)]];
  for (int label = 0; label < n; ++label) {
    const auto& mem = sent_clusters.members[static_cast<std::size_t>(ep.meta[static_cast<std::size_t>(label)])];
    auto pick = rng.sample_indices(mem.size(), need);
    for (std::size_t j = 0; j < need; ++j) {
      const SentId sid = mem[pick[j]];
      Example ex{corpus.sentence(sid).tokens, label, {sid}};
      (j < static_cast<std::size_t>(k_support) ? ep.support : ep.query).push_back(std::move(ex));
    }
  }
  return ep;
}

/// Same-document sentence pairs. Label 1: both sentences from one document; label 0: from two documents.
/// Ordered pairs are unique within the episode.
inline Episode build_sentpair_task(const Corpus& corpus, int k_support, int k_query, Rng& rng) {
  if (k_support < 1 || k_query < 1) throw ArgumentError("bad episode shape");
  std::vector<DocId> multi;
  for (const auto& d : corpus.documents)
    if (d.count >= 2) multi.push_back(d.id);
  if (multi.size() < 2 || corpus.documents.size() < 2)
    throw ExhaustionError("sentence pairs need two documents with two sentences each");

  Episode ep;
  ep.kind = TaskKind::SentPair;
  ep.n_classes = 2;
  ep.k_support = k_support;
  ep.k_query = k_query;
  const auto need = static_cast<std::size_t>(k_support + k_query);
  std::set<std::pair<SentId, SentId>> seen;
  const std::size_t budget = 64 * need + 256;

  auto emit = [&](SentId a, SentId b, int label, std::size_t j) {
    Example ex;
    ex.tokens = corpus.sentence(a).tokens;
    ex.tokens.push_back(kSepId);
    const auto& tb = corpus.sentence(b).tokens;
    ex.tokens.insert(ex.tokens.end(), tb.begin(), tb.end());
    ex.label = label;
    ex.sources = {a, b};
    (j < static_cast<std::size_t>(k_support) ? ep.support : ep.query).push_back(std::move(ex));
  };

  for (int label = 0; label < 2; ++label) {
    std::size_t made = 0, tries = 0;
    while (made < need) {
      if (++tries > budget) throw ExhaustionError("could not draw enough distinct sentence pairs");
      SentId a, b;
      if (label == 1) {
        const Document& d = corpus.documents[static_cast<std::size_t>(multi[rng.index(multi.size())])];
        auto ij = rng.sample_indices(static_cast<std::size_t>(d.count), 2);
        a = d.first + static_cast<SentId>(ij[0]);
        b = d.first + static_cast<SentId>(ij[1]);
      } else {
        auto de = rng.sample_indices(corpus.documents.size(), 2);
        const Document& d1 = corpus.documents[de[0]];
        const Document& d2 = corpus.documents[de[1]];
        a = d1.first + static_cast<SentId>(rng.index(static_cast<std::size_t>(d1.count)));
        b = d2.first + static_cast<SentId>(rng.index(static_cast<std::size_t>(d2.count)));
      }
      if (!seen.insert({a, b}).second) continue;
      emit(a, b, label, made++);
    }
  }
  return ep;
}

// ---------------------------------------------------------------------------
// Validator
// ---------------------------------------------------------------------------

/// Returns every violation found; empty when the episode is valid.
/// `sent_clusters` enables the cluster-membership check for sentence-cluster episodes.
inline std::vector<std::string> validate_episode(const Episode& ep, const Corpus& corpus,
                                                 const Clustering* sent_clusters = nullptr) {
  std::vector<std::string> v;
  auto bad = [&v](std::string s) { v.push_back(std::move(s)); };
  const int n = ep.n_classes;
  if (n < 2) bad("n_classes < 2");
  if (ep.k_support < 1 || ep.k_query < 1) bad("k_support and k_query must be >= 1");
  if (ep.kind == TaskKind::SentPair && n != 2) bad("sentence-pair episodes are binary");
  if (!v.empty()) return v;

  std::vector<int> sc(static_cast<std::size_t>(n), 0), qc(static_cast<std::size_t>(n), 0);
  auto count = [&](const std::vector<Example>& xs, std::vector<int>& c, const char* part) {
    for (const auto& e : xs) {
      if (e.label < 0 || e.label >= n) bad(std::string(part) + " label out of range: " + std::to_string(e.label));
      else c[static_cast<std::size_t>(e.label)] += 1;
      if (e.tokens.empty()) bad(std::string(part) + " example has no tokens");
    }
  };
  count(ep.support, sc, "support");
  count(ep.query, qc, "query");
  for (int l = 0; l < n; ++l) {
    if (sc[static_cast<std::size_t>(l)] != ep.k_support)
      bad("label " + std::to_string(l) + " has " + std::to_string(sc[static_cast<std::size_t>(l)]) + " support examples");
    if (qc[static_cast<std::size_t>(l)] != ep.k_query)
      bad("label " + std::to_string(l) + " has " + std::to_string(qc[static_cast<std::size_t>(l)]) + " query examples");
  }

  const auto nsent = static_cast<SentId>(corpus.sentences.size());
  auto valid_src = [&](SentId s) { return s >= 0 && s < nsent; };

  if (ep.kind == TaskKind::SentPair) {
    std::set<std::pair<SentId, SentId>> sup, all;
    for (int part = 0; part < 2; ++part) {
      for (const auto& e : part ? ep.query : ep.support) {
        if (e.sources.size() != 2 || !valid_src(e.sources[0]) || !valid_src(e.sources[1])) {
          bad("pair example needs two valid source sentences");
          continue;
        }
        const auto& a = corpus.sentence(e.sources[0]);
        const auto& b = corpus.sentence(e.sources[1]);
        if (e.sources[0] == e.sources[1]) bad("pair uses the same sentence twice");
        const bool same = a.doc_id == b.doc_id;
        if (same != (e.label == 1)) bad("pair label disagrees with document membership");
        std::vector<TokenId> expect = a.tokens;
        expect.push_back(kSepId);
        expect.insert(expect.end(), b.tokens.begin(), b.tokens.end());
        if (e.tokens != expect) bad("pair tokens are not first + [SEP] + second");
        const std::pair<SentId, SentId> key{e.sources[0], e.sources[1]};
        if (!all.insert(key).second) {
          bad(part && sup.count(key) ? "pair appears in both support and query" : "duplicate pair");
        }
        if (!part) sup.insert(key);
      }
    }
    return v;
  }

  if (ep.meta.size() != static_cast<std::size_t>(n)) {
    bad("meta must name one word or cluster per label");
    return v;
  }
  {
    std::set<std::int32_t> distinct(ep.meta.begin(), ep.meta.end());
    if (distinct.size() != ep.meta.size()) bad("meta entries are not distinct");
  }
  std::unordered_set<SentId> sup_ids, all_ids;
  std::vector<int> lookup;
  if (ep.kind == TaskKind::SentCluster && sent_clusters) lookup = sent_clusters->dense_lookup(corpus.sentences.size());
  for (int part = 0; part < 2; ++part) {
    for (const auto& e : part ? ep.query : ep.support) {
      if (e.sources.size() != 1 || !valid_src(e.sources[0])) {
        bad("example needs exactly one valid source sentence");
        continue;
      }
      const SentId sid = e.sources[0];
      if (!all_ids.insert(sid).second)
        bad(part && sup_ids.count(sid) ? "sentence " + std::to_string(sid) + " in both support and query"
                                       : "sentence " + std::to_string(sid) + " used twice");
      if (!part) sup_ids.insert(sid);
      if (e.label < 0 || e.label >= n) continue;
      const auto& src = corpus.sentence(sid).tokens;
      if (is_smlmt(ep.kind)) {
        const TokenId w = ep.meta[static_cast<std::size_t>(e.label)];
        bool has_mask = false, ok = e.tokens.size() == src.size();
        for (std::size_t i = 0; ok && i < src.size(); ++i) {
          if (src[i] == w) {
            ok = e.tokens[i] == kMaskId;
            has_mask = true;
          } else {
            ok = e.tokens[i] == src[i];
          }
        }
        if (!ok) bad("example is not its source with exactly the label word masked");
        else if (!has_mask) bad("example carries no mask");
      } else if (ep.kind == TaskKind::SentCluster) {
        if (e.tokens != src) bad("sentence-cluster example differs from its source");
        if (std::find(e.tokens.begin(), e.tokens.end(), kMaskId) != e.tokens.end()) bad("sentence-cluster example carries a mask");
        if (!lookup.empty() && lookup[static_cast<std::size_t>(sid)] != ep.meta[static_cast<std::size_t>(e.label)])
          bad("sentence " + std::to_string(sid) + " is not in the cluster mapped to its label");
      }
    }
  }
  return v;
}

inline void check_episode(const Episode& ep, const Corpus& corpus, const Clustering* sent_clusters = nullptr) {
  auto v = validate_episode(ep, corpus, sent_clusters);
  if (!v.empty()) {
    std::string msg = std::string("invalid ") + kind_name(ep.kind) + " episode:";
    for (const auto& s : v) msg += " " + s + ";";
    throw ConsistencyError(msg);
  }
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

class TaskSampler {
 public:
  virtual ~TaskSampler() = default;
  /// Draws one episode; all randomness comes from `rng`.
  virtual Episode next_episode(Rng& rng) const = 0;
  virtual std::string name() const = 0;
};

using SamplerPtr = std::shared_ptr<const TaskSampler>;

enum class LabelStrategy { Uniform, Frequency, IntraCluster, InterCluster };

class SmlmtSampler : public TaskSampler {
 public:
  SmlmtSampler(std::shared_ptr<const TaskContext> ctx, LabelStrategy strategy, SamplerConfig cfg,
               std::shared_ptr<const Clustering> clusters = nullptr, std::optional<TaskKind> kind = std::nullopt)
      : ctx_(std::move(ctx)), strategy_(strategy), cfg_(std::move(cfg)), clusters_(std::move(clusters)) {
    cfg_.validate();
    switch (strategy_) {
      case LabelStrategy::Uniform:
        uniform_.emplace(ctx_->vocab);
        kind_ = TaskKind::Uniform;
        break;
      case LabelStrategy::Frequency:
        freq_.emplace(ctx_->vocab);
        kind_ = TaskKind::Frequency;
        break;
      case LabelStrategy::IntraCluster:
        if (!clusters_) throw ConfigError("intra-cluster sampling needs a word clustering");
        intra_.emplace(*clusters_, ctx_->vocab);
        kind_ = TaskKind::IntraCluster;
        break;
      case LabelStrategy::InterCluster:
        if (!clusters_) throw ConfigError("inter-cluster sampling needs a word clustering");
        inter_.emplace(*clusters_, ctx_->vocab);
        kind_ = TaskKind::InterCluster;
        break;
    }
    if (kind) kind_ = *kind;
  }

  std::vector<TokenId> draw_labels(int n, Rng& rng) const {
    switch (strategy_) {
      case LabelStrategy::Uniform: return uniform_->draw(n, rng);
      case LabelStrategy::Frequency: return freq_->draw(n, rng);
      case LabelStrategy::IntraCluster: return intra_->draw(n, rng);
      case LabelStrategy::InterCluster: return inter_->draw(n, rng);
    }
    return {};
  }

  Episode next_episode(Rng& rng) const override {
    const int n = cfg_.n_choices[rng.index(cfg_.n_choices.size())];
    return episode_with_n(n, rng);
  }

  /// Episode with a fixed class count (evaluation uses N = 4).
  Episode episode_with_n(int n, Rng& rng) const {
    const int ks = cfg_.support_per_class(n), kq = cfg_.query_per_class(n);
    std::string last;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      try {
        auto labels = draw_labels(n, rng);
        Episode ep = build_smlmt_task(labels, ctx_->index, ctx_->corpus, ctx_->vocab, ks, kq, rng, kind_);
        return ep;
      } catch (const ExhaustionError& e) {
        last = e.what();
      }
    }
    throw DistributionExhaustedError(std::string(kind_name(kind_)) + " sampler exhausted after " +
                                     std::to_string(cfg_.max_retries) + " retries: " + last);
  }

  std::string name() const override { return kind_name(kind_); }
  TaskKind kind() const { return kind_; }
  const SamplerConfig& config() const { return cfg_; }
  const TaskContext& context() const { return *ctx_; }

 private:
  std::shared_ptr<const TaskContext> ctx_;
  LabelStrategy strategy_;
  SamplerConfig cfg_;
  std::shared_ptr<const Clustering> clusters_;
  TaskKind kind_ = TaskKind::Uniform;
  std::optional<UniformLabels> uniform_;
  std::optional<LogFrequencyLabels> freq_;
  std::optional<IntraClusterLabels> intra_;
  std::optional<InterClusterLabels> inter_;
};

class SentClusterSampler : public TaskSampler {
 public:
  SentClusterSampler(std::shared_ptr<const TaskContext> ctx, std::shared_ptr<const Clustering> sent_clusters,
                     SamplerConfig cfg)
      : ctx_(std::move(ctx)), clusters_(std::move(sent_clusters)), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (!clusters_) throw ConfigError("sentence-cluster sampling needs a sentence clustering");
  }
  Episode next_episode(Rng& rng) const override {
    const int n = cfg_.n_choices[rng.index(cfg_.n_choices.size())];
    return episode_with_n(n, rng);
  }
  Episode episode_with_n(int n, Rng& rng) const {
    try {
      return build_sentcluster_task(*clusters_, ctx_->corpus, n, cfg_.support_per_class(n), cfg_.query_per_class(n), rng);
    } catch (const ExhaustionError& e) {
      // a redraw cannot create qualifying clusters
      throw DistributionExhaustedError(std::string("SentCluster sampler exhausted: ") + e.what());
    }
  }
  std::string name() const override { return "SentCluster"; }
  const Clustering& clustering() const { return *clusters_; }

 private:
  std::shared_ptr<const TaskContext> ctx_;
  std::shared_ptr<const Clustering> clusters_;
  SamplerConfig cfg_;
};

class SentPairSampler : public TaskSampler {
 public:
  SentPairSampler(std::shared_ptr<const TaskContext> ctx, SamplerConfig cfg) : ctx_(std::move(ctx)), cfg_(std::move(cfg)) {
    cfg_.validate();
  }
  Episode next_episode(Rng& rng) const override {
    std::string last;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      try {
        return build_sentpair_task(ctx_->corpus, cfg_.support_per_class(2), cfg_.query_per_class(2), rng);
      } catch (const ExhaustionError& e) {
        last = e.what();
      }
    }
    throw DistributionExhaustedError("SentPair sampler exhausted: " + last);
  }
  std::string name() const override { return "SentPair"; }

 private:
  std::shared_ptr<const TaskContext> ctx_;
  SamplerConfig cfg_;
};

/// Flips sentpair_prob first; otherwise picks a component by weight.
class MixtureSampler : public TaskSampler {
 public:
  MixtureSampler(std::vector<std::pair<SamplerPtr, double>> components, double sentpair_prob, SamplerPtr sentpair)
      : sentpair_prob_(sentpair_prob), sentpair_(std::move(sentpair)) {
    std::vector<std::string> v;
    if (components.empty() && sentpair_prob < 1.0) v.push_back("mixture has no components");
    if (!(sentpair_prob >= 0.0 && sentpair_prob <= 1.0)) v.push_back("sentpair_prob must lie in [0,1]");
    if (sentpair_prob > 0.0 && !sentpair_) v.push_back("sentpair_prob > 0 needs a sentence-pair sampler");
    double total = 0;
    for (auto& [s, w] : components) {
      if (!s) v.push_back("null mixture component");
      if (!(w >= 0.0) || !std::isfinite(w)) v.push_back("mixture weights must be finite and >= 0");
      else total += w;
    }
    if (!components.empty() && !(total > 0)) v.push_back("mixture weights sum to zero");
    if (!v.empty()) throw ConfigError(v);
    for (auto& [s, w] : components) {
      samplers_.push_back(s);
      weights_.push_back(w / total);
    }
  }

  Episode next_episode(Rng& rng) const override {
    if (sentpair_prob_ > 0.0 && rng.bernoulli(sentpair_prob_)) return sentpair_->next_episode(rng);
    return samplers_[rng.weighted_index(weights_)]->next_episode(rng);
  }
  std::string name() const override { return "Mixture"; }
  const std::vector<double>& weights() const { return weights_; }
  double sentpair_prob() const { return sentpair_prob_; }

 private:
  std::vector<SamplerPtr> samplers_;
  std::vector<double> weights_;
  double sentpair_prob_;
  SamplerPtr sentpair_;
};

inline SamplerPtr make_mixture_sampler(std::vector<std::pair<SamplerPtr, double>> components, double sentpair_prob,
                                       SamplerPtr sentpair) {
  return std::make_shared<MixtureSampler>(std::move(components), sentpair_prob, std::move(sentpair));
}

inline Episode next_episode(const TaskSampler& s, Rng& rng) { return s.next_episode(rng); }

/// Inputs for the named sampler presets.
struct PresetInputs {
  std::shared_ptr<const TaskContext> ctx;
  std::shared_ptr<const Clustering> word_clusters;  ///< required by cluster presets
  std::shared_ptr<const Clustering> sent_clusters;  ///< required by sentcluster presets
  SamplerConfig cfg;
  double sentpair_prob = 1.0 / 16.0;
  double frequency_share = 0.25;  ///< Frequency weight inside the cluster preset
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"uniform", "frequency", "cluster", "intra-cluster",
                                                 "inter-cluster", "sentcluster", "sentpair", "mix"};
  return names;
}

/// Named distributions. Every preset except "sentpair" wraps its components in a
/// mixture with the given sentpair_prob (0 gives the pure distribution).
inline SamplerPtr make_preset(const std::string& name, const PresetInputs& in) {
  auto smlmt = [&](LabelStrategy s) { return std::make_shared<SmlmtSampler>(in.ctx, s, in.cfg, in.word_clusters); };
  SamplerPtr pair = std::make_shared<SentPairSampler>(in.ctx, in.cfg);
  std::vector<std::pair<SamplerPtr, double>> comps;
  if (name == "uniform") {
    comps = {{smlmt(LabelStrategy::Uniform), 1.0}};
  } else if (name == "frequency") {
    comps = {{smlmt(LabelStrategy::Frequency), 1.0}};
  } else if (name == "cluster") {
    comps = {{smlmt(LabelStrategy::IntraCluster), 1.0 - in.frequency_share},
             {smlmt(LabelStrategy::Frequency), in.frequency_share}};
  } else if (name == "intra-cluster") {
    comps = {{smlmt(LabelStrategy::IntraCluster), 1.0}};
  } else if (name == "inter-cluster") {
    comps = {{smlmt(LabelStrategy::InterCluster), 1.0}};
  } else if (name == "sentcluster") {
    comps = {{std::make_shared<SentClusterSampler>(in.ctx, in.sent_clusters, in.cfg), 1.0}};
  } else if (name == "sentpair") {
    return pair;
  } else if (name == "mix") {
    comps = {{smlmt(LabelStrategy::Uniform), 0.25},
             {smlmt(LabelStrategy::Frequency), 0.25},
             {smlmt(LabelStrategy::IntraCluster), 0.25},
             {std::make_shared<SentClusterSampler>(in.ctx, in.sent_clusters, in.cfg), 0.25}};
  } else {
    throw ConfigError("unknown task distribution '" + name + "'");
  }
  return make_mixture_sampler(std::move(comps), in.sentpair_prob, in.sentpair_prob > 0 ? pair : nullptr);
}

// ---------------------------------------------------------------------------
// Episode files: one JSON object per line.
// ---------------------------------------------------------------------------

inline constexpr int kEpisodeFormatVersion = 1;

inline nlohmann::json episode_to_json(const Episode& ep) {
  auto examples = [](const std::vector<Example>& xs) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& e : xs) a.push_back({{"tokens", e.tokens}, {"label", e.label}, {"src", e.sources}});
    return a;
  };
  return {{"version", kEpisodeFormatVersion},
          {"kind", kind_name(ep.kind)},
          {"n", ep.n_classes},
          {"k_support", ep.k_support},
          {"k_query", ep.k_query},
          {"meta", ep.meta},
          {"support", examples(ep.support)},
          {"query", examples(ep.query)}};
}

inline Episode episode_from_json(const nlohmann::json& j) {
  if (j.at("version").get<int>() != kEpisodeFormatVersion) throw FormatError(0, "unsupported episode version");
  Episode ep;
  ep.kind = parse_kind(j.at("kind").get<std::string>());
  ep.n_classes = j.at("n").get<int>();
  ep.k_support = j.at("k_support").get<int>();
  ep.k_query = j.at("k_query").get<int>();
  ep.meta = j.at("meta").get<std::vector<std::int32_t>>();
  auto read = [](const nlohmann::json& a, std::vector<Example>& out) {
    for (const auto& e : a)
      out.push_back({e.at("tokens").get<std::vector<TokenId>>(), e.at("label").get<int>(),
                     e.at("src").get<std::vector<SentId>>()});
  };
  read(j.at("support"), ep.support);
  read(j.at("query"), ep.query);
  return ep;
}

inline void write_episode(const Episode& ep, std::ostream& out) { out << episode_to_json(ep).dump() << '\n'; }

/// Reads every episode; each is validated against `corpus` when one is given.
inline std::vector<Episode> read_episodes(std::istream& in, const Corpus* corpus = nullptr,
                                          const Clustering* sent_clusters = nullptr) {
  std::vector<Episode> out;
  std::string line;
  std::size_t ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (line.empty()) continue;
    try {
      out.push_back(episode_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(ln, e.what());
    } catch (const FormatError& e) {
      throw FormatError(ln, e.what());
    }
    if (corpus) {
      auto v = validate_episode(out.back(), *corpus, sent_clusters);
      if (!v.empty()) throw FormatError(ln, "invalid episode: " + v.front());
    }
  }
  return out;
}

inline void write_episodes_file(const std::vector<Episode>& eps, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& e : eps) write_episode(e, out);
}

/// Stable 64-bit hash of an episode's content (used to prove paired evaluation).
inline std::uint64_t episode_hash(const Episode& ep) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 1099511628211ULL;
    }
  };
  mix(static_cast<std::uint64_t>(ep.kind));
  mix(static_cast<std::uint64_t>(ep.n_classes));
  for (auto m : ep.meta) mix(static_cast<std::uint64_t>(m));
  for (const auto* part : {&ep.support, &ep.query})
    for (const auto& e : *part) {
      mix(static_cast<std::uint64_t>(e.label));
      mix(e.tokens.size());
      for (TokenId t : e.tokens) mix(static_cast<std::uint64_t>(t));
    }
  return h;
}

}  // namespace metatask
