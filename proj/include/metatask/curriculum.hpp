#pragma once

#include <chrono>
#include <fstream>
#include <future>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "metatask/kmeans.hpp"
#include "metatask/log.hpp"
#include "metatask/metalearner.hpp"
#include "metatask/taskgen.hpp"

namespace metatask {

/// Linear anneal t / total_steps; steps past the end clamp to 1 with a warning.
inline double lambda_schedule(long t, long total_steps) {
  if (total_steps <= 0) throw ArgumentError("total_steps must be > 0");
  if (t < 0) throw ArgumentError("step must be >= 0");
  if (t > total_steps) {
    warn("step " + std::to_string(t) + " is past total_steps " + std::to_string(total_steps) + "; lambda clamped to 1");
    return 1.0;
  }
  return static_cast<double>(t) / static_cast<double>(total_steps);
}

struct WordRepresentation {
  TokenId word = 0;
  Vector vec;
  int sample_size = 0;
};

/// Average encoding of (up to sample_size) masked sentences of each word.
inline std::vector<WordRepresentation> compute_word_reps(const ModelParams& params, const InvertedIndex& index,
                                                         const Corpus& corpus, const Vocabulary& vocab,
                                                         std::span<const TokenId> words, int sample_size, Rng& rng) {
  if (sample_size < 1) throw ArgumentError("sample_size must be >= 1");
  std::vector<WordRepresentation> out;
  out.reserve(words.size());
  std::vector<Example> xs;
  for (TokenId w : words) {
    if (!vocab.is_eligible(w)) throw PreconditionError("word " + std::to_string(w) + " is not eligible");
    auto post = index.postings(w);
    const std::size_t n = std::min(post.size(), static_cast<std::size_t>(sample_size));
    xs.clear();
    for (std::size_t i : rng.sample_indices(post.size(), n))
      xs.push_back({mask_sentence(corpus.sentence(post[i]), w, vocab).tokens, 0, {post[i]}});
    Matrix F = encode_batch(params, xs);
    out.push_back({w, F.colwise().mean().transpose(), static_cast<int>(n)});
  }
  return out;
}

/// k-means over the representations of every eligible word under a frozen snapshot.
inline Clustering refresh_dynamic(const ModelParams& snapshot, const TaskContext& ctx, int k, int sample_size,
                                  std::uint64_t seed) {
  const auto words = ctx.vocab.eligible_words();
  if (k < 1 || static_cast<std::size_t>(k) > words.size())
    throw ArgumentError("k = " + std::to_string(k) + " exceeds " + std::to_string(words.size()) + " eligible words");
  Rng rng = Rng::stream(seed, "word-reps");
  auto reps = compute_word_reps(snapshot, ctx.index, ctx.corpus, ctx.vocab, words, sample_size, rng);
  Matrix pts(static_cast<Eigen::Index>(reps.size()), snapshot.spec().dim);
  std::vector<std::int32_t> ids;
  for (std::size_t i = 0; i < reps.size(); ++i) {
    pts.row(static_cast<Eigen::Index>(i)) = reps[i].vec.transpose();
    ids.push_back(reps[i].word);
  }
  return kmeans(pts, std::move(ids), k, Rng::derive(seed, "dynamic-kmeans"));
}

struct LambdaMode {
  bool anneal = true;
  double fixed = 0.0;

  static LambdaMode parse(const std::string& s) {
    if (s == "anneal") return {};
    if (s.rfind("fixed:", 0) == 0) {
      LambdaMode m;
      m.anneal = false;
      try {
        m.fixed = std::stod(s.substr(6));
      } catch (const std::exception&) {
        throw ConfigError("bad lambda mode '" + s + "'");
      }
      if (!(m.fixed >= 0 && m.fixed <= 1)) throw ConfigError("fixed lambda must lie in [0,1]");
      return m;
    }
    throw ConfigError("lambda mode must be 'anneal' or 'fixed:<x>', got '" + s + "'");
  }
  std::string str() const { return anneal ? "anneal" : "fixed:" + format_double(fixed); }
};

struct CurriculumConfig {
  long total_steps = 0;
  long refresh_interval = 5000;
  int sample_size = 32;
  int clusters = 500;
  LambdaMode lambda;
  bool async = true;  ///< false: refresh synchronously at the snapshot step (same install schedule)
  std::uint64_t seed = 0;
  std::string audit_path;  ///< optional JSONL audit log
  bool record_wall_time = true;  ///< false writes 0 so audit files are reproducible
};

struct RefreshRecord {
  long step = 0;           ///< step at which the clustering was installed
  long snapshot_step = 0;  ///< step of the parameter snapshot it was computed from
  int k = 0;
  double inertia = 0;
  double wall_seconds = 0;  ///< time spent computing it
};

/// T ~ lambda_t * D_t + (1 - lambda_t) * S, where D_t is intra-cluster sampling over
/// clusters of model word representations refreshed every refresh_interval steps.
class Curriculum : public EpisodeSource {
 public:
  Curriculum(std::shared_ptr<const TaskContext> ctx, SamplerPtr static_sampler, SamplerConfig dyn_cfg, CurriculumConfig cfg)
      : ctx_(std::move(ctx)), static_(std::move(static_sampler)), dyn_cfg_(std::move(dyn_cfg)), cfg_(std::move(cfg)) {
    std::vector<std::string> v;
    if (!static_) v.push_back("curriculum needs a static sampler");
    if (cfg_.total_steps <= 0 && cfg_.lambda.anneal) v.push_back("curriculum.total_steps must be > 0");
    if (cfg_.refresh_interval < 1) v.push_back("curriculum.refresh_interval must be >= 1");
    if (cfg_.sample_size < 1) v.push_back("curriculum.sample_size must be >= 1");
    if (cfg_.clusters < 1) v.push_back("curriculum.clusters must be >= 1");
    if (!v.empty()) throw ConfigError(v);
    if (!cfg_.audit_path.empty()) {
      audit_.open(cfg_.audit_path, std::ios::binary);
      if (!audit_) throw IoError("cannot write " + cfg_.audit_path);
    }
  }
  ~Curriculum() override { finish(); }

  void begin_step(long t, const ModelParams& params) override {
    step_ = t;
    lambda_ = cfg_.lambda.anneal ? lambda_schedule(t, cfg_.total_steps) : cfg_.lambda.fixed;
    if (t % cfg_.refresh_interval != 0) return;
    if (pending_) install(t);
    // Snapshots whose install step lies past the end of training are skipped.
    if (cfg_.total_steps > 0 && t + cfg_.refresh_interval >= cfg_.total_steps) return;
    launch(t, params);
  }

  Episode next(Rng& rng) override {
    if (dynamic_ && lambda_ > 0.0 && rng.bernoulli(lambda_)) return dynamic_->next_episode(rng);
    return static_->next_episode(rng);
  }

  double lambda() const override { return lambda_; }

  void finish() override {
    if (pending_ && pending_->future.valid()) pending_->future.wait();
    pending_.reset();
  }

  /// Direct control for tests: fixes lambda regardless of the schedule.
  void set_lambda(double l) { lambda_ = l; }
  /// Installs a clustering computed elsewhere (tests).
  void install_clustering(std::shared_ptr<const Clustering> c, long snapshot_step) {
    dynamic_clusters_ = std::move(c);
    dynamic_ = std::make_shared<SmlmtSampler>(ctx_, LabelStrategy::IntraCluster, dyn_cfg_, dynamic_clusters_,
                                              TaskKind::DynamicCluster);
    installed_snapshot_ = snapshot_step;
  }

  bool has_dynamic() const { return static_cast<bool>(dynamic_); }
  long installed_snapshot_step() const { return installed_snapshot_; }
  const std::vector<RefreshRecord>& audit() const { return records_; }
  std::shared_ptr<const Clustering> dynamic_clustering() const { return dynamic_clusters_; }
  const CurriculumConfig& config() const { return cfg_; }

 private:
  struct Pending {
    long snapshot_step = 0;
    std::future<Clustering> future;
    std::shared_ptr<double> seconds;
  };

  void launch(long t, const ModelParams& params) {
    auto p = std::make_unique<Pending>();
    p->snapshot_step = t;
    const std::uint64_t seed = Rng::derive(cfg_.seed, "refresh-" + std::to_string(t));
    auto ctx = ctx_;
    const int k = cfg_.clusters, ss = cfg_.sample_size;
    p->seconds = std::make_shared<double>(0.0);
    auto secs = p->seconds;
    auto job = [snapshot = params, ctx, k, ss, seed, secs]() {
      auto t0 = std::chrono::steady_clock::now();
      Clustering c = refresh_dynamic(snapshot, *ctx, k, ss, seed);
      *secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      return c;
    };
    if (cfg_.async) {
      p->future = std::async(std::launch::async, std::move(job));
    } else {
      std::promise<Clustering> pr;
      pr.set_value(job());
      p->future = pr.get_future();
    }
    pending_ = std::move(p);
  }

  void install(long t) {
    Clustering c = pending_->future.get();
    RefreshRecord r;
    r.step = t;
    r.snapshot_step = pending_->snapshot_step;
    r.k = c.k;
    r.inertia = c.inertia;
    r.wall_seconds = cfg_.record_wall_time ? *pending_->seconds : 0.0;
    install_clustering(std::make_shared<const Clustering>(std::move(c)), pending_->snapshot_step);
    pending_.reset();
    records_.push_back(r);
    if (audit_) {
      audit_ << nlohmann::json{{"step", r.step},
                               {"snapshot_step", r.snapshot_step},
                               {"k", r.k},
                               {"inertia", r.inertia},
                               {"wall_seconds", r.wall_seconds}}
                    .dump()
             << '\n';
      audit_.flush();
    }
  }

  std::shared_ptr<const TaskContext> ctx_;
  SamplerPtr static_;
  SamplerConfig dyn_cfg_;
  CurriculumConfig cfg_;
  long step_ = 0;
  double lambda_ = 0.0;
  std::shared_ptr<const Clustering> dynamic_clusters_;
  std::shared_ptr<const SmlmtSampler> dynamic_;
  long installed_snapshot_ = -1;
  std::unique_ptr<Pending> pending_;
  std::vector<RefreshRecord> records_;
  std::ofstream audit_;
};

inline Episode sample_curriculum_task(Curriculum& state, Rng& rng) { return state.next(rng); }

}  // namespace metatask
