// Acceptance suite: one PASS/FAIL line per criterion, tolerances fixed below.
//
//   acceptance --workdir DIR --cli PATH [--only 1,4,9]
//
// Exit status is 0 only when every selected criterion passes.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "metatask/analysis.hpp"
#include "metatask/curriculum.hpp"
#include "metatask/embeddings.hpp"
#include "metatask/stats.hpp"
#include "metatask/synthetic.hpp"
#include "metatask/trainer.hpp"

using namespace metatask;
namespace fs = std::filesystem;

namespace {

// ---- pinned tolerances --------------------------------------------------------

constexpr long kMarginalDraws = 100000;
constexpr double kMinPValue = 0.01;
constexpr long kFuzzEpisodes = 10000;
constexpr double kMaxGradRelError = 1e-4;
constexpr int kGradInstances = 20;
constexpr long kTrainSteps = 3000;
constexpr long kEvalEpisodes = 1000;
constexpr double kChance4 = 0.25;
constexpr double kBaselineBand = 0.03;
constexpr double kLearningGain = 0.25;
constexpr double kIntraInterGap = 0.05;
constexpr double kScMargin = 0.20;     // SMLMT-trained models must beat chance by this on the sentcluster column
constexpr double kScTolerance = 0.05;  // sentcluster-trained row may sit this far above chance + margin
constexpr long kMixtureEpisodes = 10000;
constexpr double kFixedLambda = 0.3;
constexpr double kMixtureBand = 0.03;
constexpr long kThroughputSteps = 1200;
constexpr long kThroughputInterval = 300;
constexpr double kMinThroughputRatio = 0.9;
constexpr int kKMeansInstances = 100;
constexpr double kSentPairGain = 0.05;

// ---- shared fixtures ----------------------------------------------------------

struct World {
  SyntheticCorpus train_sc, heldout_sc;
  std::shared_ptr<const TaskContext> ctx, hctx;
  std::shared_ptr<const Clustering> words, sents, hwords, hsents;
};

constexpr int kWordClusters = 10;
constexpr int kSentClusters = 20;
constexpr std::int32_t kMinSentences = 45;

World& world() {
  static World w = [] {
    World x;
    x.train_sc = gen_synthetic(SyntheticSpec{}, 1);
    x.heldout_sc = gen_synthetic(SyntheticSpec{}, 2);
    x.ctx = make_context(x.train_sc.corpus, kMinSentences);
    x.hctx = make_context(x.heldout_sc.corpus, kMinSentences);
    auto emb = cooc_embeddings(x.ctx->corpus, x.ctx->vocab, 32, 5, 3);
    x.words = std::make_shared<const Clustering>(cluster_words(emb, x.ctx->vocab, kWordClusters, 5));
    x.sents = std::make_shared<const Clustering>(cluster_sentences(x.ctx->corpus, emb, kSentClusters, 5));
    auto hemb = cooc_embeddings(x.hctx->corpus, x.hctx->vocab, 32, 5, 3);
    x.hwords = std::make_shared<const Clustering>(cluster_words(hemb, x.hctx->vocab, kWordClusters, 5));
    x.hsents = std::make_shared<const Clustering>(cluster_sentences(x.hctx->corpus, hemb, kSentClusters, 5));
    return x;
  }();
  return w;
}

PresetInputs train_inputs(double sentpair_prob) {
  auto& w = world();
  PresetInputs in;
  in.ctx = w.ctx;
  in.word_clusters = w.words;
  in.sent_clusters = w.sents;
  in.sentpair_prob = sentpair_prob;
  return in;
}

PresetInputs heldout_inputs() {
  auto& w = world();
  PresetInputs in;
  in.ctx = w.hctx;
  in.word_clusters = w.hwords;
  in.sent_clusters = w.hsents;
  in.sentpair_prob = 0.0;
  return in;
}

ModelSpec desk_spec() {
  ModelSpec s;
  s.vocab = static_cast<int>(world().ctx->vocab.size());
  return s;
}

ModelParams initial_model() { return init_params(desk_spec(), 11); }

/// Meta-trained models are shared between criteria; each is trained once.
const ModelParams& trained(const std::string& preset, double sentpair_prob) {
  static std::map<std::pair<std::string, double>, ModelParams> cache;
  auto key = std::make_pair(preset, sentpair_prob);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  TrainConfig cfg;
  cfg.total_steps = kTrainSteps;
  cfg.seed = 5;
  SamplerSource src(make_preset(preset, train_inputs(sentpair_prob)));
  auto t0 = std::chrono::steady_clock::now();
  auto res = train(start_state(initial_model(), cfg), src, cfg);
  std::cout << "    trained " << preset << " (sentpair_prob " << sentpair_prob << ") in "
            << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
  return cache.emplace(key, std::move(res.state.params)).first->second;
}

std::string pct(double x) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100 * x << "%";
  return os.str();
}

struct Outcome {
  bool pass = false;
  std::string summary;
};

// ---- 1. sampler marginals -----------------------------------------------------

Outcome sampler_marginals() {
  auto& w = world();
  const auto& vocab = w.ctx->vocab;
  std::vector<std::pair<std::string, double>> p_values;
  auto chi = [&](const std::string& name, const std::vector<std::int64_t>& obs, const std::vector<double>& prob) {
    p_values.emplace_back(name, stats::chi_square_gof(obs, prob).p_value);
  };
  Rng rng = Rng::stream(1, "marginals");

  {
    UniformLabels s(vocab);
    std::map<TokenId, std::size_t> pos;
    for (std::size_t i = 0; i < s.words().size(); ++i) pos[s.words()[i]] = i;
    std::vector<std::int64_t> obs(s.words().size(), 0);
    for (long i = 0; i < kMarginalDraws; ++i) ++obs[pos[s.draw(1, rng)[0]]];
    chi("uniform", obs, std::vector<double>(obs.size(), 1.0 / static_cast<double>(obs.size())));
  }
  {
    LogFrequencyLabels s(vocab);
    std::map<TokenId, std::size_t> pos;
    for (std::size_t i = 0; i < s.words().size(); ++i) pos[s.words()[i]] = i;
    std::vector<std::int64_t> obs(s.words().size(), 0);
    for (long i = 0; i < kMarginalDraws; ++i) ++obs[pos[s.draw(1, rng)[0]]];
    double total = 0;
    for (double x : s.weights()) total += x;
    std::vector<double> prob;
    for (double x : s.weights()) prob.push_back(x / total);
    chi("log-frequency", obs, prob);
  }
  {
    // cluster i with probability |C_i| / sum over clusters holding >= N words
    IntraClusterLabels s(*w.words, vocab);
    const int n = 4;
    std::vector<double> prob;
    double total = 0;
    for (const auto& m : s.members()) total += m.size() >= static_cast<std::size_t>(n) ? static_cast<double>(m.size()) : 0.0;
    for (const auto& m : s.members()) prob.push_back(m.size() >= static_cast<std::size_t>(n) ? static_cast<double>(m.size()) / total : 0.0);
    std::vector<std::int64_t> obs(prob.size(), 0);
    for (long i = 0; i < kMarginalDraws; ++i) {
      int c = -1;
      s.draw(n, rng, &c);
      ++obs[static_cast<std::size_t>(c)];
    }
    chi("intra-cluster", obs, prob);
  }
  {
    // first cluster in proportion to size, then one uniform word inside it
    InterClusterLabels s(*w.words, vocab);
    std::vector<double> prob;
    double total = 0;
    for (const auto& m : s.members()) total += static_cast<double>(m.size());
    for (const auto& m : s.members()) prob.push_back(static_cast<double>(m.size()) / total);
    std::vector<std::int64_t> obs(prob.size(), 0);
    std::vector<int> clusters;
    for (long i = 0; i < kMarginalDraws; ++i) {
      s.draw(4, rng, &clusters);
      ++obs[static_cast<std::size_t>(clusters[0])];
    }
    chi("inter-cluster", obs, prob);
  }
  {
    // cluster preset: SentPair with alpha, otherwise 75% intra-cluster and 25% Frequency
    const double alpha = 1.0 / 16.0;
    auto s = make_preset("cluster", train_inputs(alpha));
    std::map<TaskKind, std::int64_t> count;
    for (long i = 0; i < kMarginalDraws; ++i) ++count[s->next_episode(rng).kind];
    chi("cluster mixture",
        {count[TaskKind::SentPair], count[TaskKind::Frequency], count[TaskKind::IntraCluster]},
        {alpha, (1 - alpha) * 0.25, (1 - alpha) * 0.75});
  }
  {
    const double alpha = 0.25;
    auto s = make_preset("mix", train_inputs(alpha));
    std::map<TaskKind, std::int64_t> count;
    for (long i = 0; i < kMarginalDraws; ++i) ++count[s->next_episode(rng).kind];
    const double rest = (1 - alpha) / 4;
    chi("sentpair-alpha mix",
        {count[TaskKind::SentPair], count[TaskKind::Uniform], count[TaskKind::Frequency], count[TaskKind::IntraCluster],
         count[TaskKind::SentCluster]},
        {alpha, rest, rest, rest, rest});
  }
  Outcome o{true, ""};
  for (const auto& [name, p] : p_values) {
    o.pass = o.pass && p > kMinPValue;
    o.summary += (o.summary.empty() ? "" : ", ") + name + " p=" + format_double(p);
  }
  return o;
}

// ---- 2. episode validity ------------------------------------------------------

Outcome episode_validity() {
  auto& w = world();
  auto in = train_inputs(0.0);
  auto dynamic = std::make_shared<const Clustering>(refresh_dynamic(initial_model(), *w.ctx, 30, 8, 4));
  std::vector<std::pair<SamplerPtr, const Clustering*>> samplers = {
      {make_preset("uniform", in), nullptr},
      {make_preset("frequency", in), nullptr},
      {make_preset("intra-cluster", in), nullptr},
      {make_preset("inter-cluster", in), nullptr},
      {make_preset("sentcluster", in), w.sents.get()},
      {make_preset("sentpair", in), nullptr},
      {std::make_shared<SmlmtSampler>(w.ctx, LabelStrategy::IntraCluster, in.cfg, dynamic, TaskKind::DynamicCluster), nullptr},
  };
  Rng rng = Rng::stream(2, "fuzz");
  long violations = 0, episodes = 0;
  std::map<TaskKind, long> kinds;
  std::string first;
  for (long i = 0; i < kFuzzEpisodes; ++i) {
    const auto& [s, sc] = samplers[rng.index(samplers.size())];
    Episode ep = s->next_episode(rng);
    ++kinds[ep.kind];
    ++episodes;
    auto v = validate_episode(ep, w.ctx->corpus, sc);
    if (!v.empty() && first.empty()) first = kind_name(ep.kind) + std::string(": ") + v.front();
    violations += static_cast<long>(v.size());
  }
  Outcome o;
  o.pass = violations == 0 && kinds.size() == samplers.size();
  o.summary = std::to_string(episodes) + " episodes over " + std::to_string(kinds.size()) + " kinds, " +
              std::to_string(violations) + " violations" + (first.empty() ? "" : " (first: " + first + ")");
  return o;
}

// ---- 3. meta-gradient ---------------------------------------------------------

Outcome meta_gradient_check() {
  ModelSpec spec;
  spec.vocab = 12;
  spec.dim = 4;
  spec.hidden = 5;
  spec.gen_hidden = 3;
  InitConfig ic;
  ic.zero_generator_output = false;
  ic.inner_lr = 0.3;
  ic.embedding_scale = 1.0;
  Rng rng = Rng::stream(3, "grad-check");
  double worst = 0;
  for (int t = 0; t < kGradInstances; ++t) {
    ModelParams p = init_params(spec, static_cast<std::uint64_t>(100 + t), ic);
    Episode ep;
    ep.n_classes = 2 + t % 3;
    ep.k_support = 2;
    ep.k_query = 1;
    for (int c = 0; c < ep.n_classes; ++c)
      for (int j = 0; j < 3; ++j) {
        Example e;
        e.label = c;
        const int len = 1 + static_cast<int>(rng.index(4));
        for (int k = 0; k < len; ++k) e.tokens.push_back(static_cast<TokenId>(kFirstWordId + rng.index(9)));
        if (j == 0) {
          e.tokens.push_back(kSepId);
          e.tokens.push_back(static_cast<TokenId>(kFirstWordId + rng.index(9)));
        }
        (j < 2 ? ep.support : ep.query).push_back(e);
      }
    worst = std::max(worst, grad_check(p, ep, 1e-5, 3).max_rel_error);
  }
  return {worst < kMaxGradRelError, "max relative error " + format_double(worst) + " over " + std::to_string(kGradInstances) + " instances"};
}

// ---- 4. learning signal -------------------------------------------------------

Outcome learning_signal() {
  const ModelParams& model = trained("cluster", 1.0 / 16.0);
  const ModelParams base = initial_model();
  auto& w = world();
  SmlmtSampler heldout(w.hctx, LabelStrategy::Uniform, SamplerConfig{});
  Rng rng = Rng::stream(4, "heldout-smlmt");
  double b = 0, m = 0;
  for (long i = 0; i < kEvalEpisodes; ++i) {
    Episode ep = heldout.episode_with_n(4, rng);
    b += proto_eval(base, ep);
    m += adapted_eval(model, ep, 7);
  }
  b /= kEvalEpisodes;
  m /= kEvalEpisodes;
  const bool base_ok = std::abs(b - kChance4) <= kBaselineBand;
  return {base_ok && m - b >= kLearningGain,
          "untrained proto " + pct(b) + " (must be 25% +- 3), meta-trained " + pct(m) + ", gain " + pct(m - b) + " (need >= 25)"};
}

// ---- 5. cross-evaluation directions -------------------------------------------

Outcome cross_eval_directions() {
  auto uni = std::make_shared<const ModelParams>(trained("uniform", 1.0 / 16.0));
  auto clu = std::make_shared<const ModelParams>(trained("cluster", 1.0 / 16.0));
  auto sc = std::make_shared<const ModelParams>(trained("sentcluster", 1.0 / 16.0));
  std::vector<NamedModel> rows{{"untrained", std::make_shared<const ModelParams>(initial_model()), EvalMode::Proto, 7},
                               {"uniform", uni, EvalMode::Adapted, 7},
                               {"cluster", clu, EvalMode::Adapted, 7},
                               {"sentcluster", sc, EvalMode::Adapted, 7}};
  const std::vector<std::string> smlmt_cols{"uniform", "intra-cluster", "inter-cluster"};
  auto cols = smlmt_cols;
  cols.push_back("sentcluster");
  auto m = cross_eval(rows, eval_columns(heldout_inputs(), cols, 4), kEvalEpisodes, Rng::derive(5, "xeval"));
  for (std::size_t r = 0; r < m.rows.size(); ++r) {
    std::cout << "    " << std::setw(12) << std::left << m.rows[r];
    for (std::size_t c = 0; c < m.columns.size(); ++c) std::cout << "  " << m.columns[c] << " " << pct(m.cells[r][c].accuracy);
    std::cout << '\n';
  }
  const double intra = m.at("uniform", "intra-cluster").accuracy, inter = m.at("uniform", "inter-cluster").accuracy;
  double sc_on_smlmt = 0;
  for (const auto& c : smlmt_cols) sc_on_smlmt += m.at("sentcluster", c).accuracy / static_cast<double>(smlmt_cols.size());
  const double uni_on_sc = m.at("uniform", "sentcluster").accuracy, clu_on_sc = m.at("cluster", "sentcluster").accuracy;
  const bool a = inter - intra >= kIntraInterGap;
  const bool b = sc_on_smlmt <= kChance4 + kScMargin + kScTolerance && uni_on_sc >= kChance4 + kScMargin &&
                 clu_on_sc >= kChance4 + kScMargin;
  return {a && b && m.complete(),
          "(a) uniform-trained intra " + pct(intra) + " vs inter " + pct(inter) + (a ? " ok" : " FAIL") +
              "; (b) sentcluster-trained on SMLMT " + pct(sc_on_smlmt) + " (<= 50%), SMLMT-trained on sentcluster " +
              pct(uni_on_sc) + " / " + pct(clu_on_sc) + " (>= 45%)" + (b ? " ok" : " FAIL")};
}

// ---- 6. curriculum mechanics --------------------------------------------------

Outcome curriculum_mechanics(const fs::path& work) {
  auto& w = world();
  std::vector<std::string> problems;
  if (lambda_schedule(0, kTrainSteps) != 0.0 || lambda_schedule(kTrainSteps, kTrainSteps) != 1.0)
    problems.push_back("lambda endpoints");

  CurriculumConfig base;
  base.sample_size = 32;
  base.clusters = 50;
  base.seed = 6;
  double frac = 0;
  {
    CurriculumConfig cfg = base;
    cfg.total_steps = 1;
    Curriculum cur(w.ctx, make_preset("cluster", train_inputs(1.0 / 16.0)), SamplerConfig{}, cfg);
    cur.install_clustering(std::make_shared<const Clustering>(refresh_dynamic(initial_model(), *w.ctx, 50, 8, 7)), 0);
    cur.set_lambda(kFixedLambda);
    Rng rng = Rng::stream(6, "mixture");
    long dyn = 0;
    for (long i = 0; i < kMixtureEpisodes; ++i) dyn += cur.next(rng).kind == TaskKind::DynamicCluster;
    frac = static_cast<double>(dyn) / kMixtureEpisodes;
    if (std::abs(frac - kFixedLambda) > kMixtureBand) problems.push_back("mixture fraction");
  }

  auto run = [&](bool async, long interval, std::vector<RefreshRecord>* audit) {
    CurriculumConfig cfg = base;
    cfg.total_steps = kThroughputSteps;
    cfg.refresh_interval = interval;
    cfg.async = async;
    cfg.audit_path = (work / (std::string("audit-") + (async ? "async" : "sync") + ".jsonl")).string();
    Curriculum cur(w.ctx, make_preset("cluster", train_inputs(1.0 / 16.0)), SamplerConfig{}, cfg);
    TrainConfig tc;
    tc.total_steps = kThroughputSteps;
    tc.seed = 6;
    auto res = train(start_state(initial_model(), tc), cur, tc);
    if (audit) *audit = cur.audit();
    return static_cast<double>(kThroughputSteps) / res.seconds;
  };
  std::vector<RefreshRecord> audit;
  const double none = run(false, kThroughputSteps + 1, nullptr);
  const double async = run(true, kThroughputInterval, &audit);
  const double sync = run(false, kThroughputInterval, nullptr);
  bool ages = !audit.empty();
  for (const auto& r : audit) ages = ages && r.step - r.snapshot_step == kThroughputInterval;
  if (!ages) problems.push_back("snapshot ages");
  const double ratio = async / none;
  if (ratio < kMinThroughputRatio) problems.push_back("throughput");
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << "lambda(0)=" << lambda_schedule(0, kTrainSteps)
     << " lambda(T)=" << lambda_schedule(kTrainSteps, kTrainSteps) << "; fixed 0.3 mixture " << pct(frac) << "; "
     << audit.size() << " refreshes, all snapshots " << kThroughputInterval << " steps old: " << (ages ? "yes" : "no")
     << "; steps/s without refresh " << none << ", async " << async << " (ratio " << ratio << "), sync " << sync;
  return {problems.empty(), os.str()};
}

// ---- 7. determinism -----------------------------------------------------------

std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    out[fs::relative(e.path(), root).string()] = ss.str();
  }
  return out;
}

Outcome determinism(const fs::path& work, const std::string& cli) {
  const fs::path run = work / "det";
  const fs::path spec = work / "det-spec.txt";
  std::ofstream(spec) << "topics = 4\nsubtopics = 2\nsubtopic_words = 10\nstyles = 2\nstyle_words = 3\n"
                         "docs_per_topic = 30\nstyle_tokens_min = 4\nstyle_tokens_max = 6\n";
  const std::string small =
      " --set model.dim=16 --set model.hidden=16 --set model.gen_hidden=16 --set train.adapt_steps=3";
  const std::string corpus = (run / "ingest" / "corpus.snap").string();
  const std::string clusters = " --word-clusters " + (run / "clusters" / "words.clust").string() + " --sent-clusters " +
                               (run / "clusters" / "sentences.clust").string();
  const std::string ckpt = (run / "train" / "checkpoints" / "final.ckpt").string();
  const std::vector<std::string> stages = {
      "ingest --synthetic " + spec.string() + " -o " + (run / "ingest").string(),
      "cluster --corpus " + corpus + " --k-words 8 --k-sentences 16 --set embeddings.dim=16 -o " + (run / "clusters").string(),
      "gen-tasks --corpus " + corpus + clusters + " --dist mix --n-tasks 50 -o " + (run / "tasks" / "mix.jsonl").string(),
      "gen-tasks --corpus " + corpus + clusters + " --dist cluster --n-tasks 50 -o " + (run / "tasks-cluster" / "cluster.jsonl").string(),
      "train --corpus " + corpus + clusters + " --steps 60" + small +
          " --set curriculum.enabled=true --set curriculum.refresh_interval=20 --set curriculum.clusters=6"
          " --set curriculum.sample_size=8 --set train.checkpoint_every=20 -o " + (run / "train").string(),
      "xeval --corpus " + corpus + clusters + small + " --model trained=" + ckpt +
          " --untrained untrained --set eval.n_tasks=50 -o " + (run / "xeval").string(),
      "report --corpus " + corpus + small + " --set corpus.synthetic=" + spec.string() + " --model trained=" + ckpt +
          " --untrained untrained --synthetic-topic 30 --set eval.k_values=4,8 --set eval.resamples=3 -o " +
          (run / "report").string(),
  };
  auto execute = [&]() {
    fs::remove_all(run);
    for (const auto& s : stages) {
      const std::string cmd = cli + " " + s + " --seed 7 --deterministic > " + (work / "det.log").string() + " 2>&1";
      if (std::system(cmd.c_str()) != 0) throw Error("stage failed: " + s);
    }
    return snapshot_tree(run);
  };
  auto first = execute();
  auto second = execute();
  std::vector<std::string> differ;
  for (const auto& [path, bytes] : first) {
    auto it = second.find(path);
    if (it == second.end() || it->second != bytes) differ.push_back(path);
  }
  if (first.size() != second.size()) differ.push_back("(file sets differ)");
  std::set<std::string> kinds;
  for (const auto& [path, bytes] : first) kinds.insert(fs::path(path).extension().string());
  std::string ext;
  for (const auto& k : kinds) ext += (ext.empty() ? "" : " ") + k;
  return {differ.empty() && first.size() >= 20,
          std::to_string(first.size()) + " files from " + std::to_string(stages.size()) + " stage runs (" + ext + "), " +
              std::to_string(differ.size()) + " differ" + (differ.empty() ? "" : " (first: " + differ.front() + ")")};
}

// ---- 8. k-means ---------------------------------------------------------------

Outcome kmeans_properties() {
  Rng rng = Rng::stream(8, "kmeans");
  int monotone = 0;
  for (int t = 0; t < kKMeansInstances; ++t) {
    const auto n = static_cast<Eigen::Index>(20 + rng.index(300));
    const auto d = static_cast<Eigen::Index>(1 + rng.index(8));
    const int k = 1 + static_cast<int>(rng.index(12));
    Matrix pts(n, d);
    for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = rng.normal() * (1 + static_cast<double>(i % 3));
    Clustering c = kmeans(pts, {}, k, static_cast<std::uint64_t>(t));
    bool ok = true;
    for (std::size_t i = 1; i < c.inertia_history.size(); ++i)
      ok = ok && c.inertia_history[i] <= c.inertia_history[i - 1] * (1 + 1e-12) + 1e-12;
    monotone += ok;
  }
  Matrix blobs(400, 2);
  std::vector<int> truth;
  for (Eigen::Index i = 0; i < 400; ++i) {
    const double centre = i < 200 ? -10.0 : 10.0;
    blobs(i, 0) = centre + rng.normal();
    blobs(i, 1) = rng.normal();
    truth.push_back(i < 200 ? 0 : 1);
  }
  Clustering c = kmeans(blobs, {}, 2, 8);
  int agree = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) agree += c.assignment[i] == truth[i];
  const int best = std::max(agree, static_cast<int>(truth.size()) - agree);
  return {monotone == kKMeansInstances && best == static_cast<int>(truth.size()),
          std::to_string(monotone) + "/" + std::to_string(kKMeansInstances) + " instances monotone; blobs " +
              std::to_string(best) + "/" + std::to_string(truth.size()) + " agree up to label swap"};
}

// ---- 9. sentence-pair ablation ------------------------------------------------

Outcome sentpair_ablation() {
  const ModelParams& with = trained("cluster", 1.0 / 16.0);
  const ModelParams& without = trained("cluster", 0.0);
  SentPairSampler heldout(world().hctx, SamplerConfig{});
  Rng rng = Rng::stream(9, "heldout-sentpair");
  double a = 0, b = 0;
  for (long i = 0; i < kEvalEpisodes; ++i) {
    Episode ep = heldout.next_episode(rng);
    a += adapted_eval(with, ep, 7);
    b += adapted_eval(without, ep, 7);
  }
  a /= kEvalEpisodes;
  b /= kEvalEpisodes;
  return {a - b >= kSentPairGain,
          "held-out sentence-pair accuracy with 1/16 " + pct(a) + ", without " + pct(b) + ", gain " + pct(a - b) + " (need >= 5)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string workdir = "acceptance-work", cli = "metatask";
  std::vector<int> only;
  app.add_option("--workdir", workdir, "scratch directory");
  app.add_option("--cli", cli, "path to the command-line tool");
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(workdir);
  warning_sink() = nullptr;

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"sampler marginals", sampler_marginals},
      {"episode validity", episode_validity},
      {"meta-gradient", meta_gradient_check},
      {"learning signal", learning_signal},
      {"cross-eval directions", cross_eval_directions},
      {"curriculum mechanics", [&] { return curriculum_mechanics(workdir); }},
      {"determinism", [&] { return determinism(workdir, cli); }},
      {"k-means", kmeans_properties},
      {"sentence-pair ablation", sentpair_ablation},
  };
  int failed = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    ++ran;
    auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << " " << criteria[i].first << ": " << o.summary
              << " [" << std::fixed << std::setprecision(1) << secs << " s]" << std::defaultfloat << std::endl;
  }
  std::cout << (ran - failed) << "/" << ran << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
