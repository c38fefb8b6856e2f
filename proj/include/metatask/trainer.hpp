#pragma once

#include <chrono>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "metatask/error.hpp"
#include "metatask/metalearner.hpp"
#include "metatask/rng.hpp"

namespace metatask {

struct TrainConfig {
  double outer_lr = 1e-3;
  int tasks_per_batch = 4;
  int adapt_steps = 7;  ///< G
  long total_steps = 0;
  std::uint64_t seed = 0;
  long checkpoint_every = 0;   ///< 0 disables periodic checkpoints
  std::string checkpoint_dir;  ///< where checkpoints go (empty: none)
  std::string log_path;        ///< JSONL training log (empty: none)
  int threads = 1;             ///< per-task gradients in parallel when > 1

  void validate() const {
    std::vector<std::string> v;
    if (!(outer_lr >= 0) || !std::isfinite(outer_lr)) v.push_back("train.outer_lr must be finite and >= 0");
    if (tasks_per_batch < 1) v.push_back("train.tasks_per_batch must be >= 1");
    if (adapt_steps < 1) v.push_back("train.adapt_steps must be >= 1");
    if (total_steps < 0) v.push_back("train.total_steps must be >= 0");
    if (checkpoint_every < 0) v.push_back("train.checkpoint_every must be >= 0");
    if (threads < 1) v.push_back("train.threads must be >= 1");
    if (!v.empty()) throw ConfigError(v);
  }
};

struct StepRecord {
  long step = 0;
  double lambda = 0;
  std::vector<std::string> kinds;
  double support_loss_before = 0;
  double support_loss_after = 0;
  double query_loss = 0;
  double query_accuracy = 0;

  nlohmann::json to_json() const {
    return {{"step", step},
            {"lambda", lambda},
            {"kinds", kinds},
            {"support_loss_before", support_loss_before},
            {"support_loss_after", support_loss_after},
            {"query_loss", query_loss},
            {"query_accuracy", query_accuracy}};
  }
};

/// Everything needed to continue training exactly where it stopped.
struct TrainState {
  ModelParams params;
  Adam opt;
  Rng rng;
  long step = 0;

  friend bool operator==(const TrainState& a, const TrainState& b) {
    return a.params == b.params && a.opt == b.opt && a.rng == b.rng && a.step == b.step;
  }
};

// ---------------------------------------------------------------------------
// Checkpoint: little-endian binary.
//   "MTCKPT01" | spec (5 x i32, adapt mask u8) | step i64 | theta (u64 n, n x f64)
//   | adam (lr, b1, b2, eps f64, t i64, m, v) | rng state (u64 len, bytes)
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
void put(std::ostream& o, const T& v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& i) {
  T v{};
  if (!i.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError(0, "truncated checkpoint");
  return v;
}
inline void put_vec(std::ostream& o, const std::vector<double>& v) {
  put<std::uint64_t>(o, v.size());
  o.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}
inline std::vector<double> get_vec(std::istream& i, std::uint64_t limit) {
  const auto n = get<std::uint64_t>(i);
  if (n > limit) throw FormatError(0, "corrupt checkpoint vector length");
  std::vector<double> v(n);
  if (n && !i.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double))))
    throw FormatError(0, "truncated checkpoint");
  return v;
}
}  // namespace detail

inline void save_checkpoint(const TrainState& s, std::ostream& out) {
  out.write("MTCKPT01", 8);
  const ModelSpec& sp = s.params.spec();
  detail::put<std::int32_t>(out, sp.vocab);
  detail::put<std::int32_t>(out, sp.dim);
  detail::put<std::int32_t>(out, sp.hidden);
  detail::put<std::int32_t>(out, sp.gen_hidden);
  std::uint8_t mask = 0;
  for (int l = 0; l < kLayers; ++l) mask |= sp.adapt[static_cast<std::size_t>(l)] ? (1u << l) : 0u;
  detail::put<std::uint8_t>(out, mask);
  detail::put<std::int64_t>(out, s.step);
  detail::put_vec(out, s.params.data());
  detail::put<double>(out, s.opt.lr);
  detail::put<double>(out, s.opt.beta1);
  detail::put<double>(out, s.opt.beta2);
  detail::put<double>(out, s.opt.eps);
  detail::put<std::int64_t>(out, s.opt.t);
  detail::put_vec(out, s.opt.m);
  detail::put_vec(out, s.opt.v);
  const std::string rs = s.rng.state();
  detail::put<std::uint64_t>(out, rs.size());
  out.write(rs.data(), static_cast<std::streamsize>(rs.size()));
}

inline TrainState load_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, "MTCKPT01", 8) != 0) throw FormatError(0, "not a checkpoint (version 1)");
  ModelSpec sp;
  sp.vocab = detail::get<std::int32_t>(in);
  sp.dim = detail::get<std::int32_t>(in);
  sp.hidden = detail::get<std::int32_t>(in);
  sp.gen_hidden = detail::get<std::int32_t>(in);
  const auto mask = detail::get<std::uint8_t>(in);
  for (int l = 0; l < kLayers; ++l) sp.adapt[static_cast<std::size_t>(l)] = (mask >> l) & 1u;
  if (sp.vocab < 1 || sp.dim < 1 || sp.hidden < 1 || sp.gen_hidden < 1) throw FormatError(0, "corrupt checkpoint dims");
  TrainState s{ModelParams(sp), Adam{}, Rng{}, 0};
  s.step = detail::get<std::int64_t>(in);
  auto theta = detail::get_vec(in, s.params.size());
  if (theta.size() != s.params.size()) throw FormatError(0, "checkpoint parameter count mismatch");
  s.params.data() = std::move(theta);
  s.opt.lr = detail::get<double>(in);
  s.opt.beta1 = detail::get<double>(in);
  s.opt.beta2 = detail::get<double>(in);
  s.opt.eps = detail::get<double>(in);
  s.opt.t = detail::get<std::int64_t>(in);
  s.opt.m = detail::get_vec(in, s.params.size());
  s.opt.v = detail::get_vec(in, s.params.size());
  const auto len = detail::get<std::uint64_t>(in);
  if (len > (1u << 20)) throw FormatError(0, "corrupt rng state");
  std::string rs(len, '\0');
  if (!in.read(rs.data(), static_cast<std::streamsize>(len))) throw FormatError(0, "truncated checkpoint");
  s.rng.set_state(rs);
  return s;
}

inline void save_checkpoint_file(const TrainState& s, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  save_checkpoint(s, out);
  if (!out) throw IoError("write failed: " + path);
}

inline TrainState load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  return load_checkpoint(in);
}

/// Fresh training state: initial parameters plus the named episode stream of the seed.
inline TrainState start_state(ModelParams init, const TrainConfig& cfg) {
  TrainState s{std::move(init), Adam{}, Rng::stream(cfg.seed, "episodes"), 0};
  s.opt.lr = cfg.outer_lr;
  return s;
}

struct TrainResult {
  TrainState state;
  std::vector<StepRecord> log;
  double seconds = 0;
};

/// Meta-training loop: draw batch, adapt per task, one outer step. Continues from
/// `state.step` up to cfg.total_steps. On divergence the last good state is written
/// to <checkpoint_dir>/last_good.ckpt (when a directory is set) and the error rethrown.
inline TrainResult train(TrainState state, EpisodeSource& source, const TrainConfig& cfg,
                         const std::function<void(const StepRecord&)>& on_step = {}) {
  cfg.validate();
  state.opt.lr = cfg.outer_lr;
  TrainResult res;
  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path, state.step > 0 ? std::ios::app | std::ios::binary : std::ios::binary);
    if (!log) throw IoError("cannot write " + cfg.log_path);
  }
  auto ckpt_path = [&](const std::string& name) { return (std::filesystem::path(cfg.checkpoint_dir) / name).string(); };
  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Episode> batch;
  std::vector<MetaGradient> grads;
  while (state.step < cfg.total_steps) {
    const long t = state.step;
    TrainState last_good = state;
    try {
      source.begin_step(t, state.params);
      batch.clear();
      for (int i = 0; i < cfg.tasks_per_batch; ++i) batch.push_back(source.next(state.rng));
      grads.assign(batch.size(), {});
      if (cfg.threads > 1 && batch.size() > 1) {
        std::vector<std::future<MetaGradient>> fs;
        for (std::size_t i = 0; i < batch.size(); ++i)
          fs.push_back(std::async(std::launch::async, [&, i] { return meta_gradient(state.params, batch[i], cfg.adapt_steps); }));
        for (std::size_t i = 0; i < batch.size(); ++i) grads[i] = fs[i].get();
      } else {
        for (std::size_t i = 0; i < batch.size(); ++i) grads[i] = meta_gradient(state.params, batch[i], cfg.adapt_steps);
      }
      auto r = outer_step(state.params, std::span<const MetaGradient>(grads), state.opt, t);
      StepRecord rec;
      rec.step = t;
      rec.lambda = source.lambda();
      for (const auto& e : batch) rec.kinds.emplace_back(kind_name(e.kind));
      rec.support_loss_before = r.support_loss_before;
      rec.support_loss_after = r.support_loss_after;
      rec.query_loss = r.query_loss;
      rec.query_accuracy = r.query_accuracy;
      if (!std::isfinite(r.query_loss)) throw DivergenceError(t, "non-finite query loss");
      state.step = t + 1;
      if (log) log << rec.to_json().dump() << '\n';
      if (on_step) on_step(rec);
      res.log.push_back(std::move(rec));
      if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() && state.step % cfg.checkpoint_every == 0)
        save_checkpoint_file(state, ckpt_path("step-" + std::to_string(state.step) + ".ckpt"));
    } catch (const DivergenceError& e) {
      source.finish();
      if (!cfg.checkpoint_dir.empty()) save_checkpoint_file(last_good, ckpt_path("last_good.ckpt"));
      throw DivergenceError(t, std::string("training aborted: ") + e.what());
    }
  }
  source.finish();
  if (!cfg.checkpoint_dir.empty()) save_checkpoint_file(state, ckpt_path("final.ckpt"));
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.state = std::move(state);
  return res;
}

}  // namespace metatask
