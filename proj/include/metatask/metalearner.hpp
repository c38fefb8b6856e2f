#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "metatask/corpus.hpp"
#include "metatask/error.hpp"
#include "metatask/kmeans.hpp"
#include "metatask/rng.hpp"
#include "metatask/taskgen.hpp"

namespace metatask {

inline double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }
inline double softplus_inv(double y) { return y > 30 ? y : std::log(std::expm1(y)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Layers with their own inner learning rate.
enum Layer : int { kEnc1 = 0, kEnc2 = 1, kHead = 2 };
inline constexpr int kLayers = 3;
inline const char* layer_name(int l) {
  static const char* names[] = {"enc1", "enc2", "head"};
  return names[l];
}

struct ModelSpec {
  int vocab = 0;
  int dim = 64;         ///< representation size d
  int hidden = 64;      ///< encoder hidden width
  int gen_hidden = 64;  ///< head-generator hidden width
  std::array<bool, kLayers> adapt{true, true, true};

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct InitConfig {
  double inner_lr = 0.1;
  bool zero_generator_output = true;
  double embedding_scale = 0.1;
};

/// All meta-parameters in one flat array. Blocks, in order:
/// E (V x d), W1 (h x d), b1, W2 (d x 2h), b2, G1 (g x d), c1, G2 ((d+1) x g), c2, rho (3).
class ModelParams {
 public:
  enum Block { E, W1, B1, W2, B2, G1, C1, G2, C2, Rho, kBlocks };

  ModelParams() = default;
  explicit ModelParams(const ModelSpec& s) : spec_(s) {
    const int V = s.vocab, d = s.dim, h = s.hidden, g = s.gen_hidden;
    rows_ = {V, h, h, d, d, g, g, d + 1, d + 1, kLayers};
    cols_ = {d, d, 1, 2 * h, 1, d, 1, g, 1, 1};
    std::size_t off = 0;
    for (int b = 0; b < kBlocks; ++b) {
      off_[static_cast<std::size_t>(b)] = off;
      off += static_cast<std::size_t>(rows_[static_cast<std::size_t>(b)]) * static_cast<std::size_t>(cols_[static_cast<std::size_t>(b)]);
    }
    theta_.assign(off, 0.0);
  }

  const ModelSpec& spec() const { return spec_; }
  std::vector<double>& data() { return theta_; }
  const std::vector<double>& data() const { return theta_; }
  std::size_t size() const { return theta_.size(); }
  std::size_t offset(Block b) const { return off_[static_cast<std::size_t>(b)]; }
  std::size_t block_size(Block b) const {
    return static_cast<std::size_t>(rows_[static_cast<std::size_t>(b)]) * static_cast<std::size_t>(cols_[static_cast<std::size_t>(b)]);
  }

  Eigen::Map<Matrix> mat(Block b) {
    return {theta_.data() + offset(b), rows_[static_cast<std::size_t>(b)], cols_[static_cast<std::size_t>(b)]};
  }
  Eigen::Map<const Matrix> mat(Block b) const {
    return {theta_.data() + offset(b), rows_[static_cast<std::size_t>(b)], cols_[static_cast<std::size_t>(b)]};
  }
  Eigen::Map<Vector> vec(Block b) { return {theta_.data() + offset(b), static_cast<Eigen::Index>(block_size(b))}; }
  Eigen::Map<const Vector> vec(Block b) const {
    return {theta_.data() + offset(b), static_cast<Eigen::Index>(block_size(b))};
  }

  double inner_lr(int layer) const { return softplus(theta_[offset(Rho) + static_cast<std::size_t>(layer)]); }
  double& rho(int layer) { return theta_[offset(Rho) + static_cast<std::size_t>(layer)]; }
  double rho(int layer) const { return theta_[offset(Rho) + static_cast<std::size_t>(layer)]; }

  bool all_finite() const {
    for (double v : theta_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) { return a.spec_ == b.spec_ && a.theta_ == b.theta_; }

 private:
  ModelSpec spec_;
  std::vector<double> theta_;
  std::array<std::size_t, kBlocks> off_{};
  std::array<int, kBlocks> rows_{};
  std::array<int, kBlocks> cols_{};
};

inline ModelParams init_params(const ModelSpec& spec, std::uint64_t seed, const InitConfig& init = {}) {
  if (spec.vocab < kFirstWordId || spec.dim < 1 || spec.hidden < 1 || spec.gen_hidden < 1)
    throw ArgumentError("bad model dimensions");
  if (!(init.inner_lr > 0)) throw ArgumentError("inner_lr must be > 0");
  ModelParams p(spec);
  Rng rng = Rng::stream(seed, "init");
  auto fill = [&](ModelParams::Block b, double scale) {
    auto v = p.vec(b);
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = scale * rng.normal();
  };
  const double d = spec.dim, h = spec.hidden;
  fill(ModelParams::E, init.embedding_scale);
  fill(ModelParams::W1, 1.0 / std::sqrt(d));
  fill(ModelParams::W2, 1.0 / std::sqrt(h));
  fill(ModelParams::G1, 1.0 / std::sqrt(d));
  if (!init.zero_generator_output) fill(ModelParams::G2, 1.0 / std::sqrt(static_cast<double>(spec.gen_hidden)));
  for (int l = 0; l < kLayers; ++l) p.rho(l) = softplus_inv(init.inner_lr);
  return p;
}

/// Task-specific weights: encoder layers plus the classification head.
struct FastWeights {
  Matrix W1;
  Vector b1;
  Matrix W2;
  Vector b2;
  Matrix Wh;  ///< N x d
  Vector bh;  ///< N

  void set_zero_like(const FastWeights& o) {
    W1 = Matrix::Zero(o.W1.rows(), o.W1.cols());
    b1 = Vector::Zero(o.b1.size());
    W2 = Matrix::Zero(o.W2.rows(), o.W2.cols());
    b2 = Vector::Zero(o.b2.size());
    Wh = Matrix::Zero(o.Wh.rows(), o.Wh.cols());
    bh = Vector::Zero(o.bh.size());
  }
  double layer_dot(int layer, const FastWeights& o) const {
    switch (layer) {
      case kEnc1: return (W1.array() * o.W1.array()).sum() + b1.dot(o.b1);
      case kEnc2: return (W2.array() * o.W2.array()).sum() + b2.dot(o.b2);
      default: return (Wh.array() * o.Wh.array()).sum() + bh.dot(o.bh);
    }
  }
  /// this -= rate * g for one layer
  void step_layer(int layer, double rate, const FastWeights& g) {
    switch (layer) {
      case kEnc1: W1 -= rate * g.W1; b1 -= rate * g.b1; break;
      case kEnc2: W2 -= rate * g.W2; b2 -= rate * g.b2; break;
      default: Wh -= rate * g.Wh; bh -= rate * g.bh; break;
    }
  }
  void add(const FastWeights& g) {
    W1 += g.W1; b1 += g.b1; W2 += g.W2; b2 += g.b2; Wh += g.Wh; bh += g.bh;
  }
  bool all_finite() const {
    return W1.allFinite() && b1.allFinite() && W2.allFinite() && b2.allFinite() && Wh.allFinite() && bh.allFinite();
  }
};

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

/// Tokens before and after the first SEP. Both empty when there is no SEP.
inline std::pair<std::span<const TokenId>, std::span<const TokenId>> split_segments(std::span<const TokenId> t) {
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] == kSepId) return {t.subspan(0, i), t.subspan(i + 1)};
  return {};
}

/// Pooled embeddings of a batch. M holds the mean over all tokens. For SEP-joined pairs
/// Ma and Mb hold the means of the two segments; those rows are zero for single sentences.
struct EncoderInput {
  Matrix M, Ma, Mb;
  std::vector<char> pair;

  Eigen::Index rows() const { return M.rows(); }
};

inline EncoderInput encoder_inputs(const ModelParams& p, std::span<const Example> xs) {
  const auto E = p.mat(ModelParams::E);
  const int d = p.spec().dim;
  const auto n = static_cast<Eigen::Index>(xs.size());
  EncoderInput in{Matrix::Zero(n, d), Matrix::Zero(n, d), Matrix::Zero(n, d), std::vector<char>(xs.size(), 0)};
  auto mean_into = [&](std::span<const TokenId> seg, Matrix& out, Eigen::Index r) {
    for (TokenId id : seg) {
      if (id < 0 || id >= p.spec().vocab) throw ArgumentError("unknown token id " + std::to_string(id));
      out.row(r) += E.row(id);
    }
    out.row(r) /= static_cast<double>(seg.size());
  };
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const auto& t = xs[i].tokens;
    if (t.empty()) throw ArgumentError("example without tokens");
    mean_into(t, in.M, r);
    auto [sa, sb] = split_segments(t);
    if (sa.empty() || sb.empty()) continue;
    in.pair[i] = 1;
    mean_into(sa, in.Ma, r);
    mean_into(sb, in.Mb, r);
  }
  return in;
}

/// Gradient with respect to each matrix of an EncoderInput.
struct InputGrad {
  Matrix dM, dMa, dMb;
};

struct EncoderCache {
  Matrix Z;       ///< tanh hidden of the whole input
  Matrix Za, Zb;  ///< tanh hidden of each segment (zero rows for single sentences)
  Matrix F;       ///< outputs
};

/// f = W2 [z, za * zb] + b2 with z = tanh(W1 m + b1); the segment product is the only
/// place the two halves of a pair interact.
template <class MW1, class VB1, class MW2, class VB2>
EncoderCache encoder_forward(const EncoderInput& in, const MW1& W1, const VB1& b1, const MW2& W2, const VB2& b2) {
  EncoderCache c;
  auto hidden = [&](const Matrix& X) -> Matrix { return ((X * W1.transpose()).rowwise() + b1.transpose()).array().tanh().matrix(); };
  c.Z = hidden(in.M);
  c.Za = hidden(in.Ma);
  c.Zb = hidden(in.Mb);
  for (Eigen::Index r = 0; r < in.rows(); ++r)
    if (!in.pair[static_cast<std::size_t>(r)]) {
      c.Za.row(r).setZero();
      c.Zb.row(r).setZero();
    }
  const Eigen::Index h = c.Z.cols();
  c.F = ((c.Z * W2.leftCols(h).transpose()) + (c.Za.cwiseProduct(c.Zb) * W2.rightCols(h).transpose())).rowwise() +
        b2.transpose();
  return c;
}

/// Backprop dF through the encoder. Adds weight gradients to g (encoder part) and returns the
/// input gradient.
template <class MW1, class MW2>
InputGrad encoder_backward(const EncoderInput& in, const EncoderCache& c, const Matrix& dF, const MW1& W1, const MW2& W2,
                           FastWeights& g) {
  const Eigen::Index h = c.Z.cols();
  Matrix I = c.Za.cwiseProduct(c.Zb);
  g.W2.leftCols(h) += dF.transpose() * c.Z;
  g.W2.rightCols(h) += dF.transpose() * I;
  g.b2 += dF.colwise().sum().transpose();
  Matrix dZ = dF * W2.leftCols(h);
  Matrix dI = dF * W2.rightCols(h);
  // Za and Zb rows of single sentences are zero, so their gradients vanish here too.
  Matrix dA = (dZ.array() * (1.0 - c.Z.array().square())).matrix();
  Matrix dAa = (dI.cwiseProduct(c.Zb).array() * (1.0 - c.Za.array().square())).matrix();
  Matrix dAb = (dI.cwiseProduct(c.Za).array() * (1.0 - c.Zb.array().square())).matrix();
  for (Eigen::Index r = 0; r < in.rows(); ++r)
    if (!in.pair[static_cast<std::size_t>(r)]) {
      dAa.row(r).setZero();
      dAb.row(r).setZero();
    }
  g.W1 += dA.transpose() * in.M + dAa.transpose() * in.Ma + dAb.transpose() * in.Mb;
  g.b1 += (dA.colwise().sum() + dAa.colwise().sum() + dAb.colwise().sum()).transpose();
  return {dA * W1, dAa * W1, dAb * W1};
}

namespace detail {
/// Adds the embedding gradient implied by an input gradient to gE.
inline void scatter_input_grad(std::span<const Example> xs, const InputGrad& dx, Eigen::Map<Matrix>& gE) {
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const auto& t = xs[i].tokens;
    const double inv = 1.0 / static_cast<double>(t.size());
    for (TokenId id : t) gE.row(id) += inv * dx.dM.row(r);
    auto [sa, sb] = split_segments(t);
    if (sa.empty() || sb.empty()) continue;
    for (TokenId id : sa) gE.row(id) += dx.dMa.row(r) / static_cast<double>(sa.size());
    for (TokenId id : sb) gE.row(id) += dx.dMb.row(r) / static_cast<double>(sb.size());
  }
}
}  // namespace detail

inline FastWeights encoder_weights(const ModelParams& p) {
  FastWeights w;
  w.W1 = p.mat(ModelParams::W1);
  w.b1 = p.vec(ModelParams::B1);
  w.W2 = p.mat(ModelParams::W2);
  w.b2 = p.vec(ModelParams::B2);
  return w;
}

/// f(x): encoder input through the encoder MLP.
inline Vector encode(const ModelParams& p, std::span<const TokenId> tokens) {
  Example ex{std::vector<TokenId>(tokens.begin(), tokens.end()), 0, {}};
  EncoderInput M = encoder_inputs(p, std::span<const Example>(&ex, 1));
  auto c = encoder_forward(M, p.mat(ModelParams::W1), p.vec(ModelParams::B1), p.mat(ModelParams::W2), p.vec(ModelParams::B2));
  return c.F.row(0).transpose();
}

/// Encodes a batch of examples with the shared (unadapted) encoder.
inline Matrix encode_batch(const ModelParams& p, std::span<const Example> xs) {
  EncoderInput M = encoder_inputs(p, xs);
  return encoder_forward(M, p.mat(ModelParams::W1), p.vec(ModelParams::B1), p.mat(ModelParams::W2), p.vec(ModelParams::B2)).F;
}

/// Class means of the rows of F. Throws when a class has no row.
inline Matrix class_prototypes(const Matrix& F, std::span<const int> labels, int n_classes, std::vector<int>* counts_out = nullptr) {
  Matrix P = Matrix::Zero(n_classes, F.cols());
  std::vector<int> cnt(static_cast<std::size_t>(n_classes), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int c = labels[i];
    if (c < 0 || c >= n_classes) throw ArgumentError("label out of range");
    P.row(c) += F.row(static_cast<Eigen::Index>(i));
    cnt[static_cast<std::size_t>(c)] += 1;
  }
  for (int c = 0; c < n_classes; ++c) {
    if (cnt[static_cast<std::size_t>(c)] == 0) throw ArgumentError("class " + std::to_string(c) + " has no support example");
    P.row(c) /= cnt[static_cast<std::size_t>(c)];
  }
  if (counts_out) *counts_out = std::move(cnt);
  return P;
}

struct HeadCache {
  Matrix P;  ///< prototypes
  Matrix U;  ///< generator hidden
};

/// Per-class prototype through the generator MLP -> (weight row, bias).
inline std::pair<Matrix, Vector> generate_head(const ModelParams& p, const Matrix& F_support, std::span<const int> labels,
                                               int n_classes, HeadCache* cache = nullptr) {
  Matrix P = class_prototypes(F_support, labels, n_classes);
  Matrix U = ((P * p.mat(ModelParams::G1).transpose()).rowwise() + p.vec(ModelParams::C1).transpose()).array().tanh().matrix();
  Matrix O = (U * p.mat(ModelParams::G2).transpose()).rowwise() + p.vec(ModelParams::C2).transpose();
  const int d = p.spec().dim;
  Matrix Wh = O.leftCols(d);
  Vector bh = O.col(d);
  if (cache) {
    cache->P = std::move(P);
    cache->U = std::move(U);
  }
  return {std::move(Wh), std::move(bh)};
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix P = logits;
  for (Eigen::Index i = 0; i < P.rows(); ++i) {
    const double m = P.row(i).maxCoeff();
    P.row(i) = (P.row(i).array() - m).exp().matrix();
    P.row(i) /= P.row(i).sum();
  }
  return P;
}

struct LossOut {
  double loss = 0;
  double accuracy = 0;
  Matrix probs;
};

/// Class probabilities under fast weights for precomputed encoder inputs.
inline Matrix predict_probs(const FastWeights& w, const EncoderInput& M) {
  auto c = encoder_forward(M, w.W1, w.b1, w.W2, w.b2);
  return softmax_rows((c.F * w.Wh.transpose()).rowwise() + w.bh.transpose());
}

/// Mean cross-entropy; fills grad (same shapes as w) and dM when requested.
inline LossOut loss_and_grad(const FastWeights& w, const EncoderInput& M, std::span<const int> labels, FastWeights* grad,
                             InputGrad* dM = nullptr) {
  auto c = encoder_forward(M, w.W1, w.b1, w.W2, w.b2);
  Matrix logits = (c.F * w.Wh.transpose()).rowwise() + w.bh.transpose();
  LossOut out;
  out.probs = softmax_rows(logits);
  const auto n = static_cast<double>(labels.size());
  int correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    // log-sum-exp for an accurate loss near saturation
    const double m = logits.row(r).maxCoeff();
    const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
    out.loss += lse - logits(r, labels[i]);
    Eigen::Index arg;
    logits.row(r).maxCoeff(&arg);
    correct += arg == labels[i] ? 1 : 0;
  }
  out.loss /= n;
  out.accuracy = correct / n;
  if (!grad) return out;
  Matrix dL = out.probs;
  for (std::size_t i = 0; i < labels.size(); ++i) dL(static_cast<Eigen::Index>(i), labels[i]) -= 1.0;
  dL /= n;
  grad->set_zero_like(w);
  grad->Wh = dL.transpose() * c.F;
  grad->bh = dL.colwise().sum().transpose();
  Matrix dF = dL * w.Wh;
  InputGrad dm = encoder_backward(M, c, dF, w.W1, w.W2, *grad);
  if (dM) *dM = std::move(dm);
  return out;
}

inline std::vector<int> labels_of(std::span<const Example> xs) {
  std::vector<int> y;
  y.reserve(xs.size());
  for (const auto& e : xs) y.push_back(e.label);
  return y;
}

// ---------------------------------------------------------------------------
// Inner loop
// ---------------------------------------------------------------------------

struct Adaptation {
  FastWeights phi0;             ///< encoder copy + generated head
  FastWeights phi;              ///< after G steps
  FastWeights grad_sum;         ///< S: sum of the inner gradients (adapted layers only)
  std::vector<double> support_loss;  ///< before each step, then after the last (G + 1 values)
  HeadCache head;
  EncoderCache support_enc;  ///< support forward pass under the shared encoder
  EncoderInput Ms;           ///< support encoder inputs
};

/// Head generation followed by G full-batch gradient steps on the support set.
inline Adaptation inner_adapt(const ModelParams& p, std::span<const Example> support, int n_classes, int G) {
  if (G < 0) throw ArgumentError("G must be >= 0");
  Adaptation a;
  a.Ms = encoder_inputs(p, support);
  const auto y = labels_of(support);
  a.phi0 = encoder_weights(p);
  a.support_enc = encoder_forward(a.Ms, a.phi0.W1, a.phi0.b1, a.phi0.W2, a.phi0.b2);
  auto [Wh, bh] = generate_head(p, a.support_enc.F, y, n_classes, &a.head);
  a.phi0.Wh = std::move(Wh);
  a.phi0.bh = std::move(bh);
  a.phi = a.phi0;
  a.grad_sum.set_zero_like(a.phi0);
  std::array<double, kLayers> rate{};
  for (int l = 0; l < kLayers; ++l) rate[static_cast<std::size_t>(l)] = p.spec().adapt[static_cast<std::size_t>(l)] ? p.inner_lr(l) : 0.0;
  FastWeights g;
  for (int k = 0; k < G; ++k) {
    auto out = loss_and_grad(a.phi, a.Ms, y, &g);
    if (!std::isfinite(out.loss) || !g.all_finite()) throw DivergenceError(k, "non-finite support loss in inner loop");
    a.support_loss.push_back(out.loss);
    for (int l = 0; l < kLayers; ++l) {
      if (!p.spec().adapt[static_cast<std::size_t>(l)]) continue;
      a.phi.step_layer(l, rate[static_cast<std::size_t>(l)], g);
      a.grad_sum.step_layer(l, -1.0, g);
    }
  }
  auto last = loss_and_grad(a.phi, a.Ms, y, nullptr);
  if (!std::isfinite(last.loss)) throw DivergenceError(G, "non-finite support loss after adaptation");
  a.support_loss.push_back(last.loss);
  return a;
}

inline Adaptation inner_adapt(const ModelParams& p, const Episode& ep, int G) {
  return inner_adapt(p, ep.support, ep.n_classes, G);
}

// ---------------------------------------------------------------------------
// First-order meta-gradient
// ---------------------------------------------------------------------------

struct MetaGradient {
  std::vector<double> grad;  ///< same layout as ModelParams::data()
  double query_loss = 0;
  double query_accuracy = 0;
  double support_loss_before = 0;
  double support_loss_after = 0;
};

namespace detail {

/// Adds the gradient of the query loss at fast weights `phiG` (dphi) to the flat gradient,
/// given the adaptation record. Shared by meta_gradient and the objective's own gradient.
inline void accumulate_meta_grad(const ModelParams& p, std::span<const Example> support, std::span<const Example> query,
                                 int n_classes, const Adaptation& a, const FastWeights& dphi, const InputGrad& dMq,
                                 std::vector<double>& out) {
  ModelParams gp(p.spec());
  auto gE = gp.mat(ModelParams::E);
  const int d = p.spec().dim;

  // direct path: phi_G = phi_0 - alpha * S
  gp.mat(ModelParams::W1) += dphi.W1;
  gp.vec(ModelParams::B1) += dphi.b1;
  gp.mat(ModelParams::W2) += dphi.W2;
  gp.vec(ModelParams::B2) += dphi.b2;
  for (int l = 0; l < kLayers; ++l) {
    if (!p.spec().adapt[static_cast<std::size_t>(l)]) continue;
    gp.rho(l) = -dphi.layer_dot(l, a.grad_sum) * sigmoid(p.rho(l));
  }

  // head path: generator, prototypes, support encoder, embeddings
  Matrix dO(n_classes, d + 1);
  dO.leftCols(d) = dphi.Wh;
  dO.col(d) = dphi.bh;
  gp.mat(ModelParams::G2) += dO.transpose() * a.head.U;
  gp.vec(ModelParams::C2) += dO.colwise().sum().transpose();
  Matrix dAg = ((dO * p.mat(ModelParams::G2)).array() * (1.0 - a.head.U.array().square())).matrix();
  gp.mat(ModelParams::G1) += dAg.transpose() * a.head.P;
  gp.vec(ModelParams::C1) += dAg.colwise().sum().transpose();
  Matrix dP = dAg * p.mat(ModelParams::G1);
  std::vector<int> cnt(static_cast<std::size_t>(n_classes), 0);
  for (const auto& e : support) cnt[static_cast<std::size_t>(e.label)] += 1;
  Matrix dFs(static_cast<Eigen::Index>(support.size()), d);
  for (std::size_t i = 0; i < support.size(); ++i)
    dFs.row(static_cast<Eigen::Index>(i)) = dP.row(support[i].label) / cnt[static_cast<std::size_t>(support[i].label)];
  FastWeights genc;
  genc.set_zero_like(a.phi0);
  InputGrad dMs = encoder_backward(a.Ms, a.support_enc, dFs, p.mat(ModelParams::W1), p.mat(ModelParams::W2), genc);
  gp.mat(ModelParams::W1) += genc.W1;
  gp.vec(ModelParams::B1) += genc.b1;
  gp.mat(ModelParams::W2) += genc.W2;
  gp.vec(ModelParams::B2) += genc.b2;

  scatter_input_grad(support, dMs, gE);
  scatter_input_grad(query, dMq, gE);
  out = std::move(gp.data());
}

}  // namespace detail

/// Gradient of the first-order objective J(Theta) = L_query(phi_0(Theta) - alpha(Theta) * S)
/// with S, the summed inner gradients, held fixed.
inline MetaGradient meta_gradient(const ModelParams& p, const Episode& ep, int G) {
  Adaptation a = inner_adapt(p, ep, G);
  EncoderInput Mq = encoder_inputs(p, ep.query);
  const auto yq = labels_of(ep.query);
  FastWeights dphi;
  InputGrad dMq;
  auto q = loss_and_grad(a.phi, Mq, yq, &dphi, &dMq);
  MetaGradient mg;
  mg.query_loss = q.loss;
  mg.query_accuracy = q.accuracy;
  mg.support_loss_before = a.support_loss.front();
  mg.support_loss_after = a.support_loss.back();
  detail::accumulate_meta_grad(p, ep.support, ep.query, ep.n_classes, a, dphi, dMq, mg.grad);
  return mg;
}

/// J(Theta) for a frozen S (from an adaptation at the reference parameters).
inline double first_order_objective(const ModelParams& p, const Episode& ep, const FastWeights& S) {
  const auto ys = labels_of(ep.support);
  EncoderInput Ms = encoder_inputs(p, ep.support);
  FastWeights phi = encoder_weights(p);
  auto enc = encoder_forward(Ms, phi.W1, phi.b1, phi.W2, phi.b2);
  auto [Wh, bh] = generate_head(p, enc.F, ys, ep.n_classes);
  phi.Wh = std::move(Wh);
  phi.bh = std::move(bh);
  for (int l = 0; l < kLayers; ++l)
    if (p.spec().adapt[static_cast<std::size_t>(l)]) phi.step_layer(l, p.inner_lr(l), S);
  EncoderInput Mq = encoder_inputs(p, ep.query);
  return loss_and_grad(phi, Mq, labels_of(ep.query), nullptr).loss;
}

struct GradCheckResult {
  double max_rel_error = 0;
  double max_abs_error = 0;
  double error_norm = 0;  ///< ||analytic - numeric||_2
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Central finite differences of the first-order objective against meta_gradient.
/// Relative error per coordinate is |a - n| / max(1e-6, |a|, |n|).
inline GradCheckResult grad_check(const ModelParams& p, const Episode& ep, double eps, int G) {
  if (p.size() > 20000) throw PreconditionError("model too large for finite differences");
  Adaptation a = inner_adapt(p, ep, G);
  MetaGradient mg = meta_gradient(p, ep, G);
  ModelParams q = p;
  GradCheckResult r;
  double sq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double x = q.data()[i];
    q.data()[i] = x + eps;
    const double fp = first_order_objective(q, ep, a.grad_sum);
    q.data()[i] = x - eps;
    const double fm = first_order_objective(q, ep, a.grad_sum);
    q.data()[i] = x;
    const double num = (fp - fm) / (2 * eps);
    const double an = mg.grad[i];
    const double abs_err = std::abs(an - num);
    const double rel = abs_err / std::max({1e-6, std::abs(an), std::abs(num)});
    sq += abs_err * abs_err;
    r.max_abs_error = std::max(r.max_abs_error, abs_err);
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_index = i;
    }
    ++r.checked;
  }
  r.error_norm = std::sqrt(sq);
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Nearest class mean (squared Euclidean) of the unadapted encoder.
inline double proto_eval(const ModelParams& p, const Episode& ep) {
  Matrix Fs = encode_batch(p, ep.support);
  Matrix Fq = encode_batch(p, ep.query);
  Matrix P = class_prototypes(Fs, labels_of(ep.support), ep.n_classes);
  int correct = 0;
  for (std::size_t i = 0; i < ep.query.size(); ++i) {
    Eigen::Index best;
    (P.rowwise() - Fq.row(static_cast<Eigen::Index>(i))).rowwise().squaredNorm().minCoeff(&best);
    correct += best == ep.query[i].label ? 1 : 0;
  }
  return ep.query.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(ep.query.size());
}

/// Head generation plus `steps` inner updates on `train`, accuracy on `test`.
inline double finetune_eval(const ModelParams& p, std::span<const Example> train, std::span<const Example> test,
                            int n_classes, int steps) {
  Adaptation a = inner_adapt(p, train, n_classes, steps);
  EncoderInput Mt = encoder_inputs(p, test);
  return loss_and_grad(a.phi, Mt, labels_of(test), nullptr).accuracy;
}

/// Episode accuracy of a meta-trained model: adapt on support with G steps, score the query.
inline double adapted_eval(const ModelParams& p, const Episode& ep, int G) {
  return finetune_eval(p, ep.support, ep.query, ep.n_classes, G);
}

// ---------------------------------------------------------------------------
// Outer optimizer
// ---------------------------------------------------------------------------

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long t = 0;
  std::vector<double> m, v;

  void step(std::vector<double>& theta, const std::vector<double>& g) {
    if (m.size() != theta.size()) {
      m.assign(theta.size(), 0.0);
      v.assign(theta.size(), 0.0);
    }
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = beta1 * m[i] + (1 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1 - beta2) * g[i] * g[i];
      theta[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
  friend bool operator==(const Adam&, const Adam&) = default;
};

struct OuterStepResult {
  double query_loss = 0;
  double query_accuracy = 0;
  double support_loss_before = 0;
  double support_loss_after = 0;
};

/// Mean of per-task meta-gradients (accumulated in batch order) and one Adam update.
inline OuterStepResult outer_step(ModelParams& p, std::span<const MetaGradient> grads, Adam& opt, long step = 0) {
  if (grads.empty()) throw ArgumentError("empty batch");
  std::vector<double> g(p.size(), 0.0);
  OuterStepResult r;
  for (const auto& mg : grads) {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += mg.grad[i];
    r.query_loss += mg.query_loss;
    r.query_accuracy += mg.query_accuracy;
    r.support_loss_before += mg.support_loss_before;
    r.support_loss_after += mg.support_loss_after;
  }
  const double inv = 1.0 / static_cast<double>(grads.size());
  for (double& x : g) {
    x *= inv;
    if (!std::isfinite(x)) throw DivergenceError(step, "non-finite meta-gradient");
  }
  r.query_loss *= inv;
  r.query_accuracy *= inv;
  r.support_loss_before *= inv;
  r.support_loss_after *= inv;
  opt.step(p.data(), g);
  if (!p.all_finite()) throw DivergenceError(step, "non-finite parameters after update");
  return r;
}

inline OuterStepResult outer_step(ModelParams& p, std::span<const Episode> batch, int G, Adam& opt, long step = 0) {
  std::vector<MetaGradient> gs;
  for (const auto& ep : batch) gs.push_back(meta_gradient(p, ep, G));
  return outer_step(p, std::span<const MetaGradient>(gs), opt, step);
}

// ---------------------------------------------------------------------------
// Episode sources for training
// ---------------------------------------------------------------------------

class EpisodeSource {
 public:
  virtual ~EpisodeSource() = default;
  /// Called once per training step before the batch is drawn.
  virtual void begin_step(long /*step*/, const ModelParams& /*params*/) {}
  virtual Episode next(Rng& rng) = 0;
  /// Mixing weight of the dynamic distribution at the current step (0 for static sources).
  virtual double lambda() const { return 0.0; }
  /// Waits for background work.
  virtual void finish() {}
};

class SamplerSource : public EpisodeSource {
 public:
  explicit SamplerSource(SamplerPtr s) : sampler_(std::move(s)) {}
  Episode next(Rng& rng) override { return sampler_->next_episode(rng); }

 private:
  SamplerPtr sampler_;
};

}  // namespace metatask
