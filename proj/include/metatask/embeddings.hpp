#pragma once

#include <Eigen/Dense>
#include <Eigen/QR>
#include <Eigen/SVD>
#include <Eigen/Sparse>

#include <cmath>
#include <fstream>
#include <istream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "metatask/corpus.hpp"
#include "metatask/error.hpp"
#include "metatask/kmeans.hpp"
#include "metatask/rng.hpp"

namespace metatask {

/// Word vectors indexed by token id. Rows without a vector are zero and flagged absent.
struct EmbeddingTable {
  int dim = 0;
  Matrix vectors;     ///< vocab_size x dim, raw values
  Matrix normalized;  ///< unit-norm copy (zero rows stay zero)
  std::vector<char> present;

  bool has(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < present.size() && present[static_cast<std::size_t>(id)];
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (char p : present) n += p ? 1 : 0;
    return n;
  }

  void renormalize() {
    normalized = vectors;
    for (Eigen::Index r = 0; r < vectors.rows(); ++r) {
      const double nrm = vectors.row(r).norm();
      if (present[static_cast<std::size_t>(r)] && nrm > 0) normalized.row(r) /= nrm;
      else normalized.row(r).setZero();
    }
  }
};

/// Reads the text word-vector format: header "count dim", then "word v1 ... vdim" per line.
/// Words missing from the vocabulary are skipped.
inline EmbeddingTable load_embeddings(std::istream& in, const Vocabulary& vocab) {
  std::string line;
  std::size_t ln = 0;
  std::size_t count = 0;
  int dim = 0;
  if (!std::getline(in, line)) throw FormatError(1, "missing header");
  ++ln;
  {
    std::istringstream is(line);
    if (!(is >> count >> dim) || dim < 1) throw FormatError(ln, "header must be 'count dim'");
  }
  EmbeddingTable t;
  t.dim = dim;
  t.vectors = Matrix::Zero(static_cast<Eigen::Index>(vocab.size()), dim);
  t.present.assign(vocab.size(), 0);
  std::size_t rows = 0;
  std::vector<double> vals;
  while (std::getline(in, line)) {
    ++ln;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::size_t pos = line.find_first_not_of(" \t");
    std::size_t end = line.find_first_of(" \t", pos);
    const std::string word = line.substr(pos, end - pos);
    vals.clear();
    pos = end;
    while (pos != std::string::npos) {
      pos = line.find_first_not_of(" \t", pos);
      if (pos == std::string::npos) break;
      end = line.find_first_of(" \t", pos);
      vals.push_back(parse_double(std::string_view(line).substr(pos, end == std::string::npos ? std::string::npos : end - pos), ln));
      pos = end;
    }
    if (vals.size() != static_cast<std::size_t>(dim))
      throw FormatError(ln, "expected " + std::to_string(dim) + " values, found " + std::to_string(vals.size()));
    ++rows;
    const TokenId id = vocab.lexicon.find(word);
    if (id < 0 || is_reserved(id)) continue;
    for (int j = 0; j < dim; ++j) t.vectors(id, j) = vals[static_cast<std::size_t>(j)];
    t.present[static_cast<std::size_t>(id)] = 1;
  }
  if (rows != count)
    throw FormatError(ln, "header announces " + std::to_string(count) + " vectors, file has " + std::to_string(rows));
  t.renormalize();
  return t;
}

inline EmbeddingTable load_embeddings_file(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  return load_embeddings(in, vocab);
}

inline void save_embeddings(const EmbeddingTable& t, const Lexicon& lex, std::ostream& out) {
  out << t.count() << ' ' << t.dim << '\n';
  for (std::size_t i = 0; i < t.present.size(); ++i) {
    if (!t.present[i]) continue;
    out << lex.word(static_cast<TokenId>(i));
    for (int j = 0; j < t.dim; ++j) out << ' ' << format_double(t.vectors(static_cast<Eigen::Index>(i), j));
    out << '\n';
  }
}

/// Symmetric co-occurrence counts within `window` tokens, reserved ids and self pairs excluded.
inline Eigen::SparseMatrix<double> cooccurrence_counts(const Corpus& c, std::size_t vocab_size, int window) {
  if (window < 1) throw ArgumentError("window must be >= 1");
  std::vector<Eigen::Triplet<double>> trip;
  for (const auto& s : c.sentences) {
    const auto& t = s.tokens;
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (is_reserved(t[i])) continue;
      for (std::size_t j = i + 1; j < t.size() && j <= i + static_cast<std::size_t>(window); ++j) {
        if (is_reserved(t[j]) || t[i] == t[j]) continue;
        trip.emplace_back(t[i], t[j], 1.0);
        trip.emplace_back(t[j], t[i], 1.0);
      }
    }
  }
  const auto n = static_cast<Eigen::Index>(vocab_size);
  Eigen::SparseMatrix<double> m(n, n);
  m.setFromTriplets(trip.begin(), trip.end());
  return m;
}

/// Embeddings from a rank-`dim` randomized factorization of the PPMI co-occurrence matrix.
inline EmbeddingTable cooc_embeddings(const Corpus& c, const Vocabulary& vocab, int dim, int window, std::uint64_t seed) {
  const std::size_t eligible = vocab.eligible_words().size();
  if (dim < 1 || static_cast<std::size_t>(dim) > eligible)
    throw ArgumentError("dim " + std::to_string(dim) + " must lie in [1, " + std::to_string(eligible) + "]");
  Eigen::SparseMatrix<double> counts = cooccurrence_counts(c, vocab.size(), window);
  const double total = counts.sum();
  if (total <= 0) throw PreconditionError("corpus has no co-occurrences");

  Vector rowsum = Vector::Zero(counts.rows());
  for (int k = 0; k < counts.outerSize(); ++k)
    for (Eigen::SparseMatrix<double>::InnerIterator it(counts, k); it; ++it) rowsum(it.row()) += it.value();

  std::vector<Eigen::Triplet<double>> trip;
  for (int k = 0; k < counts.outerSize(); ++k)
    for (Eigen::SparseMatrix<double>::InnerIterator it(counts, k); it; ++it) {
      const double pmi = std::log(it.value() * total / (rowsum(it.row()) * rowsum(it.col())));
      if (pmi > 0) trip.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()), pmi);
    }
  Eigen::SparseMatrix<double> A(counts.rows(), counts.cols());
  A.setFromTriplets(trip.begin(), trip.end());

  // randomized range finder with power iterations (A is symmetric)
  const Eigen::Index n = A.rows();
  const Eigen::Index r = std::min<Eigen::Index>(n, dim + 10);
  Rng rng = Rng::stream(seed, "cooc-embeddings");
  Eigen::MatrixXd omega(n, r);
  for (Eigen::Index j = 0; j < r; ++j)
    for (Eigen::Index i = 0; i < n; ++i) omega(i, j) = rng.normal();
  auto orth = [](const Eigen::MatrixXd& y) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(y);
    return Eigen::MatrixXd(qr.householderQ() * Eigen::MatrixXd::Identity(y.rows(), y.cols()));
  };
  Eigen::MatrixXd Q = orth(A * omega);
  for (int it = 0; it < 4; ++it) Q = orth(A * Q);
  Eigen::MatrixXd B = Q.transpose() * A;  // r x n
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(B, Eigen::ComputeThinU);
  Eigen::MatrixXd U = Q * svd.matrixU();

  EmbeddingTable t;
  t.dim = dim;
  t.vectors = Matrix::Zero(n, dim);
  t.present.assign(static_cast<std::size_t>(n), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (is_reserved(static_cast<TokenId>(i)) || rowsum(i) <= 0) continue;
    for (int j = 0; j < dim; ++j) {
      double v = U(i, j) * std::sqrt(svd.singularValues()(j));
      t.vectors(i, j) = v;
    }
    t.present[static_cast<std::size_t>(i)] = 1;
  }
  // fix the sign of each component so that results do not depend on the SVD's sign choice
  for (int j = 0; j < dim; ++j) {
    Eigen::Index arg = 0;
    t.vectors.col(j).cwiseAbs().maxCoeff(&arg);
    if (t.vectors(arg, j) < 0) t.vectors.col(j) *= -1.0;
  }
  t.renormalize();
  return t;
}

/// Mean of the unit-normalized vectors of the sentence's in-table tokens.
inline Vector embed_sentence(std::span<const TokenId> tokens, const EmbeddingTable& t) {
  Vector v = Vector::Zero(t.dim);
  std::size_t n = 0;
  for (TokenId id : tokens) {
    if (!t.has(id)) continue;
    v += t.normalized.row(id).transpose();
    ++n;
  }
  if (n == 0) throw CoverageError("no token of the sentence has a vector");
  return v / static_cast<double>(n);
}

/// k-means over the unit vectors of eligible words that have a vector.
inline Clustering cluster_words(const EmbeddingTable& t, const Vocabulary& vocab, int k, std::uint64_t seed,
                                const KMeansOptions& opt = {}) {
  std::vector<std::int32_t> ids;
  for (TokenId w : vocab.eligible_words())
    if (t.has(w)) ids.push_back(w);
  Matrix pts(static_cast<Eigen::Index>(ids.size()), t.dim);
  for (std::size_t i = 0; i < ids.size(); ++i) pts.row(static_cast<Eigen::Index>(i)) = t.normalized.row(ids[i]);
  return kmeans(pts, std::move(ids), k, seed, opt);
}

/// Embeds every sentence (sentences without coverage are left out) and clusters them.
inline Clustering cluster_sentences(const Corpus& c, const EmbeddingTable& t, int k, std::uint64_t seed,
                                    const KMeansOptions& opt = {}) {
  std::vector<std::int32_t> ids;
  std::vector<Vector> rows;
  for (const auto& s : c.sentences) {
    bool covered = false;
    for (TokenId id : s.tokens) covered = covered || t.has(id);
    if (!covered) continue;
    ids.push_back(s.sent_id);
    rows.push_back(embed_sentence(s.tokens, t));
  }
  Matrix pts(static_cast<Eigen::Index>(rows.size()), t.dim);
  for (std::size_t i = 0; i < rows.size(); ++i) pts.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return kmeans(pts, std::move(ids), k, seed, opt);
}

}  // namespace metatask
