#pragma once

#include <Eigen/Dense>

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "metatask/error.hpp"
#include "metatask/rng.hpp"

namespace metatask {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct KMeansOptions {
  int max_iters = 100;
  double tol = 1e-4;  ///< centroid shift relative to the data spread
};

/// Output of k-means. Items are opaque ids (word ids, sentence ids).
struct Clustering {
  int k = 0;
  std::vector<std::int32_t> items;
  std::vector<int> assignment;                     ///< parallel to items
  Matrix centroids;                                ///< k x dim
  std::vector<std::vector<std::int32_t>> members;  ///< cluster -> item ids
  double inertia = 0.0;
  std::vector<double> inertia_history;  ///< after every assignment step, then the final value
  int iterations = 0;
  bool fixed_point = false;  ///< stopped because an assignment pass changed nothing

  std::size_t size() const { return items.size(); }

  /// Cluster of an item id, or -1.
  int cluster_of(std::int32_t item) const {
    for (std::size_t i = 0; i < items.size(); ++i)
      if (items[i] == item) return assignment[i];
    return -1;
  }

  /// item id -> cluster for ids in [0, n); -1 where absent.
  std::vector<int> dense_lookup(std::size_t n) const {
    std::vector<int> out(n, -1);
    for (std::size_t i = 0; i < items.size(); ++i)
      if (items[i] >= 0 && static_cast<std::size_t>(items[i]) < n) out[static_cast<std::size_t>(items[i])] = assignment[i];
    return out;
  }

  void rebuild_members() {
    members.assign(static_cast<std::size_t>(k), {});
    for (std::size_t i = 0; i < items.size(); ++i) members[static_cast<std::size_t>(assignment[i])].push_back(items[i]);
  }

  friend bool operator==(const Clustering& a, const Clustering& b) {
    return a.k == b.k && a.items == b.items && a.assignment == b.assignment && a.centroids == b.centroids &&
           a.inertia == b.inertia;
  }
};

namespace detail {

inline std::size_t nearest(const Matrix& centroids, const double* x, std::size_t dim, double* best_d2) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    const double* m = centroids.row(c).data();
    double d2 = 0;
    for (std::size_t j = 0; j < dim; ++j) {
      const double t = x[j] - m[j];
      d2 += t * t;
    }
    if (d2 < bd) {
      bd = d2;
      best = static_cast<std::size_t>(c);
    }
  }
  *best_d2 = bd;
  return best;
}

inline double sq_dist(const double* a, const double* b, std::size_t dim) {
  double s = 0;
  for (std::size_t j = 0; j < dim; ++j) {
    const double t = a[j] - b[j];
    s += t * t;
  }
  return s;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding.
///
/// Rows of `points` are items; `item_ids` names them (defaults to 0..n-1).
/// Empty clusters are refilled with the point farthest from its centroid in
/// the highest-inertia cluster.
inline Clustering kmeans(const Matrix& points, std::vector<std::int32_t> item_ids, int k, std::uint64_t seed,
                         const KMeansOptions& opt = {}) {
  const auto n = static_cast<std::size_t>(points.rows());
  const auto dim = static_cast<std::size_t>(points.cols());
  if (item_ids.empty()) {
    item_ids.resize(n);
    for (std::size_t i = 0; i < n; ++i) item_ids[i] = static_cast<std::int32_t>(i);
  }
  if (item_ids.size() != n) throw ArgumentError("item id count does not match point count");
  if (k < 1) throw ArgumentError("k must be >= 1");
  if (static_cast<std::size_t>(k) > n)
    throw ArgumentError("k = " + std::to_string(k) + " exceeds " + std::to_string(n) + " points");
  if (!points.allFinite()) throw ArgumentError("points must be finite");

  Rng rng = Rng::stream(seed, "kmeans");
  const auto K = static_cast<std::size_t>(k);
  Matrix cent(k, static_cast<Eigen::Index>(dim));

  // k-means++ seeding
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::vector<char> chosen(n, 0);
  std::size_t first = rng.index(n);
  cent.row(0) = points.row(static_cast<Eigen::Index>(first));
  chosen[first] = 1;
  for (std::size_t c = 1; c < K; ++c) {
    const double* m = cent.row(static_cast<Eigen::Index>(c - 1)).data();
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], detail::sq_dist(points.row(static_cast<Eigen::Index>(i)).data(), m, dim));
      if (!chosen[i]) total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0) {
      std::vector<double> w(n);
      for (std::size_t i = 0; i < n; ++i) w[i] = chosen[i] ? 0.0 : d2[i];
      pick = rng.weighted_index(w);
    } else {
      // remaining points coincide with chosen centres
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) rest.push_back(i);
      pick = rest[rng.index(rest.size())];
    }
    chosen[pick] = 1;
    cent.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(pick));
  }

  Vector mean = points.colwise().mean().transpose();
  double spread = 0;
  for (std::size_t i = 0; i < n; ++i) spread += (points.row(static_cast<Eigen::Index>(i)).transpose() - mean).squaredNorm();
  spread = std::sqrt(spread / static_cast<double>(n));

  Clustering out;
  out.k = k;
  out.items = std::move(item_ids);
  std::vector<int> assign(n, -1);
  std::vector<double> pd2(n, 0.0);

  auto update_centroids = [&](Matrix& c) {
    c.setZero();
    std::vector<std::size_t> count(K, 0);
    for (std::size_t i = 0; i < n; ++i) {
      c.row(assign[i]) += points.row(static_cast<Eigen::Index>(i));
      count[static_cast<std::size_t>(assign[i])] += 1;
    }
    for (std::size_t j = 0; j < K; ++j) c.row(static_cast<Eigen::Index>(j)) /= static_cast<double>(count[j]);
  };

  for (int iter = 0; iter < std::max(1, opt.max_iters); ++iter) {
    out.iterations = iter + 1;
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const int a = static_cast<int>(detail::nearest(cent, points.row(static_cast<Eigen::Index>(i)).data(), dim, &pd2[i]));
      if (a != assign[i]) changed = true;
      assign[i] = a;
    }
    // empty-cluster repair
    for (;;) {
      std::vector<std::size_t> count(K, 0);
      std::vector<double> cin(K, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        count[static_cast<std::size_t>(assign[i])] += 1;
        cin[static_cast<std::size_t>(assign[i])] += pd2[i];
      }
      std::size_t empty = K;
      for (std::size_t j = 0; j < K && empty == K; ++j)
        if (count[j] == 0) empty = j;
      if (empty == K) break;
      std::size_t worst = 0;
      for (std::size_t j = 1; j < K; ++j)
        if (count[j] > 1 && (count[worst] < 2 || cin[j] > cin[worst])) worst = j;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i)
        if (static_cast<std::size_t>(assign[i]) == worst && (far == n || pd2[i] > pd2[far])) far = i;
      assign[far] = static_cast<int>(empty);
      pd2[far] = 0.0;
      cent.row(static_cast<Eigen::Index>(empty)) = points.row(static_cast<Eigen::Index>(far));
      changed = true;
    }
    double inertia = 0;
    for (double v : pd2) inertia += v;
    out.inertia_history.push_back(inertia);
    if (!changed) {
      out.fixed_point = true;
      break;
    }
    Matrix next(cent.rows(), cent.cols());
    update_centroids(next);
    const double shift = (next - cent).rowwise().norm().maxCoeff();
    cent = std::move(next);
    if (shift < opt.tol * spread) break;
  }

  update_centroids(cent);
  double inertia = 0;
  for (std::size_t i = 0; i < n; ++i)
    inertia += detail::sq_dist(points.row(static_cast<Eigen::Index>(i)).data(), cent.row(assign[i]).data(), dim);
  out.inertia = inertia;
  out.inertia_history.push_back(inertia);
  out.assignment = std::move(assign);
  out.centroids = std::move(cent);
  out.rebuild_members();
  return out;
}

/// Cluster ids of `points` under fixed centroids (nearest centroid, lowest index on ties).
inline std::vector<int> assign_nearest(const Matrix& points, const Matrix& centroids) {
  std::vector<int> out(static_cast<std::size_t>(points.rows()));
  double d2;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    out[static_cast<std::size_t>(i)] =
        static_cast<int>(detail::nearest(centroids, points.row(i).data(), static_cast<std::size_t>(points.cols()), &d2));
  return out;
}

// ---------------------------------------------------------------------------
// Snapshot:
//   metatask-clustering 1
//   k <k> dim <d> items <n>
//   inertia <x>
//   c <v1> ... <vd>          (k lines)
//   <item> <cluster>         (n lines)
//   end
// Doubles use the shortest representation that reads back to the same value.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline double parse_double(std::string_view s, std::size_t line) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw FormatError(line, "bad number '" + std::string(s) + "'");
  return v;
}

inline void save_clustering(const Clustering& c, std::ostream& out) {
  out << "metatask-clustering 1\n";
  out << "k " << c.k << " dim " << c.centroids.cols() << " items " << c.items.size() << '\n';
  out << "inertia " << format_double(c.inertia) << '\n';
  for (Eigen::Index r = 0; r < c.centroids.rows(); ++r) {
    out << 'c';
    for (Eigen::Index j = 0; j < c.centroids.cols(); ++j) out << ' ' << format_double(c.centroids(r, j));
    out << '\n';
  }
  for (std::size_t i = 0; i < c.items.size(); ++i) out << c.items[i] << ' ' << c.assignment[i] << '\n';
  out << "end\n";
}

inline Clustering load_clustering(std::istream& in) {
  std::string line;
  std::size_t ln = 0;
  auto next = [&]() -> std::string& {
    if (!std::getline(in, line)) throw FormatError(ln + 1, "unexpected end of clustering snapshot");
    ++ln;
    return line;
  };
  if (next() != "metatask-clustering 1") throw FormatError(ln, "not a clustering snapshot (version 1)");
  Clustering c;
  std::size_t dim = 0, n = 0;
  {
    std::istringstream is(next());
    std::string a, b, d;
    if (!(is >> a >> c.k >> b >> dim >> d >> n) || a != "k" || b != "dim" || d != "items" || c.k < 1)
      throw FormatError(ln, "bad size line");
  }
  {
    std::istringstream is(next());
    std::string key, v;
    if (!(is >> key >> v) || key != "inertia") throw FormatError(ln, "expected inertia");
    c.inertia = parse_double(v, ln);
  }
  c.centroids.resize(c.k, static_cast<Eigen::Index>(dim));
  for (int r = 0; r < c.k; ++r) {
    std::istringstream is(next());
    std::string tag, v;
    if (!(is >> tag) || tag != "c") throw FormatError(ln, "expected centroid row");
    for (std::size_t j = 0; j < dim; ++j) {
      if (!(is >> v)) throw FormatError(ln, "short centroid row");
      c.centroids(r, static_cast<Eigen::Index>(j)) = parse_double(v, ln);
    }
  }
  c.items.resize(n);
  c.assignment.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::istringstream is(next());
    if (!(is >> c.items[i] >> c.assignment[i]) || c.assignment[i] < 0 || c.assignment[i] >= c.k)
      throw FormatError(ln, "bad assignment line");
  }
  if (next() != "end") throw FormatError(ln, "expected 'end'");
  c.rebuild_members();
  c.fixed_point = true;
  return c;
}

inline void save_clustering_file(const Clustering& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  save_clustering(c, out);
}

inline Clustering load_clustering_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  return load_clustering(in);
}

}  // namespace metatask
