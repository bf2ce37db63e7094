#pragma once

#include "rnn_dynamo/common.hpp"
#include "rnn_dynamo/corpus.hpp"
#include "rnn_dynamo/recurrent.hpp"
#include "rnn_dynamo/statespace.hpp"
#include "rnn_dynamo/trainer.hpp"

#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace rnn_dynamo {

struct Clustering {
  int k = 0;
  MatrixXd centroids;              // k x d
  std::vector<int> assignment;     // one cluster id per point
  std::vector<int> sizes;          // members per cluster
  double inertia = 0.0;            // sum of squared distances to assigned centroids
  std::vector<double> inertia_trace;  // inertia after each assignment step of the kept run
};

namespace detail {

inline double squared_distance(const MatrixXd& a, Eigen::Index i, const MatrixXd& b, Eigen::Index j) {
  double s = 0.0;
  for (Eigen::Index d = 0; d < a.cols(); ++d) {
    const double diff = a(i, d) - b(j, d);
    s += diff * diff;
  }
  return s;
}

// Nearest-centroid assignment (ties to the lowest index); returns inertia.
inline double assign_points(const MatrixXd& points, const MatrixXd& centroids, std::vector<int>& assignment,
                            std::vector<double>* point_cost = nullptr) {
  double inertia = 0.0;
  assignment.resize(static_cast<std::size_t>(points.rows()));
  if (point_cost) point_cost->resize(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    int best = 0;
    double best_d = squared_distance(points, i, centroids, 0);
    for (Eigen::Index c = 1; c < centroids.rows(); ++c) {
      const double d = squared_distance(points, i, centroids, c);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    assignment[static_cast<std::size_t>(i)] = best;
    if (point_cost) (*point_cost)[static_cast<std::size_t>(i)] = best_d;
    inertia += best_d;
  }
  return inertia;
}

inline std::size_t count_distinct_rows(const MatrixXd& points) {
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    for (Eigen::Index d = 0; d < points.cols(); ++d) rows[static_cast<std::size_t>(i)].push_back(points(i, d));
  }
  std::sort(rows.begin(), rows.end());
  return static_cast<std::size_t>(std::unique(rows.begin(), rows.end()) - rows.begin());
}

inline std::vector<int> group_sizes(const std::vector<int>& assignment, int k) {
  std::vector<int> sizes(static_cast<std::size_t>(k), 0);
  for (int a : assignment) ++sizes[static_cast<std::size_t>(a)];
  return sizes;
}

}  // namespace detail

/// Lloyd's algorithm, best of `restarts` runs by inertia. Initial centroids
/// are distinct sample points drawn uniformly at random; a cluster that ends
/// up empty is re-seeded at the point farthest from its centroid.
inline Clustering kmeans(const MatrixXd& points, int k, std::uint64_t seed, int restarts = 10,
                         int max_iter = 300, double tol = 1e-6) {
  const auto S = points.rows();
  if (k < 1) throw Error("kmeans: k must be >= 1");
  if (S < k) throw Error("kmeans: fewer points than clusters");
  if (detail::count_distinct_rows(points) < static_cast<std::size_t>(k)) {
    throw Error("kmeans: k exceeds the number of distinct points");
  }
  Rng rng(seed);
  Clustering best;
  best.inertia = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(static_cast<std::size_t>(S));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int run = 0; run < std::max(1, restarts); ++run) {
    rng.shuffle(order);
    MatrixXd centroids(k, points.cols());
    int chosen = 0;
    for (std::size_t idx = 0; idx < order.size() && chosen < k; ++idx) {
      const auto row = static_cast<Eigen::Index>(order[idx]);
      bool duplicate = false;
      for (int c = 0; c < chosen && !duplicate; ++c) {
        duplicate = detail::squared_distance(points, row, centroids, c) == 0.0;
      }
      if (!duplicate) centroids.row(chosen++) = points.row(row);
    }
    Clustering cur;
    cur.k = k;
    std::vector<double> cost;
    for (int iter = 0; iter < max_iter; ++iter) {
      cur.inertia_trace.push_back(detail::assign_points(points, centroids, cur.assignment, &cost));
      MatrixXd next = MatrixXd::Zero(k, points.cols());
      const auto sizes = detail::group_sizes(cur.assignment, k);
      for (Eigen::Index i = 0; i < S; ++i) next.row(cur.assignment[static_cast<std::size_t>(i)]) += points.row(i);
      std::vector<bool> taken(static_cast<std::size_t>(S), false);
      for (int c = 0; c < k; ++c) {
        if (sizes[static_cast<std::size_t>(c)] > 0) {
          next.row(c) /= static_cast<double>(sizes[static_cast<std::size_t>(c)]);
          continue;
        }
        Eigen::Index far = -1;
        for (Eigen::Index i = 0; i < S; ++i) {
          if (taken[static_cast<std::size_t>(i)]) continue;
          if (far < 0 || cost[static_cast<std::size_t>(i)] > cost[static_cast<std::size_t>(far)]) far = i;
        }
        taken[static_cast<std::size_t>(far)] = true;
        next.row(c) = points.row(far);
      }
      const double shift = (next - centroids).rowwise().norm().maxCoeff();
      centroids = std::move(next);
      if (shift <= tol) break;
    }
    cur.inertia = detail::assign_points(points, centroids, cur.assignment);
    cur.inertia_trace.push_back(cur.inertia);
    cur.centroids = std::move(centroids);
    cur.sizes = detail::group_sizes(cur.assignment, k);
    if (cur.inertia < best.inertia) best = std::move(cur);
  }
  return best;
}

/// Clustering whose groups are given labels in [0, k); centroids are group
/// means (zero rows for empty groups).
inline Clustering group_by_labels(const MatrixXd& points, const std::vector<int>& labels, int k) {
  if (static_cast<Eigen::Index>(labels.size()) != points.rows()) throw Error("label count mismatch");
  Clustering c;
  c.k = k;
  c.assignment = labels;
  c.sizes = detail::group_sizes(labels, k);
  c.centroids = MatrixXd::Zero(k, points.cols());
  for (Eigen::Index i = 0; i < points.rows(); ++i) c.centroids.row(labels[static_cast<std::size_t>(i)]) += points.row(i);
  for (int g = 0; g < k; ++g) {
    if (c.sizes[static_cast<std::size_t>(g)] > 0) c.centroids.row(g) /= c.sizes[static_cast<std::size_t>(g)];
  }
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    c.inertia += detail::squared_distance(points, i, c.centroids, labels[static_cast<std::size_t>(i)]);
  }
  return c;
}

struct SilhouetteResult {
  std::vector<double> coefficients;
  double mean = 0.0;

  /// Mean coefficient of the points carrying each label (0 for absent labels).
  std::vector<double> per_group(const std::vector<int>& groups, int k) const {
    std::vector<double> sum(static_cast<std::size_t>(k), 0.0);
    std::vector<int> count(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < groups.size(); ++i) {
      sum[static_cast<std::size_t>(groups[i])] += coefficients[i];
      ++count[static_cast<std::size_t>(groups[i])];
    }
    for (std::size_t g = 0; g < sum.size(); ++g) sum[g] = count[g] ? sum[g] / count[g] : 0.0;
    return sum;
  }
};

/// Euclidean silhouette. Points alone in their group score 0.
inline SilhouetteResult silhouette(const MatrixXd& points, const std::vector<int>& groups) {
  const auto S = points.rows();
  if (static_cast<Eigen::Index>(groups.size()) != S) throw Error("silhouette: group count mismatch");
  std::map<int, int> compact;
  for (int g : groups) {
    if (g < 0) throw Error("silhouette: negative group id");
    compact.emplace(g, 0);
  }
  if (compact.size() < 2) throw Error("silhouette: need at least two non-empty groups");
  int next = 0;
  for (auto& [g, id] : compact) id = next++;
  std::vector<int> gid(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) gid[i] = compact[groups[i]];
  const auto sizes = detail::group_sizes(gid, next);

  SilhouetteResult r;
  r.coefficients.assign(static_cast<std::size_t>(S), 0.0);
  parallel_for(static_cast<std::size_t>(S), thread_budget(), [&](std::size_t i) {
    const int own = gid[i];
    if (sizes[static_cast<std::size_t>(own)] <= 1) return;
    std::vector<double> sums(static_cast<std::size_t>(next), 0.0);
    for (Eigen::Index j = 0; j < S; ++j) {
      if (static_cast<std::size_t>(j) == i) continue;
      sums[static_cast<std::size_t>(gid[static_cast<std::size_t>(j)])] +=
          std::sqrt(detail::squared_distance(points, static_cast<Eigen::Index>(i), points, j));
    }
    const double a = sums[static_cast<std::size_t>(own)] / (sizes[static_cast<std::size_t>(own)] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int g = 0; g < next; ++g) {
      if (g == own) continue;
      b = std::min(b, sums[static_cast<std::size_t>(g)] / sizes[static_cast<std::size_t>(g)]);
    }
    const double denom = std::max(a, b);
    r.coefficients[i] = denom > 0.0 ? (b - a) / denom : 0.0;
  });
  double total = 0.0;
  for (double c : r.coefficients) total += c;
  r.mean = total / static_cast<double>(S);
  return r;
}

/// Distances from each non-empty cluster's centroid to `origin`.
inline SummaryStats centroid_distances(const Clustering& c, const VectorXd& origin) {
  if (origin.size() != c.centroids.cols()) throw Error("centroid_distances: dimension mismatch");
  std::vector<double> d;
  for (int i = 0; i < c.k; ++i) {
    if (c.sizes[static_cast<std::size_t>(i)] == 0) continue;
    d.push_back((c.centroids.row(i).transpose() - origin).norm());
  }
  return summarize(std::move(d));
}

/// Mean distance of each cluster's members to its centroid.
inline SummaryStats cluster_radii(const Clustering& c, const MatrixXd& points) {
  std::vector<double> sum(static_cast<std::size_t>(c.k), 0.0);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const int g = c.assignment[static_cast<std::size_t>(i)];
    sum[static_cast<std::size_t>(g)] += (points.row(i) - c.centroids.row(g)).norm();
  }
  std::vector<double> radii;
  for (int g = 0; g < c.k; ++g) {
    if (c.sizes[static_cast<std::size_t>(g)] == 0) continue;
    radii.push_back(sum[static_cast<std::size_t>(g)] / c.sizes[static_cast<std::size_t>(g)]);
  }
  return summarize(std::move(radii));
}

inline double cosine(const VectorXd& a, const VectorXd& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw Error("cosine of a zero-norm vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

struct Alignment {
  MatrixXd cosine;             // [readout i][centroid j]
  double mean_diagonal = 0.0;
  std::vector<int> best_match;  // argmax_j cosine(r_i, c_j)
  bool diagonal_dominant = false;
};

/// Cosines between readout rows and class centroids (row i of each matrix
/// belongs to class i).
inline Alignment readout_alignment(const MatrixXd& readout_rows, const MatrixXd& centroids,
                                   const std::vector<std::string>& names = {}) {
  if (readout_rows.rows() != centroids.rows() || readout_rows.cols() != centroids.cols()) {
    throw Error("readout_alignment: shape mismatch");
  }
  const auto N = readout_rows.rows();
  auto label = [&](Eigen::Index i) {
    return static_cast<std::size_t>(i) < names.size() ? names[static_cast<std::size_t>(i)] : std::to_string(i);
  };
  for (Eigen::Index i = 0; i < N; ++i) {
    if (readout_rows.row(i).norm() == 0.0) throw Error("zero-norm readout vector for class " + label(i));
    if (centroids.row(i).norm() == 0.0) throw Error("zero-norm centroid for class " + label(i));
  }
  Alignment a;
  a.cosine.resize(N, N);
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index j = 0; j < N; ++j) a.cosine(i, j) = cosine(readout_rows.row(i).transpose(), centroids.row(j).transpose());
  a.mean_diagonal = a.cosine.diagonal().mean();
  a.diagonal_dominant = true;
  for (Eigen::Index i = 0; i < N; ++i) {
    a.best_match.push_back(argmax(a.cosine.row(i).transpose()));
    a.diagonal_dominant = a.diagonal_dominant && a.best_match.back() == i;
  }
  return a;
}

/// Alignment against ground-truth class centroids of final states, in the
/// full space (uncentred) or the top-k PCA space (readout rows projected
/// without centring, centroids with centring).
inline Alignment readout_alignment(const ModelParams& p, const MatrixXd& class_centroids, const PcaBasis* basis,
                                   int k, const std::vector<std::string>& names = {}) {
  if (!basis) return readout_alignment(p.readout_weights, class_centroids, names);
  return readout_alignment(project(*basis, p.readout_weights, k, false), project(*basis, class_centroids, k, true),
                           names);
}

struct PartitionScores {
  int k = 0;
  int projected_dim = 0;
  double silhouette_original = 0.0;
  double silhouette_projected = 0.0;
};

/// K-means with one cluster per intent over every visited state, scored by
/// silhouette in the full space and in the top-`projected_dim` PCA space.
inline PartitionScores partition_quality(const StateSpaceSample& all_states, const PcaBasis& basis, int n_classes,
                                         int projected_dim, std::uint64_t seed) {
  PartitionScores s;
  s.k = n_classes;
  s.projected_dim = projected_dim;
  const auto full = kmeans(all_states.states, n_classes, seed);
  s.silhouette_original = silhouette(all_states.states, full.assignment).mean;
  const MatrixXd proj = project(basis, all_states.states, projected_dim, true);
  const auto low = kmeans(proj, n_classes, seed);
  s.silhouette_projected = silhouette(proj, low.assignment).mean;
  return s;
}

struct FinalClusterReport {
  int projected_dim = 0;
  double silhouette_original = 0.0;
  double silhouette_projected = 0.0;
  SummaryStats distances;  // centroid to projected h0, in the projected space
  SummaryStats radii;      // in the projected space
  Alignment alignment_full;
  Alignment alignment_projected;
};

/// Ground-truth-grouped statistics of final states.
inline FinalClusterReport final_cluster_report(const ModelParams& p, const StateSpaceSample& finals,
                                               const PcaBasis& basis, int projected_dim,
                                               const std::vector<std::string>& names = {}) {
  const int N = p.arch.n_classes;
  FinalClusterReport r;
  r.projected_dim = projected_dim;
  const auto labels = finals.labels();
  r.silhouette_original = silhouette(finals.states, labels).mean;
  const MatrixXd proj = project(basis, finals.states, projected_dim, true);
  r.silhouette_projected = silhouette(proj, labels).mean;
  const auto groups = group_by_labels(proj, labels, N);
  const VectorXd origin = project_point(basis, VectorXd::Zero(basis.dim()), projected_dim, true);
  r.distances = centroid_distances(groups, origin);
  r.radii = cluster_radii(groups, proj);
  const auto full_groups = group_by_labels(finals.states, labels, N);
  r.alignment_full = readout_alignment(p, full_groups.centroids, nullptr, 0, names);
  r.alignment_projected = readout_alignment(p, full_groups.centroids, &basis, projected_dim, names);
  return r;
}

enum class Pattern { convergent, collapse, alignment_failure, alignment_driven, other };

inline std::string_view pattern_code(Pattern p) {
  switch (p) {
    case Pattern::convergent: return "P1";
    case Pattern::collapse: return "P2";
    case Pattern::alignment_failure: return "P3";
    case Pattern::alignment_driven: return "P4";
    case Pattern::other: break;
  }
  return "other";
}

inline std::string_view pattern_title(Pattern p) {
  switch (p) {
    case Pattern::convergent: return "Convergent High Performance";
    case Pattern::collapse: return "Geometric Collapse";
    case Pattern::alignment_failure: return "Alignment Failure";
    case Pattern::alignment_driven: return "Alignment-Driven Classification";
    case Pattern::other: break;
  }
  return "Unclassified";
}

struct PatternThresholds {
  double f1_hi = 0.6;
  double sep_hi = 0.25;
  double align_hi = 0.75;
};

struct DiagnosticRow {
  std::string intent;
  int test_count = 0;
  int train_count = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double silhouette = 0.0;
  double alignment = 0.0;
  Pattern pattern = Pattern::other;
};

/// "High" means at or above the threshold.
inline Pattern classify_pattern(double f1, double separation, double alignment, const PatternThresholds& t = {}) {
  const bool hf = f1 >= t.f1_hi;
  const bool hs = separation >= t.sep_hi;
  const bool ha = alignment >= t.align_hi;
  if (hf && hs && ha) return Pattern::convergent;
  if (!hf && !hs && !ha) return Pattern::collapse;
  if (!hf && hs && !ha) return Pattern::alignment_failure;
  if (hf && !hs && ha) return Pattern::alignment_driven;
  return Pattern::other;
}

inline Pattern classify_pattern(const DiagnosticRow& row, const PatternThresholds& t = {}) {
  return classify_pattern(row.f1, row.silhouette, row.alignment, t);
}

struct DiagnosticsReport {
  int projected_dim = 0;
  std::vector<DiagnosticRow> rows;
  std::vector<std::string> excluded;  // intents missing from the train or test split
};

/// Per-intent F1, label-grouped silhouette of final test states and readout
/// alignment, both in the PCA space holding `variance` of the variance, for
/// intents present in both the train and the test split.
inline DiagnosticsReport per_class_diagnostics(const ModelParams& p, const LabeledCorpus& corpus, const PcaBasis& basis,
                                               const PatternThresholds& thresholds = {}, double variance = 0.95) {
  DiagnosticsReport rep;
  rep.projected_dim = intrinsic_dimensionality(basis, variance);
  const auto metrics = evaluate(p, corpus, Split::test);
  const auto train_counts = corpus.class_counts(Split::train);
  const auto test_counts = corpus.class_counts(Split::test);
  const int N = corpus.n_intents();
  std::vector<bool> diagnosed(static_cast<std::size_t>(N));
  for (int c = 0; c < N; ++c) {
    diagnosed[static_cast<std::size_t>(c)] = train_counts[static_cast<std::size_t>(c)] > 0 &&
                                             test_counts[static_cast<std::size_t>(c)] > 0;
    if (!diagnosed[static_cast<std::size_t>(c)]) rep.excluded.push_back(corpus.intents[static_cast<std::size_t>(c)]);
  }
  const auto finals = collect_states(p, corpus, Split::test, StateSelection::final);
  std::vector<Eigen::Index> keep;
  std::vector<int> labels;
  for (Eigen::Index i = 0; i < finals.size(); ++i) {
    const int l = finals.provenance[static_cast<std::size_t>(i)].label;
    if (!diagnosed[static_cast<std::size_t>(l)]) continue;
    keep.push_back(i);
    labels.push_back(l);
  }
  MatrixXd kept(static_cast<Eigen::Index>(keep.size()), finals.states.cols());
  for (std::size_t i = 0; i < keep.size(); ++i) kept.row(static_cast<Eigen::Index>(i)) = finals.states.row(keep[i]);
  const MatrixXd proj = project(basis, kept, rep.projected_dim, true);
  std::vector<double> sep(static_cast<std::size_t>(N), 0.0);
  if (std::set<int>(labels.begin(), labels.end()).size() >= 2) {
    sep = silhouette(proj, labels).per_group(labels, N);
  }
  const auto groups = group_by_labels(proj, labels, N);
  const MatrixXd readout_proj = project(basis, p.readout_weights, rep.projected_dim, false);
  for (int c = 0; c < N; ++c) {
    if (!diagnosed[static_cast<std::size_t>(c)]) continue;
    DiagnosticRow row;
    row.intent = corpus.intents[static_cast<std::size_t>(c)];
    row.test_count = test_counts[static_cast<std::size_t>(c)];
    row.train_count = train_counts[static_cast<std::size_t>(c)];
    row.precision = metrics.precision[static_cast<std::size_t>(c)];
    row.recall = metrics.recall[static_cast<std::size_t>(c)];
    row.f1 = metrics.f1[static_cast<std::size_t>(c)];
    row.silhouette = sep[static_cast<std::size_t>(c)];
    const VectorXd r = readout_proj.row(c).transpose();
    const VectorXd centroid = groups.centroids.row(c).transpose();
    row.alignment = (r.norm() > 0.0 && centroid.norm() > 0.0) ? cosine(r, centroid) : 0.0;
    row.pattern = classify_pattern(row, thresholds);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace rnn_dynamo
