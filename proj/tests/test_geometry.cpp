#include "rnn_dynamo/geometry.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace rnn_dynamo;

namespace {

MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// O(S^2) silhouette straight from the definition.
std::vector<double> brute_silhouette(const MatrixXd& x, const std::vector<int>& g) {
  const auto S = static_cast<std::size_t>(x.rows());
  std::map<int, int> size;
  for (int v : g) ++size[v];
  std::vector<double> s(S, 0.0);
  for (std::size_t i = 0; i < S; ++i) {
    if (size[g[i]] == 1) continue;
    std::map<int, double> total;
    for (std::size_t j = 0; j < S; ++j) {
      if (j == i) continue;
      total[g[j]] += (x.row(static_cast<Eigen::Index>(i)) - x.row(static_cast<Eigen::Index>(j))).norm();
    }
    const double a = total[g[i]] / (size[g[i]] - 1);
    double b = 1e300;
    for (const auto& [label, sum] : total) {
      if (label != g[i]) b = std::min(b, sum / size[label]);
    }
    s[i] = (b - a) / std::max(a, b);
  }
  return s;
}

}  // namespace

TEST(KMeans, TwoPairs) {
  MatrixXd pts(4, 2);
  pts << 0, 0, 0, 1, 10, 10, 10, 11;
  const auto c = kmeans(pts, 2, 1);
  EXPECT_EQ(c.assignment[0], c.assignment[1]);
  EXPECT_EQ(c.assignment[2], c.assignment[3]);
  EXPECT_NE(c.assignment[0], c.assignment[2]);
  const int a = c.assignment[0];
  EXPECT_LT((c.centroids.row(a) - Eigen::RowVector2d(0, 0.5)).norm(), 1e-12);
  EXPECT_LT((c.centroids.row(1 - a) - Eigen::RowVector2d(10, 10.5)).norm(), 1e-12);
  EXPECT_NEAR(c.inertia, 1.0, 1e-12);
}

TEST(KMeans, InertiaNonIncreasing) {
  MatrixXd pts = gaussian(300, 3, 2);
  for (Eigen::Index i = 0; i < 100; ++i) pts.row(i).array() += 3.0;
  for (Eigen::Index i = 100; i < 200; ++i) pts(i, 1) -= 3.0;
  const auto c = kmeans(pts, 5, 3);
  ASSERT_GE(c.inertia_trace.size(), 2U);
  for (std::size_t i = 1; i < c.inertia_trace.size(); ++i) {
    EXPECT_LE(c.inertia_trace[i], c.inertia_trace[i - 1] + 1e-9);
  }
  int total = 0;
  for (int n : c.sizes) total += n;
  EXPECT_EQ(total, 300);
}

TEST(KMeans, OneClusterPerPoint) {
  const MatrixXd pts = gaussian(6, 2, 4);
  EXPECT_NEAR(kmeans(pts, 6, 1).inertia, 0.0, 1e-24);
}

TEST(KMeans, Errors) {
  EXPECT_THROW(kmeans(gaussian(3, 2, 1), 4, 1), Error);
  EXPECT_THROW(kmeans(MatrixXd::Ones(5, 2), 2, 1), Error);
  EXPECT_THROW(kmeans(gaussian(3, 2, 1), 0, 1), Error);
}

TEST(KMeans, DeterministicPerSeed) {
  const MatrixXd pts = gaussian(100, 4, 5);
  const auto a = kmeans(pts, 4, 9);
  const auto b = kmeans(pts, 4, 9);
  EXPECT_EQ(a.assignment, b.assignment);
  EXPECT_EQ(a.centroids, b.centroids);
}

TEST(Silhouette, MatchesBruteForce) {
  const MatrixXd pts = gaussian(50, 3, 6);
  Rng rng(7);
  std::vector<int> g;
  for (int i = 0; i < 50; ++i) g.push_back(static_cast<int>(rng.below(4)));
  g[17] = 9;  // a singleton group
  const auto r = silhouette(pts, g);
  const auto ref = brute_silhouette(pts, g);
  double mean = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    EXPECT_NEAR(r.coefficients[i], ref[i], 1e-12) << i;
    mean += ref[i];
  }
  EXPECT_NEAR(r.mean, mean / 50.0, 1e-12);
  EXPECT_EQ(r.coefficients[17], 0.0);
}

TEST(Silhouette, SeparatedGroupsApproachOne) {
  MatrixXd pts = gaussian(40, 2, 8) * 0.01;
  std::vector<int> g(40, 0);
  for (Eigen::Index i = 20; i < 40; ++i) {
    pts.row(i).array() += 1000.0;
    g[static_cast<std::size_t>(i)] = 1;
  }
  EXPECT_GT(silhouette(pts, g).mean, 0.999);
}

TEST(Silhouette, NeedsTwoGroups) {
  EXPECT_THROW(silhouette(gaussian(5, 2, 1), std::vector<int>(5, 3)), Error);
  EXPECT_THROW(silhouette(gaussian(5, 2, 1), std::vector<int>(4, 0)), Error);
}

TEST(Silhouette, PerGroupMeans) {
  SilhouetteResult r;
  r.coefficients = {0.5, 0.1, -0.2, 0.3};
  const auto g = r.per_group({0, 1, 1, 0}, 3);
  EXPECT_NEAR(g[0], 0.4, 1e-15);
  EXPECT_NEAR(g[1], -0.05, 1e-15);
  EXPECT_EQ(g[2], 0.0);
}

TEST(CentroidDistances, TranslationEquivariant) {
  const MatrixXd pts = gaussian(30, 3, 9);
  std::vector<int> labels;
  for (int i = 0; i < 30; ++i) labels.push_back(i % 3);
  const VectorXd origin = VectorXd::Zero(3);
  const VectorXd shift = Eigen::Vector3d(4, -1, 2);
  const auto a = centroid_distances(group_by_labels(pts, labels, 3), origin);
  const MatrixXd moved = pts.rowwise() + shift.transpose();
  const auto b = centroid_distances(group_by_labels(moved, labels, 3), origin + shift);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-12);
  EXPECT_THROW(centroid_distances(group_by_labels(pts, labels, 3), VectorXd::Zero(2)), Error);
}

TEST(CentroidDistances, KnownValues) {
  MatrixXd pts(4, 2);
  pts << 3, 4, 3, 4, 0, 1, 0, 3;
  const auto d = centroid_distances(group_by_labels(pts, {0, 0, 1, 1}, 2), VectorXd::Zero(2));
  EXPECT_DOUBLE_EQ(d.values[0], 5.0);
  EXPECT_DOUBLE_EQ(d.values[1], 2.0);
  EXPECT_DOUBLE_EQ(d.mean, 3.5);
  EXPECT_DOUBLE_EQ(d.stdev, 1.5);
}

TEST(ClusterRadii, SingletonAndScaling) {
  const MatrixXd pts = gaussian(21, 2, 10);
  std::vector<int> labels(21, 0);
  for (int i = 10; i < 20; ++i) labels[static_cast<std::size_t>(i)] = 1;
  labels[20] = 2;
  const auto a = cluster_radii(group_by_labels(pts, labels, 3), pts);
  EXPECT_EQ(a.values[2], 0.0);
  const MatrixXd scaled = pts * 2.5;
  const auto b = cluster_radii(group_by_labels(scaled, labels, 3), scaled);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(b.values[i], 2.5 * a.values[i], 1e-12);
}

TEST(ClusterRadii, MeanDistanceToCentroid) {
  MatrixXd pts(3, 2);
  pts << -1, 0, 1, 0, 0, 0;
  const auto r = cluster_radii(group_by_labels(pts, {0, 0, 0}, 1), pts);
  EXPECT_NEAR(r.values[0], 2.0 / 3.0, 1e-15);
}

TEST(Cosine, Examples) {
  const VectorXd v = Eigen::Vector3d(1, -2, 0.5);
  EXPECT_NEAR(cosine(v, v), 1.0, 1e-15);
  EXPECT_NEAR(cosine(v, -v), -1.0, 1e-15);
  EXPECT_NEAR(cosine(v, 7.0 * v), 1.0, 1e-15);
  EXPECT_NEAR(cosine(Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 3)), 0.0, 1e-15);
  EXPECT_THROW(cosine(v, VectorXd::Zero(3)), Error);
}

TEST(ReadoutAlignment, DiagonalAndErrors) {
  MatrixXd r(2, 2), c(2, 2);
  r << 1, 0, 0, 1;
  c << 2, 0.1, -0.1, 3;
  const auto a = readout_alignment(r, c, {"alpha", "beta"});
  EXPECT_TRUE(a.diagonal_dominant);
  EXPECT_NEAR(a.mean_diagonal, 0.5 * (2 / std::hypot(2, 0.1) + 3 / std::hypot(0.1, 3)), 1e-15);
  c.row(1).setZero();
  try {
    readout_alignment(r, c, {"alpha", "beta"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("beta"), std::string::npos);
  }
}

TEST(ReadoutAlignment, ProjectedVariantMatchesManualProjection) {
  const auto p = rnn_dynamo::testing::random_params({CellType::gru, 3, 4, 3, 6}, 3);
  const MatrixXd states = gaussian(40, 4, 11);
  const auto basis = pca_fit(states);
  const MatrixXd centroids = gaussian(3, 4, 12);
  const auto full = readout_alignment(p, centroids, nullptr, 0);
  const auto proj = readout_alignment(p, centroids, &basis, 2);
  EXPECT_EQ(full.cosine.rows(), 3);
  for (Eigen::Index i = 0; i < 3; ++i) {
    const VectorXd r = (p.readout_weights.row(i) * basis.components.leftCols(2)).transpose();
    const VectorXd c = ((centroids.row(i) - basis.mean.transpose()) * basis.components.leftCols(2)).transpose();
    EXPECT_NEAR(proj.cosine(i, i), r.dot(c) / (r.norm() * c.norm()), 1e-12);
    EXPECT_NEAR(full.cosine(i, i), cosine(p.readout_weights.row(i).transpose(), centroids.row(i).transpose()), 1e-15);
  }
}

TEST(Pattern, TableExamples) {
  EXPECT_EQ(classify_pattern(0.97, 0.57, 0.95), Pattern::convergent);
  EXPECT_EQ(classify_pattern(0.00, -0.21, 0.38), Pattern::collapse);
  EXPECT_EQ(classify_pattern(0.40, 0.56, 0.57), Pattern::alignment_failure);
  EXPECT_EQ(classify_pattern(0.71, -0.13, 0.91), Pattern::alignment_driven);
}

TEST(Pattern, RuleAppliedToEvenMidpoint) {
  // F1 and alignment below their thresholds with separation above it is the
  // alignment-failure combination.
  EXPECT_EQ(classify_pattern(0.50, 0.50, 0.50), Pattern::alignment_failure);
}

TEST(Pattern, RemainingCombinationsAreOther) {
  EXPECT_EQ(classify_pattern(0.9, 0.5, 0.2), Pattern::other);
  EXPECT_EQ(classify_pattern(0.9, 0.1, 0.2), Pattern::other);
  EXPECT_EQ(classify_pattern(0.2, 0.5, 0.9), Pattern::other);
  EXPECT_EQ(classify_pattern(0.2, 0.1, 0.9), Pattern::other);
}

TEST(Pattern, ThresholdsAreInclusive) {
  EXPECT_EQ(classify_pattern(0.6, 0.25, 0.75), Pattern::convergent);
  PatternThresholds t{0.9, 0.9, 0.9};
  EXPECT_EQ(classify_pattern(0.8, 0.8, 0.8, t), Pattern::collapse);
  EXPECT_EQ(pattern_code(Pattern::convergent), "P1");
  EXPECT_EQ(pattern_code(Pattern::other), "other");
}

TEST(Partition, TrainedBeatsUntrained) {
  const auto& [corpus, result] = rnn_dynamo::testing::trained_small();
  auto score = [&](const ModelParams& p) {
    const auto all = collect_states(p, corpus, Split::test, StateSelection::all);
    const auto basis = pca_fit(all);
    return partition_quality(all, basis, corpus.n_intents(), intrinsic_dimensionality(basis), 1);
  };
  const auto trained = score(result.params);
  const auto untrained = score(init_params(result.params.arch, 99));
  EXPECT_LT(untrained.silhouette_projected, trained.silhouette_projected - 0.15);
  const auto finals = collect_states(result.params, corpus, Split::test, StateSelection::final);
  const auto basis = pca_fit(collect_states(result.params, corpus, Split::test, StateSelection::all));
  const auto rep = final_cluster_report(result.params, finals, basis, intrinsic_dimensionality(basis), corpus.intents);
  EXPECT_GT(rep.silhouette_projected, 0.5);
  EXPECT_LT(rep.distances.stdev, rep.distances.mean);
  EXPECT_GT(rep.alignment_full.mean_diagonal, 0.5);
}

TEST(Diagnostics, RowsAndExclusions) {
  auto corpus = rnn_dynamo::testing::trained_small().first;
  const auto& params = rnn_dynamo::testing::trained_small().second.params;
  for (auto& s : corpus.sentences) {
    if (s.intent == 3 && s.split == Split::test) s.split = Split::val;
  }
  const auto basis = pca_fit(collect_states(params, corpus, Split::test, StateSelection::all));
  const auto rep = per_class_diagnostics(params, corpus, basis);
  EXPECT_EQ(rep.rows.size(), 3U);
  EXPECT_EQ(rep.excluded, (std::vector<std::string>{corpus.intents[3]}));
  for (const auto& row : rep.rows) {
    EXPECT_EQ(row.pattern, classify_pattern(row.f1, row.silhouette, row.alignment));
    EXPECT_GE(row.silhouette, -1.0);
    EXPECT_LE(row.silhouette, 1.0);
  }
}
