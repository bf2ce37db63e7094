#include "rnn_dynamo/statespace.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace rnn_dynamo;

namespace {

PcaBasis basis_with_ratios(std::vector<double> ratios) {
  PcaBasis b;
  const auto n = static_cast<Eigen::Index>(ratios.size());
  b.mean = VectorXd::Zero(n);
  b.components = MatrixXd::Identity(n, n);
  b.explained_variance_ratio = Eigen::Map<VectorXd>(ratios.data(), n);
  return b;
}

MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// Three sentences of lengths 4, 5 and 6 in the test split.
LabeledCorpus three_sentences() {
  std::istringstream in(
      "{\"text\": \"a b c d\", \"intent\": \"x\", \"split\": \"test\"}\n"
      "{\"text\": \"a b c d e\", \"intent\": \"y\", \"split\": \"test\"}\n"
      "{\"text\": \"e d c b a a\", \"intent\": \"x\", \"split\": \"test\"}\n"
      "{\"text\": \"a\", \"intent\": \"y\", \"split\": \"train\"}\n");
  auto c = parse_corpus(in);
  encode(c, build_vocabulary({"a b c d e"}, 1, 10));
  return c;
}

}  // namespace

TEST(CollectStates, AllAndFinal) {
  const auto c = three_sentences();
  const auto p = rnn_dynamo::testing::random_params({CellType::lstm, 3, 4, 2, 7}, 3);
  const auto all = collect_states(p, c, Split::test, StateSelection::all);
  ASSERT_EQ(all.size(), 15);
  EXPECT_EQ(all.states.cols(), 4);
  const auto fin = collect_states(p, c, Split::test, StateSelection::final);
  ASSERT_EQ(fin.size(), 3);
  for (const auto& pr : fin.provenance) EXPECT_TRUE(pr.is_final);
  EXPECT_EQ(fin.labels(), (std::vector<int>{0, 1, 0}));
  int finals = 0;
  for (const auto& pr : all.provenance) finals += pr.is_final;
  EXPECT_EQ(finals, 3);
}

TEST(CollectStates, RowsMatchTrajectories) {
  const auto c = three_sentences();
  const auto p = rnn_dynamo::testing::random_params({CellType::gru, 3, 4, 2, 7}, 3);
  const auto all = collect_states(p, c, Split::test, StateSelection::all);
  for (Eigen::Index r = 0; r < all.size(); ++r) {
    const auto& pr = all.provenance[static_cast<std::size_t>(r)];
    const auto t = forward(p, c.sentences[pr.sentence].tokens);
    EXPECT_EQ(all.states.row(r), t.states.row(pr.position));
  }
  EXPECT_THROW(collect_states(p, c, Split::val, StateSelection::all), Error);
}

TEST(Pca, PlaneInTenDimensions) {
  const MatrixXd coeffs = gaussian(200, 2, 4);
  const MatrixXd frame = gaussian(2, 10, 5);
  const MatrixXd pts = (coeffs * frame).rowwise() + gaussian(1, 10, 6).row(0);
  const auto b = pca_fit(pts);
  EXPECT_LT(b.explained_variance_ratio.tail(8).maxCoeff(), 1e-10);
  EXPECT_NEAR(b.explained_variance_ratio.sum(), 1.0, 1e-10);
  EXPECT_EQ(intrinsic_dimensionality(b, 0.999), 2);
}

TEST(Pca, IsotropicCloud) {
  const auto b = pca_fit(gaussian(10000, 8, 7));
  for (Eigen::Index k = 0; k < 8; ++k) EXPECT_NEAR(b.explained_variance_ratio(k), 1.0 / 8.0, 0.02);
}

TEST(Pca, OrthonormalSignedComponents) {
  const auto b = pca_fit(gaussian(100, 6, 8));
  EXPECT_LT((b.components.transpose() * b.components - MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-12);
  for (Eigen::Index k = 0; k < 6; ++k) {
    Eigen::Index at = 0;
    b.components.col(k).cwiseAbs().maxCoeff(&at);
    EXPECT_GT(b.components(at, k), 0.0);
  }
  for (Eigen::Index k = 1; k < 6; ++k) {
    EXPECT_LE(b.explained_variance_ratio(k), b.explained_variance_ratio(k - 1));
  }
}

TEST(Pca, ReconstructionAndMean) {
  const MatrixXd pts = gaussian(50, 5, 9) * 3.0;
  const auto b = pca_fit(pts);
  EXPECT_LT((reconstruct(b, project(b, pts, 5, true)) - pts).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT(project_point(b, b.mean, 3, true).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Pca, DegenerateSample) {
  MatrixXd pts(5, 3);
  pts.rowwise() = Eigen::RowVector3d(1.0, 2.0, 3.0);
  try {
    pca_fit(pts);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "degenerate sample");
  }
  EXPECT_THROW(pca_fit(MatrixXd::Ones(1, 3)), Error);
}

TEST(Pca, PermutationInvariant) {
  const MatrixXd pts = gaussian(60, 4, 10);
  MatrixXd shuffled = pts;
  std::vector<Eigen::Index> order(60);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(1);
  rng.shuffle(order);
  for (Eigen::Index i = 0; i < 60; ++i) shuffled.row(i) = pts.row(order[static_cast<std::size_t>(i)]);
  const auto a = pca_fit(pts);
  const auto b = pca_fit(shuffled);
  EXPECT_LT((a.explained_variance_ratio - b.explained_variance_ratio).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((a.components - b.components).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(IntrinsicDimensionality, Examples) {
  const auto b = basis_with_ratios({0.6, 0.3, 0.1});
  EXPECT_EQ(intrinsic_dimensionality(b, 0.95), 3);
  EXPECT_EQ(intrinsic_dimensionality(b, 0.9), 2);
  EXPECT_EQ(intrinsic_dimensionality(b, 0.5), 1);
  EXPECT_THROW(intrinsic_dimensionality(b, 1.0), Error);
  EXPECT_THROW(intrinsic_dimensionality(b, 0.0), Error);
}

TEST(IntrinsicDimensionality, MonotoneInThreshold) {
  const auto b = pca_fit(gaussian(300, 7, 11) * MatrixXd(VectorXd::LinSpaced(7, 0.2, 3.0).asDiagonal()));
  int prev = 0;
  for (double t = 0.05; t < 1.0; t += 0.05) {
    const int id = intrinsic_dimensionality(b, t);
    EXPECT_GE(id, prev);
    prev = id;
  }
}

TEST(Project, Errors) {
  const auto b = pca_fit(gaussian(20, 3, 12));
  EXPECT_THROW(project(b, gaussian(2, 3, 1), 4, true), Error);
  EXPECT_THROW(project(b, gaussian(2, 3, 1), 0, true), Error);
  EXPECT_THROW(project(b, gaussian(2, 4, 1), 2, true), Error);
}

TEST(Project, DirectionsAreNotCentred) {
  const MatrixXd pts = gaussian(30, 3, 13).rowwise() + Eigen::RowVector3d(5, -2, 1);
  const auto b = pca_fit(pts);
  const MatrixXd v = gaussian(1, 3, 14);
  EXPECT_LT((project(b, v, 3, false) - v * b.components).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Project, Contraction) {
  const MatrixXd pts = gaussian(40, 6, 15);
  const auto b = pca_fit(pts);
  for (int k = 1; k <= 6; ++k) {
    const MatrixXd proj = project(b, pts, k, true);
    for (Eigen::Index i = 0; i < 40; ++i)
      for (Eigen::Index j = i + 1; j < 40; ++j) {
        EXPECT_LE((proj.row(i) - proj.row(j)).norm(), (pts.row(i) - pts.row(j)).norm() + 1e-12);
      }
  }
}
