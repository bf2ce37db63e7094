#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace rnn_dynamo;
using rnn_dynamo::testing::numeric_jacobian;
using rnn_dynamo::testing::random_params;
using rnn_dynamo::testing::random_vector;

namespace {

const CellType kCells[] = {CellType::vanilla, CellType::gru, CellType::lstm};

double sig(double a) { return 1.0 / (1.0 + std::exp(-a)); }

// Straight-line reference of one step, written out entry by entry.
VectorXd reference_step(const ModelParams& p, const VectorXd& s, const VectorXd& x) {
  const int n = p.arch.hidden_dim;
  const int m = p.arch.embed_dim;
  auto pre = [&](int row, const VectorXd& h) {
    double a = p.bias(row);
    for (int j = 0; j < m; ++j) a += p.input_weights(row, j) * x(j);
    for (int j = 0; j < n; ++j) a += p.recurrent_weights(row, j) * h(j);
    return a;
  };
  VectorXd out(p.arch.state_dim());
  if (p.arch.cell == CellType::vanilla) {
    for (int i = 0; i < n; ++i) out(i) = std::tanh(pre(i, s));
  } else if (p.arch.cell == CellType::gru) {
    VectorXd rh(n);
    for (int i = 0; i < n; ++i) rh(i) = sig(pre(n + i, s)) * s(i);
    for (int i = 0; i < n; ++i) {
      const double z = sig(pre(i, s));
      const double c = std::tanh(pre(2 * n + i, rh));
      out(i) = z * s(i) + (1.0 - z) * c;
    }
  } else {
    const VectorXd h = s.head(n);
    for (int i = 0; i < n; ++i) {
      const double ig = sig(pre(i, h));
      const double fg = sig(pre(n + i, h));
      const double gg = std::tanh(pre(2 * n + i, h));
      const double og = sig(pre(3 * n + i, h));
      const double c = fg * s(n + i) + ig * gg;
      out(n + i) = c;
      out(i) = og * std::tanh(c);
    }
  }
  return out;
}

}  // namespace

TEST(InitParams, DeterministicPerSeed) {
  const ArchSpec arch{CellType::gru, 5, 6, 3, 20};
  const auto a = init_params(arch, 4);
  const auto b = init_params(arch, 4);
  const auto c = init_params(arch, 5);
  EXPECT_EQ(a.embedding, b.embedding);
  EXPECT_EQ(a.recurrent_weights, b.recurrent_weights);
  EXPECT_NE(a.embedding, c.embedding);
}

TEST(InitParams, OrthogonalRecurrentBlocksAndGlorotBounds) {
  for (auto cell : kCells) {
    const ArchSpec arch{cell, 5, 7, 3, 20};
    const auto p = init_params(arch, 9);
    for (int g = 0; g < arch.gates(); ++g) {
      const MatrixXd u = p.recurrent_weights.middleRows(g * 7, 7);
      EXPECT_LT((u.transpose() * u - MatrixXd::Identity(7, 7)).cwiseAbs().maxCoeff(), 1e-6);
    }
    EXPECT_LE(p.input_weights.cwiseAbs().maxCoeff(), std::sqrt(6.0 / 12.0));
    EXPECT_LE(p.embedding.cwiseAbs().maxCoeff(), std::sqrt(6.0 / 25.0));
    EXPECT_LE(p.readout_weights.cwiseAbs().maxCoeff(), std::sqrt(6.0 / 10.0));
    EXPECT_EQ(p.bias.cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(ArchSpec, Validation) {
  EXPECT_THROW((ArchSpec{CellType::gru, 0, 4, 2, 10}.validate()), Error);
  EXPECT_THROW((ArchSpec{CellType::gru, 4, 4, 2, 1}.validate()), Error);
  EXPECT_THROW(parse_cell("transformer"), Error);
  EXPECT_EQ(parse_cell("lstm"), CellType::lstm);
  EXPECT_EQ((ArchSpec{CellType::lstm, 3, 4, 2, 10}.state_dim()), 8);
}

TEST(CellStep, ZeroVanillaIsZero) {
  const auto p = ModelParams::zeros({CellType::vanilla, 3, 4, 2, 5});
  Rng rng(1);
  const auto h = cell_step(p, random_vector(4, rng), random_vector(3, rng));
  EXPECT_EQ(h, VectorXd::Zero(4));
}

TEST(CellStep, SaturatedUpdateGateHoldsState) {
  auto p = random_params({CellType::gru, 3, 4, 2, 5}, 2);
  p.bias.head(4).setConstant(50.0);
  Rng rng(3);
  const VectorXd h = random_vector(4, rng);
  EXPECT_LT((cell_step(p, h, random_vector(3, rng)) - h).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(CellStep, MatchesReferenceImplementation) {
  for (auto cell : kCells) {
    const auto p = random_params({cell, 2, 3, 2, 5}, 17);
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
      const VectorXd s = random_vector(p.arch.state_dim(), rng);
      const VectorXd x = random_vector(2, rng);
      EXPECT_LT((cell_step(p, s, x) - reference_step(p, s, x)).cwiseAbs().maxCoeff(), 1e-12) << cell_name(cell);
    }
  }
}

TEST(CellStep, GatesStayInRange) {
  for (auto cell : {CellType::gru, CellType::lstm}) {
    const auto p = random_params({cell, 4, 5, 2, 5}, 8, 3.0);
    Rng rng(6);
    StepCache cache;
    detail::step_impl(p, random_vector(p.arch.state_dim(), rng, 3.0), random_vector(4, rng, 3.0), &cache);
    EXPECT_GT(cache.gates.minCoeff(), -1.0);
    EXPECT_LT(cache.gates.maxCoeff(), 1.0);
  }
}

TEST(CellStep, NonFiniteInput) {
  const auto p = random_params({CellType::gru, 2, 3, 2, 5}, 1);
  VectorXd h = VectorXd::Zero(3);
  h(1) = std::numeric_limits<double>::quiet_NaN();
  try {
    cell_step(p, h, VectorXd::Zero(2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "non-finite state");
  }
  EXPECT_THROW(cell_step(p, VectorXd::Zero(4), VectorXd::Zero(2)), Error);
}

TEST(Forward, SingleToken) {
  const auto p = random_params({CellType::gru, 3, 4, 2, 6}, 1);
  const auto t = forward(p, {3});
  EXPECT_EQ(t.length(), 1);
  EXPECT_EQ(t.final_state(), cell_step(p, VectorXd::Zero(4), embed(p, 3)));
}

TEST(Forward, PrefixProperty) {
  for (auto cell : kCells) {
    const auto p = random_params({cell, 3, 4, 2, 9}, 11);
    const std::vector<int> tokens{2, 5, 1, 8, 3, 3, 7};
    const auto full = forward(p, tokens);
    for (std::size_t k = 1; k <= tokens.size(); ++k) {
      const auto part = forward(p, std::vector<int>(tokens.begin(), tokens.begin() + static_cast<long>(k)));
      EXPECT_EQ(part.states, full.states.topRows(static_cast<Eigen::Index>(k)));
    }
    if (cell == CellType::lstm) {
      EXPECT_EQ(full.cellstates.rows(), 7);
    }
  }
}

TEST(Forward, Errors) {
  const auto p = random_params({CellType::gru, 3, 4, 2, 6}, 1);
  EXPECT_THROW(forward(p, {}), Error);
  try {
    forward(p, {1, 2, 6});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()).rfind("token 2:", 0), 0U);
  }
}

TEST(Readout, ArgmaxAndShiftInvariance) {
  auto p = ModelParams::zeros({CellType::gru, 2, 5, 5, 3});
  p.readout_weights = MatrixXd::Identity(5, 5);
  VectorXd e3 = VectorXd::Zero(5);
  e3(3) = 1.0;
  EXPECT_EQ(argmax(readout(p, e3)), 3);
  p.readout_bias.setConstant(7.5);
  EXPECT_EQ(argmax(readout(p, e3)), 3);
  EXPECT_EQ(argmax(VectorXd::Zero(4)), 0);
}

TEST(Jacobian, ZeroVanilla) {
  const auto p = ModelParams::zeros({CellType::vanilla, 3, 4, 2, 5});
  Rng rng(2);
  EXPECT_EQ(recurrent_jacobian(p, random_vector(4, rng), random_vector(3, rng)), MatrixXd::Zero(4, 4));
  EXPECT_EQ(input_jacobian(p, random_vector(4, rng), random_vector(3, rng)), MatrixXd::Zero(4, 3));
}

TEST(Jacobian, MatchesFiniteDifferences) {
  for (auto cell : kCells) {
    const auto p = random_params({cell, 4, 5, 3, 7}, 23);
    Rng rng(8);
    for (int trial = 0; trial < 5; ++trial) {
      const VectorXd s = random_vector(p.arch.state_dim(), rng);
      const VectorXd x = random_vector(4, rng);
      const MatrixXd jr = numeric_jacobian([&](const VectorXd& v) { return cell_step(p, v, x); }, s);
      const MatrixXd ji = numeric_jacobian([&](const VectorXd& v) { return cell_step(p, s, v); }, x);
      EXPECT_LT((recurrent_jacobian(p, s, x) - jr).cwiseAbs().maxCoeff(), 1e-6) << cell_name(cell);
      EXPECT_LT((input_jacobian(p, s, x) - ji).cwiseAbs().maxCoeff(), 1e-6) << cell_name(cell);
      const auto [out, j] = step_with_jacobian(p, s, x);
      EXPECT_EQ(out, cell_step(p, s, x));
      EXPECT_EQ(j, recurrent_jacobian(p, s, x));
    }
  }
}

TEST(Jacobian, SaturatedGruIsIdentity) {
  auto p = random_params({CellType::gru, 3, 4, 2, 5}, 2);
  p.bias.head(4).setConstant(50.0);
  Rng rng(4);
  const MatrixXd j = recurrent_jacobian(p, random_vector(4, rng), random_vector(3, rng));
  EXPECT_LT((j - MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Jacobian, LinearisationIsSecondOrder) {
  for (auto cell : kCells) {
    const auto p = random_params({cell, 3, 4, 2, 5}, 31);
    Rng rng(12);
    const VectorXd s = random_vector(p.arch.state_dim(), rng);
    const VectorXd x = random_vector(3, rng);
    const VectorXd ds = random_vector(p.arch.state_dim(), rng, 0.2);
    const VectorXd dx = random_vector(3, rng, 0.2);
    const VectorXd base = cell_step(p, s, x);
    const MatrixXd jr = recurrent_jacobian(p, s, x);
    const MatrixXd ji = input_jacobian(p, s, x);
    std::vector<double> log_size, log_err;
    double prev = 0.0;
    for (int halving = 0; halving <= 4; ++halving) {
      const double a = std::ldexp(1.0, -halving);
      const VectorXd predicted = base + jr * (a * ds) + ji * (a * dx);
      const double err = (cell_step(p, s + a * ds, x + a * dx) - predicted).norm();
      if (halving > 0) {
        EXPECT_GE(prev / err, 3.5) << cell_name(cell) << " halving " << halving;
      }
      prev = err;
      log_size.push_back(std::log(a));
      log_err.push_back(std::log(err));
    }
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < log_size.size(); ++i) mx += log_size[i], my += log_err[i];
    mx /= 5.0;
    my /= 5.0;
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < log_size.size(); ++i) {
      sxy += (log_size[i] - mx) * (log_err[i] - my);
      sxx += (log_size[i] - mx) * (log_size[i] - mx);
    }
    EXPECT_GE(sxy / sxx, 1.8) << cell_name(cell);
  }
}

TEST(Forward, TrainedStatesMoveOutward) {
  const auto& [corpus, result] = rnn_dynamo::testing::trained_small();
  const auto idx = corpus.indices(Split::test);
  int outward = 0;
  for (auto i : idx) {
    const auto t = forward(result.params, corpus.sentences[i].tokens);
    outward += t.states.row(t.length() - 1).norm() > t.states.row(0).norm();
  }
  EXPECT_GE(outward, static_cast<int>(std::ceil(0.9 * static_cast<double>(idx.size()))));
}
