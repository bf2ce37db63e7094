#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace rnn_dynamo;
using rnn_dynamo::testing::random_params;

namespace {

const CellType kCells[] = {CellType::vanilla, CellType::gru, CellType::lstm};

double batch_loss(const ModelParams& p, const std::vector<SequenceRef>& batch) {
  double s = 0.0;
  for (const auto& b : batch) {
    const std::vector<int> tokens(b.tokens.begin(), b.tokens.end());
    s += cross_entropy(readout(p, forward(p, tokens).final_state()), b.label);
  }
  return s / static_cast<double>(batch.size());
}

}  // namespace

TEST(CrossEntropy, UniformLogits) { EXPECT_NEAR(cross_entropy(VectorXd::Constant(7, 0.3), 4), std::log(7.0), 1e-12); }

TEST(CrossEntropy, Saturated) {
  VectorXd logits = VectorXd::Zero(5);
  logits(2) = 1000.0;
  EXPECT_NEAR(cross_entropy(logits, 2), 0.0, 1e-300);
  EXPECT_NEAR(cross_entropy(logits, 0), 1000.0, 1e-9);
}

TEST(CrossEntropy, MatchesLogSumExp) {
  VectorXd logits(4);
  logits << 0.3, -1.2, 2.5, 0.7;
  const double lse = std::log(std::exp(0.3) + std::exp(-1.2) + std::exp(2.5) + std::exp(0.7));
  EXPECT_NEAR(cross_entropy(logits, 1), lse + 1.2, 1e-12);
}

TEST(CrossEntropy, Errors) {
  VectorXd logits = VectorXd::Zero(3);
  EXPECT_THROW(cross_entropy(logits, 3), Error);
  logits(1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(cross_entropy(logits, 0), Error);
}

TEST(Backward, MatchesFiniteDifferences) {
  const std::vector<int> s1{2, 4, 3, 5};
  const std::vector<int> s2{6, 2, 2};
  for (auto cell : kCells) {
    const auto p = random_params({cell, 3, 4, 3, 7}, 41);
    const std::vector<SequenceRef> batch{{s1, 1}, {s2, 2}};
    const auto lg = backward(p, batch);
    EXPECT_NEAR(lg.loss, batch_loss(p, batch), 1e-12);
    auto probe = p;
    probe.for_each_tensor([&](std::string_view name, auto& t) {
      const MatrixXd analytic = [&] {
        MatrixXd out;
        lg.grads.for_each_tensor([&](std::string_view n2, const auto& g) {
          if (n2 == name) out = g;
        });
        return out;
      }();
      for (Eigen::Index i = 0; i < t.size(); ++i) {
        const double keep = t.data()[i];
        const double h = 1e-5;
        t.data()[i] = keep + h;
        const double up = batch_loss(probe, batch);
        t.data()[i] = keep - h;
        const double down = batch_loss(probe, batch);
        t.data()[i] = keep;
        const double numeric = (up - down) / (2 * h);
        const double a = analytic.data()[i];
        const double rel = std::abs(a - numeric) / std::max(1e-7, std::abs(a) + std::abs(numeric));
        EXPECT_LT(rel, 1e-4) << cell_name(cell) << " " << name << "[" << i << "] " << a << " vs " << numeric;
      }
    });
  }
}

TEST(Backward, PadAndUnusedEmbeddingsGetNoGradient) {
  auto p = random_params({CellType::gru, 3, 4, 3, 7}, 2);
  p.readout_weights.setZero();
  p.readout_bias.setZero();
  const std::vector<int> s{2, 3, 4};
  const std::vector<SequenceRef> batch{{s, 0}};
  const auto g = backward(p, batch).grads;
  EXPECT_EQ(g.embedding.row(kPadId).norm(), 0.0);
  EXPECT_EQ(g.embedding.norm(), 0.0);
  EXPECT_EQ(g.recurrent_weights.norm(), 0.0);
  const auto full = backward(random_params({CellType::gru, 3, 4, 3, 7}, 2), batch).grads;
  EXPECT_EQ(full.embedding.row(kPadId).norm(), 0.0);
  EXPECT_EQ(full.embedding.row(6).norm(), 0.0);
  EXPECT_GT(full.embedding.row(3).norm(), 0.0);
}

TEST(Backward, LossScaleIsLinear) {
  const auto p = random_params({CellType::lstm, 3, 4, 3, 7}, 5);
  const std::vector<int> s1{2, 4}, s2{5, 1, 6};
  const std::vector<SequenceRef> batch{{s1, 0}, {s2, 2}};
  const auto a = backward(p, batch);
  BackwardOptions opts;
  opts.loss_scale = 2.0;
  const auto b = backward(p, batch, opts);
  EXPECT_NEAR(b.loss, 2.0 * a.loss, 1e-14);
  EXPECT_LT((b.grads.recurrent_weights - 2.0 * a.grads.recurrent_weights).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((b.grads.embedding - 2.0 * a.grads.embedding).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Backward, Errors) {
  const auto p = random_params({CellType::gru, 3, 4, 3, 7}, 5);
  EXPECT_THROW(backward(p, std::vector<SequenceRef>{}), Error);
  const std::vector<int> s{2};
  BackwardOptions opts;
  opts.dropout = 0.5;
  EXPECT_THROW(backward(p, std::vector<SequenceRef>{{s, 0}}, opts), Error);
}

TEST(AdamStep, FirstStepMagnitude) {
  auto p = random_params({CellType::vanilla, 2, 2, 2, 3}, 1);
  const auto before = p;
  auto grads = ModelParams::zeros(p.arch);
  grads.bias << 1e-4, -30.0;
  auto state = AdamState::for_params(p);
  adam_step(p, state, grads, 0.01, AdamConfig{});
  EXPECT_NEAR(before.bias(0) - p.bias(0), 0.01, 1e-5);
  EXPECT_NEAR(p.bias(1) - before.bias(1), 0.01, 1e-5);
  EXPECT_EQ(p.embedding, before.embedding);
  EXPECT_EQ(state.step, 1);
}

TEST(Metrics, MatchesBruteForceRecount) {
  Rng rng(9);
  const int k = 5;
  std::vector<int> truth, pred;
  std::vector<std::vector<int>> confusion(k, std::vector<int>(k, 0));
  for (int i = 0; i < 400; ++i) {
    const int t = static_cast<int>(rng.below(k - 1));  // class 4 never occurs
    const int p = rng.uniform() < 0.6 ? t : static_cast<int>(rng.below(k));
    truth.push_back(t);
    pred.push_back(p);
    ++confusion[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  }
  const auto m = metrics_from_confusion(confusion);
  int correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) correct += truth[i] == pred[i];
  EXPECT_DOUBLE_EQ(m.accuracy, correct / 400.0);
  for (int c = 0; c < k; ++c) {
    int tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      tp += truth[i] == c && pred[i] == c;
      fp += truth[i] != c && pred[i] == c;
      fn += truth[i] == c && pred[i] != c;
    }
    const double prec = tp + fp ? static_cast<double>(tp) / (tp + fp) : 0.0;
    const double rec = tp + fn ? static_cast<double>(tp) / (tp + fn) : 0.0;
    const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    EXPECT_NEAR(m.precision[static_cast<std::size_t>(c)], prec, 1e-15);
    EXPECT_NEAR(m.recall[static_cast<std::size_t>(c)], rec, 1e-15);
    EXPECT_NEAR(m.f1[static_cast<std::size_t>(c)], f1, 1e-15);
    EXPECT_EQ(m.support[static_cast<std::size_t>(c)], tp + fn);
  }
  EXPECT_TRUE(m.absent[4]);
  EXPECT_EQ(m.recall[4], 0.0);
}

TEST(Metrics, PerfectPredictions) {
  const auto m = metrics_from_confusion({{3, 0}, {0, 5}});
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_EQ(m.f1, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(m.macro_f1(), 1.0);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.patience = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Train, PatienceOneWithConstantValidationStopsAfterTwoEpochs) {
  // A learning rate this small cannot change any prediction, so validation
  // accuracy is constant from the first epoch.
  auto corpus = rnn_dynamo::testing::small_corpus(3, 20, 2);
  ArchSpec arch{CellType::gru, 4, 4, 3, rnn_dynamo::testing::vocab_size_of(corpus)};
  TrainConfig cfg;
  cfg.learning_rate = 1e-14;
  cfg.patience = 1;
  cfg.max_epochs = 50;
  const auto r = train(corpus, arch, cfg);
  ASSERT_EQ(r.history.size(), 2U);
  EXPECT_EQ(r.history[0].val_accuracy, r.history[1].val_accuracy);
  EXPECT_EQ(r.best_epoch, 1);
}

TEST(Train, HalvesLearningRateOnce) {
  auto corpus = rnn_dynamo::testing::small_corpus(3, 20, 2);
  ArchSpec arch{CellType::vanilla, 4, 4, 3, rnn_dynamo::testing::vocab_size_of(corpus)};
  TrainConfig cfg;
  cfg.learning_rate = 1e-14;
  cfg.patience = 4;
  cfg.halve_after_epoch = 2;
  const auto r = train(corpus, arch, cfg);
  ASSERT_GE(r.history.size(), 4U);
  EXPECT_EQ(r.history[0].learning_rate, 1e-14);
  EXPECT_EQ(r.history[1].learning_rate, 1e-14);
  EXPECT_EQ(r.history[2].learning_rate, 5e-15);
  EXPECT_EQ(r.history[3].learning_rate, 5e-15);
}

TEST(Train, LearnsAndKeepsBestCheckpoint) {
  for (auto cell : kCells) {
    const auto& [corpus, r] = rnn_dynamo::testing::trained_small(cell);
    double best = -1.0;
    for (const auto& e : r.history) best = std::max(best, e.val_accuracy);
    EXPECT_EQ(r.best_val_accuracy, best);
    EXPECT_EQ(accuracy(r.params, corpus, Split::val), r.best_val_accuracy);
    const auto m = evaluate(r.params, corpus, Split::test);
    EXPECT_GE(m.accuracy, 0.9) << cell_name(cell);
    EXPECT_GE(m.macro_f1(), m.accuracy - 0.02) << cell_name(cell);
    for (std::size_t c = 0; c < m.confusion.size(); ++c) {
      int row = 0;
      for (int v : m.confusion[c]) row += v;
      EXPECT_EQ(row, corpus.class_counts(Split::test)[c]);
    }
  }
}

TEST(Train, Deterministic) {
  auto corpus = rnn_dynamo::testing::small_corpus(3, 20, 4);
  ArchSpec arch{CellType::gru, 4, 6, 3, rnn_dynamo::testing::vocab_size_of(corpus)};
  TrainConfig cfg;
  cfg.learning_rate = 5e-3;
  cfg.max_epochs = 5;
  cfg.seed = 8;
  const auto a = train(corpus, arch, cfg);
  const auto b = train(corpus, arch, cfg);
  EXPECT_EQ(a.params.recurrent_weights, b.params.recurrent_weights);
  EXPECT_EQ(a.params.embedding, b.params.embedding);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
  cfg.dropout = 0.2;
  const auto c = train(corpus, arch, cfg);
  const auto d = train(corpus, arch, cfg);
  EXPECT_EQ(c.params.bias, d.params.bias);
  EXPECT_NE(c.params.bias, a.params.bias);
}

TEST(Train, RequiresSplits) {
  auto corpus = rnn_dynamo::testing::small_corpus(3, 20, 4);
  for (auto& s : corpus.sentences) {
    if (s.split == Split::val) s.split = Split::train;
  }
  ArchSpec arch{CellType::gru, 4, 6, 3, rnn_dynamo::testing::vocab_size_of(corpus)};
  EXPECT_THROW(train(corpus, arch, TrainConfig{}), Error);
}
