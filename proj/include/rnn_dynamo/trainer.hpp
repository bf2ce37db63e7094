#pragma once

#include "rnn_dynamo/adam.hpp"
#include "rnn_dynamo/common.hpp"
#include "rnn_dynamo/corpus.hpp"
#include "rnn_dynamo/recurrent.hpp"

#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace rnn_dynamo {

struct TrainConfig {
  double learning_rate = 5e-4;
  std::optional<int> halve_after_epoch;  // halve the rate once, after this epoch
  int batch_size = 32;
  int max_epochs = 100;
  int patience = 2;
  double dropout = 0.0;  // recurrent dropout on h_{t-1}
  std::uint64_t seed = 0;
  AdamConfig adam;

  void validate() const {
    if (!(learning_rate > 0.0)) throw Error("learning_rate must be > 0");
    if (batch_size < 1) throw Error("batch_size must be >= 1");
    if (max_epochs < 1) throw Error("max_epochs must be >= 1");
    if (patience < 1) throw Error("patience must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("dropout must be in [0, 1)");
    if (halve_after_epoch && *halve_after_epoch < 1) throw Error("halve_after_epoch must be >= 1");
  }
};

/// -log softmax(logits)[label], evaluated with max subtraction.
inline double cross_entropy(const VectorXd& logits, int label) {
  if (label < 0 || label >= logits.size()) throw Error("label out of range");
  if (!logits.allFinite()) throw Error("non-finite logits");
  const double top = logits.maxCoeff();
  const double lse = top + std::log((logits.array() - top).exp().sum());
  return lse - logits(label);
}

inline VectorXd softmax(const VectorXd& logits) {
  const VectorXd e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

struct SequenceRef {
  std::span<const int> tokens;
  int label = 0;
};

using Gradients = ModelParams;

struct BackwardOptions {
  double dropout = 0.0;
  Rng* rng = nullptr;  // required when dropout > 0
  double loss_scale = 1.0;
};

struct LossAndGradients {
  double loss = 0.0;  // mean over the batch, times loss_scale
  Gradients grads;
};

namespace detail {

// Accumulates parameter gradients of one step into `g` and returns the
// gradient with respect to the (masked) input state; dx receives d/dx.
inline VectorXd step_backward(const ModelParams& p, const StepCache& cache, const VectorXd& d_out,
                              Gradients& g, VectorXd& dx) {
  const int n = p.arch.hidden_dim;
  const auto& W = p.input_weights;
  const auto& U = p.recurrent_weights;
  const VectorXd& x = cache.x;
  switch (p.arch.cell) {
    case CellType::vanilla: {
      const VectorXd da = (d_out.array() * (1.0 - cache.state_out.array().square())).matrix();
      g.input_weights.noalias() += da * x.transpose();
      g.recurrent_weights.noalias() += da * cache.state_in.transpose();
      g.bias += da;
      dx = W.transpose() * da;
      return U.transpose() * da;
    }
    case CellType::gru: {
      const VectorXd& h = cache.state_in;
      const auto z = cache.gates.segment(0, n).array();
      const auto r = cache.gates.segment(n, n).array();
      const auto cand = cache.gates.segment(2 * n, n).array();
      const auto go = d_out.array();
      const VectorXd da_c = (go * (1.0 - z) * (1.0 - cand.square())).matrix();
      const VectorXd reset_h = (r * h.array()).matrix();
      g.input_weights.middleRows(2 * n, n).noalias() += da_c * x.transpose();
      g.recurrent_weights.middleRows(2 * n, n).noalias() += da_c * reset_h.transpose();
      g.bias.segment(2 * n, n) += da_c;
      const VectorXd ds = U.middleRows(2 * n, n).transpose() * da_c;
      VectorXd da_zr(2 * n);
      da_zr.head(n) = (go * (h.array() - cand) * z * (1.0 - z)).matrix();
      da_zr.tail(n) = (ds.array() * h.array() * r * (1.0 - r)).matrix();
      g.input_weights.topRows(2 * n).noalias() += da_zr * x.transpose();
      g.recurrent_weights.topRows(2 * n).noalias() += da_zr * h.transpose();
      g.bias.head(2 * n) += da_zr;
      dx = W.topRows(2 * n).transpose() * da_zr + W.middleRows(2 * n, n).transpose() * da_c;
      VectorXd dh = (go * z).matrix() + (ds.array() * r).matrix();
      dh.noalias() += U.topRows(2 * n).transpose() * da_zr;
      return dh;
    }
    case CellType::lstm: {
      const auto h_prev = cache.state_in.head(n);
      const auto c_prev = cache.state_in.tail(n).array();
      const auto ig = cache.gates.segment(0, n).array();
      const auto fg = cache.gates.segment(n, n).array();
      const auto gg = cache.gates.segment(2 * n, n).array();
      const auto og = cache.gates.segment(3 * n, n).array();
      const VectorXd tc = cache.state_out.tail(n).array().tanh();
      const auto dh_out = d_out.head(n).array();
      const VectorXd dc = (d_out.tail(n).array() + dh_out * og * (1.0 - tc.array().square())).matrix();
      VectorXd da(4 * n);
      da.segment(0, n) = (dc.array() * gg * ig * (1.0 - ig)).matrix();
      da.segment(n, n) = (dc.array() * c_prev * fg * (1.0 - fg)).matrix();
      da.segment(2 * n, n) = (dc.array() * ig * (1.0 - gg.square())).matrix();
      da.segment(3 * n, n) = (dh_out * tc.array() * og * (1.0 - og)).matrix();
      g.input_weights.noalias() += da * x.transpose();
      g.recurrent_weights.noalias() += da * h_prev.transpose();
      g.bias += da;
      dx = W.transpose() * da;
      VectorXd d_in(2 * n);
      d_in.head(n) = U.transpose() * da;
      d_in.tail(n) = (dc.array() * fg).matrix();
      return d_in;
    }
  }
  return {};
}

}  // namespace detail

/// Exact gradients of the mean cross-entropy of the batch, where each
/// sentence's loss reads the hidden state at its last real token.
inline LossAndGradients backward(const ModelParams& p, std::span<const SequenceRef> batch,
                                 const BackwardOptions& opts = {}) {
  if (batch.empty()) throw Error("backward: empty batch");
  if (opts.dropout > 0.0 && !opts.rng) throw Error("backward: dropout requires an rng");
  const int n = p.arch.hidden_dim;
  const double scale = opts.loss_scale / static_cast<double>(batch.size());
  const double keep = 1.0 - opts.dropout;
  LossAndGradients out{0.0, ModelParams::zeros(p.arch)};
  Gradients& g = out.grads;
  std::vector<StepCache> caches;
  std::vector<VectorXd> masks;
  for (const auto& seq : batch) {
    if (seq.tokens.empty()) throw Error("backward: empty sequence");
    const auto T = seq.tokens.size();
    caches.assign(T, StepCache{});
    masks.assign(opts.dropout > 0.0 ? T : 0, VectorXd());
    VectorXd state = initial_state(p.arch);
    for (std::size_t t = 0; t < T; ++t) {
      if (opts.dropout > 0.0) {
        VectorXd mask(n);
        for (int i = 0; i < n; ++i) mask(i) = opts.rng->uniform() < keep ? 1.0 / keep : 0.0;
        state.head(n).array() *= mask.array();
        masks[t] = std::move(mask);
      }
      const int tok = seq.tokens[t];
      if (tok < 0 || tok >= p.arch.vocab_size) throw Error("token id out of range");
      state = detail::step_impl(p, state, p.embedding.row(tok).transpose(), &caches[t]);
    }
    const VectorXd h = state.head(n);
    const VectorXd logits = readout(p, h);
    out.loss += scale * cross_entropy(logits, seq.label);
    VectorXd dlogits = softmax(logits);
    dlogits(seq.label) -= 1.0;
    dlogits *= scale;
    g.readout_weights.noalias() += dlogits * h.transpose();
    g.readout_bias += dlogits;
    VectorXd d_state = VectorXd::Zero(p.arch.state_dim());
    d_state.head(n) = p.readout_weights.transpose() * dlogits;
    VectorXd dx;
    for (std::size_t t = T; t-- > 0;) {
      d_state = detail::step_backward(p, caches[t], d_state, g, dx);
      if (!masks.empty()) d_state.head(n).array() *= masks[t].array();
      g.embedding.row(seq.tokens[t]) += dx.transpose();
    }
  }
  return out;
}

struct AdamState {
  ModelParams m;
  ModelParams v;
  long step = 0;

  static AdamState for_params(const ModelParams& p) { return {ModelParams::zeros(p.arch), ModelParams::zeros(p.arch), 0}; }
};

inline void adam_step(ModelParams& p, AdamState& state, const Gradients& grads, double lr,
                      const AdamConfig& cfg) {
  ++state.step;
  adam_update(p.embedding, state.m.embedding, state.v.embedding, grads.embedding, state.step, lr, cfg);
  adam_update(p.input_weights, state.m.input_weights, state.v.input_weights, grads.input_weights, state.step, lr, cfg);
  adam_update(p.recurrent_weights, state.m.recurrent_weights, state.v.recurrent_weights, grads.recurrent_weights,
              state.step, lr, cfg);
  adam_update(p.bias, state.m.bias, state.v.bias, grads.bias, state.step, lr, cfg);
  adam_update(p.readout_weights, state.m.readout_weights, state.v.readout_weights, grads.readout_weights,
              state.step, lr, cfg);
  adam_update(p.readout_bias, state.m.readout_bias, state.v.readout_bias, grads.readout_bias, state.step, lr, cfg);
}

struct Metrics {
  double accuracy = 0.0;
  std::vector<double> precision;
  std::vector<double> recall;
  std::vector<double> f1;
  std::vector<int> support;                  // true count per class
  std::vector<bool> absent;                  // class has no sample in the split
  std::vector<std::vector<int>> confusion;   // [true][predicted]

  double macro_f1() const {
    double s = 0.0;
    int k = 0;
    for (std::size_t i = 0; i < f1.size(); ++i) {
      if (absent[i]) continue;
      s += f1[i];
      ++k;
    }
    return k ? s / k : 0.0;
  }
};

/// Metrics from a confusion matrix. Undefined precision/recall (0/0) is 0.
inline Metrics metrics_from_confusion(std::vector<std::vector<int>> confusion) {
  const std::size_t k = confusion.size();
  Metrics m;
  m.confusion = std::move(confusion);
  m.precision.assign(k, 0.0);
  m.recall.assign(k, 0.0);
  m.f1.assign(k, 0.0);
  m.support.assign(k, 0);
  m.absent.assign(k, false);
  long correct = 0;
  long total = 0;
  std::vector<long> predicted(k, 0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      m.support[i] += m.confusion[i][j];
      predicted[j] += m.confusion[i][j];
      total += m.confusion[i][j];
    }
    correct += m.confusion[i][i];
  }
  for (std::size_t i = 0; i < k; ++i) {
    const double tp = m.confusion[i][i];
    m.absent[i] = m.support[i] == 0;
    m.precision[i] = predicted[i] ? tp / static_cast<double>(predicted[i]) : 0.0;
    m.recall[i] = m.support[i] ? tp / static_cast<double>(m.support[i]) : 0.0;
    const double denom = m.precision[i] + m.recall[i];
    m.f1[i] = denom > 0.0 ? 2.0 * m.precision[i] * m.recall[i] / denom : 0.0;
  }
  m.accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return m;
}

inline Metrics evaluate(const ModelParams& p, const LabeledCorpus& corpus, Split split) {
  const auto idx = corpus.indices(split);
  if (idx.empty()) throw Error("evaluate: split '" + std::string(split_name(split)) + "' is empty");
  const auto k = static_cast<std::size_t>(corpus.n_intents());
  std::vector<int> predicted(idx.size());
  parallel_for(idx.size(), thread_budget(), [&](std::size_t i) {
    predicted[i] = predict(p, corpus.sentences[idx[i]].tokens);
  });
  std::vector<std::vector<int>> confusion(k, std::vector<int>(k, 0));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto truth = static_cast<std::size_t>(corpus.sentences[idx[i]].intent);
    ++confusion[truth][static_cast<std::size_t>(predicted[i])];
  }
  return metrics_from_confusion(std::move(confusion));
}

inline double accuracy(const ModelParams& p, const LabeledCorpus& corpus, Split split) {
  return evaluate(p, corpus, split).accuracy;
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double learning_rate = 0.0;
};

struct TrainResult {
  ModelParams params;  // best validation-accuracy checkpoint
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_accuracy = 0.0;
};

/// Minibatch BPTT with Adam and early stopping on validation accuracy.
/// Corpus tokens must already be encoded with a vocabulary of arch.vocab_size.
inline TrainResult train(const LabeledCorpus& corpus, const ArchSpec& arch, const TrainConfig& cfg) {
  cfg.validate();
  arch.validate();
  const auto train_idx = corpus.indices(Split::train);
  const auto val_idx = corpus.indices(Split::val);
  if (train_idx.empty()) throw Error("train: corpus has no training sentences");
  if (val_idx.empty()) throw Error("train: corpus has no validation sentences");

  ModelParams params = init_params(arch, cfg.seed);
  params.check_shapes();
  AdamState adam = AdamState::for_params(params);
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  TrainResult result;
  result.params = params;
  result.best_val_accuracy = -1.0;
  double lr = cfg.learning_rate;
  int stale = 0;
  std::vector<std::size_t> order = train_idx;
  std::vector<SequenceRef> batch;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    long step = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      batch.clear();
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = corpus.sentences[order[i]];
        batch.push_back({s.tokens, s.intent});
      }
      BackwardOptions opts;
      opts.dropout = cfg.dropout;
      opts.rng = &rng;
      auto lg = backward(params, batch, opts);
      ++step;
      if (!std::isfinite(lg.loss)) {
        throw Error("training diverged at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
      }
      epoch_loss += lg.loss * static_cast<double>(end - start);
      adam_step(params, adam, lg.grads, lr, cfg.adam);
    }
    const double val_acc = accuracy(params, corpus, Split::val);
    result.history.push_back({epoch, epoch_loss / static_cast<double>(order.size()), val_acc, lr});
    if (val_acc > result.best_val_accuracy) {
      result.best_val_accuracy = val_acc;
      result.best_epoch = epoch;
      result.params = params;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
    if (cfg.halve_after_epoch && epoch == *cfg.halve_after_epoch) lr *= 0.5;
  }
  return result;
}

}  // namespace rnn_dynamo
