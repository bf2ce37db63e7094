#pragma once

#include "rnn_dynamo/common.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace rnn_dynamo {

enum class CellType { vanilla, gru, lstm };

inline std::string_view cell_name(CellType c) {
  switch (c) {
    case CellType::vanilla: return "vanilla";
    case CellType::gru: return "gru";
    case CellType::lstm: return "lstm";
  }
  return "?";
}

inline CellType parse_cell(std::string_view name) {
  if (name == "vanilla" || name == "rnn" || name == "simple") return CellType::vanilla;
  if (name == "gru") return CellType::gru;
  if (name == "lstm") return CellType::lstm;
  throw Error("unknown cell type '" + std::string(name) + "'");
}

struct ArchSpec {
  CellType cell = CellType::gru;
  int embed_dim = 16;
  int hidden_dim = 16;
  int n_classes = 7;
  int vocab_size = 2;

  // Stacked gate blocks: vanilla 1, GRU 3 (z, r, candidate), LSTM 4 (i, f, g, o).
  int gates() const {
    switch (cell) {
      case CellType::vanilla: return 1;
      case CellType::gru: return 3;
      case CellType::lstm: return 4;
    }
    return 1;
  }

  // Dimension of the dynamical state: h, or (h, c) for LSTM.
  int state_dim() const { return cell == CellType::lstm ? 2 * hidden_dim : hidden_dim; }

  void validate() const {
    if (embed_dim < 1 || hidden_dim < 1 || n_classes < 1) {
      throw Error("embed_dim, hidden_dim and n_classes must be >= 1");
    }
    if (vocab_size < 2) throw Error("vocab_size must be >= 2");
  }

  bool operator==(const ArchSpec&) const = default;
};

/// All trainable tensors. Gate blocks are stacked row-wise in the order given
/// by ArchSpec::gates(). h0 is always the zero vector and is not stored.
struct ModelParams {
  ArchSpec arch;
  MatrixXd embedding;          // vocab_size x m
  MatrixXd input_weights;      // G*n x m
  MatrixXd recurrent_weights;  // G*n x n
  VectorXd bias;               // G*n
  MatrixXd readout_weights;    // N x n, row i is the readout vector r_i
  VectorXd readout_bias;       // N

  static ModelParams zeros(const ArchSpec& arch) {
    arch.validate();
    const int g = arch.gates() * arch.hidden_dim;
    ModelParams p;
    p.arch = arch;
    p.embedding = MatrixXd::Zero(arch.vocab_size, arch.embed_dim);
    p.input_weights = MatrixXd::Zero(g, arch.embed_dim);
    p.recurrent_weights = MatrixXd::Zero(g, arch.hidden_dim);
    p.bias = VectorXd::Zero(g);
    p.readout_weights = MatrixXd::Zero(arch.n_classes, arch.hidden_dim);
    p.readout_bias = VectorXd::Zero(arch.n_classes);
    return p;
  }

  // Calls f(name, tensor) for each tensor in checkpoint order.
  template <class F>
  void for_each_tensor(F&& f) {
    f("embedding", embedding);
    f("input_weights", input_weights);
    f("recurrent_weights", recurrent_weights);
    f("bias", bias);
    f("readout_weights", readout_weights);
    f("readout_bias", readout_bias);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    f("embedding", embedding);
    f("input_weights", input_weights);
    f("recurrent_weights", recurrent_weights);
    f("bias", bias);
    f("readout_weights", readout_weights);
    f("readout_bias", readout_bias);
  }

  void check_shapes() const {
    arch.validate();
    const auto g = arch.gates() * arch.hidden_dim;
    const bool ok = embedding.rows() == arch.vocab_size && embedding.cols() == arch.embed_dim &&
                    input_weights.rows() == g && input_weights.cols() == arch.embed_dim &&
                    recurrent_weights.rows() == g && recurrent_weights.cols() == arch.hidden_dim &&
                    bias.size() == g && readout_weights.rows() == arch.n_classes &&
                    readout_weights.cols() == arch.hidden_dim && readout_bias.size() == arch.n_classes;
    if (!ok) throw Error("parameter shapes do not match the architecture");
    bool finite = true;
    for_each_tensor([&](std::string_view, const auto& t) { finite = finite && t.allFinite(); });
    if (!finite) throw Error("parameters contain non-finite values");
  }
};

inline double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

namespace detail {

inline MatrixXd orthogonal(int n, Rng& rng) {
  MatrixXd a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = rng.normal();
  Eigen::HouseholderQR<MatrixXd> qr(a);
  MatrixXd q = qr.householderQ() * MatrixXd::Identity(n, n);
  const MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < n; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  return q;
}

inline void glorot_uniform(Eigen::Ref<MatrixXd> m, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-limit, limit);
}

}  // namespace detail

/// Glorot-uniform input, embedding and readout weights; orthogonal recurrent
/// blocks; zero biases.
inline ModelParams init_params(const ArchSpec& arch, std::uint64_t seed) {
  ModelParams p = ModelParams::zeros(arch);
  Rng rng(seed);
  const int n = arch.hidden_dim;
  const int m = arch.embed_dim;
  detail::glorot_uniform(p.embedding, arch.vocab_size, m, rng);
  for (int g = 0; g < arch.gates(); ++g) {
    detail::glorot_uniform(p.input_weights.middleRows(g * n, n), m, n, rng);
  }
  for (int g = 0; g < arch.gates(); ++g) {
    p.recurrent_weights.middleRows(g * n, n) = detail::orthogonal(n, rng);
  }
  detail::glorot_uniform(p.readout_weights, n, arch.n_classes, rng);
  return p;
}

/// Gate activations of one step, kept for backpropagation.
struct StepCache {
  VectorXd state_in;  // state entering the cell (after any dropout mask)
  VectorXd x;
  VectorXd gates;     // G*n post-activation gate values
  VectorXd state_out;
};

namespace detail {

inline void check_step_inputs(const ModelParams& p, const VectorXd& state, const VectorXd& x) {
  if (state.size() != p.arch.state_dim() || x.size() != p.arch.embed_dim) {
    throw Error("cell_step: input shapes do not match the architecture");
  }
  if (!state.allFinite() || !x.allFinite()) throw Error("non-finite state");
}

// Core update; fills the cache when one is given.
inline VectorXd step_impl(const ModelParams& p, const VectorXd& state, const VectorXd& x,
                          StepCache* cache) {
  const int n = p.arch.hidden_dim;
  const auto& W = p.input_weights;
  const auto& U = p.recurrent_weights;
  VectorXd out(p.arch.state_dim());
  VectorXd gates(p.arch.gates() * n);
  switch (p.arch.cell) {
    case CellType::vanilla: {
      gates = (W * x + U * state + p.bias).array().tanh();
      out = gates;
      break;
    }
    case CellType::gru: {
      const VectorXd h = state;
      const VectorXd pre_zr = W.topRows(2 * n) * x + U.topRows(2 * n) * h + p.bias.head(2 * n);
      for (int i = 0; i < 2 * n; ++i) gates(i) = sigmoid(pre_zr(i));
      const auto z = gates.segment(0, n);
      const auto r = gates.segment(n, n);
      const VectorXd reset_h = r.cwiseProduct(h);
      gates.segment(2 * n, n) =
          (W.middleRows(2 * n, n) * x + U.middleRows(2 * n, n) * reset_h + p.bias.segment(2 * n, n))
              .array()
              .tanh();
      const auto cand = gates.segment(2 * n, n);
      out = z.cwiseProduct(h) + (VectorXd::Ones(n) - z).cwiseProduct(cand);
      break;
    }
    case CellType::lstm: {
      const auto h = state.head(n);
      const auto c = state.tail(n);
      const VectorXd pre = W * x + U * h + p.bias;
      for (int i = 0; i < 2 * n; ++i) gates(i) = sigmoid(pre(i));
      gates.segment(2 * n, n) = pre.segment(2 * n, n).array().tanh();
      for (int i = 3 * n; i < 4 * n; ++i) gates(i) = sigmoid(pre(i));
      const auto ig = gates.segment(0, n);
      const auto fg = gates.segment(n, n);
      const auto gg = gates.segment(2 * n, n);
      const auto og = gates.segment(3 * n, n);
      const VectorXd c_new = fg.cwiseProduct(c) + ig.cwiseProduct(gg);
      out.head(n) = og.cwiseProduct(c_new.array().tanh().matrix());
      out.tail(n) = c_new;
      break;
    }
  }
  if (cache) {
    cache->state_in = state;
    cache->x = x;
    cache->gates = std::move(gates);
    cache->state_out = out;
  }
  return out;
}

}  // namespace detail

/// One application of the update map. For LSTM, `state` and the result are
/// the concatenation (h, c).
inline VectorXd cell_step(const ModelParams& p, const VectorXd& state, const VectorXd& x) {
  detail::check_step_inputs(p, state, x);
  return detail::step_impl(p, state, x, nullptr);
}

inline VectorXd embed(const ModelParams& p, int token) {
  if (token < 0 || token >= p.arch.vocab_size) throw Error("token id out of range");
  return p.embedding.row(token).transpose();
}

inline VectorXd initial_state(const ArchSpec& arch) { return VectorXd::Zero(arch.state_dim()); }

struct HiddenTrajectory {
  MatrixXd states;      // T x n, rows h_1..h_T
  MatrixXd cellstates;  // T x n for LSTM, empty otherwise
  std::vector<int> tokens;
  int label = -1;

  int length() const { return static_cast<int>(states.rows()); }
  VectorXd final_state() const { return states.row(states.rows() - 1).transpose(); }
};

inline HiddenTrajectory forward(const ModelParams& p, const std::vector<int>& tokens, int label = -1) {
  if (tokens.empty()) throw Error("forward: empty token sequence");
  const int n = p.arch.hidden_dim;
  const auto T = static_cast<Eigen::Index>(tokens.size());
  HiddenTrajectory traj;
  traj.tokens = tokens;
  traj.label = label;
  traj.states.resize(T, n);
  if (p.arch.cell == CellType::lstm) traj.cellstates.resize(T, n);
  VectorXd state = initial_state(p.arch);
  for (Eigen::Index t = 0; t < T; ++t) {
    try {
      state = cell_step(p, state, embed(p, tokens[static_cast<std::size_t>(t)]));
    } catch (const Error& e) {
      throw Error("token " + std::to_string(t) + ": " + e.what());
    }
    traj.states.row(t) = state.head(n).transpose();
    if (p.arch.cell == CellType::lstm) traj.cellstates.row(t) = state.tail(n).transpose();
  }
  return traj;
}

inline VectorXd readout(const ModelParams& p, const VectorXd& h) {
  return p.readout_weights * h + p.readout_bias;
}

/// Index of the largest logit; ties go to the lowest index.
inline int argmax(const VectorXd& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return best;
}

inline int predict(const ModelParams& p, const std::vector<int>& tokens) {
  return argmax(readout(p, forward(p, tokens).final_state()));
}

namespace detail {

// d(out)/d(state) and d(out)/d(x) from the gate values of one step.
inline void step_jacobians(const ModelParams& p, const VectorXd& state, const VectorXd& gates,
                           const VectorXd& out, MatrixXd* jrec, MatrixXd* jinp) {
  const int n = p.arch.hidden_dim;
  const auto& W = p.input_weights;
  const auto& U = p.recurrent_weights;
  switch (p.arch.cell) {
    case CellType::vanilla: {
      const VectorXd dtanh = (1.0 - out.array().square()).matrix();
      if (jrec) *jrec = dtanh.asDiagonal() * U;
      if (jinp) *jinp = dtanh.asDiagonal() * W;
      break;
    }
    case CellType::gru: {
      const VectorXd h = state;
      const VectorXd z = gates.segment(0, n);
      const VectorXd r = gates.segment(n, n);
      const VectorXd cand = gates.segment(2 * n, n);
      const VectorXd dz = ((h - cand).array() * z.array() * (1.0 - z.array())).matrix();
      const VectorXd dc = ((1.0 - z.array()) * (1.0 - cand.array().square())).matrix();
      const VectorXd dr = (r.array() * (1.0 - r.array()) * h.array()).matrix();
      const auto Uz = U.middleRows(0, n);
      const auto Ur = U.middleRows(n, n);
      const auto Uc = U.middleRows(2 * n, n);
      if (jrec) {
        // d(r*h)/dh = diag(r) + diag(h * r(1-r)) Ur
        MatrixXd ds = dr.asDiagonal() * Ur;
        ds.diagonal() += r;
        *jrec = dz.asDiagonal() * Uz + dc.asDiagonal() * (Uc * ds);
        jrec->diagonal() += z;
      }
      if (jinp) {
        const MatrixXd ds = dr.asDiagonal() * W.middleRows(n, n);
        *jinp = dz.asDiagonal() * W.middleRows(0, n) +
                dc.asDiagonal() * (W.middleRows(2 * n, n) + Uc * ds);
      }
      break;
    }
    case CellType::lstm: {
      const VectorXd c = state.tail(n);
      const VectorXd ig = gates.segment(0, n);
      const VectorXd fg = gates.segment(n, n);
      const VectorXd gg = gates.segment(2 * n, n);
      const VectorXd og = gates.segment(3 * n, n);
      const VectorXd tc = out.tail(n).array().tanh();
      const VectorXd di = (ig.array() * (1.0 - ig.array()) * gg.array()).matrix();
      const VectorXd df = (fg.array() * (1.0 - fg.array()) * c.array()).matrix();
      const VectorXd dg = ((1.0 - gg.array().square()) * ig.array()).matrix();
      const VectorXd dout = (og.array() * (1.0 - og.array()) * tc.array()).matrix();
      const VectorXd dtc = (og.array() * (1.0 - tc.array().square())).matrix();
      auto pre_jac = [&](const MatrixXd& M, int block) { return M.middleRows(block * n, n); };
      auto cell_wrt = [&](const MatrixXd& M) {
        return MatrixXd(di.asDiagonal() * pre_jac(M, 0) + df.asDiagonal() * pre_jac(M, 1) +
                        dg.asDiagonal() * pre_jac(M, 2));
      };
      if (jrec) {
        const MatrixXd dc_dh = cell_wrt(U);
        jrec->setZero(2 * n, 2 * n);
        jrec->topLeftCorner(n, n) = dout.asDiagonal() * pre_jac(U, 3) + dtc.asDiagonal() * dc_dh;
        jrec->topRightCorner(n, n) = (dtc.array() * fg.array()).matrix().asDiagonal();
        jrec->bottomLeftCorner(n, n) = dc_dh;
        jrec->bottomRightCorner(n, n) = fg.asDiagonal();
      }
      if (jinp) {
        const MatrixXd dc_dx = cell_wrt(W);
        jinp->resize(2 * n, p.arch.embed_dim);
        jinp->topRows(n) = dout.asDiagonal() * pre_jac(W, 3) + dtc.asDiagonal() * dc_dx;
        jinp->bottomRows(n) = dc_dx;
      }
      break;
    }
  }
}

}  // namespace detail

/// Analytic d F / d state at (state, x); state_dim x state_dim.
inline MatrixXd recurrent_jacobian(const ModelParams& p, const VectorXd& state, const VectorXd& x) {
  detail::check_step_inputs(p, state, x);
  StepCache cache;
  detail::step_impl(p, state, x, &cache);
  MatrixXd j;
  detail::step_jacobians(p, state, cache.gates, cache.state_out, &j, nullptr);
  return j;
}

/// Analytic d F / d x at (state, x); state_dim x m.
inline MatrixXd input_jacobian(const ModelParams& p, const VectorXd& state, const VectorXd& x) {
  detail::check_step_inputs(p, state, x);
  StepCache cache;
  detail::step_impl(p, state, x, &cache);
  MatrixXd j;
  detail::step_jacobians(p, state, cache.gates, cache.state_out, nullptr, &j);
  return j;
}

/// F(state, x) together with its recurrent Jacobian, sharing one evaluation.
inline std::pair<VectorXd, MatrixXd> step_with_jacobian(const ModelParams& p, const VectorXd& state,
                                                        const VectorXd& x) {
  StepCache cache;
  VectorXd out = detail::step_impl(p, state, x, &cache);
  MatrixXd j;
  detail::step_jacobians(p, state, cache.gates, out, &j, nullptr);
  return {std::move(out), std::move(j)};
}

}  // namespace rnn_dynamo
