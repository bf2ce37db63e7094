#pragma once

#include "rnn_dynamo/checkpoint.hpp"
#include "rnn_dynamo/common.hpp"
#include "rnn_dynamo/corpus.hpp"
#include "rnn_dynamo/recurrent.hpp"

#include <vector>

namespace rnn_dynamo {

enum class StateSelection { all, final };

struct StateProvenance {
  std::size_t sentence = 0;  // index into the corpus
  int position = 0;          // 0-based token index
  int label = 0;
  bool is_final = false;
};

struct StateSpaceSample {
  MatrixXd states;  // S x n
  std::vector<StateProvenance> provenance;

  Eigen::Index size() const { return states.rows(); }
  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(provenance.size());
    for (const auto& p : provenance) out.push_back(p.label);
    return out;
  }
};

/// Hidden states (h only, also for LSTM) visited while processing a split.
inline StateSpaceSample collect_states(const ModelParams& p, const LabeledCorpus& corpus, Split split,
                                       StateSelection which) {
  const auto idx = corpus.indices(split);
  if (idx.empty()) throw Error("collect_states: split '" + std::string(split_name(split)) + "' is empty");
  std::vector<HiddenTrajectory> trajs(idx.size());
  parallel_for(idx.size(), thread_budget(), [&](std::size_t i) {
    const auto& s = corpus.sentences[idx[i]];
    trajs[i] = forward(p, s.tokens, s.intent);
  });
  Eigen::Index rows = 0;
  for (const auto& t : trajs) rows += which == StateSelection::all ? t.length() : 1;
  StateSpaceSample sample;
  sample.states.resize(rows, p.arch.hidden_dim);
  sample.provenance.reserve(static_cast<std::size_t>(rows));
  Eigen::Index r = 0;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const auto& t = trajs[i];
    const int first = which == StateSelection::all ? 0 : t.length() - 1;
    for (int pos = first; pos < t.length(); ++pos) {
      sample.states.row(r++) = t.states.row(pos);
      sample.provenance.push_back({idx[i], pos, t.label, pos == t.length() - 1});
    }
  }
  return sample;
}

struct PcaBasis {
  VectorXd mean;                      // n
  MatrixXd components;                // n x n, column k is the k-th principal axis
  VectorXd explained_variance_ratio;  // n, non-increasing, sums to 1

  int dim() const { return static_cast<int>(mean.size()); }
};

/// Mean-centred PCA through the SVD of the centred sample. Each axis is
/// signed so that its largest-magnitude entry is positive.
inline PcaBasis pca_fit(const MatrixXd& states) {
  if (states.rows() < 2) throw Error("pca_fit: need at least 2 samples");
  if (!states.allFinite()) throw Error("pca_fit: non-finite sample");
  const Eigen::Index n = states.cols();
  PcaBasis basis;
  basis.mean = states.colwise().mean().transpose();
  const MatrixXd centered = states.rowwise() - basis.mean.transpose();
  Eigen::BDCSVD<MatrixXd> svd(centered, Eigen::ComputeFullV);
  const VectorXd sv = svd.singularValues();
  const double total = sv.squaredNorm();
  const double scale = centered.cwiseAbs().maxCoeff();
  if (!(total > 0.0) || scale == 0.0 || sv(0) <= 1e-12 * scale) throw Error("degenerate sample");
  basis.components = svd.matrixV();
  basis.explained_variance_ratio = VectorXd::Zero(n);
  for (Eigen::Index k = 0; k < sv.size(); ++k) basis.explained_variance_ratio(k) = sv(k) * sv(k) / total;
  for (Eigen::Index k = 0; k < n; ++k) {
    Eigen::Index at = 0;
    basis.components.col(k).cwiseAbs().maxCoeff(&at);
    if (basis.components(at, k) < 0.0) basis.components.col(k) *= -1.0;
  }
  return basis;
}

inline PcaBasis pca_fit(const StateSpaceSample& sample) { return pca_fit(sample.states); }

/// Smallest k whose cumulative explained variance reaches the threshold. The
/// comparison allows 1e-12 of rounding slack in the running sum.
inline int intrinsic_dimensionality(const PcaBasis& basis, double threshold = 0.95) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error("threshold must be in (0, 1)");
  double cumulative = 0.0;
  for (int k = 0; k < basis.explained_variance_ratio.size(); ++k) {
    cumulative += basis.explained_variance_ratio(k);
    if (cumulative >= threshold - 1e-12) return k + 1;
  }
  return basis.dim();
}

/// Rows of `vectors` expressed in the top-k axes. Points are centred first;
/// direction vectors (center = false) such as readout rows are not.
inline MatrixXd project(const PcaBasis& basis, const MatrixXd& vectors, int k, bool center) {
  if (k < 1 || k > basis.dim()) throw Error("project: k must be in [1, n]");
  if (vectors.cols() != basis.dim()) throw Error("project: dimension mismatch");
  const auto axes = basis.components.leftCols(k);
  if (center) return (vectors.rowwise() - basis.mean.transpose()) * axes;
  return vectors * axes;
}

inline VectorXd project_point(const PcaBasis& basis, const VectorXd& v, int k, bool center) {
  return project(basis, MatrixXd(v.transpose()), k, center).row(0).transpose();
}

/// Inverse of a k = n centred projection.
inline MatrixXd reconstruct(const PcaBasis& basis, const MatrixXd& projected) {
  const auto k = projected.cols();
  return (projected * basis.components.leftCols(k).transpose()).rowwise() + basis.mean.transpose();
}

inline TensorContainer to_container(const PcaBasis& b) {
  TensorContainer c;
  c.header["kind"] = "pca_basis";
  c.header["dim"] = b.dim();
  c.tensors.emplace_back("mean", MatrixXd(b.mean));
  c.tensors.emplace_back("components", b.components);
  c.tensors.emplace_back("explained_variance_ratio", MatrixXd(b.explained_variance_ratio));
  return c;
}

inline PcaBasis basis_from_container(const TensorContainer& c) {
  if (c.header.value("kind", "") != "pca_basis") throw Error("container is not a PCA basis");
  PcaBasis b;
  b.mean = c.at("mean");
  b.components = c.at("components");
  b.explained_variance_ratio = c.at("explained_variance_ratio");
  if (b.components.rows() != b.mean.size() || b.components.cols() != b.mean.size()) {
    throw Error("PCA basis tensors have inconsistent shapes");
  }
  return b;
}

}  // namespace rnn_dynamo
