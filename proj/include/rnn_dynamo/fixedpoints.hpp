#pragma once

#include "rnn_dynamo/adam.hpp"
#include "rnn_dynamo/common.hpp"
#include "rnn_dynamo/corpus.hpp"
#include "rnn_dynamo/recurrent.hpp"
#include "rnn_dynamo/statespace.hpp"

#include <algorithm>
#include <complex>
#include <numeric>
#include <vector>

namespace rnn_dynamo {

struct FpSearchConfig {
  int n_seeds = 5000;
  double noise_sigma = 0.01;
  int max_steps = 1000;         // Adam iterations per seed
  double learning_rate = 1e-2;  // Adam step size on h
  double q_threshold = 1e-8;
  double dedup_eps = 1e-2;
  double tau = 1e-3;            // hyperbolicity margin around |lambda| = 1
  int newton_steps = 25;        // damped Newton polish after the Adam phase
  bool pad_input = false;       // use the pad embedding instead of x = 0
  std::uint64_t seed = 0;
  unsigned threads = 0;         // 0: thread_budget()

  void validate() const {
    if (n_seeds < 1) throw Error("n_seeds must be >= 1");
    if (noise_sigma < 0.0) throw Error("noise_sigma must be >= 0");
    if (!(q_threshold > 0.0) || !(dedup_eps > 0.0) || !(tau > 0.0) || !(learning_rate > 0.0)) {
      throw Error("fixed-point thresholds must be positive");
    }
  }
};

enum class Stability { stable, saddle, unstable, marginal };

inline std::string_view stability_name(Stability s) {
  switch (s) {
    case Stability::stable: return "stable";
    case Stability::saddle: return "saddle";
    case Stability::unstable: return "unstable";
    case Stability::marginal: return "marginal";
  }
  return "?";
}

struct Spectrum {
  std::vector<std::complex<double>> eigenvalues;  // sorted by modulus, largest first
  Stability stability = Stability::stable;
  int index = 0;  // eigenvalues with |lambda| > 1 + tau
};

struct FixedPoint {
  VectorXd location;  // state_dim
  double q = 0.0;
  Spectrum spectrum;
  double distance = 0.0;  // to the projected origin in the reduced PCA space
};

/// The constant input of the autonomous map.
inline VectorXd autonomous_input(const ModelParams& p, bool pad_input = false) {
  return pad_input ? embed(p, kPadId) : VectorXd::Zero(p.arch.embed_dim);
}

/// q = 1/2 |h - F(h, x)|^2
inline double speed(const ModelParams& p, const VectorXd& h, const VectorXd& x) {
  const VectorXd d = h - cell_step(p, h, x);
  return 0.5 * d.squaredNorm();
}

inline double speed(const ModelParams& p, const VectorXd& h) { return speed(p, h, autonomous_input(p)); }

/// grad q = (I - J^T)(h - F(h, x))
inline VectorXd speed_gradient(const ModelParams& p, const VectorXd& h, const VectorXd& x) {
  const auto [f, j] = step_with_jacobian(p, h, x);
  const VectorXd d = h - f;
  return d - j.transpose() * d;
}

/// Full trajectory states, (h, c) for LSTM, of every sentence in a split.
inline MatrixXd collect_dynamical_states(const ModelParams& p, const LabeledCorpus& corpus, Split split) {
  const auto idx = corpus.indices(split);
  Eigen::Index rows = 0;
  for (auto i : idx) rows += static_cast<Eigen::Index>(corpus.sentences[i].tokens.size());
  MatrixXd out(rows, p.arch.state_dim());
  Eigen::Index r = 0;
  for (auto i : idx) {
    VectorXd state = initial_state(p.arch);
    for (int tok : corpus.sentences[i].tokens) {
      state = cell_step(p, state, embed(p, tok));
      out.row(r++) = state.transpose();
    }
  }
  return out;
}

/// Rows drawn uniformly with replacement, plus isotropic Gaussian noise.
inline MatrixXd sample_seeds(const MatrixXd& states, const FpSearchConfig& cfg) {
  if (states.rows() == 0) throw Error("sample_seeds: empty sample");
  Rng rng(cfg.seed);
  MatrixXd seeds(cfg.n_seeds, states.cols());
  for (int i = 0; i < cfg.n_seeds; ++i) {
    seeds.row(i) = states.row(static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(states.rows()))));
    if (cfg.noise_sigma > 0.0) {
      for (Eigen::Index d = 0; d < states.cols(); ++d) seeds(i, d) += cfg.noise_sigma * rng.normal();
    }
  }
  return seeds;
}

/// Eigenvalues of J and the resulting stability class.
inline Spectrum classify_spectrum(const MatrixXd& jacobian, double tau) {
  Eigen::EigenSolver<MatrixXd> solver(jacobian, false);
  if (solver.info() != Eigen::Success) throw Error("eigensolver did not converge");
  Spectrum s;
  const auto ev = solver.eigenvalues();
  s.eigenvalues.assign(ev.data(), ev.data() + ev.size());
  std::stable_sort(s.eigenvalues.begin(), s.eigenvalues.end(), [](const auto& a, const auto& b) {
    if (std::abs(a) != std::abs(b)) return std::abs(a) > std::abs(b);
    if (a.real() != b.real()) return a.real() > b.real();
    return a.imag() > b.imag();
  });
  bool marginal = false;
  for (const auto& l : s.eigenvalues) {
    const double mod = std::abs(l);
    if (mod > 1.0 + tau) ++s.index;
    if (std::abs(mod - 1.0) <= tau) marginal = true;
  }
  if (marginal) {
    s.stability = Stability::marginal;
  } else if (s.index == 0) {
    s.stability = Stability::stable;
  } else if (s.index == static_cast<int>(s.eigenvalues.size())) {
    s.stability = Stability::unstable;
  } else {
    s.stability = Stability::saddle;
  }
  return s;
}

inline Spectrum classify_fixed_point(const ModelParams& p, const VectorXd& h, double tau,
                                     const VectorXd& x) {
  return classify_spectrum(recurrent_jacobian(p, h, x), tau);
}

inline Spectrum classify_fixed_point(const ModelParams& p, const VectorXd& h, double tau = 1e-3) {
  return classify_fixed_point(p, h, tau, autonomous_input(p));
}

namespace detail {

struct SeedOutcome {
  VectorXd location;
  double q = 0.0;
};

inline SeedOutcome minimize_speed(const ModelParams& p, VectorXd h, const VectorXd& x, const FpSearchConfig& cfg) {
  const AdamConfig adam{0.9, 0.999, 1e-12};
  VectorXd m = VectorXd::Zero(h.size());
  VectorXd v = VectorXd::Zero(h.size());
  double q = 0.0;
  for (int step = 1; step <= cfg.max_steps; ++step) {
    const auto [f, j] = step_with_jacobian(p, h, x);
    const VectorXd d = h - f;
    q = 0.5 * d.squaredNorm();
    if (!std::isfinite(q) || q < 1e-3 * cfg.q_threshold) break;
    const VectorXd grad = d - j.transpose() * d;
    adam_update(h, m, v, grad, step, cfg.learning_rate, adam);
  }
  // Damped Newton on G(h) = h - F(h): only steps that lower q are kept.
  const auto n = h.size();
  for (int it = 0; it < cfg.newton_steps; ++it) {
    const auto [f, j] = step_with_jacobian(p, h, x);
    const VectorXd d = h - f;
    q = 0.5 * d.squaredNorm();
    if (!std::isfinite(q) || q == 0.0) break;
    const MatrixXd jac = MatrixXd::Identity(n, n) - j;
    const VectorXd delta = jac.colPivHouseholderQr().solve(-d);
    if (!delta.allFinite()) break;
    bool improved = false;
    for (double alpha = 1.0; alpha >= 1.0 / 1024.0; alpha *= 0.5) {
      const VectorXd trial = h + alpha * delta;
      const VectorXd dt = trial - detail::step_impl(p, trial, x, nullptr);
      const double qt = 0.5 * dt.squaredNorm();
      if (std::isfinite(qt) && qt < q) {
        h = trial;
        q = qt;
        improved = true;
        break;
      }
    }
    if (!improved) break;
  }
  return {std::move(h), q};
}

}  // namespace detail

struct FixedPointSearch {
  std::vector<FixedPoint> points;  // accepted, not deduplicated, in seed order
  int n_seeds = 0;
  int n_dropped = 0;
};

/// Minimises q from every seed (Adam on h with the analytic gradient, then a
/// damped Newton polish) and keeps the points with q below the threshold.
inline FixedPointSearch find_fixed_points(const ModelParams& p, const MatrixXd& seeds, const FpSearchConfig& cfg) {
  cfg.validate();
  if (seeds.cols() != p.arch.state_dim()) throw Error("find_fixed_points: seed dimension mismatch");
  const VectorXd x = autonomous_input(p, cfg.pad_input);
  std::vector<detail::SeedOutcome> outcomes(static_cast<std::size_t>(seeds.rows()));
  parallel_for(outcomes.size(), cfg.threads ? cfg.threads : thread_budget(), [&](std::size_t i) {
    outcomes[i] = detail::minimize_speed(p, seeds.row(static_cast<Eigen::Index>(i)).transpose(), x, cfg);
  });
  FixedPointSearch out;
  out.n_seeds = static_cast<int>(seeds.rows());
  for (auto& o : outcomes) {
    if (!(o.q < cfg.q_threshold) || !o.location.allFinite()) {
      ++out.n_dropped;
      continue;
    }
    FixedPoint fp;
    fp.location = std::move(o.location);
    fp.q = o.q;
    out.points.push_back(std::move(fp));
  }
  return out;
}

/// Single-linkage grouping at radius eps. Each group is represented by its
/// lowest-q member; output is ordered by (q, location).
inline std::vector<FixedPoint> deduplicate(std::vector<FixedPoint> points, double eps) {
  std::sort(points.begin(), points.end(), [](const FixedPoint& a, const FixedPoint& b) {
    if (a.q != b.q) return a.q < b.q;
    return std::lexicographical_compare(a.location.data(), a.location.data() + a.location.size(), b.location.data(),
                                        b.location.data() + b.location.size());
  });
  std::vector<std::size_t> parent(points.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  const double eps2 = eps * eps;
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t j = i + 1; j < points.size(); ++j) {
      if ((points[i].location - points[j].location).squaredNorm() <= eps2) {
        const auto a = find(i);
        const auto b = find(j);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
      }
    }
  }
  std::vector<FixedPoint> reps;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (find(i) == i) reps.push_back(std::move(points[i]));
  }
  return reps;
}

/// Classifies every point and measures its distance to the projected origin
/// in the top-k PCA space (h part only for LSTM states).
inline void annotate_fixed_points(const ModelParams& p, std::vector<FixedPoint>& points, const PcaBasis& basis,
                                  int k, const FpSearchConfig& cfg) {
  const VectorXd x = autonomous_input(p, cfg.pad_input);
  const int n = p.arch.hidden_dim;
  const VectorXd origin = project_point(basis, VectorXd::Zero(n), k, true);
  for (std::size_t i = 0; i < points.size(); ++i) {
    try {
      points[i].spectrum = classify_fixed_point(p, points[i].location, cfg.tau, x);
    } catch (const Error& e) {
      throw Error("fixed point " + std::to_string(i) + ": " + e.what());
    }
    points[i].distance = (project_point(basis, points[i].location.head(n), k, true) - origin).norm();
  }
}

struct FixedPointSummary {
  int stable = 0;
  int saddle_1 = 0;
  int saddle_2 = 0;
  int saddle_higher = 0;  // index >= 3
  int unstable = 0;
  int marginal = 0;
  SummaryStats delta_stable;
  SummaryStats delta_1;
  SummaryStats delta_2;

  int higher_index() const { return saddle_2 + saddle_higher; }
};

inline FixedPointSummary fp_report(const std::vector<FixedPoint>& points) {
  FixedPointSummary s;
  std::vector<double> d_s, d_1, d_2;
  for (const auto& fp : points) {
    switch (fp.spectrum.stability) {
      case Stability::stable:
        ++s.stable;
        d_s.push_back(fp.distance);
        break;
      case Stability::saddle:
        if (fp.spectrum.index == 1) {
          ++s.saddle_1;
          d_1.push_back(fp.distance);
        } else if (fp.spectrum.index == 2) {
          ++s.saddle_2;
          d_2.push_back(fp.distance);
        } else {
          ++s.saddle_higher;
        }
        break;
      case Stability::unstable: ++s.unstable; break;
      case Stability::marginal: ++s.marginal; break;
    }
  }
  s.delta_stable = summarize(std::move(d_s));
  s.delta_1 = summarize(std::move(d_1));
  s.delta_2 = summarize(std::move(d_2));
  return s;
}

/// Iterates the autonomous map `steps` times.
inline VectorXd iterate_map(const ModelParams& p, VectorXd h, const VectorXd& x, int steps) {
  for (int i = 0; i < steps; ++i) h = cell_step(p, h, x);
  return h;
}

/// Largest ratio |F^steps(h* + e) - h*| / |e| over random directions e of norm eps.
inline double perturbation_return_ratio(const ModelParams& p, const FixedPoint& fp, const VectorXd& x, double eps,
                                        int directions, int steps, std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (int d = 0; d < directions; ++d) {
    VectorXd e(fp.location.size());
    for (Eigen::Index i = 0; i < e.size(); ++i) e(i) = rng.normal();
    e *= eps / e.norm();
    const VectorXd end = iterate_map(p, fp.location + e, x, steps);
    worst = std::max(worst, (end - fp.location).norm() / eps);
  }
  return worst;
}

/// Growth factor of a perturbation along the leading unstable eigendirection.
inline double unstable_growth(const ModelParams& p, const FixedPoint& fp, const VectorXd& x, double eps, int steps) {
  const MatrixXd j = recurrent_jacobian(p, fp.location, x);
  Eigen::EigenSolver<MatrixXd> solver(j, true);
  if (solver.info() != Eigen::Success) throw Error("eigensolver did not converge");
  Eigen::Index top = 0;
  solver.eigenvalues().cwiseAbs().maxCoeff(&top);
  const Eigen::VectorXcd vec = solver.eigenvectors().col(top);
  VectorXd dir = vec.real();
  if (dir.norm() < 1e-12) dir = vec.imag();
  dir.normalize();
  const VectorXd end = iterate_map(p, fp.location + eps * dir, x, steps);
  return (end - fp.location).norm() / eps;
}

}  // namespace rnn_dynamo
