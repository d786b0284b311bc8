#pragma once

// Physics branch: closed-system diffusion and advection operators on the
// station graph, the boundary-aware open-system right-hand side with its
// diffusion/advection gate, the recurrent coefficient estimator, and the
// forward solve plus temporal encoding of the simulated concentrations.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "airdual/autodiff.hpp"
#include "airdual/errors.hpp"
#include "airdual/geo_graph.hpp"
#include "airdual/matrix.hpp"
#include "airdual/nn.hpp"
#include "airdual/ode_solver.hpp"

namespace airdual::physics {

using ad::Tensor;

enum class OperatorMode { exact, learned };

/// `standard` smooths toward neighbours: k * sum_j w_ij (X_j - X_i).
/// `printed` flips it to k * sum_j w_ij (X_i - X_j).
enum class DiffusionSign { standard, printed };

inline OperatorMode parse_operator_mode(const std::string& s) {
  if (s == "exact") return OperatorMode::exact;
  if (s == "learned") return OperatorMode::learned;
  throw ConfigError("operator_mode must be 'exact' or 'learned'");
}

inline DiffusionSign parse_diffusion_sign(const std::string& s) {
  if (s == "standard") return DiffusionSign::standard;
  if (s == "printed") return DiffusionSign::printed;
  throw ConfigError("diffusion_sign must be 'standard' or 'printed'");
}

struct PhysicsParams {
  double k = 0.0;
  std::vector<double> beta;

  void validate() const {
    if (!(k >= 0.0)) throw InvariantViolation("diffusion coefficient k must be >= 0");
    for (std::size_t i = 0; i < beta.size(); ++i)
      if (!(beta[i] >= -1.0))
        throw InvariantViolation("beta[" + std::to_string(i) + "] = " + std::to_string(beta[i]) + " < -1");
  }
};

// ---------------------------------------------------------------------------
// Exact closed-system operators

inline double sign_factor(DiffusionSign s) { return s == DiffusionSign::standard ? 1.0 : -1.0; }

/// dX_i/dt = k * sum_j w_ij (X_j - X_i) under the standard sign.
inline std::vector<double> diffusion_rhs_exact(std::span<const double> x, const geo::DiffusionGraph& g,
                                               double k, DiffusionSign sign = DiffusionSign::standard) {
  const auto n = g.weights.rows();
  if (x.size() != n) throw ShapeError("diffusion_rhs_exact: state length differs from graph size");
  const double s = sign_factor(sign) * k;
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && g.weights(i, j) != 0.0) acc += g.weights(i, j) * (x[j] - x[i]);
    out[i] = s * acc;
  }
  return out;
}

/// dX_i/dt = -sum_{i->m} w_im X_i + sum_{j->i} w_ji X_j.
inline std::vector<double> advection_rhs_exact(std::span<const double> x, const geo::AdvectionGraph& g) {
  const auto n = g.weights.rows();
  if (x.size() != n) throw ShapeError("advection_rhs_exact: state length differs from graph size");
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double outflow = 0.0, inflow = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      outflow += g.weights(i, j);
      inflow += g.weights(j, i) * x[j];
    }
    out[i] = -outflow * x[i] + inflow;
  }
  return out;
}

/// Matrix M with M X = diffusion_rhs_exact(X, g, 1, sign).
inline Matrix diffusion_operator(const geo::DiffusionGraph& g, DiffusionSign sign = DiffusionSign::standard) {
  const auto n = g.weights.rows();
  const double s = sign_factor(sign);
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) {
        m(i, j) = s * g.weights(i, j);
        deg += g.weights(i, j);
      }
    m(i, i) = -s * deg;
  }
  return m;
}

/// Matrix A with A X = advection_rhs_exact(X, g): W^T minus out-degree on the diagonal.
inline Matrix advection_operator(const geo::AdvectionGraph& g) {
  const auto n = g.weights.rows();
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double out = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) {
        m(i, j) = g.weights(j, i);
        out += g.weights(i, j);
      }
    m(i, i) = -out;
  }
  return m;
}

/// Largest absolute row sum; bounds the spectral radius.
inline double row_sum_bound(const Matrix& m) {
  double best = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double s = 0.0;
    for (double v : m.row(i)) s += std::abs(v);
    best = std::max(best, s);
  }
  return best;
}

/// Transport operators for one forecast window, precomputed as constants.
///
/// The Chebyshev variants are the exact matrices divided by their row-sum
/// bound so that the learned expansion starts from T_1 times that bound.
struct WindowOperators {
  Tensor diffusion;               // N x N
  std::vector<Tensor> advection;  // one per interval
  Tensor diffusion_scaled;
  double diffusion_scale = 1.0;
  std::vector<Tensor> advection_scaled;
  std::vector<double> advection_scale;

  static WindowOperators build(const geo::DiffusionGraph& dg, const std::vector<geo::AdvectionGraph>& ags,
                               DiffusionSign sign) {
    if (ags.empty()) throw ConfigError("at least one advection graph is required");
    WindowOperators w;
    auto scaled = [](const Matrix& m, double& scale) {
      scale = row_sum_bound(m);
      if (scale <= 0.0) scale = 1.0;
      Matrix s = m;
      for (double& v : s.data()) v /= scale;
      return Tensor::from(s);
    };
    const Matrix d = diffusion_operator(dg, sign);
    w.diffusion = Tensor::from(d);
    w.diffusion_scaled = scaled(d, w.diffusion_scale);
    for (const auto& g : ags) {
      const Matrix a = advection_operator(g);
      w.advection.push_back(Tensor::from(a));
      double s = 1.0;
      w.advection_scaled.push_back(scaled(a, s));
      w.advection_scale.push_back(s);
    }
    return w;
  }
};

/// Per-station gate alpha = sigmoid(w_d * diffusion_i + w_a * advection_i + b).
struct GateAlpha {
  Tensor weight;  // 2 x 1
  Tensor bias;    // 1 x 1
  /// When set, alpha is this constant everywhere.
  std::optional<double> forced;

  GateAlpha() = default;
  GateAlpha(nn::ParameterSet& ps, const std::string& prefix)
      : weight(ps.add_constant(prefix + ".weight", 2, 1, 0.0)), bias(ps.add_constant(prefix + ".bias", 1, 1, 0.0)) {}

  static GateAlpha constant(double alpha) {
    GateAlpha g;
    g.forced = alpha;
    return g;
  }

  Tensor operator()(const Tensor& diffusion_term, const Tensor& advection_term) const {
    if (forced) return Tensor::full(diffusion_term.rows(), 1, *forced);
    const Tensor features = ad::concat_cols({diffusion_term, advection_term});
    return ad::sigmoid(ad::add_row(ad::matmul(features, weight), bias));
  }
};

/// Learnable Chebyshev coefficients for the two transport operators.
struct LearnedOperators {
  Tensor diffusion_theta;  // 1 x K
  Tensor advection_theta;  // 1 x K
  int order = 3;

  LearnedOperators() = default;
  LearnedOperators(nn::ParameterSet& ps, const std::string& prefix, int k) : order(k) {
    if (k < 1) throw ConfigError("Chebyshev order K must be >= 1");
    std::vector<double> init(static_cast<std::size_t>(k), 0.0);
    if (k > 1) init[1] = 1.0;
    diffusion_theta = ps.add(prefix + ".diffusion_theta", Tensor::parameter(1, k, init));
    advection_theta = ps.add(prefix + ".advection_theta", Tensor::parameter(1, k, init));
  }

  static Tensor apply(const Tensor& scaled_op, double scale, const Tensor& theta, const Tensor& x, int order) {
    const auto terms = nn::chebyshev_terms(scaled_op, x, order);
    Tensor acc = ad::scale_by(terms[0], ad::slice_cols(theta, 0, 1));
    for (int k = 1; k < order; ++k) acc = acc + ad::scale_by(terms[k], ad::slice_cols(theta, k, 1));
    return scale * acc;
  }
};

/// Coefficients for one window: k is 1x1, beta is N x 1.
struct Coefficients {
  Tensor k;
  Tensor beta;

  PhysicsParams values() const {
    PhysicsParams p{k.item(), beta.to_vector()};
    return p;
  }
};

/// BA-DAE right-hand side:
///   dX/dt = alpha * (k D X) + (1 - alpha) * (A X) + beta * X
/// with D, A exact or Chebyshev-learned.
inline Tensor badae_rhs(const Tensor& x, const WindowOperators& ops, std::size_t interval, const Coefficients& c,
                        const GateAlpha& gate, OperatorMode mode, const LearnedOperators* learned = nullptr) {
  if (x.cols() != 1 || x.rows() != ops.diffusion.rows()) throw ShapeError("badae_rhs: state must be N x 1");
  if (interval >= ops.advection.size()) throw ConfigError("badae_rhs: no advection graph for interval");
  for (std::size_t i = 0; i < c.beta.size(); ++i)
    if (!(c.beta.value()[i] >= -1.0)) throw InvariantViolation("beta below -1 at station " + std::to_string(i));
  Tensor diff, adv;
  if (mode == OperatorMode::exact) {
    diff = ad::matmul(ops.diffusion, x);
    adv = ad::matmul(ops.advection[interval], x);
  } else {
    if (!learned) throw ConfigError("learned operator mode needs Chebyshev parameters");
    diff = LearnedOperators::apply(ops.diffusion_scaled, ops.diffusion_scale, learned->diffusion_theta, x,
                                   learned->order);
    adv = LearnedOperators::apply(ops.advection_scaled[interval], ops.advection_scale[interval],
                                  learned->advection_theta, x, learned->order);
  }
  diff = ad::scale_by(diff, c.k);
  const Tensor alpha = gate(diff, adv);
  return alpha * diff + (1.0 - alpha) * adv + c.beta * x;
}

/// Value-level convenience wrapper around badae_rhs for exact operators.
inline std::vector<double> badae_rhs_exact(std::span<const double> x, const geo::DiffusionGraph& dg,
                                           const geo::AdvectionGraph& ag, const PhysicsParams& p,
                                           const GateAlpha& gate, DiffusionSign sign = DiffusionSign::standard) {
  p.validate();
  ad::NoGradScope no_grad;
  const auto ops = WindowOperators::build(dg, {ag}, sign);
  const Coefficients c{Tensor::scalar(p.k), Tensor::column(p.beta)};
  return badae_rhs(Tensor::column({x.begin(), x.end()}), ops, 0, c, gate, OperatorMode::exact).to_vector();
}

// ---------------------------------------------------------------------------
// Coefficient estimator

/// GRU over the history; k = softplus(head(mean hidden)), beta_i = softplus(head(h_i) + e_i) - 1.
struct CoefficientEstimator {
  nn::GruCell gru;
  Tensor k_weight, k_bias;        // H x 1, 1 x 1
  Tensor beta_weight, beta_bias;  // H x 1, 1 x 1
  Tensor station_bias;            // N x 1

  CoefficientEstimator() = default;
  CoefficientEstimator(nn::ParameterSet& ps, const std::string& prefix, std::size_t features, std::size_t hidden,
                       std::size_t stations, double initial_k, double initial_beta, nn::Rng& rng)
      : gru(ps, prefix + ".gru", features, hidden, rng),
        k_weight(ps.add_constant(prefix + ".k_weight", hidden, 1, 0.0)),
        k_bias(ps.add_constant(prefix + ".k_bias", 1, 1, inverse_softplus(initial_k))),
        beta_weight(ps.add_constant(prefix + ".beta_weight", hidden, 1, 0.0)),
        beta_bias(ps.add_constant(prefix + ".beta_bias", 1, 1, inverse_softplus(initial_beta + 1.0))),
        station_bias(ps.add_constant(prefix + ".station_bias", stations, 1, 0.0)) {}

  static double inverse_softplus(double y) {
    if (!(y > 0.0)) throw ConfigError("softplus target must be positive");
    return y > 30.0 ? y : std::log(std::expm1(y));
  }

  /// `history` holds T tensors of shape N x D.
  Coefficients operator()(const std::vector<Tensor>& history) const {
    if (history.size() < 2) throw InsufficientDataError("coefficient estimation needs at least 2 history steps");
    const auto n = history.front().rows();
    if (station_bias.rows() != n) throw ShapeError("estimator: station count mismatch");
    Tensor h = gru.initial_state(n);
    for (const auto& x : history) h = gru(x, h);
    const Tensor pooled = ad::matmul(Tensor::full(1, n, 1.0 / static_cast<double>(n)), h);
    const Tensor k = ad::softplus(ad::add_row(ad::matmul(pooled, k_weight), k_bias));
    const Tensor beta = ad::softplus(ad::add_row(ad::matmul(h, beta_weight), beta_bias) + station_bias) - 1.0;
    return {k, beta};
  }
};

// ---------------------------------------------------------------------------
// Forward solve

/// Integrates the BA-DAE over `horizon` output steps of `step_hours`. Interval
/// i of the output grid uses advection operator min(i, last). Training path:
/// fixed-step RK4, every stage recorded on the active tape.
inline std::vector<Tensor> solve_physics_rk4(const Tensor& x0, std::size_t horizon, double step_hours,
                                             double fixed_dt, const WindowOperators& ops, const Coefficients& c,
                                             const GateAlpha& gate, OperatorMode mode,
                                             const LearnedOperators* learned = nullptr) {
  std::vector<Tensor> out;
  out.reserve(horizon);
  Tensor x = x0;
  for (std::size_t i = 0; i < horizon; ++i) {
    const std::size_t interval = std::min(i, ops.advection.size() - 1);
    auto rhs = [&](double, const Tensor& y) { return badae_rhs(y, ops, interval, c, gate, mode, learned); };
    const double t0 = static_cast<double>(i) * step_hours;
    const double t1 = t0 + step_hours;
    x = ode::integrate_rk4(rhs, x, t0, std::span<const double>(&t1, 1), fixed_dt).front();
    out.push_back(x);
  }
  return out;
}

/// Inference path: dopri5, restarted wherever the advection operator switches.
inline std::vector<std::vector<double>> solve_physics_dopri5(
    const std::vector<double>& x0, std::size_t horizon, double step_hours, const WindowOperators& ops,
    const Coefficients& c, const GateAlpha& gate, OperatorMode mode, double rtol, double atol, int max_steps,
    const LearnedOperators* learned = nullptr) {
  ad::NoGradScope no_grad;
  std::vector<std::vector<double>> out;
  out.reserve(horizon);
  std::vector<double> x = x0;
  std::size_t i = 0;
  while (i < horizon) {
    const std::size_t interval = std::min(i, ops.advection.size() - 1);
    // Steps sharing this operator: all remaining ones once we reach the last graph.
    const std::size_t run = interval + 1 < ops.advection.size() ? 1 : horizon - i;
    ode::SolveSpec spec;
    spec.rtol = rtol;
    spec.atol = atol;
    spec.max_steps = max_steps;
    spec.t0 = static_cast<double>(i) * step_hours;
    for (std::size_t s = 1; s <= run; ++s) spec.output_times.push_back(static_cast<double>(i + s) * step_hours);
    auto rhs = [&](double, const std::vector<double>& y) {
      return badae_rhs(Tensor::column(y), ops, interval, c, gate, mode, learned).to_vector();
    };
    auto traj = ode::solve(rhs, x, spec);
    for (auto& s : traj.states) out.push_back(std::move(s));
    x = out.back();
    i += run;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Encoder from simulated concentrations to latents

/// Per-station GRU over the simulated trajectory; the hidden state at each
/// step is that step's latent.
struct PhysicsEncoder {
  nn::GruCell gru;

  PhysicsEncoder() = default;
  PhysicsEncoder(nn::ParameterSet& ps, const std::string& prefix, std::size_t latent, nn::Rng& rng)
      : gru(ps, prefix + ".gru", 1, latent, rng) {}

  /// (tau, N, 1) -> (tau, N, d)
  std::vector<Tensor> operator()(const std::vector<Tensor>& trajectory) const {
    if (trajectory.empty()) throw InsufficientDataError("encode_physics: empty trajectory");
    std::vector<Tensor> z;
    z.reserve(trajectory.size());
    Tensor h = gru.initial_state(trajectory.front().rows());
    for (const auto& x : trajectory) {
      h = gru(x, h);
      z.push_back(h);
    }
    return z;
  }
};

}  // namespace airdual::physics
