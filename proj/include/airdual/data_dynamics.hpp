#pragma once

// Data branch: a per-station recurrent encoder for the observed history and
// a latent ODE whose right-hand side mixes stations only through masked
// self-attention over the geospatial graph.

#include <cstdint>
#include <string>
#include <vector>

#include "airdual/autodiff.hpp"
#include "airdual/errors.hpp"
#include "airdual/nn.hpp"
#include "airdual/ode_solver.hpp"

namespace airdual::latent {

using ad::Tensor;

/// GRU over time per station, then a linear head to width d.
struct EncoderD {
  nn::GruCell gru;
  nn::Linear head;
  std::size_t features = 0;

  EncoderD() = default;
  EncoderD(nn::ParameterSet& ps, const std::string& prefix, std::size_t feature_count, std::size_t hidden,
           std::size_t latent, nn::Rng& rng)
      : gru(ps, prefix + ".gru", feature_count, hidden, rng),
        head(ps, prefix + ".head", hidden, latent, rng),
        features(feature_count) {}

  /// `history` holds T tensors of shape N x D (pollutant first, then covariates).
  Tensor operator()(const std::vector<Tensor>& history) const {
    if (history.empty()) throw InsufficientDataError("encode_history: empty history");
    for (const auto& x : history)
      if (x.cols() != features)
        throw ShapeError("encode_history: feature width " + std::to_string(x.cols()) + ", expected " +
                         std::to_string(features));
    Tensor h = gru.initial_state(history.front().rows());
    for (const auto& x : history) h = gru(x, h);
    return head(h);
  }
};

/// F(Z) = tanh(U + tanh(U W1 + b1) W2 + b2), U = MaskedAttention(Z).
/// Autonomous: time is never an input.
struct LatentOdeRhs {
  nn::MaskedSelfAttention attention;
  nn::Linear hidden;
  nn::Linear output;
  std::vector<std::uint8_t> mask;  // N x N, adjacency plus self-loops

  LatentOdeRhs() = default;
  LatentOdeRhs(nn::ParameterSet& ps, const std::string& prefix, std::size_t latent, nn::Rng& rng)
      : attention(ps, prefix + ".attention", latent, rng),
        hidden(ps, prefix + ".mlp1", latent, latent, rng),
        output(ps, prefix + ".mlp2", latent, latent, rng) {}

  void set_graph(const std::vector<std::uint8_t>& adjacency, std::size_t n) {
    mask = nn::mask_with_self_loops(adjacency, n);
  }

  Tensor operator()(const Tensor& z) const {
    if (mask.size() != z.rows() * z.rows()) throw ShapeError("latent rhs: graph mask not set for this size");
    const Tensor u = attention(z, mask).values;
    return ad::tanh(u + output(ad::tanh(hidden(u))));
  }
};

/// Training path: fixed-step RK4 on the tape. Returns the latent at each of
/// `horizon` output steps spaced `step_hours` apart.
inline std::vector<Tensor> solve_data_rk4(const LatentOdeRhs& f, const Tensor& z0, std::size_t horizon,
                                          double step_hours, double fixed_dt) {
  std::vector<double> times(horizon);
  for (std::size_t i = 0; i < horizon; ++i) times[i] = static_cast<double>(i + 1) * step_hours;
  return ode::integrate_rk4([&f](double, const Tensor& z) { return f(z); }, z0, 0.0, times, fixed_dt);
}

/// Inference path: adaptive dopri5 on the flattened latent.
inline std::vector<Tensor> solve_data_dopri5(const LatentOdeRhs& f, const Tensor& z0, std::size_t horizon,
                                             double step_hours, double rtol, double atol, int max_steps,
                                             double t0 = 0.0) {
  ad::NoGradScope no_grad;
  const auto rows = z0.rows(), cols = z0.cols();
  ode::SolveSpec spec;
  spec.rtol = rtol;
  spec.atol = atol;
  spec.max_steps = max_steps;
  spec.t0 = t0;
  for (std::size_t i = 0; i < horizon; ++i) spec.output_times.push_back(t0 + static_cast<double>(i + 1) * step_hours);
  auto rhs = [&](double, const std::vector<double>& y) { return f(Tensor::constant(rows, cols, y)).to_vector(); };
  const auto traj = ode::solve(rhs, z0.to_vector(), spec);
  std::vector<Tensor> out;
  out.reserve(horizon);
  for (const auto& s : traj.states) out.push_back(Tensor::constant(rows, cols, s));
  return out;
}

}  // namespace airdual::latent
