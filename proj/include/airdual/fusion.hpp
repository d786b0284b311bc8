#pragma once

// Fusion of the two latent trajectories: decaying temporal contrastive
// alignment, graph convolution over the concatenated latents, and the
// decoder back to concentrations.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "airdual/autodiff.hpp"
#include "airdual/errors.hpp"
#include "airdual/matrix.hpp"
#include "airdual/nn.hpp"

namespace airdual::fusion {

using ad::Tensor;

enum class TclDenominator { skip_positive, standard };
enum class PredictionNorm { l1, l2 };

inline TclDenominator parse_tcl_denominator(const std::string& s) {
  if (s == "skip_positive") return TclDenominator::skip_positive;
  if (s == "standard") return TclDenominator::standard;
  throw ConfigError("tcl_denominator must be 'skip_positive' or 'standard'");
}

inline PredictionNorm parse_prediction_norm(const std::string& s) {
  if (s == "l1") return PredictionNorm::l1;
  if (s == "l2") return PredictionNorm::l2;
  throw ConfigError("prediction_norm must be 'l1' or 'l2'");
}

struct DecayTclConfig {
  double lambda1 = 1.0;
  double lambda2 = 0.8;
  int tau = 24;
  TclDenominator denominator = TclDenominator::skip_positive;

  void validate() const {
    if (!(lambda1 > 0.0) || !(lambda2 > 0.0)) throw ConfigError("lambda1 and lambda2 must be > 0");
    if (tau < 1) throw ConfigError("tau must be >= 1");
  }
};

/// Weight for the negative pair (t, s). Offsets below tau decay at lambda1;
/// larger offsets wrap modulo tau and decay at lambda2. An offset of exactly
/// tau wraps to zero and gets weight 1.
inline double decay_weight(int t, int s, const DecayTclConfig& cfg) {
  if (t == s) throw DegenerateInputError("decay_weight: t == s is not a pair");
  const int off = std::abs(t - s);
  if (off < cfg.tau) return 2.0 * ad::sigmoid_value(-cfg.lambda1 * off);
  return 2.0 * ad::sigmoid_value(-cfg.lambda2 * static_cast<double>(off % cfg.tau));
}

/// Similarity matrix S (3tau x 3tau): station-mean cosine between latents.
inline Tensor similarity_matrix(const std::vector<Tensor>& zbar, double eps = 1e-12) {
  const auto n = zbar.front().rows();
  std::vector<Tensor> rows;
  rows.reserve(zbar.size());
  for (const auto& z : zbar) rows.push_back(ad::reshape(ad::row_normalize(z, eps), 1, z.size()));
  const Tensor f = ad::concat_rows(rows);
  return (1.0 / static_cast<double>(n)) * ad::matmul(f, ad::transpose(f));
}

/// Constant coefficient matrix C such that loss = -sum C * (S - log D) / (2 tau).
/// Row t (0-based, < 2tau) carries 1 at its positive t+tau and w(t, j) at each
/// negative j < 2tau.
inline Matrix tcl_coefficients(const DecayTclConfig& cfg) {
  const int tau = cfg.tau;
  Matrix c(static_cast<std::size_t>(3 * tau), static_cast<std::size_t>(3 * tau));
  for (int t = 0; t < 2 * tau; ++t) {
    c(t, t + tau) = 1.0;
    for (int j = 0; j < 2 * tau; ++j)
      if (j != t && j != t + tau) c(t, j) = decay_weight(t + 1, j + 1, cfg);
  }
  return c;
}

/// Decaying temporal contrastive loss between the physics and data latents.
///
/// p(t, t') = exp S(t, t') / D(t, t'). Under the `skip_positive` denominator D sums
/// exp S(t, i) over i in 1..2tau except i = t'; under `standard` it excludes
/// i = t and always includes t'.
inline Tensor tcl_loss(const std::vector<Tensor>& zp, const std::vector<Tensor>& zd, const DecayTclConfig& cfg,
                       double eps = 1e-12) {
  cfg.validate();
  const auto tau = static_cast<std::size_t>(cfg.tau);
  if (zp.size() != tau || zd.size() != tau) throw ShapeError("tcl_loss: trajectories must have tau steps");
  for (std::size_t i = 0; i < tau; ++i)
    if (zp[i].rows() != zd[i].rows() || zp[i].cols() != zd[i].cols() || zp[i].rows() != zp[0].rows() ||
        zp[i].cols() != zp[0].cols())
      throw ShapeError("tcl_loss: latent shapes differ");

  std::vector<Tensor> zbar;
  zbar.reserve(3 * tau);
  zbar.insert(zbar.end(), zp.begin(), zp.end());
  zbar.insert(zbar.end(), zd.begin(), zd.end());
  zbar.insert(zbar.end(), zp.begin(), zp.end());

  const std::size_t m = 3 * tau;
  const Tensor s = similarity_matrix(zbar, eps);
  const Tensor es = ad::exp(s);

  // Masks selecting the denominator terms: base row sum over the first 2tau
  // columns, minus one excluded entry per (t, t').
  Matrix base(m, 1);
  for (std::size_t j = 0; j < 2 * tau; ++j) base(j, 0) = 1.0;
  const Tensor rowsum = ad::matmul(es, Tensor::from(base));  // m x 1
  Matrix ones_row(1, m);
  for (double& v : ones_row.data()) v = 1.0;
  Tensor denom = ad::matmul(rowsum, Tensor::from(ones_row));  // D(t, t') before exclusion
  if (cfg.denominator == TclDenominator::skip_positive) {
    Matrix excl(m, m);
    for (std::size_t t = 0; t < m; ++t)
      for (std::size_t j = 0; j < 2 * tau; ++j) excl(t, j) = 1.0;
    denom = denom - es * Tensor::from(excl);
  } else {
    // Drop i = t; add back t' when it lies outside 1..2tau.
    Matrix self(m, m), extra(m, m);
    for (std::size_t t = 0; t < m; ++t) {
      if (t < 2 * tau) self(t, t) = 1.0;
      for (std::size_t j = 2 * tau; j < m; ++j) extra(t, j) = 1.0;
    }
    const Tensor self_sim = ad::matmul(es * Tensor::from(self), Tensor::from(base));  // m x 1
    denom = denom - ad::matmul(self_sim, Tensor::from(ones_row)) + es * Tensor::from(extra);
  }

  const Tensor coeffs = Tensor::from(tcl_coefficients(cfg));
  // Zero-coefficient entries may have a non-positive denominator; mask them.
  Matrix guard(m, m);
  for (std::size_t i = 0; i < m * m; ++i) guard.data()[i] = coeffs.value()[i] != 0.0 ? 0.0 : 1.0;
  const Tensor log_p = s - ad::log(denom + Tensor::from(guard));
  return (-1.0 / static_cast<double>(2 * tau)) * ad::sum(coeffs * log_p);
}

/// Symmetric-normalized adjacency with self-loops: D^-1/2 (A + I) D^-1/2.
inline Matrix normalized_adjacency(const std::vector<std::uint8_t>& adjacency, std::size_t n) {
  if (adjacency.size() != n * n) throw ShapeError("adjacency must be n x n");
  Matrix a(n, n);
  std::vector<double> deg(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double v = (i == j || adjacency[i * n + j]) ? 1.0 : 0.0;
      a(i, j) = v;
      deg[i] += v;
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) /= std::sqrt(deg[i] * deg[j]);
  return a;
}

/// n rounds of Z <- tanh(A_hat Z W + b) over the concatenated latents.
struct GnnFusion {
  std::vector<nn::Linear> layers;
  Tensor propagation;  // N x N, constant

  GnnFusion() = default;
  GnnFusion(nn::ParameterSet& ps, const std::string& prefix, int n_layers, std::size_t width, nn::Rng& rng) {
    if (n_layers < 1) throw ConfigError("gnn_layers must be >= 1");
    for (int l = 0; l < n_layers; ++l)
      layers.emplace_back(ps, prefix + ".layer" + std::to_string(l), width, width, rng);
  }

  void set_graph(const std::vector<std::uint8_t>& adjacency, std::size_t n) {
    propagation = Tensor::from(normalized_adjacency(adjacency, n));
  }

  Tensor operator()(const Tensor& zp, const Tensor& zd) const {
    if (zp.rows() != zd.rows() || zp.cols() != zd.cols()) throw ShapeError("gnn_fuse: latent shapes differ");
    if (!propagation.defined() || propagation.rows() != zp.rows())
      throw ShapeError("gnn_fuse: graph not set for this station count");
    Tensor z = ad::concat_cols({zp, zd});
    for (const auto& layer : layers) z = ad::tanh(layer(ad::matmul(propagation, z)));
    return z;
  }
};

/// Per-station normalization statistics for the target pollutant.
struct TargetStats {
  std::vector<double> mean;
  std::vector<double> scale;

  std::vector<double> denormalize(std::span<const double> x) const {
    if (mean.empty()) throw ConfigError("decode: normalization statistics are missing");
    if (x.size() != mean.size()) throw ShapeError("decode: station count differs from statistics");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * scale[i] + mean[i];
    return out;
  }
};

/// Linear head to one normalized concentration per station.
struct Decoder {
  nn::Linear head;

  Decoder() = default;
  Decoder(nn::ParameterSet& ps, const std::string& prefix, std::size_t width, nn::Rng& rng)
      : head(ps, prefix + ".head", width, 1, rng) {}

  Tensor operator()(const Tensor& z) const { return head(z); }
};

/// Element-mean L1 (or squared L2) over the horizon; targets must be finite.
inline Tensor prediction_loss(const std::vector<Tensor>& target, const std::vector<Tensor>& predicted,
                              PredictionNorm norm = PredictionNorm::l1) {
  if (target.size() != predicted.size() || target.empty())
    throw ShapeError("prediction_loss: horizon lengths differ");
  Tensor acc;
  std::size_t count = 0;
  for (std::size_t t = 0; t < target.size(); ++t) {
    for (double v : target[t].value())
      if (!std::isfinite(v)) throw DegenerateInputError("prediction_loss: non-finite target (unimputed gap?)");
    const Tensor r = predicted[t] - target[t];
    const Tensor e = ad::sum(norm == PredictionNorm::l1 ? ad::abs(r) : ad::square(r));
    acc = acc.defined() ? acc + e : e;
    count += r.size();
  }
  return (1.0 / static_cast<double>(count)) * acc;
}

inline Tensor total_loss(const Tensor& l_pred, const Tensor& l_tcl, double gamma) {
  if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
  if (gamma == 0.0) return l_pred;
  return l_pred + gamma * l_tcl;
}

}  // namespace airdual::fusion
