#pragma once

// Neural building blocks on top of the autodiff tensors: parameter storage,
// seeded initialization, linear layers, GRU cells, masked self-attention,
// Chebyshev graph convolution, Adam and checkpoint serialization.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "airdual/autodiff.hpp"
#include "airdual/errors.hpp"
#include "airdual/matrix.hpp"

namespace airdual::nn {

using ad::Tensor;

/// Seeded generator with platform-independent uniform and normal draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

/// Named trainable tensors in registration order.
class ParameterSet {
 public:
  Tensor add(std::string name, Tensor t) {
    for (const auto& [n, _] : items_)
      if (n == name) throw ConfigError("duplicate parameter name: " + name);
    items_.emplace_back(std::move(name), t);
    return t;
  }

  /// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization.
  Tensor add_uniform(std::string name, std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return add(std::move(name), Tensor::parameter(rows, cols, std::move(v)));
  }

  Tensor add_constant(std::string name, std::size_t rows, std::size_t cols, double value) {
    return add(std::move(name), Tensor::parameter(rows, cols, std::vector<double>(rows * cols, value)));
  }

  const std::vector<std::pair<std::string, Tensor>>& items() const noexcept { return items_; }
  std::size_t size() const noexcept { return items_.size(); }

  Tensor get(const std::string& name) const {
    for (const auto& [n, t] : items_)
      if (n == name) return t;
    throw ConfigError("no parameter named " + name);
  }

  std::size_t scalar_count() const {
    std::size_t c = 0;
    for (const auto& [_, t] : items_) c += t.size();
    return c;
  }

  void zero_grad() {
    for (auto& [_, t] : items_) t.zero_grad();
  }

  /// Scales gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
  double clip_grad_norm(double max_norm) {
    double s = 0.0;
    for (const auto& [_, t] : items_)
      for (double g : t.grad()) s += g * g;
    const double norm = std::sqrt(s);
    if (norm > max_norm && norm > 0.0) {
      const double f = max_norm / norm;
      for (const auto& [_, t] : items_) {
        Tensor p = t;
        for (double& g : p.mutable_grad()) g *= f;
      }
    }
    return norm;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [n, t] : items_)
      j[n] = {{"shape", {t.rows(), t.cols()}}, {"values", t.to_vector()}};
    return j;
  }

  /// Overwrites values in place from a checkpoint block; shapes must match.
  void load_json(const nlohmann::json& j) {
    for (auto& [n, t] : items_) {
      if (!j.contains(n)) throw IoError("checkpoint lacks parameter " + n);
      const auto& e = j.at(n);
      const auto shape = e.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2 || shape[0] != t.rows() || shape[1] != t.cols())
        throw ShapeError("checkpoint shape mismatch for " + n);
      const auto values = e.at("values").get<std::vector<double>>();
      if (values.size() != t.size()) throw ShapeError("checkpoint value count mismatch for " + n);
      std::copy(values.begin(), values.end(), t.mutable_value().begin());
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out

  Linear() = default;
  Linear(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng)
      : weight(ps.add_uniform(prefix + ".weight", in, out, in, rng)),
        bias(ps.add_uniform(prefix + ".bias", 1, out, in, rng)) {}

  Tensor operator()(const Tensor& x) const {
    if (x.cols() != weight.rows())
      throw ShapeError("linear: input width " + std::to_string(x.cols()) + ", expected " +
                       std::to_string(weight.rows()));
    return ad::add_row(ad::matmul(x, weight), bias);
  }
};

/// GRU cell applied row-wise: each row of `x` and `h` is an independent sequence.
///
///   r  = sigmoid(x W_r + b_r + h U_r + c_r)
///   z  = sigmoid(x W_z + b_z + h U_z + c_z)
///   n  = tanh(x W_n + b_n + r * (h U_n + c_n))
///   h' = (1 - z) * n + z * h
struct GruCell {
  Tensor w_input;   // in x 3H, blocks [r | z | n]
  Tensor w_hidden;  // H x 3H
  Tensor b_input;   // 1 x 3H
  Tensor b_hidden;  // 1 x 3H
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;

  GruCell() = default;
  GruCell(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t hidden, Rng& rng)
      : w_input(ps.add_uniform(prefix + ".w_input", in, 3 * hidden, hidden, rng)),
        w_hidden(ps.add_uniform(prefix + ".w_hidden", hidden, 3 * hidden, hidden, rng)),
        b_input(ps.add_uniform(prefix + ".b_input", 1, 3 * hidden, hidden, rng)),
        b_hidden(ps.add_uniform(prefix + ".b_hidden", 1, 3 * hidden, hidden, rng)),
        input_size(in),
        hidden_size(hidden) {}

  Tensor operator()(const Tensor& x, const Tensor& h) const {
    if (x.cols() != input_size || h.cols() != hidden_size || x.rows() != h.rows())
      throw ShapeError("gru_cell: dimension mismatch");
    const auto H = hidden_size;
    const Tensor gx = ad::add_row(ad::matmul(x, w_input), b_input);
    const Tensor gh = ad::add_row(ad::matmul(h, w_hidden), b_hidden);
    const Tensor r = ad::sigmoid(ad::slice_cols(gx, 0, H) + ad::slice_cols(gh, 0, H));
    const Tensor z = ad::sigmoid(ad::slice_cols(gx, H, H) + ad::slice_cols(gh, H, H));
    const Tensor n = ad::tanh(ad::slice_cols(gx, 2 * H, H) + r * ad::slice_cols(gh, 2 * H, H));
    return (1.0 - z) * n + z * h;
  }

  Tensor initial_state(std::size_t rows) const { return Tensor::zeros(rows, hidden_size); }
};

/// Single-head scaled dot-product self-attention restricted by a boolean mask.
struct MaskedSelfAttention {
  Tensor w_query, w_key, w_value;  // d x d
  std::size_t dim = 0;

  struct Output {
    Tensor values;   // N x d
    Tensor weights;  // N x N attention probabilities
  };

  MaskedSelfAttention() = default;
  MaskedSelfAttention(ParameterSet& ps, const std::string& prefix, std::size_t d, Rng& rng)
      : w_query(ps.add_uniform(prefix + ".w_query", d, d, d, rng)),
        w_key(ps.add_uniform(prefix + ".w_key", d, d, d, rng)),
        w_value(ps.add_uniform(prefix + ".w_value", d, d, d, rng)),
        dim(d) {}

  Output operator()(const Tensor& z, const std::vector<std::uint8_t>& mask) const {
    if (z.cols() != dim) throw ShapeError("masked_attention: latent width mismatch");
    const Tensor q = ad::matmul(z, w_query);
    const Tensor k = ad::matmul(z, w_key);
    const Tensor v = ad::matmul(z, w_value);
    const Tensor logits = (1.0 / std::sqrt(static_cast<double>(dim))) * ad::matmul(q, ad::transpose(k));
    const Tensor attn = ad::masked_softmax(logits, mask);
    return {ad::matmul(attn, v), attn};
  }
};

/// Adjacency plus self-loops as a row-major mask.
inline std::vector<std::uint8_t> mask_with_self_loops(std::vector<std::uint8_t> adjacency, std::size_t n) {
  if (adjacency.size() != n * n) throw ShapeError("adjacency must be n x n");
  for (std::size_t i = 0; i < n; ++i) adjacency[i * n + i] = 1;
  return adjacency;
}

/// T_0 X, T_1 X, ..., T_{K-1} X for the Chebyshev recurrence
/// T_0 = I, T_1 = L, T_k = 2 L T_{k-1} - T_{k-2}.
inline std::vector<Tensor> chebyshev_terms(const Tensor& op, const Tensor& x, int order) {
  if (order < 1) throw ConfigError("Chebyshev order K must be >= 1");
  if (op.rows() != op.cols() || op.cols() != x.rows()) throw ShapeError("chebyshev: operator must be N x N");
  std::vector<Tensor> terms{x};
  if (order > 1) terms.push_back(ad::matmul(op, x));
  for (int k = 2; k < order; ++k)
    terms.push_back(2.0 * ad::matmul(op, terms[k - 1]) - terms[k - 2]);
  return terms;
}

/// Laplacian L = D - W rescaled to 2 L / bound - I, with the Gershgorin bound
/// 2 max_i deg_i standing in for the largest eigenvalue.
inline Matrix scaled_laplacian(const Matrix& weights) {
  const auto n = weights.rows();
  if (weights.cols() != n) throw ShapeError("scaled_laplacian: weights must be square");
  Matrix lap(n, n);
  double max_deg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) {
        lap(i, j) = -weights(i, j);
        deg += weights(i, j);
      }
    lap(i, i) = deg;
    max_deg = std::max(max_deg, deg);
  }
  Matrix out(n, n);
  const double bound = 2.0 * max_deg;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out(i, j) = (bound > 0.0 ? 2.0 * lap(i, j) / bound : 0.0) - (i == j ? 1.0 : 0.0);
  return out;
}

/// Chebyshev spectral graph convolution: sum_k T_k(L) X W_k.
struct ChebGraphConv {
  int order = 1;
  Tensor op;  // scaled operator, constant
  std::vector<Tensor> weights;

  ChebGraphConv() = default;
  ChebGraphConv(ParameterSet& ps, const std::string& prefix, int k, std::size_t in, std::size_t out,
                const Matrix& scaled_operator, Rng& rng)
      : order(k), op(Tensor::from(scaled_operator)) {
    if (k < 1) throw ConfigError("Chebyshev order K must be >= 1");
    for (int i = 0; i < k; ++i)
      weights.push_back(ps.add_uniform(prefix + ".w" + std::to_string(i), in, out, in * k, rng));
  }

  Tensor operator()(const Tensor& x) const {
    const auto terms = chebyshev_terms(op, x, order);
    Tensor acc = ad::matmul(terms[0], weights[0]);
    for (int k = 1; k < order; ++k) acc = acc + ad::matmul(terms[k], weights[k]);
    return acc;
  }
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(ParameterSet& params, AdamConfig cfg = {}) : params_(params), cfg_(cfg) {
    for (const auto& [_, t] : params_.items()) {
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    std::size_t k = 0;
    for (const auto& [_, t] : params_.items()) {
      Tensor p = t;
      auto val = p.mutable_value();
      const auto g = p.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < val.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        val[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      }
      ++k;
    }
  }

  long steps() const noexcept { return t_; }

 private:
  ParameterSet& params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace airdual::nn
