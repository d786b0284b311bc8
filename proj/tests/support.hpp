#pragma once

// Shared fixtures and independent oracles for the test suites.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "airdual/autodiff.hpp"
#include "airdual/geo_graph.hpp"
#include "airdual/matrix.hpp"
#include "airdual/nn.hpp"

namespace testsupport {

namespace fs = std::filesystem;
using airdual::Matrix;
using airdual::ad::Tensor;

/// `n` stations scattered over a box around Beijing.
inline airdual::geo::StationSet random_stations(std::size_t n, airdual::nn::Rng& rng, double box_deg = 2.0) {
  std::vector<airdual::geo::StationMeta> v;
  for (std::size_t i = 0; i < n; ++i)
    v.push_back({"S" + std::to_string(i), 39.0 + rng.uniform(0.0, box_deg), 116.0 + rng.uniform(0.0, box_deg),
                 rng.uniform(0.0, 500.0)});
  return airdual::geo::StationSet(std::move(v));
}

inline airdual::geo::GeoGraph random_graph(std::size_t n, airdual::nn::Rng& rng, double d_theta = 120.0) {
  return airdual::geo::build_geospatial_graph(random_stations(n, rng), airdual::geo::ElevationField::flat(), d_theta,
                                              1200.0);
}

/// Random per-station wind speed (m/s) and direction (degrees).
inline void random_wind(std::size_t n, airdual::nn::Rng& rng, std::vector<double>& speed, std::vector<double>& dir) {
  speed.resize(n);
  dir.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    speed[i] = rng.uniform(0.0, 6.0);
    dir[i] = rng.uniform(0.0, 360.0);
  }
}

inline std::vector<double> random_vector(std::size_t n, airdual::nn::Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline Matrix mat_mul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

/// exp(A) by scaling and squaring with a truncated Taylor series.
inline Matrix expm(const Matrix& a) {
  const auto n = a.rows();
  double norm = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::abs(a(i, j));
    norm = std::max(norm, s);
  }
  int squarings = 0;
  while (norm > 0.5) {
    norm /= 2.0;
    ++squarings;
  }
  Matrix x = a;
  for (double& v : x.data()) v /= std::ldexp(1.0, squarings);
  Matrix result = Matrix::identity(n), term = Matrix::identity(n);
  for (int k = 1; k <= 20; ++k) {
    term = mat_mul(term, x);
    for (double& v : term.data()) v /= k;
    for (std::size_t i = 0; i < n * n; ++i) result.data()[i] += term.data()[i];
  }
  for (int s = 0; s < squarings; ++s) result = mat_mul(result, result);
  return result;
}

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

/// Compares tape gradients of `loss` with central differences for every
/// element of `params` (or an evenly spaced subset of at most `max_per_param`).
/// Relative error uses max(|analytic|, |numeric|, floor) as the scale.
inline GradCheck check_gradients(const std::vector<Tensor>& params, const std::function<Tensor()>& loss,
                                 double eps = 1e-4, std::size_t max_per_param = 0, double floor = 1e-6) {
  for (auto p : params) p.zero_grad();
  {
    airdual::ad::Tape tape;
    airdual::ad::TapeScope scope(tape);
    const Tensor l = loss();
    airdual::ad::backward(tape, l);
  }
  GradCheck out;
  for (auto p : params) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    const std::size_t stride = max_per_param && p.size() > max_per_param ? p.size() / max_per_param : 1;
    for (std::size_t i = 0; i < p.size(); i += stride) {
      auto v = p.mutable_value();
      const double orig = v[i];
      v[i] = orig + eps;
      const double up = loss().item();
      v[i] = orig - eps;
      const double down = loss().item();
      v[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double scale = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      out.max_rel = std::max(out.max_rel, std::abs(analytic[i] - numeric) / scale);
      ++out.checked;
    }
  }
  return out;
}

inline std::vector<Tensor> all_params(const airdual::nn::ParameterSet& ps) {
  std::vector<Tensor> v;
  for (const auto& [_, t] : ps.items()) v.push_back(t);
  return v;
}

/// Fresh scratch directory under the test working directory.
inline fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::current_path() / ("scratch_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

/// Runs the CLI with `args`, capturing stdout+stderr to `log`; returns the exit code.
inline int run_cli(const std::string& args, const fs::path& log) {
#ifdef AIRDUAL_CLI
  const std::string cmd = std::string("\"") + AIRDUAL_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  if (status == -1) return -1;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
#else
  (void)args;
  (void)log;
  return -1;
#endif
}

}  // namespace testsupport
