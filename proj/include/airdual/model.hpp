#pragma once

// The dual-branch forecaster: physics branch (coefficient estimator, open-system
// transport solve, encoder), data branch (history encoder, latent ODE), and the
// fusion head. Also the single-branch variants used for ablations.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "airdual/autodiff.hpp"
#include "airdual/data_dynamics.hpp"
#include "airdual/errors.hpp"
#include "airdual/fusion.hpp"
#include "airdual/geo_graph.hpp"
#include "airdual/nn.hpp"
#include "airdual/physics.hpp"
#include "airdual/pipeline.hpp"

namespace airdual::model {

using ad::Tensor;

enum class Variant { dual, physics_only, data_only };
enum class HorizonWind { persist, observed };

inline Variant parse_variant(const std::string& s) {
  if (s == "dual") return Variant::dual;
  if (s == "physics_only") return Variant::physics_only;
  if (s == "data_only") return Variant::data_only;
  throw ConfigError("variant must be dual, physics_only or data_only");
}
inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::dual: return "dual";
    case Variant::physics_only: return "physics_only";
    case Variant::data_only: return "data_only";
  }
  return "dual";
}

struct ModelConfig {
  Variant variant = Variant::dual;
  std::size_t history = 24;
  std::size_t horizon = 24;
  std::size_t latent = 32;
  std::size_t encoder_hidden = 32;
  std::size_t estimator_hidden = 16;
  physics::OperatorMode operator_mode = physics::OperatorMode::exact;
  physics::DiffusionSign diffusion_sign = physics::DiffusionSign::standard;
  int chebyshev_order = 3;
  int gnn_layers = 3;
  double lambda1 = 1.0;
  double lambda2 = 0.8;
  double gamma = 0.1;
  fusion::TclDenominator tcl_denominator = fusion::TclDenominator::skip_positive;
  fusion::PredictionNorm prediction_norm = fusion::PredictionNorm::l1;
  double fixed_dt = 1.5;
  double rtol = 1e-3;
  double atol = 1e-3;
  int max_steps = 10000;
  double initial_k_rate = 0.1;  // per hour, relative to the mean diffusion weight
  std::optional<double> force_alpha;
  HorizonWind horizon_wind = HorizonWind::persist;
  geo::WindConvention wind_convention = geo::WindConvention::from;

  void validate() const {
    if (history < 2 || horizon < 1) throw ConfigError("history must be >= 2 and horizon >= 1");
    if (latent == 0 || encoder_hidden == 0 || estimator_hidden == 0) throw ConfigError("layer widths must be >= 1");
    if (gnn_layers < 1) throw ConfigError("gnn_layers must be >= 1");
    if (chebyshev_order < 1) throw ConfigError("chebyshev_order must be >= 1");
    if (!(lambda1 > 0.0) || !(lambda2 > 0.0)) throw ConfigError("lambda1 and lambda2 must be > 0");
    if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
    if (!(fixed_dt > 0.0) || !(rtol > 0.0) || !(atol > 0.0)) throw ConfigError("solver settings must be positive");
    if (!(initial_k_rate > 0.0)) throw ConfigError("initial_k_rate must be positive");
    if (force_alpha && !(*force_alpha >= 0.0 && *force_alpha <= 1.0)) throw ConfigError("force_alpha must be in [0,1]");
  }

  nlohmann::json to_json() const {
    nlohmann::json j = {
        {"variant", to_string(variant)},
        {"history", history},
        {"horizon", horizon},
        {"latent", latent},
        {"encoder_hidden", encoder_hidden},
        {"estimator_hidden", estimator_hidden},
        {"operator_mode", operator_mode == physics::OperatorMode::exact ? "exact" : "learned"},
        {"diffusion_sign", diffusion_sign == physics::DiffusionSign::standard ? "standard" : "printed"},
        {"chebyshev_order", chebyshev_order},
        {"gnn_layers", gnn_layers},
        {"lambda1", lambda1},
        {"lambda2", lambda2},
        {"gamma", gamma},
        {"tcl_denominator", tcl_denominator == fusion::TclDenominator::skip_positive ? "skip_positive" : "standard"},
        {"prediction_norm", prediction_norm == fusion::PredictionNorm::l1 ? "l1" : "l2"},
        {"fixed_dt", fixed_dt},
        {"rtol", rtol},
        {"atol", atol},
        {"max_steps", max_steps},
        {"initial_k_rate", initial_k_rate},
        {"horizon_wind", horizon_wind == HorizonWind::persist ? "persist" : "observed"},
        {"wind_convention", wind_convention == geo::WindConvention::from ? "from" : "toward"}};
    j["force_alpha"] = force_alpha ? nlohmann::json(*force_alpha) : nlohmann::json(nullptr);
    return j;
  }

  /// Missing keys keep their defaults.
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant"));
    get("history", c.history);
    get("horizon", c.horizon);
    get("latent", c.latent);
    get("encoder_hidden", c.encoder_hidden);
    get("estimator_hidden", c.estimator_hidden);
    if (j.contains("operator_mode")) c.operator_mode = physics::parse_operator_mode(j.at("operator_mode"));
    if (j.contains("diffusion_sign")) c.diffusion_sign = physics::parse_diffusion_sign(j.at("diffusion_sign"));
    get("chebyshev_order", c.chebyshev_order);
    get("gnn_layers", c.gnn_layers);
    get("lambda1", c.lambda1);
    get("lambda2", c.lambda2);
    get("gamma", c.gamma);
    if (j.contains("tcl_denominator")) c.tcl_denominator = fusion::parse_tcl_denominator(j.at("tcl_denominator"));
    if (j.contains("prediction_norm")) c.prediction_norm = fusion::parse_prediction_norm(j.at("prediction_norm"));
    get("fixed_dt", c.fixed_dt);
    get("rtol", c.rtol);
    get("atol", c.atol);
    get("max_steps", c.max_steps);
    get("initial_k_rate", c.initial_k_rate);
    if (j.contains("force_alpha") && !j.at("force_alpha").is_null()) c.force_alpha = j.at("force_alpha").get<double>();
    if (j.contains("horizon_wind")) {
      const auto s = j.at("horizon_wind").get<std::string>();
      if (s == "persist") c.horizon_wind = HorizonWind::persist;
      else if (s == "observed") c.horizon_wind = HorizonWind::observed;
      else throw ConfigError("horizon_wind must be persist or observed");
    }
    if (j.contains("wind_convention")) c.wind_convention = geo::parse_wind_convention(j.at("wind_convention"));
    c.validate();
    return c;
  }

  fusion::DecayTclConfig tcl() const {
    return {lambda1, lambda2, static_cast<int>(horizon), tcl_denominator};
  }
};

/// One forecast window, ready for the model.
struct Window {
  long start = 0;                         // timestamp of the first history step
  std::vector<Tensor> history;            // T tensors, N x F, normalized
  std::vector<Tensor> target;             // tau tensors, N x 1, normalized
  std::vector<double> target_raw;         // tau x N, original units
  std::vector<double> x0_raw;             // N, last history concentration
  std::vector<geo::AdvectionGraph> wind;  // advection graph per horizon interval
};

/// Builds windows from an imputed raw panel and its normalized twin.
class WindowBuilder {
 public:
  WindowBuilder(const ModelConfig& cfg, const geo::GeoGraph& graph, const pipeline::Panel& raw,
                const pipeline::NormStats& stats)
      : cfg_(cfg), graph_(graph), raw_(raw), norm_(pipeline::normalize(raw, stats)) {
    if (raw.station_count() != graph.n) throw ShapeError("panel and graph disagree on the station count");
  }

  std::size_t steps() const { return raw_.steps(); }
  const pipeline::Panel& raw() const { return raw_; }

  std::vector<std::size_t> starts(std::size_t stride) const {
    return pipeline::window_starts(raw_, cfg_.history, cfg_.horizon, stride);
  }

  /// Window starting at step `s`. Without targets only the history must fit;
  /// wind past the panel end falls back to the last history step.
  Window build(std::size_t s, bool with_target = true) const {
    const auto n = raw_.station_count(), f = raw_.features;
    const auto T = cfg_.history, tau = cfg_.horizon;
    if (s + T + (with_target ? tau : 0) > raw_.steps()) throw ShapeError("window extends past the panel");
    Window w;
    w.start = raw_.times[s];
    for (std::size_t t = s; t < s + T; ++t) {
      std::vector<double> v(n * f);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < f; ++k) v[i * f + k] = norm_.at(t, i, k);
      w.history.push_back(Tensor::constant(n, f, std::move(v)));
    }
    if (with_target)
      for (std::size_t t = s + T; t < s + T + tau; ++t) {
        std::vector<double> v(n);
        for (std::size_t i = 0; i < n; ++i) {
          v[i] = norm_.at(t, i, pipeline::kPm25);
          w.target_raw.push_back(raw_.at(t, i, pipeline::kPm25));
        }
        w.target.push_back(Tensor::column(std::move(v)));
      }
    for (std::size_t i = 0; i < n; ++i) w.x0_raw.push_back(raw_.at(s + T - 1, i, pipeline::kPm25));
    const std::size_t intervals = cfg_.horizon_wind == HorizonWind::persist ? 1 : tau;
    for (std::size_t m = 0; m < intervals; ++m) {
      auto t = s + T - 1 + m;
      if (t >= raw_.steps()) t = s + T - 1;
      std::vector<double> speed(n), dir(n);
      for (std::size_t i = 0; i < n; ++i) {
        speed[i] = std::max(0.0, raw_.at(t, i, pipeline::kWindSpeed));
        dir[i] = raw_.at(t, i, pipeline::kWindDir);
      }
      w.wind.push_back(geo::build_advection_graph(graph_, speed, dir, cfg_.wind_convention, raw_.times[t]));
    }
    return w;
  }

 private:
  ModelConfig cfg_;
  const geo::GeoGraph& graph_;
  const pipeline::Panel& raw_;
  pipeline::Panel norm_;
};

/// Mean off-diagonal diffusion weight; the unit in which k is learned.
inline double mean_diffusion_weight(const geo::DiffusionGraph& dg) {
  double s = 0.0;
  std::size_t c = 0;
  for (std::size_t i = 0; i < dg.weights.rows(); ++i)
    for (std::size_t j = 0; j < dg.weights.cols(); ++j)
      if (i != j && dg.weights(i, j) > 0.0) {
        s += dg.weights(i, j);
        ++c;
      }
  return c ? s / static_cast<double>(c) : 1.0;
}

class AirDualModel {
 public:
  struct Output {
    std::vector<Tensor> prediction;  // tau tensors, N x 1, normalized
    std::vector<Tensor> zp, zd;      // latents when the branch exists
    physics::Coefficients coefficients;
    std::vector<Tensor> physics_raw;  // simulated concentrations, original units
  };

  AirDualModel(const AirDualModel&) = delete;
  AirDualModel& operator=(const AirDualModel&) = delete;
  AirDualModel(AirDualModel&&) = default;
  AirDualModel& operator=(AirDualModel&&) = default;

  AirDualModel(ModelConfig cfg, geo::GeoGraph graph, pipeline::NormStats stats, std::uint64_t seed)
      : cfg_(std::move(cfg)), graph_(std::move(graph)), stats_(std::move(stats)) {
    cfg_.validate();
    if (stats_.stations != graph_.n) throw ShapeError("statistics and graph disagree on the station count");
    diffusion_ = geo::build_diffusion_graph(graph_);
    k_unit_ = 1.0 / mean_diffusion_weight(diffusion_);
    nn::Rng rng(seed);
    const auto n = graph_.n, f = stats_.features, d = cfg_.latent;
    const bool phys = cfg_.variant != Variant::data_only;
    const bool data = cfg_.variant != Variant::physics_only;
    if (phys) {
      estimator_ = physics::CoefficientEstimator(params_, "physics.estimator", f, cfg_.estimator_hidden, n,
                                                 cfg_.initial_k_rate, 0.0, rng);
      gate_ = cfg_.force_alpha ? physics::GateAlpha::constant(*cfg_.force_alpha)
                               : physics::GateAlpha(params_, "physics.gate");
      if (cfg_.operator_mode == physics::OperatorMode::learned)
        learned_ = physics::LearnedOperators(params_, "physics.chebyshev", cfg_.chebyshev_order);
      if (cfg_.variant == Variant::dual) encoder_p_ = physics::PhysicsEncoder(params_, "physics.encoder", d, rng);
    }
    if (data) {
      encoder_d_ = latent::EncoderD(params_, "data.encoder", f, cfg_.encoder_hidden, d, rng);
      rhs_d_ = latent::LatentOdeRhs(params_, "data.rhs", d, rng);
      rhs_d_.set_graph(graph_.adjacency, n);
    }
    if (cfg_.variant == Variant::dual) {
      gnn_ = fusion::GnnFusion(params_, "fusion.gnn", cfg_.gnn_layers, 2 * d, rng);
      gnn_.set_graph(graph_.adjacency, n);
      decoder_ = fusion::Decoder(params_, "fusion.decoder", 2 * d, rng);
    } else if (cfg_.variant == Variant::data_only) {
      decoder_ = fusion::Decoder(params_, "fusion.decoder", d, rng);
    }
    // Affine map from physics state (original units) to normalized pollutant.
    std::vector<double> scale(n), shift(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto k = stats_.index(i, pipeline::kPm25);
      scale[i] = 1.0 / stats_.scale[k];
      shift[i] = -stats_.mean[k] / stats_.scale[k];
    }
    to_norm_scale_ = Tensor::column(scale);
    to_norm_shift_ = Tensor::column(shift);
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const geo::GeoGraph& graph() const noexcept { return graph_; }
  const pipeline::NormStats& stats() const noexcept { return stats_; }
  nn::ParameterSet& params() noexcept { return params_; }
  const nn::ParameterSet& params() const noexcept { return params_; }
  double k_unit() const noexcept { return k_unit_; }

  /// Training uses RK4 on the active tape; inference uses dopri5 without one.
  Output forward(const Window& w, bool training) const {
    if (w.history.size() != cfg_.history) throw ShapeError("window history length differs from config");
    Output out;
    const auto tau = cfg_.horizon;
    const double dt = pipeline::kStepHours;
    if (cfg_.variant != Variant::data_only) {
      auto c = estimator_(w.history);
      c.k = k_unit_ * c.k;
      out.coefficients = c;
      const auto ops = physics::WindowOperators::build(diffusion_, w.wind, cfg_.diffusion_sign);
      const auto* learned = cfg_.operator_mode == physics::OperatorMode::learned ? &learned_ : nullptr;
      if (training) {
        out.physics_raw = physics::solve_physics_rk4(Tensor::column(w.x0_raw), tau, dt, cfg_.fixed_dt, ops, c, gate_,
                                                     cfg_.operator_mode, learned);
      } else {
        const auto states = physics::solve_physics_dopri5(w.x0_raw, tau, dt, ops, c, gate_, cfg_.operator_mode,
                                                          cfg_.rtol, cfg_.atol, cfg_.max_steps, learned);
        for (const auto& s : states) out.physics_raw.push_back(Tensor::column(s));
      }
      std::vector<Tensor> normed;
      for (const auto& x : out.physics_raw) normed.push_back(ad::mul_col(x, to_norm_scale_) + to_norm_shift_);
      if (cfg_.variant == Variant::physics_only) {
        out.prediction = std::move(normed);
        return out;
      }
      out.zp = encoder_p_(normed);
    }
    const Tensor z0 = encoder_d_(w.history);
    out.zd = training ? latent::solve_data_rk4(rhs_d_, z0, tau, dt, cfg_.fixed_dt)
                      : latent::solve_data_dopri5(rhs_d_, z0, tau, dt, cfg_.rtol, cfg_.atol, cfg_.max_steps);
    for (std::size_t t = 0; t < tau; ++t) {
      const Tensor z = cfg_.variant == Variant::dual ? gnn_(out.zp[t], out.zd[t]) : out.zd[t];
      out.prediction.push_back(decoder_(z));
    }
    return out;
  }

  struct Losses {
    Tensor total, pred, tcl;
  };

  Losses loss(const Output& o, const Window& w) const {
    Losses l;
    l.pred = fusion::prediction_loss(w.target, o.prediction, cfg_.prediction_norm);
    if (cfg_.variant == Variant::dual) {
      l.tcl = fusion::tcl_loss(o.zp, o.zd, cfg_.tcl());
      l.total = fusion::total_loss(l.pred, l.tcl, cfg_.gamma);
    } else {
      l.tcl = Tensor::scalar(0.0);
      l.total = l.pred;
    }
    return l;
  }

  /// Forecast in original units, tau x N row-major.
  std::vector<double> predict(const Window& w) const {
    ad::NoGradScope no_grad;
    const auto o = forward(w, false);
    const auto n = graph_.n;
    std::vector<double> out;
    out.reserve(cfg_.horizon * n);
    for (const auto& p : o.prediction)
      for (std::size_t i = 0; i < n; ++i) {
        const auto k = stats_.index(i, pipeline::kPm25);
        out.push_back(p.value()[i] * stats_.scale[k] + stats_.mean[k]);
      }
    return out;
  }

  /// Serializable state: config, graph, statistics and parameters.
  nlohmann::json to_json() const {
    return {{"config", cfg_.to_json()},
            {"graph", geo::graph_to_json(graph_)},
            {"stats", stats_.to_json()},
            {"params", params_.to_json()}};
  }

  static AirDualModel from_json(const nlohmann::json& j) {
    AirDualModel m(ModelConfig::from_json(j.at("config")), geo::graph_from_json(j.at("graph")),
                   pipeline::NormStats::from_json(j.at("stats")), 0);
    m.params_.load_json(j.at("params"));
    return m;
  }

 private:
  ModelConfig cfg_;
  geo::GeoGraph graph_;
  pipeline::NormStats stats_;
  geo::DiffusionGraph diffusion_;
  double k_unit_ = 1.0;
  nn::ParameterSet params_;
  physics::CoefficientEstimator estimator_;
  physics::GateAlpha gate_;
  physics::LearnedOperators learned_;
  physics::PhysicsEncoder encoder_p_;
  latent::EncoderD encoder_d_;
  latent::LatentOdeRhs rhs_d_;
  fusion::GnnFusion gnn_;
  fusion::Decoder decoder_;
  Tensor to_norm_scale_, to_norm_shift_;
};

}  // namespace airdual::model
