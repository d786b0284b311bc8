#pragma once

// Training loop, evaluation and forecasting over observation directories.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "airdual/autodiff.hpp"
#include "airdual/errors.hpp"
#include "airdual/geo_graph.hpp"
#include "airdual/metrics.hpp"
#include "airdual/model.hpp"
#include "airdual/nn.hpp"
#include "airdual/pipeline.hpp"

namespace airdual::train {

namespace fs = std::filesystem;

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double lr = 0.005;
  std::vector<double> milestones = {0.5, 0.75};  // fractions of `epochs`
  double lr_decay = 0.1;
  double clip_norm = 5.0;
  std::size_t patience = 10;
  std::uint64_t seed = 1;
  nn::AdamConfig adam;
  pipeline::SplitRatios split;
  std::size_t train_stride = 1;
  std::size_t eval_stride = 0;  // 0 means the horizon length
  double d_theta_km = 300.0;
  double m_theta_m = 1200.0;

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw ConfigError("epochs and batch_size must be >= 1");
    if (!(lr > 0.0) || !(lr_decay > 0.0) || !(clip_norm > 0.0)) throw ConfigError("lr, lr_decay and clip_norm must be > 0");
    for (double m : milestones)
      if (!(m > 0.0 && m < 1.0)) throw ConfigError("lr milestones are fractions in (0, 1)");
    if (train_stride == 0) throw ConfigError("train_stride must be >= 1");
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("epochs", c.epochs);
    get("batch_size", c.batch_size);
    get("lr", c.lr);
    get("lr_milestones", c.milestones);
    get("lr_decay", c.lr_decay);
    get("clip_norm", c.clip_norm);
    get("patience", c.patience);
    get("seed", c.seed);
    get("adam_beta1", c.adam.beta1);
    get("adam_beta2", c.adam.beta2);
    get("adam_eps", c.adam.eps);
    if (j.contains("split")) {
      const auto r = j.at("split").get<std::vector<double>>();
      if (r.size() != 3) throw ConfigError("split needs three ratios");
      c.split = {r[0], r[1], r[2]};
    }
    get("train_stride", c.train_stride);
    get("eval_stride", c.eval_stride);
    get("d_theta_km", c.d_theta_km);
    get("m_theta_m", c.m_theta_m);
    c.validate();
    return c;
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},       {"batch_size", batch_size},
            {"lr", lr},               {"lr_milestones", milestones},
            {"lr_decay", lr_decay},   {"clip_norm", clip_norm},
            {"patience", patience},   {"seed", seed},
            {"adam_beta1", adam.beta1}, {"adam_beta2", adam.beta2},
            {"adam_eps", adam.eps},   {"split", {split.train, split.val, split.test}},
            {"train_stride", train_stride}, {"eval_stride", eval_stride},
            {"d_theta_km", d_theta_km}, {"m_theta_m", m_theta_m}};
  }
};

/// Learning rate for `epoch` (0-based): base x decay^(milestones passed).
inline double learning_rate(const TrainConfig& c, std::size_t epoch) {
  int passed = 0;
  for (double m : c.milestones)
    if (static_cast<double>(epoch) >= std::floor(m * static_cast<double>(c.epochs))) ++passed;
  return c.lr * std::pow(c.lr_decay, passed);
}

/// Seeded Fisher-Yates shuffle.
template <class T>
void shuffle(std::vector<T>& v, nn::Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

/// Full run configuration file: `{"model": {...}, "train": {...}}`.
struct RunConfig {
  model::ModelConfig model;
  TrainConfig train;

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig r;
    if (j.contains("model")) r.model = model::ModelConfig::from_json(j.at("model"));
    if (j.contains("train")) r.train = TrainConfig::from_json(j.at("train"));
    return r;
  }
  nlohmann::json to_json() const { return {{"model", model.to_json()}, {"train", train.to_json()}}; }
};

inline nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string() + ": file not found");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(p.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

/// Stations and graph of a data directory: `graph.json` when present, else
/// built from `stations.csv` (plus `elevation.grid` when present).
inline geo::GeoGraph load_graph(const fs::path& dir, const geo::StationSet& stations, double d_theta, double m_theta) {
  if (fs::exists(dir / "graph.json")) {
    auto g = geo::graph_from_json(read_json(dir / "graph.json"));
    if (g.n != stations.size()) throw ConfigError("graph.json and stations.csv disagree on the station count");
    for (std::size_t i = 0; i < g.n; ++i)
      if (g.ids[i] != stations[i].id) throw ConfigError("graph.json station order differs from stations.csv");
    return g;
  }
  const auto field = fs::exists(dir / "elevation.grid") ? geo::read_elevation_grid((dir / "elevation.grid").string())
                                                       : geo::ElevationField::flat();
  return geo::build_geospatial_graph(stations, field, d_theta, m_theta);
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double l_pred = 0.0;
  double l_tcl = 0.0;
  double l_total = 0.0;
  double val_mae = 0.0;
  double lr = 0.0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch}, {"l_pred", l_pred}, {"l_tcl", l_tcl}, {"l_total", l_total}, {"val_mae", val_mae},
            {"lr", lr}};
  }
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
  double best_val_mae = 0.0;
  nlohmann::json checkpoint;
  std::vector<std::string> warnings;
  /// Set when training stopped on a non-finite loss; `checkpoint` is the last good one.
  std::optional<std::string> aborted;
};

/// Mean absolute error in original units over the given windows.
inline double window_mae(const model::AirDualModel& m, const model::WindowBuilder& b,
                         const std::vector<std::size_t>& starts) {
  double s = 0.0;
  std::size_t c = 0;
  for (auto st : starts) {
    const auto w = b.build(st);
    const auto p = m.predict(w);
    for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - w.target_raw[i]);
    c += p.size();
  }
  if (c == 0) throw InsufficientDataError("no complete windows to evaluate");
  return s / static_cast<double>(c);
}

/// Loaded, imputed data directory split into its three segments.
struct Dataset {
  geo::StationSet stations;
  geo::GeoGraph graph;
  pipeline::Splits splits;
  pipeline::NormStats stats;
  std::vector<std::string> warnings;
};

inline Dataset load_dataset(const fs::path& dir, const RunConfig& cfg) {
  Dataset d;
  d.stations = geo::read_stations_csv((dir / "stations.csv").string());
  d.graph = load_graph(dir, d.stations, cfg.train.d_theta_km, cfg.train.m_theta_m);
  const auto panel = pipeline::impute(pipeline::read_observations((dir / "observations.csv").string(), d.stations));
  d.splits = pipeline::split_chronological(panel, cfg.train.split, cfg.model.history + cfg.model.horizon);
  d.stats = pipeline::compute_stats(d.splits.train, &d.warnings);
  return d;
}

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Adam on L_pred + gamma L_tcl over shuffled mini-batches, one tape per
/// window. Keeps the parameters with the best validation MAE.
inline TrainResult train(const RunConfig& cfg, const Dataset& data, const EpochCallback& on_epoch = {}) {
  cfg.model.validate();
  cfg.train.validate();
  TrainResult result;
  result.warnings = data.warnings;
  model::AirDualModel net(cfg.model, data.graph, data.stats, cfg.train.seed);
  const model::WindowBuilder train_b(cfg.model, net.graph(), data.splits.train, data.stats);
  const model::WindowBuilder val_b(cfg.model, net.graph(), data.splits.val, data.stats);
  auto train_starts = train_b.starts(cfg.train.train_stride);
  const auto eval_stride = cfg.train.eval_stride ? cfg.train.eval_stride : cfg.model.horizon;
  const auto val_starts = val_b.starts(eval_stride);
  if (train_starts.empty()) throw InsufficientDataError("training split has no complete windows");
  if (val_starts.empty()) throw InsufficientDataError("validation split has no complete windows");

  std::vector<model::Window> windows;
  windows.reserve(train_starts.size());
  for (auto s : train_starts) windows.push_back(train_b.build(s));
  std::vector<std::size_t> order(windows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  nn::Rng rng(cfg.train.seed ^ 0x9e3779b97f4a7c15ULL);
  nn::Adam adam(net.params(), cfg.train.adam);
  auto snapshot = [&]() {
    auto j = net.to_json();
    j["run"] = cfg.to_json();
    j["splits"] = data.splits.manifest();
    return j;
  };
  result.checkpoint = snapshot();
  result.best_val_mae = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    const double lr = learning_rate(cfg.train, epoch);
    shuffle(order, rng);
    EpochMetrics em;
    em.epoch = epoch + 1;
    em.lr = lr;
    for (std::size_t b = 0; b < order.size(); b += cfg.train.batch_size) {
      const auto end = std::min(order.size(), b + cfg.train.batch_size);
      const double inv = 1.0 / static_cast<double>(end - b);
      net.params().zero_grad();
      for (std::size_t k = b; k < end; ++k) {
        const auto& w = windows[order[k]];
        ad::Tape tape;
        ad::TapeScope scope(tape);
        const auto out = net.forward(w, true);
        const auto l = net.loss(out, w);
        if (!std::isfinite(l.total.item())) {
          result.aborted = "non-finite loss at epoch " + std::to_string(epoch + 1) + ", window starting " +
                           pipeline::format_iso8601(w.start) + " (l_pred " + std::to_string(l.pred.item()) +
                           ", l_tcl " + std::to_string(l.tcl.item()) + "); last good checkpoint kept";
          return result;
        }
        ad::backward(tape, inv * l.total);
        em.l_pred += l.pred.item();
        em.l_tcl += l.tcl.item();
        em.l_total += l.total.item();
      }
      net.params().clip_grad_norm(cfg.train.clip_norm);
      adam.step(lr);
    }
    const double nw = static_cast<double>(windows.size());
    em.l_pred /= nw;
    em.l_tcl /= nw;
    em.l_total /= nw;
    em.val_mae = window_mae(net, val_b, val_starts);
    result.history.push_back(em);
    if (on_epoch) on_epoch(em);
    if (em.val_mae < result.best_val_mae) {
      result.best_val_mae = em.val_mae;
      result.best_epoch = em.epoch;
      result.checkpoint = snapshot();
      since_best = 0;
    } else if (++since_best >= cfg.train.patience) {
      break;
    }
  }
  return result;
}

inline model::AirDualModel load_model(const nlohmann::json& checkpoint) {
  return model::AirDualModel::from_json(checkpoint);
}

/// Loads only the test range recorded in the checkpoint.
inline pipeline::Panel load_test_panel(const nlohmann::json& checkpoint, const fs::path& dir,
                                       const geo::StationSet& stations, pipeline::AccessLog* log) {
  const auto& test = checkpoint.at("splits").at("test");
  const long begin = pipeline::parse_iso8601(test.at("start").get<std::string>());
  const long end = pipeline::parse_iso8601(test.at("end").get<std::string>()) + 1;
  return pipeline::impute(pipeline::read_observations((dir / "observations.csv").string(), stations,
                                                      pipeline::TimeRange{begin, end}, log));
}

/// Metrics over non-overlapping test windows in original units.
inline metrics::EvalReport evaluate(const model::AirDualModel& m, const pipeline::Panel& test,
                                    std::size_t stride = 0) {
  const auto& cfg = m.config();
  const model::WindowBuilder b(cfg, m.graph(), test, m.stats());
  const auto starts = b.starts(stride ? stride : cfg.horizon);
  if (starts.empty()) throw InsufficientDataError("test split has no complete windows");
  metrics::ReportBuilder rb(cfg.horizon);
  for (auto s : starts) {
    const auto w = b.build(s);
    rb.add_window(w.target_raw, m.predict(w), m.graph().n);
  }
  return rb.build();
}

/// Station ids in checkpoint order.
inline geo::StationSet checkpoint_stations(const nlohmann::json& checkpoint, const fs::path& dir) {
  const auto stations = geo::read_stations_csv((dir / "stations.csv").string());
  const auto g = geo::graph_from_json(checkpoint.at("graph"));
  if (g.n != stations.size()) throw ConfigError("data directory and checkpoint disagree on the station count");
  for (std::size_t i = 0; i < g.n; ++i)
    if (g.ids[i] != stations[i].id) throw ConfigError("data directory station order differs from the checkpoint");
  return stations;
}

}  // namespace airdual::train
