// Command-line front end: graph building, synthetic data, physics simulation,
// training, forecasting and evaluation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "airdual/errors.hpp"
#include "airdual/geo_graph.hpp"
#include "airdual/metrics.hpp"
#include "airdual/model.hpp"
#include "airdual/ode_solver.hpp"
#include "airdual/physics.hpp"
#include "airdual/pipeline.hpp"
#include "airdual/trainer.hpp"

namespace fs = std::filesystem;
using namespace airdual;

namespace {

int build_graph(const std::string& stations_path, const std::string& elevation_path, double d_theta,
                double m_theta, const std::string& out) {
  const auto stations = geo::read_stations_csv(stations_path);
  const auto field =
      elevation_path.empty() ? geo::ElevationField::flat() : geo::read_elevation_grid(elevation_path);
  const auto g = geo::build_geospatial_graph(stations, field, d_theta, m_theta);
  train::write_json(out, geo::graph_to_json(g));
  std::cout << "graph: " << g.n << " stations, " << g.edge_count() << " edges -> " << out << '\n';
  return 0;
}

int gen_synthetic(const std::string& spec_path, const fs::path& out) {
  const auto spec = pipeline::SyntheticSpec::from_json(train::read_json(spec_path));
  const auto data = pipeline::generate_synthetic(spec);
  fs::create_directories(out);
  geo::write_stations_csv(data.panel.stations, (out / "stations.csv").string());
  pipeline::write_observations(data.panel, (out / "observations.csv").string());
  train::write_json(out / "synthetic_truth.json", data.truth);
  const auto g = geo::build_geospatial_graph(data.panel.stations, geo::ElevationField::flat(),
                                             data.truth.at("d_theta_km").get<double>(), 1200.0);
  train::write_json(out / "graph.json", geo::graph_to_json(g));
  std::cout << "synthetic: " << data.panel.station_count() << " stations x " << data.panel.steps() << " steps -> "
            << out.string() << '\n';
  return 0;
}

/// Per-station initial state from `station_id,value` rows in graph order.
std::vector<double> read_x0(const std::string& path, const geo::GeoGraph& g) {
  const auto t = csv::read_table(path);
  const auto cs = t.column("station_id"), cv = t.column("value");
  std::vector<double> x(g.n, 0.0);
  std::vector<bool> seen(g.n, false);
  for (const auto& r : t.rows) {
    const auto id = std::string(csv::trim(r[cs]));
    std::size_t i = 0;
    while (i < g.n && g.ids[i] != id) ++i;
    if (i == g.n) throw ConfigError("x0 names unknown station " + id);
    x[i] = csv::parse_double(r[cv], path);
    seen[i] = true;
  }
  for (std::size_t i = 0; i < g.n; ++i)
    if (!seen[i]) throw ConfigError("x0 lacks station " + g.ids[i]);
  return x;
}

/// Scalar or per-station array from a JSON field.
std::vector<double> per_station(const nlohmann::json& j, const char* key, std::size_t n, double fallback) {
  if (!j.contains(key)) return std::vector<double>(n, fallback);
  const auto& v = j.at(key);
  if (v.is_number()) return std::vector<double>(n, v.get<double>());
  auto out = v.get<std::vector<double>>();
  if (out.size() != n) throw ConfigError(std::string(key) + " needs one value per station");
  return out;
}

/// Exact open-system run with constant wind and a constant gate. Writes the
/// trajectory and the mass budget (total mass, its derivative, sum beta X).
int simulate(const std::string& graph_path, const std::string& params_path, const std::string& x0_path,
             double hours, double step, const fs::path& out) {
  if (!(hours > 0.0) || !(step > 0.0)) throw ConfigError("--hours and --step must be positive");
  const auto g = geo::graph_from_json(train::read_json(graph_path));
  const auto p = train::read_json(params_path);
  physics::PhysicsParams params{p.at("k").get<double>(), per_station(p, "beta", g.n, 0.0)};
  params.validate();
  const double alpha = p.value("alpha", 0.5);
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  const auto sign = physics::parse_diffusion_sign(p.value("diffusion_sign", std::string("standard")));
  const auto convention = geo::parse_wind_convention(p.value("wind_convention", std::string("from")));
  const auto speed = per_station(p, "wind_speed", g.n, 0.0);
  const auto dir = per_station(p, "wind_dir", g.n, 0.0);
  const auto dg = geo::build_diffusion_graph(g);
  const auto ag = geo::build_advection_graph(g, speed, dir, convention, 0);
  const auto gate = physics::GateAlpha::constant(alpha);
  const auto x0 = read_x0(x0_path, g);

  ode::SolveSpec spec;
  spec.rtol = p.value("rtol", 1e-10);
  spec.atol = p.value("atol", 1e-10);
  spec.max_steps = p.value("max_steps", 1000000);
  spec.output_times.push_back(0.0);
  const auto count = static_cast<std::size_t>(std::llround(hours / step));
  if (std::abs(static_cast<double>(count) * step - hours) > 1e-9 * hours)
    throw ConfigError("--hours must be a multiple of --step");
  for (std::size_t s = 1; s <= count; ++s) spec.output_times.push_back(static_cast<double>(s) * step);

  const auto ops = physics::WindowOperators::build(dg, {ag}, sign);
  const physics::Coefficients c{ad::Tensor::scalar(params.k), ad::Tensor::column(params.beta)};
  auto rhs = [&](double, const std::vector<double>& y) {
    return physics::badae_rhs(ad::Tensor::column(y), ops, 0, c, gate, physics::OperatorMode::exact).to_vector();
  };
  const auto traj = ode::solve(rhs, x0, spec);

  fs::create_directories(out);
  std::ofstream tr(out / "trajectory.csv"), mb(out / "mass_budget.csv");
  if (!tr || !mb) throw IoError("cannot write into " + out.string());
  tr.precision(17);
  mb.precision(17);
  tr << "time,station,value\n";
  mb << "time,total_mass,d_mass_dt,sum_beta_x\n";
  for (std::size_t k = 0; k < traj.times.size(); ++k) {
    const auto& x = traj.states[k];
    const auto dx = rhs(traj.times[k], x);
    double mass = 0.0, dmass = 0.0, bx = 0.0;
    for (std::size_t i = 0; i < g.n; ++i) {
      tr << traj.times[k] << ',' << g.ids[i] << ',' << x[i] << '\n';
      mass += x[i];
      dmass += dx[i];
      bx += params.beta[i] * x[i];
    }
    mb << traj.times[k] << ',' << mass << ',' << dmass << ',' << bx << '\n';
  }
  std::cout << "simulate: " << traj.times.size() << " outputs over " << hours << " h -> " << out.string() << '\n';
  return 0;
}

int train_cmd(const std::string& config_path, const fs::path& data, const fs::path& out) {
  const auto cfg = train::RunConfig::from_json(train::read_json(config_path));
  const auto ds = train::load_dataset(data, cfg);
  fs::create_directories(out);
  std::ofstream log(out / "metrics.jsonl");
  if (!log) throw IoError("cannot write " + (out / "metrics.jsonl").string());
  for (const auto& w : ds.warnings) std::cerr << "warning: " << w << '\n';
  const auto result = train::train(cfg, ds, [&](const train::EpochMetrics& m) {
    log << m.to_json().dump() << '\n';
    log.flush();
    std::cout << "epoch " << m.epoch << " l_total " << m.l_total << " val_mae " << m.val_mae << '\n';
  });
  train::write_json(out / "checkpoint.json", result.checkpoint);
  train::write_json(out / "splits.json", ds.splits.manifest());
  if (result.aborted) throw TrainingError(*result.aborted);
  std::cout << "best epoch " << result.best_epoch << " val_mae " << result.best_val_mae << " -> "
            << (out / "checkpoint.json").string() << '\n';
  return 0;
}

int predict_cmd(const std::string& checkpoint_path, const fs::path& data, const std::string& out) {
  const auto ckpt = train::read_json(checkpoint_path);
  const auto net = train::load_model(ckpt);
  const auto stations = train::checkpoint_stations(ckpt, data);
  const auto panel = pipeline::impute(pipeline::read_observations((data / "observations.csv").string(), stations));
  const auto& cfg = net.config();
  if (panel.steps() < cfg.history) throw InsufficientDataError("need at least one full history window");
  const auto s = panel.steps() - cfg.history;
  for (std::size_t t = s; t < panel.steps(); ++t)
    for (std::size_t i = 0; i < panel.station_count(); ++i)
      for (std::size_t f = 0; f < panel.features; ++f)
        if (panel.is_missing(t, i, f)) throw DegenerateInputError("latest history window has an unfillable gap");
  const model::WindowBuilder b(cfg, net.graph(), panel, net.stats());
  const auto pred = net.predict(b.build(s, false));
  std::ofstream o(out);
  if (!o) throw IoError("cannot write " + out);
  o.precision(17);
  o << "timestamp,station_id,pm25\n";
  const long last = panel.times.back();
  for (std::size_t h = 0; h < cfg.horizon; ++h)
    for (std::size_t i = 0; i < stations.size(); ++i)
      o << pipeline::format_iso8601(last + static_cast<long>(h + 1) * pipeline::kStepSeconds) << ','
        << stations[i].id << ',' << pred[h * stations.size() + i] << '\n';
  std::cout << "predict: " << cfg.horizon << " steps from " << pipeline::format_iso8601(last) << " -> " << out
            << '\n';
  return 0;
}

int evaluate_cmd(const std::string& checkpoint_path, const fs::path& data, const std::string& report,
                 const std::string& access_log) {
  const auto ckpt = train::read_json(checkpoint_path);
  const auto net = train::load_model(ckpt);
  const auto stations = train::checkpoint_stations(ckpt, data);
  pipeline::AccessLog log;
  const auto test = train::load_test_panel(ckpt, data, stations, &log);
  const auto r = train::evaluate(net, test);
  train::write_json(report, metrics::to_json(r));
  if (!access_log.empty()) {
    train::write_json(access_log, {{"rows_parsed", log.rows_parsed},
                                   {"rows_skipped", log.rows_skipped},
                                   {"first", log.first ? pipeline::format_iso8601(*log.first) : ""},
                                   {"last", log.last ? pipeline::format_iso8601(*log.last) : ""}});
  }
  std::cout << "evaluate: mae " << r.overall.mae << " rmse " << r.overall.rmse << " smape " << r.overall.smape
            << " -> " << report << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-branch air-quality forecasting"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  std::string stations, elevation, out, spec, graph, params, x0, config, data, checkpoint, report, access_log;
  double d_theta = 300.0, m_theta = 1200.0, hours = 72.0, step = 1.0;

  auto* bg = app.add_subcommand("build-graph", "Build the geospatial station graph");
  bg->add_option("--stations", stations, "stations.csv")->required();
  bg->add_option("--elevation", elevation, "Elevation grid (flat terrain when omitted)");
  bg->add_option("--d-theta", d_theta, "Distance threshold in km");
  bg->add_option("--m-theta", m_theta, "Ridge height threshold in m");
  bg->add_option("--out", out, "Output graph.json")->required();

  auto* gs = app.add_subcommand("gen-synthetic", "Generate a seeded synthetic dataset");
  gs->add_option("--spec", spec, "Synthetic spec JSON")->required();
  gs->add_option("--out", out, "Output directory")->required();

  auto* sim = app.add_subcommand("simulate", "Run the exact physics model");
  sim->add_option("--graph", graph, "graph.json")->required();
  sim->add_option("--params", params, "Physics parameters JSON")->required();
  sim->add_option("--x0", x0, "Initial state CSV (station_id,value)")->required();
  sim->add_option("--hours", hours, "Simulated hours")->required();
  sim->add_option("--step", step, "Output step in hours");
  sim->add_option("--out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", config, "Run config JSON")->required();
  tr->add_option("--data", data, "Data directory")->required();
  tr->add_option("--out", out, "Output directory")->required();

  auto* pr = app.add_subcommand("predict", "Forecast from the latest history window");
  pr->add_option("--checkpoint", checkpoint, "checkpoint.json")->required();
  pr->add_option("--data", data, "Data directory")->required();
  pr->add_option("--out", out, "Output CSV")->required();

  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on its test split");
  ev->add_option("--checkpoint", checkpoint, "checkpoint.json")->required();
  ev->add_option("--data", data, "Data directory")->required();
  ev->add_option("--report", report, "Output report.json")->required();
  ev->add_option("--access-log", access_log, "Write the observation rows actually read");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*bg) return build_graph(stations, elevation, d_theta, m_theta, out);
    if (*gs) return gen_synthetic(spec, out);
    if (*sim) return simulate(graph, params, x0, hours, step, out);
    if (*tr) return train_cmd(config, data, out);
    if (*pr) return predict_cmd(checkpoint, data, out);
    if (*ev) return evaluate_cmd(checkpoint, data, report, access_log);
  } catch (const airdual::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON input: " << e.what() << '\n';
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
