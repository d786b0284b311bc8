#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "airdual/trainer.hpp"
#include "support.hpp"

using namespace airdual;
using namespace airdual::train;
using ad::Tensor;

namespace {

RunConfig toy_config(model::Variant v = model::Variant::dual) {
  RunConfig c;
  c.model.variant = v;
  c.model.history = 4;
  c.model.horizon = 4;
  c.model.latent = 4;
  c.model.encoder_hidden = 4;
  c.model.estimator_hidden = 4;
  c.model.gnn_layers = 2;
  c.train.epochs = 3;
  c.train.batch_size = 8;
  c.train.lr = 0.01;
  c.train.seed = 7;
  c.train.train_stride = 2;
  return c;
}

Dataset toy_dataset(const RunConfig& cfg, std::size_t steps = 200) {
  pipeline::SyntheticSpec s;
  s.stations = 6;
  s.steps = steps;
  s.emission = 3.0;
  s.wind_regime = "rotating";
  s.seed = 11;
  const auto syn = pipeline::generate_synthetic(s);
  Dataset d;
  d.stations = syn.panel.stations;
  d.graph = geo::build_geospatial_graph(d.stations, geo::ElevationField::flat(), 80.0, 1200.0);
  d.splits = pipeline::split_chronological(syn.panel, cfg.train.split, cfg.model.history + cfg.model.horizon);
  d.stats = pipeline::compute_stats(d.splits.train, &d.warnings);
  return d;
}

double mean_baseline_mae(const Dataset& d, const model::ModelConfig& cfg) {
  const model::WindowBuilder b(cfg, d.graph, d.splits.test, d.stats);
  double s = 0.0;
  std::size_t c = 0;
  for (auto st : b.starts(cfg.horizon)) {
    const auto w = b.build(st);
    const auto n = d.graph.n;
    for (std::size_t k = 0; k < w.target_raw.size(); ++k) {
      s += std::abs(w.target_raw[k] - d.stats.mean[d.stats.index(k % n, pipeline::kPm25)]);
      ++c;
    }
  }
  return s / static_cast<double>(c);
}

}  // namespace

TEST_CASE("learning-rate schedule steps by exact decades") {
  TrainConfig c;
  c.epochs = 50;
  for (std::size_t e = 0; e < 50; ++e) {
    const int k = e < 25 ? 0 : (e < 37 ? 1 : 2);
    CHECK(learning_rate(c, e) == doctest::Approx(0.005 * std::pow(0.1, k)).epsilon(1e-15));
  }
  CHECK(learning_rate(c, 0) == 0.005);
}

TEST_CASE("config round trips and validation") {
  const auto c = toy_config();
  const auto back = RunConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
  CHECK(back.to_json() == c.to_json());
  CHECK_THROWS_AS(TrainConfig::from_json({{"epochs", 0}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"lr_milestones", {1.5}}}), ConfigError);
  CHECK_THROWS_AS(model::ModelConfig::from_json({{"variant", "triple"}}), ConfigError);
  CHECK_THROWS_AS(model::ModelConfig::from_json({{"history", 1}}), ConfigError);
  CHECK(model::ModelConfig::from_json({}).to_json() == model::ModelConfig{}.to_json());
}

TEST_CASE("shuffle is a seeded permutation") {
  std::vector<int> a(50), b;
  for (int i = 0; i < 50; ++i) a[i] = i;
  b = a;
  nn::Rng r1(3), r2(3);
  shuffle(a, r1);
  shuffle(b, r2);
  CHECK(a == b);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("full-model gradients match finite differences") {
  for (auto v : {model::Variant::dual, model::Variant::physics_only, model::Variant::data_only}) {
    auto cfg = toy_config(v);
    cfg.model.history = 3;
    cfg.model.horizon = 2;
    cfg.model.latent = 2;
    cfg.model.encoder_hidden = 2;
    cfg.model.estimator_hidden = 2;
    cfg.model.prediction_norm = fusion::PredictionNorm::l2;
    cfg.model.gamma = 0.5;
    const auto d = toy_dataset(cfg, 80);
    model::AirDualModel net(cfg.model, d.graph, d.stats, 5);
    const model::WindowBuilder b(cfg.model, net.graph(), d.splits.train, d.stats);
    const auto w = b.build(3);
    auto loss = [&] { return net.loss(net.forward(w, true), w).total; };
    const auto r = testsupport::check_gradients(testsupport::all_params(net.params()), loss, 1e-5, 6);
    CHECK(r.max_rel < 1e-4);
    CHECK(r.checked > 0);
  }
}

TEST_CASE("zeroed estimator reproduces the closed-form coefficients inside the model") {
  auto cfg = toy_config(model::Variant::physics_only);
  const auto d = toy_dataset(cfg, 80);
  model::AirDualModel net(cfg.model, d.graph, d.stats, 1);
  for (const auto& [name, t] : net.params().items())
    if (name.rfind("physics.estimator", 0) == 0) {
      Tensor p = t;
      std::fill(p.mutable_value().begin(), p.mutable_value().end(), 0.0);
    }
  const model::WindowBuilder b(cfg.model, net.graph(), d.splits.train, d.stats);
  const auto c = net.forward(b.build(0), false).coefficients.values();
  CHECK(c.k == doctest::Approx(net.k_unit() * std::log(2.0)).epsilon(1e-12));
  for (double beta : c.beta) CHECK(beta == doctest::Approx(std::log(2.0) - 1.0).epsilon(1e-12));
}

TEST_CASE("one epoch produces finite losses for every variant") {
  for (auto v : {model::Variant::dual, model::Variant::physics_only, model::Variant::data_only}) {
    auto cfg = toy_config(v);
    cfg.train.epochs = 1;
    const auto d = toy_dataset(cfg);
    std::size_t calls = 0;
    const auto r = train::train(cfg, d, [&](const EpochMetrics&) { ++calls; });
    CHECK_FALSE(r.aborted.has_value());
    REQUIRE(r.history.size() == 1);
    CHECK(calls == 1);
    CHECK(std::isfinite(r.history[0].l_total));
    CHECK(std::isfinite(r.history[0].val_mae));
    if (v != model::Variant::dual) CHECK(r.history[0].l_tcl == 0.0);
    CHECK(r.checkpoint.contains("splits"));
  }
}

TEST_CASE("training is deterministic under a fixed seed") {
  const auto cfg = toy_config();
  const auto d = toy_dataset(cfg);
  const auto a = train::train(cfg, d), b = train::train(cfg, d);
  CHECK(a.checkpoint.dump() == b.checkpoint.dump());
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e) CHECK(a.history[e].l_total == b.history[e].l_total);
  auto other = cfg;
  other.train.seed = 8;
  CHECK(train::train(other, d).checkpoint.dump() != a.checkpoint.dump());
}

TEST_CASE("checkpoint round trip preserves predictions") {
  const auto cfg = toy_config();
  const auto d = toy_dataset(cfg);
  const auto r = train::train(cfg, d);
  const auto m1 = load_model(r.checkpoint);
  const auto m2 = load_model(nlohmann::json::parse(r.checkpoint.dump()));
  const model::WindowBuilder b(cfg.model, m1.graph(), d.splits.test, d.stats);
  const auto w = b.build(0);
  CHECK(m1.predict(w) == m2.predict(w));
  const auto rep = evaluate(m1, d.splits.test);
  CHECK(rep.per_horizon.size() == 4);
  CHECK(rep.overall.count == b.starts(4).size() * 4 * 6);
}

TEST_CASE("trained model beats the training-mean baseline") {
  auto cfg = toy_config();
  cfg.train.epochs = 12;
  cfg.train.train_stride = 1;
  const auto d = toy_dataset(cfg, 320);
  const auto r = train::train(cfg, d);
  REQUIRE_FALSE(r.aborted.has_value());
  const auto net = load_model(r.checkpoint);
  const double trained = evaluate(net, d.splits.test).overall.mae;
  const double baseline = mean_baseline_mae(d, cfg.model);
  MESSAGE("trained MAE " << trained << ", mean baseline " << baseline);
  CHECK(trained < baseline);

  // Training (RK4, 1.5 h) and inference (dopri5, rtol 1e-3) paths give the same forecast quality.
  const model::WindowBuilder b(cfg.model, net.graph(), d.splits.test, d.stats);
  double mae_fine = 0.0, mae_coarse = 0.0, err = 0.0, mag = 0.0;
  for (auto s : b.starts(4)) {
    const auto w = b.build(s);
    ad::NoGradScope ng;
    const auto fine = net.forward(w, false), coarse = net.forward(w, true);
    for (std::size_t t = 0; t < fine.zd.size(); ++t) {
      for (std::size_t k = 0; k < fine.zd[t].size(); ++k) {
        err = std::max(err, std::abs(fine.zd[t].value()[k] - coarse.zd[t].value()[k]));
        mag = std::max(mag, std::abs(fine.zd[t].value()[k]));
      }
      for (std::size_t i = 0; i < 6; ++i) {
        mae_fine += std::abs(fine.prediction[t].value()[i] - w.target[t].value()[i]);
        mae_coarse += std::abs(coarse.prediction[t].value()[i] - w.target[t].value()[i]);
      }
    }
  }
  MESSAGE("latent RK4 vs dopri5 max relative deviation " << err / mag);
  CHECK(std::abs(mae_fine - mae_coarse) <= 0.01 * mae_fine);
}

TEST_CASE("a diverging run aborts with the last good checkpoint") {
  auto cfg = toy_config(model::Variant::physics_only);
  cfg.train.lr = 1e4;
  cfg.train.clip_norm = 1e12;
  cfg.train.epochs = 5;
  const auto d = toy_dataset(cfg);
  TrainResult r;
  try {
    r = train::train(cfg, d);
  } catch (const Error& e) {
    MESSAGE("diverged with an exception: " << e.what());
    CHECK(std::string(e.what()).size() > 0);
    return;
  }
  if (r.aborted) {
    CHECK(r.aborted->find("non-finite loss") != std::string::npos);
    CHECK(r.checkpoint.contains("params"));
  }
}
