#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "airdual/pipeline.hpp"
#include "support.hpp"

using namespace airdual;
using namespace airdual::pipeline;

namespace {

std::vector<long> grid_times(std::size_t n, long t0 = 1700006400) {
  std::vector<long> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = t0 + static_cast<long>(i) * kStepSeconds;
  return t;
}

Panel random_panel(std::size_t steps, std::size_t n, nn::Rng& rng) {
  Panel p = Panel::blank(grid_times(steps), testsupport::random_stations(n, rng));
  for (double& v : p.values) v = rng.uniform(0.0, 100.0);
  return p;
}

geo::StationSet three_stations() {
  // B is ~1 km north of A; C is ~50 km away.
  return geo::StationSet({{"A", 39.9, 116.4, 0.0}, {"B", 39.909, 116.4, 0.0}, {"C", 40.35, 116.4, 0.0}});
}

double mass(const Panel& p, std::size_t t) {
  double m = 0.0;
  for (std::size_t i = 0; i < p.station_count(); ++i) m += p.at(t, i, kPm25);
  return m;
}

}  // namespace

TEST_CASE("timestamps round trip") {
  for (const char* s : {"2015-01-01T00:00:00Z", "2016-02-29T21:00:00Z", "2018-12-31T21:00:00Z"})
    CHECK(format_iso8601(parse_iso8601(s)) == s);
  CHECK(parse_iso8601("1970-01-01T03:00:00") == 10800);
  CHECK_THROWS_AS(parse_iso8601("2019-02-29T00:00:00Z"), IoError);
  CHECK_THROWS_AS(parse_iso8601("yesterday"), IoError);
}

TEST_CASE("imputation: identity, nearest neighbour, midpoint, long gaps") {
  nn::Rng rng(1);
  const Panel full = random_panel(20, 4, rng);
  CHECK(impute(full).values == full.values);

  Panel p = Panel::blank(grid_times(3), three_stations());
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t f = 0; f < p.features; ++f) p.at(t, i, f) = 10.0 * static_cast<double>(i + 1) + t;
  p.missing[p.index(1, 0, kPm25)] = 1;
  p.at(1, 0, kPm25) = -999.0;
  const Panel filled = impute(p);
  CHECK(filled.at(1, 0, kPm25) == p.at(1, 1, kPm25));
  CHECK(filled.missing_count() == 0);

  // Single station: no neighbour, so temporal interpolation applies.
  Panel q = Panel::blank(grid_times(5), geo::StationSet({{"A", 39.9, 116.4, 0.0}}));
  q.at(0, 0, kPm25) = 10.0;
  q.at(2, 0, kPm25) = 20.0;
  q.missing[q.index(1, 0, kPm25)] = 1;
  // Two consecutive missing steps span 6 h and stay missing.
  q.missing[q.index(3, 0, kPm25)] = 1;
  q.missing[q.index(4, 0, kPm25)] = 1;
  const Panel qi = impute(q);
  CHECK(qi.at(1, 0, kPm25) == doctest::Approx(15.0).epsilon(1e-15));
  CHECK(qi.is_missing(3, 0, kPm25));
  // Gap ending the series has no right-hand value.
  Panel tail = Panel::blank(grid_times(3), geo::StationSet({{"A", 39.9, 116.4, 0.0}}));
  tail.missing[tail.index(2, 0, kPm25)] = 1;
  CHECK(impute(tail).is_missing(2, 0, kPm25));
}

TEST_CASE("nearest-station ties break by id") {
  // C and B sit symmetrically east and west of A, so the distances are equal.
  geo::StationSet s({{"A", 39.9, 116.5, 0.0}, {"C", 39.9, 116.75, 0.0}, {"B", 39.9, 116.25, 0.0}});
  REQUIRE(geo::haversine_km(s[0].position(), s[1].position()) ==
          geo::haversine_km(s[0].position(), s[2].position()));
  Panel p = Panel::blank(grid_times(1), s);
  p.at(0, 1, kPm25) = 5.0;
  p.at(0, 2, kPm25) = 7.0;
  p.missing[p.index(0, 0, kPm25)] = 1;
  CHECK(impute(p).at(0, 0, kPm25) == 7.0);
}

TEST_CASE("property: imputation never modifies observed cells") {
  nn::Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    Panel p = random_panel(10 + rng.index(30), 2 + rng.index(6), rng);
    for (auto& m : p.missing) m = rng.uniform() < 0.2 ? 1 : 0;
    const Panel out = impute(p);
    for (std::size_t k = 0; k < p.values.size(); ++k) {
      if (!p.missing[k]) CHECK(out.values[k] == p.values[k]);
      if (!out.missing[k]) CHECK(std::isfinite(out.values[k]));
    }
  }
}

TEST_CASE("chronological splits") {
  auto sizes = split_sizes(100, {7, 1, 2});
  CHECK(sizes == std::array<std::size_t, 3>{70, 10, 20});
  sizes = split_sizes(101, {7, 1, 2});
  CHECK(sizes[0] + sizes[1] + sizes[2] == 101);
  CHECK(sizes[0] == 70);
  CHECK_THROWS_AS(split_sizes(10, {0, 1, 1}), ConfigError);

  // Four years of 3-hourly data at 2:1:1.
  const long start = parse_iso8601("2015-01-01T00:00:00Z");
  const long stop = parse_iso8601("2019-01-01T00:00:00Z");
  const auto steps = static_cast<std::size_t>((stop - start) / kStepSeconds);
  Panel year4 = Panel::blank(grid_times(steps, start), geo::StationSet({{"A", 39.9, 116.4, 0.0}}));
  const auto sp = split_chronological(year4, {2, 1, 1}, 48);
  const double day = 86400.0;
  CHECK(std::abs(static_cast<double>(sp.val.times.front() - parse_iso8601("2017-01-01T00:00:00Z"))) <= day);
  CHECK(std::abs(static_cast<double>(sp.test.times.front() - parse_iso8601("2018-01-01T00:00:00Z"))) <= day);
  CHECK(format_iso8601(sp.test.times.back()) == "2018-12-31T21:00:00Z");
  CHECK(sp.manifest()["train"]["start"] == "2015-01-01T00:00:00Z");

  CHECK_THROWS_AS(split_chronological(year4.slice(0, 100), {7, 1, 2}, 48), InsufficientDataError);
}

TEST_CASE("property: windows never cross split boundaries") {
  nn::Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const auto len = 260 + rng.index(200);
    const Panel p = random_panel(len, 2, rng);
    const std::size_t T = 1 + rng.index(12), tau = 1 + rng.index(12);
    const auto sp = split_chronological(p, {7, 1, 2}, T + tau);
    const Panel* parts[] = {&sp.train, &sp.val, &sp.test};
    long prev_end = -1;
    for (const Panel* part : parts) {
      CHECK(part->times.front() > prev_end);
      for (auto s : window_starts(*part, T, tau, 1)) {
        CHECK(part->times[s] > prev_end);
        CHECK(s + T + tau <= part->steps());
      }
      prev_end = part->times.back();
    }
    CHECK(sp.train.steps() + sp.val.steps() + sp.test.steps() == len);
  }
}

TEST_CASE("property: window count") {
  nn::Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const auto len = 2 + rng.index(120);
    const Panel p = random_panel(len, 1, rng);
    const std::size_t T = 1 + rng.index(30), tau = 1 + rng.index(30), stride = 1 + rng.index(4);
    const auto w = window_starts(p, T, tau, stride);
    if (len < T + tau) {
      CHECK(w.empty());
    } else {
      CHECK(w.size() == (len - T - tau) / stride + 1);
    }
  }
  CHECK_THROWS_AS(window_starts(random_panel(10, 1, rng), 2, 2, 0), ConfigError);

  Panel gap = random_panel(20, 2, rng);
  gap.missing[gap.index(10, 1, 3)] = 1;
  for (auto s : window_starts(gap, 3, 2, 1)) CHECK((s + 5 <= 10 || s > 10));
  CHECK(window_starts(gap, 3, 2, 1).size() == 16 - 5);
}

TEST_CASE("normalization: round trip, constant feature, train-only statistics") {
  nn::Rng rng(5);
  Panel p = random_panel(40, 3, rng);
  for (std::size_t t = 0; t < 40; ++t) p.at(t, 1, 2) = 1013.0;
  std::vector<std::string> warnings;
  const auto stats = compute_stats(p, &warnings);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("pressure") != std::string::npos);
  const Panel n = normalize(p, stats);
  for (std::size_t t = 0; t < 40; ++t) CHECK(n.at(t, 1, 2) == 0.0);
  const Panel back = denormalize(n, stats);
  for (std::size_t k = 0; k < p.values.size(); ++k)
    CHECK(std::abs(back.values[k] - p.values[k]) <= 1e-12 * std::max(1.0, std::abs(p.values[k])));

  // Normalized training features have zero mean and unit variance.
  double mean = 0.0, var = 0.0;
  for (std::size_t t = 0; t < 40; ++t) mean += n.at(t, 0, kPm25) / 40.0;
  for (std::size_t t = 0; t < 40; ++t) var += (n.at(t, 0, kPm25) - mean) * (n.at(t, 0, kPm25) - mean) / 40.0;
  CHECK(std::abs(mean) < 1e-12);
  CHECK(var == doctest::Approx(1.0).epsilon(1e-12));

  Panel big = random_panel(100, 2, rng);
  const auto before = compute_stats(split_chronological(big, {7, 1, 2}, 5).train);
  for (std::size_t t = 80; t < 100; ++t) big.at(t, 0, kPm25) = 1e6;
  const auto after = compute_stats(split_chronological(big, {7, 1, 2}, 5).train);
  CHECK(before.mean == after.mean);
  CHECK(before.scale == after.scale);
  CHECK(NormStats::from_json(after.to_json()).mean == after.mean);

  Panel empty = random_panel(4, 1, rng);
  for (std::size_t t = 0; t < 4; ++t) empty.missing[empty.index(t, 0, 1)] = 1;
  CHECK_THROWS_AS(compute_stats(empty), InsufficientDataError);
}

TEST_CASE("observation CSV round trip, range filter, access log") {
  nn::Rng rng(6);
  const auto dir = testsupport::scratch_dir("pipeline_csv");
  Panel p = random_panel(12, 3, rng);
  p.missing[p.index(4, 2, kWindDir)] = 1;
  const auto path = (dir / "observations.csv").string();
  write_observations(p, path);
  const Panel q = read_observations(path, p.stations);
  CHECK(q.times == p.times);
  CHECK(q.missing == p.missing);
  for (std::size_t k = 0; k < p.values.size(); ++k)
    if (!p.missing[k]) CHECK(q.values[k] == p.values[k]);

  AccessLog log;
  const Panel r = read_observations(path, p.stations, TimeRange{p.times[3], p.times[7]}, &log);
  CHECK(r.steps() == 4);
  CHECK(log.rows_parsed == 4 * 3);
  CHECK(log.rows_skipped == 8 * 3);
  CHECK(*log.first == p.times[3]);
  CHECK(*log.last == p.times[6]);

  testsupport::write_file(dir / "bad.csv", testsupport::read_file(path) + testsupport::read_file(path).substr(
                                                                               testsupport::read_file(path).find('\n') + 1));
  CHECK_THROWS_AS(read_observations((dir / "bad.csv").string(), p.stations), IoError);
  CHECK_THROWS_AS(read_observations((dir / "absent.csv").string(), p.stations), IoError);
}

TEST_CASE("synthetic: equilibrium is a constant panel") {
  SyntheticSpec s;
  s.stations = 9;
  s.beta = std::vector<double>(9, 0.0);
  s.wind_regime = "none";
  s.x0_spread = 0.0;
  s.noise_frac = 0.0;
  s.steps = 40;
  const auto d = generate_synthetic(s);
  for (std::size_t t = 0; t < 40; ++t)
    for (std::size_t i = 0; i < 9; ++i) CHECK(d.panel.at(t, i, kPm25) == doctest::Approx(60.0).epsilon(1e-12));
}

TEST_CASE("synthetic: pure decay matches the exponential") {
  SyntheticSpec s;
  s.stations = 6;
  s.k = 0.0;
  s.beta = std::vector<double>(6, -0.1);
  s.wind_regime = "none";
  s.noise_frac = 0.0;
  s.steps = 30;
  const auto d = generate_synthetic(s);
  for (std::size_t t = 0; t < 30; ++t)
    for (std::size_t i = 0; i < 6; ++i) {
      const double exact = d.panel.at(0, i, kPm25) * std::exp(-0.1 * 3.0 * static_cast<double>(t));
      CHECK(std::abs(d.panel.at(t, i, kPm25) - exact) <= 1e-6 * exact);
    }
}

TEST_CASE("synthetic: mass budget") {
  // Uniform beta: total mass follows M0 exp(beta t) whatever the transport does.
  SyntheticSpec s;
  s.stations = 12;
  s.k = 20.0;
  s.beta = std::vector<double>(12, -0.03);
  s.wind_regime = "rotating";
  s.noise_frac = 0.0;
  s.steps = 60;
  const auto d = generate_synthetic(s);
  const double m0 = mass(d.panel, 0);
  for (std::size_t t = 0; t < 60; ++t)
    CHECK(std::abs(mass(d.panel, t) - m0 * std::exp(-0.03 * 3.0 * static_cast<double>(t))) <=
          1e-6 * mass(d.panel, t));

  // Heterogeneous beta: M(t) - M(0) against a Simpson integral of sum beta_i x_i.
  SyntheticSpec h = s;
  h.beta.clear();
  h.beta_lo = -0.02;
  h.beta_hi = 0.0;
  h.steps = 41;
  const auto e = generate_synthetic(h);
  std::vector<double> flux(h.steps);
  for (std::size_t t = 0; t < h.steps; ++t)
    for (std::size_t i = 0; i < 12; ++i) flux[t] += e.beta[i] * e.panel.at(t, i, kPm25);
  for (std::size_t t = 2; t < h.steps; t += 2) {
    double integral = 0.0;
    for (std::size_t k = 0; k + 2 <= t; k += 2) integral += 3.0 / 3.0 * (flux[k] + 4.0 * flux[k + 1] + flux[k + 2]);
    const double change = mass(e.panel, t) - mass(e.panel, 0);
    CHECK(std::abs(change - integral) <= 1e-4 * mass(e.panel, t));
  }
}

TEST_CASE("synthetic: bit reproducibility, truth record, errors") {
  SyntheticSpec s;
  s.stations = 8;
  s.layout = "random";
  s.wind_regime = "gusty";
  s.emission = 2.0;
  s.steps = 50;
  s.seed = 42;
  const auto a = generate_synthetic(s), b = generate_synthetic(s);
  CHECK(a.panel.values == b.panel.values);
  CHECK(a.truth.dump() == b.truth.dump());
  s.seed = 43;
  CHECK(generate_synthetic(s).panel.values != a.panel.values);
  CHECK(a.truth["beta"].size() == 8);
  CHECK(SyntheticSpec::from_json(a.truth["spec"]).to_json() == a.truth["spec"]);

  SyntheticSpec line;
  line.layout = "line";
  line.stations = 5;
  line.ghosts_per_end = 2;
  line.steps = 5;
  const auto g = generate_synthetic(line);
  CHECK(g.all_stations.size() == 9);
  CHECK(g.panel.station_count() == 5);
  CHECK(g.truth["ghosts"].size() == 4);

  SyntheticSpec bad;
  bad.alpha = 1.5;
  CHECK_THROWS_AS(generate_synthetic(bad), ConfigError);
  bad = SyntheticSpec{};
  bad.beta = {1.0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  SyntheticSpec unstable;
  unstable.stations = 4;
  unstable.beta = std::vector<double>(4, 300.0);
  unstable.steps = 10;
  try {
    generate_synthetic(unstable);
    FAIL("expected divergence");
  } catch (const BlowupError& e) {
    CHECK(std::string(e.what()).find("t = ") != std::string::npos);
  }
}
