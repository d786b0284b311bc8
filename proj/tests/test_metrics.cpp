#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "airdual/metrics.hpp"
#include "support.hpp"

using namespace airdual;
using namespace airdual::metrics;

TEST_CASE("perfect prediction scores zero") {
  nn::Rng rng(1);
  const auto x = testsupport::random_vector(50, rng, 0.0, 300.0);
  CHECK(mae(x, x) == 0.0);
  CHECK(rmse(x, x) == 0.0);
  CHECK(smape(x, x) == 0.0);
}

TEST_CASE("hand-computed values") {
  const std::vector<double> x{0.0, 2.0}, y{1.0, 1.0};
  CHECK(mae(x, y) == 1.0);
  CHECK(rmse(x, y) == 1.0);
  CHECK(smape(std::vector<double>{100.0}, std::vector<double>{50.0}) == doctest::Approx(50.0 / 75.0).epsilon(1e-15));
  CHECK(smape(std::vector<double>{0.0, 10.0}, std::vector<double>{0.0, 10.0}) == 0.0);
  CHECK(smape(std::vector<double>{0.0}, std::vector<double>{4.0}) == doctest::Approx(2.0));
  CHECK(rmse(std::vector<double>{0.0, 0.0}, std::vector<double>{3.0, 4.0}) == doctest::Approx(std::sqrt(12.5)));
}

TEST_CASE("metric errors") {
  const std::vector<double> empty;
  CHECK_THROWS_AS(mae(empty, empty), DegenerateInputError);
  CHECK_THROWS_AS(rmse(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}), ShapeError);
}

TEST_CASE("property: rmse bounds mae, smape within [0, 2]") {
  nn::Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 1 + rng.index(40);
    const auto x = testsupport::random_vector(n, rng, 0.0, 300.0);
    const auto y = testsupport::random_vector(n, rng, 0.0, 300.0);
    CHECK(rmse(x, y) >= mae(x, y) - 1e-12);
    CHECK(smape(x, y) >= 0.0);
    CHECK(smape(x, y) <= 2.0);
  }
}

TEST_CASE("sudden-change labelling") {
  const std::vector<double> flat(5, 100.0);
  for (bool b : label_sudden_changes(flat)) CHECK_FALSE(b);
  const std::vector<double> up{80.0, 105.0};
  CHECK(label_sudden_changes(up) == std::vector<bool>{true, false});
  const std::vector<double> from_low{50.0, 80.0};
  CHECK(label_sudden_changes(from_low) == std::vector<bool>{false, false});
  const std::vector<double> drop{120.0, 99.0, 99.0, 78.9};
  CHECK(label_sudden_changes(drop) == std::vector<bool>{true, false, true, false});
  const std::vector<double> edge{75.0, 200.0, 180.0};
  CHECK(label_sudden_changes(edge) == std::vector<bool>{false, false, false});
  CHECK(label_sudden_changes(std::vector<double>{}).empty());
}

TEST_CASE("report: pooled, per-horizon and sudden subset") {
  ReportBuilder b(2);
  // Two stations, horizon 2, row-major horizon x station.
  b.add_window(std::vector<double>{80.0, 10.0, 105.0, 12.0}, std::vector<double>{70.0, 10.0, 100.0, 14.0}, 2);
  const auto r = b.build();
  CHECK(r.overall.count == 4);
  CHECK(r.overall.mae == doctest::Approx((10.0 + 0.0 + 5.0 + 2.0) / 4.0));
  REQUIRE(r.per_horizon.size() == 2);
  CHECK(r.per_horizon[0].mae == doctest::Approx(5.0));
  CHECK(r.per_horizon[1].mae == doctest::Approx(3.5));
  REQUIRE(r.sudden_change.has_value());
  CHECK(r.sudden_change->count == 1);
  CHECK(r.sudden_change->mae == doctest::Approx(10.0));
  CHECK_THROWS_AS(b.add_window(std::vector<double>{1.0}, std::vector<double>{1.0}, 2), ShapeError);
}

TEST_CASE("report JSON round trip; empty sudden set is null") {
  ReportBuilder calm(3);
  nn::Rng rng(3);
  const auto t = testsupport::random_vector(12, rng, 0.0, 50.0);
  const auto p = testsupport::random_vector(12, rng, 0.0, 50.0);
  calm.add_window(t, p, 4);
  const auto r = calm.build();
  CHECK_FALSE(r.sudden_change.has_value());
  const auto j = to_json(r);
  CHECK(j["sudden_change"].is_null());
  const auto back = report_from_json(nlohmann::json::parse(j.dump()));
  CHECK(to_json(back).dump() == j.dump());
  CHECK(back.overall.mae == r.overall.mae);
  CHECK(back.per_horizon.size() == 3);

  ReportBuilder hot(2);
  hot.add_window(std::vector<double>{80.0, 105.0}, std::vector<double>{81.0, 99.0}, 1);
  const auto hj = to_json(hot.build());
  CHECK(report_from_json(nlohmann::json::parse(hj.dump())).sudden_change->mae == doctest::Approx(1.0));
}
