#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>

#include "airdual/geo_graph.hpp"
#include "support.hpp"

using namespace airdual;
using namespace airdual::geo;

namespace {

// Spherical law of cosines, written independently of the haversine form.
double cosine_law_km(LatLon a, LatLon b) {
  const double r = std::numbers::pi / 180.0;
  const double c = std::sin(a.lat * r) * std::sin(b.lat * r) +
                   std::cos(a.lat * r) * std::cos(b.lat * r) * std::cos((b.lon - a.lon) * r);
  return 6371.0 * std::acos(std::clamp(c, -1.0, 1.0));
}

StationMeta st(const std::string& id, double lat, double lon) { return {id, lat, lon, 0.0}; }

// 0..1 degree raster on both axes with a ridge of height `h` along lon = 0.5.
ElevationField ridge_raster(double h, std::size_t nodes = 101) {
  std::vector<double> v(nodes * nodes, 0.0);
  const std::size_t mid = nodes / 2;
  for (std::size_t r = 0; r < nodes; ++r) v[r * nodes + mid] = h;
  const double step = 1.0 / static_cast<double>(nodes - 1);
  return ElevationField(nodes, nodes, 0.0, 0.0, step, step, std::move(v));
}

}  // namespace

TEST_CASE("haversine: identical points, antipodes, small offsets") {
  CHECK(haversine_km({39.90, 116.40}, {39.90, 116.40}) == 0.0);
  const double half = std::numbers::pi * kEarthRadiusKm;
  CHECK(haversine_km({0, 0}, {0, 180}) == doctest::Approx(half).epsilon(1e-12));
  CHECK(half == doctest::Approx(20015.0).epsilon(1e-4));
  const double d = haversine_km({39.90, 116.40}, {40.00, 116.40});
  CHECK(d == doctest::Approx(11.12).epsilon(1e-3));
  CHECK(d == doctest::Approx(cosine_law_km({39.90, 116.40}, {40.00, 116.40})).epsilon(1e-9));
}

TEST_CASE("haversine: symmetric and agrees with the cosine law on random pairs") {
  nn::Rng rng(11);
  for (int k = 0; k < 200; ++k) {
    const LatLon a{rng.uniform(-80, 80), rng.uniform(-179, 179)};
    const LatLon b{rng.uniform(-80, 80), rng.uniform(-179, 179)};
    const double d = haversine_km(a, b);
    CHECK(d >= 0.0);
    CHECK(d == haversine_km(b, a));
    CHECK(d == doctest::Approx(cosine_law_km(a, b)).epsilon(1e-7));
  }
}

TEST_CASE("ridge height: flat, single ridge, dipping terrain, coverage") {
  const auto a = st("a", 0.5, 0.1), b = st("b", 0.5, 0.9);
  CHECK(ridge_height(a, b, ElevationField::flat()) == 0.0);

  const double H = 800.0;
  const double r = ridge_height(a, b, ridge_raster(H));
  // Tent of half-width 0.01 deg; samples are 0.8/129 deg apart along the segment,
  // so the best one sits within one sample spacing of the crest.
  const double spacing = 0.8 / 129.0;
  CHECK(r <= H);
  CHECK(r >= H * (1.0 - spacing / 0.01));
  const double dense = ridge_height(a, b, ridge_raster(H), 4096);
  CHECK(std::abs(dense - H) <= std::abs(r - H) + 1e-9);

  // Endpoints on high ground, a valley between.
  std::vector<double> v(11 * 11);
  for (std::size_t rr = 0; rr < 11; ++rr)
    for (std::size_t c = 0; c < 11; ++c) v[rr * 11 + c] = 100.0 * std::abs(static_cast<double>(c) - 5.0);
  const ElevationField valley(11, 11, 0.0, 0.0, 0.1, 0.1, v);
  CHECK(ridge_height(st("a", 0.5, 0.0), st("b", 0.5, 1.0), valley) < 0.0);

  CHECK_THROWS_AS(ridge_height(st("a", 0.5, 0.5), st("b", 0.5, 1.5), valley), CoverageError);
}

TEST_CASE("geospatial graph: distance and ridge thresholds") {
  const StationSet far({st("a", 39.0, 116.0), st("b", 39.0, 120.0)});
  CHECK(build_geospatial_graph(far, ElevationField::flat(), 300.0, 1200.0).edge_count() == 0);

  const StationSet near({st("a", 39.0, 116.0), st("b", 39.1, 116.0)});
  const auto g = build_geospatial_graph(near, ElevationField::flat(), 300.0, 1200.0);
  CHECK(g.adjacent(0, 1));
  CHECK(g.adjacent(1, 0));

  const StationSet across({st("a", 0.5, 0.3), st("b", 0.5, 0.7)});
  CHECK(build_geospatial_graph(across, ridge_raster(2000.0), 300.0, 1200.0).edge_count() == 0);
  CHECK(build_geospatial_graph(across, ridge_raster(500.0), 300.0, 1200.0).edge_count() == 1);

  CHECK_THROWS_AS(build_geospatial_graph(StationSet({st("a", 0, 0)}), ElevationField::flat(), 300, 1200),
                  DegenerateInputError);
  CHECK_THROWS_AS(build_geospatial_graph(near, ElevationField::flat(), 0.0, 1200), ConfigError);
}

TEST_CASE("station set rejects duplicate ids and bad coordinates") {
  CHECK_THROWS_AS(StationSet({st("a", 0, 0), st("a", 1, 1)}), ConfigError);
  CHECK_THROWS_AS(StationSet({st("a", 91, 0)}), ConfigError);
  CHECK_THROWS_AS(StationSet({st("a", 0, 181)}), ConfigError);
}

TEST_CASE("diffusion graph: inverse distance weights") {
  // Two stations 10 km apart along a meridian.
  const double dlat = 10.0 / (kEarthRadiusKm * std::numbers::pi / 180.0);
  const StationSet s({st("a", 39.0, 116.0), st("b", 39.0 + dlat, 116.0), st("c", 45.0, 116.0)});
  const auto g = build_geospatial_graph(s, ElevationField::flat(), 300.0, 1200.0);
  const auto dg = build_diffusion_graph(g);
  CHECK(dg.weights(0, 1) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(dg.weights(0, 2) == 0.0);
  CHECK(dg.weights(0, 0) == 0.0);

  GeoGraph dup = g;
  dup.distance(0, 1) = dup.distance(1, 0) = 0.0;
  CHECK_THROWS_AS(build_diffusion_graph(dup), DuplicateLocationError);
}

TEST_CASE("property: geo and diffusion graphs symmetric over random station sets") {
  nn::Rng rng(7);
  for (int k = 0; k < 100; ++k) {
    const auto g = testsupport::random_graph(3 + rng.index(20), rng);
    const auto dg = build_diffusion_graph(g);
    for (std::size_t i = 0; i < g.n; ++i) {
      CHECK_FALSE(g.adjacent(i, i));
      CHECK(g.distance(i, i) == 0.0);
      for (std::size_t j = 0; j < g.n; ++j) {
        CHECK(g.adjacent(i, j) == g.adjacent(j, i));
        CHECK(g.distance(i, j) == g.distance(j, i));
        CHECK(dg.weights(i, j) == dg.weights(j, i));
        CHECK((dg.weights(i, j) > 0.0) == g.adjacent(i, j));
        if (g.adjacent(i, j)) CHECK(g.distance(i, j) <= 120.0);
      }
    }
  }
}

TEST_CASE("advection graph: zero wind, aligned, perpendicular, reverse edge") {
  const double dlat = 20.0 / (kEarthRadiusKm * std::numbers::pi / 180.0);
  // b due north of a, 20 km.
  const StationSet s({st("a", 39.0, 116.0), st("b", 39.0 + dlat, 116.0)});
  const auto g = build_geospatial_graph(s, ElevationField::flat(), 300.0, 1200.0);

  const std::vector<double> calm{0.0, 0.0}, any_dir{123.0, 45.0};
  const auto zero = build_advection_graph(g, calm, any_dir);
  for (double w : zero.weights.data()) CHECK(w == 0.0);

  // Wind from the south (180) blows toward the north along a -> b.
  const double v = 4.0;
  const auto aligned = build_advection_graph(g, std::vector<double>{v, 0.0}, std::vector<double>{180.0, 0.0});
  CHECK(aligned.weights(0, 1) == doctest::Approx(kMetersPerSecondToKmPerHour * v / 20.0).epsilon(1e-9));
  CHECK(aligned.weights(1, 0) == 0.0);

  // The reverse edge only sees station b's own wind.
  const auto back = build_advection_graph(g, std::vector<double>{v, v}, std::vector<double>{180.0, 180.0});
  CHECK(back.weights(1, 0) == 0.0);
  const auto back2 = build_advection_graph(g, std::vector<double>{0.0, v}, std::vector<double>{0.0, 0.0});
  CHECK(back2.weights(1, 0) == doctest::Approx(kMetersPerSecondToKmPerHour * v / 20.0).epsilon(1e-9));
  CHECK(back2.weights(0, 1) == 0.0);

  // Wind from the west is perpendicular to a south-north edge.
  const auto perp = build_advection_graph(g, std::vector<double>{v, v}, std::vector<double>{270.0, 270.0});
  CHECK(perp.weights(0, 1) == 0.0);
  CHECK(perp.weights(1, 0) == 0.0);

  // The toward convention reverses the heading.
  const auto toward =
      build_advection_graph(g, std::vector<double>{v, 0.0}, std::vector<double>{0.0, 0.0}, WindConvention::toward);
  CHECK(toward.weights(0, 1) == doctest::Approx(aligned.weights(0, 1)).epsilon(1e-12));

  CHECK_THROWS_AS(build_advection_graph(g, std::vector<double>{1.0}, std::vector<double>{0.0, 0.0}), ShapeError);
  CHECK_THROWS_AS(build_advection_graph(g, std::vector<double>{-1.0, 0.0}, any_dir), ConfigError);
}

TEST_CASE("property: advection weights non-negative, on edges only, and time-varying") {
  nn::Rng rng(3);
  for (int k = 0; k < 100; ++k) {
    const auto g = testsupport::random_graph(3 + rng.index(15), rng);
    std::vector<double> sp, dir, sp2, dir2;
    testsupport::random_wind(g.n, rng, sp, dir);
    testsupport::random_wind(g.n, rng, sp2, dir2);
    const auto a1 = build_advection_graph(g, sp, dir, WindConvention::from, 0);
    const auto a2 = build_advection_graph(g, sp2, dir2, WindConvention::from, 10800);
    for (std::size_t i = 0; i < g.n; ++i)
      for (std::size_t j = 0; j < g.n; ++j) {
        CHECK(a1.weights(i, j) >= 0.0);
        if (!g.adjacent(i, j)) CHECK(a1.weights(i, j) == 0.0);
        if (a1.weights(i, j) > 0.0) {
          const double heading = deg2rad(dir[i] + 180.0);
          const double bearing = deg2rad(initial_bearing_deg(g.positions[i], g.positions[j]));
          CHECK(std::cos(heading - bearing) > 0.0);
        }
      }
    if (g.edge_count() > 0) CHECK_FALSE(a1.weights == a2.weights);
  }
}

TEST_CASE("property: removing a station equals building without it") {
  nn::Rng rng(5);
  for (int k = 0; k < 30; ++k) {
    const auto s = testsupport::random_stations(4 + rng.index(10), rng);
    const auto full = build_geospatial_graph(s, ElevationField::flat(), 120.0, 1200.0);
    const auto drop = rng.index(s.size());
    const auto reduced = build_geospatial_graph(s.without(drop), ElevationField::flat(), 120.0, 1200.0);
    for (std::size_t i = 0, ri = 0; i < s.size(); ++i) {
      if (i == drop) continue;
      for (std::size_t j = 0, rj = 0; j < s.size(); ++j) {
        if (j == drop) continue;
        CHECK(reduced.adjacent(ri, rj) == full.adjacent(i, j));
        CHECK(reduced.distance(ri, rj) == full.distance(i, j));
        ++rj;
      }
      ++ri;
    }
  }
}

TEST_CASE("graph json round trip") {
  nn::Rng rng(9);
  const auto g = testsupport::random_graph(12, rng);
  const auto back = graph_from_json(graph_to_json(g));
  CHECK(back.n == g.n);
  CHECK(back.adjacency == g.adjacency);
  CHECK(back.ids == g.ids);
  for (std::size_t i = 0; i < g.n * g.n; ++i) CHECK(back.distance.data()[i] == doctest::Approx(g.distance.data()[i]));
}

TEST_CASE("stations csv and elevation grid files") {
  const auto dir = testsupport::scratch_dir("geo_files");
  testsupport::write_file(dir / "stations.csv", "id,lat,lon,elevation_m\nA,39.0,116.0,50\nB,39.2,116.1,60\n");
  const auto s = read_stations_csv((dir / "stations.csv").string());
  REQUIRE(s.size() == 2);
  CHECK(s[1].id == "B");
  CHECK(s[1].elevation_m == 60.0);

  testsupport::write_file(dir / "elevation.grid", "2 2 39 116 1 1\n0 10\n20 30\n");
  const auto f = read_elevation_grid((dir / "elevation.grid").string());
  CHECK(f.at({39.5, 116.5}) == doctest::Approx(15.0));
  testsupport::write_file(dir / "bad.grid", "2 2 39 116 1 1\n0 10\n");
  CHECK_THROWS_AS(read_elevation_grid((dir / "bad.grid").string()), IoError);
}
