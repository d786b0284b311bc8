#pragma once

// Station geometry and the three graphs used by the transport model:
// the boolean geospatial graph, the static inverse-distance diffusion graph
// and the per-timestep wind-projected advection graph.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "airdual/csv.hpp"
#include "airdual/errors.hpp"
#include "airdual/matrix.hpp"

namespace airdual::geo {

inline constexpr double kEarthRadiusKm = 6371.0;
/// Converts (m/s) / km to 1/hour.
inline constexpr double kMetersPerSecondToKmPerHour = 3.6;
/// Projections at or below this value count as non-positive.
inline constexpr double kProjectionEpsilon = 1e-12;
inline constexpr int kRidgeSamples = 128;

struct LatLon {
  double lat = 0.0;
  double lon = 0.0;
};

struct StationMeta {
  std::string id;
  double lat = 0.0;
  double lon = 0.0;
  double elevation_m = 0.0;

  LatLon position() const { return {lat, lon}; }
};

/// Validated, ordered collection of stations.
class StationSet {
 public:
  StationSet() = default;
  explicit StationSet(std::vector<StationMeta> stations) : stations_(std::move(stations)) {
    std::set<std::string> seen;
    for (const auto& s : stations_) {
      if (!seen.insert(s.id).second) throw ConfigError("duplicate station id: " + s.id);
      if (!(s.lat >= -90.0 && s.lat <= 90.0) || !(s.lon >= -180.0 && s.lon <= 180.0))
        throw ConfigError("station " + s.id + " has out-of-range coordinates");
    }
  }

  std::size_t size() const noexcept { return stations_.size(); }
  const StationMeta& operator[](std::size_t i) const { return stations_[i]; }
  auto begin() const { return stations_.begin(); }
  auto end() const { return stations_.end(); }
  const std::vector<StationMeta>& items() const noexcept { return stations_; }

  std::size_t index_of(const std::string& id) const {
    for (std::size_t i = 0; i < stations_.size(); ++i)
      if (stations_[i].id == id) return i;
    throw ConfigError("unknown station id: " + id);
  }

  /// Copy without station `i`.
  StationSet without(std::size_t i) const {
    auto copy = stations_;
    copy.erase(copy.begin() + static_cast<std::ptrdiff_t>(i));
    return StationSet(std::move(copy));
  }

 private:
  std::vector<StationMeta> stations_;
};

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

inline double haversine_km(LatLon a, LatLon b) {
  const double p1 = deg2rad(a.lat), p2 = deg2rad(b.lat);
  const double dp = p2 - p1;
  const double dl = deg2rad(b.lon - a.lon);
  const double s1 = std::sin(dp / 2.0), s2 = std::sin(dl / 2.0);
  const double h = s1 * s1 + std::cos(p1) * std::cos(p2) * s2 * s2;
  return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(h)));
}

/// Initial great-circle bearing from `a` to `b`, degrees clockwise from north in [0, 360).
inline double initial_bearing_deg(LatLon a, LatLon b) {
  const double p1 = deg2rad(a.lat), p2 = deg2rad(b.lat);
  const double dl = deg2rad(b.lon - a.lon);
  const double y = std::sin(dl) * std::cos(p2);
  const double x = std::cos(p1) * std::sin(p2) - std::sin(p1) * std::cos(p2) * std::cos(dl);
  double b_deg = rad2deg(std::atan2(y, x));
  if (b_deg < 0.0) b_deg += 360.0;
  return b_deg;
}

/// Elevation raster in geographic coordinates, or flat terrain.
///
/// Row r sits at latitude lat0 + r*dlat, column c at longitude lon0 + c*dlon.
/// Values are bilinearly interpolated between nodes.
class ElevationField {
 public:
  static ElevationField flat() { return ElevationField(); }

  ElevationField(std::size_t nrows, std::size_t ncols, double lat0, double lon0, double dlat,
                 double dlon, std::vector<double> values)
      : flat_(false), grid_(nrows, ncols, std::move(values)), lat0_(lat0), lon0_(lon0), dlat_(dlat),
        dlon_(dlon) {
    if (nrows < 2 || ncols < 2) throw ConfigError("elevation raster needs at least 2x2 nodes");
    if (dlat == 0.0 || dlon == 0.0) throw ConfigError("elevation raster resolution must be non-zero");
  }

  bool is_flat() const noexcept { return flat_; }

  bool covers(LatLon p) const {
    if (flat_) return true;
    const double r = (p.lat - lat0_) / dlat_;
    const double c = (p.lon - lon0_) / dlon_;
    constexpr double tol = 1e-9;
    return r >= -tol && c >= -tol && r <= static_cast<double>(grid_.rows() - 1) + tol &&
           c <= static_cast<double>(grid_.cols() - 1) + tol;
  }

  double at(LatLon p) const {
    if (flat_) return 0.0;
    if (!covers(p)) throw CoverageError("point outside elevation raster");
    const double r = std::clamp((p.lat - lat0_) / dlat_, 0.0, static_cast<double>(grid_.rows() - 1));
    const double c = std::clamp((p.lon - lon0_) / dlon_, 0.0, static_cast<double>(grid_.cols() - 1));
    const auto r0 = std::min(static_cast<std::size_t>(r), grid_.rows() - 2);
    const auto c0 = std::min(static_cast<std::size_t>(c), grid_.cols() - 2);
    const double fr = r - static_cast<double>(r0), fc = c - static_cast<double>(c0);
    return (1 - fr) * (1 - fc) * grid_(r0, c0) + (1 - fr) * fc * grid_(r0, c0 + 1) +
           fr * (1 - fc) * grid_(r0 + 1, c0) + fr * fc * grid_(r0 + 1, c0 + 1);
  }

 private:
  ElevationField() = default;

  bool flat_ = true;
  Matrix grid_;
  double lat0_ = 0.0, lon0_ = 0.0, dlat_ = 0.0, dlon_ = 0.0;
};

/// Highest terrain between two stations relative to the higher endpoint.
///
/// Samples the open segment at `samples` uniform interior points. Negative
/// when the terrain between dips below both ends.
inline double ridge_height(const StationMeta& a, const StationMeta& b, const ElevationField& field,
                           int samples = kRidgeSamples) {
  if (field.is_flat()) return 0.0;
  if (!field.covers(a.position()) || !field.covers(b.position()))
    throw CoverageError("segment " + a.id + " -> " + b.id + " leaves the elevation raster");
  const double ends = std::max(field.at(a.position()), field.at(b.position()));
  double best = -std::numeric_limits<double>::infinity();
  for (int k = 1; k <= samples; ++k) {
    const double lambda = static_cast<double>(k) / (samples + 1);
    const LatLon p{lambda * a.lat + (1 - lambda) * b.lat, lambda * a.lon + (1 - lambda) * b.lon};
    best = std::max(best, field.at(p) - ends);
  }
  return best;
}

struct GeoGraph {
  std::size_t n = 0;
  std::vector<std::uint8_t> adjacency;  // n*n, row-major
  Matrix distance;                      // km
  std::vector<LatLon> positions;
  std::vector<std::string> ids;

  bool adjacent(std::size_t i, std::size_t j) const { return adjacency[i * n + j] != 0; }
  std::size_t edge_count() const {
    std::size_t c = 0;
    for (auto a : adjacency) c += a;
    return c / 2;
  }
};

struct DiffusionGraph {
  Matrix weights;  // 1/km, symmetric
};

struct AdvectionGraph {
  Matrix weights;  // 1/hour, weights(i, j) is transport from i to j
  long timestamp = 0;
};

/// Full distance matrix for a station set.
inline Matrix distance_matrix(const StationSet& stations) {
  const auto n = stations.size();
  Matrix d(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = haversine_km(stations[i].position(), stations[j].position());
      d(i, j) = v;
      d(j, i) = v;
    }
  return d;
}

inline GeoGraph build_geospatial_graph(const StationSet& stations, const ElevationField& field,
                                       double d_theta_km, double m_theta_m) {
  if (stations.size() < 2) throw DegenerateInputError("geospatial graph needs at least 2 stations");
  if (!(d_theta_km > 0.0)) throw ConfigError("d_theta must be positive");
  GeoGraph g;
  g.n = stations.size();
  g.adjacency.assign(g.n * g.n, 0);
  g.distance = distance_matrix(stations);
  for (const auto& s : stations) {
    g.positions.push_back(s.position());
    g.ids.push_back(s.id);
  }
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j = i + 1; j < g.n; ++j) {
      if (!(d_theta_km - g.distance(i, j) > 0.0)) continue;
      if (!(m_theta_m - ridge_height(stations[i], stations[j], field) > 0.0)) continue;
      g.adjacency[i * g.n + j] = 1;
      g.adjacency[j * g.n + i] = 1;
    }
  return g;
}

inline DiffusionGraph build_diffusion_graph(const GeoGraph& geo) {
  DiffusionGraph out{Matrix(geo.n, geo.n)};
  for (std::size_t i = 0; i < geo.n; ++i)
    for (std::size_t j = 0; j < geo.n; ++j) {
      if (i == j || !geo.adjacent(i, j)) continue;
      if (geo.distance(i, j) <= 0.0)
        throw DuplicateLocationError("adjacent stations " + std::to_string(i) + " and " +
                                     std::to_string(j) + " share a location");
      out.weights(i, j) = 1.0 / geo.distance(i, j);
    }
  return out;
}

enum class WindConvention { from, toward };

inline WindConvention parse_wind_convention(const std::string& s) {
  if (s == "from") return WindConvention::from;
  if (s == "toward") return WindConvention::toward;
  throw ConfigError("wind_convention must be 'from' or 'toward', got '" + s + "'");
}

/// Heading the air moves toward, in degrees clockwise from north.
inline double wind_heading_deg(double direction_deg, WindConvention convention) {
  return convention == WindConvention::from ? direction_deg + 180.0 : direction_deg;
}

inline AdvectionGraph build_advection_graph(const GeoGraph& geo, std::span<const double> wind_speed,
                                            std::span<const double> wind_dir,
                                            WindConvention convention = WindConvention::from,
                                            long timestamp = 0) {
  if (wind_speed.size() != geo.n || wind_dir.size() != geo.n)
    throw ShapeError("wind arrays must have one entry per station");
  AdvectionGraph out{Matrix(geo.n, geo.n), timestamp};
  for (std::size_t i = 0; i < geo.n; ++i) {
    if (wind_speed[i] < 0.0) throw ConfigError("negative wind speed at station " + std::to_string(i));
    if (wind_speed[i] == 0.0) continue;
    const double heading = deg2rad(wind_heading_deg(wind_dir[i], convention));
    for (std::size_t j = 0; j < geo.n; ++j) {
      if (i == j || !geo.adjacent(i, j)) continue;
      const double bearing = deg2rad(initial_bearing_deg(geo.positions[i], geo.positions[j]));
      const double cos_xi = std::cos(heading - bearing);
      if (cos_xi <= kProjectionEpsilon) continue;
      out.weights(i, j) = kMetersPerSecondToKmPerHour * wind_speed[i] * cos_xi / geo.distance(i, j);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// File formats

inline StationSet read_stations_csv(const std::string& path) {
  const auto t = csv::read_table(path);
  const auto ci = t.column("id"), cla = t.column("lat"), clo = t.column("lon"),
             ce = t.column("elevation_m");
  std::vector<StationMeta> out;
  for (const auto& r : t.rows)
    out.push_back({r[ci], csv::parse_double(r[cla], path), csv::parse_double(r[clo], path),
                   csv::parse_double(r[ce], path)});
  return StationSet(std::move(out));
}

inline void write_stations_csv(const StationSet& stations, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  out << "id,lat,lon,elevation_m\n";
  for (const auto& s : stations) out << s.id << ',' << s.lat << ',' << s.lon << ',' << s.elevation_m << '\n';
}

/// Reads `nrows ncols lat0 lon0 dlat dlon` followed by row-major elevations.
inline ElevationField read_elevation_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open elevation grid: " + path);
  std::size_t nrows = 0, ncols = 0;
  double lat0, lon0, dlat, dlon;
  if (!(in >> nrows >> ncols >> lat0 >> lon0 >> dlat >> dlon))
    throw IoError(path + ": malformed header line");
  std::vector<double> values(nrows * ncols);
  for (auto& v : values)
    if (!(in >> v)) throw IoError(path + ": fewer elevations than nrows*ncols");
  return ElevationField(nrows, ncols, lat0, lon0, dlat, dlon, std::move(values));
}

inline nlohmann::json graph_to_json(const GeoGraph& g) {
  nlohmann::json j;
  j["n"] = g.n;
  auto edges = nlohmann::json::array();
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t k = i + 1; k < g.n; ++k)
      if (g.adjacent(i, k)) edges.push_back({i, k, g.distance(i, k)});
  j["edges"] = std::move(edges);
  auto st = nlohmann::json::array();
  for (std::size_t i = 0; i < g.n; ++i)
    st.push_back({{"id", g.ids[i]}, {"lat", g.positions[i].lat}, {"lon", g.positions[i].lon}});
  j["stations"] = std::move(st);
  return j;
}

/// Inverse of graph_to_json. Needs the `stations` block for positions.
inline GeoGraph graph_from_json(const nlohmann::json& j) {
  GeoGraph g;
  g.n = j.at("n").get<std::size_t>();
  if (!j.contains("stations")) throw IoError("graph.json lacks the stations block");
  for (const auto& s : j.at("stations")) {
    g.ids.push_back(s.at("id").get<std::string>());
    g.positions.push_back({s.at("lat").get<double>(), s.at("lon").get<double>()});
  }
  if (g.positions.size() != g.n) throw IoError("graph.json: station count differs from n");
  g.adjacency.assign(g.n * g.n, 0);
  g.distance = Matrix(g.n, g.n);
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t k = i + 1; k < g.n; ++k) {
      const double d = haversine_km(g.positions[i], g.positions[k]);
      g.distance(i, k) = d;
      g.distance(k, i) = d;
    }
  for (const auto& e : j.at("edges")) {
    const auto a = e.at(0).get<std::size_t>(), b = e.at(1).get<std::size_t>();
    if (a >= g.n || b >= g.n || a == b) throw IoError("graph.json: bad edge");
    g.adjacency[a * g.n + b] = 1;
    g.adjacency[b * g.n + a] = 1;
  }
  return g;
}

}  // namespace airdual::geo
