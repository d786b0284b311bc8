#pragma once

// Observation panels on the 3-hour grid: loading, imputation, normalization,
// chronological splits and windowing, plus the seeded synthetic generator.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "airdual/csv.hpp"
#include "airdual/errors.hpp"
#include "airdual/geo_graph.hpp"
#include "airdual/matrix.hpp"
#include "airdual/nn.hpp"
#include "airdual/ode_solver.hpp"

namespace airdual::pipeline {

inline constexpr long kStepSeconds = 3 * 3600;
inline constexpr double kStepHours = 3.0;
inline constexpr double kMaxGapHours = 5.0;
inline constexpr std::size_t kFeatureCount = 6;
inline constexpr std::size_t kPm25 = 0;
inline constexpr std::size_t kWindSpeed = 4;
inline constexpr std::size_t kWindDir = 5;
inline const std::vector<std::string> kFeatureNames = {"pm25",     "temp",       "pressure",
                                                       "humidity", "wind_speed", "wind_dir"};

// ---------------------------------------------------------------------------
// Timestamps

/// Parses `YYYY-MM-DDTHH:MM:SS` with optional `Z`; returns epoch seconds (UTC).
inline long parse_iso8601(const std::string& s) {
  int y, mo, d, h, mi, sec;
  char tail = 0;
  const int got = std::sscanf(s.c_str(), "%d-%d-%dT%d:%d:%d%c", &y, &mo, &d, &h, &mi, &sec, &tail);
  if (got < 6 || (got == 7 && tail != 'Z') || mo < 1 || mo > 12 || d < 1 || d > 31 || h < 0 || h > 23 || mi < 0 ||
      mi > 59 || sec < 0 || sec > 59)
    throw IoError("bad ISO-8601 timestamp: '" + s + "'");
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) throw IoError("bad calendar date: '" + s + "'");
  const long days_since = sys_days{ymd}.time_since_epoch().count();
  return days_since * 86400L + h * 3600L + mi * 60L + sec;
}

inline std::string format_iso8601(long epoch) {
  using namespace std::chrono;
  const long day_count = epoch >= 0 ? epoch / 86400 : (epoch - 86399) / 86400;
  const long rem = epoch - day_count * 86400;
  const year_month_day ymd{sys_days{days{day_count}}};
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02ld:%02ld:%02ldZ", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), rem / 3600, rem / 60 % 60,
                rem % 60);
  return buf;
}

// ---------------------------------------------------------------------------
// Panel

/// T x N x F values on a regular 3-hour grid with a missing-cell mask.
struct Panel {
  std::vector<long> times;
  geo::StationSet stations;
  std::size_t features = kFeatureCount;
  std::vector<double> values;
  std::vector<std::uint8_t> missing;

  static Panel blank(std::vector<long> times, geo::StationSet stations, std::size_t features = kFeatureCount) {
    Panel p;
    p.times = std::move(times);
    p.stations = std::move(stations);
    p.features = features;
    p.values.assign(p.times.size() * p.stations.size() * features, 0.0);
    p.missing.assign(p.values.size(), 0);
    return p;
  }

  std::size_t steps() const noexcept { return times.size(); }
  std::size_t station_count() const noexcept { return stations.size(); }
  std::size_t index(std::size_t t, std::size_t i, std::size_t f) const {
    return (t * stations.size() + i) * features + f;
  }
  double& at(std::size_t t, std::size_t i, std::size_t f) { return values[index(t, i, f)]; }
  double at(std::size_t t, std::size_t i, std::size_t f) const { return values[index(t, i, f)]; }
  bool is_missing(std::size_t t, std::size_t i, std::size_t f) const { return missing[index(t, i, f)] != 0; }

  std::size_t missing_count() const {
    return static_cast<std::size_t>(std::count(missing.begin(), missing.end(), std::uint8_t{1}));
  }

  /// Steps [begin, begin + count).
  Panel slice(std::size_t begin, std::size_t count) const {
    if (begin + count > steps()) throw ShapeError("panel slice out of range");
    Panel p = blank({times.begin() + static_cast<std::ptrdiff_t>(begin),
                     times.begin() + static_cast<std::ptrdiff_t>(begin + count)},
                    stations, features);
    const auto stride = stations.size() * features;
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(begin * stride), count * stride, p.values.begin());
    std::copy_n(missing.begin() + static_cast<std::ptrdiff_t>(begin * stride), count * stride, p.missing.begin());
    return p;
  }

  void check_grid() const {
    for (std::size_t t = 1; t < times.size(); ++t)
      if (times[t] - times[t - 1] != kStepSeconds) throw IoError("panel times are not on a 3-hour grid");
  }
};

/// Half-open time range [begin, end) in epoch seconds.
struct TimeRange {
  long begin = 0;
  long end = 0;
  bool contains(long t) const { return t >= begin && t < end; }
};

/// Records which observation timestamps were actually parsed.
struct AccessLog {
  std::size_t rows_parsed = 0;
  std::size_t rows_skipped = 0;
  std::optional<long> first;
  std::optional<long> last;

  void touch(long t) {
    ++rows_parsed;
    first = first ? std::min(*first, t) : t;
    last = last ? std::max(*last, t) : t;
  }
};

inline bool is_missing_token(std::string_view s) {
  return s.empty() || s == "nan" || s == "NaN" || s == "NA" || s == "null";
}

/// Loads `observations.csv`, keeping only on-grid timestamps (multiples of
/// 3 hours) and, when given, those inside `range`. Cells absent from the file
/// are marked missing.
inline Panel read_observations(const std::string& path, const geo::StationSet& stations,
                               std::optional<TimeRange> range = std::nullopt, AccessLog* log = nullptr) {
  const auto table = csv::read_table(path);
  const auto c_time = table.column("timestamp");
  const auto c_station = table.column("station_id");
  std::vector<std::size_t> c_feat;
  for (const auto& name : kFeatureNames) c_feat.push_back(table.column(name));

  struct Row {
    long time;
    std::size_t station;
    const std::vector<std::string>* fields;
  };
  std::vector<Row> rows;
  for (const auto& r : table.rows) {
    const long t = parse_iso8601(std::string(csv::trim(r[c_time])));
    if (t % kStepSeconds != 0 || (range && !range->contains(t))) {
      if (log) ++log->rows_skipped;
      continue;
    }
    if (log) log->touch(t);
    rows.push_back({t, stations.index_of(std::string(csv::trim(r[c_station]))), &r});
  }
  if (rows.empty()) throw InsufficientDataError(path + ": no on-grid observations in range");

  long t0 = rows.front().time, t1 = rows.front().time;
  for (const auto& r : rows) {
    t0 = std::min(t0, r.time);
    t1 = std::max(t1, r.time);
  }
  std::vector<long> times;
  for (long t = t0; t <= t1; t += kStepSeconds) times.push_back(t);
  Panel p = Panel::blank(std::move(times), stations);
  std::fill(p.missing.begin(), p.missing.end(), std::uint8_t{1});
  std::vector<std::uint8_t> seen(p.steps() * p.station_count(), 0);
  for (const auto& r : rows) {
    const auto t = static_cast<std::size_t>((r.time - t0) / kStepSeconds);
    auto& flag = seen[t * p.station_count() + r.station];
    if (flag) throw IoError(path + ": duplicate row for " + stations[r.station].id + " at " + format_iso8601(r.time));
    flag = 1;
    for (std::size_t f = 0; f < kFeatureCount; ++f) {
      const auto tok = csv::trim((*r.fields)[c_feat[f]]);
      if (is_missing_token(tok)) continue;
      p.at(t, r.station, f) = csv::parse_double(tok, path);
      p.missing[p.index(t, r.station, f)] = 0;
    }
  }
  return p;
}

inline void write_observations(const Panel& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  out << "timestamp,station_id";
  for (const auto& n : kFeatureNames) out << ',' << n;
  out << '\n';
  for (std::size_t t = 0; t < p.steps(); ++t)
    for (std::size_t i = 0; i < p.station_count(); ++i) {
      out << format_iso8601(p.times[t]) << ',' << p.stations[i].id;
      for (std::size_t f = 0; f < p.features; ++f) {
        out << ',';
        if (!p.is_missing(t, i, f)) out << p.at(t, i, f);
      }
      out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Imputation

/// Fills each missing cell from the nearest station observed at that step
/// (great-circle distance, ties broken by station id), then linearly
/// interpolates remaining gaps shorter than `max_gap_hours`. Longer gaps stay
/// missing so that windows over them get dropped.
inline Panel impute(const Panel& in, double max_gap_hours = kMaxGapHours) {
  Panel p = in;
  const auto n = p.station_count();
  // Neighbour order per station: distance then id.
  std::vector<std::vector<std::size_t>> order(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) order[i].push_back(j);
    std::sort(order[i].begin(), order[i].end(), [&](std::size_t a, std::size_t b) {
      const double da = geo::haversine_km(p.stations[i].position(), p.stations[a].position());
      const double db = geo::haversine_km(p.stations[i].position(), p.stations[b].position());
      if (da != db) return da < db;
      return p.stations[a].id < p.stations[b].id;
    });
  }
  for (std::size_t t = 0; t < p.steps(); ++t)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t f = 0; f < p.features; ++f) {
        if (!in.is_missing(t, i, f)) continue;
        for (std::size_t j : order[i])
          if (!in.is_missing(t, j, f)) {
            p.at(t, i, f) = in.at(t, j, f);
            p.missing[p.index(t, i, f)] = 0;
            break;
          }
      }

  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t f = 0; f < p.features; ++f) {
      std::size_t t = 0;
      while (t < p.steps()) {
        if (!p.is_missing(t, i, f)) {
          ++t;
          continue;
        }
        std::size_t end = t;
        while (end < p.steps() && p.is_missing(end, i, f)) ++end;
        const auto run = end - t;
        const bool bounded = t > 0 && end < p.steps();
        if (bounded && static_cast<double>(run) * kStepHours < max_gap_hours) {
          const double a = p.at(t - 1, i, f), b = p.at(end, i, f);
          for (std::size_t k = t; k < end; ++k) {
            const double w = static_cast<double>(k - t + 1) / static_cast<double>(run + 1);
            p.at(k, i, f) = a + w * (b - a);
            p.missing[p.index(k, i, f)] = 0;
          }
        }
        t = end;
      }
    }
  return p;
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-station, per-feature z-score parameters.
struct NormStats {
  std::size_t stations = 0;
  std::size_t features = 0;
  std::vector<double> mean;
  std::vector<double> scale;

  std::size_t index(std::size_t i, std::size_t f) const { return i * features + f; }

  nlohmann::json to_json() const {
    return {{"stations", stations}, {"features", features}, {"mean", mean}, {"scale", scale}};
  }
  static NormStats from_json(const nlohmann::json& j) {
    NormStats s;
    s.stations = j.at("stations").get<std::size_t>();
    s.features = j.at("features").get<std::size_t>();
    s.mean = j.at("mean").get<std::vector<double>>();
    s.scale = j.at("scale").get<std::vector<double>>();
    if (s.mean.size() != s.stations * s.features || s.scale.size() != s.mean.size())
      throw IoError("normalization statistics have inconsistent sizes");
    return s;
  }
};

/// Statistics from observed cells only. A feature with zero variance gets
/// scale 1 and a message in `warnings`.
inline NormStats compute_stats(const Panel& p, std::vector<std::string>* warnings = nullptr) {
  NormStats s{p.station_count(), p.features, {}, {}};
  s.mean.assign(s.stations * s.features, 0.0);
  s.scale.assign(s.mean.size(), 1.0);
  for (std::size_t i = 0; i < s.stations; ++i)
    for (std::size_t f = 0; f < s.features; ++f) {
      double sum = 0.0;
      std::size_t count = 0;
      for (std::size_t t = 0; t < p.steps(); ++t)
        if (!p.is_missing(t, i, f)) {
          sum += p.at(t, i, f);
          ++count;
        }
      if (count == 0) throw InsufficientDataError("no observations for station " + p.stations[i].id + " feature " +
                                                  kFeatureNames.at(f));
      const double mean = sum / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t t = 0; t < p.steps(); ++t)
        if (!p.is_missing(t, i, f)) ss += (p.at(t, i, f) - mean) * (p.at(t, i, f) - mean);
      const double sd = std::sqrt(ss / static_cast<double>(count));
      s.mean[s.index(i, f)] = mean;
      if (sd > 0.0) {
        s.scale[s.index(i, f)] = sd;
      } else if (warnings) {
        warnings->push_back("zero variance for station " + p.stations[i].id + " feature " + kFeatureNames.at(f) +
                            "; using scale 1");
      }
    }
  return s;
}

inline Panel normalize(const Panel& p, const NormStats& s) {
  if (s.stations != p.station_count() || s.features != p.features)
    throw ShapeError("normalization statistics do not match the panel");
  Panel out = p;
  for (std::size_t t = 0; t < p.steps(); ++t)
    for (std::size_t i = 0; i < s.stations; ++i)
      for (std::size_t f = 0; f < s.features; ++f)
        out.at(t, i, f) = (p.at(t, i, f) - s.mean[s.index(i, f)]) / s.scale[s.index(i, f)];
  return out;
}

inline Panel denormalize(const Panel& p, const NormStats& s) {
  if (s.stations != p.station_count() || s.features != p.features)
    throw ShapeError("normalization statistics do not match the panel");
  Panel out = p;
  for (std::size_t t = 0; t < p.steps(); ++t)
    for (std::size_t i = 0; i < s.stations; ++i)
      for (std::size_t f = 0; f < s.features; ++f)
        out.at(t, i, f) = p.at(t, i, f) * s.scale[s.index(i, f)] + s.mean[s.index(i, f)];
  return out;
}

// ---------------------------------------------------------------------------
// Splits and windows

struct SplitRatios {
  double train = 7.0;
  double val = 1.0;
  double test = 2.0;
};

struct Splits {
  Panel train, val, test;

  nlohmann::json manifest() const {
    auto seg = [](const Panel& p) {
      return nlohmann::json{{"start", format_iso8601(p.times.front())},
                            {"end", format_iso8601(p.times.back())},
                            {"steps", p.steps()}};
    };
    return {{"train", seg(train)}, {"val", seg(val)}, {"test", seg(test)}};
  }
};

/// Step counts per segment: floor of the proportional share for train and
/// validation, the remainder for test.
inline std::array<std::size_t, 3> split_sizes(std::size_t length, const SplitRatios& r) {
  if (!(r.train > 0.0) || !(r.val > 0.0) || !(r.test > 0.0)) throw ConfigError("split ratios must be positive");
  const double total = r.train + r.val + r.test;
  const auto share = [&](double x) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(length) * x / total + 1e-9));
  };
  const auto a = share(r.train), b = share(r.val);
  return {a, b, length - a - b};
}

/// Contiguous, ordered, non-overlapping segments. Each must hold at least
/// `min_steps` steps (one full window).
inline Splits split_chronological(const Panel& p, const SplitRatios& r, std::size_t min_steps) {
  const auto sizes = split_sizes(p.steps(), r);
  const char* names[] = {"train", "val", "test"};
  for (int k = 0; k < 3; ++k)
    if (sizes[k] < min_steps)
      throw InsufficientDataError(std::string(names[k]) + " split has " + std::to_string(sizes[k]) +
                                  " steps, a window needs " + std::to_string(min_steps));
  return {p.slice(0, sizes[0]), p.slice(sizes[0], sizes[1]), p.slice(sizes[0] + sizes[1], sizes[2])};
}

/// Start indices of complete windows of `history + horizon` steps, advancing
/// by `stride`; windows touching any missing cell are dropped.
inline std::vector<std::size_t> window_starts(const Panel& p, std::size_t history, std::size_t horizon,
                                              std::size_t stride) {
  if (stride == 0) throw ConfigError("window stride must be >= 1");
  const auto len = history + horizon;
  std::vector<std::size_t> out;
  if (p.steps() < len) return out;
  std::vector<std::uint8_t> bad(p.steps(), 0);
  const auto per_step = p.station_count() * p.features;
  for (std::size_t t = 0; t < p.steps(); ++t)
    for (std::size_t k = 0; k < per_step; ++k)
      if (p.missing[t * per_step + k]) {
        bad[t] = 1;
        break;
      }
  for (std::size_t s = 0; s + len <= p.steps(); s += stride)
    if (std::none_of(bad.begin() + static_cast<std::ptrdiff_t>(s), bad.begin() + static_cast<std::ptrdiff_t>(s + len),
                     [](std::uint8_t b) { return b != 0; }))
      out.push_back(s);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic open-system generator

struct SyntheticSpec {
  std::string layout = "grid";  // grid | line | random
  std::size_t stations = 16;
  double spacing_deg = 0.5;
  double lat0 = 39.0;
  double lon0 = 116.0;
  double d_theta_km = 0.0;  // 0 picks 1.2 x the nominal spacing
  std::size_t ghosts_per_end = 0;  // line layout only: hidden stations past each end

  double k = 20.0;
  std::vector<double> beta;  // explicit per-station values, else drawn from beta_range
  double beta_lo = -0.02;
  double beta_hi = 0.0;
  double ghost_beta = 0.0;
  double alpha = 0.5;

  std::string wind_regime = "constant";  // constant | rotating | gusty | outward | none
  double wind_speed = 2.0;               // m/s
  double wind_dir = 270.0;               // degrees, meteorological convention
  double rotation_deg_per_hour = 5.0;
  geo::WindConvention convention = geo::WindConvention::from;

  double emission = 0.0;  // mean source rate, concentration units per hour
  double emission_diurnal = 0.8;

  double x0_mean = 60.0;
  double x0_spread = 30.0;
  double noise_frac = 0.05;
  std::size_t steps = 400;
  double tolerance = 1e-8;
  std::uint64_t seed = 1;
  std::string start = "2024-01-01T00:00:00Z";

  static SyntheticSpec from_json(const nlohmann::json& j) {
    SyntheticSpec s;
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("layout", s.layout);
    get("stations", s.stations);
    get("spacing_deg", s.spacing_deg);
    get("lat0", s.lat0);
    get("lon0", s.lon0);
    get("d_theta_km", s.d_theta_km);
    get("ghosts_per_end", s.ghosts_per_end);
    get("k", s.k);
    get("beta", s.beta);
    get("beta_lo", s.beta_lo);
    get("beta_hi", s.beta_hi);
    get("ghost_beta", s.ghost_beta);
    get("alpha", s.alpha);
    get("wind_regime", s.wind_regime);
    get("wind_speed", s.wind_speed);
    get("wind_dir", s.wind_dir);
    get("rotation_deg_per_hour", s.rotation_deg_per_hour);
    if (j.contains("wind_convention")) s.convention = geo::parse_wind_convention(j.at("wind_convention"));
    get("emission", s.emission);
    get("emission_diurnal", s.emission_diurnal);
    get("x0_mean", s.x0_mean);
    get("x0_spread", s.x0_spread);
    get("noise_frac", s.noise_frac);
    get("steps", s.steps);
    get("tolerance", s.tolerance);
    get("seed", s.seed);
    get("start", s.start);
    s.validate();
    return s;
  }

  nlohmann::json to_json() const {
    return {{"layout", layout},
            {"stations", stations},
            {"spacing_deg", spacing_deg},
            {"lat0", lat0},
            {"lon0", lon0},
            {"d_theta_km", d_theta_km},
            {"ghosts_per_end", ghosts_per_end},
            {"k", k},
            {"beta", beta},
            {"beta_lo", beta_lo},
            {"beta_hi", beta_hi},
            {"ghost_beta", ghost_beta},
            {"alpha", alpha},
            {"wind_regime", wind_regime},
            {"wind_speed", wind_speed},
            {"wind_dir", wind_dir},
            {"rotation_deg_per_hour", rotation_deg_per_hour},
            {"wind_convention", convention == geo::WindConvention::from ? "from" : "toward"},
            {"emission", emission},
            {"emission_diurnal", emission_diurnal},
            {"x0_mean", x0_mean},
            {"x0_spread", x0_spread},
            {"noise_frac", noise_frac},
            {"steps", steps},
            {"tolerance", tolerance},
            {"seed", seed},
            {"start", start}};
  }

  void validate() const {
    if (layout != "grid" && layout != "line" && layout != "random")
      throw ConfigError("layout must be grid, line or random");
    if (stations < 2) throw ConfigError("synthetic data needs at least 2 stations");
    if (ghosts_per_end > 0 && layout != "line") throw ConfigError("ghost stations need the line layout");
    if (!(spacing_deg > 0.0)) throw ConfigError("spacing_deg must be positive");
    if (!(k >= 0.0)) throw ConfigError("k must be >= 0");
    if (!beta.empty() && beta.size() != stations) throw ConfigError("beta needs one value per station");
    for (double b : beta)
      if (!(b >= -1.0)) throw ConfigError("true beta must be >= -1");
    if (!(beta_lo >= -1.0) || beta_hi < beta_lo) throw ConfigError("beta range must satisfy -1 <= lo <= hi");
    if (!(ghost_beta >= -1.0)) throw ConfigError("ghost_beta must be >= -1");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
    if (wind_regime != "constant" && wind_regime != "rotating" && wind_regime != "gusty" &&
        wind_regime != "outward" && wind_regime != "none")
      throw ConfigError("wind_regime must be constant, rotating, gusty, outward or none");
    if (wind_speed < 0.0) throw ConfigError("wind_speed must be >= 0");
    if (noise_frac < 0.0) throw ConfigError("noise_frac must be >= 0");
    if (steps < 2) throw ConfigError("steps must be >= 2");
    if (!(tolerance > 0.0)) throw ConfigError("tolerance must be positive");
    parse_iso8601(start);
  }
};

struct SyntheticData {
  Panel panel;               // visible stations only
  geo::StationSet all_stations;  // including ghosts
  std::size_t visible = 0;
  std::vector<double> beta;  // visible stations
  std::vector<double> emission_rate;
  nlohmann::json truth;
};

namespace detail {

inline std::vector<geo::StationMeta> synthetic_layout(const SyntheticSpec& s, nn::Rng& rng) {
  std::vector<geo::StationMeta> out;
  auto name = [](const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%03zu", prefix, i);
    return std::string(buf);
  };
  if (s.layout == "grid") {
    const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(s.stations))));
    for (std::size_t i = 0; i < s.stations; ++i)
      out.push_back({name("S", i), s.lat0 + static_cast<double>(i / side) * s.spacing_deg,
                     s.lon0 + static_cast<double>(i % side) * s.spacing_deg, 0.0});
  } else if (s.layout == "line") {
    for (std::size_t i = 0; i < s.stations; ++i)
      out.push_back({name("S", i), s.lat0, s.lon0 + static_cast<double>(i) * s.spacing_deg, 0.0});
    for (std::size_t g = 1; g <= s.ghosts_per_end; ++g) {
      out.push_back({name("G", 2 * g - 2), s.lat0, s.lon0 - static_cast<double>(g) * s.spacing_deg, 0.0});
      out.push_back({name("G", 2 * g - 1), s.lat0,
                     s.lon0 + static_cast<double>(s.stations - 1 + g) * s.spacing_deg, 0.0});
    }
  } else {
    const double box = std::ceil(std::sqrt(static_cast<double>(s.stations))) * s.spacing_deg;
    while (out.size() < s.stations) {
      const double lat = s.lat0 + rng.uniform(0.0, box), lon = s.lon0 + rng.uniform(0.0, box);
      bool ok = true;
      for (const auto& o : out)
        if (std::hypot(o.lat - lat, o.lon - lon) < 0.3 * s.spacing_deg) ok = false;
      if (ok) out.push_back({name("S", out.size()), lat, lon, 0.0});
    }
  }
  return out;
}

}  // namespace detail

/// Dense transport matrix alpha k D + (1 - alpha) A + diag(beta), so that
/// dX/dt = M X + E(t) reproduces the exact open-system dynamics with a
/// constant gate.
inline Matrix transport_matrix(const geo::DiffusionGraph& dg, const geo::AdvectionGraph& ag, double k, double alpha,
                               const std::vector<double>& beta) {
  const auto n = dg.weights.rows();
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0, out = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      deg += dg.weights(i, j);
      out += ag.weights(i, j);
      m(i, j) = alpha * k * dg.weights(i, j) + (1.0 - alpha) * ag.weights(j, i);
    }
    m(i, i) = -alpha * k * deg - (1.0 - alpha) * out + beta[i];
  }
  return m;
}

/// Wind (speed, direction) for every station over interval `m`.
inline void synthetic_wind(const SyntheticSpec& s, std::size_t m, const std::vector<geo::StationMeta>& all,
                           std::size_t visible, nn::Rng& rng, double& gust_dir, std::vector<double>& speed,
                           std::vector<double>& dir) {
  const auto n = all.size();
  speed.assign(n, 0.0);
  dir.assign(n, 0.0);
  const double hours = static_cast<double>(m) * kStepHours;
  // Direction the air moves toward, converted to the declared convention at the end.
  std::vector<double> heading(n, 0.0);
  if (s.wind_regime == "none") return;
  if (s.wind_regime == "outward") {
    double clat = 0.0, clon = 0.0;
    for (std::size_t i = 0; i < visible; ++i) {
      clat += all[i].lat;
      clon += all[i].lon;
    }
    clat /= static_cast<double>(visible);
    clon /= static_cast<double>(visible);
    for (std::size_t i = 0; i < n; ++i) {
      heading[i] = geo::initial_bearing_deg({clat, clon}, all[i].position());
      speed[i] = s.wind_speed;
    }
  } else {
    double from = s.wind_dir, v = s.wind_speed;
    if (s.wind_regime == "rotating") from = s.wind_dir + s.rotation_deg_per_hour * hours;
    if (s.wind_regime == "gusty") {
      if (m > 0) gust_dir += 20.0 * rng.normal();
      from = gust_dir;
      v = std::max(0.0, s.wind_speed * (1.0 + 0.4 * rng.normal()));
    }
    for (std::size_t i = 0; i < n; ++i) {
      heading[i] = from + 180.0;
      speed[i] = v;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double d = s.convention == geo::WindConvention::from ? heading[i] + 180.0 : heading[i];
    dir[i] = std::fmod(std::fmod(d, 360.0) + 360.0, 360.0);
  }
}

/// Integrates the exact open-system model (constant gate alpha, true k and
/// beta, piecewise-constant wind per 3-hour interval, optional diurnal
/// emission) with dopri5, samples every 3 hours and adds Gaussian noise with
/// sigma = noise_frac x std of the clean pollutant signal.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  nn::Rng rng(spec.seed);
  auto all = detail::synthetic_layout(spec, rng);
  const auto visible = spec.stations;
  const auto n = all.size();
  geo::StationSet all_set(all);

  const double nominal_km = geo::haversine_km({spec.lat0, spec.lon0}, {spec.lat0, spec.lon0 + spec.spacing_deg});
  const double d_theta = spec.d_theta_km > 0.0 ? spec.d_theta_km : 1.2 * nominal_km;
  const auto graph = geo::build_geospatial_graph(all_set, geo::ElevationField::flat(), d_theta, 1200.0);
  const auto dg = geo::build_diffusion_graph(graph);

  std::vector<double> beta(n, spec.ghost_beta);
  for (std::size_t i = 0; i < visible; ++i)
    beta[i] = spec.beta.empty() ? rng.uniform(spec.beta_lo, spec.beta_hi) : spec.beta[i];
  std::vector<double> emission(n, 0.0);
  for (std::size_t i = 0; i < visible; ++i) emission[i] = spec.emission > 0.0 ? spec.emission * rng.uniform(0.5, 1.5) : 0.0;
  std::vector<double> x(n, 0.0);
  for (std::size_t i = 0; i < visible; ++i) x[i] = spec.x0_mean + spec.x0_spread * rng.uniform(-1.0, 1.0);

  const long t0 = parse_iso8601(spec.start);
  std::vector<long> times(spec.steps);
  for (std::size_t m = 0; m < spec.steps; ++m) times[m] = t0 + static_cast<long>(m) * kStepSeconds;
  const double start_hour = static_cast<double>(((t0 % 86400) + 86400) % 86400) / 3600.0;

  std::vector<std::vector<double>> clean(spec.steps), wind_speed(spec.steps), wind_dir(spec.steps);
  double gust_dir = spec.wind_dir;
  clean[0] = x;
  for (std::size_t m = 0; m < spec.steps; ++m) {
    synthetic_wind(spec, m, all, visible, rng, gust_dir, wind_speed[m], wind_dir[m]);
    if (m + 1 == spec.steps) break;
    const auto ag = geo::build_advection_graph(graph, wind_speed[m], wind_dir[m], spec.convention, times[m]);
    const Matrix op = transport_matrix(dg, ag, spec.k, spec.alpha, beta);
    auto rhs = [&](double t, const std::vector<double>& y) {
      std::vector<double> dy = op * std::span<const double>(y);
      if (spec.emission > 0.0) {
        const double hod = std::fmod(start_hour + t, 24.0);
        const double shape = 1.0 + spec.emission_diurnal * std::sin(2.0 * std::numbers::pi * (hod - 7.0) / 24.0);
        for (std::size_t i = 0; i < visible; ++i) dy[i] += emission[i] * shape;
      }
      return dy;
    };
    ode::SolveSpec ss;
    ss.rtol = ss.atol = spec.tolerance;
    ss.max_steps = 100000;
    ss.t0 = static_cast<double>(m) * kStepHours;
    ss.output_times = {ss.t0 + kStepHours};
    try {
      x = ode::solve(rhs, x, ss).states.front();
    } catch (const BlowupError& e) {
      throw BlowupError("synthetic generation diverged near t = " + std::to_string(e.time()) + " h: " + e.what(),
                        e.time());
    }
    clean[m + 1] = x;
  }

  double sum = 0.0, sq = 0.0;
  for (const auto& c : clean)
    for (std::size_t i = 0; i < visible; ++i) sum += c[i];
  const double cells = static_cast<double>(spec.steps * visible);
  const double mean = sum / cells;
  for (const auto& c : clean)
    for (std::size_t i = 0; i < visible; ++i) sq += (c[i] - mean) * (c[i] - mean);
  const double sigma = spec.noise_frac * std::sqrt(sq / cells);

  std::vector<geo::StationMeta> vis(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(visible));
  Panel p = Panel::blank(times, geo::StationSet(vis));
  for (std::size_t m = 0; m < spec.steps; ++m) {
    const double hours = start_hour + static_cast<double>(m) * kStepHours;
    const double diurnal = std::sin(2.0 * std::numbers::pi * (std::fmod(hours, 24.0) - 9.0) / 24.0);
    for (std::size_t i = 0; i < visible; ++i) {
      p.at(m, i, kPm25) = clean[m][i] + (sigma > 0.0 ? sigma * rng.normal() : 0.0);
      p.at(m, i, 1) = 12.0 + 8.0 * diurnal + 0.5 * rng.normal();
      p.at(m, i, 2) = 1013.0 + 4.0 * std::sin(2.0 * std::numbers::pi * hours / 120.0) + 0.3 * rng.normal();
      p.at(m, i, 3) = 55.0 - 15.0 * diurnal + 2.0 * rng.normal();
      p.at(m, i, kWindSpeed) = wind_speed[m][i];
      p.at(m, i, kWindDir) = wind_dir[m][i];
    }
  }

  SyntheticData out;
  out.panel = std::move(p);
  out.all_stations = all_set;
  out.visible = visible;
  out.beta.assign(beta.begin(), beta.begin() + static_cast<std::ptrdiff_t>(visible));
  out.emission_rate.assign(emission.begin(), emission.begin() + static_cast<std::ptrdiff_t>(visible));
  out.truth = {{"k", spec.k},
               {"beta", out.beta},
               {"alpha", spec.alpha},
               {"emission_rate", out.emission_rate},
               {"wind_regime", spec.wind_regime},
               {"noise_sigma", sigma},
               {"d_theta_km", d_theta},
               {"seed", spec.seed},
               {"spec", spec.to_json()}};
  if (spec.ghosts_per_end > 0) {
    auto ghosts = nlohmann::json::array();
    for (std::size_t i = visible; i < n; ++i)
      ghosts.push_back({{"id", all[i].id}, {"lat", all[i].lat}, {"lon", all[i].lon}, {"beta", beta[i]}});
    out.truth["ghosts"] = ghosts;
  }
  return out;
}

}  // namespace airdual::pipeline
