#pragma once

// Forecast error metrics and the sudden-change rule.

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "airdual/errors.hpp"

namespace airdual::metrics {

inline constexpr double kSuddenLevel = 75.0;
inline constexpr double kSuddenJump = 20.0;

namespace detail {
inline void check(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("metric inputs differ in length");
  if (x.empty()) throw DegenerateInputError("metric over zero elements");
}
}  // namespace detail

inline double mae(std::span<const double> x, std::span<const double> y) {
  detail::check(x, y);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(x[i] - y[i]);
  return s / static_cast<double>(x.size());
}

inline double rmse(std::span<const double> x, std::span<const double> y) {
  detail::check(x, y);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return std::sqrt(s / static_cast<double>(x.size()));
}

/// Terms with x = y = 0 contribute 0.
inline double smape(std::span<const double> x, std::span<const double> y) {
  detail::check(x, y);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double den = (std::abs(x[i]) + std::abs(y[i])) / 2.0;
    if (den > 0.0) s += std::abs(x[i] - y[i]) / den;
  }
  return s / static_cast<double>(x.size());
}

/// Flag at step t when x_t > 75 and the next step moves by more than 20.
/// The last step has no successor and is never flagged.
inline std::vector<bool> label_sudden_changes(std::span<const double> series) {
  std::vector<bool> out(series.size(), false);
  for (std::size_t t = 0; t + 1 < series.size(); ++t)
    out[t] = series[t] > kSuddenLevel && std::abs(series[t + 1] - series[t]) > kSuddenJump;
  return out;
}

struct Scores {
  double mae = 0.0;
  double rmse = 0.0;
  double smape = 0.0;
  std::size_t count = 0;

  static Scores of(std::span<const double> truth, std::span<const double> pred) {
    return {metrics::mae(truth, pred), metrics::rmse(truth, pred), metrics::smape(truth, pred), truth.size()};
  }
};

inline nlohmann::json to_json(const Scores& s) {
  return {{"mae", s.mae}, {"rmse", s.rmse}, {"smape", s.smape}, {"count", s.count}};
}

inline Scores scores_from_json(const nlohmann::json& j) {
  return {j.at("mae").get<double>(), j.at("rmse").get<double>(), j.at("smape").get<double>(),
          j.at("count").get<std::size_t>()};
}

struct EvalReport {
  Scores overall;
  std::optional<Scores> sudden_change;
  std::vector<Scores> per_horizon;
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["overall"] = to_json(r.overall);
  j["sudden_change"] = r.sudden_change ? to_json(*r.sudden_change) : nlohmann::json(nullptr);
  j["per_horizon"] = nlohmann::json::array();
  for (const auto& s : r.per_horizon) j["per_horizon"].push_back(to_json(s));
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.overall = scores_from_json(j.at("overall"));
  if (!j.at("sudden_change").is_null()) r.sudden_change = scores_from_json(j.at("sudden_change"));
  for (const auto& s : j.at("per_horizon")) r.per_horizon.push_back(scores_from_json(s));
  return r;
}

/// Accumulates (truth, prediction) pairs per horizon step and for flagged cells.
class ReportBuilder {
 public:
  explicit ReportBuilder(std::size_t horizon) : truth_(horizon), pred_(horizon) {}

  /// `truth` and `pred` are horizon x N in row-major order for one window.
  void add_window(std::span<const double> truth, std::span<const double> pred, std::size_t stations) {
    const auto h = truth_.size();
    if (truth.size() != h * stations || pred.size() != h * stations) throw ShapeError("report: window shape");
    for (std::size_t i = 0; i < stations; ++i) {
      std::vector<double> series(h);
      for (std::size_t t = 0; t < h; ++t) series[t] = truth[t * stations + i];
      const auto flags = label_sudden_changes(series);
      for (std::size_t t = 0; t < h; ++t) {
        truth_[t].push_back(truth[t * stations + i]);
        pred_[t].push_back(pred[t * stations + i]);
        if (flags[t]) {
          sudden_truth_.push_back(truth[t * stations + i]);
          sudden_pred_.push_back(pred[t * stations + i]);
        }
      }
    }
  }

  EvalReport build() const {
    EvalReport r;
    std::vector<double> all_t, all_p;
    for (std::size_t t = 0; t < truth_.size(); ++t) {
      r.per_horizon.push_back(Scores::of(truth_[t], pred_[t]));
      all_t.insert(all_t.end(), truth_[t].begin(), truth_[t].end());
      all_p.insert(all_p.end(), pred_[t].begin(), pred_[t].end());
    }
    r.overall = Scores::of(all_t, all_p);
    if (!sudden_truth_.empty()) r.sudden_change = Scores::of(sudden_truth_, sudden_pred_);
    return r;
  }

 private:
  std::vector<std::vector<double>> truth_, pred_;
  std::vector<double> sudden_truth_, sudden_pred_;
};

}  // namespace airdual::metrics
