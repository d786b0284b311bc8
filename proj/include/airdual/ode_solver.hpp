#pragma once

// Initial value problem integration: adaptive Dormand-Prince 5(4) with dense
// output for inference, fixed-step classical RK4 for the differentiable path.

#include <algorithm>
#include <cmath>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "airdual/errors.hpp"

namespace airdual::ode {

using State = std::vector<double>;

enum class Method { dopri5, rk4 };

struct SolveSpec {
  Method method = Method::dopri5;
  double rtol = 1e-3;
  double atol = 1e-3;
  /// Time at which y0 is given.
  double t0 = 0.0;
  std::vector<double> output_times;
  int max_steps = 10'000;
  double fixed_dt = 1.5;
};

struct Trajectory {
  std::vector<double> times;
  std::vector<State> states;
};

/// y + h * k for plain vectors. The RK4 template finds other overloads by ADL.
inline State add_scaled(const State& y, double h, const State& k) {
  State out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] + h * k[i];
  return out;
}

namespace detail {

inline bool all_finite(const State& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline double rms(const State& v, const State& scale) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double r = v[i] / scale[i];
    s += r * r;
  }
  return std::sqrt(s / static_cast<double>(v.size()));
}

inline std::string at_time(double t) {
  std::ostringstream os;
  os << " at t = " << t;
  return os.str();
}

template <class F>
State eval_checked(F& f, double t, const State& y) {
  State d = f(t, y);
  if (d.size() != y.size()) throw ShapeError("rhs output size differs from state size");
  if (!all_finite(d)) throw BlowupError("non-finite value in rhs output" + at_time(t), t);
  return d;
}

/// Number of fixed steps covering `span`; throws when dt does not divide it.
inline int fixed_step_count(double span, double dt) {
  const double ratio = span / dt;
  const double n = std::round(ratio);
  if (n < 1.0 || std::abs(n * dt - span) > 1e-9 * std::max(1.0, std::abs(span)))
    throw ConfigError("fixed_dt does not divide the output interval");
  return static_cast<int>(n);
}

}  // namespace detail

inline void validate(const SolveSpec& spec) {
  if (!(spec.rtol > 0.0) || !(spec.atol > 0.0)) throw ConfigError("rtol and atol must be positive");
  if (spec.max_steps <= 0) throw ConfigError("max_steps must be positive");
  if (spec.output_times.empty()) throw ConfigError("no output times requested");
  if (spec.output_times.front() < spec.t0) throw ConfigError("output times precede t0");
  for (std::size_t i = 1; i < spec.output_times.size(); ++i)
    if (!(spec.output_times[i] > spec.output_times[i - 1]))
      throw ConfigError("output times must be strictly increasing");
  if (spec.method == Method::rk4) {
    if (!(spec.fixed_dt > 0.0)) throw ConfigError("fixed_dt must be positive");
    double prev = spec.t0;
    for (double t : spec.output_times) {
      if (t > prev) detail::fixed_step_count(t - prev, spec.fixed_dt);
      prev = t;
    }
  }
}

/// Starting step from the usual norm-ratio heuristic (Hairer, Norsett & Wanner).
/// Falls back to span/100 when the derivative vanishes.
template <class F>
double estimate_initial_step(F&& rhs, double t0, const State& y0, double rtol, double atol,
                             double span) {
  const State f0 = detail::eval_checked(rhs, t0, y0);
  State scale(y0.size());
  for (std::size_t i = 0; i < y0.size(); ++i) scale[i] = atol + rtol * std::abs(y0[i]);
  const double d0 = detail::rms(y0, scale);
  const double d1 = detail::rms(f0, scale);
  if (d1 == 0.0) return span / 100.0;
  double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
  h0 = std::min(h0, span);
  const State y1 = add_scaled(y0, h0, f0);
  const State f1 = detail::eval_checked(rhs, t0 + h0, y1);
  State df(y0.size());
  for (std::size_t i = 0; i < df.size(); ++i) df[i] = f1[i] - f0[i];
  const double d2 = detail::rms(df, scale) / h0;
  const double dmax = std::max(d1, d2);
  const double h1 = dmax <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dmax, 1.0 / 5.0);
  return std::min({100.0 * h0, h1, span});
}

/// Classical RK4 with fixed step `dt`, reporting the state at each of `times`.
/// Works for any state type with an `add_scaled(y, h, k)` overload.
template <class S, class F>
std::vector<S> integrate_rk4(F&& f, S y, double t0, std::span<const double> times, double dt) {
  std::vector<S> out;
  out.reserve(times.size());
  double t = t0;
  for (double target : times) {
    if (target > t) {
      const int n = detail::fixed_step_count(target - t, dt);
      const double h = (target - t) / n;
      for (int s = 0; s < n; ++s) {
        const double ts = t + s * h;
        const S k1 = f(ts, y);
        const S k2 = f(ts + 0.5 * h, add_scaled(y, 0.5 * h, k1));
        const S k3 = f(ts + 0.5 * h, add_scaled(y, 0.5 * h, k2));
        const S k4 = f(ts + h, add_scaled(y, h, k3));
        y = add_scaled(add_scaled(add_scaled(add_scaled(y, h / 6.0, k1), h / 3.0, k2), h / 3.0, k3),
                       h / 6.0, k4);
      }
      t = target;
    }
    out.push_back(y);
  }
  return out;
}

namespace dp {
inline constexpr double c2 = 0.2, c3 = 0.3, c4 = 0.8, c5 = 8.0 / 9.0;
inline constexpr double a21 = 0.2;
inline constexpr double a31 = 3.0 / 40.0, a32 = 9.0 / 40.0;
inline constexpr double a41 = 44.0 / 45.0, a42 = -56.0 / 15.0, a43 = 32.0 / 9.0;
inline constexpr double a51 = 19372.0 / 6561.0, a52 = -25360.0 / 2187.0, a53 = 64448.0 / 6561.0,
                        a54 = -212.0 / 729.0;
inline constexpr double a61 = 9017.0 / 3168.0, a62 = -355.0 / 33.0, a63 = 46732.0 / 5247.0,
                        a64 = 49.0 / 176.0, a65 = -5103.0 / 18656.0;
inline constexpr double a71 = 35.0 / 384.0, a73 = 500.0 / 1113.0, a74 = 125.0 / 192.0,
                        a75 = -2187.0 / 6784.0, a76 = 11.0 / 84.0;
// 5th minus 4th order weights
inline constexpr double e1 = 71.0 / 57600.0, e3 = -71.0 / 16695.0, e4 = 71.0 / 1920.0,
                        e5 = -17253.0 / 339200.0, e6 = 22.0 / 525.0, e7 = -1.0 / 40.0;
// dense output
inline constexpr double d1 = -12715105075.0 / 11282082432.0, d3 = 87487479700.0 / 32700410799.0,
                        d4 = -10690763975.0 / 1880347072.0, d5 = 701980252875.0 / 199316789632.0,
                        d6 = -1453857185.0 / 822651844.0, d7 = 69997945.0 / 29380423.0;
inline constexpr double safe = 0.9, facl = 0.2, facr = 10.0, beta = 0.04;
}  // namespace dp

template <class F>
Trajectory solve_dopri5(F&& f, const State& y0, const SolveSpec& spec) {
  using namespace dp;
  const auto& outs = spec.output_times;
  const double t_end = outs.back();
  const std::size_t n = y0.size();
  if (!detail::all_finite(y0)) throw BlowupError("non-finite initial state", spec.t0);

  Trajectory traj;
  std::size_t next = 0;
  while (next < outs.size() && outs[next] == spec.t0) {
    traj.times.push_back(outs[next]);
    traj.states.push_back(y0);
    ++next;
  }
  if (next == outs.size()) return traj;

  double t = spec.t0;
  State y = y0;
  State k1 = detail::eval_checked(f, t, y);
  double h = estimate_initial_step(f, t, y, spec.rtol, spec.atol, t_end - t);
  double facold = 1e-4;
  bool rejected_last = false;
  int steps = 0;
  State tmp(n), ynew(n), err(n), scale(n);

  auto stage = [&](double ts, auto&& combine) {
    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + h * combine(i);
    return detail::eval_checked(f, ts, tmp);
  };

  while (next < outs.size()) {
    if (steps >= spec.max_steps)
      throw StiffnessError("dopri5 exceeded max_steps" + detail::at_time(t), t);
    ++steps;
    if (t + h > t_end || t + 1.01 * h >= t_end) h = t_end - t;
    if (h <= 1e-14 * std::max(1.0, std::abs(t)))
      throw StiffnessError("dopri5 step size underflow" + detail::at_time(t), t);

    const State k2 = stage(t + c2 * h, [&](std::size_t i) { return a21 * k1[i]; });
    const State k3 = stage(t + c3 * h, [&](std::size_t i) { return a31 * k1[i] + a32 * k2[i]; });
    const State k4 = stage(t + c4 * h,
                           [&](std::size_t i) { return a41 * k1[i] + a42 * k2[i] + a43 * k3[i]; });
    const State k5 = stage(t + c5 * h, [&](std::size_t i) {
      return a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i];
    });
    const State k6 = stage(t + h, [&](std::size_t i) {
      return a61 * k1[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] + a65 * k5[i];
    });
    for (std::size_t i = 0; i < n; ++i)
      ynew[i] = y[i] + h * (a71 * k1[i] + a73 * k3[i] + a74 * k4[i] + a75 * k5[i] + a76 * k6[i]);
    if (!detail::all_finite(ynew)) throw BlowupError("non-finite state" + detail::at_time(t + h), t + h);
    const State k7 = detail::eval_checked(f, t + h, ynew);

    for (std::size_t i = 0; i < n; ++i) {
      err[i] = h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] + e6 * k6[i] + e7 * k7[i]);
      scale[i] = spec.atol + spec.rtol * std::max(std::abs(y[i]), std::abs(ynew[i]));
    }
    const double e = detail::rms(err, scale);
    const double fac11 = std::pow(e, 0.2 - beta * 0.75);

    if (e > 1.0) {
      h /= std::min(1.0 / facl, fac11 / safe);
      rejected_last = true;
      continue;
    }

    double fac = fac11 / std::pow(facold, beta);
    fac = std::max(1.0 / facr, std::min(1.0 / facl, fac / safe));
    double h_new = h / fac;
    if (rejected_last) h_new = std::min(h_new, h);
    rejected_last = false;
    facold = std::max(e, 1e-4);

    const double t_new = t + h;
    // Hairer's continuous extension of order 4 over [t, t_new].
    while (next < outs.size() && outs[next] <= t_new) {
      State yo(n);
      if (outs[next] == t_new) {
        yo = ynew;
      } else {
        const double theta = (outs[next] - t) / h, theta1 = 1.0 - theta;
        for (std::size_t i = 0; i < n; ++i) {
          const double ydiff = ynew[i] - y[i];
          const double bspl = h * k1[i] - ydiff;
          const double r4 = ydiff - h * k7[i] - bspl;
          const double r5 =
              h * (d1 * k1[i] + d3 * k3[i] + d4 * k4[i] + d5 * k5[i] + d6 * k6[i] + d7 * k7[i]);
          yo[i] = y[i] + theta * (ydiff + theta1 * (bspl + theta * (r4 + theta1 * r5)));
        }
      }
      traj.times.push_back(outs[next]);
      traj.states.push_back(std::move(yo));
      ++next;
    }

    t = t_new;
    y = ynew;
    k1 = k7;
    h = h_new;
  }
  return traj;
}

/// Integrates `rhs(t, y) -> dy/dt` from (spec.t0, y0) and reports the state at
/// every requested output time.
template <class F>
Trajectory solve(F&& rhs, const State& y0, const SolveSpec& spec) {
  validate(spec);
  if (spec.method == Method::dopri5) return solve_dopri5(rhs, y0, spec);
  auto checked = [&rhs](double t, const State& y) { return detail::eval_checked(rhs, t, y); };
  Trajectory traj;
  traj.times = spec.output_times;
  traj.states = integrate_rk4(checked, y0, spec.t0, spec.output_times, spec.fixed_dt);
  for (std::size_t i = 0; i < traj.states.size(); ++i)
    if (!detail::all_finite(traj.states[i]))
      throw BlowupError("non-finite state" + detail::at_time(traj.times[i]), traj.times[i]);
  return traj;
}

}  // namespace airdual::ode
