// Prior families shared by the models.
#pragma once

#include <cmath>
#include <numbers>
#include <string>

#include "nmaborrow/core.hpp"

namespace nmaborrow {

inline constexpr double kNonInformativeVariance = 10000.0;

inline double log_normal_pdf(double x, double mean, double variance) {
  const double r = x - mean;
  return -0.5 * std::log(2.0 * std::numbers::pi * variance) - 0.5 * r * r / variance;
}

/// Normal prior; variance 0 is a point mass.
struct NormalPrior {
  double mean = 0.0;
  double variance = kNonInformativeVariance;

  bool degenerate() const { return variance == 0.0; }
  double log_density(double x) const { return log_normal_pdf(x, mean, variance); }
};

/// Half-normal prior on a standard deviation.
struct TauPrior {
  double scale = 1.0;

  double log_density(double tau) const {
    if (!(tau > 0.0)) return -INFINITY;
    return std::log(2.0) + log_normal_pdf(tau, 0.0, scale * scale);
  }
};

/// Prior for a study's variance-inflation weight w in (0, 1].
struct ScalePrior {
  enum class Kind { fixed, beta, uniform };
  Kind kind = Kind::fixed;
  double a = 1.0;  // fixed: value; beta: shape a; uniform: lo
  double b = 0.0;  // beta: shape b; uniform: hi

  static ScalePrior fixed(double v) {
    if (!(v > 0.0 && v <= 1.0)) throw Error("fixed weight must lie in (0, 1]");
    return {Kind::fixed, v, 0.0};
  }
  static ScalePrior beta(double a, double b) {
    if (!(a > 0.0 && b > 0.0)) throw Error("Beta prior needs a, b > 0");
    return {Kind::beta, a, b};
  }
  static ScalePrior uniform(double lo, double hi) {
    if (!(lo > 0.0 && lo < hi && hi <= 1.0)) throw Error("Uniform weight prior needs 0 < lo < hi <= 1");
    return {Kind::uniform, lo, hi};
  }

  bool is_fixed() const { return kind == Kind::fixed; }

  double mean() const {
    switch (kind) {
      case Kind::fixed: return a;
      case Kind::beta: return a / (a + b);
      case Kind::uniform: return 0.5 * (a + b);
    }
    return a;
  }

  double lower() const { return kind == Kind::uniform ? a : 0.0; }
  double upper() const { return kind == Kind::uniform ? b : 1.0; }

  double log_density(double w) const {
    switch (kind) {
      case Kind::fixed: return w == a ? 0.0 : -INFINITY;
      case Kind::beta:
        if (!(w > 0.0 && w < 1.0)) return -INFINITY;
        return (a - 1.0) * std::log(w) + (b - 1.0) * std::log1p(-w) + std::lgamma(a + b) - std::lgamma(a) -
               std::lgamma(b);
      case Kind::uniform: return (w > a && w < b) ? -std::log(b - a) : -INFINITY;
    }
    return -INFINITY;
  }

  std::string describe() const {
    auto num = [](double v) {
      std::string s = std::to_string(v);
      s.erase(s.find_last_not_of('0') + 1);
      if (!s.empty() && s.back() == '.') s.pop_back();
      return s;
    };
    switch (kind) {
      case Kind::fixed: return "fixed(" + num(a) + ")";
      case Kind::beta: return "beta(" + num(a) + "," + num(b) + ")";
      case Kind::uniform: return "uniform(" + num(a) + "," + num(b) + ")";
    }
    return {};
  }

  bool operator==(const ScalePrior&) const = default;
};

}  // namespace nmaborrow
