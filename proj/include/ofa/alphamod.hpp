#pragma once

// Lambda-controlled alpha modification.
//
//   lambda in [0, 1):  alpha'_i = lambda * alpha_i + (1 - lambda)
//   lambda in [1, 2):  alpha'_i = (2 - lambda) * alpha_i / min((2 - lambda) * sum(alpha), 1)
//
// lambda = 0 fires every frame, lambda = 1 leaves alpha untouched and
// lambda -> 2 keeps exactly one fire per utterance. Both branches keep every
// weight inside [0, 1].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "ofa/cif.hpp"
#include "ofa/diffmath.hpp"
#include "ofa/error.hpp"
#include "ofa/rng.hpp"

namespace ofa {

inline constexpr double kLambdaLimit = 2.0;
// Upper end used for the half-open [0, 2) regime.
inline constexpr double kLambdaOpenEps = 1e-6;

inline void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda < kLambdaLimit))
    throw Error(ErrorCode::invalid_argument, "lambda " + std::to_string(lambda) + " outside [0, 2)");
}

namespace detail {

inline double mass(std::span<const double> alpha) {
  double s = 0.0;
  for (double a : alpha) s += a;
  return s;
}

}  // namespace detail

inline AlphaWeights modify_alpha(std::span<const double> alpha, double lambda) {
  check_lambda(lambda);
  AlphaWeights out(alpha.begin(), alpha.end());
  if (lambda < 1.0) {
    // Written as 1 - lambda * (1 - alpha) so the result cannot round above 1.
    for (double& a : out) a = 1.0 - lambda * (1.0 - a);
    return out;
  }
  const double total = detail::mass(alpha);
  // Below unit mass the utterance already produces a single frame; down-scaling
  // further cannot reduce the count, so alpha passes through unchanged.
  if (total < 1.0) return out;
  const double s = kLambdaLimit - lambda;
  const double scaled_total = s * total;
  const double denom = scaled_total < 1.0 ? scaled_total : 1.0;
  for (double& a : out) a = (s * a) / denom;
  return out;
}

namespace ad {

// Differentiable counterpart; alpha is T x 1, lambda is 1 x 1. Produces the
// same values as ofa::modify_alpha bit for bit.
inline Var modify_alpha(Var alpha, Var lambda) {
  const double lv = lambda.scalar();
  check_lambda(lv);
  if (lv < 1.0) {
    Var one_minus = affine(alpha, -1.0, 1.0);
    return affine(scale_by(one_minus, lambda), -1.0, 1.0);
  }
  Var total = sum(alpha);
  if (total.scalar() < 1.0) return alpha;
  Var s = affine(lambda, -1.0, kLambdaLimit);
  Var denom = min_with(scale_by(total, s), 1.0);
  return divide_by(scale_by(alpha, s), denom);
}

inline Var lambda_from_theta(Var theta, double lambda_max) { return scale(sigmoid(theta), lambda_max); }

}  // namespace ad

// Inclusive sampling range for lambda during pre-training.
struct SampleRange {
  double low = 0.0;
  double high = 1.0;

  static SampleRange unit() { return {0.0, 1.0}; }
  static SampleRange one_and_half() { return {0.0, 1.5}; }
  static SampleRange full() { return {0.0, kLambdaLimit - kLambdaOpenEps}; }
  static SampleRange fixed(double lambda) { return {lambda, lambda}; }

  bool contains(double lambda) const { return lambda >= low && lambda <= high; }

  void validate() const {
    if (!(low >= 0.0 && low <= high && high < kLambdaLimit))
      throw Error(ErrorCode::invalid_argument,
                  "sample range [" + std::to_string(low) + ", " + std::to_string(high) + "] must satisfy 0 <= low <= high < 2");
  }

  // "low:high"; a high bound of 2 means the half-open [low, 2) regime.
  static SampleRange parse(std::string_view text) {
    const auto colon = text.find(':');
    if (colon == std::string_view::npos)
      throw Error(ErrorCode::config, "range must be low:high, got '" + std::string(text) + "'");
    SampleRange r;
    try {
      r.low = std::stod(std::string(text.substr(0, colon)));
      r.high = std::stod(std::string(text.substr(colon + 1)));
    } catch (const std::exception&) {
      throw Error(ErrorCode::config, "range must be low:high, got '" + std::string(text) + "'");
    }
    if (r.high == kLambdaLimit) r.high = kLambdaLimit - kLambdaOpenEps;
    try {
      r.validate();
    } catch (const Error& e) {
      throw Error(ErrorCode::config, e.what());
    }
    return r;
  }

  friend bool operator==(const SampleRange&, const SampleRange&) = default;
};

// Uniform on [low, high); degenerate ranges return low.
inline double sample_lambda(Rng& rng, const SampleRange& range) {
  const double u = rng.uniform();
  return range.low + (range.high - range.low) * u;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double lambda_from_theta(double theta, double lambda_max) {
  if (!(lambda_max > 0.0 && lambda_max <= kLambdaLimit))
    throw Error(ErrorCode::invalid_argument, "lambda_max must lie in (0, 2]");
  return lambda_max * sigmoid(theta);
}

// Inverse of lambda_from_theta for lambda strictly inside (0, lambda_max).
inline double theta_from_lambda(double lambda, double lambda_max) {
  const double p = lambda / lambda_max;
  return std::log(p / (1.0 - p));
}

enum class LambdaMode { fixed, sampled, trainable };

// Current lambda plus how it is produced.
class LambdaControl {
 public:
  static LambdaControl fixed(double lambda) {
    check_lambda(lambda);
    return LambdaControl(LambdaMode::fixed, lambda, lambda, 0.0);
  }

  static LambdaControl sampled(const SampleRange& range) {
    range.validate();
    return LambdaControl(LambdaMode::sampled, range.low, range.high, 0.0);
  }

  // lambda_max = 2 is mapped onto the open interval bound so lambda stays < 2.
  static LambdaControl trainable(double theta, double lambda_max) {
    if (!(lambda_max > 0.0 && lambda_max <= kLambdaLimit))
      throw Error(ErrorCode::invalid_argument, "lambda_max must lie in (0, 2]");
    const double cap = std::min(lambda_max, kLambdaLimit - kLambdaOpenEps);
    return LambdaControl(LambdaMode::trainable, lambda_from_theta(theta, cap), cap, theta);
  }

  LambdaMode mode() const noexcept { return mode_; }
  double value() const noexcept { return value_; }
  double lambda_max() const noexcept { return lambda_max_; }
  double theta() const noexcept { return theta_; }

  // Draw a fresh value (sampled mode only).
  double resample(Rng& rng, const SampleRange& range) {
    if (mode_ != LambdaMode::sampled) throw Error(ErrorCode::invalid_argument, "resample() needs sampled mode");
    value_ = sample_lambda(rng, range);
    return value_;
  }

  void set_theta(double theta) {
    if (mode_ != LambdaMode::trainable) throw Error(ErrorCode::invalid_argument, "set_theta() needs trainable mode");
    theta_ = theta;
    value_ = lambda_from_theta(theta, lambda_max_);
  }

 private:
  LambdaControl(LambdaMode mode, double value, double lambda_max, double theta)
      : mode_(mode), value_(value), lambda_max_(lambda_max), theta_(theta) {}

  LambdaMode mode_;
  double value_;
  double lambda_max_;
  double theta_;
};

}  // namespace ofa
