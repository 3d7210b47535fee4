#pragma once

// KA -> temperature ("decoding focus"). Higher KA means a sharper focus.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>

#include "dfd/error.hpp"
#include "dfd/ka.hpp"

namespace dfd {

enum class TransformKind { Fixed, Linear, Sigmoid, Exponential };

inline std::string to_string(TransformKind k) {
  switch (k) {
    case TransformKind::Fixed: return "fixed";
    case TransformKind::Linear: return "linear";
    case TransformKind::Sigmoid: return "sigmoid";
    case TransformKind::Exponential: return "exponential";
  }
  return "?";
}

inline TransformKind parse_transform(const std::string& s) {
  if (s == "fixed") return TransformKind::Fixed;
  if (s == "linear") return TransformKind::Linear;
  if (s == "sigmoid") return TransformKind::Sigmoid;
  if (s == "exponential") return TransformKind::Exponential;
  throw Error(ErrorKind::InvalidArgument, "unknown transform '" + s + "'");
}

struct FocusConfig {
  TransformKind transform = TransformKind::Exponential;
  double sigma = 1.0;
  double t0 = 1.0;
  double t_min = 0.05;
  double t_max = 2.5;
  LayerSet layer_set = LayerSet::all();
  double alpha = kDefaultAlpha;
  KlMode kl_mode = KlMode::LiteralClamped;
  double q_floor = kDefaultQFloor;

  KAOptions ka_options() const { return {alpha, layer_set, kl_mode, q_floor}; }

  void validate() const {
    require(t_min > 0.0 && t_min <= t_max, ErrorKind::InvalidArgument,
            "temperature clamps need 0 < t_min <= t_max");
    require(t0 > 0.0 && std::isfinite(t0), ErrorKind::InvalidArgument, "t0 must be positive");
    require(alpha > 0.0 && alpha <= 1.0, ErrorKind::InvalidArgument, "alpha must lie in (0, 1]");
    require(q_floor > 0.0, ErrorKind::InvalidArgument, "q_floor must be positive");
    require(std::isfinite(sigma), ErrorKind::InvalidArgument, "sigma must be finite");
    switch (transform) {
      case TransformKind::Fixed: break;
      case TransformKind::Linear:
        require(sigma != 0.0, ErrorKind::InvalidArgument, "linear transform needs sigma != 0");
        break;
      case TransformKind::Sigmoid:
      case TransformKind::Exponential:
        require(sigma > 0.0, ErrorKind::InvalidArgument, "sigma must be positive");
        break;
    }
  }
};

inline double clamp_temperature(double t, double t_min, double t_max) {
  return std::clamp(t, t_min, t_max);
}

// Unclamped transform values.

inline double linear_focus(double ka, double sigma, double t0) { return sigma * ka + t0; }

inline double sigmoid_focus(double ka, double sigma, double t0) {
  const double e = std::exp(ka / sigma);
  if (!std::isfinite(e)) return t0;
  return sigma / (sigma + e) + t0;
}

/// T0 * 2^(-ka / sigma); sigma is the half-life in KA units.
inline double exponential_focus(double ka, double sigma, double t0) {
  return t0 * std::exp2(-ka / sigma);
}

inline double transform_linear(double ka, double sigma, double t0, double t_min = 0.05,
                               double t_max = 2.5) {
  return clamp_temperature(linear_focus(ka, sigma, t0), t_min, t_max);
}

inline double transform_sigmoid(double ka, double sigma, double t0, double t_min = 0.05,
                                double t_max = 2.5) {
  return clamp_temperature(sigmoid_focus(ka, sigma, t0), t_min, t_max);
}

inline double transform_exponential(double ka, double sigma, double t0, double t_min = 0.05,
                                    double t_max = 2.5) {
  return clamp_temperature(exponential_focus(ka, sigma, t0), t_min, t_max);
}

inline double apply_focus(double ka, const FocusConfig& cfg) {
  require(ka >= 0.0 && std::isfinite(ka), ErrorKind::InvalidArgument, "KA must be finite and >= 0");
  switch (cfg.transform) {
    case TransformKind::Fixed: return clamp_temperature(cfg.t0, cfg.t_min, cfg.t_max);
    case TransformKind::Linear: return transform_linear(ka, cfg.sigma, cfg.t0, cfg.t_min, cfg.t_max);
    case TransformKind::Sigmoid: return transform_sigmoid(ka, cfg.sigma, cfg.t0, cfg.t_min, cfg.t_max);
    case TransformKind::Exponential:
      return transform_exponential(ka, cfg.sigma, cfg.t0, cfg.t_min, cfg.t_max);
  }
  return cfg.t0;
}

/// T0 that maps mean(ka_samples) to exactly 1.0 under the unclamped transform.
inline double calibrate_t0(std::span<const double> ka_samples, double sigma, TransformKind transform) {
  require(!ka_samples.empty(), ErrorKind::Calibration, "calibration needs at least one KA sample");
  const double mean =
      std::accumulate(ka_samples.begin(), ka_samples.end(), 0.0) / static_cast<double>(ka_samples.size());
  double t0 = 1.0;
  switch (transform) {
    case TransformKind::Fixed: t0 = 1.0; break;
    case TransformKind::Linear: t0 = 1.0 - sigma * mean; break;
    case TransformKind::Sigmoid: {
      const double e = std::exp(mean / sigma);
      t0 = std::isfinite(e) ? 1.0 - sigma / (sigma + e) : 1.0;
      break;
    }
    case TransformKind::Exponential: t0 = std::exp2(mean / sigma); break;
  }
  require(t0 > 0.0 && std::isfinite(t0), ErrorKind::Calibration,
          "calibrated T0 is not a positive finite temperature");
  return t0;
}

}  // namespace dfd
