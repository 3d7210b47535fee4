#pragma once

// Knowledge-awareness (KA) signal: how far each internal layer's logit-lens
// distribution sits from the output distribution, measured on the plausible
// head of the output distribution and averaged over a layer subset.

#include <cstddef>
#include <string>
#include <vector>

#include "dfd/dist.hpp"
#include "dfd/error.hpp"
#include "dfd/provider.hpp"

namespace dfd {

inline constexpr double kDefaultAlpha = 0.1;

/// Internal-layer subset (layers 1..N-1) that KA is averaged over.
class LayerSet {
 public:
  enum class Kind { All, Low, High, Range };

  static LayerSet all() { return LayerSet(Kind::All, 0, 0); }
  /// Layers 1..floor((N-1)/2).
  static LayerSet low() { return LayerSet(Kind::Low, 0, 0); }
  /// Layers floor((N-1)/2)+1..N-1.
  static LayerSet high() { return LayerSet(Kind::High, 0, 0); }
  /// Layers lo..hi inclusive, 1-based.
  static LayerSet range(std::size_t lo, std::size_t hi) { return LayerSet(Kind::Range, lo, hi); }

  Kind kind() const { return kind_; }
  std::size_t lo() const { return lo_; }
  std::size_t hi() const { return hi_; }

  /// Selected 1-based layer numbers given `internal` = N-1 internal layers.
  std::vector<std::size_t> select(std::size_t internal) const {
    std::size_t first = 1;
    std::size_t last = internal;
    switch (kind_) {
      case Kind::All: break;
      case Kind::Low: last = internal / 2; break;
      case Kind::High: first = internal / 2 + 1; break;
      case Kind::Range:
        first = lo_;
        last = std::min(hi_, internal);
        break;
    }
    std::vector<std::size_t> out;
    for (std::size_t i = std::max<std::size_t>(first, 1); i <= last; ++i) out.push_back(i);
    require(!out.empty(), ErrorKind::InvalidArgument,
            "layer selection " + to_string() + " is empty for " + std::to_string(internal) +
                " internal layers");
    return out;
  }

  std::string to_string() const {
    switch (kind_) {
      case Kind::All: return "all";
      case Kind::Low: return "low";
      case Kind::High: return "high";
      case Kind::Range: return std::to_string(lo_) + ".." + std::to_string(hi_);
    }
    return "?";
  }

  /// Parses "all", "low", "high" or "LO..HI".
  static LayerSet parse(const std::string& text) {
    if (text == "all") return all();
    if (text == "low") return low();
    if (text == "high") return high();
    const auto dots = text.find("..");
    if (dots != std::string::npos) {
      try {
        std::size_t used_lo = 0, used_hi = 0;
        const std::string a = text.substr(0, dots);
        const std::string b = text.substr(dots + 2);
        const auto lo = std::stoul(a, &used_lo);
        const auto hi = std::stoul(b, &used_hi);
        if (used_lo == a.size() && used_hi == b.size() && lo >= 1 && lo <= hi) return range(lo, hi);
      } catch (const std::exception&) {
      }
    }
    throw Error(ErrorKind::InvalidArgument, "bad layer set '" + text + "'");
  }

  friend bool operator==(const LayerSet&, const LayerSet&) = default;

 private:
  LayerSet(Kind k, std::size_t lo, std::size_t hi) : kind_(k), lo_(lo), hi_(hi) {}

  Kind kind_;
  std::size_t lo_;
  std::size_t hi_;
};

struct KASignal {
  TokenSet support;
  /// Entry i-1 compares layer i against layer N.
  std::vector<double> per_layer_kl;
  double ka = 0.0;
};

/// {x : p(x) >= alpha * max p}. Always contains the argmax.
inline TokenSet head_support(std::span<const double> final_dist, double alpha) {
  require(alpha > 0.0 && alpha <= 1.0, ErrorKind::InvalidArgument, "alpha must lie in (0, 1]");
  require(!final_dist.empty(), ErrorKind::InvalidArgument, "empty distribution");
  double peak = 0.0;
  for (double p : final_dist) peak = std::max(peak, p);
  const double threshold = alpha * peak;
  std::vector<TokenId> ids;
  for (std::size_t i = 0; i < final_dist.size(); ++i) {
    if (final_dist[i] >= threshold) ids.push_back(static_cast<TokenId>(i));
  }
  return TokenSet(std::move(ids));
}

inline std::vector<double> layer_kls(const LayerLogits& step, const TokenSet& support,
                                     KlMode mode = KlMode::LiteralClamped,
                                     double q_floor = kDefaultQFloor) {
  const std::size_t n = step.num_layers();
  const Distribution final_dist = softmax_with_temperature(step.final_layer(), 1.0);
  std::vector<double> out;
  out.reserve(n - 1);
  for (std::size_t i = 1; i < n; ++i) {
    const Distribution internal = softmax_with_temperature(step.layer(i), 1.0);
    out.push_back(restricted_kl(final_dist, internal, support, mode, q_floor));
  }
  return out;
}

/// Mean of the selected per-layer entries.
inline double aggregate_ka(std::span<const double> per_layer_kl, const LayerSet& layers) {
  const auto selected = layers.select(per_layer_kl.size());
  double sum = 0.0;
  for (std::size_t layer : selected) sum += per_layer_kl[layer - 1];
  return sum / static_cast<double>(selected.size());
}

struct KAOptions {
  double alpha = kDefaultAlpha;
  LayerSet layers = LayerSet::all();
  KlMode kl_mode = KlMode::LiteralClamped;
  double q_floor = kDefaultQFloor;
};

inline KASignal compute_ka(const LayerLogits& step, const KAOptions& opt = {}) {
  KASignal sig;
  const Distribution final_dist = softmax_with_temperature(step.final_layer(), 1.0);
  sig.support = head_support(final_dist, opt.alpha);
  sig.per_layer_kl = layer_kls(step, sig.support, opt.kl_mode, opt.q_floor);
  sig.ka = aggregate_ka(sig.per_layer_kl, opt.layers);
  return sig;
}

}  // namespace dfd
