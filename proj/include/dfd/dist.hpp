#pragma once

// Probability primitives. Inputs may be float or double logits; all
// arithmetic is carried out in double.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "dfd/error.hpp"

namespace dfd {

using Distribution = std::vector<double>;

enum class KlMode { LiteralClamped, Renormalized };

inline constexpr double kDefaultQFloor = 1e-10;

/// Sorted, duplicate-free set of token ids.
class TokenSet {
 public:
  TokenSet() = default;
  explicit TokenSet(std::vector<TokenId> ids) : ids_(std::move(ids)) {
    std::sort(ids_.begin(), ids_.end());
    ids_.erase(std::unique(ids_.begin(), ids_.end()), ids_.end());
  }

  static TokenSet full(std::size_t vocab) {
    std::vector<TokenId> ids(vocab);
    for (std::size_t i = 0; i < vocab; ++i) ids[i] = static_cast<TokenId>(i);
    return TokenSet(std::move(ids));
  }

  bool contains(TokenId id) const { return std::binary_search(ids_.begin(), ids_.end(), id); }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  const std::vector<TokenId>& ids() const { return ids_; }
  auto begin() const { return ids_.begin(); }
  auto end() const { return ids_.end(); }

  friend bool operator==(const TokenSet&, const TokenSet&) = default;

 private:
  std::vector<TokenId> ids_;
};

template <std::floating_point T>
void check_logits(std::span<const T> logits) {
  require(logits.size() >= 2, ErrorKind::InvalidInput, "logit vector needs at least 2 entries");
  for (T v : logits) {
    require(std::isfinite(v), ErrorKind::InvalidInput, "logit vector contains NaN or Inf");
  }
}

/// softmax(logits / T) with max subtraction.
template <std::floating_point T>
Distribution softmax_with_temperature(std::span<const T> logits, double temperature) {
  require(temperature > 0.0 && std::isfinite(temperature), ErrorKind::InvalidArgument,
          "temperature must be a positive finite number");
  check_logits(logits);
  double peak = -std::numeric_limits<double>::infinity();
  for (T v : logits) peak = std::max(peak, static_cast<double>(v));
  Distribution out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((static_cast<double>(logits[i]) - peak) / temperature);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

template <std::floating_point T>
Distribution softmax_with_temperature(const std::vector<T>& logits, double temperature) {
  return softmax_with_temperature(std::span<const T>(logits), temperature);
}

/// log softmax(logits / T), stable for very negative entries.
template <std::floating_point T>
std::vector<double> log_softmax(std::span<const T> logits, double temperature) {
  require(temperature > 0.0 && std::isfinite(temperature), ErrorKind::InvalidArgument,
          "temperature must be a positive finite number");
  check_logits(logits);
  double peak = -std::numeric_limits<double>::infinity();
  for (T v : logits) peak = std::max(peak, static_cast<double>(v));
  double total = 0.0;
  for (T v : logits) total += std::exp((static_cast<double>(v) - peak) / temperature);
  const double log_z = std::log(total);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = (static_cast<double>(logits[i]) - peak) / temperature - log_z;
  }
  return out;
}

/// Shannon entropy in nats, 0·log 0 = 0.
inline double entropy(std::span<const double> dist) {
  double h = 0.0;
  for (double p : dist) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::max(h, 0.0);
}

inline std::size_t argmax(std::span<const double> values) {
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

/// KL(p || q) summed over `support` only.
///
/// LiteralClamped: max(0, Σ_{x∈S} p(x) log(p(x) / max(q(x), q_floor))). The
/// restricted sum is not a proper divergence and may be negative before the clamp.
/// Renormalized: p and q are first renormalized over S, then ordinary KL.
inline double restricted_kl(std::span<const double> p, std::span<const double> q,
                            const TokenSet& support, KlMode mode, double q_floor = kDefaultQFloor) {
  require(!support.empty(), ErrorKind::InvalidArgument, "restricted_kl: empty support");
  require(p.size() == q.size(), ErrorKind::InvalidArgument, "restricted_kl: size mismatch");
  require(q_floor > 0.0, ErrorKind::InvalidArgument, "restricted_kl: q_floor must be positive");
  require(support.ids().back() < p.size(), ErrorKind::InvalidArgument,
          "restricted_kl: support index out of range");

  if (mode == KlMode::LiteralClamped) {
    double sum = 0.0;
    for (TokenId x : support) {
      if (p[x] > 0.0) sum += p[x] * std::log(p[x] / std::max(q[x], q_floor));
    }
    return std::max(sum, 0.0);
  }

  double p_mass = 0.0;
  double q_mass = 0.0;
  for (TokenId x : support) {
    p_mass += p[x];
    q_mass += std::max(q[x], q_floor);
  }
  require(p_mass > 0.0, ErrorKind::InvalidInput, "restricted_kl: p has no mass on support");
  double sum = 0.0;
  for (TokenId x : support) {
    const double pr = p[x] / p_mass;
    const double qr = std::max(q[x], q_floor) / q_mass;
    if (pr > 0.0) sum += pr * std::log(pr / qr);
  }
  // Gibbs' inequality holds exactly; the clamp only removes rounding residue.
  return std::max(sum, 0.0);
}

}  // namespace dfd
