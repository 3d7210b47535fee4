#pragma once

// Truncation samplers and the dynamic-temperature draw.
//
// The truncation set is always chosen from the temperature-1 distribution of
// the raw output logits; the step temperature is applied afterwards to the
// surviving logits only, i.e. the draw is from softmax(S(logits) / T).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dfd/dist.hpp"
#include "dfd/error.hpp"
#include "dfd/rng.hpp"

namespace dfd {

enum class SamplerKind { Temperature, TopK, Nucleus, Typical };

inline std::string to_string(SamplerKind k) {
  switch (k) {
    case SamplerKind::Temperature: return "temperature";
    case SamplerKind::TopK: return "top-k";
    case SamplerKind::Nucleus: return "nucleus";
    case SamplerKind::Typical: return "typical";
  }
  return "?";
}

inline SamplerKind parse_sampler_kind(const std::string& s) {
  if (s == "temperature" || s == "temperature-only") return SamplerKind::Temperature;
  if (s == "top-k" || s == "topk") return SamplerKind::TopK;
  if (s == "nucleus" || s == "top-p") return SamplerKind::Nucleus;
  if (s == "typical") return SamplerKind::Typical;
  throw Error(ErrorKind::InvalidArgument, "unknown sampler kind '" + s + "'");
}

struct SamplerSpec {
  SamplerKind kind = SamplerKind::Temperature;
  std::size_t k = 10;
  double p = 0.9;
  double tau = 0.9;

  void validate() const {
    switch (kind) {
      case SamplerKind::Temperature: break;
      case SamplerKind::TopK:
        require(k >= 1, ErrorKind::InvalidArgument, "top-k needs k >= 1");
        break;
      case SamplerKind::Nucleus:
        require(p > 0.0 && p <= 1.0, ErrorKind::InvalidArgument, "nucleus needs p in (0, 1]");
        break;
      case SamplerKind::Typical:
        require(tau > 0.0 && tau <= 1.0, ErrorKind::InvalidArgument, "typical needs tau in (0, 1]");
        break;
    }
  }
};

namespace detail {

// Token ids ordered by descending probability, ties by ascending id.
inline std::vector<TokenId> by_probability(std::span<const double> probs) {
  std::vector<TokenId> order(probs.size());
  std::iota(order.begin(), order.end(), TokenId{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](TokenId a, TokenId b) { return probs[a] > probs[b]; });
  return order;
}

// Smallest prefix of `order` whose mass reaches `target`; the whole order if
// rounding keeps the running sum just short of it.
inline std::vector<TokenId> mass_prefix(const std::vector<TokenId>& order,
                                        std::span<const double> probs, double target) {
  double cum = 0.0;
  std::size_t n = order.size();
  for (std::size_t i = 0; i < order.size(); ++i) {
    cum += probs[order[i]];
    if (cum >= target) {
      n = i + 1;
      break;
    }
  }
  return {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n)};
}

}  // namespace detail

template <std::floating_point T>
TokenSet truncate(std::span<const T> logits, const SamplerSpec& spec) {
  spec.validate();
  const Distribution probs = softmax_with_temperature(logits, 1.0);
  switch (spec.kind) {
    case SamplerKind::Temperature: return TokenSet::full(probs.size());
    case SamplerKind::TopK: {
      auto order = detail::by_probability(probs);
      order.resize(std::min(spec.k, order.size()));
      return TokenSet(std::move(order));
    }
    case SamplerKind::Nucleus:
      return TokenSet(detail::mass_prefix(detail::by_probability(probs), probs, spec.p));
    case SamplerKind::Typical: {
      const double h = entropy(probs);
      std::vector<double> score(probs.size());
      for (std::size_t i = 0; i < probs.size(); ++i) {
        score[i] = probs[i] > 0.0 ? std::abs(-std::log(probs[i]) - h)
                                  : std::numeric_limits<double>::infinity();
      }
      std::vector<TokenId> order(probs.size());
      std::iota(order.begin(), order.end(), TokenId{0});
      std::sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
        if (score[a] != score[b]) return score[a] < score[b];
        if (probs[a] != probs[b]) return probs[a] > probs[b];
        return a < b;
      });
      return TokenSet(detail::mass_prefix(order, probs, spec.tau));
    }
  }
  return TokenSet::full(probs.size());
}

template <std::floating_point T>
TokenSet truncate(const std::vector<T>& logits, const SamplerSpec& spec) {
  return truncate(std::span<const T>(logits), spec);
}

/// softmax over the survivors of `keep` at `temperature`; masked tokens get 0.
template <std::floating_point T>
Distribution sampling_distribution(std::span<const T> logits, const TokenSet& keep, double temperature) {
  require(temperature > 0.0 && std::isfinite(temperature), ErrorKind::InvalidArgument,
          "temperature must be positive");
  require(!keep.empty(), ErrorKind::InvalidArgument, "empty truncation set");
  check_logits(logits);
  double peak = -std::numeric_limits<double>::infinity();
  for (TokenId id : keep) peak = std::max(peak, static_cast<double>(logits[id]));
  Distribution out(logits.size(), 0.0);
  double total = 0.0;
  for (TokenId id : keep) {
    out[id] = std::exp((static_cast<double>(logits[id]) - peak) / temperature);
    total += out[id];
  }
  for (TokenId id : keep) out[id] /= total;
  return out;
}

/// Inverse-CDF draw over the nonzero entries ordered by descending
/// probability (ties by ascending id). Consumes exactly one uniform.
inline TokenId draw_token(std::span<const double> dist, SplitMix64& rng) {
  const auto order = detail::by_probability(dist);
  double total = 0.0;
  std::size_t live = 0;
  for (TokenId id : order) {
    if (dist[id] <= 0.0) break;
    total += dist[id];
    ++live;
  }
  require(live > 0, ErrorKind::InvalidInput, "distribution has no mass");
  const double u = rng.uniform() * total;
  double cum = 0.0;
  for (std::size_t i = 0; i < live; ++i) {
    cum += dist[order[i]];
    if (u < cum) return order[i];
  }
  return order[live - 1];
}

/// Draws from softmax(S(final_logits) / temperature).
template <std::floating_point T>
TokenId dfd_sample(std::span<const T> final_logits, const SamplerSpec& spec, double temperature,
                   SplitMix64& rng) {
  const TokenSet keep = truncate(final_logits, spec);
  return draw_token(sampling_distribution(final_logits, keep, temperature), rng);
}

}  // namespace dfd
