#pragma once

// Deterministic random streams.
//
// Every random draw in the library comes from SplitMix64 (Steele, Lea &
// Flood, "Fast splittable pseudorandom number generators", 2014): the state
// advances by the golden-gamma constant 0x9E3779B97F4A7C15 and each output is
// the state passed through the variant-13 finalizer. Streams for independent
// work items are derived with mix_seed(), never by sharing a generator.

#include <cstdint>
#include <string_view>

namespace dfd {

namespace detail {

constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t finalize64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit constexpr SplitMix64(std::uint64_t seed = 0) : state_(seed) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  constexpr result_type operator()() {
    state_ += detail::kGoldenGamma;
    return detail::finalize64(state_);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  constexpr double uniform() {
    return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
  }

  /// Child stream whose seed is drawn from this one.
  constexpr SplitMix64 split() { return SplitMix64((*this)()); }

  constexpr std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : text) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Stream seed for sample `sample_index` of the prompt with stable id
/// `prompt_id`:
///   finalize64(finalize64(base ^ fnv1a64(id)) + gamma * (sample_index + 1))
/// Depends only on the id, never on the prompt's position in a list.
constexpr std::uint64_t mix_seed(std::uint64_t base_seed, std::string_view prompt_id,
                                 std::uint64_t sample_index) {
  const std::uint64_t per_prompt = detail::finalize64(base_seed ^ fnv1a64(prompt_id));
  return detail::finalize64(per_prompt + detail::kGoldenGamma * (sample_index + 1));
}

}  // namespace dfd
