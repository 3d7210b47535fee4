#pragma once

// Diversity metrics over response sets and the analytic decoding cost model.
// Metrics are generic over the token type: token ids or whitespace-split words.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dfd/error.hpp"

namespace dfd {

template <typename Tok>
using Response = std::vector<Tok>;

template <typename Tok>
struct ResponseSet {
  std::string prompt_id;
  std::vector<Response<Tok>> responses;
};

namespace detail {

template <typename Tok>
std::map<std::vector<Tok>, std::size_t> ngram_counts(const Response<Tok>& r, std::size_t n) {
  std::map<std::vector<Tok>, std::size_t> counts;
  if (r.size() < n) return counts;
  for (std::size_t i = 0; i + n <= r.size(); ++i) {
    ++counts[std::vector<Tok>(r.begin() + static_cast<std::ptrdiff_t>(i),
                              r.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace detail

enum class DistinctMode {
  /// unique/total per response, averaged over responses then prompts.
  PerResponse,
  /// unique/total over all n-grams of all responses of all prompts.
  Pooled,
};

/// Per-response Distinct-N averaged over the responses of one set. Responses
/// shorter than n are skipped.
template <typename Tok>
double distinct_n(const ResponseSet<Tok>& set, std::size_t n) {
  require(n >= 1, ErrorKind::InvalidArgument, "distinct_n needs n >= 1");
  double sum = 0.0;
  std::size_t used = 0;
  for (const auto& r : set.responses) {
    if (r.size() < n) continue;
    const auto counts = detail::ngram_counts(r, n);
    sum += static_cast<double>(counts.size()) / static_cast<double>(r.size() - n + 1);
    ++used;
  }
  require(used > 0, ErrorKind::UndefinedMetric,
          "distinct-" + std::to_string(n) + " undefined: every response is shorter than n");
  return sum / static_cast<double>(used);
}

/// Distinct-N over many prompts. Prompts whose responses are all too short
/// are skipped; if all are, the metric is undefined.
template <typename Tok>
double distinct_n(const std::vector<ResponseSet<Tok>>& sets, std::size_t n,
                  DistinctMode mode = DistinctMode::PerResponse) {
  require(n >= 1, ErrorKind::InvalidArgument, "distinct_n needs n >= 1");
  if (mode == DistinctMode::Pooled) {
    std::set<std::vector<Tok>> unique;
    std::size_t total = 0;
    for (const auto& s : sets) {
      for (const auto& r : s.responses) {
        for (const auto& [gram, c] : detail::ngram_counts(r, n)) {
          unique.insert(gram);
          total += c;
        }
      }
    }
    require(total > 0, ErrorKind::UndefinedMetric, "distinct-n undefined: no n-grams");
    return static_cast<double>(unique.size()) / static_cast<double>(total);
  }
  double sum = 0.0;
  std::size_t used = 0;
  for (const auto& s : sets) {
    try {
      sum += distinct_n(s, n);
      ++used;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::UndefinedMetric) throw;
    }
  }
  require(used > 0, ErrorKind::UndefinedMetric, "distinct-n undefined: no response long enough");
  return sum / static_cast<double>(used);
}

inline constexpr double kBleuEpsilon = 0.1;
inline constexpr std::size_t kBleuOrder = 4;

/// Sentence BLEU-4 in [0, 100]: uniform weights, brevity penalty, and
/// kBleuEpsilon substituted for a zero clipped-match count.
template <typename Tok>
double sentence_bleu(const Response<Tok>& candidate, const Response<Tok>& reference) {
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= kBleuOrder; ++n) {
    const auto cand = detail::ngram_counts(candidate, n);
    const auto ref = detail::ngram_counts(reference, n);
    std::size_t total = 0;
    std::size_t matched = 0;
    for (const auto& [gram, c] : cand) {
      total += c;
      const auto it = ref.find(gram);
      if (it != ref.end()) matched += std::min(c, it->second);
    }
    const double numer = matched > 0 ? static_cast<double>(matched) : kBleuEpsilon;
    const double denom = static_cast<double>(std::max<std::size_t>(total, 1));
    log_sum += std::log(numer / denom);
  }
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(kBleuOrder));
}

/// Mean sentence BLEU over all ordered pairs (i, j), i != j. Lower is more diverse.
template <typename Tok>
double pairwise_bleu(const ResponseSet<Tok>& set) {
  const auto& rs = set.responses;
  require(rs.size() >= 2, ErrorKind::UndefinedMetric, "pairwise BLEU needs at least 2 responses");
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < rs.size(); ++i) {
    for (std::size_t j = 0; j < rs.size(); ++j) {
      if (i == j) continue;
      sum += sentence_bleu(rs[i], rs[j]);
      ++pairs;
    }
  }
  return sum / static_cast<double>(pairs);
}

// ---------------------------------------------------------------------------
// Cost model

struct CostModel {
  double param_count = 0;
  double d_model = 0;
  double vocab_size = 0;
  double num_layers = 0;
  /// Input embedding shares storage with the LM head, so no table is excluded.
  bool tied_embeddings = false;
};

struct FlopsEstimate {
  double flops = 0;
  double baseline_flops = 0;
  double ratio_vs_baseline = 1.0;
};

/// Arithmetic per vocabulary entry for one restricted-KL term (softmax exp,
/// normalize, log, ratio, multiply, accumulate).
inline constexpr double kKlFlopsPerToken = 6.0;

/// FLOPs to decode one token given `context_len` tokens. Baseline counts two
/// FLOPs per matmul weight per position, excluding the input embedding table
/// (a lookup). DFD adds N-1 extra LM-head projections and their KL terms.
inline FlopsEstimate flops_estimate(const CostModel& m, double context_len, bool dfd) {
  require(m.param_count > 0 && m.d_model > 0 && m.vocab_size > 0 && m.num_layers > 0 &&
              context_len > 0,
          ErrorKind::InvalidArgument, "cost model inputs must be positive");
  const double matmul_params =
      m.tied_embeddings ? m.param_count : m.param_count - m.vocab_size * m.d_model;
  require(matmul_params > 0, ErrorKind::InvalidArgument,
          "param_count must exceed the embedding table for an untied model");
  FlopsEstimate e;
  e.baseline_flops = 2.0 * matmul_params * context_len;
  e.flops = e.baseline_flops;
  if (dfd) {
    const double internal = m.num_layers - 1.0;
    e.flops += internal * 2.0 * m.d_model * m.vocab_size;
    e.flops += internal * kKlFlopsPerToken * m.vocab_size;
  }
  e.ratio_vs_baseline = dfd ? e.flops / e.baseline_flops : 1.0;
  return e;
}

}  // namespace dfd
