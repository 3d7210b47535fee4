#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfd/error.hpp"
#include "dfd/focus.hpp"
#include "dfd/ka.hpp"
#include "dfd/provider.hpp"
#include "dfd/rng.hpp"
#include "dfd/sampler.hpp"

namespace dfd {

inline constexpr const char* kGenerationSchema = "dfd.generation/1";

struct Prompt {
  std::string id;
  std::vector<TokenId> tokens;
  std::string dataset = "default";
};

struct DecodeConfig {
  std::size_t max_tokens = 256;
  std::vector<TokenId> stop_tokens;
  std::size_t num_samples = 3;
  std::uint64_t base_seed = 0;
  FocusConfig focus;
  SamplerSpec sampler;
  /// Keep per-layer KL vectors in every step record.
  bool keep_layer_kl = false;

  void validate() const {
    require(max_tokens >= 1, ErrorKind::InvalidArgument, "max_tokens must be >= 1");
    require(num_samples >= 1, ErrorKind::InvalidArgument, "num_samples must be >= 1");
    focus.validate();
    sampler.validate();
  }
};

struct StepRecord {
  double ka = 0.0;
  double temperature = 1.0;
  std::size_t head_size = 0;
  TokenId chosen = 0;
  std::vector<double> per_layer_kl;  // empty unless keep_layer_kl

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct GenerationRecord {
  std::string prompt_id;
  std::string dataset = "default";
  std::size_t sample_id = 0;
  std::uint64_t seed = 0;
  std::vector<TokenId> tokens;
  std::vector<StepRecord> steps;
  std::optional<std::string> error;

  friend bool operator==(const GenerationRecord&, const GenerationRecord&) = default;
};

/// Everything the engine decides at one step before drawing.
struct StepPlan {
  KASignal signal;
  double temperature = 1.0;
  TokenSet keep;
  Distribution dist;  // the exact distribution the next token is drawn from
};

inline StepPlan plan_step(const LayerLogits& logits, const FocusConfig& focus, const SamplerSpec& sampler) {
  StepPlan plan;
  plan.signal = compute_ka(logits, focus.ka_options());
  plan.temperature = apply_focus(plan.signal.ka, focus);
  plan.keep = truncate(logits.final_layer(), sampler);
  plan.dist = sampling_distribution(logits.final_layer(), plan.keep, plan.temperature);
  return plan;
}

inline GenerationRecord generate(const LayerProvider& provider, const Prompt& prompt,
                                 const DecodeConfig& cfg, std::uint64_t stream_seed,
                                 std::size_t sample_id = 0) {
  require(!prompt.tokens.empty(), ErrorKind::InvalidArgument, "prompt must be nonempty");
  cfg.validate();
  GenerationRecord rec;
  rec.prompt_id = prompt.id;
  rec.dataset = prompt.dataset;
  rec.sample_id = sample_id;
  rec.seed = stream_seed;

  SplitMix64 rng(stream_seed);
  std::vector<TokenId> context = prompt.tokens;
  for (std::size_t step = 0; step < cfg.max_tokens; ++step) {
    LayerLogits logits;
    try {
      logits = provider.step(context);
    } catch (const Error& e) {
      throw Error(e.kind(), "step " + std::to_string(step) + ": " + e.what());
    }
    StepPlan plan = plan_step(logits, cfg.focus, cfg.sampler);
    const TokenId token = draw_token(plan.dist, rng);

    StepRecord s;
    s.ka = plan.signal.ka;
    s.temperature = plan.temperature;
    s.head_size = plan.signal.support.size();
    s.chosen = token;
    if (cfg.keep_layer_kl) s.per_layer_kl = std::move(plan.signal.per_layer_kl);
    rec.steps.push_back(std::move(s));
    rec.tokens.push_back(token);
    context.push_back(token);
    if (std::find(cfg.stop_tokens.begin(), cfg.stop_tokens.end(), token) != cfg.stop_tokens.end()) break;
  }
  return rec;
}

/// num_samples records per prompt, ordered by (prompt, sample). Sample j of a
/// prompt uses mix_seed(base_seed, prompt.id, j), so records do not depend on
/// list order or on `workers`. A failing item yields a record with `error` set.
inline std::vector<GenerationRecord> generate_batch(const LayerProvider& provider,
                                                    const std::vector<Prompt>& prompts,
                                                    const DecodeConfig& cfg, std::size_t workers = 1) {
  require(!prompts.empty(), ErrorKind::InvalidArgument, "no prompts");
  cfg.validate();
  const std::size_t total = prompts.size() * cfg.num_samples;
  std::vector<GenerationRecord> out(total);
  std::atomic<std::size_t> next{0};

  auto work = [&] {
    for (std::size_t item = next++; item < total; item = next++) {
      const Prompt& prompt = prompts[item / cfg.num_samples];
      const std::size_t j = item % cfg.num_samples;
      const std::uint64_t seed = mix_seed(cfg.base_seed, prompt.id, j);
      try {
        out[item] = generate(provider, prompt, cfg, seed, j);
      } catch (const std::exception& e) {
        GenerationRecord failed;
        failed.prompt_id = prompt.id;
        failed.dataset = prompt.dataset;
        failed.sample_id = j;
        failed.seed = seed;
        failed.error = e.what();
        out[item] = std::move(failed);
      }
    }
  };

  workers = std::clamp<std::size_t>(workers, 1, total);
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  return out;
}

/// KA at every step of fixed-temperature baseline decoding over `prompts`.
inline std::vector<double> collect_calibration_ka(const LayerProvider& provider,
                                                  const std::vector<Prompt>& prompts,
                                                  DecodeConfig cfg, std::size_t workers = 1) {
  cfg.focus.transform = TransformKind::Fixed;
  cfg.focus.t0 = 1.0;
  std::vector<double> samples;
  for (const auto& rec : generate_batch(provider, prompts, cfg, workers)) {
    require(!rec.error, ErrorKind::Calibration, "calibration run failed: " + rec.error.value_or(""));
    for (const auto& s : rec.steps) samples.push_back(s.ka);
  }
  return samples;
}

// JSONL persistence.

inline nlohmann::json to_json(const GenerationRecord& r) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : r.steps) {
    nlohmann::json j = {{"ka", s.ka}, {"temperature", s.temperature}, {"head_size", s.head_size},
                        {"chosen", s.chosen}};
    if (!s.per_layer_kl.empty()) j["per_layer_kl"] = s.per_layer_kl;
    steps.push_back(std::move(j));
  }
  nlohmann::json j = {{"schema", kGenerationSchema}, {"prompt_id", r.prompt_id},
                      {"dataset", r.dataset},        {"sample_id", r.sample_id},
                      {"seed", r.seed},              {"tokens", r.tokens},
                      {"steps", std::move(steps)}};
  if (r.error) j["error"] = *r.error;
  return j;
}

inline GenerationRecord record_from_json(const nlohmann::json& j) {
  require(j.value("schema", std::string{}) == kGenerationSchema, ErrorKind::Format,
          "generation record has unknown schema");
  GenerationRecord r;
  r.prompt_id = j.at("prompt_id").get<std::string>();
  r.dataset = j.value("dataset", std::string("default"));
  r.sample_id = j.at("sample_id").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.tokens = j.at("tokens").get<std::vector<TokenId>>();
  for (const auto& s : j.at("steps")) {
    StepRecord st;
    st.ka = s.at("ka").get<double>();
    st.temperature = s.at("temperature").get<double>();
    st.head_size = s.at("head_size").get<std::size_t>();
    st.chosen = s.at("chosen").get<TokenId>();
    if (s.contains("per_layer_kl")) st.per_layer_kl = s.at("per_layer_kl").get<std::vector<double>>();
    r.steps.push_back(std::move(st));
  }
  if (j.contains("error")) r.error = j.at("error").get<std::string>();
  return r;
}

inline void write_generations(const std::vector<GenerationRecord>& records, std::ostream& os) {
  for (const auto& r : records) os << to_json(r).dump() << '\n';
}

inline std::vector<GenerationRecord> read_generations(std::istream& is) {
  std::vector<GenerationRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Format, "generations line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace dfd
