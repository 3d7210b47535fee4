#pragma once

// Run configuration: a flat TOML subset (sections, `key = value`, `#`
// comments; values are quoted strings, numbers, booleans or one-line arrays
// of numbers). Every key has a named default; unknown keys are rejected.

#include <cctype>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfd/engine.hpp"
#include "dfd/error.hpp"
#include "dfd/model.hpp"
#include "dfd/trace.hpp"

namespace dfd {

/// Config error carrying the offending dotted key.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& message)
      : Error(ErrorKind::Config, key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct ConfigValue {
  enum class Type { String, Number, Bool, Array };
  Type type = Type::String;
  std::string text;                 // unquoted string or number literal
  std::vector<std::string> items;   // array elements
  std::size_t line = 0;
};

using ConfigTable = std::map<std::string, ConfigValue>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

}  // namespace detail

inline ConfigTable parse_config(std::istream& is) {
  ConfigTable table;
  std::string section;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    const std::string line = detail::trim(detail::strip_comment(raw));
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where, "unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(where, "empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where, "expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string rhs = detail::trim(line.substr(eq + 1));
    if (key.empty() || rhs.empty()) throw ConfigError(where, "expected key = value");
    const std::string full = section.empty() ? key : section + "." + key;

    ConfigValue v;
    v.line = line_no;
    if (rhs.front() == '"') {
      if (rhs.size() < 2 || rhs.back() != '"') throw ConfigError(full, "unterminated string");
      v.type = ConfigValue::Type::String;
      v.text = rhs.substr(1, rhs.size() - 2);
    } else if (rhs.front() == '[') {
      if (rhs.back() != ']') throw ConfigError(full, "unterminated array");
      v.type = ConfigValue::Type::Array;
      std::stringstream items(rhs.substr(1, rhs.size() - 2));
      std::string item;
      while (std::getline(items, item, ',')) {
        item = detail::trim(item);
        if (!item.empty()) v.items.push_back(item);
      }
    } else if (rhs == "true" || rhs == "false") {
      v.type = ConfigValue::Type::Bool;
      v.text = rhs;
    } else {
      v.type = ConfigValue::Type::Number;
      v.text = rhs;
    }
    if (table.count(full)) throw ConfigError(full, "duplicate key");
    table[full] = std::move(v);
  }
  return table;
}

struct RunConfig {
  /// "builtin", "builtin-identity" or "trace:<path>".
  std::string provider = "builtin";
  std::uint64_t model_seed = ModelConfig{}.seed;
  bool normalize_taps = true;
  ReplayMatch replay = ReplayMatch::Strict;

  DecodeConfig decode;
  bool calibrate = false;

  std::string prompts_path;
  std::size_t synthetic_prompts = 20;
  std::size_t synthetic_prompt_length = 8;
  std::uint64_t synthetic_seed = 1;

  std::string calibration_path;
  std::size_t calibration_prompts = 20;
  std::uint64_t calibration_seed = 2;

  std::string output_path;

  void validate() const {
    auto wrap = [](const char* key, auto&& fn) {
      try {
        fn();
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::Config) throw;
        throw ConfigError(key, e.what());
      }
    };
    wrap("decode", [&] {
      require(decode.max_tokens >= 1, ErrorKind::InvalidArgument, "max_tokens must be >= 1");
      require(decode.num_samples >= 1, ErrorKind::InvalidArgument, "num_samples must be >= 1");
    });
    wrap("limits", [&] {
      require(decode.focus.t_min > 0.0 && decode.focus.t_min <= decode.focus.t_max,
              ErrorKind::InvalidArgument, "need 0 < t_min <= t_max");
    });
    wrap("focus", [&] { decode.focus.validate(); });
    wrap("sampler", [&] { decode.sampler.validate(); });
    wrap("provider.source", [&] {
      require(provider == "builtin" || provider == "builtin-identity" ||
                  provider.rfind("trace:", 0) == 0,
              ErrorKind::InvalidArgument, "expected builtin, builtin-identity or trace:<path>");
    });
  }
};

namespace detail {

inline double as_double(const std::string& key, const ConfigValue& v) {
  if (v.type != ConfigValue::Type::Number) throw ConfigError(key, "expected a number");
  try {
    std::size_t used = 0;
    const double d = std::stod(v.text, &used);
    if (used != v.text.size()) throw ConfigError(key, "malformed number '" + v.text + "'");
    return d;
  } catch (const std::logic_error&) {
    throw ConfigError(key, "malformed number '" + v.text + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& text) {
  std::uint64_t out = 0;
  int base = 10;
  std::string digits = text;
  if (digits.rfind("0x", 0) == 0 || digits.rfind("0X", 0) == 0) {
    base = 16;
    digits = digits.substr(2);
  }
  const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), out, base);
  if (ec != std::errc{} || ptr != digits.data() + digits.size() || digits.empty()) {
    throw ConfigError(key, "expected a nonnegative integer, got '" + text + "'");
  }
  return out;
}

inline std::uint64_t as_u64(const std::string& key, const ConfigValue& v) {
  if (v.type != ConfigValue::Type::Number) throw ConfigError(key, "expected an integer");
  return parse_u64(key, v.text);
}

inline bool as_bool(const std::string& key, const ConfigValue& v) {
  if (v.type != ConfigValue::Type::Bool) throw ConfigError(key, "expected true or false");
  return v.text == "true";
}

inline std::string as_string(const std::string& key, const ConfigValue& v) {
  if (v.type != ConfigValue::Type::String) throw ConfigError(key, "expected a quoted string");
  return v.text;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

inline std::string kl_mode_name(KlMode m) {
  return m == KlMode::LiteralClamped ? "literal-clamped" : "renormalized";
}

}  // namespace detail

/// Applies `table` over defaults. Throws ConfigError naming the key on any
/// unknown key, type mismatch or invalid value.
inline RunConfig run_config_from_table(const ConfigTable& table) {
  using namespace detail;
  RunConfig c;
  auto& f = c.decode.focus;
  auto& s = c.decode.sampler;
  for (const auto& [key, v] : table) {
    auto guard = [&](auto&& fn) {
      try {
        fn();
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        throw ConfigError(key, e.what());
      }
    };
    guard([&] {
      if (key == "provider.source") c.provider = as_string(key, v);
      else if (key == "provider.model_seed") c.model_seed = as_u64(key, v);
      else if (key == "provider.normalize_taps") c.normalize_taps = as_bool(key, v);
      else if (key == "provider.replay") {
        const auto m = as_string(key, v);
        if (m == "strict") c.replay = ReplayMatch::Strict;
        else if (m == "positional") c.replay = ReplayMatch::Positional;
        else throw ConfigError(key, "expected strict or positional");
      }
      else if (key == "decode.max_tokens") c.decode.max_tokens = as_u64(key, v);
      else if (key == "decode.num_samples") c.decode.num_samples = as_u64(key, v);
      else if (key == "decode.base_seed") c.decode.base_seed = as_u64(key, v);
      else if (key == "decode.keep_layer_kl") c.decode.keep_layer_kl = as_bool(key, v);
      else if (key == "decode.stop_tokens") {
        if (v.type != ConfigValue::Type::Array) throw ConfigError(key, "expected an array");
        c.decode.stop_tokens.clear();
        for (const auto& item : v.items) {
          c.decode.stop_tokens.push_back(static_cast<TokenId>(parse_u64(key, item)));
        }
      }
      else if (key == "focus.transform") f.transform = parse_transform(as_string(key, v));
      else if (key == "focus.sigma") f.sigma = as_double(key, v);
      else if (key == "focus.t0") f.t0 = as_double(key, v);
      else if (key == "focus.calibrate") c.calibrate = as_bool(key, v);
      else if (key == "focus.layers") f.layer_set = LayerSet::parse(as_string(key, v));
      else if (key == "focus.alpha") f.alpha = as_double(key, v);
      else if (key == "focus.q_floor") f.q_floor = as_double(key, v);
      else if (key == "focus.kl_mode") {
        const auto m = as_string(key, v);
        if (m == "literal-clamped") f.kl_mode = KlMode::LiteralClamped;
        else if (m == "renormalized") f.kl_mode = KlMode::Renormalized;
        else throw ConfigError(key, "expected literal-clamped or renormalized");
      }
      else if (key == "limits.t_min") f.t_min = as_double(key, v);
      else if (key == "limits.t_max") f.t_max = as_double(key, v);
      else if (key == "sampler.kind") s.kind = parse_sampler_kind(as_string(key, v));
      else if (key == "sampler.k") s.k = as_u64(key, v);
      else if (key == "sampler.p") s.p = as_double(key, v);
      else if (key == "sampler.tau") s.tau = as_double(key, v);
      else if (key == "prompts.path") c.prompts_path = as_string(key, v);
      else if (key == "prompts.synthetic_count") c.synthetic_prompts = as_u64(key, v);
      else if (key == "prompts.synthetic_length") c.synthetic_prompt_length = as_u64(key, v);
      else if (key == "prompts.synthetic_seed") c.synthetic_seed = as_u64(key, v);
      else if (key == "calibration.path") c.calibration_path = as_string(key, v);
      else if (key == "calibration.synthetic_count") c.calibration_prompts = as_u64(key, v);
      else if (key == "calibration.synthetic_seed") c.calibration_seed = as_u64(key, v);
      else if (key == "output.path") c.output_path = as_string(key, v);
      else throw ConfigError(key, "unknown key");
    });
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(path, "cannot open config file");
  return run_config_from_table(parse_config(is));
}

/// Fully resolved config, every key written; parsing it back reproduces `c`.
inline std::string resolved_config_text(const RunConfig& c) {
  using detail::format_double;
  const auto& f = c.decode.focus;
  const auto& s = c.decode.sampler;
  std::ostringstream os;
  auto str = [](const std::string& v) { return "\"" + v + "\""; };
  os << "[provider]\n"
     << "source = " << str(c.provider) << "\n"
     << "model_seed = " << c.model_seed << "\n"
     << "normalize_taps = " << (c.normalize_taps ? "true" : "false") << "\n"
     << "replay = " << str(c.replay == ReplayMatch::Strict ? "strict" : "positional") << "\n\n";
  os << "[decode]\n"
     << "max_tokens = " << c.decode.max_tokens << "\n"
     << "num_samples = " << c.decode.num_samples << "\n"
     << "base_seed = " << c.decode.base_seed << "\n"
     << "keep_layer_kl = " << (c.decode.keep_layer_kl ? "true" : "false") << "\n"
     << "stop_tokens = [";
  for (std::size_t i = 0; i < c.decode.stop_tokens.size(); ++i) {
    os << (i ? ", " : "") << c.decode.stop_tokens[i];
  }
  os << "]\n\n";
  os << "[focus]\n"
     << "transform = " << str(to_string(f.transform)) << "\n"
     << "sigma = " << format_double(f.sigma) << "\n"
     << "t0 = " << format_double(f.t0) << "\n"
     << "calibrate = " << (c.calibrate ? "true" : "false") << "\n"
     << "layers = " << str(f.layer_set.to_string()) << "\n"
     << "alpha = " << format_double(f.alpha) << "\n"
     << "kl_mode = " << str(detail::kl_mode_name(f.kl_mode)) << "\n"
     << "q_floor = " << format_double(f.q_floor) << "\n\n";
  os << "[limits]\n"
     << "t_min = " << format_double(f.t_min) << "\n"
     << "t_max = " << format_double(f.t_max) << "\n\n";
  os << "[sampler]\n"
     << "kind = " << str(to_string(s.kind)) << "\n"
     << "k = " << s.k << "\n"
     << "p = " << format_double(s.p) << "\n"
     << "tau = " << format_double(s.tau) << "\n\n";
  os << "[prompts]\n"
     << "path = " << str(c.prompts_path) << "\n"
     << "synthetic_count = " << c.synthetic_prompts << "\n"
     << "synthetic_length = " << c.synthetic_prompt_length << "\n"
     << "synthetic_seed = " << c.synthetic_seed << "\n\n";
  os << "[calibration]\n"
     << "path = " << str(c.calibration_path) << "\n"
     << "synthetic_count = " << c.calibration_prompts << "\n"
     << "synthetic_seed = " << c.calibration_seed << "\n\n";
  os << "[output]\n"
     << "path = " << str(c.output_path) << "\n";
  return os.str();
}

/// Non-fatal findings to report at load time.
inline std::vector<std::string> config_warnings(const RunConfig& c) {
  std::vector<std::string> out;
  const auto& f = c.decode.focus;
  if (f.transform == TransformKind::Linear && f.sigma > 0.0) {
    out.push_back("focus.sigma > 0 with the linear transform raises temperature as KA rises");
  }
  if (f.transform == TransformKind::Sigmoid && f.sigma >= 1.0) {
    out.push_back("focus.sigma >= 1 with the sigmoid transform; the curve is meant for sigma < 1");
  }
  return out;
}

// Prompt sets.

/// JSONL, one {"id": ..., "tokens": [...], "dataset": ...} object per line.
inline std::vector<Prompt> load_prompts(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorKind::Io, "cannot open prompt file " + path);
  std::vector<Prompt> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Prompt p;
      p.id = j.at("id").get<std::string>();
      p.tokens = j.at("tokens").get<std::vector<TokenId>>();
      p.dataset = j.value("dataset", std::string("default"));
      require(!p.tokens.empty(), ErrorKind::InvalidInput, "empty prompt");
      out.push_back(std::move(p));
    } catch (const std::exception& e) {
      throw Error(ErrorKind::Format, path + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  require(!out.empty(), ErrorKind::InvalidInput, "prompt file " + path + " is empty");
  return out;
}

/// `count` prompts of `length` uniform token ids, ids "<prefix>-<i>".
inline std::vector<Prompt> synthetic_prompts(std::size_t count, std::size_t length, std::size_t vocab,
                                             std::uint64_t seed, const std::string& prefix = "synthetic") {
  require(count >= 1 && length >= 1 && vocab >= 1, ErrorKind::InvalidArgument,
          "synthetic prompts need positive count, length and vocab");
  SplitMix64 rng(seed);
  std::vector<Prompt> out;
  for (std::size_t i = 0; i < count; ++i) {
    Prompt p;
    p.id = prefix + "-" + std::to_string(i);
    for (std::size_t t = 0; t < length; ++t) {
      p.tokens.push_back(static_cast<TokenId>(rng() % vocab));
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline std::unique_ptr<LayerProvider> make_provider(const RunConfig& c) {
  if (c.provider == "builtin" || c.provider == "builtin-identity") {
    ModelConfig mc;
    mc.seed = c.model_seed;
    mc.normalize_taps = c.normalize_taps;
    mc.identity_blocks = c.provider == "builtin-identity";
    return std::make_unique<TinyTransformer>(mc);
  }
  if (c.provider.rfind("trace:", 0) == 0) {
    auto trace = std::make_shared<const Trace>(read_trace_file(c.provider.substr(6)));
    return std::make_unique<TraceProvider>(std::move(trace), c.replay);
  }
  throw ConfigError("provider.source", "expected builtin, builtin-identity or trace:<path>");
}

inline std::vector<Prompt> resolve_prompts(const RunConfig& c, const LayerProvider& provider) {
  if (!c.prompts_path.empty()) return load_prompts(c.prompts_path);
  if (auto* tp = dynamic_cast<const TraceProvider*>(&provider)) {
    return {Prompt{"trace", tp->trace().context_tokens}};
  }
  return synthetic_prompts(c.synthetic_prompts, c.synthetic_prompt_length,
                           provider.meta().vocab_size, c.synthetic_seed);
}

inline std::vector<Prompt> resolve_calibration_prompts(const RunConfig& c, const LayerProvider& provider) {
  if (!c.calibration_path.empty()) return load_prompts(c.calibration_path);
  if (auto* tp = dynamic_cast<const TraceProvider*>(&provider)) {
    return {Prompt{"trace", tp->trace().context_tokens}};
  }
  return synthetic_prompts(c.calibration_prompts, c.synthetic_prompt_length,
                           provider.meta().vocab_size, c.calibration_seed, "calibration");
}

}  // namespace dfd
