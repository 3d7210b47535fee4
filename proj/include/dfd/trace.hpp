#pragma once

// Recorded per-layer logits, replayable as a LayerProvider.
//
// Binary layout (all integers and floats little-endian):
//   "DFDT"                       4 bytes magic
//   version                      u32 (= 1)
//   num_layers, vocab_size,
//   d_model, param_count         u64 each
//   name                         u16 byte length + UTF-8 bytes
//   float width                  u32 (= 4)
//   prompt length                u32, then that many u32 token ids
//   step count                   u32
//   per step                     u32 emitted token id, then N*V f32 logits
//                                (layer 1 first, layer N last)
//
// JSONL variant for hand-written fixtures: first line
//   {"format":"dfdt-jsonl","version":1,"meta":{...},"context_tokens":[...]}
// then one {"token":id,"logits":[[layer 1], ..., [layer N]]} object per line.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfd/error.hpp"
#include "dfd/provider.hpp"

namespace dfd {

inline constexpr char kTraceMagic[4] = {'D', 'F', 'D', 'T'};
inline constexpr std::uint32_t kTraceVersion = 1;
inline constexpr std::uint32_t kTraceFloatWidth = 4;

struct TraceStep {
  TokenId emitted = 0;
  LayerLogits logits;

  friend bool operator==(const TraceStep&, const TraceStep&) = default;
};

struct Trace {
  ModelMeta meta;
  std::vector<TokenId> context_tokens;
  std::vector<TraceStep> steps;

  void validate() const {
    meta.validate();
    for (TokenId t : context_tokens) {
      require(t < meta.vocab_size, ErrorKind::InvalidInput, "prompt token outside vocabulary");
    }
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const auto& s = steps[i];
      require(s.emitted < meta.vocab_size, ErrorKind::InvalidInput,
              "emitted token outside vocabulary at step " + std::to_string(i));
      require(s.logits.num_layers() == meta.num_layers && s.logits.vocab() == meta.vocab_size,
              ErrorKind::InvalidInput, "step logits shape disagrees with meta");
    }
  }

  friend bool operator==(const Trace&, const Trace&) = default;
};

enum class TraceEncoding { Binary, Jsonl };

namespace detail {

class ByteWriter {
 public:
  explicit ByteWriter(std::ostream& os) : os_(os) {}
  void bytes(const void* data, std::size_t n) { os_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n)); }
  template <typename U>
  void uint(U value) {
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(value >> (8 * i));
    bytes(buf, sizeof(U));
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }

 private:
  std::ostream& os_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& data) : data_(data) {}

  template <typename U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(uint<std::uint32_t>(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) {
      throw Error(ErrorKind::Corruption, std::string("trace truncated while reading ") + what +
                                             " at byte offset " + std::to_string(pos_));
    }
  }

  const std::string& data_;
  std::size_t pos_ = 0;
};

inline nlohmann::json meta_to_json(const ModelMeta& m) {
  return {{"num_layers", m.num_layers},
          {"vocab_size", m.vocab_size},
          {"d_model", m.d_model},
          {"param_count", m.param_count},
          {"name", m.name}};
}

inline ModelMeta meta_from_json(const nlohmann::json& j) {
  ModelMeta m;
  m.num_layers = j.at("num_layers").get<std::uint64_t>();
  m.vocab_size = j.at("vocab_size").get<std::uint64_t>();
  m.d_model = j.at("d_model").get<std::uint64_t>();
  m.param_count = j.value("param_count", std::uint64_t{0});
  m.name = j.value("name", std::string{});
  return m;
}

inline Trace read_binary_trace(const std::string& data) {
  ByteReader in(data);
  const std::string magic = in.str(4, "magic");
  require(std::memcmp(magic.data(), kTraceMagic, 4) == 0, ErrorKind::Format,
          "not a DFDT trace (bad magic)");
  const auto version = in.uint<std::uint32_t>("version");
  require(version == kTraceVersion, ErrorKind::Format,
          "unsupported trace version " + std::to_string(version));
  Trace t;
  t.meta.num_layers = in.uint<std::uint64_t>("num_layers");
  t.meta.vocab_size = in.uint<std::uint64_t>("vocab_size");
  t.meta.d_model = in.uint<std::uint64_t>("d_model");
  t.meta.param_count = in.uint<std::uint64_t>("param_count");
  const auto name_len = in.uint<std::uint16_t>("name length");
  t.meta.name = in.str(name_len, "name");
  const auto width = in.uint<std::uint32_t>("float width");
  require(width == kTraceFloatWidth, ErrorKind::Format,
          "unsupported float width " + std::to_string(width));
  try {
    t.meta.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::Format, std::string("bad trace meta: ") + e.what());
  }

  const auto prompt_len = in.uint<std::uint32_t>("prompt length");
  t.context_tokens.reserve(std::min<std::size_t>(prompt_len, in.remaining() / 4));
  for (std::uint32_t i = 0; i < prompt_len; ++i) t.context_tokens.push_back(in.uint<std::uint32_t>("prompt token"));

  const auto step_count = in.uint<std::uint32_t>("step count");
  const std::size_t n = t.meta.num_layers;
  const std::size_t v = t.meta.vocab_size;
  for (std::uint32_t s = 0; s < step_count; ++s) {
    TraceStep step;
    step.emitted = in.uint<std::uint32_t>("emitted token");
    std::vector<float> values(n * v);
    for (float& x : values) x = in.f32("logits");
    step.logits = LayerLogits(n, v, std::move(values), s);
    t.steps.push_back(std::move(step));
  }
  require(in.remaining() == 0, ErrorKind::Corruption,
          "trailing bytes after last step at byte offset " + std::to_string(in.offset()));
  t.validate();
  return t;
}

inline Trace read_jsonl_trace(const std::string& data) {
  std::istringstream lines(data);
  std::string line;
  std::size_t line_no = 0;
  Trace t;
  bool have_header = false;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Corruption,
                  "trace line " + std::to_string(line_no) + ": " + e.what());
    }
    try {
      if (!have_header) {
        require(j.value("format", std::string{}) == "dfdt-jsonl", ErrorKind::Format,
                "JSONL trace header missing format \"dfdt-jsonl\"");
        require(j.value("version", 0u) == kTraceVersion, ErrorKind::Format,
                "unsupported JSONL trace version");
        t.meta = meta_from_json(j.at("meta"));
        t.meta.validate();
        t.context_tokens = j.at("context_tokens").get<std::vector<TokenId>>();
        have_header = true;
        continue;
      }
      TraceStep step;
      step.emitted = j.at("token").get<TokenId>();
      const auto rows = j.at("logits").get<std::vector<std::vector<float>>>();
      require(rows.size() == t.meta.num_layers, ErrorKind::InvalidInput,
              "step has wrong number of layer rows");
      std::vector<float> values;
      for (const auto& r : rows) {
        require(r.size() == t.meta.vocab_size, ErrorKind::InvalidInput, "layer row has wrong width");
        values.insert(values.end(), r.begin(), r.end());
      }
      step.logits = LayerLogits(t.meta.num_layers, t.meta.vocab_size, std::move(values),
                                t.steps.size());
      t.steps.push_back(std::move(step));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Format, "trace line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::Format) throw;
      throw Error(ErrorKind::Format, "trace line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  require(have_header, ErrorKind::Format, "empty JSONL trace");
  t.validate();
  return t;
}

}  // namespace detail

inline void write_trace(const Trace& trace, std::ostream& os,
                        TraceEncoding encoding = TraceEncoding::Binary) {
  trace.validate();
  if (encoding == TraceEncoding::Jsonl) {
    nlohmann::json header = {{"format", "dfdt-jsonl"},
                             {"version", kTraceVersion},
                             {"meta", detail::meta_to_json(trace.meta)},
                             {"context_tokens", trace.context_tokens}};
    os << header.dump() << '\n';
    for (const auto& s : trace.steps) {
      nlohmann::json rows = nlohmann::json::array();
      for (std::size_t l = 1; l <= s.logits.num_layers(); ++l) {
        const auto row = s.logits.layer(l);
        rows.push_back(std::vector<float>(row.begin(), row.end()));
      }
      os << nlohmann::json{{"token", s.emitted}, {"logits", rows}}.dump() << '\n';
    }
    return;
  }

  require(trace.meta.name.size() <= 0xFFFF, ErrorKind::InvalidArgument, "model name too long");
  require(trace.context_tokens.size() <= 0xFFFFFFFFu && trace.steps.size() <= 0xFFFFFFFFu,
          ErrorKind::InvalidArgument, "trace too long for u32 counts");
  detail::ByteWriter out(os);
  out.bytes(kTraceMagic, 4);
  out.uint<std::uint32_t>(kTraceVersion);
  out.uint<std::uint64_t>(trace.meta.num_layers);
  out.uint<std::uint64_t>(trace.meta.vocab_size);
  out.uint<std::uint64_t>(trace.meta.d_model);
  out.uint<std::uint64_t>(trace.meta.param_count);
  out.uint<std::uint16_t>(static_cast<std::uint16_t>(trace.meta.name.size()));
  out.bytes(trace.meta.name.data(), trace.meta.name.size());
  out.uint<std::uint32_t>(kTraceFloatWidth);
  out.uint<std::uint32_t>(static_cast<std::uint32_t>(trace.context_tokens.size()));
  for (TokenId t : trace.context_tokens) out.uint<std::uint32_t>(t);
  out.uint<std::uint32_t>(static_cast<std::uint32_t>(trace.steps.size()));
  for (const auto& s : trace.steps) {
    out.uint<std::uint32_t>(s.emitted);
    for (float v : s.logits.values()) out.f32(v);
  }
}

/// Parses either encoding, chosen by the leading bytes.
inline Trace read_trace(std::istream& is) {
  const std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (data.size() >= 4 && std::memcmp(data.data(), kTraceMagic, 4) == 0) {
    return detail::read_binary_trace(data);
  }
  const auto first = data.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && data[first] == '{') return detail::read_jsonl_trace(data);
  throw Error(ErrorKind::Format, "not a DFDT trace (bad magic)");
}

inline void write_trace_file(const Trace& trace, const std::string& path,
                             TraceEncoding encoding = TraceEncoding::Binary) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::Io, "cannot open " + path + " for writing");
  write_trace(trace, os, encoding);
  require(static_cast<bool>(os), ErrorKind::Io, "write failed for " + path);
}

inline Trace read_trace_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::Io, "cannot open " + path);
  return read_trace(is);
}

/// Size in bytes of the fixed header plus prompt block of the binary encoding.
inline std::size_t trace_header_bytes(const Trace& t) {
  return 4 + 4 + 4 * 8 + 2 + t.meta.name.size() + 4 + 4 + 4 * t.context_tokens.size() + 4;
}

enum class ReplayMatch {
  /// Context must equal prompt + recorded emitted tokens.
  Strict,
  /// Only the context length selects the step; token identity is not checked.
  Positional,
};

/// Replays a recorded trace. Stateless: the step is located from the context
/// length, so one instance serves concurrent readers.
class TraceProvider : public LayerProvider {
 public:
  explicit TraceProvider(std::shared_ptr<const Trace> trace, ReplayMatch match = ReplayMatch::Strict)
      : trace_(std::move(trace)), match_(match) {
    require(trace_ != nullptr, ErrorKind::InvalidArgument, "null trace");
    trace_->validate();
  }

  ModelMeta meta() const override { return trace_->meta; }
  const Trace& trace() const { return *trace_; }

  LayerLogits step(std::span<const TokenId> context) const override {
    const auto& prompt = trace_->context_tokens;
    require(context.size() >= prompt.size() && !context.empty(), ErrorKind::TraceDivergence,
            "context shorter than the recorded prompt");
    const std::size_t k = context.size() - prompt.size();
    if (match_ == ReplayMatch::Strict) {
      for (std::size_t i = 0; i < prompt.size(); ++i) {
        require(context[i] == prompt[i], ErrorKind::TraceDivergence,
                "context diverges from recorded prompt at position " + std::to_string(i));
      }
      for (std::size_t i = 0; i < k && i < trace_->steps.size(); ++i) {
        require(context[prompt.size() + i] == trace_->steps[i].emitted,
                ErrorKind::TraceDivergence,
                "context diverges from recorded tokens at step " + std::to_string(i));
      }
    }
    require(k < trace_->steps.size(), ErrorKind::EndOfTrace,
            "trace exhausted after " + std::to_string(trace_->steps.size()) + " steps");
    return trace_->steps[k].logits;
  }

 private:
  std::shared_ptr<const Trace> trace_;
  ReplayMatch match_;
};

/// Greedy-decodes `steps` tokens from `provider`, recording every step.
inline Trace record_greedy_trace(const LayerProvider& provider, std::vector<TokenId> prompt,
                                 std::size_t steps) {
  require(!prompt.empty(), ErrorKind::InvalidArgument, "prompt must be nonempty");
  Trace t;
  t.meta = provider.meta();
  t.context_tokens = prompt;
  std::vector<TokenId> context = std::move(prompt);
  for (std::size_t s = 0; s < steps; ++s) {
    LayerLogits ll = provider.step(context);
    ll.set_step_index(s);
    const auto row = ll.final_layer();
    const auto best = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
    t.steps.push_back({best, std::move(ll)});
    context.push_back(best);
  }
  return t;
}

}  // namespace dfd
