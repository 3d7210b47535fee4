#include <gtest/gtest.h>

#include <memory>
#include <sstream>
#include <vector>

#include "dfd/ka.hpp"
#include "dfd/model.hpp"
#include "dfd/trace.hpp"

using namespace dfd;

namespace {

const std::vector<TokenId> kContext{3, 14, 15, 9, 26, 5};

Trace small_trace(std::size_t steps = 3) {
  TinyTransformer model;
  return record_greedy_trace(model, kContext, steps);
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorKind::Io;
}

}  // namespace

TEST(BuiltinModel, ReferenceDimensions) {
  TinyTransformer model;
  const auto m = model.meta();
  EXPECT_EQ(m.num_layers, 4u);
  EXPECT_EQ(m.vocab_size, 64u);
  EXPECT_EQ(m.d_model, 32u);
  EXPECT_EQ(model.config().num_heads, 4u);
  EXPECT_EQ(model.config().max_context, 128u);
  EXPECT_EQ(m.param_count, model.parameter_count());
}

TEST(BuiltinModel, StepIsBitwiseDeterministic) {
  TinyTransformer a;
  TinyTransformer b;
  const auto x = a.step(kContext);
  EXPECT_EQ(x, a.step(kContext));
  EXPECT_EQ(x, b.step(kContext));
  EXPECT_EQ(x.num_layers(), 4u);
  EXPECT_EQ(x.vocab(), 64u);
  for (float v : x.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(BuiltinModel, SeedChangesWeights) {
  ModelConfig other;
  other.seed = 99;
  EXPECT_NE(TinyTransformer().step(kContext), TinyTransformer(other).step(kContext));
}

TEST(BuiltinModel, IdentityBlocksGiveEqualRowsAndZeroKa) {
  ModelConfig cfg;
  cfg.identity_blocks = true;
  TinyTransformer model(cfg);
  const auto ll = model.step(kContext);
  for (std::size_t l = 1; l < ll.num_layers(); ++l) {
    const auto a = ll.layer(l);
    const auto b = ll.final_layer();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }
  EXPECT_EQ(compute_ka(ll).ka, 0.0);
}

TEST(BuiltinModel, TapNormalizationOnlyAffectsInternalRows) {
  ModelConfig raw;
  raw.normalize_taps = false;
  const auto on = TinyTransformer().step(kContext);
  const auto off = TinyTransformer(raw).step(kContext);
  const auto f_on = on.final_layer();
  const auto f_off = off.final_layer();
  EXPECT_TRUE(std::equal(f_on.begin(), f_on.end(), f_off.begin()));
  const auto i_on = on.layer(2);
  const auto i_off = off.layer(2);
  EXPECT_FALSE(std::equal(i_on.begin(), i_on.end(), i_off.begin()));
}

TEST(BuiltinModel, LongContextIsWindowed) {
  TinyTransformer model;
  std::vector<TokenId> ctx(200);
  for (std::size_t i = 0; i < ctx.size(); ++i) ctx[i] = static_cast<TokenId>(i % 64);
  const std::vector<TokenId> tail(ctx.end() - 128, ctx.end());
  EXPECT_EQ(model.step(ctx), model.step(tail));
}

TEST(BuiltinModel, RejectsOutOfVocabularyToken) {
  TinyTransformer model;
  const std::vector<TokenId> bad{1, 64};
  EXPECT_EQ(kind_of([&] { model.step(bad); }), ErrorKind::InvalidArgument);
  EXPECT_EQ(kind_of([&] { model.step(std::vector<TokenId>{}); }), ErrorKind::InvalidArgument);
}

TEST(TraceFormat, BinaryRoundTripAndReplay) {
  const Trace t = small_trace(5);
  std::stringstream buf;
  write_trace(t, buf);
  const Trace back = read_trace(buf);
  EXPECT_EQ(back, t);

  TraceProvider replay(std::make_shared<const Trace>(back));
  TinyTransformer model;
  std::vector<TokenId> ctx = kContext;
  for (const auto& s : t.steps) {
    const auto live = model.step(ctx);
    const auto replayed = replay.step(ctx);
    EXPECT_EQ(replayed.values(), live.values());
    EXPECT_NEAR(compute_ka(replayed).ka, compute_ka(live).ka, 1e-6);
    ctx.push_back(s.emitted);
  }
}

TEST(TraceFormat, JsonlRoundTripAndAutodetect) {
  const Trace t = small_trace(2);
  std::stringstream buf;
  write_trace(t, buf, TraceEncoding::Jsonl);
  EXPECT_EQ(buf.str().front(), '{');
  EXPECT_EQ(read_trace(buf), t);
}

TEST(TraceFormat, PayloadSizeMatchesWireLayout) {
  const Trace t = small_trace(3);
  std::stringstream buf;
  write_trace(t, buf);
  EXPECT_EQ(buf.str().size(), trace_header_bytes(t) + 3 * (4 + 4 * 64 * 4));
  // magic + version + 4 u64 + name length + "builtin" + width + prompt + ids + count
  EXPECT_EQ(trace_header_bytes(t), 4 + 4 + 32 + 2 + 7 + 4 + 4 + 4 * kContext.size() + 4);
}

TEST(TraceFormat, BadMagicIsFormatError) {
  std::stringstream buf;
  write_trace(small_trace(1), buf);
  std::string bytes = buf.str();
  bytes[0] = 'X';
  std::stringstream bad(bytes);
  EXPECT_EQ(kind_of([&] { read_trace(bad); }), ErrorKind::Format);
}

TEST(TraceFormat, BadVersionIsFormatError) {
  std::stringstream buf;
  write_trace(small_trace(1), buf);
  std::string bytes = buf.str();
  bytes[4] = 7;
  std::stringstream bad(bytes);
  EXPECT_EQ(kind_of([&] { read_trace(bad); }), ErrorKind::Format);
}

TEST(TraceFormat, TruncationReportsByteOffset) {
  std::stringstream buf;
  write_trace(small_trace(2), buf);
  const std::string bytes = buf.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 10));
  try {
    read_trace(cut);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Corruption);
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
  }
}

TEST(TraceReplay, DivergenceAndExhaustion) {
  TraceProvider replay(std::make_shared<const Trace>(small_trace(2)));
  const auto& steps = replay.trace().steps;
  std::vector<TokenId> ctx = kContext;
  replay.step(ctx);
  ctx.push_back((steps[0].emitted + 1) % 64);
  EXPECT_EQ(kind_of([&] { replay.step(ctx); }), ErrorKind::TraceDivergence);

  std::vector<TokenId> wrong_prompt = kContext;
  wrong_prompt[0] ^= 1;
  EXPECT_EQ(kind_of([&] { replay.step(wrong_prompt); }), ErrorKind::TraceDivergence);

  ctx = kContext;
  ctx.push_back(steps[0].emitted);
  ctx.push_back(steps[1].emitted);
  EXPECT_EQ(kind_of([&] { replay.step(ctx); }), ErrorKind::EndOfTrace);
}

TEST(TraceReplay, PositionalModeIgnoresTokenIdentity) {
  const Trace t = small_trace(2);
  TraceProvider replay(std::make_shared<const Trace>(t), ReplayMatch::Positional);
  std::vector<TokenId> ctx = kContext;
  ctx.push_back((t.steps[0].emitted + 1) % 64);
  EXPECT_EQ(replay.step(ctx), t.steps[1].logits);
}
