#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dfd/error.hpp"

namespace dfd {

struct ModelMeta {
  std::uint64_t num_layers = 0;
  std::uint64_t vocab_size = 0;
  std::uint64_t d_model = 0;
  std::uint64_t param_count = 0;
  std::string name;

  void validate() const {
    require(num_layers >= 2, ErrorKind::InvalidInput, "model needs at least 2 layers");
    require(vocab_size >= 2, ErrorKind::InvalidInput, "vocabulary needs at least 2 tokens");
    require(d_model >= 1, ErrorKind::InvalidInput, "d_model must be positive");
  }

  friend bool operator==(const ModelMeta&, const ModelMeta&) = default;
};

/// Raw LM-head logits of every layer at one decoding position. Layers are
/// numbered 1..N; layer N is the model output and defines the sampling
/// distribution. Stored as f32, the trace wire width.
class LayerLogits {
 public:
  LayerLogits() = default;
  LayerLogits(std::size_t num_layers, std::size_t vocab, std::vector<float> values,
              std::size_t step_index = 0)
      : num_layers_(num_layers), vocab_(vocab), step_index_(step_index), values_(std::move(values)) {
    require(num_layers_ >= 2, ErrorKind::InvalidInput, "LayerLogits needs N >= 2");
    require(vocab_ >= 2, ErrorKind::InvalidInput, "LayerLogits needs V >= 2");
    require(values_.size() == num_layers_ * vocab_, ErrorKind::InvalidInput,
            "LayerLogits payload size does not match N*V");
  }

  std::size_t num_layers() const { return num_layers_; }
  std::size_t vocab() const { return vocab_; }
  std::size_t step_index() const { return step_index_; }
  void set_step_index(std::size_t i) { step_index_ = i; }

  std::span<const float> layer(std::size_t i) const {
    require(i >= 1 && i <= num_layers_, ErrorKind::InvalidArgument, "layer index out of range");
    return {values_.data() + (i - 1) * vocab_, vocab_};
  }
  std::span<float> layer(std::size_t i) {
    require(i >= 1 && i <= num_layers_, ErrorKind::InvalidArgument, "layer index out of range");
    return {values_.data() + (i - 1) * vocab_, vocab_};
  }
  std::span<const float> final_layer() const { return layer(num_layers_); }

  const std::vector<float>& values() const { return values_; }

  friend bool operator==(const LayerLogits&, const LayerLogits&) = default;

 private:
  std::size_t num_layers_ = 0;
  std::size_t vocab_ = 0;
  std::size_t step_index_ = 0;
  std::vector<float> values_;
};

/// Source of per-layer logits. Implementations are immutable once built, so
/// a single instance may serve any number of concurrent generations.
class LayerProvider {
 public:
  virtual ~LayerProvider() = default;
  virtual ModelMeta meta() const = 0;
  /// Logits of every layer at the last position of `context`.
  virtual LayerLogits step(std::span<const TokenId> context) const = 0;
};

}  // namespace dfd
