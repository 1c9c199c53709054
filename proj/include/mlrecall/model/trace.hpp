#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mlrecall/core/error.hpp"
#include "mlrecall/model/config.hpp"

namespace mlrecall {

// Which sites a forward pass records. Layer indices for the residual stream
// run over [0, n_layers]: slot n_layers is the stream after the last layer.
struct CaptureFilter {
  std::optional<std::vector<std::size_t>> layers; // nullopt = every layer
  std::optional<std::vector<Position>> positions; // nullopt = every position
  bool residual = true;
  bool attn_out = true;
  bool mlp_out = true;
  bool attn_weights = true;
  bool head_out = false;   // per-head attention output before W_O, width d_head
  bool mlp_hidden = false; // gated MLP hidden activation, width d_ff

  static CaptureFilter all() { return {}; }

  static CaptureFilter last_position() {
    CaptureFilter f;
    f.positions = std::vector<Position>{kLast};
    f.attn_weights = false;
    return f;
  }

  static CaptureFilter everything() {
    CaptureFilter f;
    f.head_out = true;
    f.mlp_hidden = true;
    return f;
  }

  bool wants_layer(std::size_t layer) const {
    return !layers || std::find(layers->begin(), layers->end(), layer) != layers->end();
  }
};

inline std::size_t resolve_position(Position p, std::size_t seq_len) {
  const auto n = static_cast<Position>(seq_len);
  const Position r = p < 0 ? n + p : p;
  if (r < 0 || r >= n)
    throw IndexError("position " + std::to_string(p) + " outside prompt of length " + std::to_string(seq_len));
  return static_cast<std::size_t>(r);
}

// Dense [slot][position][width] storage with a per-site capture mask.
template <typename T>
class SiteTensor {
public:
  SiteTensor() = default;
  SiteTensor(std::string name, std::size_t slots, std::size_t seq_len, std::size_t width)
      : name_(std::move(name)), slots_(slots), seq_len_(seq_len), width_(width) {}

  std::size_t slots() const { return slots_; }
  std::size_t width() const { return width_; }

  bool has(std::size_t slot, std::size_t pos) const {
    return slot < slots_ && pos < seq_len_ && !mask_.empty() && mask_[slot * seq_len_ + pos];
  }

  std::span<const T> at(std::size_t slot, std::size_t pos) const {
    if (!has(slot, pos))
      throw MissingCaptureError(name_ + "[" + std::to_string(slot) + "][" + std::to_string(pos) + "] was not captured");
    return std::span<const T>(data_).subspan((slot * seq_len_ + pos) * width_, width_);
  }

  void set(std::size_t slot, std::size_t pos, std::span<const T> v) {
    if (data_.empty()) {
      data_.assign(slots_ * seq_len_ * width_, T{});
      mask_.assign(slots_ * seq_len_, 0);
    }
    std::copy(v.begin(), v.end(), data_.begin() + static_cast<std::ptrdiff_t>((slot * seq_len_ + pos) * width_));
    mask_[slot * seq_len_ + pos] = 1;
  }

  bool operator==(const SiteTensor&) const = default;

private:
  std::string name_;
  std::size_t slots_ = 0, seq_len_ = 0, width_ = 0;
  std::vector<T> data_;
  std::vector<char> mask_;
};

// Cached activations of one forward pass.
template <typename T>
struct ForwardTrace {
  std::vector<TokenId> prompt_token_ids;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  SiteTensor<T> residual_pre; // slots [0, n_layers]
  SiteTensor<T> attn_out;     // slots [0, n_layers)
  SiteTensor<T> mlp_out;      // slots [0, n_layers)
  SiteTensor<T> head_out;     // slot = layer*n_heads + head
  SiteTensor<T> mlp_hidden;
  // attn_weights[layer] is empty when the layer was not captured; otherwise
  // [head][query][key] over the full prompt.
  std::vector<std::vector<T>> attn_weights;
  std::vector<std::vector<T>> final_logits; // [position][vocab]

  std::size_t seq_len() const { return prompt_token_ids.size(); }
  std::size_t last() const { return seq_len() - 1; }
  std::size_t pos(Position p) const { return resolve_position(p, seq_len()); }

  std::span<const T> residual(std::size_t layer, Position p = kLast) const { return residual_pre.at(layer, pos(p)); }
  std::span<const T> attn(std::size_t layer, Position p = kLast) const { return attn_out.at(layer, pos(p)); }
  std::span<const T> mlp(std::size_t layer, Position p = kLast) const { return mlp_out.at(layer, pos(p)); }
  std::span<const T> head(std::size_t layer, std::size_t h, Position p = kLast) const {
    return head_out.at(layer * n_heads + h, pos(p));
  }
  std::span<const T> logits(Position p = kLast) const { return final_logits.at(pos(p)); }

  bool has_attn_weights(std::size_t layer) const {
    return layer < attn_weights.size() && !attn_weights[layer].empty();
  }

  T attn_weight(std::size_t layer, std::size_t h, std::size_t q, std::size_t k) const {
    if (!has_attn_weights(layer))
      throw MissingCaptureError("attention weights of layer " + std::to_string(layer) + " were not captured");
    const auto n = seq_len();
    return attn_weights[layer][(h * n + q) * n + k];
  }

  std::span<const T> attn_row(std::size_t layer, std::size_t h, std::size_t q) const {
    if (!has_attn_weights(layer))
      throw MissingCaptureError("attention weights of layer " + std::to_string(layer) + " were not captured");
    const auto n = seq_len();
    return std::span<const T>(attn_weights[layer]).subspan((h * n + q) * n, n);
  }

  bool operator==(const ForwardTrace&) const = default;
};

} // namespace mlrecall
