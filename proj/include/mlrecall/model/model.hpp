#pragma once

#include <cmath>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mlrecall/core/hash.hpp"
#include "mlrecall/model/config.hpp"
#include "mlrecall/model/tokenizer.hpp"

namespace mlrecall {

// Row-major weight matrices; shapes are [out][in] so projections are W·x.
template <typename T>
struct LayerWeights {
  std::vector<T> attn_norm; // [d_model]
  std::vector<T> wq;        // [n_heads*d_head][d_model]
  std::vector<T> wk;        // [n_kv_heads*d_head][d_model]
  std::vector<T> wv;        // [n_kv_heads*d_head][d_model]
  std::vector<T> wo;        // [d_model][n_heads*d_head]
  std::vector<T> mlp_norm;  // [d_model]
  std::vector<T> w_gate;    // [d_ff][d_model]
  std::vector<T> w_up;      // [d_ff][d_model]
  std::vector<T> w_down;    // [d_model][d_ff]
};

template <typename T>
struct Weights {
  std::vector<T> embed; // [vocab][d_model]
  std::vector<LayerWeights<T>> layers;
  std::vector<T> final_norm; // [d_model]
  std::vector<T> unembed;    // [vocab][d_model], the unembedding matrix E
};

template <typename T>
void matvec(std::span<const T> w, std::size_t rows, std::size_t cols, std::span<const T> x, std::span<T> out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = w.data() + r * cols;
    T acc = 0;
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
    out[r] = acc;
  }
}

template <typename T>
std::vector<T> rms_norm(std::span<const T> x, std::span<const T> weight, double eps) {
  double ss = 0;
  for (T v : x) ss += static_cast<double>(v) * static_cast<double>(v);
  const T inv = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps));
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * weight[i];
  return out;
}

// A loaded decoder-only model. Immutable after construction apart from test
// fixtures that edit weights and then call refresh_fingerprint().
template <typename T = float>
class Model {
public:
  using Scalar = T;

  Model(ModelConfig config, Weights<T> weights, std::shared_ptr<const Tokenizer> tokenizer, std::string backend_id)
      : config_(std::move(config)), weights_(std::move(weights)), tokenizer_(std::move(tokenizer)),
        backend_id_(std::move(backend_id)) {
    config_.validate();
    if (!tokenizer_ || tokenizer_->vocab_size() != config_.vocab_size)
      throw DimensionError("tokenizer vocabulary does not match vocab_size");
    check_shapes();
    refresh_fingerprint();
  }

  const ModelConfig& config() const { return config_; }
  const Weights<T>& weights() const { return weights_; }
  Weights<T>& mutable_weights() { return weights_; }
  const Tokenizer& tokenizer() const { return *tokenizer_; }
  std::shared_ptr<const Tokenizer> shared_tokenizer() const { return tokenizer_; }
  const std::string& backend_id() const { return backend_id_; }
  const std::string& fingerprint() const { return fingerprint_; }

  std::size_t n_layers() const { return config_.n_layers; }
  std::size_t n_heads() const { return config_.n_heads; }
  std::size_t d_model() const { return config_.d_model; }
  std::size_t d_head() const { return config_.d_head(); }
  std::size_t vocab_size() const { return config_.vocab_size; }

  std::span<const T> unembedding_row(TokenId id) const {
    return std::span<const T>(weights_.unembed).subspan(static_cast<std::size_t>(id) * d_model(), d_model());
  }

  std::vector<T> final_norm(std::span<const T> h) const {
    return rms_norm<T>(h, weights_.final_norm, config_.norm_eps);
  }

  // E·x without normalization.
  std::vector<T> unembed(std::span<const T> x) const {
    std::vector<T> logits(vocab_size());
    matvec<T>(weights_.unembed, vocab_size(), d_model(), x, logits);
    return logits;
  }

  // Recomputes the content fingerprint after weights were edited in place.
  void refresh_fingerprint() {
    Sha256 h;
    nlohmann::json cfg = config_;
    h.update(cfg.dump());
    for (const auto& p : tokenizer_->pieces()) h.update(p).update(std::string_view("\0", 1));
    auto feed = [&h](const std::vector<T>& v) {
      for (T x : v) {
        const float f = static_cast<float>(x);
        h.update(std::string_view(reinterpret_cast<const char*>(&f), sizeof f));
      }
    };
    feed(weights_.embed);
    for (const auto& l : weights_.layers) {
      for (const auto* m : {&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.mlp_norm, &l.w_gate, &l.w_up, &l.w_down})
        feed(*m);
    }
    feed(weights_.final_norm);
    feed(weights_.unembed);
    fingerprint_ = h.hex().substr(0, 16);
  }

  // Same weights at another precision. Stored weights originate as f32, so
  // widening to double is exact.
  template <typename U>
  Model<U> as() const {
    auto cast = [](const std::vector<T>& v) { return std::vector<U>(v.begin(), v.end()); };
    Weights<U> w;
    w.embed = cast(weights_.embed);
    w.final_norm = cast(weights_.final_norm);
    w.unembed = cast(weights_.unembed);
    for (const auto& l : weights_.layers) {
      w.layers.push_back({cast(l.attn_norm), cast(l.wq), cast(l.wk), cast(l.wv), cast(l.wo), cast(l.mlp_norm),
                          cast(l.w_gate), cast(l.w_up), cast(l.w_down)});
    }
    return Model<U>(config_, std::move(w), tokenizer_, backend_id_);
  }

private:
  ModelConfig config_;
  Weights<T> weights_;
  std::shared_ptr<const Tokenizer> tokenizer_;
  std::string backend_id_;
  std::string fingerprint_;

  void check_shapes() const {
    const auto d = config_.d_model, v = config_.vocab_size, f = config_.d_ff;
    const auto qd = config_.n_heads * config_.d_head(), kvd = config_.kv_dim();
    auto expect = [](const std::vector<T>& m, std::size_t n, const char* what) {
      if (m.size() != n) throw DimensionError(std::string("weight '") + what + "' has wrong size");
    };
    expect(weights_.embed, v * d, "embed");
    expect(weights_.unembed, v * d, "unembed");
    expect(weights_.final_norm, d, "final_norm");
    if (weights_.layers.size() != config_.n_layers) throw DimensionError("layer count mismatch");
    for (const auto& l : weights_.layers) {
      expect(l.attn_norm, d, "attn_norm");
      expect(l.wq, qd * d, "wq");
      expect(l.wk, kvd * d, "wk");
      expect(l.wv, kvd * d, "wv");
      expect(l.wo, d * qd, "wo");
      expect(l.mlp_norm, d, "mlp_norm");
      expect(l.w_gate, f * d, "w_gate");
      expect(l.w_up, f * d, "w_up");
      expect(l.w_down, d * f, "w_down");
    }
  }
};

using ModelHandle = Model<float>;

} // namespace mlrecall
