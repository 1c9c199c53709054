#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "mlrecall/core/error.hpp"

namespace mlrecall {

using TokenId = std::int32_t;

// Signed token position; negative values count from the end (-1 is the last
// token), matching the symbolic LAST used by interventions and captures.
using Position = std::int64_t;
inline constexpr Position kLast = -1;

// Frequency remapping used by Llama-3 checkpoints.
struct RopeScaling {
  double factor = 8.0;
  double low_freq_factor = 1.0;
  double high_freq_factor = 4.0;
  double original_max_position = 8192.0;
};

// Pre-norm decoder-only transformer (RMSNorm, rotary attention with optional
// grouped KV heads, gated SiLU MLP).
struct ModelConfig {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t n_kv_heads = 0;
  std::size_t d_model = 0;
  std::size_t d_ff = 0;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 0;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;
  std::optional<RopeScaling> rope_scaling;

  std::size_t d_head() const { return d_model / n_heads; }
  std::size_t kv_dim() const { return n_kv_heads * d_head(); }

  void validate() const {
    if (n_layers < 1) throw DimensionError("n_layers must be >= 1");
    if (n_heads < 1) throw DimensionError("n_heads must be >= 1");
    if (d_model == 0 || d_model % n_heads != 0)
      throw DimensionError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                           std::to_string(n_heads) + ")");
    if (d_head() % 2 != 0) throw DimensionError("head dimension must be even for rotary embeddings");
    if (n_kv_heads < 1 || n_heads % n_kv_heads != 0)
      throw DimensionError("n_heads must be a multiple of n_kv_heads");
    if (d_ff == 0) throw DimensionError("d_ff must be >= 1");
    if (vocab_size < 2) throw DimensionError("vocab_size must be >= 2");
    if (max_seq_len < 1) throw DimensionError("max_seq_len must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers},       {"n_heads", c.n_heads},       {"n_kv_heads", c.n_kv_heads},
       {"d_model", c.d_model},         {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size},
       {"max_seq_len", c.max_seq_len}, {"rope_theta", c.rope_theta}, {"norm_eps", c.norm_eps}};
  if (c.rope_scaling) {
    j["rope_scaling"] = {{"factor", c.rope_scaling->factor},
                         {"low_freq_factor", c.rope_scaling->low_freq_factor},
                         {"high_freq_factor", c.rope_scaling->high_freq_factor},
                         {"original_max_position", c.rope_scaling->original_max_position}};
  }
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_kv_heads = j.value("n_kv_heads", c.n_heads);
  c.d_model = j.at("d_model").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.value("max_seq_len", std::size_t{2048});
  c.rope_theta = j.value("rope_theta", 10000.0);
  c.norm_eps = j.value("norm_eps", 1e-5);
  if (j.contains("rope_scaling") && !j["rope_scaling"].is_null()) {
    const auto& r = j["rope_scaling"];
    c.rope_scaling = RopeScaling{r.value("factor", 8.0), r.value("low_freq_factor", 1.0),
                                 r.value("high_freq_factor", 4.0), r.value("original_max_position", 8192.0)};
  }
}

} // namespace mlrecall
