#pragma once

// Deterministic toy transformer used as the exact-arithmetic test backend.
//
// Weights come from one SplitMix64 stream seeded with `seed`, drawn in this
// order: embed; for each layer attn_norm, wq, wk, wv, wo, mlp_norm, w_gate,
// w_up, w_down; final_norm; unembed. Each draw u = (next() >> 40) / 2^24 gives
//   matrices: float((2u - 1) * s), s = 1 for embed/unembed, 1/sqrt(fan_in) otherwise
//   norms:    float(1 + 0.1 * (2u - 1))
// with all arithmetic in double before the final rounding to float.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "mlrecall/core/rng.hpp"
#include "mlrecall/model/model.hpp"

namespace mlrecall {

struct ToyDims {
  std::size_t n_layers = 4;
  std::size_t n_heads = 2;
  std::size_t d_model = 16;
  std::size_t vocab_size = 64;
  std::size_t d_ff = 0; // 0 = 4 * d_model
  std::size_t max_seq_len = 128;
};

inline constexpr std::size_t kToySpecialTokens = 3; // <bos>, <eos>, "\n"

inline std::vector<std::string> toy_vocabulary(std::size_t vocab_size) {
  static const char* const words[] = {
      "the",       "of",           "is",          "in",         "a",          "was",        "by",
      "to",        "language",     "religion",    "currency",   "color",      "family",     "country",
      "birth",     "instrument",   "college",     "classified", "official",   "main",       "practiced",
      "written",   "played",       "attended",    "primary",    "called",     "Please",     "translate",
      "this",      "word",         "into",        "Word:",      "Translation:", "Thailand", "Brazil",
      "Japan",     "France",       "Canada",      "Buddhism",   "Christianity", "Islam",    "mammal",
      "bird",      "reptile",      "red",         "yellow",     "green",      "piano",      "violin",
      "guitar",    "English",      "French",      "Spanish",    "Japanese",   "Chinese",    "Korean",
      "yen",       "real",         "euro",        "Harvard",    "Oxford",     "Germany",    "Austria",
      "Indo-European", "Sino-Tibetan", "university", "biologically", "originally", "belongs", "has"};
  std::vector<std::string> v{"<bos>", "<eos>", "\n"};
  for (const char* w : words) {
    if (v.size() == vocab_size) break;
    v.emplace_back(w);
  }
  while (v.size() < vocab_size) v.push_back("w" + std::to_string(v.size()));
  return v;
}

inline std::shared_ptr<const Tokenizer> toy_tokenizer(std::size_t vocab_size) {
  if (vocab_size <= kToySpecialTokens) throw DimensionError("toy vocabulary needs more than 3 tokens");
  return std::make_shared<const Tokenizer>(toy_vocabulary(vocab_size), Tokenizer::Mode::Word, kToySpecialTokens,
                                           TokenId{0}, TokenId{1});
}

inline Model<float> toy_model_fixture(std::uint64_t seed, const ToyDims& dims = {}) {
  ModelConfig cfg;
  cfg.n_layers = dims.n_layers;
  cfg.n_heads = dims.n_heads;
  cfg.n_kv_heads = dims.n_heads;
  cfg.d_model = dims.d_model;
  cfg.d_ff = dims.d_ff ? dims.d_ff : 4 * dims.d_model;
  cfg.vocab_size = dims.vocab_size;
  cfg.max_seq_len = dims.max_seq_len;
  cfg.validate();

  SplitMix64 rng(seed);
  auto matrix = [&rng](std::size_t rows, std::size_t cols, double scale) {
    std::vector<float> m(rows * cols);
    for (auto& x : m) x = static_cast<float>((2.0 * rng.unit() - 1.0) * scale);
    return m;
  };
  auto norm = [&rng](std::size_t n) {
    std::vector<float> m(n);
    for (auto& x : m) x = static_cast<float>(1.0 + 0.1 * (2.0 * rng.unit() - 1.0));
    return m;
  };
  const auto d = cfg.d_model, qd = cfg.n_heads * cfg.d_head(), f = cfg.d_ff;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));

  Weights<float> w;
  w.embed = matrix(cfg.vocab_size, d, 1.0);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerWeights<float> lw;
    lw.attn_norm = norm(d);
    lw.wq = matrix(qd, d, sd);
    lw.wk = matrix(cfg.kv_dim(), d, sd);
    lw.wv = matrix(cfg.kv_dim(), d, sd);
    lw.wo = matrix(d, qd, 1.0 / std::sqrt(static_cast<double>(qd)));
    lw.mlp_norm = norm(d);
    lw.w_gate = matrix(f, d, sd);
    lw.w_up = matrix(f, d, sd);
    lw.w_down = matrix(d, f, 1.0 / std::sqrt(static_cast<double>(f)));
    w.layers.push_back(std::move(lw));
  }
  w.final_norm = norm(d);
  w.unembed = matrix(cfg.vocab_size, d, 1.0);

  return Model<float>(cfg, std::move(w), toy_tokenizer(cfg.vocab_size), "toy:" + std::to_string(seed));
}

} // namespace mlrecall
