#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlrecall/core/csv.hpp"
#include "mlrecall/core/parallel.hpp"
#include "mlrecall/dataset/prompts.hpp"
#include "mlrecall/model/forward.hpp"

namespace mlrecall {

struct SimilarityProfile {
  std::string condition_a = "A";
  std::string condition_b = "B";
  std::string pairing = "index-aligned";
  std::string space = "mlp_out"; // or "mlp_hidden"
  std::map<std::size_t, double> per_layer_cos;          // layers where at least one pair was usable
  std::map<std::size_t, std::size_t> per_layer_n;       // pairs averaged at that layer
  std::map<std::size_t, std::size_t> per_layer_skipped; // pairs with a zero vector at that layer
  std::size_t n_pairs = 0;
};

// Cosine in double; nullopt when either vector is exactly zero.
template <typename A, typename B>
std::optional<double> cosine(std::span<const A> a, std::span<const B> b) {
  if (a.size() != b.size()) throw ShapeError("cosine of vectors with different lengths");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0 || nb == 0) return std::nullopt;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

// Per-pair activations: layer -> vector.
using LayerActivations = std::map<std::size_t, std::vector<double>>;

// Mean cosine per layer over index-aligned pairs. `include` restricts the
// pairs (e.g. to correctly answered examples).
inline SimilarityProfile similarity_from_activations(const std::vector<LayerActivations>& a,
                                                     const std::vector<LayerActivations>& b,
                                                     const std::optional<std::vector<bool>>& include = std::nullopt) {
  if (a.size() != b.size())
    throw PairingError("condition A has " + std::to_string(a.size()) + " prompts, condition B has " +
                       std::to_string(b.size()));
  if (include && include->size() != a.size()) throw PairingError("inclusion mask does not match the number of pairs");
  SimilarityProfile p;
  std::map<std::size_t, double> sums;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (include && !(*include)[i]) continue;
    ++p.n_pairs;
    for (const auto& [l, va] : a[i]) {
      auto it = b[i].find(l);
      if (it == b[i].end()) throw PairingError("pair " + std::to_string(i) + " lacks layer " + std::to_string(l));
      const auto c = cosine(std::span<const double>(va), std::span<const double>(it->second));
      if (!c) {
        ++p.per_layer_skipped[l];
        continue;
      }
      sums[l] += *c;
      ++p.per_layer_n[l];
    }
  }
  if (p.n_pairs == 0) throw InsufficientDataError("no prompt pairs to compare");
  for (const auto& [l, s] : sums) p.per_layer_cos[l] = s / static_cast<double>(p.per_layer_n[l]);
  return p;
}

struct SimilarityOptions {
  std::optional<std::vector<std::size_t>> layers; // default: every layer
  bool hidden_width = false;                      // gated hidden activation instead of the MLP output
  std::vector<InterventionSpec> interventions_a;
  std::vector<InterventionSpec> interventions_b;
  std::optional<std::vector<bool>> include;
  std::string condition_a = "A";
  std::string condition_b = "B";
  std::size_t jobs = 1;
};

template <typename T>
LayerActivations last_token_mlp(const Model<T>& model, const std::string& prompt, const std::vector<std::size_t>& layers,
                                bool hidden_width, const std::vector<InterventionSpec>& interventions) {
  CaptureFilter cap;
  cap.layers = layers;
  cap.positions = std::vector<Position>{kLast};
  cap.residual = cap.attn_out = cap.attn_weights = false;
  cap.mlp_out = !hidden_width;
  cap.mlp_hidden = hidden_width;
  const auto ids = tokenize_prompt(model.tokenizer(), prompt);
  const auto tr = run_with_interventions(model, std::span<const TokenId>(ids), interventions, cap);
  LayerActivations out;
  for (auto l : layers) {
    const auto v = hidden_width ? tr.mlp_hidden.at(l, tr.pos(kLast)) : tr.mlp(l);
    out[l].assign(v.begin(), v.end());
  }
  return out;
}

// Mean cosine between last-token MLP activations of index-aligned prompts
// (typically a fact-recall prompt and its explicit-translation counterpart).
template <typename T>
SimilarityProfile mlp_activation_similarity(const Model<T>& model, const std::vector<std::string>& prompts_a,
                                            const std::vector<std::string>& prompts_b, const SimilarityOptions& opt = {}) {
  if (prompts_a.size() != prompts_b.size())
    throw PairingError("condition A has " + std::to_string(prompts_a.size()) + " prompts, condition B has " +
                       std::to_string(prompts_b.size()));
  std::vector<std::size_t> layers;
  if (opt.layers) layers = *opt.layers;
  else
    for (std::size_t l = 0; l < model.n_layers(); ++l) layers.push_back(l);
  for (auto l : layers)
    if (l >= model.n_layers()) throw IndexError("MLP layer " + std::to_string(l) + " outside the model");
  if (opt.include && opt.include->size() != prompts_a.size())
    throw PairingError("inclusion mask does not match the number of pairs");

  std::vector<LayerActivations> a(prompts_a.size()), b(prompts_b.size());
  parallel_for(prompts_a.size(), opt.jobs, [&](std::size_t i) {
    if (opt.include && !(*opt.include)[i]) return;
    a[i] = last_token_mlp(model, prompts_a[i], layers, opt.hidden_width, opt.interventions_a);
    b[i] = last_token_mlp(model, prompts_b[i], layers, opt.hidden_width, opt.interventions_b);
  });
  auto p = similarity_from_activations(a, b, opt.include);
  p.condition_a = opt.condition_a;
  p.condition_b = opt.condition_b;
  p.space = opt.hidden_width ? "mlp_hidden" : "mlp_out";
  return p;
}

// Fact-recall prompts and their explicit-translation counterparts, aligned by
// (triple, language). English has no translation prompt and is skipped.
inline std::pair<std::vector<std::string>, std::vector<std::string>>
recall_translation_pairs(const FactSet& set, const std::vector<Language>& languages) {
  std::vector<Language> non_en;
  for (const auto& l : languages)
    if (l != "en") non_en.push_back(l);
  std::pair<std::vector<std::string>, std::vector<std::string>> out;
  for (const auto& it : fact_prompt_items(set, non_en)) out.first.push_back(it.text);
  for (const auto& it : translation_prompt_items(set, non_en)) out.second.push_back(it.text);
  return out;
}

inline CsvTable similarity_csv(const SimilarityProfile& p) {
  CsvTable t({"layer", "condition_pair", "mean_cos", "n_pairs", "n_skipped"});
  for (const auto& [l, c] : p.per_layer_cos) {
    auto sk = p.per_layer_skipped.find(l);
    t.row({cell(l), p.condition_a + "|" + p.condition_b, cell(c), cell(p.per_layer_n.at(l)),
           cell(sk == p.per_layer_skipped.end() ? std::size_t{0} : sk->second)});
  }
  return t;
}

inline nlohmann::json to_json(const SimilarityProfile& p) {
  nlohmann::json layers = nlohmann::json::object();
  for (const auto& [l, c] : p.per_layer_cos) layers[std::to_string(l)] = c;
  nlohmann::json skipped = nlohmann::json::object();
  for (const auto& [l, n] : p.per_layer_skipped) skipped[std::to_string(l)] = n;
  return {{"condition_a", p.condition_a}, {"condition_b", p.condition_b}, {"pairing", p.pairing},
          {"space", p.space},             {"n_pairs", p.n_pairs},         {"per_layer_cos", layers},
          {"skipped", skipped}};
}

} // namespace mlrecall
