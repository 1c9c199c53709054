#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlrecall/core/csv.hpp"
#include "mlrecall/core/text.hpp"
#include "mlrecall/dataset/fact.hpp"
#include "mlrecall/model/forward.hpp"

namespace mlrecall {

// Numerically stable softmax, accumulated in double.
template <typename T>
std::vector<double> softmax(std::span<const T> logits) {
  std::vector<double> p(logits.size());
  if (p.empty()) return p;
  const double m = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
  double z = 0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(static_cast<double>(logits[i]) - m);
  for (auto& x : p) x /= z;
  return p;
}

// Index of the largest value; the lower index wins ties.
template <typename T>
TokenId argmax(std::span<const T> v) {
  return static_cast<TokenId>(std::max_element(v.begin(), v.end()) - v.begin());
}

// 0 = top. Tokens with equal probability rank by lower id first.
inline std::size_t rank_of(std::span<const double> probs, TokenId id) {
  const double pc = probs[static_cast<std::size_t>(id)];
  std::size_t r = 0;
  for (std::size_t j = 0; j < probs.size(); ++j)
    if (probs[j] > pc || (probs[j] == pc && j < static_cast<std::size_t>(id))) ++r;
  return r;
}

// Logit-lens logits of residual slot `layer` (stream entering that layer;
// slot n_layers is the stream after the last layer).
template <typename T>
std::vector<T> lens_logits(const Model<T>& model, const ForwardTrace<T>& trace, std::size_t layer,
                           Position position = kLast) {
  return model.unembed(model.final_norm(trace.residual(layer, position)));
}

template <typename T>
std::vector<double> decode_intermediate(const Model<T>& model, const ForwardTrace<T>& trace, std::size_t layer,
                                        Position position = kLast) {
  const auto logits = lens_logits(model, trace, layer, position);
  return softmax(std::span<const T>(logits));
}

template <typename T>
TokenId lens_top1(const Model<T>& model, const ForwardTrace<T>& trace, std::size_t layer, Position position = kLast) {
  const auto logits = lens_logits(model, trace, layer, position);
  return argmax(std::span<const T>(logits));
}

// Substring containment in either direction after trimming. Latin-script
// comparisons are case-folded; anything containing CJK compares exactly.
inline bool token_matches_answer(std::string_view decoded_token, std::string_view answer) {
  std::string a = text::trim(decoded_token), b = text::trim(answer);
  if (a.empty() || b.empty()) return false;
  if (!text::contains_cjk(a) && !text::contains_cjk(b)) {
    a = text::casefold(a);
    b = text::casefold(b);
  }
  return a.find(b) != std::string::npos || b.find(a) != std::string::npos;
}

inline std::vector<std::size_t> default_audit_layers(std::size_t n_layers) {
  std::vector<std::size_t> out;
  for (std::size_t l = 20; l <= 27 && l <= n_layers; ++l) out.push_back(l);
  if (out.empty())
    for (std::size_t l = 0; l <= n_layers; ++l) out.push_back(l);
  return out;
}

struct RankTrajectory {
  std::string candidate;
  TokenId token = 0;
  std::map<std::size_t, std::size_t> per_layer_rank;
  std::map<std::size_t, double> per_layer_prob;

  bool operator==(const RankTrajectory&) const = default;
};

// Rank of each candidate's first token at the last position, for every
// residual slot captured there (or only `layers` when given).
template <typename T>
std::vector<RankTrajectory> rank_trajectory(const Model<T>& model, const ForwardTrace<T>& trace,
                                            const std::vector<std::string>& candidates,
                                            std::optional<std::vector<std::size_t>> layers = std::nullopt) {
  std::vector<RankTrajectory> out;
  for (const auto& c : candidates) {
    if (text::trim(c).empty()) throw DomainError("empty rank candidate");
    out.push_back({c, model.tokenizer().continuation_first_token(c), {}, {}});
  }
  std::vector<std::size_t> slots;
  if (layers) {
    slots = *layers;
  } else {
    for (std::size_t l = 0; l <= model.n_layers(); ++l)
      if (trace.residual_pre.has(l, trace.last())) slots.push_back(l);
  }
  for (auto l : slots) {
    const auto probs = decode_intermediate(model, trace, l);
    for (auto& t : out) {
      t.per_layer_rank[l] = rank_of(probs, t.token);
      t.per_layer_prob[l] = probs[static_cast<std::size_t>(t.token)];
    }
  }
  return out;
}

// Mean (or median) rank per layer across examples.
inline std::map<std::size_t, double> average_ranks(const std::vector<RankTrajectory>& trajectories,
                                                   bool median = false) {
  std::map<std::size_t, std::vector<double>> by_layer;
  for (const auto& t : trajectories)
    for (const auto& [l, r] : t.per_layer_rank) by_layer[l].push_back(static_cast<double>(r));
  std::map<std::size_t, double> out;
  for (auto& [l, v] : by_layer) {
    if (median) {
      std::sort(v.begin(), v.end());
      const auto n = v.size();
      out[l] = n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
    } else {
      double s = 0;
      for (double x : v) s += x;
      out[l] = s / static_cast<double>(v.size());
    }
  }
  return out;
}

template <typename T>
bool agnostic_correct(const Model<T>& model, const ForwardTrace<T>& trace, std::size_t layer,
                      const std::string& english_answer) {
  return token_matches_answer(model.tokenizer().decode(lens_top1(model, trace, layer)), english_answer);
}

// (candidate, reference) -> accepted.
using EquivalenceJudge = std::function<bool(const std::string&, const std::string&)>;

inline EquivalenceJudge exact_equivalence() {
  return [](const std::string& c, const std::string& r) { return token_matches_answer(c, r); };
}

template <typename T>
bool relation_propagated(const Model<T>& model, const ForwardTrace<T>& trace,
                         const std::vector<std::string>& relation_tokens, std::size_t layer,
                         const EquivalenceJudge& judge) {
  const auto top = text::trim(model.tokenizer().decode(lens_top1(model, trace, layer)));
  if (top.empty()) return false;
  return std::any_of(relation_tokens.begin(), relation_tokens.end(),
                     [&](const std::string& r) { return judge(top, r); });
}

template <typename T>
double relation_propagation_rate(const Model<T>& model, const std::vector<ForwardTrace<T>>& traces,
                                 const std::vector<std::vector<std::string>>& relation_token_sets, std::size_t layer,
                                 const EquivalenceJudge& judge = exact_equivalence()) {
  if (traces.empty()) throw DomainError("relation propagation needs at least one trace");
  if (traces.size() != relation_token_sets.size())
    throw PairingError("got " + std::to_string(traces.size()) + " traces but " +
                       std::to_string(relation_token_sets.size()) + " relation token sets");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < traces.size(); ++i)
    if (relation_propagated(model, traces[i], relation_token_sets[i], layer, judge)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(traces.size());
}

// Fraction of the given positions whose top-1 decode at `layer` matches the
// English reference (e.g. subject tokens surfacing in English).
template <typename T>
double english_decode_rate(const Model<T>& model, const ForwardTrace<T>& trace, std::size_t layer,
                           const std::vector<Position>& positions, const std::string& english_reference) {
  if (positions.empty()) throw DomainError("no positions to decode");
  std::size_t hits = 0;
  for (auto p : positions)
    if (token_matches_answer(model.tokenizer().decode(lens_top1(model, trace, layer, p)), english_reference)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(positions.size());
}

struct ExtractionProfile {
  std::vector<double> per_layer_attn_rate;
  std::vector<double> per_layer_mlp_rate;
  std::map<std::string, std::optional<std::size_t>> first_event_layer;
  std::map<std::string, std::optional<ComponentKind>> first_event_kind;
  std::size_t n_examples = 0;

  bool operator==(const ExtractionProfile&) const = default;
};

// Raw E·a of a component output; no final norm.
template <typename T>
TokenId component_argmax(const Model<T>& model, std::span<const T> a) {
  const auto logits = model.unembed(a);
  return argmax(std::span<const T>(logits));
}

// First (layer, component) at the last position whose output decodes to the
// final prediction. Attention is checked before the MLP of the same layer.
template <typename T>
std::optional<std::pair<std::size_t, ComponentKind>> first_extraction_event(const Model<T>& model,
                                                                            const ForwardTrace<T>& trace,
                                                                            TokenId final_prediction) {
  for (std::size_t l = 0; l < model.n_layers(); ++l) {
    if (component_argmax(model, trace.attn(l)) == final_prediction) return std::pair{l, ComponentKind::Attn};
    if (component_argmax(model, trace.mlp(l)) == final_prediction) return std::pair{l, ComponentKind::Mlp};
  }
  return std::nullopt;
}

template <typename T>
ExtractionProfile extraction_profile(const Model<T>& model, const std::vector<ForwardTrace<T>>& traces,
                                     const std::vector<TokenId>& final_predictions,
                                     std::vector<std::string> example_ids = {}) {
  if (traces.size() != final_predictions.size())
    throw PairingError("traces and final predictions differ in length");
  if (example_ids.empty())
    for (std::size_t i = 0; i < traces.size(); ++i) example_ids.push_back(std::to_string(i));
  if (example_ids.size() != traces.size()) throw PairingError("traces and example ids differ in length");

  const auto L = model.n_layers();
  ExtractionProfile prof;
  prof.n_examples = traces.size();
  std::vector<std::size_t> attn(L, 0), mlp(L, 0);
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto ev = first_extraction_event(model, traces[i], final_predictions[i]);
    if (ev) {
      ++(ev->second == ComponentKind::Attn ? attn : mlp)[ev->first];
      prof.first_event_layer[example_ids[i]] = ev->first;
      prof.first_event_kind[example_ids[i]] = ev->second;
    } else {
      prof.first_event_layer[example_ids[i]] = std::nullopt;
      prof.first_event_kind[example_ids[i]] = std::nullopt;
    }
  }
  const double n = traces.empty() ? 1.0 : static_cast<double>(traces.size());
  for (std::size_t l = 0; l < L; ++l) {
    prof.per_layer_attn_rate.push_back(static_cast<double>(attn[l]) / n);
    prof.per_layer_mlp_rate.push_back(static_cast<double>(mlp[l]) / n);
  }
  return prof;
}

// One diagnostic value; the long format shared by lens CSV output.
struct DiagnosticRow {
  std::string example_id;
  Language language;
  std::string relation_id;
  std::size_t layer = 0;
  std::string metric;
  double value = 0;
};

inline CsvTable diagnostics_csv(const std::vector<DiagnosticRow>& rows) {
  CsvTable t({"example_id", "language", "relation_id", "layer", "metric", "value"});
  for (const auto& r : rows)
    t.row({r.example_id, r.language, r.relation_id, cell(r.layer), r.metric, cell(r.value)});
  return t;
}

// {language: {layer: {metric: mean}}}
inline nlohmann::json aggregate_diagnostics(const std::vector<DiagnosticRow>& rows) {
  std::map<std::tuple<std::string, std::size_t, std::string>, std::pair<double, std::size_t>> acc;
  for (const auto& r : rows) {
    auto& [s, n] = acc[{r.language, r.layer, r.metric}];
    s += r.value;
    ++n;
  }
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [k, v] : acc) {
    const auto& [lang, layer, metric] = k;
    out[lang][std::to_string(layer)][metric] = v.first / static_cast<double>(v.second);
  }
  return out;
}

inline nlohmann::json to_json(const ExtractionProfile& p) {
  nlohmann::json first = nlohmann::json::object();
  for (const auto& [id, l] : p.first_event_layer) {
    const auto& kind = p.first_event_kind.at(id);
    first[id] = l ? nlohmann::json{{"layer", *l}, {"component", to_string(*kind)}} : nlohmann::json(nullptr);
  }
  return {{"n_examples", p.n_examples},
          {"per_layer_attn_rate", p.per_layer_attn_rate},
          {"per_layer_mlp_rate", p.per_layer_mlp_rate},
          {"first_event", first}};
}

} // namespace mlrecall
