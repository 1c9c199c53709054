#pragma once

#include <algorithm>
#include <optional>
#include <set>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "mlrecall/core/container.hpp"
#include "mlrecall/core/parallel.hpp"
#include "mlrecall/dataset/prompts.hpp"
#include "mlrecall/model/forward.hpp"

namespace mlrecall {

enum class VectorKind { TranslationDiff, RecallTask };

// Where the vector is read: the stream entering layer ℓ, or the stream
// leaving it (entering ℓ+1). Application is always at the entry of ℓ.
enum class ExtractionPoint { LayerInput, LayerOutput };

inline const char* to_string(VectorKind k) { return k == VectorKind::TranslationDiff ? "translation_diff" : "recall_task"; }
inline const char* to_string(ExtractionPoint p) { return p == ExtractionPoint::LayerInput ? "layer_input" : "layer_output"; }

inline VectorKind vector_kind_from_string(const std::string& s) {
  if (s == "translation_diff" || s == "translation") return VectorKind::TranslationDiff;
  if (s == "recall_task" || s == "recall") return VectorKind::RecallTask;
  throw FormatError("unknown vector kind '" + s + "'");
}

inline ExtractionPoint extraction_point_from_string(const std::string& s) {
  if (s == "layer_input") return ExtractionPoint::LayerInput;
  if (s == "layer_output") return ExtractionPoint::LayerOutput;
  throw FormatError("unknown extraction point '" + s + "'");
}

struct Provenance {
  std::size_t n_prompts_used = 0;
  std::vector<Language> languages;
  std::vector<std::string> relations;
  std::uint64_t seed = 0;
  std::string prompt_set_hash;
  ExtractionPoint point = ExtractionPoint::LayerInput;

  bool operator==(const Provenance&) const = default;
};

struct SteeringVector {
  VectorKind kind = VectorKind::TranslationDiff;
  std::size_t layer = 0;
  std::vector<double> vector;
  double scale = 1.0;
  Provenance provenance;
  std::string model_fingerprint;

  bool operator==(const SteeringVector&) const = default;
};

struct ExtractOptions {
  ExtractionPoint point = ExtractionPoint::LayerInput;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

namespace detail {

inline std::size_t extraction_slot(std::size_t n_layers, std::size_t layer, ExtractionPoint point) {
  const std::size_t slot = point == ExtractionPoint::LayerInput ? layer : layer + 1;
  if (slot > n_layers)
    throw IndexError("extraction layer " + std::to_string(layer) + " (" + to_string(point) + ") outside a " +
                     std::to_string(n_layers) + "-layer model");
  return slot;
}

template <typename T>
std::vector<std::vector<double>> last_activations(const Model<T>& model, const std::vector<PromptItem>& prompts,
                                                  std::size_t slot, std::size_t jobs) {
  CaptureFilter f = CaptureFilter::last_position();
  f.layers = std::vector<std::size_t>{slot};
  f.attn_out = f.mlp_out = false;
  std::vector<std::vector<double>> out(prompts.size());
  parallel_for(prompts.size(), jobs, [&](std::size_t i) {
    const auto ids = tokenize_prompt(model.tokenizer(), prompts[i].text);
    const auto tr = run_with_interventions(model, std::span<const TokenId>(ids), {}, f);
    const auto h = tr.residual(slot);
    out[i].assign(h.begin(), h.end());
  });
  return out;
}

// Per-coordinate mean over rows, summed in sorted order so the result does
// not depend on row order.
inline std::vector<double> order_free_mean(const std::vector<std::vector<double>>& rows) {
  const std::size_t d = rows.front().size();
  std::vector<double> mean(d), col(rows.size());
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < rows.size(); ++i) col[i] = rows[i][j];
    std::sort(col.begin(), col.end());
    double s = 0;
    for (double v : col) s += v;
    mean[j] = s / static_cast<double>(rows.size());
  }
  return mean;
}

inline Provenance provenance_of(const std::vector<PromptItem>& prompts, const ExtractOptions& opt) {
  Provenance p;
  p.n_prompts_used = prompts.size();
  std::set<std::string> langs, rels;
  for (const auto& it : prompts) {
    langs.insert(it.language);
    rels.insert(it.relation_id);
  }
  p.languages.assign(langs.begin(), langs.end());
  p.relations.assign(rels.begin(), rels.end());
  p.seed = opt.seed;
  p.prompt_set_hash = prompt_set_hash(prompts);
  p.point = opt.point;
  return p;
}

} // namespace detail

template <typename T>
std::vector<double> mean_activation(const Model<T>& model, const std::vector<PromptItem>& prompts, std::size_t layer,
                                    const ExtractOptions& opt = {}) {
  if (prompts.empty()) throw DomainError("mean activation over an empty prompt list");
  const auto slot = detail::extraction_slot(model.n_layers(), layer, opt.point);
  return detail::order_free_mean(detail::last_activations(model, prompts, slot, opt.jobs));
}

inline bool in_default_translation_layers(std::size_t layer) { return layer >= 21 && layer <= 27; }

// Δ = mean(T) − mean(C) at the stream entering `layer`.
template <typename T>
SteeringVector translation_difference_vector(const Model<T>& model, const std::vector<PromptItem>& fact_prompts,
                                             const std::vector<PromptItem>& translation_prompts, std::size_t layer,
                                             const ExtractOptions& opt = {}) {
  if (fact_prompts.empty() || translation_prompts.empty())
    throw DomainError("translation difference vector needs non-empty fact and translation prompt sets");
  if (!in_default_translation_layers(layer))
    spdlog::warn("translation vector layer {} is outside the default range 21-27", layer);
  const auto hc = mean_activation(model, fact_prompts, layer, opt);
  const auto ht = mean_activation(model, translation_prompts, layer, opt);
  SteeringVector v;
  v.kind = VectorKind::TranslationDiff;
  v.layer = layer;
  v.vector.resize(hc.size());
  for (std::size_t i = 0; i < hc.size(); ++i) v.vector[i] = ht[i] - hc[i];
  auto both = fact_prompts;
  both.insert(both.end(), translation_prompts.begin(), translation_prompts.end());
  v.provenance = detail::provenance_of(both, opt);
  v.model_fingerprint = model.fingerprint();
  return v;
}

// One Δ per language (or per relation), each from that subset alone.
enum class Pooling { PerLanguage, PerRelation };

template <typename T>
std::map<std::string, SteeringVector> translation_difference_vectors_by(
    const Model<T>& model, const std::vector<PromptItem>& fact_prompts,
    const std::vector<PromptItem>& translation_prompts, std::size_t layer, Pooling pooling,
    const ExtractOptions& opt = {}) {
  auto group_of = [pooling](const PromptItem& it) {
    return pooling == Pooling::PerLanguage ? it.language : it.relation_id;
  };
  std::set<std::string> groups;
  for (const auto& it : translation_prompts) groups.insert(group_of(it));
  std::map<std::string, SteeringVector> out;
  for (const auto& g : groups) {
    std::vector<PromptItem> c, t;
    for (const auto& it : fact_prompts)
      if (group_of(it) == g) c.push_back(it);
    for (const auto& it : translation_prompts)
      if (group_of(it) == g) t.push_back(it);
    if (c.empty()) continue;
    out.emplace(g, translation_difference_vector(model, c, t, layer, opt));
  }
  return out;
}

// Mean last-position activation over few-shot bundles. Defaults to reading
// the output of `layer` while applying at its input.
template <typename T>
SteeringVector recall_task_vector(const Model<T>& model, const std::vector<PromptItem>& icl_prompts, std::size_t layer,
                                  ExtractOptions opt = {ExtractionPoint::LayerOutput}) {
  if (icl_prompts.empty()) throw DomainError("recall task vector needs at least one ICL bundle");
  SteeringVector v;
  v.kind = VectorKind::RecallTask;
  v.layer = layer;
  v.vector = mean_activation(model, icl_prompts, layer, opt);
  v.provenance = detail::provenance_of(icl_prompts, opt);
  v.model_fingerprint = model.fingerprint();
  return v;
}

inline ResidualAdd to_intervention(const SteeringVector& vec, std::optional<double> scale = std::nullopt) {
  const double s = scale.value_or(vec.scale);
  if (!(s > 0)) throw DomainError("steering scale must be positive");
  return ResidualAdd{vec.layer, kLast, vec.vector, s, vec.model_fingerprint};
}

inline nlohmann::json sidecar_json(const SteeringVector& v) {
  return {{"kind", to_string(v.kind)},
          {"layer", v.layer},
          {"scale", v.scale},
          {"d_model", v.vector.size()},
          {"model_fingerprint", v.model_fingerprint},
          {"prompt_set_hash", v.provenance.prompt_set_hash},
          {"seed", v.provenance.seed},
          {"n_prompts_used", v.provenance.n_prompts_used},
          {"languages", v.provenance.languages},
          {"relations", v.provenance.relations},
          {"extraction_point", to_string(v.provenance.point)}};
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& p) { return p.string() + ".json"; }

inline TensorContainer vector_container(const SteeringVector& v) {
  TensorContainer c;
  c.metadata = sidecar_json(v);
  c.metadata["format"] = "mlrecall-steering-vector";
  c.add_f64("vector", {v.vector.size()}, v.vector);
  return c;
}

// Writes the container plus a human-readable JSON sidecar next to it.
inline void save_vector(const SteeringVector& v, const std::filesystem::path& path) {
  vector_container(v).save(path);
  std::ofstream f(sidecar_path(path), std::ios::trunc);
  if (!f) throw Error("cannot write '" + sidecar_path(path).string() + "'");
  f << sidecar_json(v).dump(2) << '\n';
}

inline SteeringVector vector_from_container(const TensorContainer& c) {
  const auto& m = c.metadata;
  if (m.value("format", "") != "mlrecall-steering-vector") throw FormatError("container is not a steering vector");
  SteeringVector v;
  v.kind = vector_kind_from_string(m.at("kind").get<std::string>());
  v.layer = m.at("layer").get<std::size_t>();
  v.scale = m.at("scale").get<double>();
  v.model_fingerprint = m.at("model_fingerprint").get<std::string>();
  v.provenance.prompt_set_hash = m.at("prompt_set_hash").get<std::string>();
  v.provenance.seed = m.at("seed").get<std::uint64_t>();
  v.provenance.n_prompts_used = m.at("n_prompts_used").get<std::size_t>();
  v.provenance.languages = m.at("languages").get<std::vector<std::string>>();
  v.provenance.relations = m.at("relations").get<std::vector<std::string>>();
  v.provenance.point = extraction_point_from_string(m.at("extraction_point").get<std::string>());
  const auto& t = c.at("vector");
  v.vector = t.dtype == "f64" ? t.data_f64 : std::vector<double>(t.data.begin(), t.data.end());
  return v;
}

inline SteeringVector load_vector(const std::filesystem::path& path) {
  try {
    return vector_from_container(TensorContainer::load(path));
  } catch (const FormatError& e) {
    throw LoadError("'" + path.string() + "' is not a valid steering vector: " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("'" + path.string() + "' has malformed vector metadata: " + e.what());
  }
}

// Refuses a vector extracted from a different model unless forced.
inline void check_vector_model(const SteeringVector& v, const std::string& model_fingerprint, bool force = false) {
  if (v.model_fingerprint.empty() || v.model_fingerprint == model_fingerprint || force) return;
  throw FingerprintMismatchError("steering vector was extracted from model " + v.model_fingerprint +
                                 " but is being applied to " + model_fingerprint + " (use force to override)");
}

// Same refusal for any bound residual add in an intervention list.
inline void check_intervention_models(const std::vector<InterventionSpec>& specs, const std::string& model_fingerprint,
                                      bool force = false) {
  if (force) return;
  for (const auto& s : specs)
    if (const auto* a = std::get_if<ResidualAdd>(&s))
      if (!a->model_fingerprint.empty() && a->model_fingerprint != model_fingerprint)
        throw FingerprintMismatchError("intervention at layer " + std::to_string(a->layer) + " is bound to model " +
                                       a->model_fingerprint + ", not " + model_fingerprint);
}

} // namespace mlrecall
