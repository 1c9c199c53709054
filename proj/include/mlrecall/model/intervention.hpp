#pragma once

#include <compare>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "mlrecall/core/hash.hpp"
#include "mlrecall/model/trace.hpp"

namespace mlrecall {

struct HeadRef {
  std::size_t layer = 0;
  std::size_t head = 0;
  auto operator<=>(const HeadRef&) const = default;
};

// Adds scale·payload to the residual stream entering `layer` at `position`.
// Several adds at one site are summed (in list order) before being applied.
struct ResidualAdd {
  std::size_t layer = 0;
  Position position = kLast;
  std::vector<double> payload;
  double scale = 1.0;
  std::string model_fingerprint; // empty = not bound to a model
};

struct AttentionEdge {
  Position query = kLast;
  Position key = 0;
};

// Masks attention edges (score -> -inf before softmax) at each listed layer.
struct AttentionKnockout {
  std::vector<std::size_t> layers;
  std::vector<AttentionEdge> edges;
  std::vector<std::size_t> heads; // empty = all heads
};

enum class AblationMode { Zero, Mean };

// Replaces per-head outputs (before W_O) by zero or by a reference mean, at
// every position.
struct HeadAblation {
  std::vector<HeadRef> heads;
  AblationMode mode = AblationMode::Zero;
  std::map<HeadRef, std::vector<double>> means; // required in Mean mode, width d_head
};

enum class ComponentKind { Residual, Attn, Mlp, Head };

struct ComponentSite {
  ComponentKind kind = ComponentKind::Mlp;
  std::size_t layer = 0;
  std::size_t head = 0;
  Position position = kLast;
};

// Overwrites one component's output with a donor value.
struct ActivationPatch {
  ComponentSite site;
  std::vector<double> value;
  std::size_t donor_seq_len = 0;
};

using InterventionSpec = std::variant<ResidualAdd, AttentionKnockout, HeadAblation, ActivationPatch>;

inline const char* to_string(ComponentKind k) {
  switch (k) {
  case ComponentKind::Residual: return "resid";
  case ComponentKind::Attn: return "attn";
  case ComponentKind::Mlp: return "mlp";
  case ComponentKind::Head: return "head";
  }
  return "?";
}

template <typename T>
std::span<const T> component_value(const ForwardTrace<T>& trace, const ComponentSite& site) {
  switch (site.kind) {
  case ComponentKind::Residual: return trace.residual(site.layer, site.position);
  case ComponentKind::Attn: return trace.attn(site.layer, site.position);
  case ComponentKind::Mlp: return trace.mlp(site.layer, site.position);
  case ComponentKind::Head: return trace.head(site.layer, site.head, site.position);
  }
  throw Error("unknown component kind");
}

// Patch of `site` with the donor trace's value at the same (layer, position).
template <typename T>
ActivationPatch make_patch(const ForwardTrace<T>& donor, const ComponentSite& site) {
  auto v = component_value(donor, site);
  ActivationPatch p;
  p.site = site;
  p.site.position = static_cast<Position>(donor.pos(site.position));
  p.value.assign(v.begin(), v.end());
  p.donor_seq_len = donor.seq_len();
  return p;
}

// Stable content hash of an intervention list, recorded with evaluation results.
inline std::string intervention_fingerprint(const std::vector<InterventionSpec>& specs) {
  if (specs.empty()) return "none";
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : specs) {
    std::visit(
        [&j](const auto& v) {
          using V = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<V, ResidualAdd>) {
            j.push_back({{"kind", "residual_add"}, {"layer", v.layer}, {"pos", v.position},
                         {"scale", v.scale}, {"payload", sha256_hex(nlohmann::json(v.payload).dump())}});
          } else if constexpr (std::is_same_v<V, AttentionKnockout>) {
            nlohmann::json edges = nlohmann::json::array();
            for (const auto& e : v.edges) edges.push_back({e.query, e.key});
            j.push_back({{"kind", "attention_knockout"}, {"layers", v.layers}, {"edges", edges}, {"heads", v.heads}});
          } else if constexpr (std::is_same_v<V, HeadAblation>) {
            nlohmann::json heads = nlohmann::json::array();
            for (const auto& h : v.heads) heads.push_back({h.layer, h.head});
            j.push_back({{"kind", "head_zero"}, {"heads", heads}, {"mode", v.mode == AblationMode::Zero ? "zero" : "mean"}});
          } else {
            j.push_back({{"kind", "activation_patch"}, {"component", to_string(v.site.kind)}, {"layer", v.site.layer},
                         {"head", v.site.head}, {"pos", v.site.position},
                         {"value", sha256_hex(nlohmann::json(v.value).dump())}});
          }
        },
        s);
  }
  return sha256_hex(j.dump()).substr(0, 16);
}

} // namespace mlrecall
