#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlrecall/core/csv.hpp"
#include "mlrecall/core/error.hpp"
#include "mlrecall/core/parallel.hpp"

namespace mlrecall {

struct GridCandidate {
  std::size_t layer = 0;
  std::size_t recall_layer = 0; // combined search only
  double scale = 1.0;
  std::optional<double> value;  // empty when evaluation failed
  std::string error;

  bool operator==(const GridCandidate&) const = default;
};

struct GridSearchResult {
  std::string metric_name;
  std::string split = "val";
  bool combined = false;
  std::vector<GridCandidate> candidates;
  std::optional<GridCandidate> best;
  std::size_t n_failed = 0;
};

namespace detail {

// Higher value wins; ties go to the lower layer, then lower recall layer,
// then lower scale.
inline bool better(const GridCandidate& a, const GridCandidate& b) {
  if (*a.value != *b.value) return *a.value > *b.value;
  if (a.layer != b.layer) return a.layer < b.layer;
  if (a.recall_layer != b.recall_layer) return a.recall_layer < b.recall_layer;
  return a.scale < b.scale;
}

inline GridSearchResult finish(std::vector<GridCandidate> cands, std::string metric, bool combined) {
  GridSearchResult r;
  r.metric_name = std::move(metric);
  r.combined = combined;
  for (const auto& c : cands) {
    if (!c.value) {
      ++r.n_failed;
      continue;
    }
    if (!r.best || better(c, *r.best)) r.best = c;
  }
  r.candidates = std::move(cands);
  return r;
}

template <typename Fn>
void score_all(std::vector<GridCandidate>& cands, std::size_t jobs, Fn&& score) {
  parallel_for(cands.size(), jobs, [&](std::size_t i) {
    try {
      cands[i].value = score(cands[i]);
    } catch (const std::exception& e) {
      cands[i].value.reset();
      cands[i].error = e.what();
    }
  });
}

} // namespace detail

using GridMetric = std::function<double(std::size_t layer, double scale)>;
using CombinedGridMetric = std::function<double(std::size_t translation_layer, std::size_t recall_layer, double scale)>;

// Scores every (layer, scale). A candidate whose evaluation throws is kept
// with no value and excluded from the argmax.
inline GridSearchResult grid_search(const std::vector<std::size_t>& layers, const std::vector<double>& scales,
                                    const GridMetric& metric, const std::string& metric_name, std::size_t jobs = 1) {
  if (layers.empty() || scales.empty()) throw DomainError("grid search needs at least one layer and one scale");
  std::vector<GridCandidate> cands;
  for (auto l : layers)
    for (auto s : scales) cands.push_back({l, 0, s, std::nullopt, {}});
  detail::score_all(cands, jobs, [&](const GridCandidate& c) { return metric(c.layer, c.scale); });
  return detail::finish(std::move(cands), metric_name, false);
}

// Translation layer × recall layer × shared scale.
inline GridSearchResult combined_grid_search(const std::vector<std::size_t>& translation_layers,
                                             const std::vector<std::size_t>& recall_layers,
                                             const std::vector<double>& scales, const CombinedGridMetric& metric,
                                             const std::string& metric_name, std::size_t jobs = 1) {
  if (translation_layers.empty() || recall_layers.empty() || scales.empty())
    throw DomainError("combined grid search needs layers and scales for both vectors");
  std::vector<GridCandidate> cands;
  for (auto tl : translation_layers)
    for (auto rl : recall_layers)
      for (auto s : scales) cands.push_back({tl, rl, s, std::nullopt, {}});
  detail::score_all(cands, jobs, [&](const GridCandidate& c) { return metric(c.layer, c.recall_layer, c.scale); });
  return detail::finish(std::move(cands), metric_name, true);
}

inline nlohmann::json to_json(const GridCandidate& c, bool combined) {
  nlohmann::json j{{"layer", c.layer}, {"scale", c.scale}};
  if (combined) j["recall_layer"] = c.recall_layer;
  j["value"] = c.value ? nlohmann::json(*c.value) : nlohmann::json(nullptr);
  if (!c.error.empty()) j["error"] = c.error;
  return j;
}

inline nlohmann::json to_json(const GridSearchResult& r) {
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : r.candidates) cands.push_back(to_json(c, r.combined));
  return {{"metric", r.metric_name},
          {"split", r.split},
          {"combined", r.combined},
          {"n_failed", r.n_failed},
          {"best", r.best ? to_json(*r.best, r.combined) : nlohmann::json(nullptr)},
          {"candidates", cands}};
}

inline CsvTable grid_csv(const GridSearchResult& r) {
  CsvTable t({"layer", "recall_layer", "scale", "metric", "value"});
  for (const auto& c : r.candidates)
    t.row({cell(c.layer), r.combined ? cell(c.recall_layer) : "", cell(c.scale), r.metric_name, cell(c.value)});
  return t;
}

} // namespace mlrecall
