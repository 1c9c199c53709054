#pragma once

#include <array>
#include <cmath>
#include <map>

#include "mlrecall/core/rng.hpp"
#include "mlrecall/dataset/fact.hpp"

namespace mlrecall {

enum class SplitStrategy { WithinRelation, AcrossRelation };

struct SplitSpec {
  SplitStrategy strategy = SplitStrategy::WithinRelation;
  double train = 0.40;
  double val = 0.10;
  double test = 0.50;
  std::uint64_t seed = 0;
  std::vector<std::string> held_out_relations;
};

struct SplitResult {
  FactSet train, val, test;
};

// Floor each fraction, then hand out the remainder one at a time to train,
// val, test in that order.
inline std::array<std::size_t, 3> split_sizes(std::size_t n, std::array<double, 3> fractions) {
  std::array<std::size_t, 3> sizes{};
  std::size_t used = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    // Guard against 0.1 * 10 = 0.9999999 style representation error.
    sizes[i] = static_cast<std::size_t>(std::floor(fractions[i] * static_cast<double>(n) + 1e-9));
    used += sizes[i];
  }
  for (std::size_t i = 0; used < n; i = (i + 1) % 3) {
    if (fractions[i] <= 0) continue;
    ++sizes[i];
    ++used;
  }
  return sizes;
}

namespace detail {

inline void check_fractions(const SplitSpec& spec) {
  if (spec.train < 0 || spec.val < 0 || spec.test < 0) throw SpecError("split fractions must be non-negative");
  if (std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9) throw SpecError("split fractions must sum to 1");
}

// Groups triples by relation, each group ordered by subject so the outcome is
// independent of input order.
inline std::map<std::string, std::vector<const FactTriple*>> by_relation(const FactSet& set) {
  std::map<std::string, std::vector<const FactTriple*>> groups;
  for (const auto& t : set.triples) groups[t.relation_id].push_back(&t);
  for (auto& [_, g] : groups)
    std::sort(g.begin(), g.end(), [](auto* a, auto* b) { return a->subject_english() < b->subject_english(); });
  return groups;
}

} // namespace detail

inline SplitResult split(const FactSet& set, const SplitSpec& spec) {
  detail::check_fractions(spec);
  auto groups = detail::by_relation(set);

  std::array<double, 3> fractions{spec.train, spec.val, spec.test};
  std::set<std::string> held;
  if (spec.strategy == SplitStrategy::AcrossRelation) {
    if (spec.held_out_relations.empty()) throw PreconditionError("across_relation split needs held-out relations");
    for (const auto& r : spec.held_out_relations) {
      if (!groups.count(r)) throw SpecError("held-out relation '" + r + "' is not in the dataset");
      held.insert(r);
    }
    const double tv = spec.train + spec.val;
    if (tv <= 0) throw SpecError("across_relation split needs a positive train or val fraction");
    fractions = {spec.train / tv, spec.val / tv, 0.0};
  } else {
    for (const auto& [r, g] : groups)
      if (g.size() < 3)
        throw PreconditionError("relation '" + r + "' has " + std::to_string(g.size()) +
                                " triples; within_relation split needs at least 3");
  }

  std::vector<FactTriple> parts[3];
  for (auto& [relation, group] : groups) {
    if (held.count(relation)) {
      for (const auto* t : group) parts[2].push_back(*t);
      continue;
    }
    seeded_shuffle(group, derive_seed(spec.seed, "split/" + relation));
    const auto sizes = split_sizes(group.size(), fractions);
    std::size_t at = 0;
    for (std::size_t p = 0; p < 3; ++p)
      for (std::size_t i = 0; i < sizes[p]; ++i) parts[p].push_back(*group[at++]);
  }
  return {FactSet::from_triples(std::move(parts[0])), FactSet::from_triples(std::move(parts[1])),
          FactSet::from_triples(std::move(parts[2]))};
}

inline nlohmann::json split_manifest(const SplitResult& r, const SplitSpec& spec) {
  auto keys = [](const FactSet& s) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& t : s.triples) a.push_back({t.relation_id, t.subject_english()});
    return a;
  };
  return {{"seed", spec.seed},
          {"strategy", spec.strategy == SplitStrategy::WithinRelation ? "within_relation" : "across_relation"},
          {"fractions", {spec.train, spec.val, spec.test}},
          {"held_out_relations", spec.held_out_relations},
          {"train", keys(r.train)},
          {"val", keys(r.val)},
          {"test", keys(r.test)}};
}

} // namespace mlrecall
