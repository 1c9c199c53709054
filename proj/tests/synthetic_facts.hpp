#pragma once

#include <utility>

#include "mlrecall/dataset/fact.hpp"

namespace testutil {

// Relation sizes of the released dataset, per language.
inline const std::vector<std::pair<std::string, std::size_t>>& released_relation_counts() {
  static const std::vector<std::pair<std::string, std::size_t>> c{
      {"country_currency", 51},     {"country_language", 45},  {"book_language", 54},
      {"animal_classification", 47}, {"object_color", 43},      {"country_religion", 46},
      {"language_family", 50},       {"musician_country", 47},  {"musician_instruments", 45},
      {"person_university", 49}};
  return c;
}

// Placeholder facts with the released dataset's shape: every triple carries
// all six languages and unique (relation, subject) pairs.
inline mlrecall::FactSet synthetic_fact_set(
    const std::vector<std::pair<std::string, std::size_t>>& counts = released_relation_counts()) {
  std::vector<mlrecall::FactTriple> out;
  for (const auto& [rel, n] : counts)
    for (std::size_t i = 0; i < n; ++i) {
      mlrecall::FactTriple t;
      t.relation_id = rel;
      for (const auto& lang : mlrecall::core_languages()) {
        const std::string subj = "S" + std::to_string(i) + "_" + lang;
        t.subject[lang] = subj;
        t.prompt[lang] = rel + " of " + subj + " is";
        t.answer[lang] = "A" + std::to_string(i % 7) + "_" + lang;
        t.relation_tokens[lang] = {rel};
      }
      out.push_back(std::move(t));
    }
  return mlrecall::FactSet::from_triples(std::move(out));
}

} // namespace testutil
