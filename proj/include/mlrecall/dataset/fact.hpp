#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlrecall/core/error.hpp"
#include "mlrecall/core/hash.hpp"
#include "mlrecall/core/text.hpp"

namespace mlrecall {

using Language = std::string;

inline const std::vector<Language>& core_languages() {
  static const std::vector<Language> langs{"en", "zh", "ja", "ko", "fr", "es"};
  return langs;
}

inline bool is_core_language(const Language& lang) {
  const auto& c = core_languages();
  return std::find(c.begin(), c.end(), lang) != c.end();
}

inline std::string language_name(const Language& lang) {
  static const std::map<Language, std::string> names{{"en", "English"}, {"zh", "Chinese"}, {"ja", "Japanese"},
                                                     {"ko", "Korean"},  {"fr", "French"},  {"es", "Spanish"},
                                                     {"de", "German"},  {"it", "Italian"}, {"pt", "Portuguese"},
                                                     {"ru", "Russian"}};
  auto it = names.find(lang);
  return it == names.end() ? lang : it->second;
}

// One fact with parallel surface forms; maps are keyed by language code.
struct FactTriple {
  std::string relation_id;
  std::map<Language, std::string> subject;
  std::map<Language, std::string> prompt;
  std::map<Language, std::string> answer;
  std::map<Language, std::vector<std::string>> relation_tokens;

  const std::string& answer_english() const { return answer.at("en"); }
  const std::string& subject_english() const { return subject.at("en"); }

  // Stable identity: (relation_id, subject[en]).
  std::string key() const { return relation_id + "/" + subject_english(); }

  std::vector<Language> languages() const {
    std::vector<Language> out;
    for (const auto& [lang, _] : prompt) out.push_back(lang);
    return out;
  }

  bool has_language(const Language& lang) const { return prompt.count(lang) != 0; }

  bool operator==(const FactTriple&) const = default;
};

struct FactSet {
  std::vector<FactTriple> triples;
  std::map<std::string, std::size_t> per_relation_counts;

  std::size_t size() const { return triples.size(); }
  bool empty() const { return triples.empty(); }

  std::vector<std::string> relations() const {
    std::vector<std::string> out;
    for (const auto& [r, _] : per_relation_counts) out.push_back(r);
    return out;
  }

  // Number of triples carrying each language.
  std::map<Language, std::size_t> per_language_counts() const {
    std::map<Language, std::size_t> out;
    for (const auto& t : triples)
      for (const auto& lang : t.languages()) ++out[lang];
    return out;
  }

  // Validates uniqueness of (relation_id, subject[en]) and recomputes counts.
  static FactSet from_triples(std::vector<FactTriple> triples) {
    FactSet s;
    std::set<std::string> seen;
    for (const auto& t : triples) {
      if (!seen.insert(t.key()).second)
        throw ValidationError("duplicate subject '" + t.subject_english() + "' in relation '" + t.relation_id + "'");
      ++s.per_relation_counts[t.relation_id];
    }
    s.triples = std::move(triples);
    return s;
  }

  bool operator==(const FactSet&) const = default;
};

namespace detail {

inline std::string field_string(const nlohmann::json& j, const std::string& what) {
  if (!j.is_string()) throw ValidationError(what + " must be a string");
  return text::to_nfc(j.get<std::string>());
}

inline std::map<Language, std::string> string_map(const nlohmann::json& j, const std::string& field,
                                                  const std::string& who) {
  if (!j.contains(field) || !j[field].is_object()) throw ValidationError(who + ": missing object field '" + field + "'");
  std::map<Language, std::string> out;
  for (const auto& [lang, v] : j[field].items()) out[lang] = field_string(v, who + ": " + field + "[" + lang + "]");
  return out;
}

} // namespace detail

inline FactTriple parse_triple(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": record is not a JSON object");
  if (!j.contains("relation_id") || !j["relation_id"].is_string())
    throw ValidationError(where + ": missing string field 'relation_id'");
  FactTriple t;
  t.relation_id = j["relation_id"].get<std::string>();
  t.subject = detail::string_map(j, "subject", where);
  if (!t.subject.count("en") || text::trim(t.subject["en"]).empty())
    throw ValidationError(where + ": missing English subject");
  const std::string who = where + " (" + t.relation_id + "/" + t.subject["en"] + ")";
  t.prompt = detail::string_map(j, "prompt", who);
  t.answer = detail::string_map(j, "answer", who);
  if (!j.contains("relation_tokens") || !j["relation_tokens"].is_object())
    throw ValidationError(who + ": missing object field 'relation_tokens'");
  for (const auto& [lang, v] : j["relation_tokens"].items()) {
    if (!v.is_array()) throw ValidationError(who + ": relation_tokens[" + lang + "] must be a list");
    for (const auto& tok : v) t.relation_tokens[lang].push_back(detail::field_string(tok, who + ": relation token"));
  }

  std::set<Language> langs;
  for (const auto& l : core_languages()) langs.insert(l);
  for (const auto& [l, _] : t.prompt) langs.insert(l);
  for (const auto& [l, _] : t.answer) langs.insert(l);
  for (const auto& lang : langs) {
    if (!t.prompt.count(lang) || text::trim(t.prompt[lang]).empty())
      throw ValidationError(who + ": missing prompt for language '" + lang + "'");
    if (!t.answer.count(lang) || text::trim(t.answer[lang]).empty())
      throw ValidationError(who + ": missing answer for language '" + lang + "'");
    if (!t.relation_tokens.count(lang) || t.relation_tokens[lang].empty())
      throw ValidationError(who + ": missing relation tokens for language '" + lang + "'");
  }
  return t;
}

inline FactSet parse_triples(std::istream& in, const std::string& source) {
  std::vector<FactTriple> triples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(source + ":" + std::to_string(line_no) + ": invalid JSON: " + e.what());
    }
    triples.push_back(parse_triple(j, source + ":" + std::to_string(line_no)));
  }
  return FactSet::from_triples(std::move(triples));
}

inline FactSet load_triples(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw LoadError("dataset '" + path.string() + "' does not exist or is unreadable");
  return parse_triples(f, path.string());
}

inline nlohmann::json to_json(const FactTriple& t) {
  nlohmann::json rt = nlohmann::json::object();
  for (const auto& [lang, toks] : t.relation_tokens) rt[lang] = toks;
  return {{"relation_id", t.relation_id}, {"subject", t.subject}, {"prompt", t.prompt},
          {"answer", t.answer},           {"relation_tokens", rt}};
}

// Canonical JSONL: sorted keys, compact separators, raw UTF-8.
inline std::string serialize(const FactSet& set) {
  std::string out;
  for (const auto& t : set.triples) {
    out += to_json(t).dump(-1, ' ', false);
    out += '\n';
  }
  return out;
}

inline std::string dataset_hash(const FactSet& set) { return sha256_hex(serialize(set)).substr(0, 16); }

inline std::string render_prompt(const FactTriple& t, const Language& lang) {
  auto it = t.prompt.find(lang);
  if (it == t.prompt.end()) throw KeyError("no prompt for language '" + lang + "' in " + t.key());
  return it->second;
}

inline const std::string& answer_in(const FactTriple& t, const Language& lang) {
  auto it = t.answer.find(lang);
  if (it == t.answer.end()) throw KeyError("no answer for language '" + lang + "' in " + t.key());
  return it->second;
}

inline std::string derive_translation_prompt(const FactTriple& t, const Language& target) {
  if (target == "en") throw DomainError("translation prompts need a non-English target language");
  if (!t.has_language(target)) throw KeyError("no forms for language '" + target + "' in " + t.key());
  return "Please translate this word into " + language_name(target) + ". Word: " + t.answer_english() +
         ", Translation:";
}

struct TranslationItem {
  std::string triple_key;
  std::string relation_id;
  Language language;
  std::string prompt;
  std::string expected;
};

// One explicit-translation prompt per (triple, non-English language).
inline std::vector<TranslationItem> derive_translation_dataset(const FactSet& set) {
  std::vector<TranslationItem> out;
  for (const auto& t : set.triples)
    for (const auto& lang : t.languages())
      if (lang != "en")
        out.push_back({t.key(), t.relation_id, lang, derive_translation_prompt(t, lang), t.answer.at(lang)});
  return out;
}

} // namespace mlrecall
