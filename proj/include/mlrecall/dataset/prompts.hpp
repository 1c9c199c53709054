#pragma once

#include "mlrecall/dataset/fact.hpp"
#include "mlrecall/dataset/icl.hpp"
#include "mlrecall/model/tokenizer.hpp"

namespace mlrecall {

// A prompt string with the bookkeeping needed for provenance and reporting.
struct PromptItem {
  std::string text;
  Language language;
  std::string relation_id;
  std::string key; // triple key
};

inline std::vector<PromptItem> fact_prompt_items(const FactSet& set, const std::vector<Language>& languages) {
  std::vector<PromptItem> out;
  for (const auto& t : set.triples)
    for (const auto& lang : languages)
      if (t.has_language(lang)) out.push_back({render_prompt(t, lang), lang, t.relation_id, t.key()});
  return out;
}

inline std::vector<PromptItem> translation_prompt_items(const FactSet& set, const std::vector<Language>& languages) {
  std::vector<PromptItem> out;
  for (const auto& t : set.triples)
    for (const auto& lang : languages)
      if (lang != "en" && t.has_language(lang))
        out.push_back({derive_translation_prompt(t, lang), lang, t.relation_id, t.key()});
  return out;
}

inline std::vector<PromptItem> icl_prompt_items(const std::vector<IclBundle>& bundles) {
  std::vector<PromptItem> out;
  for (const auto& b : bundles) out.push_back({b.text, b.language, b.relation_id, b.query_key});
  return out;
}

inline std::vector<PromptItem> filter_items(const std::vector<PromptItem>& items, const std::string& language,
                                            const std::string& relation = {}) {
  std::vector<PromptItem> out;
  for (const auto& it : items)
    if ((language.empty() || it.language == language) && (relation.empty() || it.relation_id == relation))
      out.push_back(it);
  return out;
}

// Order-independent content hash of a prompt list.
inline std::string prompt_set_hash(const std::vector<PromptItem>& items) {
  std::vector<std::string> texts;
  for (const auto& it : items) texts.push_back(it.language + "\t" + it.text);
  std::sort(texts.begin(), texts.end());
  Sha256 h;
  for (const auto& t : texts) {
    h.update(t);
    h.update(std::string_view("\n"));
  }
  return h.hex().substr(0, 16);
}

inline std::vector<TokenId> tokenize_prompt(const Tokenizer& tok, const std::string& text) {
  return tok.encode(text, true);
}

} // namespace mlrecall
