#pragma once

#include <algorithm>
#include <set>

#include "mlrecall/dataset/fact.hpp"
#include "mlrecall/model/tokenizer.hpp"

namespace mlrecall {

// Token positions (with <bos> prepended) of the subject span S, the relation
// words R and the final position N of a prompt.
struct PromptPositions {
  std::vector<Position> subject;
  std::vector<Position> relation;
  Position last = 0;
  std::size_t seq_len = 0;
};

namespace detail {

// Positions covered by the byte range [begin, end) of `prompt`, found by
// tokenizing the prefixes up to each end.
inline std::vector<Position> span_positions(const Tokenizer& tok, const std::string& prompt, std::size_t begin,
                                            std::size_t end) {
  const auto lo = tok.encode(prompt.substr(0, begin), true).size();
  const auto hi = tok.encode(prompt.substr(0, end), true).size();
  std::vector<Position> out;
  for (auto p = lo; p < hi; ++p) out.push_back(static_cast<Position>(p));
  return out;
}

inline std::size_t find_word(const std::string& hay, const std::string& needle) {
  auto at = hay.find(needle);
  if (at != std::string::npos || text::contains_cjk(needle)) return at;
  // Latin scripts: retry case-insensitively when folding keeps byte offsets.
  const auto fh = text::casefold(hay), fn = text::casefold(needle);
  if (fh.size() == hay.size()) return fh.find(fn);
  return std::string::npos;
}

} // namespace detail

inline PromptPositions locate_positions(const Tokenizer& tok, const std::string& prompt, const std::string& subject,
                                        const std::vector<std::string>& relation_words) {
  PromptPositions pp;
  pp.seq_len = tok.encode(prompt, true).size();
  pp.last = static_cast<Position>(pp.seq_len - 1);

  const auto s_at = detail::find_word(prompt, subject);
  if (subject.empty() || s_at == std::string::npos)
    throw PositionResolutionError("subject '" + subject + "' not found in prompt '" + prompt + "'");
  pp.subject = detail::span_positions(tok, prompt, s_at, s_at + subject.size());

  std::set<Position> rel;
  const std::set<Position> subj(pp.subject.begin(), pp.subject.end());
  for (const auto& w : relation_words) {
    const auto at = detail::find_word(prompt, w);
    if (w.empty() || at == std::string::npos) continue;
    for (auto p : detail::span_positions(tok, prompt, at, at + w.size()))
      if (!subj.count(p)) rel.insert(p);
  }
  if (rel.empty())
    throw PositionResolutionError("none of the relation words was found in prompt '" + prompt + "'");
  pp.relation.assign(rel.begin(), rel.end());
  return pp;
}

inline PromptPositions locate_positions(const Tokenizer& tok, const FactTriple& t, const Language& lang) {
  if (!t.subject.count(lang) || !t.relation_tokens.count(lang))
    throw PositionResolutionError(t.key() + " has no subject or relation words for '" + lang + "'");
  return locate_positions(tok, render_prompt(t, lang), t.subject.at(lang), t.relation_tokens.at(lang));
}

} // namespace mlrecall
