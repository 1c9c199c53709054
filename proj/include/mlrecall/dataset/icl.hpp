#pragma once

#include "mlrecall/core/rng.hpp"
#include "mlrecall/dataset/fact.hpp"

namespace mlrecall {

struct IclOptions {
  std::size_t k = 5;
  std::uint64_t seed = 0;
  bool same_relation_only = false;
};

struct IclBundle {
  std::string query_key;
  std::string relation_id;
  Language language;
  std::vector<std::string> demo_keys;
  std::string text; // demonstrations, then the bare query prompt
};

// "prompt answer" for space-delimited scripts, "promptanswer" for CJK and for
// prompts ending in an elision apostrophe.
inline std::string completed_prompt(const std::string& prompt, const std::string& answer) {
  if (prompt.empty()) return answer;
  if (text::contains_cjk(prompt) || text::ends_with(prompt, "'") || text::ends_with(prompt, "’") ||
      text::ends_with(prompt, " "))
    return prompt + answer;
  return prompt + " " + answer;
}

// k-shot bundles for every triple in `queries`, demonstrations drawn from
// `demo_pool` in the same language and never including the query itself.
inline std::vector<IclBundle> build_icl_bundles(const FactSet& demo_pool, const FactSet& queries,
                                                const Language& lang, const IclOptions& opt = {}) {
  std::vector<const FactTriple*> pool;
  for (const auto& t : demo_pool.triples)
    if (t.has_language(lang)) pool.push_back(&t);
  std::sort(pool.begin(), pool.end(), [](auto* a, auto* b) { return a->key() < b->key(); });

  std::vector<IclBundle> out;
  for (const auto& q : queries.triples) {
    IclBundle b{q.key(), q.relation_id, lang, {}, {}};
    std::vector<const FactTriple*> candidates;
    for (const auto* t : pool) {
      if (t->key() == q.key()) continue;
      if (opt.same_relation_only && t->relation_id != q.relation_id) continue;
      candidates.push_back(t);
    }
    if (opt.k > candidates.size())
      throw InsufficientDataError("need " + std::to_string(opt.k) + " demonstrations for " + q.key() + ", only " +
                                  std::to_string(candidates.size()) + " available");
    seeded_shuffle(candidates, derive_seed(opt.seed, "icl/" + lang + "/" + q.key()));
    for (std::size_t i = 0; i < opt.k; ++i) {
      const auto* d = candidates[i];
      b.demo_keys.push_back(d->key());
      b.text += completed_prompt(render_prompt(*d, lang), answer_in(*d, lang)) + "\n";
    }
    b.text += render_prompt(q, lang);
    out.push_back(std::move(b));
  }
  return out;
}

inline std::vector<IclBundle> build_icl_bundle(const FactSet& set, const Language& lang, const IclOptions& opt = {}) {
  return build_icl_bundles(set, set, lang, opt);
}

} // namespace mlrecall
