#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlrecall/core/csv.hpp"
#include "mlrecall/core/parallel.hpp"
#include "mlrecall/dataset/fact.hpp"
#include "mlrecall/dataset/prompts.hpp"
#include "mlrecall/evaluation/judge.hpp"
#include "mlrecall/lens/logit_lens.hpp"
#include "mlrecall/model/forward.hpp"
#include "mlrecall/steering/vector.hpp"

namespace mlrecall {

enum class ConversionOutcome { NotApplicable, Converted, Failed };

inline const char* to_string(ConversionOutcome c) {
  switch (c) {
  case ConversionOutcome::NotApplicable: return "n/a";
  case ConversionOutcome::Converted: return "converted";
  case ConversionOutcome::Failed: return "failed";
  }
  return "?";
}

struct EvalRecord {
  std::string relation_id;
  std::string subject_en;
  Language language;
  std::string generated_answer;
  bool final_correct = false;
  std::map<std::size_t, bool> agnostic_correct_by_layer;
  ConversionOutcome conversion = ConversionOutcome::NotApplicable;
  std::string intervention_fingerprint = "none";

  std::string key() const { return relation_id + "/" + subject_en + "/" + language; }
};

// Conversion outcome implied by the record's own fields at `reference_layer`.
inline ConversionOutcome derive_conversion(const EvalRecord& r, std::size_t reference_layer) {
  auto it = r.agnostic_correct_by_layer.find(reference_layer);
  if (it == r.agnostic_correct_by_layer.end() || !it->second) return ConversionOutcome::NotApplicable;
  return r.final_correct ? ConversionOutcome::Converted : ConversionOutcome::Failed;
}

// The four cells of the final × agnostic table at one layer.
struct Breakdown {
  std::size_t final_and_agnostic = 0;
  std::size_t agnostic_only = 0;
  std::size_t final_only = 0;
  std::size_t neither = 0;

  std::size_t total() const { return final_and_agnostic + agnostic_only + final_only + neither; }
  bool operator==(const Breakdown&) const = default;
};

struct LanguageSummary {
  std::size_t n = 0;
  std::size_t n_final = 0;
  std::size_t n_agnostic = 0; // at the reference layer
  std::size_t n_converted = 0;
  std::optional<double> final_accuracy;
  std::optional<double> agnostic_rate;
  std::optional<double> conversion_correctness; // null when no example is agnostic-correct
  std::map<std::size_t, Breakdown> by_layer;

  bool operator==(const LanguageSummary&) const = default;
};

struct EvalReport {
  std::vector<Language> languages;
  std::optional<std::size_t> reference_layer; // empty when no lens audit was run
  std::vector<std::size_t> audit_layers;
  std::map<Language, LanguageSummary> per_language;
  std::optional<LanguageSummary> non_english;
  std::string split_id;
  std::string intervention_fingerprint = "none";
  nlohmann::json config = nlohmann::json::object();
  std::vector<EvalRecord> records;
};

namespace detail {

inline void finish_summary(LanguageSummary& s, bool audited) {
  if (s.n == 0) return;
  s.final_accuracy = static_cast<double>(s.n_final) / static_cast<double>(s.n);
  if (!audited) return;
  s.agnostic_rate = static_cast<double>(s.n_agnostic) / static_cast<double>(s.n);
  if (s.n_agnostic > 0) s.conversion_correctness = static_cast<double>(s.n_converted) / static_cast<double>(s.n_agnostic);
}

inline void add_record(LanguageSummary& s, const EvalRecord& r, const std::optional<std::size_t>& ref,
                       const std::vector<std::size_t>& layers) {
  ++s.n;
  if (r.final_correct) ++s.n_final;
  if (ref) {
    if (r.agnostic_correct_by_layer.at(*ref)) ++s.n_agnostic;
    if (r.conversion == ConversionOutcome::Converted) ++s.n_converted;
  }
  for (auto l : layers) {
    auto& b = s.by_layer[l];
    const bool a = r.agnostic_correct_by_layer.at(l);
    if (r.final_correct && a) ++b.final_and_agnostic;
    else if (a) ++b.agnostic_only;
    else if (r.final_correct) ++b.final_only;
    else ++b.neither;
  }
}

} // namespace detail

// Folds records into per-language rows plus the pooled non-English row.
// Order-independent. Records in languages outside `languages` are ignored.
// Each record must carry every audited layer and a conversion outcome that
// agrees with its own fields.
inline EvalReport aggregate(const std::vector<EvalRecord>& records, const std::vector<Language>& languages,
                            std::optional<std::size_t> reference_layer, const std::vector<std::size_t>& audit_layers) {
  EvalReport rep;
  rep.languages = languages;
  rep.reference_layer = reference_layer;
  rep.audit_layers = audit_layers;
  std::sort(rep.audit_layers.begin(), rep.audit_layers.end());
  rep.audit_layers.erase(std::unique(rep.audit_layers.begin(), rep.audit_layers.end()), rep.audit_layers.end());

  const std::set<Language> wanted(languages.begin(), languages.end());
  // Every audited layer gets a row, so the breakdown sums to n even at n = 0.
  LanguageSummary blank;
  for (auto l : rep.audit_layers) blank.by_layer[l];
  for (const auto& l : languages) rep.per_language[l] = blank;
  const bool any_non_en = std::any_of(languages.begin(), languages.end(), [](const auto& l) { return l != "en"; });
  if (any_non_en) rep.non_english = blank;

  for (const auto& r : records) {
    if (!wanted.count(r.language)) continue;
    for (auto l : rep.audit_layers)
      if (!r.agnostic_correct_by_layer.count(l))
        throw ValidationError(r.key() + ": no agnostic result for layer " + std::to_string(l));
    if (reference_layer) {
      if (!r.agnostic_correct_by_layer.count(*reference_layer))
        throw ValidationError(r.key() + ": no agnostic result for reference layer " + std::to_string(*reference_layer));
      if (r.conversion != derive_conversion(r, *reference_layer))
        throw ValidationError(r.key() + ": conversion outcome '" + to_string(r.conversion) +
                              "' disagrees with its agnostic/final fields");
    } else if (r.conversion != ConversionOutcome::NotApplicable) {
      throw ValidationError(r.key() + ": conversion outcome set without a reference layer");
    }
    detail::add_record(rep.per_language[r.language], r, reference_layer, rep.audit_layers);
    if (r.language != "en") detail::add_record(*rep.non_english, r, reference_layer, rep.audit_layers);
    rep.records.push_back(r);
  }
  for (auto& [_, s] : rep.per_language) detail::finish_summary(s, reference_layer.has_value());
  if (rep.non_english) detail::finish_summary(*rep.non_english, reference_layer.has_value());
  std::sort(rep.records.begin(), rep.records.end(), [](const auto& a, const auto& b) { return a.key() < b.key(); });
  return rep;
}

// ---- end-to-end evaluation --------------------------------------------------

struct EvalOptions {
  std::size_t reference_layer = 21;
  std::optional<std::vector<std::size_t>> audit_layers; // default: 20-27 clipped
  std::size_t max_new_tokens = 5;
  bool strict_single_token = false; // judge the first generated token only
  bool force = false;               // accept interventions bound to another model
  std::size_t jobs = 1;
  std::string split_id;
};

// Correct iff some prefix of the generation matches the gold answer.
template <typename T>
bool generation_correct(const Model<T>& model, const std::vector<TokenId>& tokens, const std::string& answer,
                        bool strict_single_token) {
  const std::size_t n = strict_single_token ? std::min<std::size_t>(tokens.size(), 1) : tokens.size();
  for (std::size_t k = 1; k <= n; ++k)
    if (token_matches_answer(model.tokenizer().decode(std::span<const TokenId>(tokens.data(), k)), answer)) return true;
  return false;
}

template <typename T>
EvalRecord evaluate_example(const Model<T>& model, const FactTriple& triple, const Language& lang,
                            const std::vector<InterventionSpec>& interventions, std::size_t reference_layer,
                            const std::vector<std::size_t>& audit_layers, const EvalOptions& opt) {
  EvalRecord r;
  r.relation_id = triple.relation_id;
  r.subject_en = triple.subject_english();
  r.language = lang;
  r.intervention_fingerprint = intervention_fingerprint(interventions);
  const auto ids = tokenize_prompt(model.tokenizer(), triple.prompt.at(lang));

  CaptureFilter cap;
  std::vector<std::size_t> layers = audit_layers;
  layers.push_back(reference_layer);
  cap.layers = layers;
  cap.positions = std::vector<Position>{kLast};
  cap.attn_out = cap.mlp_out = cap.attn_weights = false;
  const auto trace = run_with_interventions(model, std::span<const TokenId>(ids), interventions, cap);
  for (auto l : layers) r.agnostic_correct_by_layer[l] = agnostic_correct(model, trace, l, triple.answer_english());

  const auto gen = greedy_generate(model, std::span<const TokenId>(ids), opt.strict_single_token ? 1 : opt.max_new_tokens,
                                   interventions);
  r.generated_answer = model.tokenizer().decode(std::span<const TokenId>(gen.tokens));
  r.final_correct = generation_correct(model, gen.tokens, triple.answer.at(lang), opt.strict_single_token);
  r.conversion = derive_conversion(r, reference_layer);
  return r;
}

inline nlohmann::json judge_config_json(const JudgeConfig& j) {
  return {{"mode", to_string(j.mode)},
          {"threshold", j.threshold},
          {"rubric_sha256", sha256_hex(j.rubric)},
          {"endpoint", j.endpoint ? nlohmann::json(*j.endpoint) : nlohmann::json(nullptr)},
          {"fallback", j.fallback == JudgeFallback::Fail ? "fail" : "degrade"}};
}

// Every (example, language) pair present in `split` is decoded greedily under
// `interventions`. Final correctness uses the answer-match rule; the judge
// config is validated and echoed.
template <typename T>
EvalReport evaluate(const Model<T>& model, const FactSet& split, const std::vector<Language>& languages,
                    const std::vector<InterventionSpec>& interventions, const JudgeConfig& judge,
                    const EvalOptions& opt = {}) {
  judge.validate();
  const std::size_t depth = model.config().n_layers;
  if (opt.reference_layer > depth)
    throw IndexError("reference layer " + std::to_string(opt.reference_layer) + " outside model depth " +
                     std::to_string(depth));
  const auto audit = opt.audit_layers.value_or(default_audit_layers(depth));
  for (auto l : audit)
    if (l > depth) throw IndexError("audit layer " + std::to_string(l) + " outside model depth");
  check_intervention_models(interventions, model.fingerprint(), opt.force);

  nlohmann::json config{{"split", opt.split_id},
                        {"languages", languages},
                        {"reference_layer", opt.reference_layer},
                        {"audit_layers", audit},
                        {"max_new_tokens", opt.max_new_tokens},
                        {"strict_single_token", opt.strict_single_token},
                        {"interventions", intervention_fingerprint(interventions)},
                        {"model", model.fingerprint()},
                        {"judge", judge_config_json(judge)}};
  if (languages.empty()) {
    auto rep = aggregate({}, {}, opt.reference_layer, audit);
    rep.split_id = opt.split_id;
    rep.intervention_fingerprint = intervention_fingerprint(interventions);
    rep.config = config;
    return rep;
  }
  if (split.empty()) throw DomainError("evaluation split is empty");

  std::vector<std::pair<const FactTriple*, Language>> work;
  for (const auto& t : split.triples)
    for (const auto& l : languages)
      if (t.has_language(l)) work.emplace_back(&t, l);
  std::vector<EvalRecord> records(work.size());
  parallel_for(work.size(), opt.jobs, [&](std::size_t i) {
    records[i] = evaluate_example(model, *work[i].first, work[i].second, interventions, opt.reference_layer, audit, opt);
  });

  auto rep = aggregate(records, languages, opt.reference_layer, audit);
  rep.split_id = opt.split_id;
  rep.intervention_fingerprint = intervention_fingerprint(interventions);
  rep.config = std::move(config);
  return rep;
}

// ---- output -----------------------------------------------------------------

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

inline nlohmann::json to_json(const LanguageSummary& s) {
  nlohmann::json layers = nlohmann::json::object();
  for (const auto& [l, b] : s.by_layer)
    layers[std::to_string(l)] = {{"final_and_agnostic", b.final_and_agnostic},
                                 {"agnostic_only", b.agnostic_only},
                                 {"final_only", b.final_only},
                                 {"neither", b.neither}};
  return {{"n", s.n},
          {"final_accuracy", opt_json(s.final_accuracy)},
          {"agnostic_rate", opt_json(s.agnostic_rate)},
          {"conversion_correctness", opt_json(s.conversion_correctness)},
          {"by_layer", layers}};
}

inline nlohmann::json to_json(const EvalReport& r, bool with_records = false) {
  nlohmann::json langs = nlohmann::json::object();
  for (const auto& [l, s] : r.per_language) langs[l] = to_json(s);
  nlohmann::json j{{"languages", r.languages},
                   {"reference_layer", r.reference_layer ? nlohmann::json(*r.reference_layer) : nlohmann::json(nullptr)},
                   {"audit_layers", r.audit_layers},
                   {"split", r.split_id},
                   {"interventions", r.intervention_fingerprint},
                   {"per_language", langs},
                   {"non_english", r.non_english ? to_json(*r.non_english) : nlohmann::json(nullptr)},
                   {"config", r.config}};
  if (with_records) {
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& e : r.records)
      recs.push_back({{"relation_id", e.relation_id},
                      {"subject_en", e.subject_en},
                      {"language", e.language},
                      {"generated", e.generated_answer},
                      {"final_correct", e.final_correct},
                      {"conversion", to_string(e.conversion)}});
    j["records"] = recs;
  }
  return j;
}

inline CsvTable eval_csv(const EvalReport& r) {
  CsvTable t({"language", "n", "final_accuracy", "agnostic_rate", "conversion_correctness"});
  auto add = [&t](const std::string& name, const LanguageSummary& s) {
    t.row({name, cell(s.n), cell(s.final_accuracy), cell(s.agnostic_rate), cell(s.conversion_correctness)});
  };
  for (const auto& l : r.languages) add(l, r.per_language.at(l));
  if (r.non_english) add("non-en", *r.non_english);
  return t;
}

inline CsvTable breakdown_csv(const EvalReport& r) {
  CsvTable t({"language", "layer", "final_and_agnostic", "agnostic_only", "final_only", "neither", "total"});
  for (const auto& l : r.languages)
    for (const auto& [layer, b] : r.per_language.at(l).by_layer)
      t.row({l, cell(layer), cell(b.final_and_agnostic), cell(b.agnostic_only), cell(b.final_only), cell(b.neither),
             cell(b.total())});
  return t;
}

// ---- condition comparison ---------------------------------------------------

struct ComparisonRow {
  std::string condition;
  Language language;
  std::optional<double> final_accuracy;
  std::optional<double> delta; // versus the no-intervention condition
  bool best = false;
};

struct Comparison {
  std::string baseline_condition;
  std::vector<ComparisonRow> rows;
};

// Side-by-side final accuracy per language (plus the pooled non-English row).
// The reference condition is the one without interventions, or the only one.
inline Comparison compare_conditions(const std::map<std::string, EvalReport>& reports) {
  if (reports.empty()) throw DomainError("no conditions to compare");
  const auto& first = reports.begin()->second;
  for (const auto& [name, r] : reports) {
    if (r.split_id != first.split_id)
      throw ComparabilityError("condition '" + name + "' was evaluated on split '" + r.split_id + "', not '" +
                               first.split_id + "'");
    if (r.languages != first.languages) throw ComparabilityError("condition '" + name + "' covers different languages");
  }
  Comparison c;
  for (const auto& [name, r] : reports)
    if (r.intervention_fingerprint == "none") {
      c.baseline_condition = name;
      break;
    }
  if (c.baseline_condition.empty()) {
    if (reports.size() != 1) throw ComparabilityError("no condition without interventions to compare against");
    c.baseline_condition = reports.begin()->first;
  }
  const auto& base = reports.at(c.baseline_condition);

  std::vector<std::string> rows = first.languages;
  if (first.non_english) rows.push_back("non-en");
  auto summary = [](const EvalReport& r, const std::string& lang) -> const LanguageSummary& {
    return lang == "non-en" ? *r.non_english : r.per_language.at(lang);
  };
  for (const auto& lang : rows) {
    const auto b = summary(base, lang).final_accuracy;
    std::optional<double> top;
    const std::size_t start = c.rows.size();
    for (const auto& [name, r] : reports) {
      ComparisonRow row{name, lang, summary(r, lang).final_accuracy, std::nullopt, false};
      if (row.final_accuracy && b) row.delta = *row.final_accuracy - *b;
      if (row.final_accuracy && (!top || *row.final_accuracy > *top)) top = row.final_accuracy;
      c.rows.push_back(row);
    }
    for (std::size_t i = start; i < c.rows.size(); ++i) c.rows[i].best = top && c.rows[i].final_accuracy == top;
  }
  return c;
}

inline CsvTable comparison_csv(const Comparison& c) {
  CsvTable t({"condition", "language", "final_accuracy", "delta", "best"});
  for (const auto& r : c.rows)
    t.row({r.condition, r.language, cell(r.final_accuracy), cell(r.delta), r.best ? "1" : "0"});
  return t;
}

} // namespace mlrecall
