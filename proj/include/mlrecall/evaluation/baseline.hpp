#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mlrecall/evaluation/evaluate.hpp"

namespace mlrecall {

// Output of one generation step: the decoded text and its individual tokens.
struct StepOutput {
  std::string text;
  std::vector<std::string> tokens;
  bool truncated = false; // budget ran out before a stop token
};

using TextGenerator = std::function<StepOutput(const std::string& prompt, std::size_t max_tokens)>;

template <typename T>
TextGenerator model_generator(const Model<T>& model) {
  return [&model](const std::string& prompt, std::size_t max_tokens) {
    const auto ids = tokenize_prompt(model.tokenizer(), prompt);
    const auto g = greedy_generate(model, std::span<const TokenId>(ids), max_tokens);
    StepOutput out;
    out.text = model.tokenizer().decode(std::span<const TokenId>(g.tokens));
    for (auto t : g.tokens) out.tokens.push_back(model.tokenizer().decode(t));
    out.truncated = !g.stopped;
    return out;
  };
}

// Placeholders: {language} (target-language name), {prompt}, {question}, {answer}.
struct BaselineTemplates {
  std::string translate_question = "Translate the following sentence into English.\n{language}: {prompt}\nEnglish:";
  std::string recall = "{question}";
  std::string translate_answer = "Translate the following text into {language}.\nEnglish: {answer}\n{language}:";
};

struct BaselineOptions {
  std::size_t max_tokens_per_step = 16;
  std::size_t final_window = 5; // answer must appear within this many final-step tokens
  std::string split_id;
};

struct BaselineTrace {
  std::string key;
  std::vector<StepOutput> steps;
  std::vector<int> failed_steps; // 1-based, ascending
  bool final_correct = false;
};

struct BaselineReport {
  EvalReport report;
  std::vector<BaselineTrace> traces;
  std::map<int, std::size_t> first_failure_counts;
};

namespace detail {

inline std::string fill(std::string tpl, const std::map<std::string, std::string>& vars) {
  for (const auto& [k, v] : vars) {
    const std::string ph = "{" + k + "}";
    for (auto at = tpl.find(ph); at != std::string::npos; at = tpl.find(ph, at + v.size())) tpl.replace(at, ph.size(), v);
  }
  return tpl;
}

inline std::string first_line(const std::string& s) {
  const auto t = text::trim(s);
  return text::trim(t.substr(0, t.find('\n')));
}

inline bool mentions(const std::string& haystack, const std::string& needle) {
  return text::casefold(haystack).find(text::casefold(needle)) != std::string::npos;
}

} // namespace detail

// Translate the question to English, answer it in English, translate the
// answer back. Steps 1 and 2 that exhaust their budget count as failures and
// make the example incorrect. The last step is correct iff one of its first
// `final_window` tokens matches the target-language answer.
inline BaselineTrace translate_recall_translate(const TextGenerator& gen, const FactTriple& triple, const Language& lang,
                                                const BaselineTemplates& tpl, const BaselineOptions& opt) {
  BaselineTrace tr;
  tr.key = triple.key() + "/" + lang;
  const auto lname = language_name(lang);

  auto s1 = gen(detail::fill(tpl.translate_question, {{"language", lname}, {"prompt", triple.prompt.at(lang)}}),
                opt.max_tokens_per_step);
  const auto question = detail::first_line(s1.text);
  if (s1.truncated || question.empty() || !detail::mentions(question, triple.subject_english())) tr.failed_steps.push_back(1);
  tr.steps.push_back(s1);

  auto s2 = gen(detail::fill(tpl.recall, {{"language", lname}, {"question", question}}), opt.max_tokens_per_step);
  const auto answer_en = detail::first_line(s2.text);
  if (s2.truncated || !detail::mentions(s2.text, triple.answer_english())) tr.failed_steps.push_back(2);
  tr.steps.push_back(s2);

  auto s3 = gen(detail::fill(tpl.translate_answer, {{"language", lname}, {"answer", answer_en}}), opt.max_tokens_per_step);
  bool hit = false;
  for (std::size_t i = 0; i < std::min(opt.final_window, s3.tokens.size()); ++i)
    if (token_matches_answer(s3.tokens[i], triple.answer.at(lang))) hit = true;
  tr.steps.push_back(s3);

  tr.final_correct = hit && !s1.truncated && !s2.truncated;
  if (!tr.final_correct) tr.failed_steps.push_back(3);
  return tr;
}

inline BaselineReport baseline_translate_recall_translate(const TextGenerator& gen, const FactSet& split,
                                                          const Language& language, const BaselineTemplates& tpl = {},
                                                          const BaselineOptions& opt = {}) {
  if (language == "en") throw DomainError("the translate-recall-translate baseline needs a non-English language");
  for (const auto* t : {&tpl.translate_question, &tpl.recall, &tpl.translate_answer})
    if (text::trim(*t).empty()) throw SpecError("baseline prompt templates must be non-empty");
  if (opt.final_window == 0) throw DomainError("final token window must be positive");

  BaselineReport out;
  std::vector<EvalRecord> records;
  for (const auto& t : split.triples) {
    if (!t.has_language(language)) continue;
    auto tr = translate_recall_translate(gen, t, language, tpl, opt);
    EvalRecord r;
    r.relation_id = t.relation_id;
    r.subject_en = t.subject_english();
    r.language = language;
    r.generated_answer = tr.steps.back().text;
    r.final_correct = tr.final_correct;
    r.intervention_fingerprint = "translate-recall-translate";
    records.push_back(r);
    if (!tr.failed_steps.empty()) ++out.first_failure_counts[tr.failed_steps.front()];
    out.traces.push_back(std::move(tr));
  }
  out.report = aggregate(records, {language}, std::nullopt, {});
  out.report.split_id = opt.split_id;
  out.report.intervention_fingerprint = "translate-recall-translate";
  out.report.config = {{"baseline", "translate-recall-translate"},
                       {"language", language},
                       {"split", opt.split_id},
                       {"max_tokens_per_step", opt.max_tokens_per_step},
                       {"final_window", opt.final_window},
                       {"templates",
                        {{"translate_question", tpl.translate_question},
                         {"recall", tpl.recall},
                         {"translate_answer", tpl.translate_answer}}}};
  return out;
}

} // namespace mlrecall
