// mlrecall: command-line entry points. Every compute subcommand writes its
// artifacts plus a manifest.json into --out; see README for the layout.

#include <iostream>
#include <numeric>
#include <set>

#include <spdlog/spdlog.h>

#include "cli_support.hpp"
#include "mlrecall/causal/causal.hpp"
#include "mlrecall/causal/positions.hpp"
#include "mlrecall/dataset/split.hpp"
#include "mlrecall/evaluation/baseline.hpp"
#include "mlrecall/evaluation/evaluate.hpp"
#include "mlrecall/lens/logit_lens.hpp"
#include "mlrecall/model/load.hpp"
#include "mlrecall/report/manifest.hpp"
#include "mlrecall/similarity/mlp_similarity.hpp"
#include "mlrecall/steering/grid.hpp"

using namespace mlrecall;
using cli::UsageError;

namespace {

enum Exit : int { kOk = 0, kFailure = 1, kUsage = 2, kRefused = 3 };

// ---- shared options ---------------------------------------------------------

struct Common {
  std::string model;
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::string languages = "en,zh,ja,ko,fr,es";
  std::string part = "all";
  std::string split_strategy = "within_relation";
  std::string fractions = "0.4,0.1,0.5";
  std::string held_out;
  std::string config; // already expanded into argv by expand_config
};

struct JudgeOpts {
  std::string mode = "exact_substring";
  double threshold = 0.8;
  std::string endpoint;
  std::string cache;
  std::string fallback = "fail";
};

void add_common(CLI::App* sub, Common& c, const std::string& default_part, bool needs_data = true) {
  c.part = default_part;
  sub->add_option("--config", c.config, "JSON file with option values; command-line flags take precedence");
  sub->add_option("--model", c.model, "Model locator: toy[:SEED] or a checkpoint container path")->required();
  auto* d = sub->add_option("--data", c.data, "Fact dataset (JSONL)");
  if (needs_data) d->required();
  sub->add_option("--out", c.out, "Output directory")->required();
  sub->add_option("--seed", c.seed, "Master seed; sub-seeds derive from it by label")->capture_default_str();
  sub->add_option("--jobs", c.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--languages", c.languages, "Comma-separated language codes")->capture_default_str();
  sub->add_option("--part", c.part, "Dataset part to use")
      ->capture_default_str()
      ->check(CLI::IsMember({"all", "train", "val", "test"}));
  sub->add_option("--split", c.split_strategy, "Split strategy")
      ->capture_default_str()
      ->check(CLI::IsMember({"within_relation", "across_relation"}));
  sub->add_option("--fractions", c.fractions, "train,val,test fractions")->capture_default_str();
  sub->add_option("--held-out", c.held_out, "Held-out relations for across_relation splits");
}

void add_judge(CLI::App* sub, JudgeOpts& j) {
  sub->add_option("--judge", j.mode, "Answer-equivalence judge")
      ->capture_default_str()
      ->check(CLI::IsMember({"exact_substring", "lemma_synonym", "external_llm"}));
  sub->add_option("--judge-threshold", j.threshold, "Acceptance threshold in (0, 1]")->capture_default_str();
  sub->add_option("--judge-endpoint", j.endpoint, "External judge URL")->envname("MLRECALL_JUDGE_ENDPOINT");
  sub->add_option("--judge-cache", j.cache, "JSONL cache of external judge scores");
  sub->add_option("--judge-fallback", j.fallback, "When the external judge is unreachable")
      ->capture_default_str()
      ->check(CLI::IsMember({"fail", "degrade"}));
}

JudgeConfig judge_config(const JudgeOpts& o) {
  JudgeConfig c;
  c.mode = judge_mode_from_string(o.mode);
  c.threshold = o.threshold;
  if (!o.endpoint.empty()) c.endpoint = o.endpoint;
  if (!o.cache.empty()) c.cache_path = o.cache;
  c.fallback = o.fallback == "degrade" ? JudgeFallback::Degrade : JudgeFallback::Fail;
  try {
    c.validate();
  } catch (const SpecError& e) {
    throw UsageError(e.what());
  }
  return c;
}

// Loaded model, data and the selected part.
struct Context {
  Model<float> model;
  FactSet data;
  SplitSpec spec;
  SplitResult split;
  std::vector<Language> languages;
  std::string part_name;
  nlohmann::json split_json;

  const FactSet& part(const std::string& name) const {
    if (name == "all") return data;
    if (name == "train") return split.train;
    if (name == "val") return split.val;
    return split.test;
  }
};

SplitSpec split_spec(const Common& c, std::uint64_t master) {
  SplitSpec s;
  s.strategy = c.split_strategy == "across_relation" ? SplitStrategy::AcrossRelation : SplitStrategy::WithinRelation;
  std::vector<double> raw;
  try {
    for (const auto& p : text::split(c.fractions, ',')) raw.push_back(std::stod(text::trim(p)));
  } catch (const std::logic_error&) {
    throw UsageError("cannot parse --fractions '" + c.fractions + "'");
  }
  if (raw.size() != 3) throw UsageError("--fractions needs three values: train,val,test");
  s.train = raw[0];
  s.val = raw[1];
  s.test = raw[2];
  s.seed = derive_seed(master, "split");
  s.held_out_relations = cli::parse_name_list(c.held_out);
  return s;
}

Context load_context(const Common& c) {
  Context ctx{load_model(c.model), {}, {}, {}, cli::parse_name_list(c.languages), c.part, nullptr};
  if (ctx.languages.empty()) throw UsageError("--languages is empty");
  if (!c.data.empty()) {
    ctx.data = load_triples(c.data);
    ctx.spec = split_spec(c, c.seed);
    try {
      ctx.split = split(ctx.data, ctx.spec);
    } catch (const SpecError& e) {
      throw UsageError(e.what());
    }
    ctx.split_json = {{"strategy", c.split_strategy},
                      {"fractions", {ctx.spec.train, ctx.spec.val, ctx.spec.test}},
                      {"held_out", ctx.spec.held_out_relations},
                      {"seed", ctx.spec.seed},
                      {"part", c.part}};
  }
  return ctx;
}

RunManifest base_manifest(const std::string& command, const CLI::App& sub, const Context& ctx, const Common& c) {
  RunManifest m;
  m.command = command;
  m.config = cli::effective_config(sub, {"out", "jobs"});
  m.model_fingerprint = ctx.model.fingerprint();
  m.dataset_hash = ctx.data.empty() ? "" : dataset_hash(ctx.data);
  m.split = ctx.split_json;
  m.seed = c.seed;
  m.started = utc_now();
  return m;
}

std::size_t reference_layer(const CLI::Option* opt, std::size_t value, const Model<float>& m) {
  if (opt->count() == 0) return std::min<std::size_t>(value, m.n_layers());
  if (value > m.n_layers()) throw UsageError("--reference-layer " + std::to_string(value) + " exceeds model depth");
  return value;
}

std::string example_id(const FactTriple& t, const Language& l) { return t.key() + "/" + l; }

// ---- analyze ----------------------------------------------------------------

struct AnalyzeOpts {
  Common c;
  JudgeOpts judge;
  std::string metrics = "ranks,agnostic,propagation,extraction";
  std::string layers;
  std::size_t reference_layer = 21;
  CLI::Option* ref_opt = nullptr;
};

int cmd_analyze(const CLI::App& sub, const AnalyzeOpts& o) {
  const auto metrics = cli::parse_name_list(o.metrics);
  const std::set<std::string> known{"ranks", "agnostic", "propagation", "extraction"};
  for (const auto& m : metrics)
    if (!known.count(m)) throw UsageError("unknown metric '" + m + "'");
  auto has = [&](const char* m) { return std::find(metrics.begin(), metrics.end(), m) != metrics.end(); };
  const auto jcfg = judge_config(o.judge);

  auto ctx = load_context(o.c);
  const auto& model = ctx.model;
  const auto& set = ctx.part(o.c.part);
  if (set.empty()) throw DomainError("dataset part '" + o.c.part + "' is empty");
  const auto audit = o.layers.empty() ? default_audit_layers(model.n_layers()) : cli::parse_index_list(o.layers);
  for (auto l : audit)
    if (l > model.n_layers()) throw UsageError("--layers includes " + std::to_string(l) + ", beyond the model");
  const auto ref = reference_layer(o.ref_opt, o.reference_layer, model);

  ArtifactWriter out(o.c.out, base_manifest("analyze", sub, ctx, o.c));
  CsvTable ranks({"example_id", "language", "role", "candidate", "layer", "rank", "prob"});
  CsvTable rank_means({"language", "role", "layer", "mean_rank"});
  CsvTable propagation({"language", "layer", "rate", "n"});
  CsvTable extraction({"language", "layer", "attn_rate", "mlp_rate"});
  nlohmann::json extraction_json = nlohmann::json::object();
  const Judge judge(jcfg);

  for (const auto& lang : ctx.languages) {
    std::vector<const FactTriple*> ex;
    for (const auto& t : set.triples)
      if (t.has_language(lang)) ex.push_back(&t);
    if (ex.empty()) continue;
    std::vector<ForwardTrace<float>> traces(ex.size());
    parallel_for(ex.size(), o.c.jobs, [&](std::size_t i) {
      const auto ids = tokenize_prompt(model.tokenizer(), render_prompt(*ex[i], lang));
      traces[i] = run_with_interventions(model, std::span<const TokenId>(ids), {}, CaptureFilter::last_position());
    });

    if (has("ranks")) {
      std::map<std::string, std::vector<RankTrajectory>> by_role;
      for (std::size_t i = 0; i < ex.size(); ++i) {
        std::vector<std::pair<std::string, std::string>> cands{{"english", ex[i]->answer_english()}};
        if (lang != "en") cands.emplace_back("target", ex[i]->answer.at(lang));
        for (const auto& [role, answer] : cands) {
          auto tr = rank_trajectory(model, traces[i], {answer}).front();
          for (const auto& [l, r] : tr.per_layer_rank)
            ranks.row({example_id(*ex[i], lang), lang, role, answer, cell(l), cell(r), cell(tr.per_layer_prob.at(l))});
          by_role[role].push_back(std::move(tr));
        }
      }
      for (const auto& [role, trs] : by_role)
        for (const auto& [l, m] : average_ranks(trs)) rank_means.row({lang, role, cell(l), cell(m)});
    }
    if (has("propagation")) {
      std::vector<std::vector<std::string>> words;
      for (const auto* t : ex)
        words.push_back(t->relation_tokens.count("en") ? t->relation_tokens.at("en") : t->relation_tokens.at(lang));
      for (auto l : audit)
        propagation.row({lang, cell(l), cell(relation_propagation_rate(model, traces, words, l, judge.as_equivalence())),
                         cell(ex.size())});
    }
    if (has("extraction")) {
      std::vector<TokenId> preds;
      std::vector<std::string> ids;
      for (std::size_t i = 0; i < ex.size(); ++i) {
        const auto& lg = traces[i].final_logits.back();
        preds.push_back(argmax(std::span<const float>(lg)));
        ids.push_back(example_id(*ex[i], lang));
      }
      const auto prof = extraction_profile(model, traces, preds, ids);
      for (std::size_t l = 0; l < model.n_layers(); ++l)
        extraction.row({lang, cell(l), cell(prof.per_layer_attn_rate[l]), cell(prof.per_layer_mlp_rate[l])});
      extraction_json[lang] = to_json(prof);
    }
  }

  if (has("ranks")) {
    out.csv("ranks.csv", ranks);
    out.csv("ranks_mean.csv", rank_means);
  }
  if (has("agnostic")) {
    EvalOptions eo;
    eo.reference_layer = ref;
    eo.audit_layers = audit;
    eo.jobs = o.c.jobs;
    eo.split_id = o.c.part;
    const auto rep = evaluate(model, set, ctx.languages, {}, jcfg, eo);
    out.csv("agnostic_breakdown.csv", breakdown_csv(rep));
    out.csv("agnostic_summary.csv", eval_csv(rep));
    out.json("agnostic_report.json", to_json(rep));
  }
  if (has("propagation")) out.csv("propagation.csv", propagation);
  if (has("extraction")) {
    out.csv("extraction.csv", extraction);
    out.json("extraction.json", extraction_json);
  }
  out.commit();
  return kOk;
}

// ---- extract ----------------------------------------------------------------

struct ExtractOpts {
  Common c;
  std::string kind;
  std::string layers;
  std::string scales = "1";
  bool grid = false;
  std::string metric;
  std::string point;
  std::size_t icl_k = 5;
  std::size_t reference_layer = 21;
  CLI::Option* ref_opt = nullptr;
};

std::vector<PromptItem> icl_items(const FactSet& set, const std::vector<Language>& langs, std::size_t k,
                                  std::uint64_t seed) {
  std::vector<IclBundle> bundles;
  for (const auto& l : langs) {
    IclOptions io;
    io.k = k;
    io.seed = derive_seed(seed, "icl/" + l);
    auto b = build_icl_bundles(set, set, l, io);
    bundles.insert(bundles.end(), b.begin(), b.end());
  }
  return icl_prompt_items(bundles);
}

double pooled_metric(const EvalReport& r, const std::string& metric) {
  const auto& s = r.non_english ? *r.non_english : r.per_language.begin()->second;
  const auto v = metric == "agnostic" ? s.agnostic_rate : s.final_accuracy;
  if (!v) throw DomainError("metric '" + metric + "' is undefined on an empty evaluation set");
  return *v;
}

int cmd_extract(const CLI::App& sub, const ExtractOpts& o) {
  if (o.layers.empty()) throw UsageError("extract needs --layer/--layers");
  const auto layers = cli::parse_index_list(o.layers);
  const auto scales = cli::parse_number_list(o.scales);
  for (auto s : scales)
    if (s <= 0) throw UsageError("scales must be positive");
  if (!o.grid && scales.size() > 1) throw UsageError("several --scales need --grid");
  const bool translation = o.kind == "translation";
  const auto metric = o.metric.empty() ? (translation ? "final_acc" : "agnostic") : o.metric;
  ExtractOptions eopt;
  eopt.point = o.point.empty() ? (translation ? ExtractionPoint::LayerInput : ExtractionPoint::LayerOutput)
                               : (o.point == "input" ? ExtractionPoint::LayerInput : ExtractionPoint::LayerOutput);
  eopt.seed = o.c.seed;
  eopt.jobs = o.c.jobs;

  auto ctx = load_context(o.c);
  const auto& model = ctx.model;
  const auto& train = ctx.split.train;
  if (train.empty()) throw DomainError("the training split is empty; nothing to extract from");
  for (auto l : layers)
    if (l >= model.n_layers()) throw UsageError("--layers includes " + std::to_string(l) + ", beyond the model");

  std::vector<Language> non_en;
  for (const auto& l : ctx.languages)
    if (l != "en") non_en.push_back(l);
  auto extract_at = [&](std::size_t layer) {
    if (translation)
      return translation_difference_vector(model, fact_prompt_items(train, non_en), translation_prompt_items(train, non_en),
                                           layer, eopt);
    return recall_task_vector(model, icl_items(train, ctx.languages, o.icl_k, o.c.seed), layer, eopt);
  };

  std::map<std::size_t, SteeringVector> vecs;
  for (auto l : layers) vecs.emplace(l, extract_at(l));

  auto manifest = base_manifest("extract", sub, ctx, o.c);
  if (!o.grid) {
    ArtifactWriter out(o.c.out, manifest);
    for (auto& [l, v] : vecs) {
      v.scale = scales.front();
      out.vector("vectors/" + o.kind + "_L" + std::to_string(l) + ".bin", v);
    }
    out.commit();
    return kOk;
  }

  if (ctx.split.val.empty()) throw DomainError("grid search needs a non-empty validation split");
  EvalOptions eo;
  eo.reference_layer = reference_layer(o.ref_opt, o.reference_layer, model);
  eo.split_id = "val";
  const auto result = grid_search(
      layers, scales,
      [&](std::size_t layer, double scale) {
        const std::vector<InterventionSpec> iv{to_intervention(vecs.at(layer), scale)};
        return pooled_metric(evaluate(model, ctx.split.val, ctx.languages, iv, JudgeConfig{}, eo), metric);
      },
      metric, o.c.jobs);
  if (!result.best) throw Error("every grid candidate failed; first error: " + result.candidates.front().error);
  ArtifactWriter out(o.c.out, manifest);
  out.json("grid.json", to_json(result));
  out.csv("grid.csv", grid_csv(result));
  auto best = vecs.at(result.best->layer);
  best.scale = result.best->scale;
  out.vector("vectors/" + o.kind + "_best.bin", best);
  out.commit();
  return kOk;
}

// ---- eval -------------------------------------------------------------------

struct EvalCmdOpts {
  Common c;
  JudgeOpts judge;
  std::string conditions = "original";
  std::string translation_vector, recall_vector;
  double translation_scale = 0, recall_scale = 0;
  std::string seeds;
  std::string baseline;
  std::size_t max_new_tokens = 5;
  std::size_t baseline_step_tokens = 16;
  bool strict = false;
  bool force = false;
  std::size_t reference_layer = 21;
  CLI::Option* ref_opt = nullptr;
};

std::optional<double> opt_scale(double s) { return s > 0 ? std::optional<double>(s) : std::nullopt; }

int cmd_eval(const CLI::App& sub, const EvalCmdOpts& o) {
  const auto conditions = cli::parse_name_list(o.conditions);
  const std::set<std::string> known{"original", "translation", "recall", "combined"};
  for (const auto& c : conditions) {
    if (!known.count(c)) throw UsageError("unknown condition '" + c + "'");
    if ((c == "translation" || c == "combined") && o.translation_vector.empty())
      throw UsageError("condition '" + c + "' needs --translation-vector");
    if ((c == "recall" || c == "combined") && o.recall_vector.empty())
      throw UsageError("condition '" + c + "' needs --recall-vector");
  }
  if (conditions.empty() && o.baseline.empty()) throw UsageError("nothing to evaluate");
  std::vector<std::uint64_t> seeds;
  if (o.seeds.empty()) seeds.push_back(o.c.seed);
  else
    for (auto s : cli::parse_index_list(o.seeds)) seeds.push_back(s);
  const auto jcfg = judge_config(o.judge);

  auto ctx = load_context(o.c);
  const auto& model = ctx.model;
  std::optional<SteeringVector> tv, rv;
  if (!o.translation_vector.empty()) {
    tv = load_vector(o.translation_vector);
    check_vector_model(*tv, model.fingerprint(), o.force);
  }
  if (!o.recall_vector.empty()) {
    rv = load_vector(o.recall_vector);
    check_vector_model(*rv, model.fingerprint(), o.force);
  }
  auto interventions = [&](const std::string& c) {
    std::vector<InterventionSpec> iv;
    if (c == "translation" || c == "combined") iv.push_back(to_intervention(*tv, opt_scale(o.translation_scale)));
    if (c == "recall" || c == "combined") iv.push_back(to_intervention(*rv, opt_scale(o.recall_scale)));
    return iv;
  };

  auto manifest = base_manifest("eval", sub, ctx, o.c);
  manifest.split["seeds"] = seeds;
  for (const auto& c : conditions) manifest.interventions.push_back(c + ":" + intervention_fingerprint(interventions(c)));
  ArtifactWriter out(o.c.out, manifest);

  EvalOptions eo;
  eo.reference_layer = reference_layer(o.ref_opt, o.reference_layer, model);
  eo.max_new_tokens = o.max_new_tokens;
  eo.strict_single_token = o.strict;
  eo.force = o.force;
  eo.jobs = o.c.jobs;

  std::map<std::pair<std::string, Language>, std::vector<double>> acc;
  for (auto seed : seeds) {
    const auto spec = split_spec(o.c, seed);
    const auto parts = split(ctx.data, spec);
    const FactSet& set = o.c.part == "all" ? ctx.data : o.c.part == "train" ? parts.train
                                                      : o.c.part == "val"   ? parts.val
                                                                            : parts.test;
    if (set.empty()) throw DomainError("dataset part '" + o.c.part + "' is empty for seed " + std::to_string(seed));
    const auto tag = "seed" + std::to_string(seed);
    eo.split_id = o.c.part + "/" + tag;

    std::map<std::string, EvalReport> reports;
    for (const auto& c : conditions) {
      auto rep = evaluate(model, set, ctx.languages, interventions(c), jcfg, eo);
      auto j = to_json(rep, true);
      j["condition"] = c;
      j["seed"] = seed;
      out.json("reports/" + tag + "/" + c + ".json", j);
      out.csv("reports/" + tag + "/" + c + ".csv", eval_csv(rep));
      out.csv("reports/" + tag + "/" + c + "_breakdown.csv", breakdown_csv(rep));
      for (const auto& [lang, s] : rep.per_language)
        if (s.final_accuracy) acc[{c, lang}].push_back(*s.final_accuracy);
      if (rep.non_english && rep.non_english->final_accuracy) acc[{c, "non-en"}].push_back(*rep.non_english->final_accuracy);
      reports.emplace(c, std::move(rep));
    }
    if (!reports.empty()) out.csv("comparison_" + tag + ".csv", comparison_csv(compare_conditions(reports)));

    if (o.baseline == "trt") {
      CsvTable t({"language", "n", "final_accuracy", "first_failed_step1", "first_failed_step2", "first_failed_step3"});
      nlohmann::json j = nlohmann::json::object();
      BaselineOptions bo;
      bo.max_tokens_per_step = o.baseline_step_tokens;
      bo.split_id = eo.split_id;
      for (const auto& lang : ctx.languages) {
        if (lang == "en") continue;
        const auto b = baseline_translate_recall_translate(model_generator(model), set, lang, {}, bo);
        const auto& s = b.report.per_language.at(lang);
        auto count = [&](int step) {
          auto it = b.first_failure_counts.find(step);
          return it == b.first_failure_counts.end() ? std::size_t{0} : it->second;
        };
        t.row({lang, cell(s.n), cell(s.final_accuracy), cell(count(1)), cell(count(2)), cell(count(3))});
        auto rj = to_json(b.report);
        rj["first_failure_counts"] = {{"1", count(1)}, {"2", count(2)}, {"3", count(3)}};
        j[lang] = rj;
        if (s.final_accuracy) acc[{"trt", lang}].push_back(*s.final_accuracy);
      }
      j["condition"] = "trt";
      j["seed"] = seed;
      out.json("reports/" + tag + "/trt.json", j);
      out.csv("reports/" + tag + "/trt.csv", t);
    }
  }

  CsvTable summary({"condition", "language", "n_seeds", "mean_final_accuracy", "min", "max"});
  for (const auto& [k, v] : acc) {
    double sum = 0;
    for (double x : v) sum += x;
    summary.row({k.first, k.second, cell(v.size()), cell(sum / static_cast<double>(v.size())),
                 cell(*std::min_element(v.begin(), v.end())), cell(*std::max_element(v.begin(), v.end()))});
  }
  out.csv("summary.csv", summary);
  out.commit();
  return kOk;
}

// ---- causal commands --------------------------------------------------------

struct Setups {
  std::vector<PatchSetup> setups;
  std::vector<std::string> no_counterpart;
};

Setups build_setups(const Model<float>& model, const FactSet& set, const std::vector<Language>& langs,
                    std::uint64_t seed, std::size_t max_examples) {
  Setups s;
  const auto& tok = model.tokenizer();
  for (const auto& lang : langs)
    for (const auto& t : set.triples) {
      if (!t.has_language(lang)) continue;
      if (max_examples && s.setups.size() >= max_examples) return s;
      try {
        const auto cp = corrupt_counterpart(t, set, lang, derive_seed(seed, "corrupt"), tok);
        s.setups.push_back({tokenize_prompt(tok, render_prompt(t, lang)), cp.ids,
                            tok.continuation_first_token(t.answer.at(lang)), example_id(t, lang)});
      } catch (const NoCounterpartError&) {
        s.no_counterpart.push_back(example_id(t, lang));
      }
    }
  return s;
}

std::vector<ComponentKind> parse_kinds(const std::string& spec) {
  std::vector<ComponentKind> out;
  for (const auto& k : cli::parse_name_list(spec)) {
    if (k == "resid") out.push_back(ComponentKind::Residual);
    else if (k == "attn") out.push_back(ComponentKind::Attn);
    else if (k == "mlp") out.push_back(ComponentKind::Mlp);
    else if (k == "head") out.push_back(ComponentKind::Head);
    else throw UsageError("unknown component kind '" + k + "'");
  }
  return out;
}

std::vector<std::size_t> layers_or_all(const std::string& spec, std::size_t n) {
  if (spec.empty()) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }
  auto l = cli::parse_index_list(spec);
  for (auto x : l)
    if (x >= n) throw UsageError("layer " + std::to_string(x) + " is beyond the model");
  return l;
}

struct PatchOpts {
  Common c;
  std::string layers;
  std::string kinds = "resid,attn,mlp";
  std::size_t max_examples = 0;
};

int cmd_patch(const CLI::App& sub, const PatchOpts& o) {
  const auto kinds = parse_kinds(o.kinds);
  auto ctx = load_context(o.c);
  const auto& model = ctx.model;
  const auto layers = layers_or_all(o.layers, model.n_layers());
  const auto s = build_setups(model, ctx.part(o.c.part), ctx.languages, o.c.seed, o.max_examples);
  if (s.setups.empty()) throw InsufficientDataError("no example has a same-length counterpart to patch from");
  std::vector<std::string> degenerate;
  const auto rows = aie_sweep(model, s.setups, component_grid(model.n_layers(), model.n_heads(), layers, kinds), &degenerate,
                              o.c.jobs);
  ArtifactWriter out(o.c.out, base_manifest("patch", sub, ctx, o.c));
  out.csv("aie.csv", causal_csv(rows));
  out.json("patch_summary.json",
           {{"n_setups", s.setups.size()}, {"no_counterpart", s.no_counterpart}, {"degenerate", degenerate}});
  out.commit();
  return kOk;
}

struct KnockoutOpts {
  Common c;
  std::size_t k = 6;
  std::string centers;
  std::string sources = "subject,relation,last";
  double threshold = 0.2;
};

int cmd_knockout(const CLI::App& sub, const KnockoutOpts& o) {
  KnockoutPlan plan;
  plan.k = o.k;
  plan.sources.clear();
  for (const auto& s : cli::parse_name_list(o.sources)) {
    try {
      plan.sources.push_back(source_set_from_string(s));
    } catch (const SpecError& e) {
      throw UsageError(e.what());
    }
  }
  auto ctx = load_context(o.c);
  const auto& model = ctx.model;
  plan.centers = layers_or_all(o.centers, model.n_layers());
  const auto& tok = model.tokenizer();

  std::vector<std::pair<const FactTriple*, Language>> ex;
  for (const auto& lang : ctx.languages)
    for (const auto& t : ctx.part(o.c.part).triples)
      if (t.has_language(lang)) ex.emplace_back(&t, lang);
  std::vector<std::vector<KnockoutRow>> per(ex.size());
  std::vector<std::string> unresolved(ex.size());
  parallel_for(ex.size(), o.c.jobs, [&](std::size_t i) {
    const auto& [t, lang] = ex[i];
    try {
      const auto pp = locate_positions(tok, *t, lang);
      per[i] = knockout_sweep(model, tokenize_prompt(tok, render_prompt(*t, lang)), pp, plan,
                              tok.continuation_first_token(t->answer.at(lang)), example_id(*t, lang));
    } catch (const PositionResolutionError& e) {
      unresolved[i] = example_id(*t, lang) + ": " + e.what();
    }
  });
  std::vector<KnockoutRow> rows;
  nlohmann::json skipped = nlohmann::json::array();
  for (std::size_t i = 0; i < ex.size(); ++i) {
    rows.insert(rows.end(), per[i].begin(), per[i].end());
    if (!unresolved[i].empty()) skipped.push_back(unresolved[i]);
  }
  ArtifactWriter out(o.c.out, base_manifest("knockout", sub, ctx, o.c));
  out.csv("knockout.csv", knockout_csv(rows, o.threshold));
  out.json("knockout_summary.json", {{"n_examples", ex.size() - skipped.size()}, {"unresolved", skipped}});
  out.commit();
  return kOk;
}

struct AblateOpts {
  Common c;
  std::size_t top_k = 3;
  std::string mode = "zero";
  std::string relations;
  std::size_t max_examples = 0;
};

int cmd_ablate(const CLI::App& sub, const AblateOpts& o) {
  auto ctx = load_context(o.c);
  const auto& model = ctx.model;
  const auto& set = ctx.part(o.c.part);
  std::set<std::string> rels;
  if (o.relations.empty())
    for (const auto& t : set.triples) rels.insert(t.relation_id);
  else
    for (const auto& r : cli::parse_name_list(o.relations)) rels.insert(r);

  const auto all = build_setups(model, set, ctx.languages, o.c.seed, 0);
  std::map<HeadRef, std::vector<double>> means;
  const auto mode = o.mode == "mean" ? AblationMode::Mean : AblationMode::Zero;
  if (mode == AblationMode::Mean) {
    std::vector<std::vector<TokenId>> corpus;
    for (const auto& s : all.setups) corpus.push_back(s.clean);
    std::vector<HeadRef> heads;
    for (std::size_t l = 0; l < model.n_layers(); ++l)
      for (std::size_t h = 0; h < model.n_heads(); ++h) heads.push_back({l, h});
    means = mean_head_outputs(model, corpus, heads);
  }

  nlohmann::json rankings = nlohmann::json::object(), summaries = nlohmann::json::object();
  nlohmann::json skipped = nlohmann::json::object();
  std::vector<AblationEffect> effects;
  for (const auto& rel : rels) {
    std::vector<PatchSetup> ex;
    for (const auto& s : all.setups)
      if (s.example_id.rfind(rel + "/", 0) == 0 && (!o.max_examples || ex.size() < o.max_examples)) ex.push_back(s);
    try {
      if (ex.empty()) throw InsufficientDataError("no patchable examples");
      const auto ranking = rank_heads_by_aie(model, ex, rel, kLast, o.c.jobs);
      rankings[rel] = to_json(ranking);
      const auto heads = top_heads(ranking, o.top_k);
      std::vector<AblationEffect> rel_effects;
      for (const auto& s : ex) rel_effects.push_back(ablate_heads(model, s.clean, heads, mode, s.target, means, s.example_id));
      const auto sm = summarize(rel_effects);
      summaries[rel] = {{"n", sm.n},
                        {"mean_top1_delta", sm.mean_top1_delta},
                        {"mean_gold_delta", sm.mean_gold_delta},
                        {"prediction_changed_rate", sm.prediction_changed_rate}};
      effects.insert(effects.end(), rel_effects.begin(), rel_effects.end());
    } catch (const InsufficientDataError& e) {
      skipped[rel] = e.what();
    }
  }
  if (effects.empty()) throw InsufficientDataError("no relation had examples usable for head ranking");
  ArtifactWriter out(o.c.out, base_manifest("ablate", sub, ctx, o.c));
  out.json("head_ranking.json", rankings);
  out.csv("ablation.csv", ablation_csv(effects));
  out.json("ablation_summary.json", {{"mode", o.mode}, {"top_k", o.top_k}, {"relations", summaries}, {"skipped", skipped}});
  out.commit();
  return kOk;
}

// ---- similarity -------------------------------------------------------------

struct SimilarityCmdOpts {
  Common c;
  std::string layers;
  std::string vector;
  double vector_scale = 0;
  bool hidden = false;
  bool force = false;
};

int cmd_similarity(const CLI::App& sub, const SimilarityCmdOpts& o) {
  auto ctx = load_context(o.c);
  const auto& model = ctx.model;
  SimilarityOptions so;
  so.layers = layers_or_all(o.layers, model.n_layers());
  so.hidden_width = o.hidden;
  so.jobs = o.c.jobs;
  so.condition_a = "recall";
  so.condition_b = "translation";
  auto manifest = base_manifest("similarity", sub, ctx, o.c);
  if (!o.vector.empty()) {
    const auto v = load_vector(o.vector);
    check_vector_model(v, model.fingerprint(), o.force);
    so.interventions_a = {to_intervention(v, opt_scale(o.vector_scale))};
    so.condition_a = "recall+vector";
    manifest.interventions.push_back(intervention_fingerprint(so.interventions_a));
  }
  const auto [a, b] = recall_translation_pairs(ctx.part(o.c.part), ctx.languages);
  const auto p = mlp_activation_similarity(model, a, b, so);
  ArtifactWriter out(o.c.out, manifest);
  out.csv("similarity.csv", similarity_csv(p));
  out.json("similarity.json", to_json(p));
  out.commit();
  return kOk;
}

// ---- verify / report --------------------------------------------------------

int cmd_verify(const std::vector<std::string>& dirs) {
  bool ok = true;
  for (const auto& d : dirs) {
    const auto r = verify_run(d);
    if (r.ok) {
      std::cout << d << ": OK (manifest " << r.manifest_id << ")\n";
    } else {
      ok = false;
      for (const auto& p : r.problems) std::cout << d << ": " << p << '\n';
    }
  }
  return ok ? kOk : kFailure;
}

struct ReportOpts {
  std::vector<std::string> runs;
  std::string out;
};

int cmd_report(const CLI::App& sub, const ReportOpts& o) {
  std::map<std::pair<std::string, std::string>, std::vector<std::array<std::optional<double>, 3>>> cells;
  RunManifest m;
  m.command = "report";
  m.config = cli::effective_config(sub, {"out"});
  std::set<std::string> models, datasets;
  for (const auto& dir : o.runs) {
    const auto v = verify_run(dir);
    if (!v.ok) throw Error("run '" + dir + "' failed verification: " + v.problems.front());
    std::ifstream mf(std::filesystem::path(dir) / "manifest.json");
    const auto rm = RunManifest::from_json(nlohmann::json::parse(mf));
    models.insert(rm.model_fingerprint);
    datasets.insert(rm.dataset_hash);
    m.interventions.push_back(v.manifest_id);
    for (const auto& [name, _] : rm.artifacts) {
      if (std::filesystem::path(name).extension() != ".json") continue;
      std::ifstream f(std::filesystem::path(dir) / name);
      const auto j = nlohmann::json::parse(f);
      if (!j.contains("condition") || !j.contains("per_language")) continue;
      const auto cond = j["condition"].get<std::string>();
      auto grab = [](const nlohmann::json& s, const char* k) {
        return s.contains(k) && s[k].is_number() ? std::optional<double>(s[k].get<double>()) : std::nullopt;
      };
      for (const auto& [lang, s] : j["per_language"].items())
        cells[{cond, lang}].push_back({grab(s, "final_accuracy"), grab(s, "agnostic_rate"), grab(s, "conversion_correctness")});
      if (j["non_english"].is_object())
        cells[{cond, "non-en"}].push_back({grab(j["non_english"], "final_accuracy"), grab(j["non_english"], "agnostic_rate"),
                                           grab(j["non_english"], "conversion_correctness")});
    }
  }
  auto joined = [](const std::set<std::string>& s) {
    std::string r;
    for (const auto& x : s) r += (r.empty() ? "" : ",") + x;
    return r;
  };
  m.model_fingerprint = joined(models);
  m.dataset_hash = joined(datasets);
  m.started = utc_now();

  CsvTable t({"condition", "language", "n_reports", "mean_final_accuracy", "mean_agnostic_rate",
              "mean_conversion_correctness"});
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [k, v] : cells) {
    std::array<std::optional<double>, 3> mean;
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0;
      std::size_t n = 0;
      for (const auto& x : v)
        if (x[c]) {
          s += *x[c];
          ++n;
        }
      if (n) mean[c] = s / static_cast<double>(n);
    }
    t.row({k.first, k.second, cell(v.size()), cell(mean[0]), cell(mean[1]), cell(mean[2])});
    rows.push_back({{"condition", k.first}, {"language", k.second}, {"n_reports", v.size()},
                    {"mean_final_accuracy", opt_json(mean[0])}, {"mean_agnostic_rate", opt_json(mean[1])},
                    {"mean_conversion_correctness", opt_json(mean[2])}});
  }
  ArtifactWriter out(o.out, m);
  out.csv("report.csv", t);
  out.json("report.json", {{"runs", o.runs}, {"rows", rows}});
  out.commit();
  return kOk;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multilingual factual-recall interpretability toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  spdlog::set_pattern("%l: %v");

  auto* analyze = app.add_subcommand("analyze", "Logit-lens rank trajectories, agnostic tables, propagation, extraction");
  AnalyzeOpts ao;
  add_common(analyze, ao.c, "all");
  add_judge(analyze, ao.judge);
  analyze->add_option("--metrics", ao.metrics, "ranks,agnostic,propagation,extraction")->capture_default_str();
  analyze->add_option("--layers", ao.layers, "Audit layers, e.g. 20-27 (default 20-27 clipped to the model)");
  ao.ref_opt = analyze->add_option("--reference-layer", ao.reference_layer, "Layer for conversion accounting")
                   ->capture_default_str();

  auto* extract = app.add_subcommand("extract", "Extract steering vectors, optionally grid-searching layer and scale");
  ExtractOpts xo;
  add_common(extract, xo.c, "train");
  extract->add_option("kind", xo.kind, "translation | recall")->required()->check(CLI::IsMember({"translation", "recall"}));
  extract->add_option("--layer,--layers", xo.layers, "Layer(s), e.g. 21 or 1-4");
  extract->add_option("--scales", xo.scales, "Scale(s), e.g. 2 or 1-4")->capture_default_str();
  extract->add_flag("--grid", xo.grid, "Grid-search layers x scales on the validation split");
  extract->add_option("--metric", xo.metric, "final_acc | agnostic (default by kind)")
      ->check(CLI::IsMember({"final_acc", "agnostic"}));
  extract->add_option("--point", xo.point, "input | output (default by kind)")->check(CLI::IsMember({"input", "output"}));
  extract->add_option("--icl-k", xo.icl_k, "Demonstrations per recall ICL prompt")->capture_default_str();
  xo.ref_opt = extract->add_option("--reference-layer", xo.reference_layer, "Layer for agnostic correctness")
                   ->capture_default_str();

  auto* eval = app.add_subcommand("eval", "Evaluate conditions across seeds, with optional prompting baseline");
  EvalCmdOpts eo;
  add_common(eval, eo.c, "test");
  add_judge(eval, eo.judge);
  eval->add_option("--conditions", eo.conditions, "original,translation,recall,combined")->capture_default_str();
  eval->add_option("--translation-vector", eo.translation_vector, "Translation vector file");
  eval->add_option("--recall-vector", eo.recall_vector, "Recall vector file");
  eval->add_option("--translation-scale", eo.translation_scale, "Override the stored translation scale");
  eval->add_option("--recall-scale", eo.recall_scale, "Override the stored recall scale");
  eval->add_option("--seeds", eo.seeds, "Split seeds, e.g. 0,1,2 (default --seed)");
  eval->add_option("--baseline", eo.baseline, "trt = translate-recall-translate")->check(CLI::IsMember({"trt"}));
  eval->add_option("--max-new-tokens", eo.max_new_tokens, "Greedy decode budget")->capture_default_str();
  eval->add_option("--baseline-step-tokens", eo.baseline_step_tokens, "Budget per baseline step")->capture_default_str();
  eval->add_flag("--strict", eo.strict, "Judge only the first generated token");
  eval->add_flag("--force", eo.force, "Accept vectors extracted from a different model");
  eo.ref_opt = eval->add_option("--reference-layer", eo.reference_layer, "Layer for conversion accounting")
                   ->capture_default_str();

  auto* patch = app.add_subcommand("patch", "Activation-patching AIE sweep");
  PatchOpts po;
  add_common(patch, po.c, "all");
  patch->add_option("--layers", po.layers, "Layers to patch (default all)");
  patch->add_option("--kinds", po.kinds, "resid,attn,mlp,head")->capture_default_str();
  patch->add_option("--max-examples", po.max_examples, "Cap on examples (0 = all)")->capture_default_str();

  auto* knockout = app.add_subcommand("knockout", "Attention knockout sweep");
  KnockoutOpts ko;
  add_common(knockout, ko.c, "all");
  knockout->add_option("--k", ko.k, "Window size in layers")->capture_default_str()->check(CLI::PositiveNumber);
  knockout->add_option("--centers", ko.centers, "Window centres (default all layers)");
  knockout->add_option("--sources", ko.sources, "subject,relation,last,all")->capture_default_str();
  knockout->add_option("--threshold", ko.threshold, "Relative drop counted as significant")->capture_default_str();

  auto* ablate = app.add_subcommand("ablate", "Rank heads by AIE and ablate the top ones");
  AblateOpts bo;
  add_common(ablate, bo.c, "all");
  ablate->add_option("--top-k", bo.top_k, "Heads to ablate")->capture_default_str();
  ablate->add_option("--mode", bo.mode, "zero | mean")->capture_default_str()->check(CLI::IsMember({"zero", "mean"}));
  ablate->add_option("--relations", bo.relations, "Relations (default all in the part)");
  ablate->add_option("--max-examples", bo.max_examples, "Cap on examples per relation (0 = all)")->capture_default_str();

  auto* similarity = app.add_subcommand("similarity", "MLP activation similarity, recall vs translation prompts");
  SimilarityCmdOpts so;
  add_common(similarity, so.c, "all");
  similarity->add_option("--layers", so.layers, "MLP layers (default all)");
  similarity->add_option("--vector", so.vector, "Steering vector applied to the recall prompts");
  similarity->add_option("--vector-scale", so.vector_scale, "Override the stored vector scale");
  similarity->add_flag("--hidden", so.hidden, "Use the gated hidden activation instead of the MLP output");
  similarity->add_flag("--force", so.force, "Accept a vector extracted from a different model");

  auto* verify = app.add_subcommand("verify", "Re-derive hashes of run directories");
  std::vector<std::string> verify_dirs;
  verify->add_option("dirs", verify_dirs, "Run directories")->required();

  auto* report = app.add_subcommand("report", "Aggregate evaluation reports from verified runs");
  ReportOpts ro;
  report->add_option("runs", ro.runs, "Run directories")->required();
  report->add_option("--out", ro.out, "Output directory")->required();

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    args = cli::expand_config(std::move(args));
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  }
  std::reverse(args.begin(), args.end()); // CLI11 consumes a reversed vector
  try {
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (analyze->parsed()) return cmd_analyze(*analyze, ao);
    if (extract->parsed()) return cmd_extract(*extract, xo);
    if (eval->parsed()) return cmd_eval(*eval, eo);
    if (patch->parsed()) return cmd_patch(*patch, po);
    if (knockout->parsed()) return cmd_knockout(*knockout, ko);
    if (ablate->parsed()) return cmd_ablate(*ablate, bo);
    if (similarity->parsed()) return cmd_similarity(*similarity, so);
    if (verify->parsed()) return cmd_verify(verify_dirs);
    if (report->parsed()) return cmd_report(*report, ro);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const FingerprintMismatchError& e) {
    std::cerr << "refused: " << e.what() << '\n';
    return kRefused;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
