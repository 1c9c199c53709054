#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>

#include <json.hpp>

#include "mlrecall/causal/positions.hpp"
#include "mlrecall/core/csv.hpp"
#include "mlrecall/core/parallel.hpp"
#include "mlrecall/core/rng.hpp"
#include "mlrecall/lens/logit_lens.hpp"

namespace mlrecall {

struct PatchSetup {
  std::vector<TokenId> clean;
  std::vector<TokenId> corrupted;
  TokenId target = 0;
  std::string example_id;
};

template <typename T>
double target_probability(const ForwardTrace<T>& tr, TokenId target) {
  return softmax(tr.logits())[static_cast<std::size_t>(target)];
}

inline constexpr double kDegenerateGap = 1e-9;

// Runs the clean and corrupted forwards once and answers AIE queries for any
// set of components restored from the clean run:
//   AIE = (P*_patched[o] − P*[o]) / (P[o] − P*[o]).
template <typename T>
class AieRunner {
public:
  AieRunner(const Model<T>& model, PatchSetup setup) : model_(&model), setup_(std::move(setup)) {
    if (setup_.clean.size() != setup_.corrupted.size())
      throw ShapeError("clean and corrupted prompts differ in length (" + std::to_string(setup_.clean.size()) +
                       " vs " + std::to_string(setup_.corrupted.size()) + ")");
    if (setup_.target < 0 || static_cast<std::size_t>(setup_.target) >= model.vocab_size())
      throw IndexError("target token " + std::to_string(setup_.target) + " outside vocabulary");
    CaptureFilter f;
    f.head_out = true;
    f.attn_weights = false;
    clean_ = run_with_interventions(model, std::span<const TokenId>(setup_.clean), {}, f);
    p_clean_ = target_probability(clean_, setup_.target);
    f = CaptureFilter::last_position();
    f.attn_weights = false;
    p_corrupt_ = target_probability(run_with_interventions(model, std::span<const TokenId>(setup_.corrupted), {}, f),
                                    setup_.target);
  }

  double p_clean() const { return p_clean_; }
  double p_corrupt() const { return p_corrupt_; }
  double gap() const { return p_clean_ - p_corrupt_; }
  bool degenerate() const { return std::abs(gap()) < kDegenerateGap; }
  const ForwardTrace<T>& clean_trace() const { return clean_; }
  const PatchSetup& setup() const { return setup_; }

  double patched_probability(const std::vector<ComponentSite>& sites) const {
    std::vector<InterventionSpec> patches;
    for (const auto& s : sites) patches.push_back(make_patch(clean_, s));
    CaptureFilter f = CaptureFilter::last_position();
    f.attn_weights = false;
    f.residual = f.attn_out = f.mlp_out = false;
    return target_probability(run_with_interventions(*model_, std::span<const TokenId>(setup_.corrupted), patches, f),
                              setup_.target);
  }

  double aie(const std::vector<ComponentSite>& sites) const {
    if (degenerate())
      throw DegenerateGapError("example " + setup_.example_id + ": |P[o] - P*[o]| = " +
                               format_number(std::abs(gap())) + " is below 1e-9");
    return (patched_probability(sites) - p_corrupt_) / gap();
  }

  double aie(const ComponentSite& site) const { return aie(std::vector<ComponentSite>{site}); }

private:
  const Model<T>* model_;
  PatchSetup setup_;
  ForwardTrace<T> clean_;
  double p_clean_ = 0, p_corrupt_ = 0;
};

template <typename T>
double aie(const Model<T>& model, const PatchSetup& setup, const ComponentSite& site) {
  return AieRunner<T>(model, setup).aie(site);
}

// Every (layer, kind) site at one position; heads expand to all heads.
inline std::vector<ComponentSite> component_grid(std::size_t n_layers, std::size_t n_heads,
                                                 const std::vector<std::size_t>& layers,
                                                 const std::vector<ComponentKind>& kinds, Position position = kLast) {
  std::vector<ComponentSite> out;
  for (auto l : layers) {
    if (l >= n_layers) throw IndexError("layer " + std::to_string(l) + " outside a " + std::to_string(n_layers) + "-layer model");
    for (auto k : kinds) {
      if (k == ComponentKind::Head)
        for (std::size_t h = 0; h < n_heads; ++h) out.push_back({k, l, h, position});
      else
        out.push_back({k, l, 0, position});
    }
  }
  return out;
}

// Long-format causal output row.
struct CausalRow {
  std::string example_id;
  std::size_t layer = 0;
  std::string component;
  std::optional<std::size_t> head;
  std::string metric;
  double value = 0;
};

inline CsvTable causal_csv(const std::vector<CausalRow>& rows) {
  CsvTable t({"example_id", "layer", "component", "head", "metric", "value"});
  for (const auto& r : rows)
    t.row({r.example_id, cell(r.layer), r.component, r.head ? cell(*r.head) : "", r.metric, cell(r.value)});
  return t;
}

// AIE for each site on each example. Degenerate examples are reported in
// `skipped` and contribute no rows.
template <typename T>
std::vector<CausalRow> aie_sweep(const Model<T>& model, const std::vector<PatchSetup>& setups,
                                 const std::vector<ComponentSite>& sites, std::vector<std::string>* skipped = nullptr,
                                 std::size_t jobs = 1) {
  std::vector<std::vector<CausalRow>> per(setups.size());
  std::vector<char> degenerate(setups.size(), 0);
  parallel_for(setups.size(), jobs, [&](std::size_t i) {
    AieRunner<T> run(model, setups[i]);
    if (run.degenerate()) {
      degenerate[i] = 1;
      return;
    }
    for (const auto& s : sites) {
      CausalRow r{setups[i].example_id, s.layer, to_string(s.kind), std::nullopt, "aie", run.aie(s)};
      if (s.kind == ComponentKind::Head) r.head = s.head;
      per[i].push_back(std::move(r));
    }
  });
  std::vector<CausalRow> out;
  for (std::size_t i = 0; i < setups.size(); ++i) {
    if (degenerate[i] && skipped) skipped->push_back(setups[i].example_id);
    out.insert(out.end(), per[i].begin(), per[i].end());
  }
  return out;
}

struct Counterpart {
  std::string prompt;
  std::vector<TokenId> ids;
  std::string counterpart_key;
  std::string counterpart_subject;
};

// The triple's prompt with its subject replaced by the subject of another
// triple of the same relation whose substitution keeps the token length.
inline Counterpart corrupt_counterpart(const FactTriple& triple, const FactSet& pool, const Language& lang,
                                       std::uint64_t seed, const Tokenizer& tok) {
  const auto prompt = render_prompt(triple, lang);
  auto sit = triple.subject.find(lang);
  if (sit == triple.subject.end()) throw NoCounterpartError(triple.key() + " has no subject in '" + lang + "'");
  const auto& subj = sit->second;
  const auto at = prompt.find(subj);
  if (at == std::string::npos)
    throw NoCounterpartError(triple.key() + ": subject '" + subj + "' does not occur in its " + lang + " prompt");
  const auto clean_len = tok.encode(prompt, true).size();

  std::vector<Counterpart> cands;
  for (const auto& other : pool.triples) {
    if (other.relation_id != triple.relation_id || other.key() == triple.key()) continue;
    auto oit = other.subject.find(lang);
    if (oit == other.subject.end() || oit->second == subj) continue;
    auto swapped = prompt;
    swapped.replace(at, subj.size(), oit->second);
    auto ids = tok.encode(swapped, true);
    if (ids.size() != clean_len) continue;
    cands.push_back({std::move(swapped), std::move(ids), other.key(), oit->second});
  }
  if (cands.empty())
    throw NoCounterpartError("no length-matched counterpart for " + triple.key() + " in '" + lang + "'");
  std::sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) { return a.counterpart_key < b.counterpart_key; });
  seeded_shuffle(cands, derive_seed(seed, "corrupt/" + lang + "/" + triple.key()));
  return cands.front();
}

// ---- attention knockout ----------------------------------------------------

struct KnockoutWindow {
  std::size_t lo = 0, hi = 0; // [lo, hi)
  std::size_t size() const { return hi - lo; }
};

// k layers starting ⌊k/2⌋ below the center, clipped to [0, n_layers).
inline KnockoutWindow knockout_window(std::size_t center, std::size_t k, std::size_t n_layers) {
  if (k < 1) throw DomainError("knockout window must span at least one layer");
  if (center >= n_layers) throw IndexError("knockout center " + std::to_string(center) + " outside model");
  const auto half = k / 2;
  const auto start = static_cast<std::ptrdiff_t>(center) - static_cast<std::ptrdiff_t>(half);
  const auto end = start + static_cast<std::ptrdiff_t>(k);
  return {static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, start)),
          static_cast<std::size_t>(std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(n_layers), end))};
}

enum class SourceSet { Subject, Relation, Last, All };

inline const char* to_string(SourceSet s) {
  switch (s) {
  case SourceSet::Subject: return "subject";
  case SourceSet::Relation: return "relation";
  case SourceSet::Last: return "last";
  case SourceSet::All: return "all";
  }
  return "?";
}

inline SourceSet source_set_from_string(const std::string& s) {
  for (auto v : {SourceSet::Subject, SourceSet::Relation, SourceSet::Last, SourceSet::All})
    if (s == to_string(v)) return v;
  throw SpecError("unknown source set '" + s + "'");
}

struct KnockoutPlan {
  std::size_t k = 6;
  std::vector<std::size_t> centers; // empty = every layer
  std::vector<SourceSet> sources{SourceSet::All};
};

inline std::vector<Position> source_positions(const PromptPositions& pp, SourceSet s) {
  std::set<Position> out;
  if (s == SourceSet::Subject || s == SourceSet::All) out.insert(pp.subject.begin(), pp.subject.end());
  if (s == SourceSet::Relation || s == SourceSet::All) out.insert(pp.relation.begin(), pp.relation.end());
  if (s == SourceSet::Last || s == SourceSet::All) out.insert(pp.last);
  return {out.begin(), out.end()};
}

inline AttentionKnockout knockout_spec(const KnockoutWindow& w, Position query, const std::vector<Position>& keys) {
  AttentionKnockout ko;
  for (auto l = w.lo; l < w.hi; ++l) ko.layers.push_back(l);
  for (auto k : keys) ko.edges.push_back({query, k});
  return ko;
}

struct KnockoutRow {
  std::string example_id;
  std::size_t center = 0;
  SourceSet source = SourceSet::All;
  KnockoutWindow window;
  double p_base = 0;
  double p_knocked = 0;
  double delta = 0; // p_base − p_knocked
};

inline bool significant_drop(const KnockoutRow& r, double threshold = 0.2) {
  return r.p_base > 0 && r.delta / r.p_base >= threshold;
}

template <typename T>
std::vector<KnockoutRow> knockout_sweep(const Model<T>& model, const std::vector<TokenId>& prompt,
                                        const PromptPositions& pp, const KnockoutPlan& plan, TokenId target,
                                        const std::string& example_id = {}) {
  if (pp.seq_len != prompt.size()) throw ShapeError("prompt positions were resolved for a different prompt length");
  auto centers = plan.centers;
  if (centers.empty())
    for (std::size_t l = 0; l < model.n_layers(); ++l) centers.push_back(l);
  CaptureFilter f = CaptureFilter::last_position();
  f.attn_weights = false;
  f.residual = f.attn_out = f.mlp_out = false;
  const double p_base = target_probability(run_with_interventions(model, std::span<const TokenId>(prompt), {}, f), target);

  std::vector<KnockoutRow> out;
  for (auto src : plan.sources) {
    const auto keys = source_positions(pp, src);
    for (auto c : centers) {
      KnockoutRow r{example_id, c, src, knockout_window(c, plan.k, model.n_layers()), p_base, p_base, 0.0};
      if (!keys.empty()) {
        const std::vector<InterventionSpec> ko{knockout_spec(r.window, pp.last, keys)};
        r.p_knocked = target_probability(run_with_interventions(model, std::span<const TokenId>(prompt), ko, f), target);
        r.delta = p_base - r.p_knocked;
      }
      out.push_back(r);
    }
  }
  return out;
}

inline CsvTable knockout_csv(const std::vector<KnockoutRow>& rows, double threshold = 0.2) {
  CsvTable t({"example_id", "center", "source", "window_lo", "window_hi", "effective_k", "p_base", "p_knocked",
              "delta", "significant"});
  for (const auto& r : rows)
    t.row({r.example_id, cell(r.center), to_string(r.source), cell(r.window.lo), cell(r.window.hi),
           cell(r.window.size()), cell(r.p_base), cell(r.p_knocked), cell(r.delta),
           significant_drop(r, threshold) ? "1" : "0"});
  return t;
}

// ---- head ranking and ablation ---------------------------------------------

struct HeadScore {
  HeadRef head;
  double score = 0;
};

struct HeadRanking {
  std::string relation_id;
  std::vector<HeadScore> ranked_heads; // descending score, ties by (layer, head)
  std::size_t n_examples = 0;
  std::vector<std::string> degenerate_examples;
};

template <typename T>
HeadRanking rank_heads_by_aie(const Model<T>& model, const std::vector<PatchSetup>& examples,
                              const std::string& relation_id, Position position = kLast, std::size_t jobs = 1) {
  std::vector<HeadRef> grid;
  for (std::size_t l = 0; l < model.n_layers(); ++l)
    for (std::size_t h = 0; h < model.n_heads(); ++h) grid.push_back({l, h});

  std::vector<std::vector<double>> per(examples.size());
  std::vector<char> degenerate(examples.size(), 0);
  parallel_for(examples.size(), jobs, [&](std::size_t i) {
    AieRunner<T> run(model, examples[i]);
    if (run.degenerate()) {
      degenerate[i] = 1;
      return;
    }
    for (const auto& h : grid) per[i].push_back(run.aie(ComponentSite{ComponentKind::Head, h.layer, h.head, position}));
  });

  HeadRanking r;
  r.relation_id = relation_id;
  std::vector<double> sum(grid.size(), 0.0);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (degenerate[i]) {
      r.degenerate_examples.push_back(examples[i].example_id);
      continue;
    }
    ++r.n_examples;
    for (std::size_t g = 0; g < grid.size(); ++g) sum[g] += per[i][g];
  }
  if (r.n_examples == 0)
    throw InsufficientDataError("no usable examples to rank heads for '" + relation_id + "' (all degenerate)");
  for (std::size_t g = 0; g < grid.size(); ++g)
    r.ranked_heads.push_back({grid[g], sum[g] / static_cast<double>(r.n_examples)});
  std::stable_sort(r.ranked_heads.begin(), r.ranked_heads.end(),
                   [](const HeadScore& a, const HeadScore& b) { return a.score > b.score; });
  return r;
}

inline std::vector<HeadRef> top_heads(const HeadRanking& r, std::size_t k) {
  std::vector<HeadRef> out;
  for (std::size_t i = 0; i < std::min(k, r.ranked_heads.size()); ++i) out.push_back(r.ranked_heads[i].head);
  return out;
}

inline nlohmann::json to_json(const HeadRanking& r) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : r.ranked_heads) heads.push_back({{"layer", h.head.layer}, {"head", h.head.head}, {"aie", h.score}});
  return {{"relation_id", r.relation_id},
          {"n_examples", r.n_examples},
          {"degenerate_examples", r.degenerate_examples},
          {"ranked_heads", heads}};
}

// Mean per-head output (before W_O) over every position of a reference corpus.
template <typename T>
std::map<HeadRef, std::vector<double>> mean_head_outputs(const Model<T>& model,
                                                         const std::vector<std::vector<TokenId>>& corpus,
                                                         const std::vector<HeadRef>& heads) {
  if (corpus.empty()) throw DomainError("mean ablation needs a non-empty reference corpus");
  std::map<HeadRef, std::vector<double>> sum;
  std::size_t n = 0;
  CaptureFilter f;
  f.residual = f.attn_out = f.mlp_out = f.attn_weights = false;
  f.head_out = true;
  for (const auto& ids : corpus) {
    const auto tr = run_with_interventions(model, std::span<const TokenId>(ids), {}, f);
    for (std::size_t p = 0; p < tr.seq_len(); ++p) {
      for (const auto& h : heads) {
        if (h.layer >= model.n_layers() || h.head >= model.n_heads())
          throw IndexError("head (" + std::to_string(h.layer) + ", " + std::to_string(h.head) + ") outside model");
        auto& s = sum[h];
        s.resize(model.d_head(), 0.0);
        const auto z = tr.head(h.layer, h.head, static_cast<Position>(p));
        for (std::size_t i = 0; i < z.size(); ++i) s[i] += z[i];
      }
      ++n;
    }
  }
  for (auto& [_, s] : sum)
    for (auto& v : s) v /= static_cast<double>(n);
  return sum;
}

struct AblationEffect {
  std::string example_id;
  TokenId top1 = 0;        // baseline prediction
  TokenId ablated_top1 = 0;
  double top1_logit_base = 0, top1_logit_ablated = 0;
  TokenId gold = 0;
  double gold_logit_base = 0, gold_logit_ablated = 0;

  double top1_delta() const { return top1_logit_ablated - top1_logit_base; }
  double gold_delta() const { return gold_logit_ablated - gold_logit_base; }
};

template <typename T>
AblationEffect ablate_heads(const Model<T>& model, const std::vector<TokenId>& prompt, const std::vector<HeadRef>& heads,
                            AblationMode mode, TokenId gold,
                            const std::map<HeadRef, std::vector<double>>& means = {},
                            const std::string& example_id = {}) {
  if (gold < 0 || static_cast<std::size_t>(gold) >= model.vocab_size())
    throw IndexError("gold token " + std::to_string(gold) + " outside vocabulary");
  CaptureFilter f = CaptureFilter::last_position();
  f.residual = f.attn_out = f.mlp_out = f.attn_weights = false;
  const auto base = run_with_interventions(model, std::span<const TokenId>(prompt), {}, f);
  std::vector<InterventionSpec> specs;
  if (!heads.empty()) specs.push_back(HeadAblation{heads, mode, means});
  const auto abl = run_with_interventions(model, std::span<const TokenId>(prompt), specs, f);

  AblationEffect e;
  e.example_id = example_id;
  const auto bl = base.logits(), al = abl.logits();
  e.top1 = argmax(bl);
  e.ablated_top1 = argmax(al);
  e.top1_logit_base = bl[static_cast<std::size_t>(e.top1)];
  e.top1_logit_ablated = al[static_cast<std::size_t>(e.top1)];
  e.gold = gold;
  e.gold_logit_base = bl[static_cast<std::size_t>(gold)];
  e.gold_logit_ablated = al[static_cast<std::size_t>(gold)];
  return e;
}

struct AblationSummary {
  std::size_t n = 0;
  double mean_top1_delta = 0;
  double mean_gold_delta = 0;
  double prediction_changed_rate = 0;
};

inline AblationSummary summarize(const std::vector<AblationEffect>& effects) {
  AblationSummary s;
  s.n = effects.size();
  if (effects.empty()) return s;
  for (const auto& e : effects) {
    s.mean_top1_delta += e.top1_delta();
    s.mean_gold_delta += e.gold_delta();
    s.prediction_changed_rate += e.top1 != e.ablated_top1;
  }
  const auto n = static_cast<double>(effects.size());
  s.mean_top1_delta /= n;
  s.mean_gold_delta /= n;
  s.prediction_changed_rate /= n;
  return s;
}

inline CsvTable ablation_csv(const std::vector<AblationEffect>& effects) {
  CsvTable t({"example_id", "top1", "ablated_top1", "top1_logit_base", "top1_logit_ablated", "gold",
              "gold_logit_base", "gold_logit_ablated"});
  for (const auto& e : effects)
    t.row({e.example_id, std::to_string(e.top1), std::to_string(e.ablated_top1), cell(e.top1_logit_base),
           cell(e.top1_logit_ablated), std::to_string(e.gold), cell(e.gold_logit_base), cell(e.gold_logit_ablated)});
  return t;
}

} // namespace mlrecall
