#include <gtest/gtest.h>

#include <filesystem>

#include "mlrecall/causal/causal.hpp"
#include "oracles/aie_oracle.hpp"
#include "oracles/reference_forward.hpp"
#include "test_util.hpp"

using namespace mlrecall;
using oracle::make_setup;
using oracle::oracle_aie;
using testutil::toy7;

namespace {

const FactSet& mini() {
  static const auto s = load_triples(std::filesystem::path(MLRECALL_DATA_DIR) / "fixtures" / "mini.jsonl");
  return s;
}

// Only head (3, 1) writes to the residual stream; MLPs are silenced.
Model<float> planted_model() {
  auto m = toy_model_fixture(7);
  const auto d = m.d_model(), dh = m.d_head(), H = m.n_heads();
  for (std::size_t l = 0; l < m.n_layers(); ++l) {
    auto& lw = m.mutable_weights().layers[l];
    std::fill(lw.w_down.begin(), lw.w_down.end(), 0.0f);
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t h = 0; h < H; ++h)
        if (!(l == 3 && h == 1))
          for (std::size_t c = 0; c < dh; ++c) lw.wo[r * H * dh + h * dh + c] = 0.0f;
  }
  m.refresh_fingerprint();
  return m;
}

} // namespace

TEST(Aie, FullRestorationIsOne) {
  const auto& m = toy7();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    AieRunner<float> run(m, make_setup(m, seed, 8, 3));
    if (run.degenerate()) continue;
    EXPECT_NEAR(run.aie(ComponentSite{ComponentKind::Residual, m.n_layers(), 0, kLast}), 1.0, 1e-4);
    std::vector<ComponentSite> all{{ComponentKind::Residual, 0, 0, 3}};
    for (std::size_t l = 0; l < m.n_layers(); ++l)
      for (Position p = 0; p < 8; ++p) {
        all.push_back({ComponentKind::Attn, l, 0, p});
        all.push_back({ComponentKind::Mlp, l, 0, p});
      }
    EXPECT_NEAR(run.aie(all), 1.0, 1e-4);
    EXPECT_EQ(run.aie(std::vector<ComponentSite>{}), 0.0);
  }
}

TEST(Aie, InertComponentIsZero) {
  const auto& m = toy7();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    AieRunner<float> run(m, make_setup(m, 50 + seed, 9, 5));
    if (run.degenerate()) continue;
    // Positions before the corrupted token see identical inputs.
    for (std::size_t l = 0; l < m.n_layers(); ++l) {
      EXPECT_LT(std::abs(run.aie(ComponentSite{ComponentKind::Mlp, l, 0, 2})), 1e-3);
      EXPECT_LT(std::abs(run.aie(ComponentSite{ComponentKind::Attn, l, 0, 4})), 1e-3);
    }
  }
}

TEST(Aie, MatchesIndependentRecomputation) {
  const auto& mf = toy7();
  const auto md = mf.as<double>();
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const auto setup = make_setup(md, 100 + seed, 7, 2);
    AieRunner<double> run(md, setup);
    if (std::abs(run.gap()) < 1e-4) continue;
    for (std::size_t l = 0; l < md.n_layers(); ++l) {
      for (auto site : {ComponentSite{ComponentKind::Attn, l, 0, kLast}, ComponentSite{ComponentKind::Mlp, l, 0, kLast},
                        ComponentSite{ComponentKind::Mlp, l, 0, 2}, ComponentSite{ComponentKind::Head, l, 1, kLast},
                        ComponentSite{ComponentKind::Residual, l, 0, 2}}) {
        EXPECT_NEAR(run.aie(site), oracle_aie(mf, setup, site), 1e-6)
            << seed << " " << to_string(site.kind) << " " << l;
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 20u);
}

TEST(Aie, Errors) {
  const auto& m = toy7();
  auto s = make_setup(m, 1, 6, 2);
  auto same = s;
  same.corrupted = same.clean;
  AieRunner<float> run(m, same);
  EXPECT_TRUE(run.degenerate());
  EXPECT_THROW(run.aie(ComponentSite{}), DegenerateGapError);
  auto shorter = s;
  shorter.corrupted.pop_back();
  EXPECT_THROW(AieRunner<float>(m, shorter), ShapeError);
  auto bad = s;
  bad.target = 64;
  EXPECT_THROW(AieRunner<float>(m, bad), IndexError);
}

TEST(Aie, SweepSkipsDegenerate) {
  const auto& m = toy7();
  auto a = make_setup(m, 3, 6, 2), b = a;
  b.corrupted = b.clean;
  b.example_id = "degenerate";
  const auto sites = component_grid(m.n_layers(), m.n_heads(), {0, 1}, {ComponentKind::Attn, ComponentKind::Head});
  EXPECT_EQ(sites.size(), 6u);
  std::vector<std::string> skipped;
  const auto rows = aie_sweep(m, {a, b}, sites, &skipped, 2);
  EXPECT_EQ(rows.size(), 6u);
  EXPECT_EQ(skipped, std::vector<std::string>{"degenerate"});
  const auto csv = causal_csv(rows).str();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "example_id,layer,component,head,metric,value");
  EXPECT_THROW(component_grid(4, 2, {4}, {ComponentKind::Mlp}), IndexError);
}

TEST(Counterpart, SwapsLengthMatchedSubject) {
  const auto& tok = toy7().tokenizer();
  const auto* thai = &mini().triples[0];
  for (const auto& t : mini().triples)
    if (t.key() == "country_religion/Thailand") thai = &t;
  const auto c = corrupt_counterpart(*thai, mini(), "en", 0, tok);
  EXPECT_EQ(c.prompt, "The main religion practiced in Mexico is");
  EXPECT_EQ(c.counterpart_key, "country_religion/Mexico");
  const auto clean = tok.encode(render_prompt(*thai, "en"), true);
  ASSERT_EQ(c.ids.size(), clean.size());
  std::size_t diffs = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) diffs += clean[i] != c.ids[i];
  EXPECT_EQ(diffs, 1u);
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    EXPECT_EQ(corrupt_counterpart(*thai, mini(), "fr", seed, tok).prompt,
              corrupt_counterpart(*thai, mini(), "fr", seed, tok).prompt);
}

TEST(Counterpart, NoCounterpart) {
  const auto lone = FactSet::from_triples({mini().triples[0]});
  EXPECT_THROW(corrupt_counterpart(lone.triples[0], lone, "en", 0, toy7().tokenizer()), NoCounterpartError);
}

TEST(Positions, SubjectRelationLast) {
  const auto& tok = toy7().tokenizer();
  const auto pp = locate_positions(tok, "The main religion practiced in Thailand is", "Thailand", {"religion", "practiced"});
  EXPECT_EQ(pp.subject, std::vector<Position>{6});
  EXPECT_EQ(pp.relation, (std::vector<Position>{3, 4}));
  EXPECT_EQ(pp.last, 7);
  EXPECT_EQ(pp.seq_len, 8u);
  EXPECT_THROW(locate_positions(tok, "The main religion practiced in Thailand is", "Brazil", {"religion"}),
               PositionResolutionError);
  EXPECT_THROW(locate_positions(tok, "The main religion practiced in Thailand is", "Thailand", {"currency"}),
               PositionResolutionError);
  for (const auto& t : mini().triples)
    for (const auto& lang : core_languages()) {
      const auto p = locate_positions(tok, t, lang);
      EXPECT_FALSE(p.subject.empty()) << t.key() << " " << lang;
      for (auto r : p.relation) EXPECT_EQ(std::count(p.subject.begin(), p.subject.end(), r), 0);
    }
}

TEST(Knockout, Window) {
  auto w = knockout_window(10, 6, 28);
  EXPECT_EQ(w.lo, 7u);
  EXPECT_EQ(w.hi, 13u);
  w = knockout_window(1, 6, 28);
  EXPECT_EQ(w.lo, 0u);
  EXPECT_EQ(w.hi, 4u);
  EXPECT_EQ(w.size(), 4u);
  w = knockout_window(3, 6, 4);
  EXPECT_EQ(w.lo, 0u);
  EXPECT_EQ(w.hi, 4u);
  EXPECT_EQ(knockout_window(2, 1, 4).size(), 1u);
  EXPECT_THROW(knockout_window(2, 0, 4), DomainError);
  EXPECT_THROW(knockout_window(4, 6, 4), IndexError);
}

TEST(Knockout, EmptySourcesAreIdentity) {
  const auto& m = toy7();
  const auto ids = testutil::random_prompt(5, 8);
  PromptPositions pp{{}, {}, 7, 8};
  KnockoutPlan plan;
  plan.sources = {SourceSet::Subject, SourceSet::Relation};
  for (const auto& r : knockout_sweep(m, ids, pp, plan, 10)) EXPECT_EQ(r.delta, 0.0);
}

TEST(Knockout, ContractAcrossSweep) {
  const auto& m = toy7();
  const auto& tok = m.tokenizer();
  const std::string prompt = "The main religion practiced in Thailand is";
  const auto ids = tok.encode(prompt, true);
  const auto pp = locate_positions(tok, prompt, "Thailand", {"religion", "practiced"});
  const auto base = forward_with_cache(m, std::span<const TokenId>(ids));
  const auto keys = source_positions(pp, SourceSet::All);
  const auto N = static_cast<std::size_t>(pp.last);
  for (std::size_t c = 0; c < m.n_layers(); ++c) {
    const auto w = knockout_window(c, 6, m.n_layers());
    const auto tr = run_with_interventions(m, std::span<const TokenId>(ids), {knockout_spec(w, pp.last, keys)});
    for (std::size_t l = 0; l < m.n_layers(); ++l)
      for (std::size_t h = 0; h < m.n_heads(); ++h)
        for (std::size_t q = 0; q < ids.size(); ++q) {
          const auto row = tr.attn_row(l, h, q), ref = base.attn_row(l, h, q);
          if (q == N && l >= w.lo && l < w.hi) {
            double s = 0;
            for (std::size_t k = 0; k < row.size(); ++k) {
              if (std::count(keys.begin(), keys.end(), static_cast<Position>(k))) {
                EXPECT_EQ(row[k], 0.0f);
              }
              s += row[k];
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
          } else if (q != N || l < w.lo) {
            EXPECT_TRUE(testutil::bitwise_equal(row, ref)) << c << " " << l << " " << h << " " << q;
          }
        }
  }
  KnockoutPlan plan;
  plan.sources = {SourceSet::Subject, SourceSet::Relation, SourceSet::Last, SourceSet::All};
  const auto rows = knockout_sweep(m, ids, pp, plan, argmax(base.logits()), "thai");
  EXPECT_EQ(rows.size(), 4 * m.n_layers());
  for (const auto& r : rows) {
    EXPECT_EQ(r.p_base, rows[0].p_base);
    EXPECT_NEAR(r.delta, r.p_base - r.p_knocked, 0);
  }
  KnockoutRow big{"x", 0, SourceSet::All, {0, 3}, 0.5, 0.3, 0.2};
  EXPECT_TRUE(significant_drop(big));
  EXPECT_FALSE(significant_drop(big, 0.5));
  EXPECT_EQ(knockout_csv(rows).rows().size(), rows.size());
}

TEST(HeadRanking, PlantedHeadRanksFirst) {
  const auto m = planted_model();
  std::vector<PatchSetup> ex;
  for (std::uint64_t s = 0; s < 6; ++s) ex.push_back(make_setup(m, 700 + s, 8, 3));
  const auto r = rank_heads_by_aie(m, ex, "object_color");
  ASSERT_GT(r.n_examples, 0u);
  EXPECT_EQ(r.ranked_heads.size(), m.n_layers() * m.n_heads());
  EXPECT_EQ(r.ranked_heads[0].head, (HeadRef{3, 1}));
  EXPECT_NEAR(r.ranked_heads[0].score, 1.0, 1e-4);
  // Remaining heads are inert and tie at zero: grid order decides.
  std::set<HeadRef> seen;
  for (std::size_t i = 0; i < r.ranked_heads.size(); ++i) {
    EXPECT_TRUE(seen.insert(r.ranked_heads[i].head).second);
    if (i > 0) {
      EXPECT_EQ(r.ranked_heads[i].score, 0.0);
      if (i > 1) EXPECT_LT(r.ranked_heads[i - 1].head, r.ranked_heads[i].head);
    }
  }
  // Exhaustive scan agrees.
  AieRunner<float> run(m, ex[0]);
  for (std::size_t l = 0; l < m.n_layers(); ++l)
    for (std::size_t h = 0; h < m.n_heads(); ++h)
      if (!(l == 3 && h == 1)) EXPECT_EQ(run.aie(ComponentSite{ComponentKind::Head, l, h, kLast}), 0.0);
  EXPECT_EQ(top_heads(r, 2).size(), 2u);
  EXPECT_EQ(to_json(r)["ranked_heads"][0]["layer"], 3);
}

TEST(HeadRanking, AllDegenerateThrows) {
  const auto& m = toy7();
  auto s = make_setup(m, 1, 6, 2);
  s.corrupted = s.clean;
  EXPECT_THROW(rank_heads_by_aie(m, {s}, "r"), InsufficientDataError);
}

TEST(Ablation, ZeroHeadsIsIdentity) {
  const auto ids = testutil::random_prompt(8, 7);
  const auto e = ablate_heads(toy7(), ids, {}, AblationMode::Zero, 5);
  EXPECT_EQ(e.top1_delta(), 0.0);
  EXPECT_EQ(e.gold_delta(), 0.0);
  EXPECT_THROW(ablate_heads(toy7(), ids, {{4, 0}}, AblationMode::Zero, 5), IndexError);
  EXPECT_THROW(ablate_heads(toy7(), ids, {{0, 2}}, AblationMode::Zero, 5), IndexError);
}

TEST(Ablation, PlantedHeadDirectEffect) {
  const auto m = planted_model();
  const auto& cfg = m.config();
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto ids = testutil::random_prompt(900 + s, 8);
    CaptureFilter f = CaptureFilter::last_position();
    f.head_out = true;
    const auto tr = run_with_interventions(m, std::span<const TokenId>(ids), {}, f);
    const TokenId gold = argmax(tr.logits());
    // Final stream minus the head's write, decoded through the final norm.
    const auto z = tr.head(3, 1);
    oracle::Vec h(tr.residual(cfg.n_layers).begin(), tr.residual(cfg.n_layers).end());
    const auto& wo = m.weights().layers[3].wo;
    const auto HD = cfg.n_heads * cfg.d_head();
    for (std::size_t r = 0; r < cfg.d_model; ++r)
      for (std::size_t c = 0; c < cfg.d_head(); ++c) h[r] -= double(wo[r * HD + cfg.d_head() + c]) * z[c];
    const auto E = oracle::to_mat(m.weights().unembed, cfg.vocab_size, cfg.d_model);
    const double expected = oracle::mul(E, oracle::rms(h, m.weights().final_norm, cfg.norm_eps))[static_cast<std::size_t>(gold)];
    const auto e = ablate_heads(m, ids, {{3, 1}}, AblationMode::Zero, gold);
    EXPECT_NEAR(e.gold_logit_ablated, expected, 1e-4);
    EXPECT_NEAR(e.gold_delta(), expected - e.gold_logit_base, 1e-4);
  }
}

TEST(Ablation, AttnOutDropsByHeadContribution) {
  const auto& m = toy7();
  const auto& cfg = m.config();
  const auto ids = testutil::random_prompt(33, 9);
  CaptureFilter f;
  f.head_out = true;
  const auto base = run_with_interventions(m, std::span<const TokenId>(ids), {}, f);
  const std::vector<HeadRef> heads{{1, 0}, {2, 1}};
  const auto abl = run_with_interventions(m, std::span<const TokenId>(ids), {HeadAblation{heads, AblationMode::Zero, {}}}, f);
  const auto HD = cfg.n_heads * cfg.d_head();
  for (const auto& hr : heads) {
    const auto& wo = m.weights().layers[hr.layer].wo;
    for (Position p = 0; p < 9; ++p) {
      const auto z = base.head(hr.layer, hr.head, p);
      for (std::size_t r = 0; r < cfg.d_model; ++r) {
        double contrib = 0;
        for (std::size_t c = 0; c < cfg.d_head(); ++c) contrib += double(wo[r * HD + hr.head * cfg.d_head() + c]) * z[c];
        // Layer 1 is the first ablated layer, so its inputs are unchanged.
        if (hr.layer == 1) EXPECT_NEAR(abl.attn(1, p)[r], base.attn(1, p)[r] - contrib, 1e-4);
      }
    }
  }
}

TEST(Ablation, MeanMode) {
  const auto& m = toy7();
  std::vector<std::vector<TokenId>> corpus;
  for (std::uint64_t s = 0; s < 4; ++s) corpus.push_back(testutil::random_prompt(60 + s, 6));
  const std::vector<HeadRef> heads{{2, 0}};
  const auto means = mean_head_outputs(m, corpus, heads);
  ASSERT_EQ(means.at({2, 0}).size(), m.d_head());
  // Brute-force mean over every corpus position.
  std::vector<double> ref(m.d_head(), 0.0);
  CaptureFilter f;
  f.head_out = true;
  for (const auto& ids : corpus) {
    const auto tr = run_with_interventions(m, std::span<const TokenId>(ids), {}, f);
    for (Position p = 0; p < 6; ++p)
      for (std::size_t i = 0; i < ref.size(); ++i) ref[i] += tr.head(2, 0, p)[i] / 24.0;
  }
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(means.at({2, 0})[i], ref[i], 1e-9);
  const auto e = ablate_heads(m, corpus[0], heads, AblationMode::Mean, 7, means, "c0");
  EXPECT_EQ(e.example_id, "c0");
  const auto sum = summarize({e, e});
  EXPECT_DOUBLE_EQ(sum.mean_gold_delta, e.gold_delta());
  EXPECT_THROW(mean_head_outputs(m, {}, heads), DomainError);
  EXPECT_EQ(ablation_csv({e}).rows().size(), 1u);
}
