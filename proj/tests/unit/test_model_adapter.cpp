#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "mlrecall/model/forward.hpp"
#include "mlrecall/model/load.hpp"
#include "oracles/reference_forward.hpp"
#include "test_util.hpp"

using namespace mlrecall;
using testutil::bitwise_equal;
using testutil::random_prompt;
using testutil::toy7;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mlrecall_test_" + name);
}

} // namespace

TEST(ToyFixture, HasDocumentedDims) {
  const auto m = load_model("toy:7");
  EXPECT_EQ(m.n_layers(), 4u);
  EXPECT_EQ(m.n_heads(), 2u);
  EXPECT_EQ(m.d_model(), 16u);
  EXPECT_EQ(m.vocab_size(), 64u);
}

TEST(ToyFixture, RepeatedLoadsAreBitIdentical) {
  const auto a = load_model("toy:7");
  const auto b = load_model("toy:7");
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_TRUE(bitwise_equal(a.weights().unembed, b.weights().unembed));
  const auto p = random_prompt(1, 6);
  EXPECT_TRUE(bitwise_equal(forward_with_cache(a, std::span<const TokenId>(p)).final_logits.back(),
                            forward_with_cache(b, std::span<const TokenId>(p)).final_logits.back()));
}

// Frozen from tests/oracles/toy_weights.py --seed 7 --tensor unembed --row 0.
TEST(ToyFixture, UnembeddingRowZeroMatchesStandaloneGenerator) {
  const std::uint32_t expected[16] = {0x3f7150e2, 0xbc99fe00, 0x3efacb24, 0xbe2927b8, 0xbf44ce5c, 0x3d92a790,
                                      0xbebe97d8, 0xbc996f00, 0x3f290c7c, 0xbec0e890, 0x3f1b93b8, 0x3e1dd328,
                                      0x3ed462f4, 0xbf5d6fb8, 0x3f1d0ca2, 0xbf4a8098};
  const auto m = load_model("toy:7");
  const auto row = m.unembedding_row(0);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(std::bit_cast<std::uint32_t>(row[i]), expected[i]) << "column " << i;
}

// Frozen from tests/oracles/toy_weights.py --seed 7 --tensor embed --row 5.
TEST(ToyFixture, EmbeddingRowMatchesStandaloneGenerator) {
  const std::uint32_t expected[16] = {0x3e796078, 0xbebe03f8, 0x3f09cdf2, 0xbeb1e604, 0xbf789f3e, 0xbf2e4608,
                                      0x3e8f1a44, 0xbed30448, 0x3f2a2228, 0xbefc5a38, 0x3f68c04a, 0xbf5dbb60,
                                      0xbdef6730, 0x3f6a1f46, 0x3ec84de4, 0x3e10c148};
  const auto& e = toy7().weights().embed;
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(std::bit_cast<std::uint32_t>(e[5 * 16 + i]), expected[i]);
}

TEST(ToyFixture, DifferentSeedsGiveDifferentLogits) {
  const auto a = toy_model_fixture(7), b = toy_model_fixture(8);
  const auto p = random_prompt(3, 5);
  const auto la = forward_with_cache(a, std::span<const TokenId>(p)).final_logits.back();
  const auto lb = forward_with_cache(b, std::span<const TokenId>(p)).final_logits.back();
  EXPECT_FALSE(bitwise_equal(la, lb));
}

TEST(ToyFixture, IndivisibleHeadDimensionIsRejected) {
  ToyDims dims;
  dims.d_model = 15;
  dims.n_heads = 2;
  EXPECT_THROW(toy_model_fixture(7, dims), DimensionError);
  EXPECT_THROW(load_model("toy:7:4,2,15,64"), DimensionError);
}

TEST(ToyFixture, TokenizerRoundTripsEveryId) {
  const auto& tok = toy7().tokenizer();
  for (TokenId id = 0; id < 64; ++id) {
    const auto ids = tok.encode(tok.decode(id));
    ASSERT_EQ(ids.size(), 1u) << "id " << id;
    EXPECT_EQ(ids[0], id);
  }
}

TEST(LoadModel, MissingPathIsALoadError) {
  EXPECT_THROW(load_model("/nonexistent/checkpoint.mlrt"), LoadError);
}

TEST(LoadModel, CheckpointRoundTripIsBitIdentical) {
  const auto path = temp_path("ckpt.mlrt");
  save_checkpoint(toy7(), path);
  const auto m = load_model(path.string());
  EXPECT_EQ(m.fingerprint(), toy7().fingerprint());
  const auto p = random_prompt(11, 7);
  EXPECT_TRUE(bitwise_equal(forward_with_cache(m, std::span<const TokenId>(p)).final_logits.back(),
                            forward_with_cache(toy7(), std::span<const TokenId>(p)).final_logits.back()));
  std::filesystem::remove(path);
}

TEST(LoadModel, CorruptAndUnsupportedCheckpoints) {
  const auto path = temp_path("corrupt.mlrt");
  {
    std::ofstream f(path, std::ios::binary);
    f << "not a checkpoint";
  }
  EXPECT_THROW(load_model(path.string()), LoadError);

  auto c = checkpoint_container(toy7());
  c.metadata["architecture"] = "encoder-decoder";
  c.save(path);
  EXPECT_THROW(load_model(path.string()), CapabilityError);
  std::filesystem::remove(path);
}

TEST(ForwardWithCache, ResidualBookkeepingIdentity) {
  const auto p = random_prompt(5, 5);
  const auto tr = forward_with_cache(toy7(), std::span<const TokenId>(p));
  for (std::size_t l = 0; l < 4; ++l) {
    for (std::size_t pos = 0; pos < 5; ++pos) {
      const auto before = tr.residual_pre.at(l, pos), after = tr.residual_pre.at(l + 1, pos);
      const auto a = tr.attn_out.at(l, pos), m = tr.mlp_out.at(l, pos);
      for (std::size_t i = 0; i < 16; ++i) {
        const double expect = static_cast<double>(before[i]) + a[i] + m[i];
        EXPECT_NEAR(after[i], expect, 1e-4 * std::max(1.0, std::abs(expect)));
      }
    }
  }
}

TEST(ForwardWithCache, AttentionRowsAreCausalDistributions) {
  const auto p = random_prompt(6, 8);
  const auto tr = forward_with_cache(toy7(), std::span<const TokenId>(p));
  for (std::size_t l = 0; l < 4; ++l)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t q = 0; q < 8; ++q) {
        double sum = 0;
        for (std::size_t k = 0; k < 8; ++k) {
          const double w = tr.attn_weight(l, h, q, k);
          if (k > q) EXPECT_EQ(w, 0.0);
          sum += w;
        }
        EXPECT_NEAR(sum, 1.0, 1e-5);
      }
}

TEST(ForwardWithCache, LastOnlyCaptureMatchesFullCapture) {
  const auto p = random_prompt(7, 6);
  const auto full = forward_with_cache(toy7(), std::span<const TokenId>(p));
  const auto last = forward_with_cache(toy7(), std::span<const TokenId>(p), CaptureFilter::last_position());
  for (std::size_t l = 0; l <= 4; ++l) EXPECT_TRUE(bitwise_equal(full.residual(l), last.residual(l)));
  EXPECT_THROW(last.residual_pre.at(0, 0), MissingCaptureError);
}

TEST(ForwardWithCache, MatchesReferenceImplementation) {
  const auto p = random_prompt(8, 9);
  const auto tr = forward_with_cache(toy7(), std::span<const TokenId>(p));
  const auto ref = oracle::reference_forward(toy7(), p);
  for (std::size_t pos = 0; pos < p.size(); ++pos)
    for (std::size_t v = 0; v < 64; ++v) EXPECT_NEAR(tr.final_logits[pos][v], ref.logits[pos][v], 1e-4);
}

TEST(ForwardWithCache, EmptyPromptAndContextLength) {
  std::vector<TokenId> empty;
  EXPECT_THROW(forward_with_cache(toy7(), std::span<const TokenId>(empty)), PreconditionError);
  const auto too_long = random_prompt(9, 129);
  EXPECT_THROW(forward_with_cache(toy7(), std::span<const TokenId>(too_long)), ContextLengthError);
}

TEST(RunWithInterventions, ZeroPayloadIsIdentity) {
  const auto p = random_prompt(10, 6);
  const auto base = forward_with_cache(toy7(), std::span<const TokenId>(p));
  const auto tr = run_with_interventions(toy7(), std::span<const TokenId>(p),
                                         {ResidualAdd{2, kLast, std::vector<double>(16, 0.0), 3.0}});
  EXPECT_TRUE(tr == base);
}

TEST(RunWithInterventions, ResidualAddIsExactAndLocal) {
  const auto p = random_prompt(12, 6);
  const auto v = testutil::random_vector(99, 16);
  const auto base = forward_with_cache(toy7(), std::span<const TokenId>(p));
  const auto tr = run_with_interventions(toy7(), std::span<const TokenId>(p), {ResidualAdd{2, kLast, v, 2.0}});
  const auto b = base.residual(2), e = tr.residual(2);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(e[i] - b[i], 2.0 * v[i], 1e-6);
  for (std::size_t l = 0; l <= 2; ++l)
    for (std::size_t pos = 0; pos + 1 < p.size(); ++pos)
      EXPECT_TRUE(bitwise_equal(base.residual_pre.at(l, pos), tr.residual_pre.at(l, pos)));
  for (std::size_t l = 0; l < 2; ++l) EXPECT_TRUE(bitwise_equal(base.residual(l), tr.residual(l)));
  EXPECT_FALSE(bitwise_equal(base.final_logits.back(), tr.final_logits.back()));
}

TEST(RunWithInterventions, TwoAddsAtOneSiteEqualOneSummedAdd) {
  const auto p = random_prompt(13, 5);
  const auto a = testutil::random_vector(1, 16), b = testutil::random_vector(2, 16);
  std::vector<double> sum(16);
  for (std::size_t i = 0; i < 16; ++i) sum[i] = 1.5 * a[i] + 0.5 * b[i];
  const auto two = run_with_interventions(toy7(), std::span<const TokenId>(p),
                                          {ResidualAdd{1, kLast, a, 1.5}, ResidualAdd{1, kLast, b, 0.5}});
  const auto one = run_with_interventions(toy7(), std::span<const TokenId>(p), {ResidualAdd{1, kLast, sum, 1.0}});
  EXPECT_TRUE(two == one);
}

TEST(RunWithInterventions, KnockoutZeroesMaskedEdges) {
  const auto p = random_prompt(14, 6);
  const auto tr = run_with_interventions(toy7(), std::span<const TokenId>(p),
                                         {AttentionKnockout{{1}, {{kLast, 0}, {kLast, 1}}, {}}});
  for (std::size_t h = 0; h < 2; ++h) {
    EXPECT_EQ(tr.attn_weight(1, h, 5, 0), 0.0f);
    EXPECT_EQ(tr.attn_weight(1, h, 5, 1), 0.0f);
    double sum = 0;
    for (auto w : tr.attn_row(1, h, 5)) sum += w;
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(RunWithInterventions, FullyMaskedRowAttendsToNothing) {
  const auto p = random_prompt(15, 3);
  const auto tr = run_with_interventions(toy7(), std::span<const TokenId>(p),
                                         {AttentionKnockout{{0}, {{kLast, 0}, {kLast, 1}, {kLast, 2}}, {}}});
  for (auto w : tr.attn_row(0, 0, 2)) EXPECT_EQ(w, 0.0f);
}

TEST(RunWithInterventions, ZeroHeadRemovesItsContribution) {
  const auto p = random_prompt(16, 6);
  auto cap = CaptureFilter::everything();
  const auto base = forward_with_cache(toy7(), std::span<const TokenId>(p), cap);
  const auto tr = run_with_interventions(toy7(), std::span<const TokenId>(p), {HeadAblation{{{2, 1}}, AblationMode::Zero, {}}}, cap);
  const auto& wo = toy7().weights().layers[2].wo;
  for (std::size_t pos = 0; pos < p.size(); ++pos) {
    const auto z = base.head(2, 1, static_cast<Position>(pos));
    for (auto x : tr.head(2, 1, static_cast<Position>(pos))) EXPECT_EQ(x, 0.0f);
    for (std::size_t i = 0; i < 16; ++i) {
      double contrib = 0;
      for (std::size_t j = 0; j < 8; ++j) contrib += static_cast<double>(wo[i * 16 + 8 + j]) * z[j];
      EXPECT_NEAR(tr.attn_out.at(2, pos)[i], base.attn_out.at(2, pos)[i] - contrib, 1e-4);
    }
  }
}

TEST(RunWithInterventions, MeanAblationNeedsReferenceMeans) {
  const auto p = random_prompt(17, 4);
  EXPECT_THROW(run_with_interventions(toy7(), std::span<const TokenId>(p), {HeadAblation{{{0, 0}}, AblationMode::Mean, {}}}),
               PreconditionError);
  HeadAblation ok{{{0, 0}}, AblationMode::Mean, {{{0, 0}, std::vector<double>(8, 0.25)}}};
  auto cap = CaptureFilter::everything();
  const auto tr = run_with_interventions(toy7(), std::span<const TokenId>(p), {ok}, cap);
  for (auto x : tr.head(0, 0)) EXPECT_EQ(x, 0.25f);
}

TEST(RunWithInterventions, PatchingEveryComponentRestoresCleanRun) {
  const auto clean = random_prompt(18, 7);
  auto corrupt = clean;
  corrupt[3] = (corrupt[3] + 5) % 60 + 3;
  const auto ctr = forward_with_cache(toy7(), std::span<const TokenId>(clean));
  std::vector<InterventionSpec> patches;
  for (std::size_t pos = 0; pos < clean.size(); ++pos) {
    const auto P = static_cast<Position>(pos);
    patches.push_back(make_patch(ctr, {ComponentKind::Residual, 0, 0, P}));
    for (std::size_t l = 0; l < 4; ++l) {
      patches.push_back(make_patch(ctr, {ComponentKind::Attn, l, 0, P}));
      patches.push_back(make_patch(ctr, {ComponentKind::Mlp, l, 0, P}));
    }
  }
  const auto tr = run_with_interventions(toy7(), std::span<const TokenId>(corrupt), patches);
  for (std::size_t v = 0; v < 64; ++v) EXPECT_NEAR(tr.final_logits.back()[v], ctr.final_logits.back()[v], 1e-4);
}

TEST(RunWithInterventions, ContractErrors) {
  const auto p = random_prompt(19, 5);
  EXPECT_THROW(run_with_interventions(toy7(), std::span<const TokenId>(p), {ResidualAdd{1, kLast, std::vector<double>(15), 1.0}}),
               DimensionError);
  EXPECT_THROW(run_with_interventions(toy7(), std::span<const TokenId>(p), {ResidualAdd{9, kLast, std::vector<double>(16), 1.0}}),
               IndexError);
  EXPECT_THROW(run_with_interventions(toy7(), std::span<const TokenId>(p), {ResidualAdd{1, 7, std::vector<double>(16), 1.0}}),
               IndexError);
  const auto other = random_prompt(20, 6);
  const auto donor = forward_with_cache(toy7(), std::span<const TokenId>(other));
  EXPECT_THROW(run_with_interventions(toy7(), std::span<const TokenId>(p), {make_patch(donor, {ComponentKind::Mlp, 1, 0, kLast})}),
               ShapeError);
  EXPECT_THROW(run_with_interventions(toy7(), std::span<const TokenId>(p), {HeadAblation{{{0, 5}}, AblationMode::Zero, {}}}),
               IndexError);
}

TEST(RunWithInterventions, DeterministicAcrossRuns) {
  const auto p = random_prompt(21, 8);
  const std::vector<InterventionSpec> ivs{ResidualAdd{1, kLast, testutil::random_vector(4, 16), 1.0},
                                          AttentionKnockout{{2, 3}, {{kLast, 1}}, {}}};
  EXPECT_TRUE(run_with_interventions(toy7(), std::span<const TokenId>(p), ivs) ==
              run_with_interventions(toy7(), std::span<const TokenId>(p), ivs));
}

TEST(GreedyGenerate, ProducesArgmaxContinuation) {
  const auto p = random_prompt(22, 4);
  const auto g = greedy_generate(toy7(), std::span<const TokenId>(p), 3);
  ASSERT_FALSE(g.tokens.empty());
  const auto tr = forward_with_cache(toy7(), std::span<const TokenId>(p));
  const auto& l = tr.final_logits.back();
  EXPECT_EQ(g.tokens[0], static_cast<TokenId>(std::max_element(l.begin(), l.end()) - l.begin()));
}
