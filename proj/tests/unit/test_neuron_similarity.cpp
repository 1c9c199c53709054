#include <gtest/gtest.h>

#include <filesystem>

#include "mlrecall/similarity/mlp_similarity.hpp"
#include "oracles/reference_forward.hpp"
#include "test_util.hpp"

using namespace mlrecall;
using testutil::toy7;

namespace {

const FactSet& mini() {
  static const auto s = load_triples(std::filesystem::path(MLRECALL_DATA_DIR) / "fixtures" / "mini.jsonl");
  return s;
}

// Normalised MLP input at the last position of `prompt` in `layer`, in double.
std::vector<double> mlp_input(const Model<float>& m, const std::string& prompt, std::size_t layer) {
  const auto ids = tokenize_prompt(m.tokenizer(), prompt);
  const auto tr = forward_with_cache(m, std::span<const TokenId>(ids));
  const auto r = tr.residual(layer);
  const auto a = tr.attn(layer);
  std::vector<double> mid(r.size());
  for (std::size_t i = 0; i < mid.size(); ++i) mid[i] = static_cast<double>(r[i]) + static_cast<double>(a[i]);
  return oracle::rms(mid, m.weights().layers[layer].mlp_norm, m.config().norm_eps);
}

// Component of u orthogonal to v.
std::vector<double> reject(std::vector<double> u, const std::vector<double>& v) {
  double uv = 0, vv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    vv += v[i] * v[i];
  }
  for (std::size_t i = 0; i < u.size(); ++i) u[i] -= uv / vv * v[i];
  return u;
}

// The MLP at `layer` rebuilt with two live hidden units: unit 0 is blind to prompt b,
// unit 1 is blind to prompt a, and they write to different coordinates. The
// two MLP outputs are then orthogonal by construction.
Model<float> orthogonal_mlp_model(const std::string& pa, const std::string& pb, std::size_t layer) {
  auto m = toy_model_fixture(7);
  const auto xa = mlp_input(m, pa, layer), xb = mlp_input(m, pb, layer);
  const auto d = m.d_model(), dff = m.config().d_ff;
  auto& lw = m.mutable_weights().layers[layer];
  std::fill(lw.w_up.begin(), lw.w_up.end(), 0.0f);
  std::fill(lw.w_down.begin(), lw.w_down.end(), 0.0f);
  std::fill(lw.w_gate.begin(), lw.w_gate.end(), 0.0f);
  const auto ua = reject(xa, xb), ub = reject(xb, xa);
  for (std::size_t i = 0; i < d; ++i) {
    lw.w_up[0 * d + i] = static_cast<float>(ua[i]);
    lw.w_up[1 * d + i] = static_cast<float>(ub[i]);
    lw.w_gate[0 * d + i] = static_cast<float>(xa[i]);
    lw.w_gate[1 * d + i] = static_cast<float>(xb[i]);
  }
  lw.w_down[0 * dff + 0] = 1.0f;
  lw.w_down[1 * dff + 1] = 1.0f;
  m.refresh_fingerprint();
  return m;
}

} // namespace

TEST(MlpSimilarity, SelfSimilarityIsOne) {
  const auto [recall, _] = recall_translation_pairs(mini(), {"zh", "fr"});
  const auto p = mlp_activation_similarity(toy7(), recall, recall);
  EXPECT_EQ(p.n_pairs, recall.size());
  EXPECT_EQ(p.per_layer_cos.size(), toy7().n_layers());
  for (const auto& [l, c] : p.per_layer_cos) EXPECT_NEAR(c, 1.0, 1e-12) << l;
}

TEST(MlpSimilarity, PlantedOrthogonalActivations) {
  const std::string pa = mini().triples[0].prompt.at("en"), pb = mini().triples[5].prompt.at("en");
  const auto m = orthogonal_mlp_model(pa, pb, 2);
  // The premise holds in the traced activations themselves.
  const auto ta = last_token_mlp(m, pa, {2}, false, {}), tb = last_token_mlp(m, pb, {2}, false, {});
  double na = 0, nb = 0;
  for (std::size_t i = 0; i < ta.at(2).size(); ++i) {
    na += ta.at(2)[i] * ta.at(2)[i];
    nb += tb.at(2)[i] * tb.at(2)[i];
  }
  ASSERT_GT(na, 1e-6);
  ASSERT_GT(nb, 1e-6);
  SimilarityOptions opt;
  opt.layers = std::vector<std::size_t>{2};
  const auto p = mlp_activation_similarity(m, {pa}, {pb}, opt);
  EXPECT_NEAR(p.per_layer_cos.at(2), 0.0, 1e-4);
}

TEST(MlpSimilarity, MatchesDirectCosineAndIsSymmetric) {
  const auto [recall, translate] = recall_translation_pairs(mini(), {"en", "ja"});
  ASSERT_EQ(recall.size(), 30u);
  ASSERT_EQ(translate.size(), 30u);
  const auto ab = mlp_activation_similarity(toy7(), recall, translate);
  const auto ba = mlp_activation_similarity(toy7(), translate, recall);
  for (std::size_t l = 0; l < toy7().n_layers(); ++l) {
    double sum = 0;
    for (std::size_t i = 0; i < recall.size(); ++i) {
      const auto a = oracle::reference_forward(toy7(), tokenize_prompt(toy7().tokenizer(), recall[i]));
      const auto b = oracle::reference_forward(toy7(), tokenize_prompt(toy7().tokenizer(), translate[i]));
      const auto& va = a.mlp[l].back();
      const auto& vb = b.mlp[l].back();
      double dot = 0, n1 = 0, n2 = 0;
      for (std::size_t k = 0; k < va.size(); ++k) {
        dot += va[k] * vb[k];
        n1 += va[k] * va[k];
        n2 += vb[k] * vb[k];
      }
      sum += dot / std::sqrt(n1 * n2);
    }
    EXPECT_NEAR(ab.per_layer_cos.at(l), sum / 30.0, 1e-4) << l;
    EXPECT_EQ(ab.per_layer_cos.at(l), ba.per_layer_cos.at(l)) << l;
  }
}

TEST(MlpSimilarity, PureCoreSkipsZeroVectorsAndIsScaleInvariant) {
  std::vector<LayerActivations> a{{{0, {1, 0}}, {1, {1, 1}}}, {{0, {0, 0}}, {1, {2, 0}}}};
  std::vector<LayerActivations> b{{{0, {0, 1}}, {1, {3, 3}}}, {{0, {5, 5}}, {1, {0, 7}}}};
  const auto p = similarity_from_activations(a, b);
  EXPECT_EQ(p.n_pairs, 2u);
  EXPECT_EQ(p.per_layer_skipped.at(0), 1u);
  EXPECT_EQ(p.per_layer_n.at(0), 1u);
  EXPECT_DOUBLE_EQ(p.per_layer_cos.at(0), 0.0);
  EXPECT_NEAR(p.per_layer_cos.at(1), 0.5, 1e-12);
  for (auto& v : a[0].at(1)) v *= 17.5;
  EXPECT_NEAR(similarity_from_activations(a, b).per_layer_cos.at(1), 0.5, 1e-12);
  // Inclusion mask: keep the first pair only.
  const auto only = similarity_from_activations(a, b, std::vector<bool>{true, false});
  EXPECT_EQ(only.n_pairs, 1u);
  EXPECT_NEAR(only.per_layer_cos.at(1), 1.0, 1e-12);
  EXPECT_THROW(similarity_from_activations(a, b, std::vector<bool>{false, false}), InsufficientDataError);

  const auto csv = similarity_csv(p).str();
  EXPECT_NE(csv.find("layer,condition_pair,mean_cos,n_pairs,n_skipped"), std::string::npos);
  EXPECT_NE(csv.find("0,A|B,0,1,1"), std::string::npos);
}

TEST(MlpSimilarity, Errors) {
  EXPECT_THROW(mlp_activation_similarity(toy7(), {"a"}, {"a", "b"}), PairingError);
  SimilarityOptions opt;
  opt.layers = std::vector<std::size_t>{toy7().n_layers()};
  EXPECT_THROW(mlp_activation_similarity(toy7(), {"a"}, {"b"}, opt), IndexError);
  EXPECT_THROW(similarity_from_activations({{}}, {}), PairingError);
}

TEST(MlpSimilarity, HiddenWidthAndInterventions) {
  const auto [recall, translate] = recall_translation_pairs(mini(), {"ko"});
  SimilarityOptions opt;
  opt.hidden_width = true;
  const auto p = mlp_activation_similarity(toy7(), recall, translate, opt);
  EXPECT_EQ(p.space, "mlp_hidden");
  for (const auto& [l, c] : p.per_layer_cos) {
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
  }
  // A random push on condition B changes the profile; a zero vector does not.
  ResidualAdd zero;
  zero.layer = 1;
  zero.payload.assign(toy7().d_model(), 0.0);
  SimilarityOptions z;
  z.interventions_b = {zero};
  const auto base = mlp_activation_similarity(toy7(), recall, translate);
  EXPECT_EQ(mlp_activation_similarity(toy7(), recall, translate, z).per_layer_cos, base.per_layer_cos);
  ResidualAdd push = zero;
  push.payload = testutil::random_vector(5, toy7().d_model(), 2.0);
  z.interventions_b = {push};
  EXPECT_NE(mlp_activation_similarity(toy7(), recall, translate, z).per_layer_cos.at(2), base.per_layer_cos.at(2));
}
