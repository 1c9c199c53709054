#pragma once

#include <filesystem>
#include <string>

#include "mlrecall/core/container.hpp"
#include "mlrecall/core/text.hpp"
#include "mlrecall/model/toy.hpp"

namespace mlrecall {

// Parses "toy", "toy:SEED" or "toy:SEED:LAYERS,HEADS,D_MODEL,VOCAB".
inline std::optional<std::pair<std::uint64_t, ToyDims>> parse_toy_locator(const std::string& locator) {
  if (locator != "toy" && locator.rfind("toy:", 0) != 0) return std::nullopt;
  std::uint64_t seed = 7;
  ToyDims dims;
  const auto parts = text::split(locator, ':');
  try {
    if (parts.size() >= 2 && !parts[1].empty()) seed = std::stoull(parts[1]);
    if (parts.size() >= 3) {
      const auto d = text::split(parts[2], ',');
      if (d.size() != 4) throw LoadError("toy dims must be LAYERS,HEADS,D_MODEL,VOCAB in '" + locator + "'");
      dims.n_layers = std::stoul(d[0]);
      dims.n_heads = std::stoul(d[1]);
      dims.d_model = std::stoul(d[2]);
      dims.vocab_size = std::stoul(d[3]);
    }
    if (parts.size() > 3) throw LoadError("malformed toy locator '" + locator + "'");
  } catch (const std::logic_error&) {
    throw LoadError("malformed toy locator '" + locator + "'");
  }
  return std::make_pair(seed, dims);
}

inline TensorContainer checkpoint_container(const Model<float>& model) {
  TensorContainer c;
  const auto& cfg = model.config();
  const auto& tok = model.tokenizer();
  c.metadata["format"] = "mlrecall-checkpoint";
  c.metadata["architecture"] = "llama";
  c.metadata["backend_id"] = model.backend_id();
  c.metadata["config"] = cfg;
  c.metadata["tokenizer"] = {{"mode", tok.mode() == Tokenizer::Mode::Word ? "word" : "byte_piece"},
                             {"vocab", tok.pieces()},
                             {"n_special", tok.n_special()},
                             {"bos", tok.bos() ? nlohmann::json(*tok.bos()) : nlohmann::json()},
                             {"eos", tok.eos() ? nlohmann::json(*tok.eos()) : nlohmann::json()}};
  const auto d = cfg.d_model, qd = cfg.n_heads * cfg.d_head(), kvd = cfg.kv_dim(), f = cfg.d_ff;
  const auto& w = model.weights();
  c.add("embed", {cfg.vocab_size, d}, w.embed);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = w.layers[l];
    const auto p = "layers." + std::to_string(l) + ".";
    c.add(p + "attn_norm", {d}, lw.attn_norm);
    c.add(p + "wq", {qd, d}, lw.wq);
    c.add(p + "wk", {kvd, d}, lw.wk);
    c.add(p + "wv", {kvd, d}, lw.wv);
    c.add(p + "wo", {d, qd}, lw.wo);
    c.add(p + "mlp_norm", {d}, lw.mlp_norm);
    c.add(p + "w_gate", {f, d}, lw.w_gate);
    c.add(p + "w_up", {f, d}, lw.w_up);
    c.add(p + "w_down", {d, f}, lw.w_down);
  }
  c.add("final_norm", {d}, w.final_norm);
  c.add("unembed", {cfg.vocab_size, d}, w.unembed);
  return c;
}

inline void save_checkpoint(const Model<float>& model, const std::filesystem::path& path) {
  checkpoint_container(model).save(path);
}

inline Model<float> model_from_container(const TensorContainer& c, const std::string& locator) {
  const auto& meta = c.metadata;
  if (meta.value("format", "") != "mlrecall-checkpoint")
    throw LoadError("'" + locator + "' is not a model checkpoint");
  const auto arch = meta.value("architecture", "");
  if (arch != "llama") throw CapabilityError("unsupported architecture '" + arch + "' in '" + locator + "'");
  if (!meta.contains("config") || !meta.contains("tokenizer"))
    throw LoadError("checkpoint '" + locator + "' does not declare config and tokenizer");

  ModelConfig cfg;
  try {
    cfg = meta.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("checkpoint '" + locator + "' has an invalid config: " + e.what());
  }
  const auto& tj = meta.at("tokenizer");
  auto opt_id = [](const nlohmann::json& j) -> std::optional<TokenId> {
    if (j.is_null()) return std::nullopt;
    return j.get<TokenId>();
  };
  auto tok = std::make_shared<const Tokenizer>(
      tj.at("vocab").get<std::vector<std::string>>(),
      tj.value("mode", "word") == "word" ? Tokenizer::Mode::Word : Tokenizer::Mode::BytePiece,
      tj.value("n_special", std::size_t{0}), opt_id(tj.value("bos", nlohmann::json())),
      opt_id(tj.value("eos", nlohmann::json())));

  auto get = [&](const std::string& name) {
    const auto* t = c.find(name);
    if (!t) throw LoadError("checkpoint '" + locator + "' is missing tensor '" + name + "'");
    if (t->dtype == "f64") return std::vector<float>(t->data_f64.begin(), t->data_f64.end());
    return t->data;
  };
  Weights<float> w;
  w.embed = get("embed");
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto p = "layers." + std::to_string(l) + ".";
    w.layers.push_back({get(p + "attn_norm"), get(p + "wq"), get(p + "wk"), get(p + "wv"), get(p + "wo"),
                        get(p + "mlp_norm"), get(p + "w_gate"), get(p + "w_up"), get(p + "w_down")});
  }
  w.final_norm = get("final_norm");
  w.unembed = c.find("unembed") ? get("unembed") : w.embed; // tied embeddings
  try {
    return Model<float>(cfg, std::move(w), std::move(tok), meta.value("backend_id", locator));
  } catch (const DimensionError& e) {
    throw LoadError("checkpoint '" + locator + "' is inconsistent: " + e.what());
  }
}

// Resolves a checkpoint locator: a toy registry id or a container file path.
inline Model<float> load_model(const std::string& locator) {
  if (auto toy = parse_toy_locator(locator)) return toy_model_fixture(toy->first, toy->second);
  if (!std::filesystem::exists(locator)) throw LoadError("checkpoint '" + locator + "' does not exist");
  try {
    return model_from_container(TensorContainer::load(locator), locator);
  } catch (const FormatError& e) {
    throw LoadError("checkpoint '" + locator + "' is corrupt: " + e.what());
  }
}

} // namespace mlrecall
