#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <variant>
#include <vector>

#include "mlrecall/model/intervention.hpp"
#include "mlrecall/model/model.hpp"
#include "mlrecall/model/trace.hpp"

namespace mlrecall {

namespace detail {

struct HeadEdit {
  AblationMode mode = AblationMode::Zero;
  std::vector<double> mean;
};

// Interventions resolved against one prompt, grouped by the layer they touch.
struct LayerPlan {
  std::map<std::size_t, std::vector<double>> residual_patch; // position -> value
  std::map<std::size_t, std::vector<double>> residual_add;   // position -> summed delta
  std::vector<std::vector<char>> masked;                     // [head][q*n+k], empty = none
  std::map<std::size_t, HeadEdit> head_ablation;             // head -> edit
  std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> head_patch; // (head, pos)
  std::map<std::size_t, std::vector<double>> attn_patch;
  std::map<std::size_t, std::vector<double>> mlp_patch;
};

inline std::vector<LayerPlan> build_plan(const ModelConfig& cfg, std::size_t seq,
                                         const std::vector<InterventionSpec>& specs) {
  std::vector<LayerPlan> plan(cfg.n_layers + 1);
  const auto d = cfg.d_model, dh = cfg.d_head();

  auto check_layer = [&](std::size_t layer, std::size_t limit, const char* what) {
    if (layer >= limit)
      throw IndexError(std::string(what) + " layer " + std::to_string(layer) + " outside [0, " +
                       std::to_string(limit) + ")");
  };
  auto check_width = [](const std::vector<double>& v, std::size_t width, const char* what) {
    if (v.size() != width)
      throw DimensionError(std::string(what) + " payload has dimension " + std::to_string(v.size()) + ", expected " +
                           std::to_string(width));
  };

  for (const auto& spec : specs) {
    if (const auto* add = std::get_if<ResidualAdd>(&spec)) {
      check_layer(add->layer, cfg.n_layers + 1, "residual_add");
      check_width(add->payload, d, "residual_add");
      const auto p = resolve_position(add->position, seq);
      auto& acc = plan[add->layer].residual_add[p];
      if (acc.empty()) acc.assign(d, 0.0);
      for (std::size_t i = 0; i < d; ++i) acc[i] += add->scale * add->payload[i];
    } else if (const auto* ko = std::get_if<AttentionKnockout>(&spec)) {
      for (auto h : ko->heads)
        if (h >= cfg.n_heads) throw IndexError("knockout head " + std::to_string(h) + " out of range");
      for (auto layer : ko->layers) {
        check_layer(layer, cfg.n_layers, "knockout");
        auto& m = plan[layer].masked;
        if (m.empty()) m.assign(cfg.n_heads, std::vector<char>(seq * seq, 0));
        for (const auto& e : ko->edges) {
          const auto q = resolve_position(e.query, seq), k = resolve_position(e.key, seq);
          for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            if (!ko->heads.empty() && std::find(ko->heads.begin(), ko->heads.end(), h) == ko->heads.end()) continue;
            m[h][q * seq + k] = 1;
          }
        }
      }
    } else if (const auto* abl = std::get_if<HeadAblation>(&spec)) {
      for (const auto& ref : abl->heads) {
        check_layer(ref.layer, cfg.n_layers, "head ablation");
        if (ref.head >= cfg.n_heads) throw IndexError("head " + std::to_string(ref.head) + " out of range");
        HeadEdit edit{abl->mode, {}};
        if (abl->mode == AblationMode::Mean) {
          auto it = abl->means.find(ref);
          if (it == abl->means.end())
            throw PreconditionError("mean ablation requires a reference mean for every head");
          check_width(it->second, dh, "head mean");
          edit.mean = it->second;
        }
        plan[ref.layer].head_ablation[ref.head] = std::move(edit);
      }
    } else if (const auto* patch = std::get_if<ActivationPatch>(&spec)) {
      if (patch->donor_seq_len != seq)
        throw ShapeError("patch donor has " + std::to_string(patch->donor_seq_len) + " tokens, prompt has " +
                         std::to_string(seq));
      const auto& site = patch->site;
      const auto p = resolve_position(site.position, seq);
      switch (site.kind) {
      case ComponentKind::Residual:
        check_layer(site.layer, cfg.n_layers + 1, "residual patch");
        check_width(patch->value, d, "residual patch");
        plan[site.layer].residual_patch[p] = patch->value;
        break;
      case ComponentKind::Attn:
        check_layer(site.layer, cfg.n_layers, "attn patch");
        check_width(patch->value, d, "attn patch");
        plan[site.layer].attn_patch[p] = patch->value;
        break;
      case ComponentKind::Mlp:
        check_layer(site.layer, cfg.n_layers, "mlp patch");
        check_width(patch->value, d, "mlp patch");
        plan[site.layer].mlp_patch[p] = patch->value;
        break;
      case ComponentKind::Head:
        check_layer(site.layer, cfg.n_layers, "head patch");
        if (site.head >= cfg.n_heads) throw IndexError("head " + std::to_string(site.head) + " out of range");
        check_width(patch->value, dh, "head patch");
        plan[site.layer].head_patch[{site.head, p}] = patch->value;
        break;
      }
    }
  }
  return plan;
}

template <typename T>
void overwrite(std::span<T> dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
}

// Rotary inverse frequencies, with Llama-3 style remapping when configured.
inline std::vector<double> rope_inv_freq(const ModelConfig& cfg) {
  const auto dh = cfg.d_head();
  std::vector<double> inv(dh / 2);
  for (std::size_t i = 0; i < inv.size(); ++i)
    inv[i] = 1.0 / std::pow(cfg.rope_theta, static_cast<double>(2 * i) / static_cast<double>(dh));
  if (cfg.rope_scaling) {
    const auto& s = *cfg.rope_scaling;
    const double low_wavelen = s.original_max_position / s.low_freq_factor;
    const double high_wavelen = s.original_max_position / s.high_freq_factor;
    for (auto& f : inv) {
      const double wavelen = 2.0 * M_PI / f;
      if (wavelen < high_wavelen) continue;
      if (wavelen > low_wavelen) {
        f /= s.factor;
      } else {
        const double smooth =
            (s.original_max_position / wavelen - s.low_freq_factor) / (s.high_freq_factor - s.low_freq_factor);
        f = (1.0 - smooth) * f / s.factor + smooth * f;
      }
    }
  }
  return inv;
}

template <typename T>
void apply_rope(std::span<T> x, std::size_t pos, const std::vector<double>& inv_freq) {
  const auto half = x.size() / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double angle = static_cast<double>(pos) * inv_freq[i];
    const T c = static_cast<T>(std::cos(angle)), s = static_cast<T>(std::sin(angle));
    const T a = x[i], b = x[i + half];
    x[i] = a * c - b * s;
    x[i + half] = b * c + a * s;
  }
}

template <typename T>
T silu(T x) {
  return x / (T(1) + std::exp(-x));
}

} // namespace detail

// Runs the model over `prompt`, applying `interventions` and recording the
// sites selected by `capture`.
template <typename T>
ForwardTrace<T> run_with_interventions(const Model<T>& model, std::span<const TokenId> prompt,
                                       const std::vector<InterventionSpec>& interventions,
                                       const CaptureFilter& capture = CaptureFilter::all()) {
  const auto& cfg = model.config();
  const auto& W = model.weights();
  const std::size_t n = prompt.size();
  if (n == 0) throw PreconditionError("prompt must contain at least one token");
  if (n > cfg.max_seq_len)
    throw ContextLengthError("prompt has " + std::to_string(n) + " tokens, context length is " +
                             std::to_string(cfg.max_seq_len));
  for (auto id : prompt)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary");

  const std::size_t L = cfg.n_layers, H = cfg.n_heads, d = cfg.d_model, dh = cfg.d_head(), dff = cfg.d_ff;
  const std::size_t group = cfg.n_heads / cfg.n_kv_heads, kvd = cfg.kv_dim();
  const auto plan = detail::build_plan(cfg, n, interventions);

  std::vector<char> keep_pos(n, capture.positions ? 0 : 1);
  if (capture.positions)
    for (auto p : *capture.positions) keep_pos[resolve_position(p, n)] = 1;

  ForwardTrace<T> tr;
  tr.prompt_token_ids.assign(prompt.begin(), prompt.end());
  tr.n_layers = L;
  tr.n_heads = H;
  tr.residual_pre = SiteTensor<T>("residual_pre", L + 1, n, d);
  tr.attn_out = SiteTensor<T>("attn_out", L, n, d);
  tr.mlp_out = SiteTensor<T>("mlp_out", L, n, d);
  tr.head_out = SiteTensor<T>("head_out", L * H, n, dh);
  tr.mlp_hidden = SiteTensor<T>("mlp_hidden", L, n, dff);
  tr.attn_weights.assign(L, {});

  // Residual stream, [position][d].
  std::vector<T> h(n * d);
  for (std::size_t p = 0; p < n; ++p) {
    const auto row = static_cast<std::size_t>(prompt[p]) * d;
    std::copy_n(W.embed.begin() + static_cast<std::ptrdiff_t>(row), d, h.begin() + static_cast<std::ptrdiff_t>(p * d));
  }
  auto hrow = [&](std::size_t p) { return std::span<T>(h).subspan(p * d, d); };

  auto enter_layer = [&](std::size_t layer) {
    const auto& lp = plan[layer];
    for (const auto& [p, v] : lp.residual_patch) detail::overwrite(hrow(p), v);
    for (const auto& [p, delta] : lp.residual_add) {
      auto row = hrow(p);
      for (std::size_t i = 0; i < d; ++i) row[i] += static_cast<T>(delta[i]);
    }
    if (capture.residual && capture.wants_layer(layer))
      for (std::size_t p = 0; p < n; ++p)
        if (keep_pos[p]) tr.residual_pre.set(layer, p, hrow(p));
  };

  const auto inv_freq = detail::rope_inv_freq(cfg);
  const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<T> q(n * H * dh), k(n * kvd), v(n * kvd), z(n * H * dh), attn(n * d), mid(n * d), mlp(n * d);
  std::vector<T> scores(n), gate(dff), up(dff);

  for (std::size_t layer = 0; layer < L; ++layer) {
    enter_layer(layer);
    const auto& lw = W.layers[layer];
    const auto& lp = plan[layer];
    const bool want = capture.wants_layer(layer);

    for (std::size_t p = 0; p < n; ++p) {
      auto x = rms_norm<T>(hrow(p), lw.attn_norm, cfg.norm_eps);
      matvec<T>(lw.wq, H * dh, d, x, std::span<T>(q).subspan(p * H * dh, H * dh));
      matvec<T>(lw.wk, kvd, d, x, std::span<T>(k).subspan(p * kvd, kvd));
      matvec<T>(lw.wv, kvd, d, x, std::span<T>(v).subspan(p * kvd, kvd));
      for (std::size_t hd = 0; hd < H; ++hd) detail::apply_rope(std::span<T>(q).subspan((p * H + hd) * dh, dh), p, inv_freq);
      for (std::size_t kh = 0; kh < cfg.n_kv_heads; ++kh)
        detail::apply_rope(std::span<T>(k).subspan(p * kvd + kh * dh, dh), p, inv_freq);
    }

    std::vector<T> weights_store;
    if (capture.attn_weights && want) weights_store.assign(H * n * n, T{});

    for (std::size_t hd = 0; hd < H; ++hd) {
      const std::size_t kh = hd / group;
      const auto* mask = lp.masked.empty() ? nullptr : &lp.masked[hd];
      for (std::size_t qp = 0; qp < n; ++qp) {
        const T* qv = &q[(qp * H + hd) * dh];
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t kp = 0; kp <= qp; ++kp) {
          if (mask && (*mask)[qp * n + kp]) continue;
          const T* kv = &k[kp * kvd + kh * dh];
          T s = 0;
          for (std::size_t i = 0; i < dh; ++i) s += qv[i] * kv[i];
          scores[kp] = s * inv_sqrt_dh;
          mx = std::max(mx, scores[kp]);
        }
        T denom = 0;
        for (std::size_t kp = 0; kp < n; ++kp) {
          if (kp > qp || (mask && (*mask)[qp * n + kp])) {
            scores[kp] = 0;
          } else {
            scores[kp] = std::exp(scores[kp] - mx);
            denom += scores[kp];
          }
        }
        // A fully masked row attends to nothing and contributes a zero output.
        if (denom > 0)
          for (std::size_t kp = 0; kp <= qp; ++kp) scores[kp] /= denom;
        if (!weights_store.empty())
          std::copy(scores.begin(), scores.end(), weights_store.begin() + static_cast<std::ptrdiff_t>((hd * n + qp) * n));
        T* zo = &z[(qp * H + hd) * dh];
        std::fill(zo, zo + dh, T{});
        for (std::size_t kp = 0; kp <= qp; ++kp) {
          const T w = scores[kp];
          if (w == T{}) continue;
          const T* vv = &v[kp * kvd + kh * dh];
          for (std::size_t i = 0; i < dh; ++i) zo[i] += w * vv[i];
        }
      }
    }
    if (!weights_store.empty()) tr.attn_weights[layer] = std::move(weights_store);

    for (std::size_t p = 0; p < n; ++p) {
      for (const auto& [hd, edit] : lp.head_ablation) {
        auto zs = std::span<T>(z).subspan((p * H + hd) * dh, dh);
        if (edit.mode == AblationMode::Zero)
          std::fill(zs.begin(), zs.end(), T{});
        else
          detail::overwrite(zs, edit.mean);
      }
    }
    for (const auto& [key, val] : lp.head_patch)
      detail::overwrite(std::span<T>(z).subspan((key.second * H + key.first) * dh, dh), val);

    for (std::size_t p = 0; p < n; ++p) {
      if (capture.head_out && want && keep_pos[p])
        for (std::size_t hd = 0; hd < H; ++hd)
          tr.head_out.set(layer * H + hd, p, std::span<const T>(z).subspan((p * H + hd) * dh, dh));
      auto ao = std::span<T>(attn).subspan(p * d, d);
      matvec<T>(lw.wo, d, H * dh, std::span<const T>(z).subspan(p * H * dh, H * dh), ao);
      if (auto it = lp.attn_patch.find(p); it != lp.attn_patch.end()) detail::overwrite(ao, it->second);
      if (capture.attn_out && want && keep_pos[p]) tr.attn_out.set(layer, p, ao);
      auto hr = hrow(p);
      for (std::size_t i = 0; i < d; ++i) mid[p * d + i] = hr[i] + ao[i];
    }

    for (std::size_t p = 0; p < n; ++p) {
      auto y = rms_norm<T>(std::span<const T>(mid).subspan(p * d, d), lw.mlp_norm, cfg.norm_eps);
      matvec<T>(lw.w_gate, dff, d, y, gate);
      matvec<T>(lw.w_up, dff, d, y, up);
      for (std::size_t i = 0; i < dff; ++i) gate[i] = detail::silu(gate[i]) * up[i];
      if (capture.mlp_hidden && want && keep_pos[p]) tr.mlp_hidden.set(layer, p, gate);
      auto mo = std::span<T>(mlp).subspan(p * d, d);
      matvec<T>(lw.w_down, d, dff, gate, mo);
      if (auto it = lp.mlp_patch.find(p); it != lp.mlp_patch.end()) detail::overwrite(mo, it->second);
      if (capture.mlp_out && want && keep_pos[p]) tr.mlp_out.set(layer, p, mo);
      auto hr = hrow(p);
      for (std::size_t i = 0; i < d; ++i) hr[i] = mid[p * d + i] + mo[i];
    }
  }
  enter_layer(L);

  tr.final_logits.resize(n);
  for (std::size_t p = 0; p < n; ++p) tr.final_logits[p] = model.unembed(model.final_norm(hrow(p)));
  return tr;
}

template <typename T>
ForwardTrace<T> forward_with_cache(const Model<T>& model, std::span<const TokenId> prompt,
                                   const CaptureFilter& capture = CaptureFilter::all()) {
  return run_with_interventions(model, prompt, {}, capture);
}

// Greedy decode of up to `max_new_tokens`, re-running the full prompt at each
// step. Interventions stay pinned to the positions they resolve to in the
// original prompt.
struct Generation {
  std::vector<TokenId> tokens;
  bool stopped = false; // ended on a stop token rather than the budget
};

inline std::vector<InterventionSpec> pin_positions(const std::vector<InterventionSpec>& specs, std::size_t seq) {
  auto pin = [seq](Position p) { return static_cast<Position>(resolve_position(p, seq)); };
  std::vector<InterventionSpec> out = specs;
  for (auto& s : out) {
    if (auto* a = std::get_if<ResidualAdd>(&s)) a->position = pin(a->position);
    else if (auto* k = std::get_if<AttentionKnockout>(&s))
      for (auto& e : k->edges) e = {pin(e.query), pin(e.key)};
    else if (auto* p = std::get_if<ActivationPatch>(&s)) p->site.position = pin(p->site.position);
  }
  return out;
}

template <typename T>
Generation greedy_generate(const Model<T>& model, std::span<const TokenId> prompt, std::size_t max_new_tokens,
                              const std::vector<InterventionSpec>& interventions = {}) {
  Generation g;
  auto pinned = pin_positions(interventions, prompt.size());
  std::vector<TokenId> ids(prompt.begin(), prompt.end());
  CaptureFilter none;
  none.positions = std::vector<Position>{};
  none.attn_weights = false;
  for (std::size_t step = 0; step < max_new_tokens; ++step) {
    if (ids.size() > model.config().max_seq_len) break;
    auto tr = run_with_interventions(model, std::span<const TokenId>(ids), pinned, none);
    const auto& logits = tr.final_logits.back();
    const auto best = static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (model.tokenizer().is_stop(best)) {
      g.stopped = true;
      break;
    }
    g.tokens.push_back(best);
    ids.push_back(best);
  }
  return g;
}

} // namespace mlrecall
