#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "litevlm/corpus/query.hpp"
#include "litevlm/nn/params.hpp"
#include "litevlm/patchsel/selector.hpp"
#include "litevlm/pipeline/cost_model.hpp"
#include "litevlm/spec/decoder.hpp"
#include "litevlm/vision/frontend.hpp"

namespace litevlm::pipeline {

enum class Variant { kBaseline, kFastV, kLiteVlm };

inline Variant parse_variant(std::string_view s) {
  if (s == "baseline") return Variant::kBaseline;
  if (s == "fastv") return Variant::kFastV;
  if (s == "litevlm") return Variant::kLiteVlm;
  throw Error("unknown variant '" + std::string(s) + "' (expected baseline, fastv or litevlm)");
}

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kBaseline: return "baseline";
    case Variant::kFastV: return "fastv";
    case Variant::kLiteVlm: return "litevlm";
  }
  return "?";
}

enum class TokenScores { kAttention, kTrained };

inline TokenScores parse_token_scores(std::string_view s) {
  if (s == "attention") return TokenScores::kAttention;
  if (s == "trained") return TokenScores::kTrained;
  throw Error("unknown token score source '" + std::string(s) + "' (expected attention or trained)");
}

/// Parameter files per role; empty means seeded initialization.
struct ParamPaths {
  std::string llm, vision, patchsel, toksel, draft;
};

struct PipelineConfig {
  Variant variant = Variant::kBaseline;
  std::optional<double> keep_ratio;
  std::optional<float> threshold;
  float w_lex = 0.6f;
  float w_model = 0.4f;
  patchsel::Granularity granularity = patchsel::Granularity::kPatch;
  std::size_t draft_len = 4;
  std::size_t max_new = 16;
  Precision precision = Precision::kFp16;
  bool forced_keep = false;
  TokenScores token_scores = TokenScores::kAttention;
  std::uint64_t seed = 7;
  vision::VitConfig vit = default_vit();
  nn::ModelConfig llm = default_llm();
  patchsel::SelectorConfig selector = patchsel::SelectorConfig::for_vocab(corpus::builtin_vocab());
  ParamPaths params;
  std::string calibration;  ///< empty: built-in table
  std::map<std::string, nlohmann::json> overrides;  ///< per-variant JSON patches

  /// Desk-sized ViT: 2 layers at width 32.
  static vision::VitConfig default_vit() {
    vision::VitConfig v;
    v.model = {32, 4, 2, 128, 8, geometry::kTilesPerPatch, 7};
    v.d_llm = 64;
    return v;
  }

  static nn::ModelConfig default_llm() {
    return {64, 4, 2, 256, corpus::builtin_vocab().size(), 4096, 7};
  }

  bool patch_selection() const { return variant == Variant::kLiteVlm; }
  bool speculative() const { return variant == Variant::kLiteVlm; }
  bool prunes() const { return variant != Variant::kBaseline; }

  double ratio() const { return prunes() ? keep_ratio.value_or(1.0) : 1.0; }

  void validate() const {
    if (variant == Variant::kFastV && !keep_ratio) throw Error("config: fastv requires keep_ratio");
    if (variant == Variant::kLiteVlm && (!keep_ratio || !threshold))
      throw Error("config: litevlm requires keep_ratio and threshold");
    if (keep_ratio && !(*keep_ratio > 0.0 && *keep_ratio <= 1.0)) throw Error("config: keep_ratio must be in (0, 1]");
    if (threshold && !(*threshold >= 0.0f && *threshold < 1.0f)) throw Error("config: threshold must be in [0, 1)");
    spec::check_draft_len(draft_len);
    if (max_new == 0) throw Error("config: max_new must be >= 1");
    vit.validate();
    llm.validate();
    selector.validate();
    if (vit.d_llm != llm.d_model) throw Error("config: vit.d_llm must equal llm.d_model");
    if (llm.vocab_size != corpus::builtin_vocab().size())
      throw Error("config: llm vocab_size must equal the built-in vocabulary size");
    if (llm.max_seq < geometry::kNumSlots * geometry::kTokensPerPatch + 64 + max_new + kMaxDraftSlack)
      throw Error("config: llm max_seq too small for a full prompt");
  }

  static constexpr std::size_t kMaxDraftSlack = spec::kMaxDraftLen + 1;

  /// Copy with `v` selected and its override block applied.
  PipelineConfig for_variant(Variant v) const;

  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);

  static PipelineConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("config: cannot open '" + path + "'");
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw Error("config '" + path + "': " + e.what());
    }
  }
};

namespace detail {

inline nlohmann::json model_json(const nn::ModelConfig& m) {
  return {{"d_model", m.d_model}, {"n_heads", m.n_heads}, {"n_layers", m.n_layers}, {"d_ff", m.d_ff}};
}

inline void read_model(const nlohmann::json& j, nn::ModelConfig& m) {
  static const char* keys[] = {"d_model", "n_heads", "n_layers", "d_ff"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(std::begin(keys), std::end(keys), k) == std::end(keys)) throw Error("config: unknown model key '" + k + "'");
    (void)v;
  }
  m.d_model = j.value("d_model", m.d_model);
  m.n_heads = j.value("n_heads", m.n_heads);
  m.n_layers = j.value("n_layers", m.n_layers);
  m.d_ff = j.value("d_ff", m.d_ff);
}

inline const char* granularity_name(patchsel::Granularity g) {
  return g == patchsel::Granularity::kView ? "view" : "patch";
}

/// Applies the keys of `j` onto `c`; unknown keys are rejected.
inline void apply_json(PipelineConfig& c, const nlohmann::json& j, bool allow_variants) {
  if (!j.is_object()) throw Error("config: expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (k == "variant") c.variant = parse_variant(v.get<std::string>());
    else if (k == "keep_ratio") c.keep_ratio = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    else if (k == "threshold") c.threshold = v.is_null() ? std::nullopt : std::optional<float>(v.get<float>());
    else if (k == "w_lex") c.w_lex = v.get<float>();
    else if (k == "w_model") c.w_model = v.get<float>();
    else if (k == "granularity") c.granularity = patchsel::parse_granularity(v.get<std::string>());
    else if (k == "draft_len") c.draft_len = v.get<std::size_t>();
    else if (k == "max_new") c.max_new = v.get<std::size_t>();
    else if (k == "precision") c.precision = parse_precision(v.get<std::string>());
    else if (k == "forced_keep") c.forced_keep = v.get<bool>();
    else if (k == "token_scores") c.token_scores = parse_token_scores(v.get<std::string>());
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "vit") {
      read_model(v.contains("model") ? v.at("model") : nlohmann::json::object(), c.vit.model);
      for (const auto& [vk, vv] : v.items())
        if (vk != "model") throw Error("config: unknown vit key '" + vk + "'");
    } else if (k == "llm") read_model(v, c.llm);
    else if (k == "selector") read_model(v, c.selector.model);
    else if (k == "params") {
      for (const auto& [pk, pv] : v.items()) {
        const std::string path = pv.get<std::string>();
        if (pk == "llm") c.params.llm = path;
        else if (pk == "vision") c.params.vision = path;
        else if (pk == "patchsel") c.params.patchsel = path;
        else if (pk == "toksel") c.params.toksel = path;
        else if (pk == "draft") c.params.draft = path;
        else throw Error("config: unknown params key '" + pk + "'");
      }
    } else if (k == "calibration") c.calibration = v.get<std::string>();
    else if (k == "variants" && allow_variants) {
      for (const auto& [vk, vv] : v.items()) {
        parse_variant(vk);
        c.overrides[vk] = vv;
      }
    } else throw Error("config: unknown key '" + k + "'");
  }
  c.vit.d_llm = c.llm.d_model;
  c.vit.model.seed = c.llm.seed = c.selector.model.seed = c.seed;
}

}  // namespace detail

inline PipelineConfig PipelineConfig::for_variant(Variant v) const {
  PipelineConfig c = *this;
  c.variant = v;
  const auto it = overrides.find(variant_name(v));
  if (it != overrides.end()) detail::apply_json(c, it->second, false);
  return c;
}

/// Operating points used when a config leaves them unset: fastv keeps 0.7,
/// litevlm keeps 0.8 at selection threshold 0.5.
inline void fill_variant_defaults(PipelineConfig& c) {
  if (c.variant == Variant::kFastV && !c.keep_ratio) c.keep_ratio = 0.7;
  if (c.variant == Variant::kLiteVlm) {
    if (!c.keep_ratio) c.keep_ratio = 0.8;
    if (!c.threshold) c.threshold = 0.5f;
  }
}

inline PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  PipelineConfig c;
  detail::apply_json(c, j, true);
  return c;
}

inline nlohmann::json PipelineConfig::to_json() const {
  nlohmann::json j;
  j["variant"] = variant_name(variant);
  j["keep_ratio"] = keep_ratio ? nlohmann::json(*keep_ratio) : nlohmann::json(nullptr);
  j["threshold"] = threshold ? nlohmann::json(*threshold) : nlohmann::json(nullptr);
  j["w_lex"] = w_lex;
  j["w_model"] = w_model;
  j["granularity"] = detail::granularity_name(granularity);
  j["draft_len"] = draft_len;
  j["max_new"] = max_new;
  j["precision"] = precision_name(precision);
  j["forced_keep"] = forced_keep;
  j["token_scores"] = token_scores == TokenScores::kAttention ? "attention" : "trained";
  j["seed"] = seed;
  j["vit"] = {{"model", detail::model_json(vit.model)}};
  j["llm"] = detail::model_json(llm);
  j["selector"] = detail::model_json(selector.model);
  j["params"] = {{"llm", params.llm}, {"vision", params.vision}, {"patchsel", params.patchsel},
                 {"toksel", params.toksel}, {"draft", params.draft}};
  j["calibration"] = calibration;
  if (!overrides.empty()) {
    nlohmann::json o = nlohmann::json::object();
    for (const auto& [k, v] : overrides) o[k] = v;
    j["variants"] = o;
  }
  return j;
}

}  // namespace litevlm::pipeline
