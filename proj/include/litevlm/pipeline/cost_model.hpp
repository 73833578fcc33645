#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "litevlm/nn/params.hpp"
#include "litevlm/nn/tensor.hpp"
#include "litevlm/resources.hpp"

namespace litevlm::pipeline {

// ---------------------------------------------------------------------------
// Analytic multiply-add counts
// ---------------------------------------------------------------------------

/// One decoder layer over n new rows attending to `offset` cached rows plus
/// themselves causally: projections, scores + mix, MLP.
inline std::uint64_t layer_madds(std::uint64_t n, std::uint64_t offset, std::uint64_t d, std::uint64_t d_ff) {
  const std::uint64_t keys = n * offset + n * (n + 1) / 2;
  return 4 * n * d * d + 2 * d * keys + 2 * n * d * d_ff;
}

/// Prefill over n prompt rows, including the LM head on the final row.
inline std::uint64_t prefill_madds(const nn::ModelConfig& cfg, std::uint64_t n) {
  return cfg.n_layers * layer_madds(n, 0, cfg.d_model, cfg.d_ff) + cfg.d_model * cfg.vocab_size;
}

/// One extend-one step with n_ctx cached rows.
inline std::uint64_t decode_step_madds(const nn::ModelConfig& cfg, std::uint64_t n_ctx) {
  return cfg.n_layers * layer_madds(1, n_ctx, cfg.d_model, cfg.d_ff) + cfg.d_model * cfg.vocab_size;
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

struct CalibrationRow {
  std::string name;
  std::string precision;  ///< fp16 | fp8
  bool speculative = false;
  bool patch_selection = false;
  double patches = 0, vit_ms = 0, input_tokens = 0, prefill_ms = 0, extend_one_ms = 0, decode_ms = 0,
         selection_ms = 0, total_ms = 0, speedup = 0, accuracy = 0;
};

struct CostCalibration {
  std::vector<CalibrationRow> rows;
  double generated_tokens = 0;
  double mean_accepted = 0;
  double fp8_vit = 1, fp8_prefill = 1, fp8_decode = 1;  ///< nominal stage multipliers

  const CalibrationRow& row(std::string_view name) const {
    for (const auto& r : rows)
      if (r.name == name) return r;
    throw Error("calibration: no row '" + std::string(name) + "'");
  }

  static CostCalibration parse(std::string_view text) {
    CostCalibration c;
    try {
      const auto j = nlohmann::json::parse(text);
      c.generated_tokens = j.at("generated_tokens").get<double>();
      c.mean_accepted = j.at("mean_accepted_per_iter").get<double>();
      const auto& m = j.at("fp8_stage_speedups");
      c.fp8_vit = m.at("vit").get<double>();
      c.fp8_prefill = m.at("prefill").get<double>();
      c.fp8_decode = m.at("decode").get<double>();
      for (const auto& r : j.at("rows")) {
        CalibrationRow row;
        row.name = r.at("name").get<std::string>();
        row.precision = r.at("precision").get<std::string>();
        row.speculative = r.at("decode").get<std::string>() == "speculative";
        row.patch_selection = r.at("patch_selection").get<bool>();
        row.patches = r.at("patches").get<double>();
        row.vit_ms = r.at("vit_ms").get<double>();
        row.input_tokens = r.at("input_tokens").get<double>();
        row.prefill_ms = r.at("prefill_ms").get<double>();
        row.extend_one_ms = r.at("extend_one_ms").get<double>();
        row.decode_ms = r.at("decode_ms").get<double>();
        row.selection_ms = r.at("selection_ms").get<double>();
        row.total_ms = r.at("total_ms").get<double>();
        row.speedup = r.at("speedup").get<double>();
        row.accuracy = r.at("accuracy").get<double>();
        c.rows.push_back(std::move(row));
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(std::string("calibration: ") + e.what());
    }
    for (const char* need : {"baseline", "litevlm", "litevlm_fp8"}) c.row(need);
    return c;
  }

  static CostCalibration builtin() { return parse(resources::kCalibrationJson); }

  static CostCalibration load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("calibration: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }
};

// ---------------------------------------------------------------------------
// Latency model
// ---------------------------------------------------------------------------

enum class Precision { kFp16, kFp8 };

inline Precision parse_precision(std::string_view s) {
  if (s == "fp16") return Precision::kFp16;
  if (s == "fp8") return Precision::kFp8;
  throw Error("unknown precision profile '" + std::string(s) + "' (expected fp16 or fp8)");
}

inline const char* precision_name(Precision p) { return p == Precision::kFp16 ? "fp16" : "fp8"; }

/// Piecewise-linear through sorted (x, y) points, clamped outside the range.
inline double interpolate(std::vector<std::pair<double, double>> pts, double x) {
  if (pts.empty()) throw Error("interpolate: no points");
  std::sort(pts.begin(), pts.end());
  if (x <= pts.front().first) return pts.front().second;
  if (x >= pts.back().first) return pts.back().second;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (x <= pts[i].first) {
      const auto [x0, y0] = pts[i - 1];
      const auto [x1, y1] = pts[i];
      return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
    }
  }
  return pts.back().second;
}

struct CostInputs {
  double patches = 0;
  double input_tokens = 0;
  double generated_tokens = 0;
  bool speculative = false;
  bool patch_selection = false;
};

struct LatencyBreakdown {
  double vit_ms = 0, prefill_ms = 0, extend_one_ms = 0, decode_ms = 0, selection_ms = 0, total_ms = 0;
};

/// Stage latencies from counters. ViT is linear in patches through the two
/// calibrated patch counts; prefill is interpolated over calibrated token
/// counts; extend-one follows the autoregressive or speculative rows. The FP8
/// profile rescales each stage so the measured FP8 row is reproduced.
inline LatencyBreakdown model_latency(const CostInputs& in, const CostCalibration& c, Precision profile) {
  std::vector<std::pair<double, double>> prefill, ar, spec;
  double sel_ms = 0;
  for (const auto& r : c.rows) {
    if (r.precision != "fp16") continue;
    prefill.emplace_back(r.input_tokens, r.prefill_ms);
    (r.speculative ? spec : ar).emplace_back(r.input_tokens, r.extend_one_ms);
    if (r.patch_selection) sel_ms = r.selection_ms;
  }
  const CalibrationRow& full = c.row("baseline");
  const CalibrationRow& sel = c.row("litevlm");
  auto vit16 = [&](double p) {
    const double slope = (full.vit_ms - sel.vit_ms) / (full.patches - sel.patches);
    return sel.vit_ms + slope * (p - sel.patches);
  };
  auto pre16 = [&](double n) { return interpolate(prefill, n); };
  auto ext16 = [&](double n, bool speculative) { return interpolate(speculative ? spec : ar, n); };

  LatencyBreakdown b;
  b.vit_ms = in.patches > 0 ? vit16(in.patches) : 0.0;
  b.prefill_ms = pre16(in.input_tokens);
  b.extend_one_ms = ext16(in.input_tokens, in.speculative);
  if (profile == Precision::kFp8) {
    const CalibrationRow& f8 = c.row("litevlm_fp8");
    b.vit_ms *= f8.vit_ms / vit16(f8.patches);
    b.prefill_ms *= f8.prefill_ms / pre16(f8.input_tokens);
    b.extend_one_ms *= f8.extend_one_ms / ext16(f8.input_tokens, f8.speculative);
  }
  b.decode_ms = in.generated_tokens * b.extend_one_ms;
  b.selection_ms = in.patch_selection ? sel_ms : 0.0;
  b.total_ms = b.vit_ms + b.prefill_ms + b.decode_ms + b.selection_ms;
  return b;
}

/// Cost inputs of a calibration row with the calibrated generated-token count.
inline CostInputs row_inputs(const CalibrationRow& r, const CostCalibration& c) {
  return {r.patches, r.input_tokens, c.generated_tokens, r.speculative, r.patch_selection};
}

}  // namespace litevlm::pipeline
