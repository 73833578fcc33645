#pragma once

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "litevlm/geometry.hpp"
#include "litevlm/nn/kernels.hpp"
#include "litevlm/nn/rng.hpp"
#include "litevlm/nn/transformer.hpp"
#include "litevlm/pipeline/bench.hpp"
#include "litevlm/pipeline/cost_model.hpp"
#include "litevlm/spec/decoder.hpp"
#include "litevlm/spec/distill.hpp"
#include "litevlm/toksel/token_selector.hpp"
#include "litevlm/vision/frontend.hpp"

namespace litevlm::verify {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct Suite {
  std::string name;
  std::vector<Check> checks;

  bool passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return !checks.empty();
  }
};

inline std::string format(const char* fmt, double a, double b = 0, double c = 0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, fmt, a, b, c);
  return buf;
}

inline void print_suite(std::ostream& os, const Suite& s) {
  for (const auto& c : s.checks)
    os << (c.passed ? "[PASS] " : "[FAIL] ") << s.name << ": " << c.name << " (" << c.detail << ")\n";
}

// ---------------------------------------------------------------------------
// Speculative losslessness
// ---------------------------------------------------------------------------

struct LosslessOptions {
  std::size_t prompts = 100;
  std::vector<std::size_t> draft_lens{1, 2, 4, 8};
  std::size_t max_new = 12;
  std::uint64_t seed = 7;
};

namespace detail {

inline nn::ModelConfig lossless_target(std::uint64_t seed) {
  nn::ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.d_ff = 32;
  cfg.vocab_size = 24;
  cfg.max_seq = 256;
  cfg.seed = seed;
  return cfg;
}

inline std::vector<int> random_prompt(std::uint64_t seed, std::size_t vocab) {
  CounterRng rng = CounterRng(seed).split("verify-prompt");
  const auto len = static_cast<std::size_t>(rng.uniform_int(1, 16));
  std::vector<int> ids(len);
  for (auto& id : ids) id = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(vocab) - 1));
  return ids;
}

}  // namespace detail

/// Speculative output equals greedy autoregressive output for seeded random
/// prompts, every draft length, with an untrained and a distilled draft.
inline Suite losslessness_suite(const LosslessOptions& opt = {}) {
  Suite s{"losslessness", {}};
  const nn::ModelConfig cfg = detail::lossless_target(opt.seed);
  const nn::LanguageModel target(cfg, nn::seeded_init(cfg, "llm."));
  const int eos = 2;

  std::vector<spec::DistillExample> data;
  for (std::uint64_t i = 0; i < 32; ++i)
    data.push_back(spec::make_distill_example(target, detail::random_prompt(opt.seed * 1000 + 500 + i, cfg.vocab_size),
                                              opt.max_new, eos));
  spec::DistillOptions dopt;
  dopt.steps = 150;
  dopt.seed = opt.seed;
  dopt.log_every = dopt.steps;
  const nn::ParamSet trained = spec::distill_draft(target, data, spec::init_draft_params(cfg, opt.seed + 1), dopt).params;

  std::vector<std::vector<int>> prompts;
  std::vector<std::vector<int>> reference;
  for (std::size_t i = 0; i < opt.prompts; ++i) {
    prompts.push_back(detail::random_prompt(opt.seed * 1000 + i, cfg.vocab_size));
    reference.push_back(spec::decode_autoregressive(target, prompts.back(), opt.max_new, eos).tokens);
  }

  const spec::DraftHead drafts[2] = {spec::DraftHead(target, spec::init_draft_params(cfg, opt.seed + 1)),
                                     spec::DraftHead(target, trained)};
  const char* names[2] = {"untrained", "trained"};
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t d : opt.draft_lens) {
      std::size_t equal = 0, accounted = 0;
      spec::DecodeStats all;
      for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto r = spec::decode_speculative(target, drafts[k], prompts[i], d, opt.max_new, eos);
        equal += r.tokens == reference[i];
        std::size_t sum = 0;
        for (std::size_t h = 0; h < r.stats.histogram.size(); ++h) sum += r.stats.histogram[h] * (h + 1);
        accounted += sum == r.stats.total_generated;
        all.merge(r.stats);
      }
      const bool ok = equal == prompts.size() && accounted == prompts.size();
      s.checks.push_back({std::string(names[k]) + " draft, D=" + std::to_string(d), ok,
                          std::to_string(equal) + "/" + std::to_string(prompts.size()) + " identical, " +
                              format("mean accepted %.3f", all.mean_accepted())});
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Input-token arithmetic
// ---------------------------------------------------------------------------

inline constexpr double kMeanTextTokens = 142.0;

/// Prefill length after pruning a prompt with `patches` full patches and the
/// mean text length, through the production pruning path.
inline double pruned_prompt_tokens(std::size_t patches, double r, std::uint64_t seed) {
  const std::size_t visual = patches * geometry::kTokensPerPatch;
  const auto text = static_cast<std::size_t>(kMeanTextTokens);
  Tensor seq({visual + text, 1});
  for (std::size_t i = 0; i < seq.rows(); ++i) seq[i] = static_cast<float>(i);
  const toksel::VisualSpan span{1, 1 + visual};
  toksel::ImportanceScores sc;
  CounterRng rng = CounterRng(seed).split("verify-scores");
  for (std::size_t i = 0; i < visual; ++i) sc.scores.push_back(rng.next_float());
  if (r >= 1.0) return static_cast<double>(seq.rows());
  return static_cast<double>(toksel::prune(seq, span, sc, r).embeddings.rows());
}

/// Fractional patch counts average the neighbouring whole-patch prompts.
inline double prompt_tokens(double patches, double r, std::uint64_t seed = 7) {
  const auto lo = static_cast<std::size_t>(std::floor(patches));
  const auto hi = static_cast<std::size_t>(std::ceil(patches));
  if (lo == hi) return pruned_prompt_tokens(lo, r, seed);
  const double w = patches - static_cast<double>(lo);
  return (1.0 - w) * pruned_prompt_tokens(lo, r, seed) + w * pruned_prompt_tokens(hi, r, seed);
}

inline Suite token_arithmetic_suite() {
  Suite s{"input tokens", {}};
  struct Case {
    const char* name;
    double patches, r, expected, tol;
  };
  const Case cases[] = {{"baseline, 12 patches", 12, 1.0, 3214, 0},
                        {"12 patches, r=0.7", 12, 0.7, 2292, 0},
                        {"12 patches, r=0.3", 12, 0.3, 1063, 1},
                        {"3.5 patches, r=0.8", 3.5, 0.8, 859, 1},
                        {"3.5 patches, r=0.9", 3.5, 0.9, 948, 1}};
  for (const auto& c : cases) {
    const double got = prompt_tokens(c.patches, c.r);
    const double rounded = static_cast<double>(std::llround(got));
    s.checks.push_back({c.name, std::fabs(rounded - c.expected) <= c.tol,
                        format("measured %.1f, expected %.0f", got, c.expected) + format(" +/- %.0f", c.tol)});
  }
  return s;
}

// ---------------------------------------------------------------------------
// Modeled latency
// ---------------------------------------------------------------------------

/// Modeled speedups against the ratio of reference totals (2%) and the
/// one-decimal speedup column.
inline Suite speedup_suite(const pipeline::CostCalibration& calib) {
  Suite s{"modeled speedup", {}};
  const pipeline::BenchReport rep = pipeline::calibration_report(calib);
  const double base_total = calib.row("baseline").total_ms;
  for (const auto& row : rep.rows) {
    const pipeline::CalibrationRow& ref = calib.row(row.label);
    const double want = base_total / ref.total_ms;
    const double rel = std::fabs(row.speedup / want - 1.0);
    const bool column = std::fabs(std::round(row.speedup * 10.0) / 10.0 - ref.speedup) < 1e-9;
    s.checks.push_back({row.label, rel <= 0.02 && column,
                        format("modeled %.3fx (%.1f ms), reference %.3fx", row.speedup, row.latency.total_ms, want) +
                            format(", off %.2f%%, column %.1fx", 100.0 * rel, ref.speedup)});
  }
  return s;
}

/// ViT compute is exactly linear in patches; modeled latency hits both
/// calibrated patch counts.
inline Suite vit_linearity_suite(const pipeline::CostCalibration& calib, const vision::VitConfig& vit_cfg) {
  Suite s{"vit linearity", {}};
  const vision::VisionEncoder enc(vit_cfg, vision::init_vision_params(vit_cfg));
  const Tensor patch({3, geometry::kPatchSize, geometry::kPatchSize}, 0.25f);
  std::vector<std::uint64_t> madds;
  bool linear = true;
  for (std::size_t p = 1; p <= geometry::kNumSlots; ++p) {
    std::vector<Tensor> patches(p, patch);
    std::vector<std::size_t> slots(p);
    for (std::size_t i = 0; i < p; ++i) slots[i] = i;
    std::uint64_t m = 0;
    {
      nn::MaddScope scope(m);
      (void)enc.encode(patches, slots);
    }
    madds.push_back(m);
    linear = linear && m == p * madds[0];
  }
  s.checks.push_back({"madds(p) == p * madds(1), p = 1..12", linear,
                      format("madds(1) = %.0f, madds(12) = %.0f", static_cast<double>(madds[0]),
                             static_cast<double>(madds.back()))});
  const double compute = static_cast<double>(madds.back()) / (3.5 * static_cast<double>(madds[0]));
  s.checks.push_back({"compute reduction 12 -> 3.5 patches", std::fabs(compute - 12.0 / 3.5) < 1e-9,
                      format("%.3fx", compute)});
  const auto lat = [&](double p) {
    return pipeline::model_latency({p, 3214, 0, false, false}, calib, pipeline::Precision::kFp16).vit_ms;
  };
  const double full = lat(12), sel = lat(3.5);
  const bool ok = std::fabs(full - 136.9) < 1e-6 && std::fabs(sel - 45.1) < 1e-6 &&
                  std::fabs(full / sel - 136.9 / 45.1) < 1e-9;
  s.checks.push_back({"modeled ViT latency 12 -> 3.5 patches", ok,
                      format("%.1f ms -> %.1f ms, %.2fx", full, sel, full / sel)});
  return s;
}

inline vision::VitConfig small_vit() {
  vision::VitConfig v;
  v.model = {16, 2, 1, 32, 8, geometry::kTilesPerPatch, 7};
  v.d_llm = 32;
  return v;
}

/// Suites run by the `verify` subcommand.
inline std::vector<Suite> run_all(const pipeline::CostCalibration& calib, const LosslessOptions& lossless = {}) {
  return {losslessness_suite(lossless), token_arithmetic_suite(), speedup_suite(calib),
          vit_linearity_suite(calib, small_vit())};
}

}  // namespace litevlm::verify
