#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "litevlm/corpus/query.hpp"
#include "litevlm/corpus/scene.hpp"
#include "litevlm/nn/kernels.hpp"
#include "litevlm/nn/params.hpp"
#include "litevlm/nn/transformer.hpp"
#include "litevlm/patchsel/selector.hpp"
#include "litevlm/pipeline/config.hpp"
#include "litevlm/spec/decoder.hpp"
#include "litevlm/text/vocab.hpp"
#include "litevlm/toksel/token_selector.hpp"
#include "litevlm/vision/frontend.hpp"

namespace litevlm::pipeline {

/// Loads `path` (relative to `workdir`) or, when empty, returns `fallback()`.
/// Every loaded name must carry `role`.
template <class Fallback>
nn::ParamSet load_role_params(const std::string& path, const std::string& workdir, const std::string& role,
                              Fallback&& fallback) {
  if (path.empty()) return fallback();
  const std::filesystem::path full = std::filesystem::path(workdir) / path;
  if (!std::filesystem::exists(full))
    throw Error("missing parameter file for role '" + role + "': " + full.string());
  nn::ParamSet ps = nn::ParamSet::load(full.string());
  for (const auto& name : ps.names())
    if (name.rfind(role, 0) != 0) throw Error("parameter file " + full.string() + " holds '" + name + "', expected role '" + role + "'");
  if (ps.size() == 0) throw Error("parameter file " + full.string() + " is empty (role '" + role + "')");
  return ps;
}

/// All parameter sets a pipeline run needs. Not movable: the draft head
/// refers to the language model.
class Models {
 public:
  Models(const PipelineConfig& cfg, const std::string& workdir = ".")
      : llm_(cfg.llm, load_role_params(cfg.params.llm, workdir, "llm.",
                                       [&] { return nn::seeded_init(cfg.llm, "llm."); })),
        vision_(cfg.vit, load_role_params(cfg.params.vision, workdir, "vit.",
                                          [&] { return vision::init_vision_params(cfg.vit); })),
        selector_(cfg.selector, load_role_params(cfg.params.patchsel, workdir, patchsel::kRole,
                                                 [&] { return patchsel::init_selector_params(cfg.selector); })),
        toksel_(load_role_params(cfg.params.toksel, workdir, toksel::kRole,
                                 [&] { return toksel::init_token_selector(llm_.params(), "llm.layer0", cfg.llm); })),
        draft_(llm_, load_role_params(cfg.params.draft, workdir, spec::kRole,
                                      [&] { return spec::init_draft_params(cfg.llm, cfg.seed + 1); })) {}

  Models(const Models&) = delete;
  Models& operator=(const Models&) = delete;

  const nn::LanguageModel& llm() const { return llm_; }
  const vision::VisionEncoder& vision() const { return vision_; }
  const patchsel::PatchSelector& selector() const { return selector_; }
  const nn::ParamSet& toksel() const { return toksel_; }
  const spec::DraftHead& draft() const { return draft_; }

 private:
  nn::LanguageModel llm_;
  vision::VisionEncoder vision_;
  patchsel::PatchSelector selector_;
  nn::ParamSet toksel_;
  spec::DraftHead draft_;
};

struct StageWall {
  double selection = 0, vit = 0, prune = 0, prefill = 0, decode = 0;
};

struct StageMetrics {
  std::size_t vit_patches = 0;
  std::uint64_t vit_madds = 0;
  std::size_t visual_total = 0;
  std::size_t visual_kept = 0;
  std::size_t forced_count = 0;
  std::size_t text_tokens = 0;
  std::size_t prefill_tokens = 0;
  std::uint64_t prefill_madds = 0;
  std::size_t decode_iterations = 0;
  std::size_t generated_tokens = 0;
  std::vector<std::size_t> accepted_hist;
  std::uint64_t decode_madds = 0;
  std::uint64_t draft_madds = 0;
  std::uint64_t selection_madds = 0;
  std::uint64_t prune_madds = 0;
  bool selection_fallback = false;
  StageWall wall;
};

struct PipelineResult {
  std::vector<int> tokens;
  StageMetrics metrics;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

}  // namespace detail

/// Prompt embeddings [BOS] visual tokens, query words [SEP] for the patches in `mask`.
struct Prompt {
  Tensor embeddings;
  toksel::VisualSpan span;
  vision::VisualTokens visual;
};

inline Prompt build_prompt(const Models& models, const corpus::SceneSpec& scene, const corpus::QuerySample& query,
                           const geometry::PatchMask& mask) {
  Prompt p;
  const auto views = corpus::render_all(scene);
  const auto patches = vision::extract_patches(vision::stitch_views(views), mask);
  const auto slots = mask.slots();
  p.visual = models.vision().encode(patches, slots);
  const nn::LanguageModel& llm = models.llm();
  std::vector<int> text_ids = corpus::builtin_vocab().encode(query.raw);
  text_ids.push_back(text::kSep);
  const int bos[1] = {text::kBos};
  const Tensor parts[3] = {llm.embed_tokens(bos).value(), p.visual.tokens, llm.embed_tokens(text_ids).value()};
  p.embeddings = concat_rows(parts);
  p.span = {1, 1 + p.visual.tokens.rows()};
  return p;
}

/// Token-selector training sequence over all 12 patches: labels blend
/// first-layer attention importance with critical-object flags.
inline toksel::LabeledSequence labeled_sequence(const Models& models, const corpus::SceneSpec& scene,
                                                const corpus::QuerySample& query, float alpha) {
  const Prompt p = build_prompt(models, scene, query, geometry::PatchMask::all());
  const nn::LanguageModel& llm = models.llm();
  toksel::LabeledSequence seq;
  seq.embeddings = llm.add_positions(ag::constant(p.embeddings), 0).value();
  seq.span = p.span;
  const auto att = toksel::attention_importance(seq.embeddings, llm.params(), "llm.layer0", llm.config(), p.span);
  const auto flags = toksel::forced_keep_flags(p.visual.origin, toksel::scene_boxes(scene));
  seq.labels = toksel::synth_labels(att.scores, flags, alpha);
  return seq;
}

/// One query through the variant's stage graph: patch selection (litevlm),
/// ViT over the selected patches, token pruning (fastv, litevlm), prefill and
/// greedy decoding (speculative for litevlm). Prompt layout is
/// [BOS] visual tokens, query words [SEP].
inline PipelineResult run_pipeline(const Models& models, const corpus::SceneSpec& scene,
                                   const corpus::QuerySample& query, const PipelineConfig& cfg,
                                   std::ostream* prune_audit = nullptr, std::uint64_t sample_id = 0) {
  cfg.validate();
  PipelineResult res;
  StageMetrics& m = res.metrics;

  auto t0 = detail::Clock::now();
  geometry::PatchMask mask = geometry::PatchMask::all();
  if (cfg.patch_selection()) {
    nn::MaddScope scope(m.selection_madds);
    patchsel::SelectionOptions so;
    so.threshold = *cfg.threshold;
    so.w_lex = cfg.w_lex;
    so.w_model = cfg.w_model;
    so.granularity = cfg.granularity;
    mask = models.selector().select(query.raw, so).mask;
    m.selection_fallback = mask.fallback_used;
  }
  m.wall.selection = detail::since(t0);

  t0 = detail::Clock::now();
  Prompt pr;
  {
    nn::MaddScope scope(m.vit_madds);
    pr = build_prompt(models, scene, query, mask);
  }
  m.vit_patches = mask.popcount();
  m.wall.vit = detail::since(t0);

  const nn::LanguageModel& llm = models.llm();
  const Tensor& prompt = pr.embeddings;
  const toksel::VisualSpan span = pr.span;
  const vision::VisualTokens& vt = pr.visual;
  m.visual_total = span.size();
  m.text_tokens = prompt.rows() - span.size();

  t0 = detail::Clock::now();
  Tensor kept = prompt;
  m.visual_kept = m.visual_total;
  const double r = cfg.ratio();
  if (cfg.prunes() && r < 1.0) {
    nn::MaddScope scope(m.prune_madds);
    const Tensor positioned = llm.add_positions(ag::constant(prompt), 0).value();
    toksel::ImportanceScores s =
        cfg.token_scores == TokenScores::kAttention
            ? toksel::attention_importance(positioned, llm.params(), "llm.layer0", llm.config(), span)
            : toksel::head_importance(positioned, models.toksel(), llm.config(), span);
    if (cfg.forced_keep) s.forced = toksel::forced_keep_flags(vt.origin, toksel::scene_boxes(scene));
    const toksel::PrunedSequence p = toksel::prune(prompt, span, s, r);
    if (prune_audit) toksel::write_prune_audit(*prune_audit, sample_id, p);
    kept = p.embeddings;
    m.visual_kept = p.visual_kept;
    m.forced_count = p.forced_count;
  }
  m.prefill_tokens = kept.rows();
  m.wall.prune = detail::since(t0);

  const spec::DecodeResult dec =
      cfg.speculative() ? spec::decode_speculative(llm, models.draft(), kept, cfg.draft_len, cfg.max_new, text::kEos)
                        : spec::decode_autoregressive(llm, kept, cfg.max_new, text::kEos);
  res.tokens = dec.tokens;
  m.prefill_madds = dec.stats.prefill_madds;
  m.decode_madds = dec.stats.decode_madds;
  m.draft_madds = dec.stats.draft_madds;
  m.decode_iterations = dec.stats.iterations;
  m.generated_tokens = dec.stats.total_generated;
  m.accepted_hist = dec.stats.histogram;
  m.wall.prefill = dec.stats.prefill_seconds;
  m.wall.decode = dec.stats.decode_seconds;
  return res;
}

}  // namespace litevlm::pipeline
