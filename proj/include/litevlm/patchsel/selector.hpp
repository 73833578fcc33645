#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "litevlm/corpus/corpus_io.hpp"
#include "litevlm/geometry.hpp"
#include "litevlm/nn/autograd.hpp"
#include "litevlm/nn/params.hpp"
#include "litevlm/nn/transformer.hpp"
#include "litevlm/text/vocab.hpp"

namespace litevlm::patchsel {

using ViewScores = std::array<float, geometry::kNumViews>;
using geometry::PatchMask;

struct LexicalResult {
  ViewScores scores{};
  bool explicit_flag = false;
};

/// Case-insensitive, longest-match-first lookup in the shared phrase table.
inline LexicalResult lexical_match(std::string_view raw,
                                   const text::PhraseTable& table = text::PhraseTable::builtin()) {
  const auto m = table.match(text::split_words(raw));
  return {m.views, m.any};
}

inline constexpr std::size_t kSelectorLayers = 4;
inline constexpr const char* kRole = "patchsel.";

struct SelectorConfig {
  nn::ModelConfig model{64, 4, kSelectorLayers, 256, 64, 64, 7};

  static SelectorConfig for_vocab(const text::Vocab& vocab) {
    SelectorConfig c;
    c.model.vocab_size = vocab.size();
    return c;
  }

  void validate() const {
    model.validate();
    if (model.n_layers != kSelectorLayers) throw Error("selector: encoder must have exactly 4 layers");
  }
};

/// Token/position embeddings, the 4-layer encoder, 6 latent queries, one
/// cross-attention block (latents query the encoded text) and 6 per-view heads
/// stored as rows of `head.w` [6, d] / `head.b` [6, 1].
inline nn::ParamSet init_selector_params(const SelectorConfig& cfg) {
  cfg.validate();
  const auto& m = cfg.model;
  const std::string r = kRole;
  nn::ParamSet ps;
  ps.set(r + "tok_emb", nn::seeded_tensor(m.seed, r + "tok_emb", {m.vocab_size, m.d_model}, 1.0f));
  ps.set(r + "pos_emb", nn::seeded_tensor(m.seed, r + "pos_emb", {m.max_seq, m.d_model}, 0.1f));
  for (std::size_t l = 0; l < m.n_layers; ++l) nn::init_transformer_layer(ps, m, r + "layer" + std::to_string(l));
  nn::init_layer_norm(ps, r + "ln_enc", m.d_model);
  ps.set(r + "latents", nn::seeded_tensor(m.seed, r + "latents", {geometry::kNumViews, m.d_model}, 1.0f));
  nn::init_layer_norm(ps, r + "cross.ln_q", m.d_model);
  for (const char* x : {"q", "k", "v", "o"})
    nn::init_linear(ps, m.seed, r + "cross.w" + x, r + "cross.b" + x, m.d_model, m.d_model);
  const float hb = static_cast<float>(std::sqrt(3.0 / static_cast<double>(m.d_model)));
  ps.set(r + "head.w", nn::seeded_tensor(m.seed, r + "head.w", {geometry::kNumViews, m.d_model}, hb));
  ps.set(r + "head.b", Tensor({geometry::kNumViews, 1}));
  return ps;
}

/// Query ids -> 6 independent view logits ([6, 1]). `pad_mask` (1 = real
/// token) hides padding from every attention.
inline ag::Var encode_and_score(std::span<const int> ids, const nn::ParamSet& ps, const SelectorConfig& cfg,
                                std::span<const std::uint8_t> pad_mask = {}) {
  const auto& m = cfg.model;
  const std::string r = kRole;
  if (ids.empty()) throw Error("selector: empty query");
  if (ids.size() > m.max_seq) throw Error("selector: query longer than max_seq");
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= m.vocab_size) {
      throw Error("selector: token id " + std::to_string(id) + " outside vocab of " + std::to_string(m.vocab_size));
    }
  if (!pad_mask.empty() && pad_mask.size() != ids.size()) throw Error("selector: pad mask length mismatch");
  std::vector<int> pos(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) pos[i] = static_cast<int>(i);
  ag::Var x = ag::add(ag::embedding(ps.get(r + "tok_emb"), ids), ag::embedding(ps.get(r + "pos_emb"), pos));
  for (std::size_t l = 0; l < m.n_layers; ++l)
    x = nn::decoder_layer_forward(x, ps, r + "layer" + std::to_string(l), m, nullptr, 0, false, pad_mask).hidden;
  const ag::Var enc = ag::layer_norm(x, ps.get(r + "ln_enc.g"), ps.get(r + "ln_enc.b"));

  const ag::Var& lat = ps.get(r + "latents");
  const ag::Var lq = ag::layer_norm(lat, ps.get(r + "cross.ln_q.g"), ps.get(r + "cross.ln_q.b"));
  const ag::Var q = ag::linear(lq, ps.get(r + "cross.wq"), ps.get(r + "cross.bq"));
  const ag::Var k = ag::linear(enc, ps.get(r + "cross.wk"), ps.get(r + "cross.bk"));
  const ag::Var v = ag::linear(enc, ps.get(r + "cross.wv"), ps.get(r + "cross.bv"));
  const ag::Var att = ag::multi_head_attention(q, k, v, m.n_heads, false, pad_mask).output;
  const ag::Var z = ag::add(lat, ag::linear(att, ps.get(r + "cross.wo"), ps.get(r + "cross.bo")));
  return ag::add(ag::rowwise_dot(z, ps.get(r + "head.w")), ps.get(r + "head.b"));
}

/// Explicit queries blend lexical indicators with model probabilities;
/// otherwise the model probability is used as is.
inline ViewScores combine_scores(const LexicalResult& lex, const ViewScores& logits, float w_lex, float w_model) {
  if (w_lex < 0.0f || w_model < 0.0f || std::fabs(w_lex + w_model - 1.0f) > 1e-6f) {
    throw Error("combine_scores: weights must be non-negative and sum to 1");
  }
  ViewScores out{};
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float p = nn::sigmoid(logits[i]);
    out[i] = lex.explicit_flag ? w_lex * lex.scores[i] + w_model * p : p;
  }
  return out;
}

enum class Granularity { kView, kPatch };

inline Granularity parse_granularity(const std::string& s) {
  if (s == "view") return Granularity::kView;
  if (s == "patch") return Granularity::kPatch;
  throw Error("unknown granularity '" + s + "' (expected view|patch)");
}

/// Thresholds view (or per-patch) scores into a slot mask. When nothing
/// passes, both patches of the best view (lowest index on ties) are taken.
/// A threshold of 0 selects everything.
inline PatchMask select_patches(const ViewScores& final_scores, float threshold,
                                Granularity granularity = Granularity::kPatch,
                                std::optional<std::array<float, geometry::kNumSlots>> per_patch = std::nullopt) {
  if (!(threshold >= 0.0f && threshold < 1.0f)) throw Error("select_patches: threshold must be in [0, 1)");
  PatchMask mask;
  mask.view_scores = final_scores;
  mask.threshold = threshold;
  for (std::size_t s = 0; s < geometry::kNumSlots; ++s) {
    const auto view = static_cast<std::size_t>(geometry::slot_info(s).view_id);
    const float score = (granularity == Granularity::kPatch && per_patch) ? (*per_patch)[s] : final_scores[view];
    mask.bits[s] = score >= threshold;
  }
  if (mask.popcount() == 0) {
    std::size_t best = 0;
    for (std::size_t v = 1; v < final_scores.size(); ++v)
      if (final_scores[v] > final_scores[best]) best = v;
    for (std::size_t p = 0; p < geometry::kPatchesPerView; ++p)
      mask.bits[geometry::slot_of(static_cast<int>(best), p)] = true;
    mask.fallback_used = true;
  }
  return mask;
}

struct SelectionOptions {
  float threshold = 0.5f;
  float w_lex = 0.6f;
  float w_model = 0.4f;
  Granularity granularity = Granularity::kPatch;
};

struct Selection {
  LexicalResult lexical;
  ViewScores logits{};
  ViewScores model_prob{};
  ViewScores final_scores{};
  PatchMask mask;
};

class PatchSelector {
 public:
  PatchSelector(SelectorConfig cfg, nn::ParamSet params, const text::Vocab& vocab = corpus::builtin_vocab())
      : cfg_(cfg), params_(std::move(params)), vocab_(&vocab) {
    cfg_.validate();
    params_.get(std::string(kRole) + "latents");
  }

  const SelectorConfig& config() const { return cfg_; }
  const nn::ParamSet& params() const { return params_; }

  ViewScores logits(std::string_view raw) const {
    const auto ids = vocab_->encode(raw);
    const ag::Var l = encode_and_score(ids, params_, cfg_);
    ViewScores out{};
    std::copy_n(l.value().raw(), out.size(), out.begin());
    return out;
  }

  Selection select(std::string_view raw, const SelectionOptions& opt) const {
    Selection s;
    s.lexical = lexical_match(raw);
    s.logits = logits(raw);
    for (std::size_t i = 0; i < s.logits.size(); ++i) s.model_prob[i] = nn::sigmoid(s.logits[i]);
    s.final_scores = combine_scores(s.lexical, s.logits, opt.w_lex, opt.w_model);
    s.mask = select_patches(s.final_scores, opt.threshold, opt.granularity);
    return s;
  }

 private:
  SelectorConfig cfg_;
  nn::ParamSet params_;
  const text::Vocab* vocab_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct F1Report {
  std::array<double, geometry::kNumViews> per_view{};
  double macro = 0.0;
  std::size_t samples = 0;
};

/// Per-view F1 over binary predictions; a view with no positives in either
/// labels or predictions scores 1.
inline F1Report f1_scores(const std::vector<corpus::ViewLabels>& labels,
                          const std::vector<corpus::ViewLabels>& preds) {
  if (labels.size() != preds.size()) throw Error("f1_scores: size mismatch");
  F1Report r;
  r.samples = labels.size();
  for (std::size_t v = 0; v < geometry::kNumViews; ++v) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const bool y = labels[i][v] != 0, p = preds[i][v] != 0;
      tp += y && p;
      fp += !y && p;
      fn += y && !p;
    }
    r.per_view[v] = tp + fp + fn == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    r.macro += r.per_view[v];
  }
  r.macro /= static_cast<double>(geometry::kNumViews);
  return r;
}

enum class EvalMode { kModel, kCombined, kLexical };

struct EvalReport {
  F1Report overall;
  F1Report explicit_only;
  F1Report implicit_only;  ///< implicit + global templates
};

/// Held-out F1 of view decisions. kModel thresholds sigmoid(logit), kCombined
/// thresholds the blended score, kLexical uses the matcher alone.
inline EvalReport evaluate_selector(const PatchSelector& sel, const corpus::Corpus& data,
                                    const SelectionOptions& opt, EvalMode mode = EvalMode::kCombined) {
  std::vector<corpus::ViewLabels> y_all, p_all, y_exp, p_exp, y_imp, p_imp;
  for (const auto& q : data.samples) {
    corpus::ViewLabels pred{};
    if (mode == EvalMode::kLexical) {
      const auto lex = lexical_match(q.raw);
      for (std::size_t v = 0; v < pred.size(); ++v) pred[v] = lex.scores[v] >= 0.5f;
    } else {
      const Selection s = sel.select(q.raw, opt);
      const ViewScores& sc = mode == EvalMode::kModel ? s.model_prob : s.final_scores;
      for (std::size_t v = 0; v < pred.size(); ++v) pred[v] = sc[v] >= opt.threshold;
    }
    y_all.push_back(q.view_labels);
    p_all.push_back(pred);
    (q.is_explicit ? y_exp : y_imp).push_back(q.view_labels);
    (q.is_explicit ? p_exp : p_imp).push_back(pred);
  }
  return {f1_scores(y_all, p_all), f1_scores(y_exp, p_exp), f1_scores(y_imp, p_imp)};
}

struct TrainOptions {
  std::size_t steps = 2000;
  std::size_t batch = 8;
  float lr = 1e-3f;
  std::uint64_t seed = 7;
  std::size_t log_every = 100;
  std::ostream* metrics = nullptr;  ///< JSON lines sink
};

struct TrainStep {
  std::size_t step = 0;
  double epoch = 0.0;
  double loss = 0.0;  ///< mean summed-BCE over the logging window
  F1Report val;
};

struct TrainResult {
  nn::ParamSet params;
  std::vector<TrainStep> log;
  double first_loss = 0.0;
};

namespace detail {

/// Visits sample indices in seeded per-epoch permutations.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(CounterRng(seed).split("epoch-order")) {
    reshuffle();
  }
  std::size_t next() {
    if (pos_ == order_.size()) reshuffle();
    return order_[pos_++];
  }
  std::size_t epochs_started() const { return epoch_; }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    CounterRng r = rng_.split(epoch_++);
    for (std::size_t i = n_ - 1; i > 0; --i)
      std::swap(order_[i], order_[static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(i)))]);
    pos_ = 0;
  }
  std::size_t n_;
  CounterRng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::size_t epoch_ = 0;
};

}  // namespace detail

/// Minimizes the per-sample sum of 6 view BCE losses with Adam over
/// mini-batches (mean over the batch). Only "patchsel." parameters move.
inline TrainResult train_patch_selector(const corpus::Corpus& train, const corpus::Corpus* val,
                                        nn::ParamSet params, const SelectorConfig& cfg,
                                        const TrainOptions& opt, const SelectionOptions& sel_opt = {},
                                        const text::Vocab& vocab = corpus::builtin_vocab()) {
  if (train.empty()) throw Error("train_patch_selector: empty corpus");
  if (opt.batch == 0) throw Error("train_patch_selector: batch must be >= 1");
  cfg.validate();
  params.set_requires_grad(kRole, true);
  std::vector<ag::Var> trainable;
  for (const auto& name : params.names(kRole)) trainable.push_back(params.get(name));
  nn::Adam::Options aopt;
  aopt.lr = opt.lr;
  nn::Adam adam(trainable, aopt);

  std::vector<std::vector<int>> ids;
  for (const auto& q : train.samples) ids.push_back(vocab.encode(q.raw));
  detail::EpochSampler sampler(train.size(), opt.seed);

  TrainResult res;
  double window = 0.0;
  std::size_t window_n = 0;
  for (std::size_t step = 1; step <= opt.steps; ++step) {
    adam.zero_grad();
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < opt.batch; ++b) {
      const std::size_t i = sampler.next();
      Tensor target({geometry::kNumViews, 1});
      for (std::size_t v = 0; v < geometry::kNumViews; ++v) target[v] = train.samples[i].view_labels[v];
      const ag::Var logits = encode_and_score(ids[i], params, cfg);
      const ag::Var loss = ag::scale(ag::bce_with_logits(logits, target, ag::Reduction::kSum),
                                     1.0f / static_cast<float>(opt.batch));
      batch_loss += loss.value()[0];
      ag::backward(loss);
    }
    adam.step();
    if (step == 1) res.first_loss = batch_loss;
    window += batch_loss;
    ++window_n;
    if (step % std::max<std::size_t>(1, opt.log_every) == 0 || step == opt.steps) {
      TrainStep rec;
      rec.step = step;
      rec.epoch = static_cast<double>(step * opt.batch) / static_cast<double>(train.size());
      rec.loss = window / static_cast<double>(window_n);
      window = 0.0;
      window_n = 0;
      if (val && !val->empty()) {
        params.set_requires_grad(kRole, false);
        rec.val = evaluate_selector(PatchSelector(cfg, params, vocab), *val, sel_opt, EvalMode::kModel).overall;
        params.set_requires_grad(kRole, true);
      }
      if (opt.metrics) {
        nlohmann::json j;
        j["step"] = rec.step;
        j["epoch"] = rec.epoch;
        j["loss"] = rec.loss;
        j["f1"] = rec.val.per_view;
        j["macro_f1"] = rec.val.macro;
        *opt.metrics << j.dump() << '\n';
      }
      res.log.push_back(rec);
    }
  }
  params.set_requires_grad(kRole, false);
  res.params = std::move(params);
  return res;
}

}  // namespace litevlm::patchsel
