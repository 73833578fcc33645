#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "litevlm/corpus/scene.hpp"
#include "litevlm/nn/autograd.hpp"
#include "litevlm/nn/kernels.hpp"
#include "litevlm/nn/params.hpp"
#include "litevlm/nn/transformer.hpp"
#include "litevlm/vision/frontend.hpp"

namespace litevlm::toksel {

inline constexpr const char* kRole = "toksel.";

/// Contiguous visual-token region [begin, end) of a prompt sequence.
struct VisualSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

enum class ScoreSource { kAttention, kTrainedHead };

struct ImportanceScores {
  std::vector<float> scores;        ///< one per visual token
  std::vector<std::uint8_t> forced; ///< empty or one per visual token
  ScoreSource source = ScoreSource::kAttention;
};

namespace detail {

inline void check_span(const Tensor& emb, const VisualSpan& span) {
  if (span.size() == 0 || span.end < span.begin) throw Error("token selection: empty visual span");
  if (span.end > emb.rows()) throw Error("token selection: visual span beyond sequence");
}

}  // namespace detail

/// Head-mean attention weight from the final position to each visual token,
/// using the attention sublayer of the decoder layer at `layer_prefix`.
/// Only the final query row is formed.
inline ImportanceScores attention_importance(const Tensor& embeddings, const nn::ParamSet& params,
                                             const std::string& layer_prefix, const nn::ModelConfig& cfg,
                                             const VisualSpan& span) {
  detail::check_span(embeddings, span);
  if (embeddings.cols() != cfg.d_model) throw Error("attention_importance: embedding width mismatch");
  auto p = [&](const char* name) -> const ag::Var& { return params.get(layer_prefix + name); };
  const std::size_t n = embeddings.rows(), heads = cfg.n_heads, dh = cfg.d_head();
  const ag::Var h1 = ag::layer_norm(ag::constant(embeddings), p(".ln1.g"), p(".ln1.b"));
  const Tensor k = ag::linear(h1, p(".wk"), p(".bk")).value();
  const Tensor q = ag::linear(ag::rows(h1, n - 1, n), p(".wq"), p(".bq")).value();
  ImportanceScores s;
  s.scores.assign(span.size(), 0.0f);
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<float> row(n);
  for (std::size_t h = 0; h < heads; ++h) {
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      float dot = 0.0f;
      for (std::size_t c = 0; c < dh; ++c) dot += q[h * dh + c] * k[j * cfg.d_model + h * dh + c];
      row[j] = dot * scale;
      mx = std::max(mx, row[j]);
    }
    float sum = 0.0f;
    for (std::size_t j = 0; j < n; ++j) sum += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < span.size(); ++j) s.scores[j] += row[span.begin + j] / sum;
  }
  nn::record_madds(static_cast<std::uint64_t>(heads) * n * dh);
  for (float& x : s.scores) x /= static_cast<float>(heads);
  return s;
}

/// Standalone copy of an LLM layer under "toksel.layer0" plus a zero-init
/// scoring head "toksel.head.w" [d, 1] / "toksel.head.b" [1].
inline nn::ParamSet init_token_selector(const nn::ParamSet& llm_params, const std::string& llm_layer_prefix,
                                        const nn::ModelConfig& llm_cfg) {
  nn::ParamSet ps;
  const std::string dst = std::string(kRole) + "layer0";
  for (const auto& name : llm_params.names(llm_layer_prefix + ".")) {
    ps.set(dst + name.substr(llm_layer_prefix.size()), llm_params.get(name).value());
  }
  if (ps.size() == 0) throw Error("missing parameter '" + llm_layer_prefix + ".*'");
  ps.set(std::string(kRole) + "head.w", Tensor({llm_cfg.d_model, 1}));
  ps.set(std::string(kRole) + "head.b", Tensor({1}));
  return ps;
}

/// Trained-head importance: sigmoid(head(hidden_j)) from the standalone layer.
inline ag::Var head_logits(const ag::Var& embeddings, const nn::ParamSet& ps, const nn::ModelConfig& cfg,
                           const VisualSpan& span) {
  detail::check_span(embeddings.value(), span);
  const std::string r = kRole;
  const ag::Var h = nn::decoder_layer_forward(embeddings, ps, r + "layer0", cfg, nullptr, 0, true).hidden;
  return ag::linear(ag::rows(h, span.begin, span.end), ps.get(r + "head.w"), ps.get(r + "head.b"));
}

inline ImportanceScores head_importance(const Tensor& embeddings, const nn::ParamSet& ps,
                                        const nn::ModelConfig& cfg, const VisualSpan& span) {
  const Tensor logits = head_logits(ag::constant(embeddings), ps, cfg, span).value();
  ImportanceScores s;
  s.source = ScoreSource::kTrainedHead;
  s.scores.resize(span.size());
  for (std::size_t j = 0; j < span.size(); ++j) s.scores[j] = nn::sigmoid(logits[j]);
  return s;
}

/// Flags tokens whose 28x28 footprint intersects any box in their own view.
inline std::vector<std::uint8_t> forced_keep_flags(std::span<const vision::TokenOrigin> origin,
                                                   const std::array<std::vector<corpus::Box>, geometry::kNumViews>& boxes) {
  for (const auto& view : boxes)
    for (const auto& b : view)
      if (!corpus::box_in_view(b)) throw Error("forced_keep_flags: box outside view bounds");
  std::vector<std::uint8_t> out(origin.size(), 0);
  for (std::size_t i = 0; i < origin.size(); ++i) {
    const corpus::Box f = vision::token_footprint(origin[i]);
    for (const auto& b : boxes.at(static_cast<std::size_t>(origin[i].view_id))) {
      if (f.x < b.x + b.w && b.x < f.x + f.w && f.y < b.y + b.h && b.y < f.y + f.h) {
        out[i] = 1;
        break;
      }
    }
  }
  return out;
}

/// Boxes of every object in a scene, per view.
inline std::array<std::vector<corpus::Box>, geometry::kNumViews> scene_boxes(const corpus::SceneSpec& spec) {
  std::array<std::vector<corpus::Box>, geometry::kNumViews> out;
  for (std::size_t v = 0; v < geometry::kNumViews; ++v)
    for (const auto& o : spec.views[v]) out[v].push_back(o.box);
  return out;
}

/// round() half away from zero on a non-negative product.
inline std::size_t keep_budget(double r, std::size_t visual_total) {
  return static_cast<std::size_t>(std::llround(r * static_cast<double>(visual_total)));
}

struct PrunedSequence {
  Tensor embeddings;                  ///< kept rows in original order
  std::vector<std::size_t> index_map; ///< kept position -> original position
  std::size_t text_tokens = 0;
  std::size_t visual_kept = 0;
  std::size_t visual_total = 0;
  std::size_t forced_count = 0;
  double effective_ratio = 1.0;
  std::vector<std::size_t> kept_visual;  ///< kept visual indices (relative to the span)

  std::size_t size() const { return index_map.size(); }
};

/// Indices (relative to the span) of visual tokens kept at ratio r: all forced
/// tokens plus the best-scoring others up to round(r * total); ties go to the
/// lower index. Result is sorted.
inline std::vector<std::size_t> select_visual(const ImportanceScores& s, double r) {
  if (!(r > 0.0 && r <= 1.0)) throw Error("prune: keep ratio must be in (0, 1]");
  const std::size_t total = s.scores.size();
  if (!s.forced.empty() && s.forced.size() != total) throw Error("prune: forced flag count mismatch");
  for (float x : s.scores)
    if (!std::isfinite(x)) throw Error("prune: non-finite importance score");
  const std::size_t k = keep_budget(r, total);
  std::vector<std::uint8_t> keep(total, 0);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < s.forced.size(); ++i)
    if (s.forced[i]) keep[i] = 1, ++kept;
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < total; ++i)
    if (!keep[i]) rest.push_back(i);
  std::stable_sort(rest.begin(), rest.end(),
                   [&](std::size_t a, std::size_t b) { return s.scores[a] > s.scores[b]; });
  for (std::size_t i = 0; i < rest.size() && kept < k; ++i, ++kept) keep[rest[i]] = 1;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < total; ++i)
    if (keep[i]) out.push_back(i);
  return out;
}

/// Drops unselected visual rows from `sequence`; text rows are always kept.
inline PrunedSequence prune(const Tensor& sequence, const VisualSpan& span, const ImportanceScores& s, double r) {
  detail::check_span(sequence, span);
  if (s.scores.size() != span.size()) throw Error("prune: score count does not match visual span");
  const std::vector<std::size_t> vis = select_visual(s, r);
  PrunedSequence p;
  p.visual_total = span.size();
  p.visual_kept = vis.size();
  p.kept_visual = vis;
  p.text_tokens = sequence.rows() - span.size();
  for (std::uint8_t f : s.forced) p.forced_count += f;
  for (std::size_t i = 0; i < span.begin; ++i) p.index_map.push_back(i);
  for (std::size_t v : vis) p.index_map.push_back(span.begin + v);
  for (std::size_t i = span.end; i < sequence.rows(); ++i) p.index_map.push_back(i);
  p.embeddings = gather_rows(sequence, p.index_map);
  p.effective_ratio = static_cast<double>(p.visual_kept) / static_cast<double>(p.visual_total);
  return p;
}

/// One JSON line per pruning decision for audit.
inline void write_prune_audit(std::ostream& os, std::uint64_t sample_id, const PrunedSequence& p) {
  nlohmann::json j;
  j["sample_id"] = sample_id;
  j["kept"] = p.index_map;
  j["visual_kept"] = p.visual_kept;
  j["visual_total"] = p.visual_total;
  j["forced"] = p.forced_count;
  j["effective_ratio"] = p.effective_ratio;
  os << j.dump() << '\n';
}

/// Targets alpha * (attention / max attention) + (1 - alpha) * flag, clipped.
inline std::vector<float> synth_labels(std::span<const float> attention, std::span<const std::uint8_t> flags,
                                       float alpha) {
  if (!(alpha >= 0.0f && alpha <= 1.0f)) throw Error("synth_labels: alpha must be in [0, 1]");
  if (!flags.empty() && flags.size() != attention.size()) throw Error("synth_labels: flag count mismatch");
  float mx = 0.0f;
  for (float a : attention) mx = std::max(mx, a);
  std::vector<float> out(attention.size());
  for (std::size_t i = 0; i < attention.size(); ++i) {
    const float norm = mx > 0.0f ? attention[i] / mx : 0.0f;
    const float flag = flags.empty() ? 0.0f : static_cast<float>(flags[i]);
    out[i] = std::clamp(alpha * norm + (1.0f - alpha) * flag, 0.0f, 1.0f);
  }
  return out;
}

struct LabeledSequence {
  Tensor embeddings;  ///< positioned prompt embeddings [len, d]
  VisualSpan span;
  std::vector<float> labels;  ///< one per visual token
};

struct TrainOptions {
  std::size_t steps = 300;
  float lr = 1e-3f;
  std::uint64_t seed = 7;
  std::size_t log_every = 50;
  bool train_layer = false;  ///< also adapt the standalone layer, not only the head
  std::ostream* metrics = nullptr;
};

struct TrainStep {
  std::size_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  nn::ParamSet params;
  std::vector<TrainStep> log;
  double first_loss = 0.0;
};

/// Minimizes mean BCE between head scores and labels, one sequence per step
/// in seeded epoch order. Only "toksel." parameters are touched.
inline TrainResult train_token_selector(const std::vector<LabeledSequence>& data, nn::ParamSet params,
                                        const nn::ModelConfig& cfg, const TrainOptions& opt) {
  if (data.empty()) throw Error("train_token_selector: empty corpus");
  const std::string r = kRole;
  if (params.names(r + "head.").empty()) throw Error("missing parameter 'toksel.head.*'");
  params.set_requires_grad(r + (opt.train_layer ? "" : "head."), true);
  std::vector<ag::Var> trainable = params.trainable();
  nn::Adam::Options aopt;
  aopt.lr = opt.lr;
  nn::Adam adam(trainable, aopt);

  CounterRng order_rng = CounterRng(opt.seed).split("toksel-order");
  std::vector<std::size_t> order(data.size());
  std::size_t pos = order.size(), epoch = 0;
  TrainResult res;
  double window = 0.0;
  std::size_t window_n = 0;
  for (std::size_t step = 1; step <= opt.steps; ++step) {
    if (pos == order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      CounterRng er = order_rng.split(epoch++);
      for (std::size_t i = order.size() - 1; i > 0; --i)
        std::swap(order[i], order[static_cast<std::size_t>(er.uniform_int(0, static_cast<std::int64_t>(i)))]);
      pos = 0;
    }
    const LabeledSequence& ex = data[order[pos++]];
    if (ex.labels.size() != ex.span.size()) throw Error("train_token_selector: label count mismatch");
    adam.zero_grad();
    const ag::Var logits = head_logits(ag::constant(ex.embeddings), params, cfg, ex.span);
    const ag::Var loss = ag::bce_with_logits(logits, Tensor({ex.labels.size(), 1}, ex.labels));
    ag::backward(loss);
    adam.step();
    if (step == 1) res.first_loss = loss.value()[0];
    window += loss.value()[0];
    ++window_n;
    if (step % std::max<std::size_t>(1, opt.log_every) == 0 || step == opt.steps) {
      TrainStep rec{step, window / static_cast<double>(window_n)};
      window = 0.0;
      window_n = 0;
      if (opt.metrics) {
        nlohmann::json j;
        j["step"] = rec.step;
        j["loss"] = rec.loss;
        *opt.metrics << j.dump() << '\n';
      }
      res.log.push_back(rec);
    }
  }
  params.set_requires_grad(r, false);
  res.params = std::move(params);
  return res;
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.size() < 2) throw Error("spearman: need two equal-length series");
  auto ranks = [](std::span<const float> x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0 || vb == 0) return 0.0;
  return cov / std::sqrt(va * vb);
}

}  // namespace litevlm::toksel
