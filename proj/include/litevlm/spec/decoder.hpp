#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "litevlm/nn/autograd.hpp"
#include "litevlm/nn/kernels.hpp"
#include "litevlm/nn/params.hpp"
#include "litevlm/nn/transformer.hpp"

namespace litevlm::spec {

inline constexpr const char* kRole = "draft.";
inline constexpr std::size_t kMaxDraftLen = 8;

inline void check_draft_len(std::size_t d) {
  if (d < 1 || d > kMaxDraftLen) throw Error("draft length must be in 1.." + std::to_string(kMaxDraftLen));
}

/// Draft shape: the target's width and heads with a single layer.
inline nn::ModelConfig draft_config(const nn::ModelConfig& target) {
  nn::ModelConfig c = target;
  c.n_layers = 1;
  return c;
}

/// Fusion projection "draft.fuse.w" [2d, d] + "draft.fuse.b" and one decoder
/// layer "draft.layer0". Embedding, final norm and LM head come from the target.
inline nn::ParamSet init_draft_params(const nn::ModelConfig& target, std::uint64_t seed) {
  nn::ModelConfig c = draft_config(target);
  c.seed = seed;
  const std::string r = kRole;
  nn::ParamSet ps;
  nn::init_linear(ps, seed, r + "fuse.w", r + "fuse.b", 2 * c.d_model, c.d_model);
  nn::init_transformer_layer(ps, c, r + "layer0");
  return ps;
}

/// One-layer draft head conditioned on target last-layer hidden states.
class DraftHead {
 public:
  struct Step {
    Tensor logits;  ///< [vocab]
    Tensor hidden;  ///< [1, d]
  };

  DraftHead(const nn::LanguageModel& target, nn::ParamSet params)
      : target_(&target), cfg_(draft_config(target.config())), params_(std::move(params)) {
    const std::string r = kRole;
    for (const char* name : {"fuse.w", "fuse.b"}) params_.get(r + name);
    for (const auto& name : params_.names(r + "layer"))
      if (name.rfind(r + "layer0.", 0) != 0) throw Error("draft head must have exactly one decoder layer");
    const Shape fw = params_.get(r + "fuse.w").shape();
    if (fw != Shape{2 * cfg_.d_model, cfg_.d_model}) throw Error("draft.fuse.w shape " + shape_str(fw));
  }

  const nn::ModelConfig& config() const { return cfg_; }
  const nn::ParamSet& params() const { return params_; }
  const nn::LanguageModel& target() const { return *target_; }

  nn::KVCache make_cache() const { return nn::KVCache(1, cfg_.n_heads, cfg_.d_head(), cfg_.max_seq); }

  /// Rows of (prev_hidden, input embedding) -> draft hidden states [n, d].
  ag::Var forward(const ag::Var& prev_hidden, const ag::Var& input_emb, nn::KVCache* cache) const {
    if (prev_hidden.rows() != input_emb.rows()) throw Error("draft forward: row count mismatch");
    const std::string r = kRole;
    const ag::Var x = ag::linear(ag::concat_cols(input_emb, prev_hidden), params_.get(r + "fuse.w"),
                                 params_.get(r + "fuse.b"));
    return nn::decoder_layer_forward(x, params_, r + "layer0", cfg_, cache, 0).hidden;
  }

  ag::Var logits(const ag::Var& hidden) const { return target_->logits(hidden); }

  Step draft_step(const Tensor& prev_hidden, int next_token, nn::KVCache& cache) const {
    const int ids[1] = {next_token};
    const ag::Var h = forward(ag::constant(prev_hidden.reshaped({1, cfg_.d_model})), target_->embed_tokens(ids), &cache);
    Step s;
    s.logits = logits(h).value().reshaped({cfg_.vocab_size});
    s.hidden = h.value();
    return s;
  }

 private:
  const nn::LanguageModel* target_;
  nn::ModelConfig cfg_;
  nn::ParamSet params_;
};

struct DecodeStats {
  std::size_t total_generated = 0;
  std::size_t iterations = 0;
  std::vector<std::size_t> histogram;  ///< iterations that emitted i + 1 tokens
  std::uint64_t prefill_madds = 0;
  std::uint64_t decode_madds = 0;
  std::uint64_t draft_madds = 0;
  double prefill_seconds = 0.0;
  double decode_seconds = 0.0;

  double mean_accepted() const {
    return iterations ? static_cast<double>(total_generated) / static_cast<double>(iterations) : 0.0;
  }

  void record(std::size_t emitted) {
    if (emitted == 0) throw Error("decode iteration emitted no token");
    if (histogram.size() < emitted) histogram.resize(emitted, 0);
    ++histogram[emitted - 1];
    ++iterations;
    total_generated += emitted;
  }

  /// Folds another run into this one (histograms add).
  void merge(const DecodeStats& o) {
    total_generated += o.total_generated;
    iterations += o.iterations;
    if (histogram.size() < o.histogram.size()) histogram.resize(o.histogram.size(), 0);
    for (std::size_t i = 0; i < o.histogram.size(); ++i) histogram[i] += o.histogram[i];
    prefill_madds += o.prefill_madds;
    decode_madds += o.decode_madds;
    draft_madds += o.draft_madds;
    prefill_seconds += o.prefill_seconds;
    decode_seconds += o.decode_seconds;
  }

  nlohmann::json to_json() const {
    return {{"total_generated", total_generated}, {"iterations", iterations},  {"histogram", histogram},
            {"mean_accepted_per_iter", mean_accepted()},  {"prefill_madds", prefill_madds},
            {"decode_madds", decode_madds},               {"draft_madds", draft_madds}};
  }
};

struct DecodeResult {
  std::vector<int> tokens;
  DecodeStats stats;
};

inline Tensor token_embeddings(const nn::LanguageModel& lm, std::span<const int> ids) {
  return lm.embed_tokens(ids).value();
}

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline void check_decode_args(const Tensor& prompt, std::size_t max_new) {
  if (prompt.empty() || prompt.rows() == 0) throw Error("decode: empty prompt");
  if (max_new == 0) throw Error("decode: max_new must be >= 1");
}

/// Runs `fn` with a private madd counter, then forwards the count to any
/// enclosing scope.
template <class Fn>
std::uint64_t counted(Fn&& fn) {
  std::uint64_t m = 0;
  {
    nn::MaddScope scope(m);
    fn();
  }
  nn::record_madds(m);
  return m;
}

inline int last_row_argmax(const nn::LanguageModel& lm, const ag::Var& hidden) {
  return nn::greedy_argmax(lm.logits(ag::rows(hidden, hidden.rows() - 1, hidden.rows())).value());
}

}  // namespace detail

/// Plain greedy decoding with a KV cache; prefill emits the first token and
/// each further forward emits one.
inline DecodeResult decode_autoregressive(const nn::LanguageModel& target, const Tensor& prompt_emb,
                                          std::size_t max_new, int eos) {
  detail::check_decode_args(prompt_emb, max_new);
  DecodeResult res;
  nn::KVCache cache = target.make_cache();
  int next = 0;
  auto t0 = detail::Clock::now();
  res.stats.prefill_madds = detail::counted([&] {
    next = detail::last_row_argmax(target, target.forward(ag::constant(prompt_emb), &cache).hidden);
  });
  res.stats.prefill_seconds = detail::seconds_since(t0);
  res.tokens.push_back(next);
  res.stats.record(1);
  t0 = detail::Clock::now();
  res.stats.decode_madds = detail::counted([&] {
    while (res.tokens.size() < max_new && res.tokens.back() != eos) {
      const int ids[1] = {res.tokens.back()};
      next = detail::last_row_argmax(target, target.forward(target.embed_tokens(ids), &cache).hidden);
      res.tokens.push_back(next);
      res.stats.record(1);
    }
  });
  res.stats.decode_seconds = detail::seconds_since(t0);
  return res;
}

inline DecodeResult decode_autoregressive(const nn::LanguageModel& target, std::span<const int> prompt_ids,
                                          std::size_t max_new, int eos) {
  return decode_autoregressive(target, token_embeddings(target, prompt_ids), max_new, eos);
}

struct SpecStepResult {
  std::vector<int> proposed;
  std::size_t accepted_len = 0;
  std::vector<int> emitted;  ///< accepted candidates + bonus token
  std::size_t cache_len_after = 0;
};

/// State of one speculative decoding run. The target cache holds every
/// committed token except the newest ("pending") one, whose hidden state is
/// produced by the next verify pass.
class SpeculativeSession {
 public:
  SpeculativeSession(const nn::LanguageModel& target, const DraftHead& draft)
      : target_(&target), draft_(&draft), cache_(target.make_cache()), draft_cache_(draft.make_cache()) {}

  /// Target forward over the prompt; returns the first generated token.
  int prefill(const Tensor& prompt_emb) {
    if (prompt_emb.rows() == 0) throw Error("decode: empty prompt");
    if (cache_.size() != 0) throw Error("speculative session: already prefilled");
    const ag::Var h = target_->forward(ag::constant(prompt_emb), &cache_).hidden;
    const std::size_t m = prompt_emb.rows();
    pending_ = detail::last_row_argmax(*target_, h);
    last_hidden_ = slice_rows(h.value(), m - 1, m);
    if (m > 1) {
      backlog_hidden_ = slice_rows(h.value(), 0, m - 1);
      backlog_emb_ = slice_rows(prompt_emb, 1, m);
    }
    committed_.push_back(pending_);
    return pending_;
  }

  /// Greedy draft chain of length d starting from the pending token.
  std::vector<int> propose_chain(std::size_t d) {
    check_draft_len(d);
    require_prefilled();
    sync_draft();
    const std::size_t real = draft_cache_.size();
    std::vector<int> chain;
    chain.push_back(nn::greedy_argmax(target_->logits(ag::constant(pending_draft_hidden_)).value()));
    Tensor prev = pending_draft_hidden_;
    while (chain.size() < d) {
      const DraftHead::Step s = draft_->draft_step(prev, chain.back(), draft_cache_);
      chain.push_back(nn::greedy_argmax(s.logits));
      prev = s.hidden;
    }
    draft_cache_.truncate(real);
    return chain;
  }

  /// One target pass over [pending, candidates...]; commits the longest
  /// matching prefix plus the target's own next token.
  SpecStepResult verify(std::span<const int> candidates) {
    require_prefilled();
    if (candidates.empty()) throw Error("verify: no candidates");
    sync_draft();
    const std::size_t base = cache_.size();
    std::vector<int> ids{pending_};
    ids.insert(ids.end(), candidates.begin(), candidates.end());
    const ag::Var in = target_->embed_tokens(ids);
    const ag::Var h = target_->forward(in, &cache_).hidden;
    const Tensor logits = target_->logits(h).value();
    const std::size_t v = logits.cols();
    std::vector<int> want(ids.size());
    for (std::size_t j = 0; j < ids.size(); ++j)
      want[j] = nn::greedy_argmax(std::span<const float>(logits.raw() + j * v, v));

    SpecStepResult r;
    r.proposed.assign(candidates.begin(), candidates.end());
    while (r.accepted_len < candidates.size() && candidates[r.accepted_len] == want[r.accepted_len]) ++r.accepted_len;
    const std::size_t a = r.accepted_len;
    r.emitted.assign(candidates.begin(), candidates.begin() + static_cast<long>(a));
    r.emitted.push_back(want[a]);
    cache_.truncate(base + 1 + a);
    r.cache_len_after = cache_.size();

    if (a > 0) {
      backlog_hidden_ = slice_rows(h.value(), 0, a);
      backlog_emb_ = slice_rows(in.value(), 1, a + 1);
    }
    last_hidden_ = slice_rows(h.value(), a, a + 1);
    pending_draft_hidden_ = Tensor();
    pending_ = want[a];
    committed_.insert(committed_.end(), r.emitted.begin(), r.emitted.end());
    return r;
  }

  const nn::KVCache& target_cache() const { return cache_; }
  const nn::KVCache& draft_cache() const { return draft_cache_; }
  /// Generated tokens so far; all but the last are in the target cache.
  const std::vector<int>& committed() const { return committed_; }

 private:
  /// Feeds committed positions not yet seen by the draft, ending with the
  /// pending token, into the draft cache.
  void sync_draft() {
    if (!pending_draft_hidden_.empty()) return;
    const int ids[1] = {pending_};
    std::vector<Tensor> hid, emb;
    if (!backlog_hidden_.empty()) {
      hid.push_back(backlog_hidden_);
      emb.push_back(backlog_emb_);
    }
    hid.push_back(last_hidden_);
    emb.push_back(target_->embed_tokens(ids).value());
    const ag::Var h =
        draft_->forward(ag::constant(concat_rows(hid)), ag::constant(concat_rows(emb)), &draft_cache_);
    pending_draft_hidden_ = slice_rows(h.value(), h.rows() - 1, h.rows());
    backlog_hidden_ = Tensor();
    backlog_emb_ = Tensor();
  }

  void require_prefilled() const {
    if (committed_.empty()) throw Error("speculative session: prefill first");
  }

  const nn::LanguageModel* target_;
  const DraftHead* draft_;
  nn::KVCache cache_, draft_cache_;
  int pending_ = 0;
  Tensor last_hidden_;
  Tensor backlog_hidden_, backlog_emb_;
  Tensor pending_draft_hidden_;  ///< draft output for the pending token once it is in the draft cache
  std::vector<int> committed_;
};

/// Draft/verify loop until eos (kept) or max_new tokens. Output equals
/// decode_autoregressive for any draft parameters.
inline DecodeResult decode_speculative(const nn::LanguageModel& target, const DraftHead& draft,
                                       const Tensor& prompt_emb, std::size_t d, std::size_t max_new, int eos) {
  detail::check_decode_args(prompt_emb, max_new);
  check_draft_len(d);
  DecodeResult res;
  res.stats.histogram.assign(d + 1, 0);
  SpeculativeSession session(target, draft);
  auto t0 = detail::Clock::now();
  int first = 0;
  res.stats.prefill_madds = detail::counted([&] { first = session.prefill(prompt_emb); });
  res.stats.prefill_seconds = detail::seconds_since(t0);
  res.tokens.push_back(first);
  res.stats.record(1);
  t0 = detail::Clock::now();
  std::uint64_t draft_m = 0;
  res.stats.decode_madds = detail::counted([&] {
    while (res.tokens.size() < max_new && res.tokens.back() != eos) {
      std::vector<int> chain;
      draft_m += detail::counted([&] { chain = session.propose_chain(d); });
      const SpecStepResult step = session.verify(chain);
      std::size_t take = 0;
      while (take < step.emitted.size() && res.tokens.size() < max_new) {
        res.tokens.push_back(step.emitted[take++]);
        if (res.tokens.back() == eos) break;
      }
      res.stats.record(take);
    }
  });
  res.stats.draft_madds = draft_m;
  res.stats.decode_seconds = detail::seconds_since(t0);
  return res;
}

inline DecodeResult decode_speculative(const nn::LanguageModel& target, const DraftHead& draft,
                                       std::span<const int> prompt_ids, std::size_t d, std::size_t max_new, int eos) {
  return decode_speculative(target, draft, token_embeddings(target, prompt_ids), d, max_new, eos);
}

}  // namespace litevlm::spec
