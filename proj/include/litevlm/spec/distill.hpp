#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "litevlm/corpus/corpus_io.hpp"
#include "litevlm/nn/autograd.hpp"
#include "litevlm/nn/params.hpp"
#include "litevlm/nn/rng.hpp"
#include "litevlm/nn/transformer.hpp"
#include "litevlm/spec/decoder.hpp"
#include "litevlm/text/vocab.hpp"

namespace litevlm::spec {

/// Text-only prompt: [BOS] query [SEP].
inline std::vector<int> text_prompt(const text::Vocab& vocab, const std::string& raw) {
  std::vector<int> ids{text::kBos};
  const auto q = vocab.encode(raw);
  ids.insert(ids.end(), q.begin(), q.end());
  ids.push_back(text::kSep);
  return ids;
}

/// Teacher-forced draft targets for one prompt and the target's greedy
/// continuation. Row r of the draft input pairs target hidden r with the
/// embedding of token r + 1.
struct DistillExample {
  Tensor prev_hidden;      ///< [L-1, d]
  Tensor input_emb;        ///< [L-1, d]
  Tensor target_hidden;    ///< [L-1, d] target hidden at the draft row's position
  std::vector<int> next;   ///< [L-1] target greedy token after the draft row's position
  std::size_t first_row = 0;  ///< first row that predicts a generated token
};

inline DistillExample make_distill_example(const nn::LanguageModel& target, std::span<const int> prompt,
                                           std::size_t max_new, int eos) {
  if (prompt.empty()) throw Error("distill: empty prompt");
  std::vector<int> seq(prompt.begin(), prompt.end());
  const auto cont = decode_autoregressive(target, prompt, max_new, eos).tokens;
  seq.insert(seq.end(), cont.begin(), cont.end());
  const std::size_t n = seq.size();
  const Tensor emb = token_embeddings(target, seq);
  const ag::Var h = target.forward(ag::constant(emb)).hidden;
  const Tensor logits = target.logits(h).value();
  DistillExample ex;
  ex.prev_hidden = slice_rows(h.value(), 0, n - 1);
  ex.input_emb = slice_rows(emb, 1, n);
  ex.target_hidden = slice_rows(h.value(), 1, n);
  const std::size_t v = logits.cols();
  for (std::size_t i = 1; i < n; ++i)
    ex.next.push_back(nn::greedy_argmax(std::span<const float>(logits.raw() + i * v, v)));
  ex.first_row = prompt.size() - 1;
  return ex;
}

struct DistillOptions {
  std::size_t steps = 800;
  std::size_t batch = 4;
  float lr = 2e-3f;
  float lambda = 0.5f;  ///< weight of the hidden-state regression term
  std::uint64_t seed = 7;
  std::size_t log_every = 100;
  std::ostream* metrics = nullptr;
};

struct LossRecord {
  std::size_t step = 0;
  double loss = 0.0;
};

struct DistillResult {
  nn::ParamSet params;
  std::vector<LossRecord> log;
  double first_loss = 0.0;
};

namespace detail {

/// Seeded epoch-wise shuffled index stream.
class ShuffledOrder {
 public:
  ShuffledOrder(std::size_t n, CounterRng rng) : order_(n), pos_(n), rng_(rng) {}

  std::size_t next() {
    if (pos_ == order_.size()) {
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      CounterRng er = rng_.split(epoch_++);
      for (std::size_t i = order_.size() - 1; i > 0; --i)
        std::swap(order_[i], order_[static_cast<std::size_t>(er.uniform_int(0, static_cast<std::int64_t>(i)))]);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_, epoch_ = 0;
  CounterRng rng_;
};

template <class LossFn>
std::vector<LossRecord> adam_loop(std::vector<ag::Var> trainable, std::size_t n_examples, std::size_t steps,
                                  std::size_t batch, float lr, std::uint64_t seed, const char* tag,
                                  std::size_t log_every, std::ostream* metrics, double& first_loss, LossFn&& loss_of) {
  if (trainable.empty()) throw Error(std::string(tag) + ": nothing to train");
  nn::Adam::Options aopt;
  aopt.lr = lr;
  nn::Adam adam(std::move(trainable), aopt);
  ShuffledOrder order(n_examples, CounterRng(seed).split(tag));
  std::vector<LossRecord> log;
  double window = 0.0;
  std::size_t window_n = 0;
  batch = std::max<std::size_t>(1, batch);
  for (std::size_t step = 1; step <= steps; ++step) {
    adam.zero_grad();
    std::vector<ag::Var> parts;
    for (std::size_t b = 0; b < batch; ++b) parts.push_back(loss_of(order.next()));
    ag::Var loss = parts[0];
    for (std::size_t b = 1; b < parts.size(); ++b) loss = ag::add(loss, parts[b]);
    loss = ag::scale(loss, 1.0f / static_cast<float>(batch));
    ag::backward(loss);
    adam.step();
    const double l = loss.value()[0];
    if (step == 1) first_loss = l;
    window += l;
    ++window_n;
    if (step % std::max<std::size_t>(1, log_every) == 0 || step == steps) {
      log.push_back({step, window / static_cast<double>(window_n)});
      window = 0.0;
      window_n = 0;
      if (metrics) *metrics << nlohmann::json{{"step", step}, {"loss", log.back().loss}}.dump() << '\n';
    }
  }
  return log;
}

}  // namespace detail

/// Trains "draft." parameters against a frozen target: cross-entropy to the
/// target's greedy next token plus lambda * MSE to the target hidden state.
inline DistillResult distill_draft(const nn::LanguageModel& target, const std::vector<DistillExample>& data,
                                   nn::ParamSet draft_params, const DistillOptions& opt) {
  if (data.empty()) throw Error("distill_draft: empty corpus");
  for (const auto& ex : data)
    if (ex.first_row >= ex.next.size()) throw Error("distill_draft: example has no generated rows");
  draft_params.set_requires_grad(kRole, true);
  DraftHead draft(target, draft_params);
  DistillResult res;
  res.log = detail::adam_loop(draft_params.trainable(), data.size(), opt.steps, opt.batch, opt.lr, opt.seed,
                              "distill-order", opt.log_every, opt.metrics, res.first_loss, [&](std::size_t i) {
                                const DistillExample& ex = data[i];
                                const std::size_t n = ex.next.size(), r0 = ex.first_row;
                                const ag::Var h = ag::rows(draft.forward(ag::constant(ex.prev_hidden),
                                                                         ag::constant(ex.input_emb), nullptr),
                                                           r0, n);
                                const std::span<const int> next(ex.next.data() + r0, n - r0);
                                const ag::Var ce = ag::cross_entropy(draft.logits(h), next);
                                const ag::Var reg = ag::mse(h, slice_rows(ex.target_hidden, r0, n));
                                return ag::add(ce, ag::scale(reg, opt.lambda));
                              });
  draft_params.set_requires_grad(kRole, false);
  res.params = std::move(draft_params);
  return res;
}

/// Summed decode statistics of speculative decoding over `prompts`.
inline DecodeStats evaluate_acceptance(const nn::LanguageModel& target, const DraftHead& draft,
                                       const std::vector<std::vector<int>>& prompts, std::size_t d,
                                       std::size_t max_new, int eos) {
  DecodeStats total;
  total.histogram.assign(d + 1, 0);
  for (const auto& p : prompts) total.merge(decode_speculative(target, draft, p, d, max_new, eos).stats);
  return total;
}

struct TextPair {
  std::vector<int> prompt;
  std::vector<int> answer;  ///< ends with eos
};

/// Text prompt and rule answer of every sample in `c`.
inline std::vector<TextPair> answer_pairs(const corpus::Corpus& c, const text::Vocab& vocab = corpus::builtin_vocab()) {
  std::vector<TextPair> out;
  out.reserve(c.size());
  for (const auto& q : c.samples) out.push_back({text_prompt(vocab, q.raw), q.answer_ids});
  return out;
}

struct FinetuneOptions {
  std::size_t steps = 1500;
  std::size_t batch = 4;
  float lr = 2e-3f;
  std::uint64_t seed = 7;
  std::size_t log_every = 100;
  std::ostream* metrics = nullptr;
};

struct FinetuneResult {
  nn::ParamSet params;
  std::vector<LossRecord> log;
  double first_loss = 0.0;
};

/// Text-only answer finetune of a language model: cross-entropy on answer
/// tokens given the prompt. Parameters under `role` are updated.
inline FinetuneResult finetune_language_model(const nn::ModelConfig& cfg, nn::ParamSet params,
                                              const std::vector<TextPair>& data, const FinetuneOptions& opt,
                                              const std::string& role = "llm.") {
  if (data.empty()) throw Error("finetune: empty corpus");
  for (const auto& p : data)
    if (p.prompt.empty() || p.answer.empty()) throw Error("finetune: empty prompt or answer");
  params.set_requires_grad(role, true);
  const nn::LanguageModel lm(cfg, params, role);
  FinetuneResult res;
  res.log = detail::adam_loop(params.trainable(), data.size(), opt.steps, opt.batch, opt.lr, opt.seed,
                              "finetune-order", opt.log_every, opt.metrics, res.first_loss, [&](std::size_t i) {
                                const TextPair& p = data[i];
                                std::vector<int> seq = p.prompt;
                                seq.insert(seq.end(), p.answer.begin(), p.answer.end() - 1);
                                const ag::Var h = lm.forward(lm.embed_tokens(seq)).hidden;
                                const ag::Var tail = ag::rows(h, p.prompt.size() - 1, seq.size());
                                return ag::cross_entropy(lm.logits(tail), p.answer);
                              });
  params.set_requires_grad(role, false);
  res.params = std::move(params);
  return res;
}

}  // namespace litevlm::spec
