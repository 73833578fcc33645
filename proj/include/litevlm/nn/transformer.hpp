#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "litevlm/nn/autograd.hpp"
#include "litevlm/nn/kernels.hpp"
#include "litevlm/nn/params.hpp"

namespace litevlm::nn {

/// Per-layer key/value storage for incremental decoding. Keys are held
/// transposed per head ([n_heads, d_head, max_seq]) so the attention kernel
/// reads them in place; values are [n_heads, max_seq, d_head].
class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t n_layers, std::size_t n_heads, std::size_t d_head,
          std::size_t max_seq)
      : n_heads_(n_heads), d_head_(d_head), max_seq_(max_seq),
        kt_(n_layers, std::vector<float>(n_heads * d_head * max_seq)),
        v_(n_layers, std::vector<float>(n_heads * max_seq * d_head)),
        len_(n_layers, 0) {}

  std::size_t n_layers() const { return len_.size(); }
  std::size_t max_seq() const { return max_seq_; }
  /// Cached positions (of layer 0; all layers agree after a full forward).
  std::size_t size() const { return len_.empty() ? 0 : len_.front(); }
  std::size_t layer_size(std::size_t layer) const { return len_.at(layer); }

  void truncate(std::size_t n) {
    for (auto& l : len_) {
      if (n > l) throw Error("KVCache::truncate beyond cached length");
      l = n;
    }
  }

  /// Keys of one layer as [n_heads, len, d_head].
  Tensor keys(std::size_t layer) const {
    const std::size_t len = len_.at(layer);
    if (len == 0) return Tensor();
    Tensor out({n_heads_, len, d_head_});
    for (std::size_t h = 0; h < n_heads_; ++h)
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t c = 0; c < d_head_; ++c)
          out[(h * len + t) * d_head_ + c] = kt_[layer][(h * d_head_ + c) * max_seq_ + t];
    return out;
  }

  Tensor values(std::size_t layer) const {
    const std::size_t len = len_.at(layer);
    if (len == 0) return Tensor();
    Tensor out({n_heads_, len, d_head_});
    for (std::size_t h = 0; h < n_heads_; ++h)
      std::copy_n(v_[layer].data() + h * max_seq_ * d_head_, len * d_head_,
                  out.raw() + h * len * d_head_);
    return out;
  }

  /// Writes packed [n, n_heads*d_head] K/V rows at the layer's end and returns
  /// the new layer length.
  std::size_t append(std::size_t layer, const Tensor& k, const Tensor& v) {
    const std::size_t n = k.rows(), d = n_heads_ * d_head_;
    std::size_t& len = len_.at(layer);
    if (len + n > max_seq_) {
      throw Error("KV cache overflow: " + std::to_string(len) + " + " +
                  std::to_string(n) + " > max_seq " + std::to_string(max_seq_));
    }
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t t = len + i;
      for (std::size_t h = 0; h < n_heads_; ++h)
        for (std::size_t c = 0; c < d_head_; ++c) {
          kt_[layer][(h * d_head_ + c) * max_seq_ + t] = k[i * d + h * d_head_ + c];
          v_[layer][(h * max_seq_ + t) * d_head_ + c] = v[i * d + h * d_head_ + c];
        }
    }
    len += n;
    return len;
  }

  /// Attends `q` ([nq, d]) causally against every cached position of `layer`.
  AttentionResult attend(std::size_t layer, const Tensor& q, bool keep_weights) const {
    const std::size_t nq = q.rows(), d = n_heads_ * d_head_;
    const std::size_t nk = len_.at(layer);
    AttentionResult res;
    res.output = Tensor({nq, d});
    if (keep_weights) res.weights = Tensor({n_heads_, nq, nk});
    std::vector<float> scratch;
    std::uint64_t madds = 0;
    for (std::size_t h = 0; h < n_heads_; ++h) {
      detail::HeadView view{q.raw() + h * d_head_,
                            d,
                            kt_[layer].data() + h * d_head_ * max_seq_,
                            max_seq_,
                            v_[layer].data() + h * max_seq_ * d_head_,
                            d_head_,
                            res.output.raw() + h * d_head_,
                            d};
      madds += detail::attend_head(view, nq, nk, d_head_, true, nullptr,
                                   detail::attention_scale(d_head_),
                                   keep_weights ? res.weights.raw() + h * nq * nk : nullptr,
                                   scratch);
    }
    record_madds(madds);
    return res;
  }

 private:
  std::size_t n_heads_ = 0, d_head_ = 0, max_seq_ = 0;
  std::vector<std::vector<float>> kt_, v_;
  std::vector<std::size_t> len_;
};

struct LayerOutput {
  ag::Var hidden;
  Tensor attn_weights;  ///< [n_heads, n_new, n_keys] when requested
};

/// Pre-norm block: x + Attn(LN1(x)), then + MLP(LN2(.)) with a GELU MLP.
/// With a cache only the new rows of `x` are processed; their K/V are appended
/// to `cache` at `layer` and the result equals the uncached forward bitwise.
inline LayerOutput decoder_layer_forward(const ag::Var& x, const ParamSet& ps,
                                         const std::string& prefix,
                                         const ModelConfig& cfg, KVCache* cache = nullptr,
                                         std::size_t layer = 0, bool causal = true,
                                         std::span<const std::uint8_t> key_mask = {},
                                         bool keep_weights = false) {
  if (!x.defined() || x.value().empty()) throw Error("decoder layer: empty input");
  if (x.cols() != cfg.d_model) {
    throw Error("decoder layer: input width " + std::to_string(x.cols()) +
                " != d_model " + std::to_string(cfg.d_model));
  }
  auto p = [&](const char* name) -> const ag::Var& { return ps.get(prefix + name); };
  const ag::Var h1 = ag::layer_norm(x, p(".ln1.g"), p(".ln1.b"));
  const ag::Var q = ag::linear(h1, p(".wq"), p(".bq"));
  const ag::Var k = ag::linear(h1, p(".wk"), p(".bk"));
  const ag::Var v = ag::linear(h1, p(".wv"), p(".bv"));

  LayerOutput out;
  ag::Var attn;
  if (cache) {
    if (q.requires_grad()) throw Error("decoder layer: cached forward is inference-only");
    if (!causal || !key_mask.empty()) {
      throw Error("decoder layer: cached forward supports causal unmasked attention only");
    }
    cache->append(layer, k.value(), v.value());
    AttentionResult r = cache->attend(layer, q.value(), keep_weights);
    attn = ag::constant(std::move(r.output));
    out.attn_weights = std::move(r.weights);
  } else {
    ag::AttentionOut r = ag::multi_head_attention(q, k, v, cfg.n_heads, causal, key_mask,
                                                  keep_weights);
    attn = r.output;
    out.attn_weights = std::move(r.weights);
  }
  const ag::Var h = ag::add(x, ag::linear(attn, p(".wo"), p(".bo")));
  const ag::Var h2 = ag::layer_norm(h, p(".ln2.g"), p(".ln2.b"));
  const ag::Var mlp = ag::linear(ag::gelu(ag::linear(h2, p(".w1"), p(".b1"))), p(".w2"), p(".b2"));
  out.hidden = ag::add(h, mlp);
  return out;
}

/// Decoder-only language model over pre-computed input embeddings.
/// Positions are assigned contiguously from the cache length.
class LanguageModel {
 public:
  struct Output {
    ag::Var hidden;              ///< last block output, before the final norm
    Tensor first_layer_weights;  ///< [heads, n, n_keys] when requested
  };

  LanguageModel(ModelConfig cfg, ParamSet params, std::string role = "llm.")
      : cfg_(cfg), params_(std::move(params)), role_(std::move(role)) {
    cfg_.validate();
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  const std::string& role() const { return role_; }

  KVCache make_cache() const {
    return KVCache(cfg_.n_layers, cfg_.n_heads, cfg_.d_head(), cfg_.max_seq);
  }

  ag::Var embed_tokens(std::span<const int> ids) const {
    return ag::embedding(params_.get(role_ + "tok_emb"), ids);
  }

  ag::Var add_positions(const ag::Var& x, std::size_t offset) const {
    const std::size_t n = x.rows();
    if (offset + n > cfg_.max_seq) {
      throw Error("sequence length " + std::to_string(offset + n) + " exceeds max_seq " +
                  std::to_string(cfg_.max_seq));
    }
    std::vector<int> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = static_cast<int>(offset + i);
    return ag::add(x, ag::embedding(params_.get(role_ + "pos_emb"), pos));
  }

  std::string layer_prefix(std::size_t l) const { return role_ + "layer" + std::to_string(l); }

  Output forward(const ag::Var& embeddings, KVCache* cache = nullptr,
                 bool keep_first_layer_weights = false) const {
    if (!embeddings.defined() || embeddings.value().empty()) {
      throw Error("language model: empty input");
    }
    const std::size_t offset = cache ? cache->size() : 0;
    ag::Var x = add_positions(embeddings, offset);
    Output out;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      LayerOutput lo = decoder_layer_forward(x, params_, layer_prefix(l), cfg_, cache, l,
                                             true, {}, keep_first_layer_weights && l == 0);
      if (l == 0) out.first_layer_weights = std::move(lo.attn_weights);
      x = lo.hidden;
    }
    out.hidden = x;
    return out;
  }

  /// Final norm + LM head.
  ag::Var logits(const ag::Var& hidden) const {
    const ag::Var h = ag::layer_norm(hidden, params_.get(role_ + "ln_f.g"),
                                     params_.get(role_ + "ln_f.b"));
    return ag::linear(h, params_.get(role_ + "lm_head.w"), params_.get(role_ + "lm_head.b"));
  }

 private:
  ModelConfig cfg_;
  ParamSet params_;
  std::string role_;
};

}  // namespace litevlm::nn
