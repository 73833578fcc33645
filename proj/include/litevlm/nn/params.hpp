#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "litevlm/nn/autograd.hpp"
#include "litevlm/nn/rng.hpp"
#include "litevlm/nn/tensor.hpp"

namespace litevlm::nn {

static_assert(std::endian::native == std::endian::little,
              "parameter and corpus files are written in host order; big-endian hosts unsupported");

/// Hyper-parameters of one transformer stack.
struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 64;
  std::size_t max_seq = 4096;
  std::uint64_t seed = 7;

  std::size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw Error("ModelConfig: d_model must be a positive multiple of n_heads");
    }
    if (vocab_size < 8) throw Error("ModelConfig: vocab_size must be >= 8");
    if (max_seq < 1) throw Error("ModelConfig: max_seq must be >= 1");
    if (n_layers == 0 || d_ff == 0) throw Error("ModelConfig: empty stack");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Draws a tensor from the counter stream keyed by (seed, path). Values are
/// uniform in [-bound, bound]; the layout of the stream is element i -> draw i.
inline Tensor seeded_tensor(std::uint64_t seed, std::string_view path, Shape shape,
                            float bound) {
  CounterRng rng = CounterRng(seed).split(path);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) {
    t[i] = (2.0f * rng.next_float() - 1.0f) * bound;
  }
  return t;
}

/// Named parameter tensors. Names are full paths including the role tag
/// ("vit.layer0.wq"); iteration order is lexicographic.
class ParamSet {
 public:
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const ag::Var& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("missing parameter '" + name + "'");
    return it->second;
  }

  void set(const std::string& name, Tensor value) {
    params_[name] = ag::Var(std::move(value), false);
  }

  std::size_t size() const { return params_.size(); }
  const std::map<std::string, ag::Var>& items() const { return params_; }

  std::vector<std::string> names(std::string_view prefix = {}) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : params_) {
      if (k.compare(0, prefix.size(), prefix) == 0) out.push_back(k);
    }
    return out;
  }

  /// Deep copy; the clone shares no tensors with this set.
  ParamSet clone() const {
    ParamSet out;
    for (const auto& [k, v] : params_) out.set(k, v.value());
    return out;
  }

  void merge(const ParamSet& other) {
    for (const auto& [k, v] : other.params_) params_[k] = v;
  }

  void set_requires_grad(std::string_view prefix, bool on) {
    for (auto& [k, v] : params_) {
      if (k.compare(0, prefix.size(), prefix) == 0) v.set_requires_grad(on);
    }
  }

  std::vector<ag::Var> trainable() const {
    std::vector<ag::Var> out;
    for (const auto& [k, v] : params_)
      if (v.requires_grad()) out.push_back(v);
    return out;
  }

  // Binary layout: "LVLM", u32 version, u32 record count, then per record
  // u32 path length, path bytes, u32 rank, u64 dims[rank], f32 payload.
  std::string serialize() const {
    std::string out;
    auto put = [&out](const void* p, std::size_t n) {
      out.append(static_cast<const char*>(p), n);
    };
    out.append(kMagic, 4);
    const std::uint32_t version = kVersion;
    put(&version, 4);
    const auto count = static_cast<std::uint32_t>(params_.size());
    put(&count, 4);
    for (const auto& [name, var] : params_) {
      const auto len = static_cast<std::uint32_t>(name.size());
      put(&len, 4);
      put(name.data(), name.size());
      const Tensor& t = var.value();
      const auto rank = static_cast<std::uint32_t>(t.rank());
      put(&rank, 4);
      for (std::size_t d : t.shape()) {
        const auto d64 = static_cast<std::uint64_t>(d);
        put(&d64, 8);
      }
      put(t.raw(), t.numel() * sizeof(float));
    }
    return out;
  }

  static ParamSet deserialize(std::string_view bytes) {
    std::size_t pos = 0;
    auto take = [&](void* dst, std::size_t n) {
      if (pos + n > bytes.size()) throw Error("parameter file truncated");
      std::memcpy(dst, bytes.data() + pos, n);
      pos += n;
    };
    char magic[4];
    take(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw Error("bad parameter file magic");
    std::uint32_t version = 0, count = 0;
    take(&version, 4);
    if (version != kVersion) {
      throw Error("unsupported parameter file version " + std::to_string(version));
    }
    take(&count, 4);
    ParamSet ps;
    for (std::uint32_t r = 0; r < count; ++r) {
      std::uint32_t len = 0;
      take(&len, 4);
      std::string name(len, '\0');
      take(name.data(), len);
      std::uint32_t rank = 0;
      take(&rank, 4);
      if (rank == 0 || rank > 4) throw Error("bad tensor rank in parameter file");
      Shape shape(rank);
      for (auto& d : shape) {
        std::uint64_t d64 = 0;
        take(&d64, 8);
        d = static_cast<std::size_t>(d64);
      }
      std::vector<float> data(shape_numel(shape));
      take(data.data(), data.size() * sizeof(float));
      ps.set(name, Tensor(std::move(shape), std::move(data)));
    }
    if (pos != bytes.size()) throw Error("trailing bytes in parameter file");
    return ps;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write parameter file '" + path + "'");
    const std::string bytes = serialize();
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("failed writing parameter file '" + path + "'");
  }

  static ParamSet load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open parameter file '" + path + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return deserialize(ss.str());
  }

  /// FNV-1a over the serialized bytes of parameters under `prefix`.
  std::uint64_t checksum(std::string_view prefix = {}) const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& [name, var] : params_) {
      if (name.compare(0, prefix.size(), prefix) != 0) continue;
      h = fnv1a64(name, h);
      const Tensor& t = var.value();
      h = fnv1a64(std::string_view(reinterpret_cast<const char*>(t.raw()),
                                   t.numel() * sizeof(float)),
                  h);
    }
    return h;
  }

 private:
  static constexpr char kMagic[4] = {'L', 'V', 'L', 'M'};
  static constexpr std::uint32_t kVersion = 1;

  std::map<std::string, ag::Var> params_;
};

/// Fan-in scaled uniform init: bound = sqrt(3 / fan_in) gives unit-variance
/// pre-activations. sqrt is exactly rounded, so this stays platform-stable.
inline void init_linear(ParamSet& ps, std::uint64_t seed, const std::string& w_name,
                        const std::string& b_name, std::size_t in, std::size_t out) {
  const float bound = static_cast<float>(std::sqrt(3.0 / static_cast<double>(in)));
  ps.set(w_name, seeded_tensor(seed, w_name, {in, out}, bound));
  ps.set(b_name, Tensor({out}));
}

inline void init_layer_norm(ParamSet& ps, const std::string& prefix, std::size_t d) {
  ps.set(prefix + ".g", Tensor({d}, 1.0f));
  ps.set(prefix + ".b", Tensor({d}));
}

/// Pre-norm transformer block parameters under `prefix` (e.g. "llm.layer0").
inline void init_transformer_layer(ParamSet& ps, const ModelConfig& cfg,
                                   const std::string& prefix) {
  const std::size_t d = cfg.d_model;
  init_layer_norm(ps, prefix + ".ln1", d);
  for (const char* m : {"q", "k", "v", "o"}) {
    init_linear(ps, cfg.seed, prefix + ".w" + m, prefix + ".b" + m, d, d);
  }
  init_layer_norm(ps, prefix + ".ln2", d);
  init_linear(ps, cfg.seed, prefix + ".w1", prefix + ".b1", d, cfg.d_ff);
  init_linear(ps, cfg.seed, prefix + ".w2", prefix + ".b2", cfg.d_ff, d);
}

/// Decoder language model parameters under `role_tag`: token and position
/// embeddings, n_layers blocks, final norm and LM head.
inline ParamSet seeded_init(const ModelConfig& cfg, const std::string& role_tag) {
  cfg.validate();
  ParamSet ps;
  const std::size_t d = cfg.d_model;
  ps.set(role_tag + "tok_emb", seeded_tensor(cfg.seed, role_tag + "tok_emb",
                                             {cfg.vocab_size, d}, 1.0f));
  ps.set(role_tag + "pos_emb", seeded_tensor(cfg.seed, role_tag + "pos_emb",
                                             {cfg.max_seq, d}, 0.1f));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    init_transformer_layer(ps, cfg, role_tag + "layer" + std::to_string(l));
  }
  init_layer_norm(ps, role_tag + "ln_f", d);
  init_linear(ps, cfg.seed, role_tag + "lm_head.w", role_tag + "lm_head.b", d,
              cfg.vocab_size);
  return ps;
}

/// Adam with bias correction tracked as running products (no pow()).
class Adam {
 public:
  struct Options {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float clip_norm = 1.0f;  ///< global gradient-norm clip; <= 0 disables
  };

  Adam(std::vector<ag::Var> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    b1_pow_ *= opt_.beta1;
    b2_pow_ *= opt_.beta2;
    float scale = 1.0f;
    if (opt_.clip_norm > 0.0f) {
      double sq = 0.0;
      for (const auto& p : params_) {
        if (p.grad().empty()) continue;
        for (float g : p.grad().data()) sq += static_cast<double>(g) * g;
      }
      const double norm = std::sqrt(sq);
      if (norm > opt_.clip_norm) scale = static_cast<float>(opt_.clip_norm / norm);
    }
    const float c1 = 1.0f - b1_pow_, c2 = 1.0f - b2_pow_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p.grad().empty()) continue;
      Tensor& w = p.mutable_value();
      const Tensor& g = p.grad();
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      for (std::size_t j = 0; j < w.numel(); ++j) {
        const float gj = g[j] * scale;
        m[j] = opt_.beta1 * m[j] + (1.0f - opt_.beta1) * gj;
        v[j] = opt_.beta2 * v[j] + (1.0f - opt_.beta2) * gj * gj;
        const float mh = m[j] / c1, vh = v[j] / c2;
        w[j] -= opt_.lr * mh / (std::sqrt(vh) + opt_.eps);
      }
    }
  }

 private:
  std::vector<ag::Var> params_;
  Options opt_;
  std::vector<Tensor> m_, v_;
  float b1_pow_ = 1.0f, b2_pow_ = 1.0f;
};

}  // namespace litevlm::nn
