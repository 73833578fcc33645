#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "litevlm/nn/tensor.hpp"

namespace litevlm::nn {

// ---------------------------------------------------------------------------
// Multiply-add accounting
// ---------------------------------------------------------------------------

namespace detail {
inline std::uint64_t*& madd_sink() {
  thread_local std::uint64_t* sink = nullptr;
  return sink;
}
}  // namespace detail

/// Routes multiply-add counts recorded on this thread into `sink` for the
/// lifetime of the scope. Scopes nest; only the innermost one receives counts.
class MaddScope {
 public:
  explicit MaddScope(std::uint64_t& sink) : prev_(detail::madd_sink()) {
    detail::madd_sink() = &sink;
  }
  ~MaddScope() { detail::madd_sink() = prev_; }
  MaddScope(const MaddScope&) = delete;
  MaddScope& operator=(const MaddScope&) = delete;

 private:
  std::uint64_t* prev_;
};

inline void record_madds(std::uint64_t n) {
  if (auto* sink = detail::madd_sink()) *sink += n;
}

// ---------------------------------------------------------------------------
// Dense kernels. All accumulate in float32 with a fixed per-element order:
// an output element never depends on how many rows are processed together.
// ---------------------------------------------------------------------------

namespace detail {

// c[n,m] += a[n,k] * b[k,m]
inline void gemm_acc(const float* a, const float* b, float* c, std::size_t n,
                     std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    float* cr = c + i * m;
    const float* ar = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float av = ar[kk];
      const float* br = b + kk * m;
      for (std::size_t j = 0; j < m; ++j) cr[j] += av * br[j];
    }
  }
}

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw Error(std::string(what) + ": expected rank-2 tensor, got " +
                shape_str(t.shape()));
  }
}

}  // namespace detail

inline Tensor transpose(const Tensor& t) {
  detail::require_matrix(t, "transpose");
  const std::size_t r = t.rows(), c = t.cols();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = t[i * c + j];
  return out;
}

/// [n,k] x [k,m] -> [n,m]; records n*k*m multiply-adds.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw Error("matmul shape mismatch " + shape_str(a.shape()) + " x " +
                shape_str(b.shape()));
  }
  Tensor out({a.rows(), b.cols()});
  detail::gemm_acc(a.raw(), b.raw(), out.raw(), a.rows(), a.cols(), b.cols());
  record_madds(static_cast<std::uint64_t>(a.rows()) * a.cols() * b.cols());
  return out;
}

/// Uncounted aT * g, used by backward passes: [n,k]^T x [n,m] -> [k,m].
inline Tensor matmul_tn(const Tensor& a, const Tensor& g) {
  const std::size_t n = a.rows(), k = a.cols(), m = g.cols();
  if (g.rows() != n) throw Error("matmul_tn shape mismatch");
  Tensor out({k, m});
  for (std::size_t i = 0; i < n; ++i) {
    const float* ar = a.raw() + i * k;
    const float* gr = g.raw() + i * m;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float av = ar[kk];
      float* orow = out.raw() + kk * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * gr[j];
    }
  }
  return out;
}

/// Uncounted g * bT: [n,m] x [k,m]^T -> [n,k].
inline Tensor matmul_nt(const Tensor& g, const Tensor& b) {
  if (g.cols() != b.cols()) throw Error("matmul_nt shape mismatch");
  const Tensor bt = transpose(b);
  Tensor out({g.rows(), b.rows()});
  detail::gemm_acc(g.raw(), bt.raw(), out.raw(), g.rows(), g.cols(), b.rows());
  return out;
}

inline float sigmoid(float x) {
  if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

inline constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)

inline float gelu(float x) {
  return 0.5f * x * (1.0f + std::tanh(kGeluC * (x + 0.044715f * x * x * x)));
}

inline float gelu_grad(float x) {
  const float t = std::tanh(kGeluC * (x + 0.044715f * x * x * x));
  return 0.5f * (1.0f + t) +
         0.5f * x * (1.0f - t * t) * kGeluC * (1.0f + 3.0f * 0.044715f * x * x);
}

/// Numerically stable softmax along `axis` of a tensor of any rank.
inline Tensor softmax(const Tensor& x, int axis) {
  if (x.empty()) throw Error("softmax: empty tensor");
  const int rank = static_cast<int>(x.rank());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw Error("softmax: axis out of range for shape " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(static_cast<std::size_t>(axis));
  std::size_t inner = 1;
  for (int i = axis + 1; i < rank; ++i) inner *= x.dim(static_cast<std::size_t>(i));
  const std::size_t outer = x.numel() / (n * inner);
  Tensor out(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      float sum = 0.0f;
      for (std::size_t j = 0; j < n; ++j) {
        const float e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= sum;
    }
  }
  return out;
}

/// Smallest index achieving the maximum.
inline int greedy_argmax(std::span<const float> logits) {
  if (logits.empty()) throw Error("greedy_argmax: empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<int>(best);
}

inline int greedy_argmax(const Tensor& logits) { return greedy_argmax(logits.data()); }

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

namespace detail {

/// Strided view of one attention head. Keys are stored transposed
/// (`kt[c * kt_stride + j]`) so the score loop vectorizes over keys.
struct HeadView {
  const float* q;
  std::size_t q_stride;
  const float* kt;
  std::size_t kt_stride;
  const float* v;
  std::size_t v_stride;
  float* out;
  std::size_t out_stride;
};

/// Query i sees keys [0, nk - nq + i] when causal, all nk keys otherwise,
/// minus those with key_mask[j] == 0. Returns multiply-adds performed.
inline std::uint64_t attend_head(const HeadView& h, std::size_t nq, std::size_t nk,
                                 std::size_t dh, bool causal,
                                 const std::uint8_t* key_mask, float scale,
                                 float* weights, std::vector<float>& scratch) {
  std::uint64_t madds = 0;
  scratch.resize(nk);
  float* s = scratch.data();
  for (std::size_t i = 0; i < nq; ++i) {
    const std::size_t limit = causal ? nk - nq + i + 1 : nk;
    std::fill(s, s + limit, 0.0f);
    const float* qi = h.q + i * h.q_stride;
    for (std::size_t c = 0; c < dh; ++c) {
      const float qc = qi[c];
      const float* kr = h.kt + c * h.kt_stride;
      for (std::size_t j = 0; j < limit; ++j) s[j] += qc * kr[j];
    }
    madds += static_cast<std::uint64_t>(dh) * limit;

    float mx = -std::numeric_limits<float>::infinity();
    std::size_t allowed = 0;
    for (std::size_t j = 0; j < limit; ++j) {
      if (key_mask && !key_mask[j]) continue;
      s[j] *= scale;
      mx = std::max(mx, s[j]);
      ++allowed;
    }
    if (allowed == 0) throw Error("attention: query row has no visible keys");
    float sum = 0.0f;
    for (std::size_t j = 0; j < limit; ++j) {
      if (key_mask && !key_mask[j]) {
        s[j] = 0.0f;
        continue;
      }
      s[j] = std::exp(s[j] - mx);
      sum += s[j];
    }
    for (std::size_t j = 0; j < limit; ++j) s[j] /= sum;

    float* oi = h.out + i * h.out_stride;
    std::fill(oi, oi + dh, 0.0f);
    for (std::size_t j = 0; j < limit; ++j) {
      if (key_mask && !key_mask[j]) continue;
      const float w = s[j];
      const float* vr = h.v + j * h.v_stride;
      for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vr[c];
    }
    madds += static_cast<std::uint64_t>(dh) * allowed;

    if (weights) {
      float* wr = weights + i * nk;
      std::copy(s, s + limit, wr);
      std::fill(wr + limit, wr + nk, 0.0f);
    }
  }
  return madds;
}

inline float attention_scale(std::size_t d_head) {
  return 1.0f / std::sqrt(static_cast<float>(d_head));
}

}  // namespace detail

struct AttentionResult {
  Tensor output;   ///< [nq, d]
  Tensor weights;  ///< [n_heads, nq, nk]; empty unless requested
};

/// Multi-head scaled dot-product attention over packed [len, d] inputs.
/// With `causal`, queries are aligned to the end of the key sequence, so a
/// query block can extend a longer cached key prefix.
inline AttentionResult attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                 std::size_t n_heads, bool causal,
                                 std::span<const std::uint8_t> key_mask = {},
                                 bool keep_weights = true) {
  detail::require_matrix(q, "attention");
  detail::require_matrix(k, "attention");
  detail::require_matrix(v, "attention");
  const std::size_t nq = q.rows(), nk = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != nk) {
    throw Error("attention shape mismatch: q " + shape_str(q.shape()) + ", k " +
                shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  if (n_heads == 0 || d % n_heads != 0) {
    throw Error("attention: width " + std::to_string(d) +
                " not divisible by heads " + std::to_string(n_heads));
  }
  if (causal && nk < nq) throw Error("attention: causal needs nk >= nq");
  if (!key_mask.empty() && key_mask.size() != nk) {
    throw Error("attention: key mask length mismatch");
  }
  const std::size_t dh = d / n_heads;
  AttentionResult res;
  res.output = Tensor({nq, d});
  if (keep_weights) res.weights = Tensor({n_heads, nq, nk});
  std::vector<float> kt(dh * nk);
  std::vector<float> scratch;
  std::uint64_t madds = 0;
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (std::size_t j = 0; j < nk; ++j)
      for (std::size_t c = 0; c < dh; ++c) kt[c * nk + j] = k[j * d + h * dh + c];
    detail::HeadView view{q.raw() + h * dh, d,  kt.data(),
                          nk,               v.raw() + h * dh, d,
                          res.output.raw() + h * dh, d};
    madds += detail::attend_head(
        view, nq, nk, dh, causal, key_mask.empty() ? nullptr : key_mask.data(),
        detail::attention_scale(dh),
        keep_weights ? res.weights.raw() + h * nq * nk : nullptr, scratch);
  }
  record_madds(madds);
  return res;
}

}  // namespace litevlm::nn
