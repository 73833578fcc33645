#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "litevlm/nn/kernels.hpp"
#include "litevlm/nn/tensor.hpp"

// Tape-free reverse-mode autodiff. Every op computes its value eagerly with
// the nn kernels; when any input requires a gradient the result also keeps
// its parents and a backward closure. Inference with frozen parameters
// therefore builds no graph at all.
namespace litevlm::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Tensor& g) {
    if (grad.empty()) {
      grad = g;
      return;
    }
    float* dst = grad.raw();
    const float* src = g.raw();
    for (std::size_t i = 0; i < grad.numel(); ++i) dst[i] += src[i];
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  const Tensor& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor(); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }

namespace detail {

inline Var make_result(Tensor value, std::vector<Var> parents,
                       std::function<void(Node&)> fn) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  Var out(std::move(value), rg);
  if (rg) {
    for (const auto& p : parents) out.node()->parents.push_back(p.node());
    out.node()->backward = std::move(fn);
  }
  return out;
}

inline void push(const std::shared_ptr<Node>& n, const Tensor& g) {
  if (n->requires_grad) n->accumulate(g);
}

}  // namespace detail

/// Back-propagates from a scalar (single-element) loss and releases the graph.
inline void backward(const Var& loss) {
  if (!loss.requires_grad()) throw Error("backward: loss does not require grad");
  if (loss.value().numel() != 1) throw Error("backward: loss must be a scalar");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  loss.node()->grad = Tensor(loss.shape(), 1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (Node* n : order) {
    if (n->backward) {
      n->backward = nullptr;
      n->parents.clear();
      n->grad = Tensor();
    }
  }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  auto an = a.node(), bn = b.node();
  return detail::make_result(nn::matmul(a.value(), b.value()), {a, b}, [an, bn](Node& self) {
    if (an->requires_grad) detail::push(an, nn::matmul_nt(self.grad, bn->value));
    if (bn->requires_grad) detail::push(bn, nn::matmul_tn(an->value, self.grad));
  });
}

inline Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw Error("add shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result(std::move(out), {a, b}, [an, bn](Node& self) {
    detail::push(an, self.grad);
    detail::push(bn, self.grad);
  });
}

/// x[n,m] + b[m] broadcast over rows.
inline Var add_bias(const Var& x, const Var& b) {
  const std::size_t n = x.rows(), m = x.cols();
  if (b.value().numel() != m) throw Error("add_bias: bias width mismatch");
  Tensor out = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += b.value()[j];
  auto xn = x.node(), bn = b.node();
  return detail::make_result(std::move(out), {x, b}, [xn, bn, n, m](Node& self) {
    detail::push(xn, self.grad);
    if (bn->requires_grad) {
      Tensor g(bn->value.shape());
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
      bn->accumulate(g);
    }
  });
}

inline Var linear(const Var& x, const Var& w, const Var& b) {
  return add_bias(matmul(x, w), b);
}

inline Var scale(const Var& x, float s) {
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
  auto xn = x.node();
  return detail::make_result(std::move(out), {x}, [xn, s](Node& self) {
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= s;
    detail::push(xn, g);
  });
}

inline Var layer_norm(const Var& x, const Var& gain, const Var& bias,
                      float eps = 1e-5f) {
  const std::size_t n = x.rows(), d = x.cols();
  if (gain.value().numel() != d || bias.value().numel() != d) {
    throw Error("layer_norm: parameter width mismatch");
  }
  Tensor out({n, d});
  Tensor xhat({n, d});
  std::vector<float> rstd(n);
  const float* xv = x.value().raw();
  const float* g = gain.value().raw();
  const float* b = bias.value().raw();
  for (std::size_t i = 0; i < n; ++i) {
    const float* r = xv + i * d;
    float mean = 0.0f;
    for (std::size_t j = 0; j < d; ++j) mean += r[j];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (std::size_t j = 0; j < d; ++j) var += (r[j] - mean) * (r[j] - mean);
    var /= static_cast<float>(d);
    rstd[i] = 1.0f / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const float h = (r[j] - mean) * rstd[i];
      xhat[i * d + j] = h;
      out[i * d + j] = h * g[j] + b[j];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return detail::make_result(
      std::move(out), {x, gain, bias},
      [xn, gn, bn, xhat = std::move(xhat), rstd = std::move(rstd), n, d](Node& self) {
        const float* dy = self.grad.raw();
        if (gn->requires_grad || bn->requires_grad) {
          Tensor dg(gn->value.shape()), db(bn->value.shape());
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
              dg[j] += dy[i * d + j] * xhat[i * d + j];
              db[j] += dy[i * d + j];
            }
          detail::push(gn, dg);
          detail::push(bn, db);
        }
        if (xn->requires_grad) {
          Tensor dx({n, d});
          const float* g = gn->value.raw();
          for (std::size_t i = 0; i < n; ++i) {
            float m1 = 0.0f, m2 = 0.0f;
            for (std::size_t j = 0; j < d; ++j) {
              const float dyh = dy[i * d + j] * g[j];
              m1 += dyh;
              m2 += dyh * xhat[i * d + j];
            }
            m1 /= static_cast<float>(d);
            m2 /= static_cast<float>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const float dyh = dy[i * d + j] * g[j];
              dx[i * d + j] = rstd[i] * (dyh - m1 - xhat[i * d + j] * m2);
            }
          }
          xn->accumulate(dx);
        }
      });
}

inline Var gelu(const Var& x) {
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = nn::gelu(out[i]);
  auto xn = x.node();
  return detail::make_result(std::move(out), {x}, [xn](Node& self) {
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= nn::gelu_grad(xn->value[i]);
    detail::push(xn, g);
  });
}

inline Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = nn::sigmoid(out[i]);
  auto xn = x.node();
  Tensor saved = out;
  return detail::make_result(std::move(out), {x}, [xn, saved = std::move(saved)](Node& self) {
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= saved[i] * (1.0f - saved[i]);
    detail::push(xn, g);
  });
}

/// Gathers rows of `table` ([V, d]) for each id.
inline Var embedding(const Var& table, std::span<const int> ids) {
  if (ids.empty()) throw Error("embedding: empty id list");
  const std::size_t vocab = table.rows(), d = table.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw Error("embedding: id " + std::to_string(ids[i]) + " out of range " +
                  std::to_string(vocab));
    }
    std::copy_n(table.value().raw() + static_cast<std::size_t>(ids[i]) * d, d,
                out.raw() + i * d);
  }
  auto tn = table.node();
  std::vector<int> saved(ids.begin(), ids.end());
  return detail::make_result(std::move(out), {table}, [tn, saved = std::move(saved), d](Node& self) {
    Tensor g(tn->value.shape());
    for (std::size_t i = 0; i < saved.size(); ++i) {
      float* dst = g.raw() + static_cast<std::size_t>(saved[i]) * d;
      const float* src = self.grad.raw() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
    tn->accumulate(g);
  });
}

/// Rows [begin, end) of x.
inline Var rows(const Var& x, std::size_t begin, std::size_t end) {
  Tensor out = slice_rows(x.value(), begin, end);
  auto xn = x.node();
  return detail::make_result(std::move(out), {x}, [xn, begin](Node& self) {
    Tensor g(xn->value.shape());
    std::copy(self.grad.data().begin(), self.grad.data().end(),
              g.raw() + begin * g.cols());
    xn->accumulate(g);
  });
}

inline Var gather_rows(const Var& x, std::span<const std::size_t> idx) {
  Tensor out = litevlm::gather_rows(x.value(), idx);
  auto xn = x.node();
  std::vector<std::size_t> saved(idx.begin(), idx.end());
  return detail::make_result(std::move(out), {x}, [xn, saved = std::move(saved)](Node& self) {
    Tensor g(xn->value.shape());
    const std::size_t d = g.cols();
    for (std::size_t i = 0; i < saved.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[saved[i] * d + j] += self.grad[i * d + j];
    xn->accumulate(g);
  });
}

inline Var concat_rows(std::span<const Var> parts) {
  std::vector<Tensor> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(p.value());
  Tensor out = litevlm::concat_rows(values);
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result(
      std::move(out), std::vector<Var>(parts.begin(), parts.end()),
      [nodes](Node& self) {
        std::size_t offset = 0;
        for (const auto& n : nodes) {
          const std::size_t r = n->value.rows();
          if (n->requires_grad) n->accumulate(slice_rows(self.grad, offset, offset + r));
          offset += r;
        }
      });
}

/// [n, da] ++ [n, db] -> [n, da + db]
inline Var concat_cols(const Var& a, const Var& b) {
  const std::size_t n = a.rows(), da = a.cols(), db = b.cols();
  if (b.rows() != n) throw Error("concat_cols: row mismatch");
  Tensor out({n, da + db});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().raw() + i * da, da, out.raw() + i * (da + db));
    std::copy_n(b.value().raw() + i * db, db, out.raw() + i * (da + db) + da);
  }
  auto an = a.node(), bn = b.node();
  return detail::make_result(std::move(out), {a, b}, [an, bn, n, da, db](Node& self) {
    Tensor ga({n, da}), gb({n, db});
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(self.grad.raw() + i * (da + db), da, ga.raw() + i * da);
      std::copy_n(self.grad.raw() + i * (da + db) + da, db, gb.raw() + i * db);
    }
    detail::push(an, ga);
    detail::push(bn, gb);
  });
}

/// Row-wise dot product: out[i] = a[i] . w[i]; shapes [n,d] x [n,d] -> [n,1].
inline Var rowwise_dot(const Var& a, const Var& w) {
  if (a.shape() != w.shape()) throw Error("rowwise_dot shape mismatch");
  const std::size_t n = a.rows(), d = a.cols();
  Tensor out({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    float s = 0.0f;
    for (std::size_t j = 0; j < d; ++j) s += a.value()[i * d + j] * w.value()[i * d + j];
    out[i] = s;
  }
  nn::record_madds(static_cast<std::uint64_t>(n) * d);
  auto an = a.node(), wn = w.node();
  return detail::make_result(std::move(out), {a, w}, [an, wn, n, d](Node& self) {
    Tensor ga({n, d}), gw({n, d});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        ga[i * d + j] = self.grad[i] * wn->value[i * d + j];
        gw[i * d + j] = self.grad[i] * an->value[i * d + j];
      }
    detail::push(an, ga);
    detail::push(wn, gw);
  });
}

struct AttentionOut {
  Var output;
  Tensor weights;  ///< [heads, nq, nk] when requested
};

inline AttentionOut multi_head_attention(const Var& q, const Var& k, const Var& v,
                                         std::size_t n_heads, bool causal,
                                         std::span<const std::uint8_t> key_mask = {},
                                         bool keep_weights = false) {
  const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  nn::AttentionResult r =
      nn::attention(q.value(), k.value(), v.value(), n_heads, causal, key_mask,
                    keep_weights || rg);
  AttentionOut out;
  auto qn = q.node(), kn = k.node(), vn = v.node();
  Tensor w = rg ? r.weights : Tensor();
  out.output = detail::make_result(
      std::move(r.output), {q, k, v},
      [qn, kn, vn, w = std::move(w), n_heads](Node& self) {
        const std::size_t nq = qn->value.rows(), nk = kn->value.rows();
        const std::size_t d = qn->value.cols(), dh = d / n_heads;
        const float sc = nn::detail::attention_scale(dh);
        Tensor dq({nq, d}), dk({nk, d}), dv({nk, d});
        std::vector<float> dw(nk);
        const float* Q = qn->value.raw();
        const float* K = kn->value.raw();
        const float* V = vn->value.raw();
        const float* dO = self.grad.raw();
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < nq; ++i) {
            const float* wi = w.raw() + (h * nq + i) * nk;
            const float* doi = dO + i * d + off;
            float dot = 0.0f;
            for (std::size_t j = 0; j < nk; ++j) {
              if (wi[j] == 0.0f) {
                dw[j] = 0.0f;
                continue;
              }
              float s = 0.0f;
              const float* vj = V + j * d + off;
              float* dvj = dv.raw() + j * d + off;
              for (std::size_t c = 0; c < dh; ++c) {
                s += doi[c] * vj[c];
                dvj[c] += wi[j] * doi[c];
              }
              dw[j] = s;
              dot += wi[j] * s;
            }
            float* dqi = dq.raw() + i * d + off;
            const float* qi = Q + i * d + off;
            for (std::size_t j = 0; j < nk; ++j) {
              if (wi[j] == 0.0f) continue;
              const float ds = wi[j] * (dw[j] - dot) * sc;
              const float* kj = K + j * d + off;
              float* dkj = dk.raw() + j * d + off;
              for (std::size_t c = 0; c < dh; ++c) {
                dqi[c] += ds * kj[c];
                dkj[c] += ds * qi[c];
              }
            }
          }
        }
        detail::push(qn, dq);
        detail::push(kn, dk);
        detail::push(vn, dv);
      });
  if (keep_weights) out.weights = std::move(r.weights);
  return out;
}

// ---------------------------------------------------------------------------
// Losses (scalar [1] outputs)
// ---------------------------------------------------------------------------

enum class Reduction { kSum, kMean };

/// Binary cross-entropy on logits against targets in [0, 1].
inline Var bce_with_logits(const Var& logits, const Tensor& targets,
                           Reduction red = Reduction::kMean) {
  const std::size_t n = logits.value().numel();
  if (targets.numel() != n) throw Error("bce_with_logits: target size mismatch");
  float loss = 0.0f;
  for (std::size_t i = 0; i < n; ++i) {
    const float z = logits.value()[i], y = targets[i];
    loss += std::max(z, 0.0f) - z * y + std::log1p(std::exp(-std::fabs(z)));
  }
  const float norm = red == Reduction::kMean ? 1.0f / static_cast<float>(n) : 1.0f;
  auto ln = logits.node();
  return detail::make_result(Tensor::vector({loss * norm}), {logits},
                             [ln, targets, norm, n](Node& self) {
                               Tensor g(ln->value.shape());
                               for (std::size_t i = 0; i < n; ++i)
                                 g[i] = (nn::sigmoid(ln->value[i]) - targets[i]) * norm *
                                        self.grad[0];
                               ln->accumulate(g);
                             });
}

/// Mean softmax cross-entropy of rows of `logits` ([n, V]) against ids.
inline Var cross_entropy(const Var& logits, std::span<const int> targets) {
  const std::size_t n = logits.rows(), vsz = logits.cols();
  if (targets.size() != n) throw Error("cross_entropy: target count mismatch");
  Tensor probs = nn::softmax(logits.value(), 1);
  float loss = 0.0f;
  for (std::size_t i = 0; i < n; ++i) {
    const float p = std::max(probs[i * vsz + static_cast<std::size_t>(targets[i])], 1e-30f);
    loss -= std::log(p);
  }
  const float norm = 1.0f / static_cast<float>(n);
  auto ln = logits.node();
  std::vector<int> t(targets.begin(), targets.end());
  return detail::make_result(Tensor::vector({loss * norm}), {logits},
                             [ln, probs = std::move(probs), t = std::move(t), n, vsz,
                              norm](Node& self) {
                               Tensor g = probs;
                               for (std::size_t i = 0; i < n; ++i)
                                 g[i * vsz + static_cast<std::size_t>(t[i])] -= 1.0f;
                               for (std::size_t i = 0; i < g.numel(); ++i)
                                 g[i] *= norm * self.grad[0];
                               ln->accumulate(g);
                             });
}

/// Mean squared error against a constant target.
inline Var mse(const Var& a, const Tensor& target) {
  const std::size_t n = a.value().numel();
  if (target.numel() != n) throw Error("mse: size mismatch");
  float loss = 0.0f;
  for (std::size_t i = 0; i < n; ++i) {
    const float diff = a.value()[i] - target[i];
    loss += diff * diff;
  }
  const float norm = 1.0f / static_cast<float>(n);
  auto an = a.node();
  return detail::make_result(Tensor::vector({loss * norm}), {a},
                             [an, target, n, norm](Node& self) {
                               Tensor g(an->value.shape());
                               for (std::size_t i = 0; i < n; ++i)
                                 g[i] = 2.0f * (an->value[i] - target[i]) * norm *
                                        self.grad[0];
                               an->accumulate(g);
                             });
}

}  // namespace litevlm::ag
