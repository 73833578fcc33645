#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "litevlm/corpus/scene.hpp"
#include "litevlm/geometry.hpp"
#include "litevlm/nn/autograd.hpp"
#include "litevlm/nn/kernels.hpp"
#include "litevlm/nn/params.hpp"
#include "litevlm/nn/transformer.hpp"

namespace litevlm::vision {

using corpus::ViewImage;
using geometry::PatchMask;

struct CompositeImage {
  Tensor pixels;  ///< [3, 896, 2688]
};

/// Places the six views into the 2x3 grid (row 0: 1,0,2; row 1: 4,3,5).
inline CompositeImage stitch_views(std::span<const ViewImage> views) {
  using namespace geometry;
  std::array<const ViewImage*, kNumViews> by_id{};
  for (const auto& v : views) {
    if (v.view_id < 0 || v.view_id >= static_cast<int>(kNumViews)) {
      throw Error("stitch_views: bad view id " + std::to_string(v.view_id));
    }
    if (v.pixels.shape() != Shape{kChannels, kViewHeight, kViewWidth}) {
      throw Error("stitch_views: view " + std::to_string(v.view_id) + " has shape " +
                  shape_str(v.pixels.shape()));
    }
    by_id[static_cast<std::size_t>(v.view_id)] = &v;
  }
  CompositeImage out{Tensor({kChannels, kCompositeHeight, kCompositeWidth})};
  for (std::size_t id = 0; id < kNumViews; ++id) {
    if (!by_id[id]) throw Error("stitch_views: missing view " + std::to_string(id));
    const auto [oy, ox] = view_origin(static_cast<int>(id));
    for (std::size_t c = 0; c < kChannels; ++c)
      for (std::size_t y = 0; y < kViewHeight; ++y)
        std::copy_n(by_id[id]->pixels.raw() + (c * kViewHeight + y) * kViewWidth, kViewWidth,
                    out.pixels.raw() + (c * kCompositeHeight + oy + y) * kCompositeWidth + ox);
  }
  return out;
}

/// Copies the block of one view back out of the composite.
inline ViewImage view_region(const CompositeImage& comp, int view_id) {
  using namespace geometry;
  const auto [oy, ox] = view_origin(view_id);
  ViewImage out{view_id, Tensor({kChannels, kViewHeight, kViewWidth})};
  for (std::size_t c = 0; c < kChannels; ++c)
    for (std::size_t y = 0; y < kViewHeight; ++y)
      std::copy_n(comp.pixels.raw() + (c * kCompositeHeight + oy + y) * kCompositeWidth + ox,
                  kViewWidth, out.pixels.raw() + (c * kViewHeight + y) * kViewWidth);
  return out;
}

/// Composite pixel rectangle (top, left) of a patch slot.
inline std::array<std::size_t, 2> slot_origin(std::size_t slot) {
  const geometry::SlotInfo si = geometry::slot_info(slot);
  return {si.grid_row * geometry::kPatchSize, si.grid_col * geometry::kPatchSize};
}

/// Selected 448x448 patches in canonical slot order.
inline std::vector<Tensor> extract_patches(const CompositeImage& comp, const PatchMask& mask) {
  using namespace geometry;
  if (mask.popcount() == 0) throw Error("extract_patches: empty patch mask");
  std::vector<Tensor> out;
  for (std::size_t s : mask.slots()) {
    const auto [oy, ox] = slot_origin(s);
    Tensor p({kChannels, kPatchSize, kPatchSize});
    for (std::size_t c = 0; c < kChannels; ++c)
      for (std::size_t y = 0; y < kPatchSize; ++y)
        std::copy_n(comp.pixels.raw() + (c * kCompositeHeight + oy + y) * kCompositeWidth + ox,
                    kPatchSize, p.raw() + (c * kPatchSize + y) * kPatchSize);
    out.push_back(std::move(p));
  }
  return out;
}

/// Flattens a [3, 448, 448] patch into 1024 rows of 14x14x3 tiles, tiles in
/// raster order and features ordered (channel, y, x).
inline Tensor patch_tiles(const Tensor& patch) {
  using namespace geometry;
  if (patch.shape() != Shape{kChannels, kPatchSize, kPatchSize}) {
    throw Error("patch_tiles: expected [3,448,448], got " + shape_str(patch.shape()));
  }
  Tensor out({kTilesPerPatch, kTileDim});
  for (std::size_t ty = 0; ty < kTilesPerSide; ++ty)
    for (std::size_t tx = 0; tx < kTilesPerSide; ++tx) {
      float* dst = out.raw() + (ty * kTilesPerSide + tx) * kTileDim;
      for (std::size_t c = 0; c < kChannels; ++c)
        for (std::size_t py = 0; py < kTileSize; ++py)
          for (std::size_t px = 0; px < kTileSize; ++px)
            *dst++ = patch[(c * kPatchSize + ty * kTileSize + py) * kPatchSize + tx * kTileSize + px];
    }
  return out;
}

/// Merges each factor x factor neighborhood of a square token grid by channel
/// concatenation (neighbors in raster order): [g*g, d] -> [(g/f)^2, f*f*d].
inline Tensor pixel_shuffle(const Tensor& tokens, std::size_t factor) {
  const std::size_t n = tokens.rows(), d = tokens.cols();
  std::size_t g = 0;
  while (g * g < n) ++g;
  if (g * g != n) throw Error("pixel_shuffle: token count " + std::to_string(n) + " is not a square grid");
  if (factor == 0 || g % factor != 0) throw Error("pixel_shuffle: grid not divisible by factor");
  const std::size_t go = g / factor;
  Tensor out({go * go, factor * factor * d});
  for (std::size_t r = 0; r < go; ++r)
    for (std::size_t c = 0; c < go; ++c) {
      float* dst = out.raw() + (r * go + c) * factor * factor * d;
      for (std::size_t dy = 0; dy < factor; ++dy)
        for (std::size_t dx = 0; dx < factor; ++dx) {
          const std::size_t src = (r * factor + dy) * g + c * factor + dx;
          std::copy_n(tokens.raw() + src * d, d, dst);
          dst += d;
        }
    }
  return out;
}

/// Pixel shuffle followed by the projection back to the model width.
inline Tensor pixel_shuffle_reduce(const Tensor& tokens, std::size_t factor, const Tensor& w,
                                   const Tensor& b) {
  const Tensor merged = pixel_shuffle(tokens, factor);
  Tensor out = nn::matmul(merged, w);
  if (b.numel() != out.cols()) throw Error("pixel_shuffle_reduce: bias width mismatch");
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out.at(i, j) += b[j];
  return out;
}

struct VitConfig {
  nn::ModelConfig model{64, 4, 4, 256, 8, geometry::kTilesPerPatch, 7};
  std::size_t d_llm = 64;  ///< output width of the alignment MLP

  void validate() const {
    model.validate();
    if (model.max_seq < geometry::kTilesPerPatch) throw Error("VitConfig: max_seq below 1024 tiles");
    if (d_llm == 0) throw Error("VitConfig: d_llm must be positive");
  }
  bool operator==(const VitConfig&) const = default;
};

/// Parameters under "vit.": tile embedding, positions, encoder layers, final
/// norm, the pixel-shuffle projection and the two-layer alignment MLP.
inline nn::ParamSet init_vision_params(const VitConfig& cfg) {
  cfg.validate();
  const auto& m = cfg.model;
  nn::ParamSet ps;
  nn::init_linear(ps, m.seed, "vit.patch_embed.w", "vit.patch_embed.b", geometry::kTileDim, m.d_model);
  ps.set("vit.pos_emb", nn::seeded_tensor(m.seed, "vit.pos_emb", {geometry::kTilesPerPatch, m.d_model}, 0.1f));
  for (std::size_t l = 0; l < m.n_layers; ++l)
    nn::init_transformer_layer(ps, m, "vit.layer" + std::to_string(l));
  nn::init_layer_norm(ps, "vit.ln_f", m.d_model);
  const std::size_t ff = geometry::kShuffleFactor * geometry::kShuffleFactor;
  nn::init_linear(ps, m.seed, "vit.shuffle.w", "vit.shuffle.b", ff * m.d_model, m.d_model);
  nn::init_linear(ps, m.seed, "vit.align.w1", "vit.align.b1", m.d_model, cfg.d_llm);
  nn::init_linear(ps, m.seed, "vit.align.w2", "vit.align.b2", cfg.d_llm, cfg.d_llm);
  return ps;
}

/// Closed-form multiply-adds to encode one patch.
inline std::uint64_t vit_patch_madds(const VitConfig& cfg) {
  const std::uint64_t n = geometry::kTilesPerPatch, t = geometry::kTokensPerPatch;
  const std::uint64_t d = cfg.model.d_model, ff = cfg.model.d_ff, dl = cfg.d_llm;
  const std::uint64_t f2 = geometry::kShuffleFactor * geometry::kShuffleFactor;
  const std::uint64_t layer = 4 * n * d * d + 2 * n * n * d + 2 * n * d * ff;
  return n * geometry::kTileDim * d + cfg.model.n_layers * layer + t * f2 * d * d +
         t * (d * dl + dl * dl);
}

struct TokenOrigin {
  int view_id = 0;
  std::size_t patch_index = 0;
  std::size_t row = 0;  ///< token-grid row within the patch, 0..15
  std::size_t col = 0;
  bool operator==(const TokenOrigin&) const = default;
};

struct VisualTokens {
  Tensor tokens;                     ///< [n_patches * 256, d_llm]
  std::vector<TokenOrigin> origin;   ///< one entry per token row
  std::vector<std::size_t> slots;    ///< encoded slots, canonical order
};

/// Toy ViT: every patch is encoded on its own (no cross-patch attention), so
/// cost is exactly linear in the number of patches.
class VisionEncoder {
 public:
  VisionEncoder(VitConfig cfg, nn::ParamSet params) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    for (const char* n : {"vit.patch_embed.w", "vit.pos_emb", "vit.shuffle.w", "vit.align.w1"})
      params_.get(n);
  }

  const VitConfig& config() const { return cfg_; }
  const nn::ParamSet& params() const { return params_; }

  /// [3, 448, 448] patch -> [256, d_llm] aligned visual tokens.
  Tensor encode_patch(const Tensor& patch) const {
    auto p = [&](const std::string& n) -> const ag::Var& { return params_.get(n); };
    ag::Var x = ag::linear(ag::constant(patch_tiles(patch)), p("vit.patch_embed.w"), p("vit.patch_embed.b"));
    x = ag::add(x, p("vit.pos_emb"));
    for (std::size_t l = 0; l < cfg_.model.n_layers; ++l)
      x = nn::decoder_layer_forward(x, params_, "vit.layer" + std::to_string(l), cfg_.model, nullptr, 0,
                                    false).hidden;
    x = ag::layer_norm(x, p("vit.ln_f.g"), p("vit.ln_f.b"));
    const Tensor reduced = pixel_shuffle_reduce(x.value(), geometry::kShuffleFactor,
                                                p("vit.shuffle.w").value(), p("vit.shuffle.b").value());
    ag::Var a = ag::gelu(ag::linear(ag::constant(reduced), p("vit.align.w1"), p("vit.align.b1")));
    return ag::linear(a, p("vit.align.w2"), p("vit.align.b2")).value();
  }

  /// Encodes patches given in canonical slot order; `slots[i]` names patch i.
  VisualTokens encode(std::span<const Tensor> patches, std::span<const std::size_t> slots) const {
    if (patches.empty()) throw Error("vit_encode: need at least one patch");
    if (patches.size() != slots.size()) throw Error("vit_encode: patch/slot count mismatch");
    VisualTokens out;
    std::vector<Tensor> blocks;
    for (std::size_t i = 0; i < patches.size(); ++i) {
      if (i > 0 && slots[i] <= slots[i - 1]) throw Error("vit_encode: slots must be increasing");
      blocks.push_back(encode_patch(patches[i]));
      const geometry::SlotInfo si = geometry::slot_info(slots[i]);
      for (std::size_t r = 0; r < geometry::kTokenGrid; ++r)
        for (std::size_t c = 0; c < geometry::kTokenGrid; ++c)
          out.origin.push_back({si.view_id, si.patch_index, r, c});
      out.slots.push_back(slots[i]);
    }
    out.tokens = concat_rows(blocks);
    return out;
  }

 private:
  VitConfig cfg_;
  nn::ParamSet params_;
};

/// Pixel rectangle (in view coordinates) covered by one post-shuffle token.
inline corpus::Box token_footprint(const TokenOrigin& o) {
  const auto fp = static_cast<std::uint32_t>(geometry::kTokenFootprint);
  return {static_cast<std::uint32_t>(o.patch_index * geometry::kPatchSize + o.col * geometry::kTokenFootprint),
          static_cast<std::uint32_t>(o.row * geometry::kTokenFootprint), fp, fp};
}

}  // namespace litevlm::vision
