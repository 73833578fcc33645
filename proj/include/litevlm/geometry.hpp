#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "litevlm/nn/tensor.hpp"

// Fixed multi-view layout: six 448x896 camera views stitched into a 2x3
// composite and cut into twelve 448x448 patch slots (two per view).
namespace litevlm::geometry {

inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kNumViews = 6;
inline constexpr std::size_t kViewHeight = 448;
inline constexpr std::size_t kViewWidth = 896;
inline constexpr std::size_t kPatchSize = 448;
inline constexpr std::size_t kPatchesPerView = kViewWidth / kPatchSize;
inline constexpr std::size_t kNumSlots = kNumViews * kPatchesPerView;  // 12
inline constexpr std::size_t kGridRows = 2;
inline constexpr std::size_t kGridViewCols = 3;
inline constexpr std::size_t kGridSlotCols = kGridViewCols * kPatchesPerView;  // 6
inline constexpr std::size_t kCompositeHeight = kGridRows * kViewHeight;       // 896
inline constexpr std::size_t kCompositeWidth = kGridViewCols * kViewWidth;     // 2688

inline constexpr std::size_t kTileSize = 14;
inline constexpr std::size_t kTilesPerSide = kPatchSize / kTileSize;  // 32
inline constexpr std::size_t kTilesPerPatch = kTilesPerSide * kTilesPerSide;
inline constexpr std::size_t kTileDim = kChannels * kTileSize * kTileSize;  // 588
inline constexpr std::size_t kShuffleFactor = 2;
inline constexpr std::size_t kTokenGrid = kTilesPerSide / kShuffleFactor;  // 16
inline constexpr std::size_t kTokensPerPatch = kTokenGrid * kTokenGrid;    // 256
inline constexpr std::size_t kTokenFootprint = kTileSize * kShuffleFactor; // 28

/// View ids: 0 front, 1 front-left, 2 front-right, 3 back, 4 back-left, 5 back-right.
/// Composite rows: [front-left, front, front-right] over [back-left, back, back-right].
inline constexpr std::array<std::array<int, kGridViewCols>, kGridRows> kLayout = {{
    {1, 0, 2},
    {4, 3, 5},
}};

struct SlotInfo {
  int view_id;
  std::size_t patch_index;  ///< 0 = left half of the view, 1 = right half
  std::size_t grid_row;
  std::size_t grid_col;     ///< slot column in the 2x6 patch grid
};

inline SlotInfo slot_info(std::size_t slot) {
  if (slot >= kNumSlots) throw Error("patch slot out of range");
  const std::size_t r = slot / kGridSlotCols, c = slot % kGridSlotCols;
  return {kLayout[r][c / kPatchesPerView], c % kPatchesPerView, r, c};
}

/// Canonical slot of (view, patch_index).
inline std::size_t slot_of(int view_id, std::size_t patch_index) {
  for (std::size_t s = 0; s < kNumSlots; ++s) {
    const SlotInfo si = slot_info(s);
    if (si.view_id == view_id && si.patch_index == patch_index) return s;
  }
  throw Error("no slot for view " + std::to_string(view_id));
}

/// Upper-left composite pixel of the view's block.
inline std::array<std::size_t, 2> view_origin(int view_id) {
  for (std::size_t r = 0; r < kGridRows; ++r)
    for (std::size_t c = 0; c < kGridViewCols; ++c)
      if (kLayout[r][c] == view_id) return {r * kViewHeight, c * kViewWidth};
  throw Error("bad view id " + std::to_string(view_id));
}

/// Per-slot selection bits in canonical slot order, with the view scores and
/// threshold they were derived from.
struct PatchMask {
  std::array<bool, kNumSlots> bits{};
  std::array<float, kNumViews> view_scores{};
  float threshold = 0.0f;
  bool fallback_used = false;

  static PatchMask all() {
    PatchMask m;
    m.bits.fill(true);
    return m;
  }

  std::size_t popcount() const {
    std::size_t n = 0;
    for (bool b : bits) n += b ? 1 : 0;
    return n;
  }

  std::vector<std::size_t> slots() const {
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < kNumSlots; ++s)
      if (bits[s]) out.push_back(s);
    return out;
  }
};

}  // namespace litevlm::geometry
