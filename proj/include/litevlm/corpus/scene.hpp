#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "litevlm/geometry.hpp"
#include "litevlm/nn/rng.hpp"
#include "litevlm/nn/tensor.hpp"

namespace litevlm::corpus {

enum class ObjectClass : std::uint8_t { kPedestrian = 0, kVehicle = 1, kSign = 2, kCone = 3 };
inline constexpr std::size_t kNumClasses = 4;
inline constexpr std::array<const char*, kNumClasses> kClassNames = {"pedestrian", "vehicle",
                                                                     "sign", "cone"};

/// Axis-aligned box in view pixels: x in [0, 896), y in [0, 448).
struct Box {
  std::uint32_t x = 0, y = 0, w = 0, h = 0;
  bool operator==(const Box&) const = default;
};

struct SceneObject {
  ObjectClass cls = ObjectClass::kPedestrian;
  Box box;
  std::array<float, 3> color{};
  bool operator==(const SceneObject&) const = default;
};

struct SceneSpec {
  std::uint32_t scene_id = 0;
  std::uint64_t seed = 0;
  std::array<std::vector<SceneObject>, geometry::kNumViews> views;

  bool operator==(const SceneSpec&) const = default;

  std::size_t count(ObjectClass cls, int view) const {
    return static_cast<std::size_t>(std::count_if(
        views.at(static_cast<std::size_t>(view)).begin(),
        views.at(static_cast<std::size_t>(view)).end(),
        [cls](const SceneObject& o) { return o.cls == cls; }));
  }
};

inline constexpr std::size_t kMaxObjectsPerView = 4;

inline std::array<float, 3> class_color(ObjectClass cls) {
  switch (cls) {
    case ObjectClass::kPedestrian: return {0.85f, 0.20f, 0.20f};
    case ObjectClass::kVehicle: return {0.20f, 0.35f, 0.85f};
    case ObjectClass::kSign: return {0.90f, 0.85f, 0.15f};
    case ObjectClass::kCone: return {0.95f, 0.55f, 0.10f};
  }
  return {0.5f, 0.5f, 0.5f};
}

inline std::array<float, 3> background_color(int view_id) {
  const float v = static_cast<float>(view_id);
  return {0.30f + 0.04f * v, 0.32f, 0.40f - 0.03f * v};
}

inline bool box_in_view(const Box& b) {
  return b.w > 0 && b.h > 0 && b.x + b.w <= geometry::kViewWidth &&
         b.y + b.h <= geometry::kViewHeight;
}

/// Objects per view ~ U{0..4}; classes uniform; sizes 24..192 x 24..160 px.
inline SceneSpec gen_scene(std::uint64_t seed, std::uint32_t scene_id = 0) {
  SceneSpec spec;
  spec.scene_id = scene_id;
  spec.seed = seed;
  const CounterRng root = CounterRng(seed).split("scene");
  for (std::size_t v = 0; v < geometry::kNumViews; ++v) {
    CounterRng rng = root.split(v);
    const auto n = static_cast<std::size_t>(rng.uniform_int(0, kMaxObjectsPerView));
    for (std::size_t i = 0; i < n; ++i) {
      SceneObject o;
      o.cls = static_cast<ObjectClass>(rng.uniform_int(0, kNumClasses - 1));
      o.box.w = static_cast<std::uint32_t>(rng.uniform_int(24, 192));
      o.box.h = static_cast<std::uint32_t>(rng.uniform_int(24, 160));
      o.box.x = static_cast<std::uint32_t>(rng.uniform_int(0, geometry::kViewWidth - o.box.w));
      o.box.y = static_cast<std::uint32_t>(rng.uniform_int(0, geometry::kViewHeight - o.box.h));
      const auto base = class_color(o.cls);
      for (std::size_t c = 0; c < 3; ++c) {
        const float jitter = (rng.next_float() - 0.5f) * 0.16f;
        o.color[c] = std::clamp(base[c] + jitter, 0.0f, 1.0f);
      }
      spec.views[v].push_back(o);
    }
  }
  return spec;
}

struct ViewImage {
  int view_id = 0;
  Tensor pixels;  ///< [3, 448, 896], values in [0, 1]
};

/// Flat per-view background with solid rectangles painted in object order.
inline ViewImage render_view(const SceneSpec& spec, int view_id) {
  using namespace geometry;
  if (view_id < 0 || view_id >= static_cast<int>(kNumViews)) throw Error("render_view: bad view id");
  ViewImage img{view_id, Tensor({kChannels, kViewHeight, kViewWidth})};
  const auto bg = background_color(view_id);
  const std::size_t plane = kViewHeight * kViewWidth;
  for (std::size_t c = 0; c < kChannels; ++c)
    std::fill_n(img.pixels.raw() + c * plane, plane, bg[c]);
  for (const auto& o : spec.views[static_cast<std::size_t>(view_id)]) {
    for (std::size_t c = 0; c < kChannels; ++c) {
      float* p = img.pixels.raw() + c * plane;
      for (std::size_t y = o.box.y; y < o.box.y + o.box.h; ++y)
        std::fill_n(p + y * kViewWidth + o.box.x, o.box.w, o.color[c]);
    }
  }
  return img;
}

inline std::vector<ViewImage> render_all(const SceneSpec& spec) {
  std::vector<ViewImage> out;
  for (int v = 0; v < static_cast<int>(geometry::kNumViews); ++v) out.push_back(render_view(spec, v));
  return out;
}

}  // namespace litevlm::corpus
