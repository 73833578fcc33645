#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <exception>
#include <thread>
#include <vector>

#include "litevlm/corpus/query.hpp"
#include "litevlm/corpus/scene.hpp"

namespace litevlm::corpus {

/// Scenes plus the query samples drawn on them. Samples reference scenes by id.
struct Corpus {
  std::vector<SceneSpec> scenes;
  std::vector<QuerySample> samples;
  bool images_included = false;
  std::vector<std::vector<ViewImage>> images;  ///< parallel to `scenes` when included

  const SceneSpec& scene(std::uint32_t scene_id) const {
    auto it = std::lower_bound(scenes.begin(), scenes.end(), scene_id,
                               [](const SceneSpec& s, std::uint32_t id) { return s.scene_id < id; });
    if (it == scenes.end() || it->scene_id != scene_id) {
      throw Error("corpus: no scene with id " + std::to_string(scene_id));
    }
    return *it;
  }

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

struct CorpusOptions {
  std::size_t n_scenes = 100;
  std::size_t queries_per_scene = 10;
  std::uint64_t seed = 7;
  std::uint64_t split_seed = 7;
  double val_fraction = 0.1;
  std::size_t threads = 1;
  bool include_images = false;
};

struct CorpusSplit {
  Corpus train;
  Corpus val;
};

/// Validation scene count: round(n * fraction), kept within [1, n - 1].
inline std::size_t val_scene_count(std::size_t n_scenes, double fraction) {
  const auto v = static_cast<std::size_t>(std::llround(static_cast<double>(n_scenes) * fraction));
  return std::clamp<std::size_t>(v, 1, n_scenes - 1);
}

namespace detail {

template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct SceneBundle {
  SceneSpec spec;
  std::vector<QuerySample> samples;
};

inline SceneBundle gen_bundle(const CorpusOptions& opt, std::uint32_t scene_id) {
  const CounterRng root(opt.seed);
  SceneBundle b;
  b.spec = gen_scene(root.split("scene-seed").at(scene_id), scene_id);
  CounterRng qrng = root.split("queries").split(scene_id);
  const auto& table = TemplateTable::builtin();
  for (std::size_t q = 0; q < opt.queries_per_scene; ++q) {
    const int tid = static_cast<int>(qrng.uniform_int(0, static_cast<std::int64_t>(table.size()) - 1));
    b.samples.push_back(gen_query(b.spec, tid, qrng.next_u64(), table));
  }
  return b;
}

}  // namespace detail

/// Generates `n_scenes` scenes with `queries_per_scene` queries each and splits
/// them by scene: no scene contributes samples to both halves. Output order is
/// by scene id regardless of the thread count.
inline CorpusSplit build_corpus(const CorpusOptions& opt) {
  if (opt.n_scenes < 2) throw Error("build_corpus: need at least 2 scenes");
  if (opt.queries_per_scene < 1) throw Error("build_corpus: need at least 1 query per scene");
  std::vector<detail::SceneBundle> bundles(opt.n_scenes);
  detail::parallel_for(opt.n_scenes, opt.threads, [&](std::size_t i) {
    bundles[i] = detail::gen_bundle(opt, static_cast<std::uint32_t>(i));
  });

  std::vector<std::uint32_t> order(opt.n_scenes);
  std::iota(order.begin(), order.end(), 0u);
  CounterRng srng = CounterRng(opt.split_seed).split("split");
  for (std::size_t i = order.size() - 1; i > 0; --i) {  // Fisher-Yates
    const auto j = static_cast<std::size_t>(srng.uniform_int(0, static_cast<std::int64_t>(i)));
    std::swap(order[i], order[j]);
  }
  std::vector<std::uint8_t> is_val(opt.n_scenes, 0);
  const std::size_t n_val = val_scene_count(opt.n_scenes, opt.val_fraction);
  for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = 1;

  CorpusSplit split;
  split.train.images_included = split.val.images_included = opt.include_images;
  for (std::size_t i = 0; i < opt.n_scenes; ++i) {
    Corpus& dst = is_val[i] ? split.val : split.train;
    if (opt.include_images) dst.images.push_back(render_all(bundles[i].spec));
    dst.scenes.push_back(std::move(bundles[i].spec));
    for (auto& s : bundles[i].samples) dst.samples.push_back(std::move(s));
  }
  return split;
}

// Binary layout (little-endian):
//   "LVCS", u32 version, u32 flags (bit 0: images), u32 scene count, u32 sample count
//   per scene:  u32 record bytes, then scene_id u32, seed u64, per view u32 n + n objects
//               (u8 class, u32 x y w h, f32 rgb); with images, 6 raw f32 planes [3,448,896]
//   per sample: u32 record bytes, then scene_id u32, template_id i32, seed u64, u8 explicit,
//               u8 labels[6], u32 len + raw text, u32 n + i32 answer ids
namespace detail {

inline constexpr char kCorpusMagic[4] = {'L', 'V', 'C', 'S'};
inline constexpr std::uint32_t kCorpusVersion = 1;

class Writer {
 public:
  template <class T>
  void put(const T& v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void put_bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  std::string& str() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  template <class T>
  T get() {
    T v;
    get_bytes(&v, sizeof(T));
    return v;
  }
  void get_bytes(void* dst, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw Error("corpus file truncated");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline void put_record(Writer& out, const std::string& rec) {
  out.put(static_cast<std::uint32_t>(rec.size()));
  out.put_bytes(rec.data(), rec.size());
}

}  // namespace detail

inline std::string serialize_corpus(const Corpus& c) {
  detail::Writer w;
  w.put_bytes(detail::kCorpusMagic, 4);
  w.put(detail::kCorpusVersion);
  w.put(static_cast<std::uint32_t>(c.images_included ? 1 : 0));
  w.put(static_cast<std::uint32_t>(c.scenes.size()));
  w.put(static_cast<std::uint32_t>(c.samples.size()));
  for (std::size_t s = 0; s < c.scenes.size(); ++s) {
    const SceneSpec& spec = c.scenes[s];
    detail::Writer r;
    r.put(spec.scene_id);
    r.put(spec.seed);
    for (const auto& view : spec.views) {
      r.put(static_cast<std::uint32_t>(view.size()));
      for (const auto& o : view) {
        r.put(static_cast<std::uint8_t>(o.cls));
        r.put(o.box.x);
        r.put(o.box.y);
        r.put(o.box.w);
        r.put(o.box.h);
        for (float v : o.color) r.put(v);
      }
    }
    if (c.images_included) {
      for (const auto& img : c.images.at(s))
        r.put_bytes(img.pixels.raw(), img.pixels.numel() * sizeof(float));
    }
    detail::put_record(w, r.str());
  }
  for (const auto& q : c.samples) {
    detail::Writer r;
    r.put(q.scene_id);
    r.put(static_cast<std::int32_t>(q.template_id));
    r.put(q.seed);
    r.put(static_cast<std::uint8_t>(q.is_explicit));
    for (auto b : q.view_labels) r.put(b);
    r.put(static_cast<std::uint32_t>(q.raw.size()));
    r.put_bytes(q.raw.data(), q.raw.size());
    r.put(static_cast<std::uint32_t>(q.answer_ids.size()));
    for (int id : q.answer_ids) r.put(static_cast<std::int32_t>(id));
    detail::put_record(w, r.str());
  }
  return std::move(w.str());
}

inline Corpus deserialize_corpus(std::string_view bytes) {
  detail::Reader in(bytes);
  char magic[4];
  in.get_bytes(magic, 4);
  if (std::memcmp(magic, detail::kCorpusMagic, 4) != 0) throw Error("bad corpus file magic");
  const auto version = in.get<std::uint32_t>();
  if (version != detail::kCorpusVersion) {
    throw Error("unsupported corpus version " + std::to_string(version));
  }
  Corpus c;
  c.images_included = (in.get<std::uint32_t>() & 1u) != 0;
  const auto n_scenes = in.get<std::uint32_t>();
  const auto n_samples = in.get<std::uint32_t>();
  auto check_len = [&](std::size_t start, std::uint32_t len) {
    if (in.pos() - start != len) throw Error("corpus record length mismatch");
  };
  for (std::uint32_t s = 0; s < n_scenes; ++s) {
    const auto len = in.get<std::uint32_t>();
    const std::size_t start = in.pos();
    SceneSpec spec;
    spec.scene_id = in.get<std::uint32_t>();
    spec.seed = in.get<std::uint64_t>();
    for (auto& view : spec.views) {
      const auto n = in.get<std::uint32_t>();
      if (n > 1024) throw Error("corpus: implausible object count");
      for (std::uint32_t i = 0; i < n; ++i) {
        SceneObject o;
        const auto cls = in.get<std::uint8_t>();
        if (cls >= kNumClasses) throw Error("corpus: bad object class");
        o.cls = static_cast<ObjectClass>(cls);
        o.box.x = in.get<std::uint32_t>();
        o.box.y = in.get<std::uint32_t>();
        o.box.w = in.get<std::uint32_t>();
        o.box.h = in.get<std::uint32_t>();
        if (!box_in_view(o.box)) throw Error("corpus: box outside view bounds");
        for (float& v : o.color) v = in.get<float>();
        view.push_back(o);
      }
    }
    if (c.images_included) {
      std::vector<ViewImage> imgs;
      for (int v = 0; v < static_cast<int>(geometry::kNumViews); ++v) {
        ViewImage img{v, Tensor({geometry::kChannels, geometry::kViewHeight, geometry::kViewWidth})};
        in.get_bytes(img.pixels.raw(), img.pixels.numel() * sizeof(float));
        imgs.push_back(std::move(img));
      }
      c.images.push_back(std::move(imgs));
    }
    check_len(start, len);
    if (!c.scenes.empty() && c.scenes.back().scene_id >= spec.scene_id) {
      throw Error("corpus: scene ids must be strictly increasing");
    }
    c.scenes.push_back(std::move(spec));
  }
  for (std::uint32_t s = 0; s < n_samples; ++s) {
    const auto len = in.get<std::uint32_t>();
    const std::size_t start = in.pos();
    QuerySample q;
    q.scene_id = in.get<std::uint32_t>();
    q.template_id = in.get<std::int32_t>();
    q.seed = in.get<std::uint64_t>();
    q.is_explicit = in.get<std::uint8_t>() != 0;
    for (auto& b : q.view_labels) b = in.get<std::uint8_t>();
    q.raw.resize(in.get<std::uint32_t>());
    in.get_bytes(q.raw.data(), q.raw.size());
    const auto n = in.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) q.answer_ids.push_back(in.get<std::int32_t>());
    check_len(start, len);
    c.samples.push_back(std::move(q));
  }
  if (!in.done()) throw Error("trailing bytes in corpus file");
  return c;
}

inline void write_corpus(const Corpus& c, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write corpus file '" + path + "'");
  const std::string bytes = serialize_corpus(c);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("failed writing corpus file '" + path + "'");
}

inline Corpus read_corpus(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open corpus file '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize_corpus(ss.str());
}

/// Views of a scene: stored planes when the corpus carries them, else a
/// deterministic re-render.
inline std::vector<ViewImage> scene_images(const Corpus& c, std::uint32_t scene_id) {
  if (c.images_included) {
    for (std::size_t i = 0; i < c.scenes.size(); ++i)
      if (c.scenes[i].scene_id == scene_id) return c.images.at(i);
  }
  return render_all(c.scene(scene_id));
}

}  // namespace litevlm::corpus
