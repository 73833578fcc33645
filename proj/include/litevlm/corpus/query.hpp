#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "litevlm/corpus/scene.hpp"
#include "litevlm/resources.hpp"
#include "litevlm/text/vocab.hpp"

namespace litevlm::corpus {

enum class TemplateKind { kExplicit, kImplicit, kGlobal };

struct QueryTemplate {
  int id = 0;
  TemplateKind kind = TemplateKind::kExplicit;
  std::string text;          ///< may contain "{view}" (explicit kind)
  std::vector<int> views;    ///< fixed labels for implicit templates
  std::string answer;        ///< answer rule: objects | count:<cls> | exists:<cls> | clear
};

class TemplateTable {
 public:
  static TemplateTable from_json(std::string_view json_text) {
    const auto j = nlohmann::json::parse(json_text);
    TemplateTable t;
    t.view_phrases_ = j.at("view_phrases").get<std::vector<std::string>>();
    for (const auto& e : j.at("templates")) {
      QueryTemplate q;
      q.id = e.at("id").get<int>();
      const auto kind = e.at("kind").get<std::string>();
      if (kind == "explicit") q.kind = TemplateKind::kExplicit;
      else if (kind == "implicit") q.kind = TemplateKind::kImplicit;
      else if (kind == "global") q.kind = TemplateKind::kGlobal;
      else throw Error("template table: unknown kind '" + kind + "'");
      q.text = e.at("text").get<std::string>();
      if (e.contains("views")) q.views = e.at("views").get<std::vector<int>>();
      q.answer = e.at("answer").get<std::string>();
      if (q.id != static_cast<int>(t.templates_.size())) {
        throw Error("template table: ids must be dense and ordered");
      }
      t.templates_.push_back(std::move(q));
    }
    return t;
  }

  static const TemplateTable& builtin() {
    static const TemplateTable table = from_json(resources::kTemplatesJson);
    return table;
  }

  std::size_t size() const { return templates_.size(); }
  const QueryTemplate& at(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= templates_.size()) {
      throw Error("unknown template id " + std::to_string(id));
    }
    return templates_[static_cast<std::size_t>(id)];
  }
  const std::vector<std::string>& view_phrases() const { return view_phrases_; }

 private:
  std::vector<QueryTemplate> templates_;
  std::vector<std::string> view_phrases_;
};

inline constexpr int kMaxCountWord = 24;  // 6 views x 4 objects

/// Every word any template, phrase or answer rule can produce.
inline const text::Vocab& builtin_vocab() {
  static const text::Vocab vocab = [] {
    std::vector<std::string> words;
    const auto& tt = TemplateTable::builtin();
    // The "{view}" placeholder splits to the word "view", which is in use anyway.
    for (std::size_t i = 0; i < tt.size(); ++i)
      for (auto w : text::split_words(tt.at(static_cast<int>(i)).text)) words.push_back(w);
    for (const auto& vp : tt.view_phrases())
      for (auto w : text::split_words(vp)) words.push_back(w);
    for (const auto& ph : text::PhraseTable::builtin().phrases())
      for (const auto& w : ph.words) words.push_back(w);
    for (const char* c : kClassNames) words.emplace_back(c);
    for (const char* w : {"yes", "no", "nothing", "clear"}) words.emplace_back(w);
    for (int n = 0; n <= kMaxCountWord; ++n) words.push_back(std::to_string(n));
    return text::Vocab(std::move(words));
  }();
  return vocab;
}

using ViewLabels = std::array<std::uint8_t, geometry::kNumViews>;

struct QuerySample {
  std::uint32_t scene_id = 0;
  int template_id = 0;
  std::uint64_t seed = 0;
  bool is_explicit = false;
  std::string raw;
  ViewLabels view_labels{};
  std::vector<int> answer_ids;  ///< rule-derived answer, terminated by <eos>

  bool operator==(const QuerySample&) const = default;
};

namespace detail {

inline ObjectClass parse_class(std::string_view name) {
  for (std::size_t i = 0; i < kNumClasses; ++i)
    if (name == kClassNames[i]) return static_cast<ObjectClass>(i);
  throw Error("answer rule: unknown class '" + std::string(name) + "'");
}

inline std::size_t count_in(const SceneSpec& spec, ObjectClass cls, const ViewLabels& labels) {
  std::size_t n = 0;
  for (std::size_t v = 0; v < geometry::kNumViews; ++v)
    if (labels[v]) n += spec.count(cls, static_cast<int>(v));
  return n;
}

inline std::vector<std::string> answer_words(const SceneSpec& spec, const std::string& rule,
                                             const ViewLabels& labels) {
  std::vector<std::string> out;
  if (rule == "objects") {
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const std::size_t n = count_in(spec, static_cast<ObjectClass>(c), labels);
      if (n) {
        out.push_back(std::to_string(n));
        out.emplace_back(kClassNames[c]);
      }
    }
    if (out.empty()) out.emplace_back("nothing");
  } else if (rule.rfind("count:", 0) == 0) {
    const auto cls = parse_class(rule.substr(6));
    out.push_back(std::to_string(count_in(spec, cls, labels)));
    out.emplace_back(kClassNames[static_cast<std::size_t>(cls)]);
  } else if (rule.rfind("exists:", 0) == 0) {
    out.emplace_back(count_in(spec, parse_class(rule.substr(7)), labels) ? "yes" : "no");
  } else if (rule == "clear") {
    const std::size_t veh = count_in(spec, ObjectClass::kVehicle, labels);
    const std::size_t ped = count_in(spec, ObjectClass::kPedestrian, labels);
    if (veh == 0 && ped == 0) {
      out = {"yes", "clear"};
    } else {
      out.emplace_back("no");
      if (veh) out.insert(out.end(), {std::to_string(veh), "vehicle"});
      if (ped) out.insert(out.end(), {std::to_string(ped), "pedestrian"});
    }
  } else {
    throw Error("unknown answer rule '" + rule + "'");
  }
  return out;
}

}  // namespace detail

/// Instantiates a template against a scene. Explicit templates draw a view
/// phrase with `seed`; labels come from the shared phrase table (explicit),
/// the template's fixed view list (implicit), or all views (global).
inline QuerySample gen_query(const SceneSpec& spec, int template_id, std::uint64_t seed,
                             const TemplateTable& table = TemplateTable::builtin()) {
  const QueryTemplate& t = table.at(template_id);
  QuerySample q;
  q.scene_id = spec.scene_id;
  q.template_id = template_id;
  q.seed = seed;
  q.raw = t.text;
  switch (t.kind) {
    case TemplateKind::kExplicit: {
      CounterRng rng = CounterRng(seed).split("query");
      const auto& phrases = table.view_phrases();
      const std::string& phrase =
          phrases[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(phrases.size()) - 1))];
      const auto pos = q.raw.find("{view}");
      if (pos == std::string::npos) throw Error("explicit template without {view}");
      q.raw.replace(pos, 6, phrase);
      const auto m = text::PhraseTable::builtin().match(text::split_words(phrase));
      if (!m.any) throw Error("view phrase '" + phrase + "' not in phrase table");
      for (std::size_t v = 0; v < geometry::kNumViews; ++v) q.view_labels[v] = m.views[v] > 0.5f;
      q.is_explicit = true;
      break;
    }
    case TemplateKind::kImplicit:
      for (int v : t.views) q.view_labels.at(static_cast<std::size_t>(v)) = 1;
      break;
    case TemplateKind::kGlobal:
      q.view_labels.fill(1);
      break;
  }
  const auto& vocab = builtin_vocab();
  for (const auto& w : detail::answer_words(spec, t.answer, q.view_labels)) q.answer_ids.push_back(vocab.id(w));
  q.answer_ids.push_back(text::kEos);
  return q;
}

}  // namespace litevlm::corpus
