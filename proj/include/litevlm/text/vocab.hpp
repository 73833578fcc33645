#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "litevlm/nn/tensor.hpp"
#include "litevlm/resources.hpp"

namespace litevlm::text {

inline constexpr std::size_t kNumViews = 6;
using ViewBits = std::array<float, kNumViews>;

inline constexpr std::array<std::string_view, kNumViews> kViewNames = {
    "front", "front left", "front right", "back", "back left", "back right"};

enum SpecialToken : int { kPad = 0, kBos = 1, kEos = 2, kSep = 3, kUnk = 4 };

/// Lowercases and splits on anything that is not [a-z0-9]; '?' is kept as
/// its own word.
inline std::vector<std::string> split_words(std::string_view raw) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : raw) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
      if (ch == '?') out.emplace_back("?");
    }
  }
  flush();
  return out;
}

/// One view-reference phrase of the lexical table, pre-split into words.
struct Phrase {
  std::vector<std::string> words;
  std::vector<int> views;
};

/// The phrase table shared by the lexical matcher and the corpus generator.
class PhraseTable {
 public:
  static PhraseTable from_json(std::string_view json_text) {
    const auto j = nlohmann::json::parse(json_text);
    PhraseTable t;
    for (const auto& p : j.at("phrases")) {
      Phrase ph;
      ph.words = split_words(p.at("text").get<std::string>());
      ph.views = p.at("views").get<std::vector<int>>();
      for (int v : ph.views) {
        if (v < 0 || v >= static_cast<int>(kNumViews)) throw Error("phrase table: bad view index");
      }
      t.phrases_.push_back(std::move(ph));
    }
    // Longest match first; ties keep file order.
    std::stable_sort(t.phrases_.begin(), t.phrases_.end(),
                     [](const Phrase& a, const Phrase& b) { return a.words.size() > b.words.size(); });
    return t;
  }

  static const PhraseTable& builtin() {
    static const PhraseTable table = from_json(resources::kPhrasesJson);
    return table;
  }

  const std::vector<Phrase>& phrases() const { return phrases_; }

  struct Match {
    ViewBits views{};
    bool any = false;
  };

  /// Scans left to right, trying longer phrases first at each word; a match
  /// consumes its words.
  Match match(const std::vector<std::string>& words) const {
    Match m;
    std::size_t i = 0;
    while (i < words.size()) {
      const Phrase* hit = nullptr;
      for (const auto& ph : phrases_) {
        if (i + ph.words.size() <= words.size() &&
            std::equal(ph.words.begin(), ph.words.end(), words.begin() + static_cast<long>(i))) {
          hit = &ph;
          break;
        }
      }
      if (!hit) {
        ++i;
        continue;
      }
      for (int v : hit->views) m.views[static_cast<std::size_t>(v)] = 1.0f;
      m.any = true;
      i += hit->words.size();
    }
    return m;
  }

 private:
  std::vector<Phrase> phrases_;
};

/// Closed word-level vocabulary built from the template and phrase tables.
/// Ids 0..4 are the special tokens; the remaining words are sorted.
class Vocab {
 public:
  explicit Vocab(std::vector<std::string> words) {
    words_ = {"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"};
    std::set<std::string> uniq(words.begin(), words.end());
    for (const auto& w : words_) uniq.erase(w);
    words_.insert(words_.end(), uniq.begin(), uniq.end());
    for (std::size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i);
  }

  std::size_t size() const { return words_.size(); }

  int id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& word(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw Error("vocab: bad id");
    return words_[static_cast<std::size_t>(id)];
  }

  std::vector<int> encode(std::string_view raw) const {
    std::vector<int> out;
    for (const auto& w : split_words(raw)) out.push_back(id(w));
    return out;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int i : ids) {
      if (!out.empty()) out.push_back(' ');
      out += word(i);
    }
    return out;
  }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

}  // namespace litevlm::text
