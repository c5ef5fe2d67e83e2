#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "attnlens/common.hpp"

namespace attnlens {

enum class TokenCategory { Function, Content, Punctuation, Sentinel };

inline const char* to_string(TokenCategory c) {
  switch (c) {
    case TokenCategory::Function: return "function";
    case TokenCategory::Content: return "content";
    case TokenCategory::Punctuation: return "punctuation";
    case TokenCategory::Sentinel: return "sentinel";
  }
  return "content";
}

inline TokenCategory category_from_string(const std::string& s) {
  if (s == "function") return TokenCategory::Function;
  if (s == "content") return TokenCategory::Content;
  if (s == "punctuation") return TokenCategory::Punctuation;
  if (s == "sentinel") return TokenCategory::Sentinel;
  throw DataError("unknown token category: " + s);
}

struct TokenInfo {
  std::string text;
  TokenCategory category = TokenCategory::Content;
  bool is_finalizing = false;
  bool is_subword_continuation = false;
  bool prefix_only = false;

  bool operator==(const TokenInfo&) const = default;
};

// Shared source/target token table. Ids are dense from 0; ids 0..2 are fixed
// specials. The finalizing set is exactly {sentinel, final punctuation}.
class Vocab {
 public:
  static constexpr int kEos = 0;
  static constexpr int kUnk = 1;
  static constexpr int kPunct = 2;

  static Vocab with_specials() {
    Vocab v;
    v.add({"</s>", TokenCategory::Sentinel, true, false, false});
    v.add({"<unk>", TokenCategory::Content, false, false, false});
    v.add({".", TokenCategory::Punctuation, true, false, false});
    return v;
  }

  int add(TokenInfo info) {
    if (by_text_.count(info.text)) throw DataError("vocab: duplicate token " + info.text);
    int id = static_cast<int>(tokens_.size());
    by_text_.emplace(info.text, id);
    tokens_.push_back(std::move(info));
    return id;
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  const TokenInfo& info(int id) const {
    if (id < 0 || id >= size()) throw ShapeError("vocab: id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  const std::string& text(int id) const { return info(id).text; }

  int id_of(const std::string& text) const {
    auto it = by_text_.find(text);
    return it == by_text_.end() ? -1 : it->second;
  }

  int id_or_unk(const std::string& text) const {
    int id = id_of(text);
    return id < 0 ? kUnk : id;
  }

  int eos_id() const { return kEos; }
  int unk_id() const { return kUnk; }
  int punct_id() const { return kPunct; }

  bool is_finalizing(int id) const { return info(id).is_finalizing; }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const TokenInfo& t : tokens_) {
      arr.push_back({{"text", t.text},
                     {"category", to_string(t.category)},
                     {"finalizing", t.is_finalizing},
                     {"continuation", t.is_subword_continuation},
                     {"prefix_only", t.prefix_only}});
    }
    return {{"tokens", arr}};
  }

  static Vocab from_json(const nlohmann::json& j) {
    Vocab v;
    if (!j.contains("tokens") || !j["tokens"].is_array())
      throw DataError("vocab json: missing tokens array");
    for (const auto& e : j["tokens"]) {
      TokenInfo t;
      t.text = e.at("text").get<std::string>();
      t.category = category_from_string(e.at("category").get<std::string>());
      t.is_finalizing = e.at("finalizing").get<bool>();
      t.is_subword_continuation = e.at("continuation").get<bool>();
      t.prefix_only = e.at("prefix_only").get<bool>();
      v.add(std::move(t));
    }
    if (v.size() < 3 || v.text(kEos) != "</s>" || v.text(kPunct) != ".")
      throw DataError("vocab json: special tokens missing or misplaced");
    return v;
  }

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<TokenInfo> tokens_;
  std::unordered_map<std::string, int> by_text_;
};

}  // namespace attnlens
