#include "vocab.hpp"

#include <algorithm>
#include <cctype>

#include <json.hpp>

namespace seqctl {

using nlohmann::json;

const char* category_name(TokenCategory c) {
  switch (c) {
    case TokenCategory::Function: return "function";
    case TokenCategory::Topic: return "topic";
    case TokenCategory::Entity: return "entity";
    case TokenCategory::Date: return "date";
    case TokenCategory::Marker: return "marker";
  }
  return "function";
}

TokenCategory category_from_name(const std::string& name) {
  if (name == "function") return TokenCategory::Function;
  if (name == "topic") return TokenCategory::Topic;
  if (name == "entity") return TokenCategory::Entity;
  if (name == "date") return TokenCategory::Date;
  if (name == "marker") return TokenCategory::Marker;
  fail(Error::Kind::Format, "unknown token category: " + name);
}

Vocabulary::Vocabulary(std::vector<std::string> tokens,
                       std::vector<TokenCategory> categories)
    : tokens_(std::move(tokens)), categories_(std::move(categories)) {
  require(tokens_.size() == categories_.size(), Error::Kind::InvalidArgument,
          "vocabulary: tokens and categories length mismatch");
  for (int i = 0; i < static_cast<int>(tokens_.size()); ++i) {
    auto [it, inserted] = index_.emplace(tokens_[i], i);
    require(inserted, Error::Kind::InvalidArgument,
            "vocabulary: duplicate surface: " + tokens_[i]);
  }
  auto find_special = [&](const std::string& s) {
    auto it = index_.find(s);
    require(it != index_.end(), Error::Kind::InvalidArgument,
            "vocabulary: missing special token " + s);
    return it->second;
  };
  pad_ = find_special("<pad>");
  bos_ = find_special("<bos>");
  eos_ = find_special("<eos>");
  unk_ = find_special("<unk>");
  sep_ = find_special("<sep>");
  sentinels_.resize(kNumSentinels);
  for (int k = 0; k < kNumSentinels; ++k)
    sentinels_[k] = find_special("<m" + std::to_string(k) + ">");
}

const std::string& Vocabulary::surface(int id) const {
  require(id >= 0 && id < size(), Error::Kind::InvalidArgument,
          "vocabulary: id out of range: " + std::to_string(id));
  return tokens_[id];
}

int Vocabulary::lookup(const std::string& surface) const {
  auto it = index_.find(surface);
  return it == index_.end() ? unk_ : it->second;
}

bool Vocabulary::contains(const std::string& surface) const {
  return index_.count(surface) > 0;
}

TokenCategory Vocabulary::category(int id) const {
  require(id >= 0 && id < size(), Error::Kind::InvalidArgument,
          "vocabulary: id out of range");
  return categories_[id];
}

int Vocabulary::sentinel(int k) const {
  require(k >= 0 && k < kNumSentinels, Error::Kind::InvalidArgument,
          "sentinel index out of range");
  return sentinels_[k];
}

bool Vocabulary::is_sentinel(int id) const {
  return std::find(sentinels_.begin(), sentinels_.end(), id) != sentinels_.end();
}

bool Vocabulary::is_special(int id) const {
  return id == pad_ || id == bos_ || id == eos_ || id == unk_ || id == sep_ ||
         is_sentinel(id);
}

uint64_t Vocabulary::hash() const {
  uint64_t h = 14695981039346656037ull;
  for (int i = 0; i < size(); ++i) {
    h = fnv1a(tokens_[i], h);
    uint8_t c = static_cast<uint8_t>(categories_[i]);
    h = fnv1a(&c, 1, h);
  }
  return h;
}

std::string Vocabulary::to_json() const {
  json j;
  j["tokens"] = tokens_;
  std::vector<std::string> cats;
  cats.reserve(categories_.size());
  for (auto c : categories_) cats.emplace_back(category_name(c));
  j["categories"] = cats;
  return j.dump(2) + "\n";
}

Vocabulary Vocabulary::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(Error::Kind::Format, std::string("vocabulary: bad json: ") + e.what());
  }
  require(j.contains("tokens") && j.contains("categories"), Error::Kind::Format,
          "vocabulary: missing tokens/categories");
  std::vector<std::string> tokens = j["tokens"].get<std::vector<std::string>>();
  std::vector<TokenCategory> cats;
  for (const auto& c : j["categories"])
    cats.push_back(category_from_name(c.get<std::string>()));
  return Vocabulary(std::move(tokens), std::move(cats));
}

void Vocabulary::save(const std::string& path) const { write_file(path, to_json()); }

Vocabulary Vocabulary::load(const std::string& path) {
  return from_json(read_file(path));
}

static bool is_punct_char(char c) {
  static const std::string punct = ".,!?;:()[]{}\"'";
  return punct.find(c) != std::string::npos;
}

std::vector<std::string> tokenize_surfaces(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&]() {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (char ch : text) {
    unsigned char uc = static_cast<unsigned char>(ch);
    if (std::isspace(uc)) {
      flush();
    } else if (is_punct_char(ch)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    }
  }
  flush();
  return out;
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> ids;
  for (const auto& s : tokenize_surfaces(text)) ids.push_back(vocab.lookup(s));
  return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.surface(ids[i]);
  }
  return out;
}

}  // namespace seqctl
