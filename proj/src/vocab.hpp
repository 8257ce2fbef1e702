#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "util.hpp"

namespace seqctl {

// Word categories stand in for POS/NER tagging at this scale. Real-text
// ingestion supplies them through the schema file.
enum class TokenCategory : uint8_t { Function = 0, Topic, Entity, Date, Marker };

const char* category_name(TokenCategory c);
TokenCategory category_from_name(const std::string& name);

// Closed word-level vocabulary. Ids are dense from 0; special tokens are
// ordinary entries recognized by surface.
class Vocabulary {
 public:
  static constexpr int kNumSentinels = 10;

  Vocabulary() = default;
  // Tokens must include all special surfaces: <pad> <bos> <eos> <unk> <sep>
  // and <m0>..<m9>.
  Vocabulary(std::vector<std::string> tokens, std::vector<TokenCategory> categories);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& surface(int id) const;
  // Returns the id for a surface, or unk() when absent.
  int lookup(const std::string& surface) const;
  bool contains(const std::string& surface) const;
  TokenCategory category(int id) const;

  int pad() const { return pad_; }
  int bos() const { return bos_; }
  int eos() const { return eos_; }
  int unk() const { return unk_; }
  int sep() const { return sep_; }
  int sentinel(int k) const;       // <mk>
  bool is_sentinel(int id) const;
  bool is_special(int id) const;   // any of the above

  uint64_t hash() const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);
  std::string to_json() const;
  static Vocabulary from_json(const std::string& json);

 private:
  std::vector<std::string> tokens_;
  std::vector<TokenCategory> categories_;
  std::unordered_map<std::string, int> index_;
  int pad_ = -1, bos_ = -1, eos_ = -1, unk_ = -1, sep_ = -1;
  std::vector<int> sentinels_;
};

// Lowercases and splits on whitespace; punctuation characters become
// single-character tokens. Total function: unknown words map to <unk>.
std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab);
std::vector<std::string> tokenize_surfaces(const std::string& text);
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

}  // namespace seqctl
