#pragma once

#include <map>
#include <string>
#include <vector>

#include "vocab.hpp"

namespace seqctl {

// Discourse class inventory plus the marker lexicon and word-category map.
// Shipped as data so the class set can change without code changes.
struct DiscourseSchema {
  std::vector<std::string> classes;                       // ordered, unique
  std::vector<std::vector<std::string>> markers;          // per class
  std::map<std::string, TokenCategory> categories;        // token -> category

  int num_classes() const { return static_cast<int>(classes.size()); }
  int class_index(const std::string& name) const;         // throws on unknown
  void validate() const;

  std::string to_json() const;
  static DiscourseSchema from_json(const std::string& json);
  void save(const std::string& path) const;
  static DiscourseSchema load(const std::string& path);
};

// The eight-class news schema with marker seeds drawn from per-class
// predictive words, deduplicated across classes and padded with pseudo-words
// so lexicons are disjoint.
DiscourseSchema default_schema();

}  // namespace seqctl
