#include "schema.hpp"

#include <algorithm>
#include <set>

#include <json.hpp>

namespace seqctl {

using nlohmann::json;

int DiscourseSchema::class_index(const std::string& name) const {
  for (int i = 0; i < num_classes(); ++i)
    if (classes[i] == name) return i;
  fail(Error::Kind::Format, "unknown class name: \"" + name + "\"");
}

void DiscourseSchema::validate() const {
  require(!classes.empty(), Error::Kind::InvalidArgument, "schema: no classes");
  std::set<std::string> seen(classes.begin(), classes.end());
  require(seen.size() == classes.size(), Error::Kind::InvalidArgument,
          "schema: duplicate class names");
  require(markers.size() == classes.size(), Error::Kind::InvalidArgument,
          "schema: marker lexicon count must match class count");
}

std::string DiscourseSchema::to_json() const {
  json j;
  j["classes"] = classes;
  json m = json::object();
  for (int i = 0; i < num_classes(); ++i) m[classes[i]] = markers[i];
  j["markers"] = m;
  json c = json::object();
  for (const auto& [tok, cat] : categories) c[tok] = category_name(cat);
  j["categories"] = c;
  return j.dump(2) + "\n";
}

DiscourseSchema DiscourseSchema::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(Error::Kind::Format, std::string("schema: bad json: ") + e.what());
  }
  DiscourseSchema s;
  require(j.contains("classes"), Error::Kind::Format, "schema: missing classes");
  s.classes = j["classes"].get<std::vector<std::string>>();
  s.markers.assign(s.classes.size(), {});
  if (j.contains("markers")) {
    for (auto& [cls, lex] : j["markers"].items()) {
      int idx = s.class_index(cls);
      s.markers[idx] = lex.get<std::vector<std::string>>();
    }
  }
  if (j.contains("categories")) {
    for (auto& [tok, cat] : j["categories"].items())
      s.categories[tok] = category_from_name(cat.get<std::string>());
  }
  s.validate();
  return s;
}

void DiscourseSchema::save(const std::string& path) const {
  write_file(path, to_json());
}

DiscourseSchema DiscourseSchema::load(const std::string& path) {
  return from_json(read_file(path));
}

DiscourseSchema default_schema() {
  DiscourseSchema s;
  s.classes = {"Main Event",       "Consequence", "Current Context",
               "Previous Event",   "Historical Event", "Anecdotal Event",
               "Evaluation",       "Expectation"};
  // Seed words per class; duplicates across classes dropped so the lexicons
  // stay disjoint, then padded with pseudo-words to six markers each.
  std::vector<std::vector<std::string>> seeds = {
      {"monday", "cooperation", "shot"},
      {"closed", "showed", "issued"},
      {"prime", "groups"},             // "shot" already claimed by Main Event
      {"comment", "declined", "agency"},
      {"2015", "2016", "2017"},
      {"want", "told", "old"},
      {"say", "think"},                // "told" already claimed by Anecdotal Event
      {"expected", "likely", "continue"}};
  std::vector<std::string> slugs = {"mainev", "conseq", "context", "prevev",
                                    "histev", "anecd",  "evalu",   "expect"};
  const int markers_per_class = 6;
  s.markers.resize(s.classes.size());
  for (size_t c = 0; c < s.classes.size(); ++c) {
    s.markers[c] = seeds[c];
    int n = 0;
    while (static_cast<int>(s.markers[c].size()) < markers_per_class)
      s.markers[c].push_back(slugs[c] + std::to_string(n++));
    for (const auto& m : s.markers[c]) s.categories[m] = TokenCategory::Marker;
  }
  s.validate();
  return s;
}

}  // namespace seqctl
