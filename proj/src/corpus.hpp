#pragma once

#include <string>
#include <vector>

#include "document.hpp"
#include "rng.hpp"

namespace seqctl {

// In-memory bundle of documents plus the vocabulary and class schema they are
// written against. On disk the three live in separate files: documents as
// JSONL (one object per line: {"headline": str, "sentences": [str],
// "tags": [str]}), vocabulary and schema as JSON.
struct Corpus {
  Vocabulary vocab;
  DiscourseSchema schema;
  std::vector<Document> docs;

  int size() const { return static_cast<int>(docs.size()); }
  uint64_t hash() const;
};

void save_documents(const Corpus& corpus, const std::string& path);
std::vector<Document> load_documents(const std::string& path, const Vocabulary& vocab,
                                     const DiscourseSchema& schema);
Corpus load_corpus(const std::string& docs_path, const std::string& vocab_path,
                   const std::string& schema_path);

// Deterministic shuffle-and-cut into ratios.size() parts. Ratios must be
// positive and sum to 1; every part but the last gets floor(n * ratio) docs,
// the last the remainder.
std::vector<Corpus> split_corpus(const Corpus& corpus,
                                 const std::vector<double>& ratios, uint64_t seed);

}  // namespace seqctl
