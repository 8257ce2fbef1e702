#include "corpus.hpp"

#include <cmath>
#include <sstream>

#include "json.hpp"
#include "util.hpp"

namespace seqctl {

using nlohmann::json;

static void append_i32(std::string& buf, int v) {
  auto u = static_cast<uint32_t>(v);
  for (int b = 0; b < 4; ++b) buf.push_back(static_cast<char>((u >> (8 * b)) & 0xFF));
}

uint64_t Corpus::hash() const {
  std::string buf;
  for (const auto& doc : docs) {
    for (int id : doc.headline.tokens) append_i32(buf, id);
    append_i32(buf, -1);
    for (const auto& s : doc.body) {
      append_i32(buf, s.tag);
      for (int id : s.tokens) append_i32(buf, id);
      append_i32(buf, -2);
    }
  }
  return fnv1a(buf, vocab.hash());
}

static json doc_to_json(const Document& doc, const Vocabulary& vocab,
                        const DiscourseSchema& schema) {
  json j;
  j["headline"] = detokenize(doc.headline.tokens, vocab);
  json sentences = json::array();
  json tags = json::array();
  for (const auto& s : doc.body) {
    sentences.push_back(detokenize(s.tokens, vocab));
    tags.push_back(schema.classes.at(s.tag));
  }
  j["sentences"] = std::move(sentences);
  j["tags"] = std::move(tags);
  return j;
}

static Document doc_from_json(const json& j, const Vocabulary& vocab,
                              const DiscourseSchema& schema) {
  Document doc;
  doc.headline.tokens = tokenize(j.at("headline").get<std::string>(), vocab);
  const json& sentences = j.at("sentences");
  const json& tags = j.at("tags");
  require(sentences.size() == tags.size(), Error::Kind::Format,
          "sentences and tags differ in length");
  for (size_t i = 0; i < sentences.size(); ++i) {
    Sentence s;
    s.tokens = tokenize(sentences[i].get<std::string>(), vocab);
    s.tag = schema.class_index(tags[i].get<std::string>());
    doc.body.push_back(std::move(s));
  }
  validate_document(doc, vocab, schema.num_classes());
  return doc;
}

void save_documents(const Corpus& corpus, const std::string& path) {
  std::ostringstream out;
  for (const auto& doc : corpus.docs)
    out << doc_to_json(doc, corpus.vocab, corpus.schema).dump() << "\n";
  write_file(path, out.str());
}

std::vector<Document> load_documents(const std::string& path, const Vocabulary& vocab,
                                     const DiscourseSchema& schema) {
  std::vector<Document> docs;
  auto lines = read_lines(path);
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    try {
      docs.push_back(doc_from_json(json::parse(lines[i]), vocab, schema));
    } catch (const json::exception& e) {
      fail(Error::Kind::Format,
           path + " line " + std::to_string(i + 1) + ": " + e.what());
    } catch (const Error& e) {
      fail(e.kind(), path + " line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return docs;
}

Corpus load_corpus(const std::string& docs_path, const std::string& vocab_path,
                   const std::string& schema_path) {
  Corpus corpus;
  corpus.vocab = Vocabulary::load(vocab_path);
  corpus.schema = DiscourseSchema::load(schema_path);
  corpus.docs = load_documents(docs_path, corpus.vocab, corpus.schema);
  return corpus;
}

std::vector<Corpus> split_corpus(const Corpus& corpus,
                                 const std::vector<double>& ratios, uint64_t seed) {
  require(!ratios.empty(), Error::Kind::InvalidArgument, "split: no ratios given");
  double sum = 0.0;
  for (double r : ratios) {
    require(r > 0.0, Error::Kind::InvalidArgument, "split: ratios must be positive");
    sum += r;
  }
  require(std::abs(sum - 1.0) <= 1e-9, Error::Kind::InvalidArgument,
          "split: ratios must sum to 1");
  int n = corpus.size();
  require(n >= static_cast<int>(ratios.size()), Error::Kind::InvalidArgument,
          "split: fewer documents than splits");

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  std::vector<Corpus> parts(ratios.size());
  for (auto& part : parts) {
    part.vocab = corpus.vocab;
    part.schema = corpus.schema;
  }
  int at = 0;
  for (size_t p = 0; p < ratios.size(); ++p) {
    int take = (p + 1 == ratios.size()) ? n - at
                                        : static_cast<int>(n * ratios[p]);
    for (int i = 0; i < take && at < n; ++i, ++at)
      parts[p].docs.push_back(corpus.docs[order[at]]);
  }
  return parts;
}

}  // namespace seqctl
