#include "document.hpp"

namespace seqctl {

int Document::token_count() const {
  int n = headline.length();
  for (const auto& s : body) n += s.length();
  return n;
}

static void validate_sentence(const Sentence& s, const Vocabulary& vocab,
                              const char* what) {
  require(!s.tokens.empty(), Error::Kind::InvalidArgument,
          std::string(what) + ": empty sentence");
  for (int id : s.tokens)
    require(id >= 0 && id < vocab.size(), Error::Kind::InvalidArgument,
            std::string(what) + ": token id out of range");
}

void validate_document(const Document& doc, const Vocabulary& vocab, int num_classes) {
  validate_sentence(doc.headline, vocab, "document headline");
  require(!doc.body.empty(), Error::Kind::InvalidArgument,
          "document: must have at least one sentence");
  for (const auto& s : doc.body) {
    validate_sentence(s, vocab, "document sentence");
    require(s.tag >= 0 && s.tag < num_classes, Error::Kind::InvalidArgument,
            "document: tag index out of range");
  }
}

void validate_plan(const ControlPlan& plan, const Vocabulary& vocab, int num_classes) {
  validate_sentence(plan.headline, vocab, "plan headline");
  require(!plan.tags.empty(), Error::Kind::InvalidArgument,
          "plan: must have at least one tag");
  for (int t : plan.tags)
    require(t >= 0 && t < num_classes, Error::Kind::InvalidArgument,
            "plan: tag index out of range");
}

std::vector<int> flatten_document(const Document& doc, const Vocabulary& vocab) {
  std::vector<int> ids;
  ids.reserve(static_cast<size_t>(doc.token_count()) + doc.body.size() + 2);
  ids.push_back(vocab.bos());
  ids.insert(ids.end(), doc.headline.tokens.begin(), doc.headline.tokens.end());
  ids.push_back(vocab.eos());
  for (const auto& s : doc.body) {
    ids.insert(ids.end(), s.tokens.begin(), s.tokens.end());
    ids.push_back(vocab.eos());
  }
  return ids;
}

std::vector<int> flatten_prefix(const Document& doc, int k, const Vocabulary& vocab) {
  require(k >= 0 && k <= doc.num_sentences(), Error::Kind::InvalidArgument,
          "flatten_prefix: sentence count out of range");
  std::vector<int> ids;
  ids.push_back(vocab.bos());
  ids.insert(ids.end(), doc.headline.tokens.begin(), doc.headline.tokens.end());
  ids.push_back(vocab.eos());
  for (int j = 0; j < k; ++j) {
    ids.insert(ids.end(), doc.body[j].tokens.begin(), doc.body[j].tokens.end());
    ids.push_back(vocab.eos());
  }
  return ids;
}

StreamLayout parse_stream(const std::vector<int>& stream, const Vocabulary& vocab) {
  require(!stream.empty() && stream[0] == vocab.bos(), Error::Kind::InvalidArgument,
          "stream must begin with <bos>");
  StreamLayout layout;
  int n = static_cast<int>(stream.size());
  int pos = 1;
  int begin = pos;
  while (pos < n && stream[pos] != vocab.eos()) ++pos;
  layout.headline = {begin, pos};
  if (pos >= n) {
    // headline still open; treat as headline-only prefix
    layout.last_complete = true;
    return layout;
  }
  ++pos;  // headline <eos>
  // Body sentences; the trailing span (possibly empty) is the one in
  // progress, so a stream past the headline always ends in one.
  while (pos <= n) {
    begin = pos;
    while (pos < n && stream[pos] != vocab.eos()) ++pos;
    layout.body.push_back({begin, pos});
    if (pos == n) {
      layout.last_complete = false;
      return layout;
    }
    ++pos;
  }
  return layout;
}

ControlPlan plan_from_document(const Document& doc) {
  ControlPlan plan;
  plan.headline = doc.headline;
  plan.headline.tag = -1;
  for (const auto& s : doc.body) plan.tags.push_back(s.tag);
  return plan;
}

}  // namespace seqctl
