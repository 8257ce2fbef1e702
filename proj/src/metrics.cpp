#include "metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "json.hpp"
#include "util.hpp"

namespace seqctl {
namespace {

constexpr int kMaxNgram = 3;

double nan_value() { return std::numeric_limits<double>::quiet_NaN(); }

void append_json_number(nlohmann::json& obj, const char* key, double v) {
  if (std::isfinite(v)) {
    obj[key] = v;
  } else {
    obj[key] = nullptr;
  }
}

}  // namespace

double TagBigram::transition(int from, int to) const {
  require(from >= -1 && from < num_classes, Error::Kind::InvalidArgument,
          "tag bigram: source class out of range");
  require(to >= 0 && to < num_classes, Error::Kind::InvalidArgument,
          "tag bigram: target class out of range");
  return rows[static_cast<size_t>(from + 1)][static_cast<size_t>(to)];
}

std::string TagBigram::to_json() const {
  nlohmann::json j;
  j["num_classes"] = num_classes;
  j["alpha"] = alpha;
  j["rows"] = rows;
  j["marginals"] = marginals;
  return j.dump(2);
}

TagBigram TagBigram::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    fail(Error::Kind::Format, std::string("tag bigram: bad json: ") + e.what());
  }
  TagBigram b;
  try {
    b.num_classes = j.at("num_classes").get<int>();
    b.alpha = j.at("alpha").get<double>();
    b.rows = j.at("rows").get<std::vector<std::vector<double>>>();
    b.marginals = j.at("marginals").get<std::vector<double>>();
  } catch (const std::exception& e) {
    fail(Error::Kind::Format, std::string("tag bigram: missing field: ") + e.what());
  }
  require(b.num_classes > 0, Error::Kind::Format, "tag bigram: no classes");
  require(b.rows.size() == static_cast<size_t>(b.num_classes + 1),
          Error::Kind::Format, "tag bigram: row count mismatch");
  for (const auto& row : b.rows) {
    require(row.size() == static_cast<size_t>(b.num_classes), Error::Kind::Format,
            "tag bigram: row width mismatch");
  }
  require(b.marginals.size() == static_cast<size_t>(b.num_classes),
          Error::Kind::Format, "tag bigram: marginal count mismatch");
  return b;
}

TagBigram fit_tag_bigram(const Corpus& corpus, double alpha) {
  require(alpha > 0.0, Error::Kind::InvalidArgument,
          "tag bigram: smoothing must be positive");
  require(!corpus.docs.empty(), Error::Kind::InvalidArgument,
          "tag bigram: empty corpus");
  const int C = corpus.schema.num_classes();
  require(C > 0, Error::Kind::InvalidArgument, "tag bigram: schema has no classes");

  std::vector<std::vector<double>> counts(static_cast<size_t>(C + 1),
                                          std::vector<double>(static_cast<size_t>(C), 0.0));
  std::vector<double> marginal(static_cast<size_t>(C), 0.0);
  double total_tags = 0.0;
  for (const Document& doc : corpus.docs) {
    int prev = -1;
    for (const Sentence& s : doc.body) {
      require(s.tag >= 0 && s.tag < C, Error::Kind::InvalidArgument,
              "tag bigram: document tag out of range");
      counts[static_cast<size_t>(prev + 1)][static_cast<size_t>(s.tag)] += 1.0;
      marginal[static_cast<size_t>(s.tag)] += 1.0;
      total_tags += 1.0;
      prev = s.tag;
    }
  }
  require(total_tags > 0.0, Error::Kind::InvalidArgument,
          "tag bigram: corpus has no tagged sentences");

  TagBigram b;
  b.num_classes = C;
  b.alpha = alpha;
  b.rows.assign(static_cast<size_t>(C + 1),
                std::vector<double>(static_cast<size_t>(C), 0.0));
  for (int r = 0; r <= C; ++r) {
    double row_total = 0.0;
    for (int c = 0; c < C; ++c) row_total += counts[r][c];
    const double denom = row_total + alpha * C;
    for (int c = 0; c < C; ++c) b.rows[r][c] = (counts[r][c] + alpha) / denom;
  }
  b.marginals.resize(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c) b.marginals[c] = marginal[c] / total_tags;
  return b;
}

double tag_sequence_loglik(const std::vector<int>& tags, const TagBigram& bigram) {
  require(tags.size() >= 2, Error::Kind::InvalidArgument,
          "tag loglik: need at least two tags");
  double sum = 0.0;
  for (size_t t = 0; t + 1 < tags.size(); ++t) {
    sum += std::log(bigram.transition(tags[t], tags[t + 1]));
  }
  return sum / static_cast<double>(tags.size() - 1);
}

double diverse_ngrams(const Document& doc) {
  require(!doc.body.empty(), Error::Kind::InvalidArgument,
          "diverse ngrams: document has no body sentences");
  // One sentence's score is the share of the document's 1..3-gram occurrences
  // that lie in this sentence and appear nowhere else in the document.
  // N-grams never cross a sentence boundary.
  std::map<std::vector<int>, long> doc_count;
  long total = 0;
  for (const Sentence& s : doc.body) {
    const int len = s.length();
    for (int n = 1; n <= kMaxNgram; ++n) {
      for (int i = 0; i + n <= len; ++i) {
        ++doc_count[std::vector<int>(s.tokens.begin() + i, s.tokens.begin() + i + n)];
        ++total;
      }
    }
  }
  require(total > 0, Error::Kind::InvalidArgument,
          "diverse ngrams: document has no tokens");

  double sum = 0.0;
  int counted = 0;
  for (const Sentence& s : doc.body) {
    const int len = s.length();
    if (len < 1) continue;  // empty sentence: nothing to measure, skip
    long unique = 0;
    for (int n = 1; n <= kMaxNgram; ++n) {
      for (int i = 0; i + n <= len; ++i) {
        if (doc_count.at(std::vector<int>(s.tokens.begin() + i, s.tokens.begin() + i + n)) == 1)
          ++unique;
      }
    }
    sum += 100.0 * static_cast<double>(unique) / static_cast<double>(total);
    ++counted;
  }
  require(counted > 0, Error::Kind::InvalidArgument,
          "diverse ngrams: every sentence is empty");
  return sum / static_cast<double>(counted);
}

double unseen_words(const Document& doc, const Vocabulary& doc_vocab,
                    const Vocabulary& reference) {
  long total = 0;
  long unseen = 0;
  for (const Sentence& s : doc.body) {
    for (int id : s.tokens) {
      require(id >= 0 && id < doc_vocab.size(), Error::Kind::InvalidArgument,
              "unseen words: token id out of range");
      ++total;
      if (id == doc_vocab.unk() || !reference.contains(doc_vocab.surface(id))) {
        ++unseen;
      }
    }
  }
  require(total > 0, Error::Kind::InvalidArgument,
          "unseen words: document has no body tokens");
  return 100.0 * static_cast<double>(unseen) / static_cast<double>(total);
}

double mean_sentence_length(const Document& doc) {
  require(!doc.body.empty(), Error::Kind::InvalidArgument,
          "sentence length: document has no body sentences");
  double sum = 0.0;
  for (const Sentence& s : doc.body) sum += static_cast<double>(s.length());
  return sum / static_cast<double>(doc.body.size());
}

OracleOutcome oracle_control_accuracy(const std::vector<Document>& docs,
                                      const RuleOracle& oracle) {
  long total = 0;
  long correct = 0;
  long abstained = 0;
  for (const Document& doc : docs) {
    for (const Sentence& s : doc.body) {
      require(s.tag >= 0, Error::Kind::InvalidArgument,
              "oracle accuracy: sentence without a tag");
      ++total;
      const int cls = oracle.classify(s.tokens);
      if (cls < 0) {
        ++abstained;
      } else if (cls == s.tag) {
        ++correct;
      }
    }
  }
  require(total > 0, Error::Kind::InvalidArgument,
          "oracle accuracy: no sentences to judge");
  OracleOutcome out;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(total);
  out.abstention = static_cast<double>(abstained) / static_cast<double>(total);
  return out;
}

double label_probability(const Lm& lm, const Discriminator& disc,
                         const Vocabulary& vocab, const Document& doc,
                         const ControlPlan& plan) {
  require(plan.length() == doc.num_sentences(), Error::Kind::InvalidArgument,
          "label probability: plan and document lengths differ");
  require(doc.num_sentences() > 0, Error::Kind::InvalidArgument,
          "label probability: document has no body sentences");
  double sum = 0.0;
  for (int k = 1; k <= doc.num_sentences(); ++k) {
    const std::vector<int> stream = flatten_prefix(doc, k, vocab);
    const HeadPredictions heads = disc.predict_heads(lm, vocab, stream, plan, k);
    const int tag = plan.tags[static_cast<size_t>(k - 1)];
    require(tag >= 0 && tag < static_cast<int>(heads.at_offset(0).size()),
            Error::Kind::InvalidArgument, "label probability: tag out of range");
    sum += heads.at_offset(0)[static_cast<size_t>(tag)];
  }
  return sum / static_cast<double>(doc.num_sentences());
}

MetricsReport::PerDoc::PerDoc()
    : label_prob(nan_value()),
      perplexity(nan_value()),
      diverse(nan_value()),
      mean_sentence_len(nan_value()),
      unseen(nan_value()),
      tag_loglik(nan_value()),
      oracle_accuracy(nan_value()),
      oracle_abstention(nan_value()) {}

namespace {

void per_doc_json(nlohmann::json& obj, const MetricsReport::PerDoc& d) {
  append_json_number(obj, "label_probability", d.label_prob);
  append_json_number(obj, "perplexity", d.perplexity);
  append_json_number(obj, "diverse_ngrams_pct", d.diverse);
  append_json_number(obj, "mean_sentence_length", d.mean_sentence_len);
  append_json_number(obj, "unseen_words_pct", d.unseen);
  append_json_number(obj, "tag_sequence_loglik", d.tag_loglik);
  append_json_number(obj, "oracle_accuracy", d.oracle_accuracy);
  append_json_number(obj, "oracle_abstention_rate", d.oracle_abstention);
}

struct NamedField {
  const char* name;
  double MetricsReport::PerDoc::*member;
};

constexpr NamedField kFields[] = {
    {"label_probability", &MetricsReport::PerDoc::label_prob},
    {"perplexity", &MetricsReport::PerDoc::perplexity},
    {"diverse_ngrams_pct", &MetricsReport::PerDoc::diverse},
    {"mean_sentence_length", &MetricsReport::PerDoc::mean_sentence_len},
    {"unseen_words_pct", &MetricsReport::PerDoc::unseen},
    {"tag_sequence_loglik", &MetricsReport::PerDoc::tag_loglik},
    {"oracle_accuracy", &MetricsReport::PerDoc::oracle_accuracy},
    {"oracle_abstention_rate", &MetricsReport::PerDoc::oracle_abstention},
};

}  // namespace

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["documents"] = nlohmann::json::array();
  for (const PerDoc& d : per_doc) {
    nlohmann::json row;
    per_doc_json(row, d);
    j["documents"].push_back(row);
  }
  nlohmann::json agg;
  per_doc_json(agg, mean);
  j["aggregates"] = agg;
  return j.dump(2);
}

std::string MetricsReport::to_csv(const std::string& run) const {
  require(run.find(',') == std::string::npos && run.find('\n') == std::string::npos,
          Error::Kind::InvalidArgument, "metrics csv: run name may not contain , or newline");
  std::ostringstream out;
  out << "run,metric,value\n";
  for (const NamedField& f : kFields) {
    const double v = mean.*(f.member);
    if (!std::isfinite(v)) continue;
    out << run << ',' << f.name << ',' << format_double(v) << '\n';
  }
  return out.str();
}

MetricsReport compute_metrics(const std::vector<Document>& docs,
                              const Vocabulary& vocab,
                              const MetricsOptions& options) {
  require(!docs.empty(), Error::Kind::InvalidArgument, "metrics: no documents");
  TagBigram bigram;
  if (options.reference != nullptr) {
    bigram = fit_tag_bigram(*options.reference, options.bigram_alpha);
  }

  MetricsReport report;
  report.per_doc.resize(docs.size());
  for (size_t i = 0; i < docs.size(); ++i) {
    const Document& doc = docs[i];
    MetricsReport::PerDoc& row = report.per_doc[i];
    row.diverse = diverse_ngrams(doc);
    row.mean_sentence_len = mean_sentence_length(doc);
    if (options.lm != nullptr) {
      row.perplexity = options.lm->perplexity(flatten_document(doc, vocab));
    }
    if (options.lm != nullptr && options.disc != nullptr) {
      row.label_prob = label_probability(*options.lm, *options.disc, vocab, doc,
                                         plan_from_document(doc));
    }
    if (options.reference != nullptr) {
      row.unseen = unseen_words(doc, vocab, options.reference->vocab);
      std::vector<int> tags;
      tags.reserve(doc.body.size());
      for (const Sentence& s : doc.body) tags.push_back(s.tag);
      if (tags.size() >= 2) row.tag_loglik = tag_sequence_loglik(tags, bigram);
    }
    if (options.oracle != nullptr) {
      const OracleOutcome o = oracle_control_accuracy({doc}, *options.oracle);
      row.oracle_accuracy = o.accuracy;
      row.oracle_abstention = o.abstention;
    }
  }

  for (const NamedField& f : kFields) {
    double sum = 0.0;
    int n = 0;
    for (const MetricsReport::PerDoc& row : report.per_doc) {
      const double v = row.*(f.member);
      if (!std::isfinite(v)) continue;
      sum += v;
      ++n;
    }
    report.mean.*(f.member) = n > 0 ? sum / static_cast<double>(n) : nan_value();
  }
  return report;
}

}  // namespace seqctl
