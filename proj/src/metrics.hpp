#pragma once

#include <string>
#include <vector>

#include "corpus.hpp"
#include "discriminator.hpp"
#include "synthetic.hpp"

namespace seqctl {

// Add-alpha smoothed tag transition model with a start state: row 0 holds
// p(c_1), row i+1 holds p(c_{t+1} | c_t = i).
struct TagBigram {
  int num_classes = 0;
  double alpha = 0.1;
  std::vector<std::vector<double>> rows;  // (C+1) x C, row-stochastic
  std::vector<double> marginals;          // tag relative frequency in the fit

  // from = -1 addresses the start row.
  double transition(int from, int to) const;

  std::string to_json() const;
  static TagBigram from_json(const std::string& text);
};

TagBigram fit_tag_bigram(const Corpus& corpus, double alpha = 0.1);

// Mean natural-log p(c_{t+1} | c_t) over the sequence's transitions; the
// start row does not enter. Requires at least two tags.
double tag_sequence_loglik(const std::vector<int>& tags, const TagBigram& bigram);

// Mean over body sentences of 100 * |1..3-grams of the sentence occurring
// exactly once in the whole body| / |1..3-gram occurrences in the whole
// body|. Empty sentences are skipped.
double diverse_ngrams(const Document& doc);

// Percentage of body tokens whose surface is missing from the reference
// vocabulary; <unk> stands for an out-of-vocabulary word and always counts.
double unseen_words(const Document& doc, const Vocabulary& doc_vocab,
                    const Vocabulary& reference);

double mean_sentence_length(const Document& doc);

struct OracleOutcome {
  double accuracy = 0.0;    // abstentions count as incorrect
  double abstention = 0.0;  // fraction of sentences the oracle left unlabeled
};
// Pooled over every body sentence of every document, judged against the
// sentence's own tag.
OracleOutcome oracle_control_accuracy(const std::vector<Document>& docs,
                                      const RuleOracle& oracle);

// Mean over sentences of the offset-0 head's log-probability of the plan tag,
// evaluated with each sentence complete.
double label_probability(const Lm& lm, const Discriminator& disc,
                         const Vocabulary& vocab, const Document& doc,
                         const ControlPlan& plan);

struct MetricsOptions {
  const Lm* lm = nullptr;              // enables perplexity
  const Discriminator* disc = nullptr; // with lm, enables label probability
  const Corpus* reference = nullptr;   // enables unseen words and the tag bigram
  const RuleOracle* oracle = nullptr;  // enables control accuracy
  double bigram_alpha = 0.1;
};

// Undefined metrics stay NaN and serialize as null. Aggregates are the mean
// of the defined per-document values.
struct MetricsReport {
  struct PerDoc {
    double label_prob;
    double perplexity;
    double diverse;
    double mean_sentence_len;
    double unseen;
    double tag_loglik;
    double oracle_accuracy;
    double oracle_abstention;
    PerDoc();
  };
  std::vector<PerDoc> per_doc;
  PerDoc mean;

  std::string to_json() const;
  // Long-format plot data: run,metric,value with one row per defined
  // aggregate. Values re-parse to the same doubles.
  std::string to_csv(const std::string& run) const;
};

MetricsReport compute_metrics(const std::vector<Document>& docs,
                              const Vocabulary& vocab,
                              const MetricsOptions& options);

}  // namespace seqctl
