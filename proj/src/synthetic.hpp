#pragma once

#include <string>
#include <vector>

#include "corpus.hpp"

namespace seqctl {

// Knobs for the synthetic structured-news generator. Tag sequences follow a
// Markov chain over classes; sentences mix planted class markers, headline
// topic words, and background tokens.
struct SyntheticSpec {
  int vocab_size = 512;
  std::vector<std::vector<double>> transition;  // row-stochastic, classes x classes
  std::vector<double> initial;                  // distribution of the first tag
  double rho_marker = 0.30;                     // per-position marker weight
  double rho_topic = 0.15;                      // per-position topic weight
  int sent_len_min = 4;
  int sent_len_max = 11;
  double sent_len_mean = 7.0;
  int doc_len_min = 5;  // sentences per document, uniform
  int doc_len_max = 11;
  int docs_train = 400;
  int docs_dev = 60;
  int docs_test = 60;
  uint64_t seed = 7;

  // 8-class defaults: self-weight 0.30, heavier mass on the next few classes
  // in schema order, thin uniform tail. Circulant, so the stationary
  // distribution is uniform while transitions stay strongly asymmetric.
  static SyntheticSpec defaults();

  void validate(int num_classes) const;
  std::string to_json() const;
  static SyntheticSpec from_json(const std::string& text);
};

// Marker positions planted into one sentence (its tag names the class).
struct DocPlants {
  std::vector<std::vector<int>> sentence_positions;
};

struct SyntheticCorpus {
  Corpus train, dev, test;
  std::vector<DocPlants> train_plants, dev_plants, test_plants;
};

// Vocabulary layout: specials, prompt-template tokens, per-class markers,
// then topic / entity / date pools, with function words filling the rest.
Vocabulary build_synthetic_vocab(int vocab_size, const DiscourseSchema& schema);

SyntheticCorpus generate_synthetic_corpus(const SyntheticSpec& spec,
                                          const DiscourseSchema& schema);

// Tag classifier over marker lexicons: majority class among marker tokens in
// the sentence, ties to the lowest class index, -1 when no marker is present.
class RuleOracle {
 public:
  RuleOracle(const DiscourseSchema& schema, const Vocabulary& vocab);
  int classify(const std::vector<int>& tokens) const;

 private:
  std::vector<std::vector<int>> classes_of_;  // token id -> owning classes
  int num_classes_ = 0;
};

}  // namespace seqctl
