#include "synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "util.hpp"

namespace seqctl {

using nlohmann::json;

SyntheticSpec SyntheticSpec::defaults() {
  SyntheticSpec spec;
  const int C = 8;
  // Offset weights from each class to (self, +1, +2, ... mod C).
  const double offsets[C] = {0.30, 0.26, 0.18, 0.10, 0.04, 0.04, 0.04, 0.04};
  spec.transition.assign(C, std::vector<double>(C, 0.0));
  for (int i = 0; i < C; ++i)
    for (int d = 0; d < C; ++d) spec.transition[i][(i + d) % C] = offsets[d];
  // Documents open with the main event far more often than not.
  spec.initial = {0.55, 0.05, 0.12, 0.08, 0.04, 0.04, 0.06, 0.06};
  return spec;
}

void SyntheticSpec::validate(int num_classes) const {
  require(vocab_size > 0, Error::Kind::InvalidArgument, "vocab_size must be positive");
  require(static_cast<int>(transition.size()) == num_classes,
          Error::Kind::InvalidArgument, "transition matrix must be classes x classes");
  for (const auto& row : transition) {
    require(static_cast<int>(row.size()) == num_classes, Error::Kind::InvalidArgument,
            "transition matrix must be classes x classes");
    double sum = 0.0;
    for (double p : row) {
      require(p >= 0.0, Error::Kind::InvalidArgument, "transition entries must be >= 0");
      sum += p;
    }
    require(std::abs(sum - 1.0) <= 1e-9, Error::Kind::InvalidArgument,
            "transition rows must sum to 1");
  }
  require(static_cast<int>(initial.size()) == num_classes, Error::Kind::InvalidArgument,
          "initial distribution must have one entry per class");
  double isum = 0.0;
  for (double p : initial) {
    require(p >= 0.0, Error::Kind::InvalidArgument, "initial entries must be >= 0");
    isum += p;
  }
  require(std::abs(isum - 1.0) <= 1e-9, Error::Kind::InvalidArgument,
          "initial distribution must sum to 1");
  require(rho_marker >= 0.0 && rho_topic >= 0.0 && rho_marker + rho_topic <= 1.0,
          Error::Kind::InvalidArgument, "need rho_marker, rho_topic >= 0 summing <= 1");
  require(sent_len_min >= 1 && sent_len_min <= sent_len_max,
          Error::Kind::InvalidArgument, "bad sentence length range");
  require(sent_len_mean >= sent_len_min && sent_len_mean <= sent_len_max,
          Error::Kind::InvalidArgument, "sentence length mean outside [min, max]");
  require(doc_len_min >= 1 && doc_len_min <= doc_len_max, Error::Kind::InvalidArgument,
          "bad document length range");
  require(docs_train >= 0 && docs_dev >= 0 && docs_test >= 0,
          Error::Kind::InvalidArgument, "split sizes must be >= 0");
}

std::string SyntheticSpec::to_json() const {
  json j;
  j["vocab_size"] = vocab_size;
  j["transition"] = transition;
  j["initial"] = initial;
  j["rho_marker"] = rho_marker;
  j["rho_topic"] = rho_topic;
  j["sent_len_min"] = sent_len_min;
  j["sent_len_max"] = sent_len_max;
  j["sent_len_mean"] = sent_len_mean;
  j["doc_len_min"] = doc_len_min;
  j["doc_len_max"] = doc_len_max;
  j["docs_train"] = docs_train;
  j["docs_dev"] = docs_dev;
  j["docs_test"] = docs_test;
  j["seed"] = seed;
  return j.dump(2);
}

SyntheticSpec SyntheticSpec::from_json(const std::string& text) {
  SyntheticSpec spec = defaults();
  try {
    json j = json::parse(text);
    spec.vocab_size = j.value("vocab_size", spec.vocab_size);
    if (j.contains("transition"))
      spec.transition = j["transition"].get<std::vector<std::vector<double>>>();
    if (j.contains("initial")) spec.initial = j["initial"].get<std::vector<double>>();
    spec.rho_marker = j.value("rho_marker", spec.rho_marker);
    spec.rho_topic = j.value("rho_topic", spec.rho_topic);
    spec.sent_len_min = j.value("sent_len_min", spec.sent_len_min);
    spec.sent_len_max = j.value("sent_len_max", spec.sent_len_max);
    spec.sent_len_mean = j.value("sent_len_mean", spec.sent_len_mean);
    spec.doc_len_min = j.value("doc_len_min", spec.doc_len_min);
    spec.doc_len_max = j.value("doc_len_max", spec.doc_len_max);
    spec.docs_train = j.value("docs_train", spec.docs_train);
    spec.docs_dev = j.value("docs_dev", spec.docs_dev);
    spec.docs_test = j.value("docs_test", spec.docs_test);
    spec.seed = j.value("seed", spec.seed);
  } catch (const json::exception& e) {
    fail(Error::Kind::Format, std::string("synthetic spec: ") + e.what());
  }
  return spec;
}

static constexpr int kNumTopics = 40;
static constexpr int kNumEntities = 24;
static constexpr int kNumDates = 12;
static constexpr int kMaxPositionToken = 16;

Vocabulary build_synthetic_vocab(int vocab_size, const DiscourseSchema& schema) {
  std::vector<std::string> tokens;
  std::vector<TokenCategory> cats;
  auto add = [&](const std::string& t, TokenCategory c) {
    tokens.push_back(t);
    cats.push_back(c);
  };

  add("<pad>", TokenCategory::Function);
  add("<bos>", TokenCategory::Function);
  add("<eos>", TokenCategory::Function);
  add("<unk>", TokenCategory::Function);
  add("<sep>", TokenCategory::Function);
  for (int k = 0; k < Vocabulary::kNumSentinels; ++k)
    add("<m" + std::to_string(k) + ">", TokenCategory::Function);

  // Serialization tokens for the prompting baseline.
  add("<hl>", TokenCategory::Function);
  add("<lb>", TokenCategory::Function);
  add("<tx>", TokenCategory::Function);
  for (int c = 0; c < schema.num_classes(); ++c)
    add("<c" + std::to_string(c) + ">", TokenCategory::Function);
  for (int p = 1; p <= kMaxPositionToken; ++p)
    add("<p" + std::to_string(p) + ">", TokenCategory::Function);

  for (const auto& lexicon : schema.markers)
    for (const auto& m : lexicon) add(m, TokenCategory::Marker);
  for (int i = 0; i < kNumTopics; ++i)
    add("topic" + std::to_string(i), TokenCategory::Topic);
  for (int i = 0; i < kNumEntities; ++i)
    add("ent" + std::to_string(i), TokenCategory::Entity);
  for (int i = 0; i < kNumDates; ++i)
    add("date" + std::to_string(i), TokenCategory::Date);

  int used = static_cast<int>(tokens.size());
  require(vocab_size >= used + 8, Error::Kind::InvalidArgument,
          "vocab_size " + std::to_string(vocab_size) + " too small; layout needs " +
              std::to_string(used + 8));
  for (int i = 0; used + i < vocab_size; ++i)
    add("w" + std::to_string(i), TokenCategory::Function);

  return Vocabulary(tokens, cats);
}

namespace {

struct Pools {
  std::vector<std::vector<int>> markers;  // per class
  std::vector<int> topics, entities, dates, functions;
};

Pools collect_pools(const Vocabulary& vocab, const DiscourseSchema& schema) {
  Pools pools;
  for (const auto& lexicon : schema.markers) {
    std::vector<int> ids;
    for (const auto& m : lexicon) {
      require(vocab.contains(m), Error::Kind::Incompatible,
              "marker token missing from vocabulary: " + m);
      ids.push_back(vocab.lookup(m));
    }
    require(!ids.empty(), Error::Kind::InvalidArgument, "class with empty marker lexicon");
    pools.markers.push_back(std::move(ids));
  }
  for (int id = 0; id < vocab.size(); ++id) {
    if (vocab.is_special(id)) continue;
    switch (vocab.category(id)) {
      case TokenCategory::Topic: pools.topics.push_back(id); break;
      case TokenCategory::Entity: pools.entities.push_back(id); break;
      case TokenCategory::Date: pools.dates.push_back(id); break;
      case TokenCategory::Function:
        // Skip serialization tokens; they never appear in body text.
        if (vocab.surface(id).front() != '<') pools.functions.push_back(id);
        break;
      case TokenCategory::Marker: break;
    }
  }
  require(!pools.topics.empty() && !pools.entities.empty() && !pools.dates.empty() &&
              !pools.functions.empty(),
          Error::Kind::InvalidArgument, "vocabulary lacks a required token category");
  return pools;
}

Document generate_document(const SyntheticSpec& spec, const Pools& pools,
                           Rng& rng, DocPlants& plants) {
  int C = static_cast<int>(spec.transition.size());

  int S = rng.uniform_int(spec.doc_len_min, spec.doc_len_max);
  std::vector<int> tags(S);
  tags[0] = rng.categorical(spec.initial.data(), C);
  for (int j = 1; j < S; ++j)
    tags[j] = rng.categorical(spec.transition[tags[j - 1]].data(), C);

  // Topic set shared by headline and body.
  std::vector<int> pool = pools.topics;
  rng.shuffle(pool);
  int n_topics = rng.uniform_int(3, 5);
  std::vector<int> topics(pool.begin(), pool.begin() + n_topics);

  Document doc;
  int hl_len = rng.uniform_int(4, 6);
  doc.headline.tokens = topics;
  rng.shuffle(doc.headline.tokens);
  while (static_cast<int>(doc.headline.tokens.size()) < hl_len)
    doc.headline.tokens.push_back(
        pools.functions[rng.uniform_int(0, static_cast<int>(pools.functions.size()) - 1)]);

  int span = spec.sent_len_max - spec.sent_len_min;
  double p_len = span > 0 ? (spec.sent_len_mean - spec.sent_len_min) / span : 0.0;
  const double background[3] = {0.82, 0.12, 0.06};  // function / entity / date

  for (int j = 0; j < S; ++j) {
    Sentence sent;
    sent.tag = tags[j];
    int n = spec.sent_len_min;
    for (int b = 0; b < span; ++b)
      if (rng.uniform() < p_len) ++n;

    const auto& markers = pools.markers[tags[j]];
    std::vector<int> planted;
    const double mix[3] = {spec.rho_marker, spec.rho_topic,
                           1.0 - spec.rho_marker - spec.rho_topic};
    for (int i = 0; i < n; ++i) {
      int kind = rng.categorical(mix, 3);
      int id;
      if (kind == 0) {
        id = markers[rng.uniform_int(0, static_cast<int>(markers.size()) - 1)];
        planted.push_back(i);
      } else if (kind == 1) {
        id = topics[rng.uniform_int(0, n_topics - 1)];
      } else {
        int cat = rng.categorical(background, 3);
        const std::vector<int>& bag =
            cat == 0 ? pools.functions : cat == 1 ? pools.entities : pools.dates;
        id = bag[rng.uniform_int(0, static_cast<int>(bag.size()) - 1)];
      }
      sent.tokens.push_back(id);
    }
    // Keep the rule oracle total: every sentence carries at least one marker.
    if (planted.empty() && spec.rho_marker > 0.0) {
      int at = rng.uniform_int(0, n - 1);
      sent.tokens[at] = markers[rng.uniform_int(0, static_cast<int>(markers.size()) - 1)];
      planted.push_back(at);
    }
    plants.sentence_positions.push_back(std::move(planted));
    doc.body.push_back(std::move(sent));
  }
  return doc;
}

}  // namespace

SyntheticCorpus generate_synthetic_corpus(const SyntheticSpec& spec,
                                          const DiscourseSchema& schema) {
  schema.validate();
  spec.validate(schema.num_classes());

  SyntheticCorpus out;
  Vocabulary vocab = build_synthetic_vocab(spec.vocab_size, schema);
  Pools pools = collect_pools(vocab, schema);

  Rng rng(spec.seed);
  auto fill = [&](Corpus& corpus, std::vector<DocPlants>& plants, int count) {
    corpus.vocab = vocab;
    corpus.schema = schema;
    for (int d = 0; d < count; ++d) {
      DocPlants p;
      corpus.docs.push_back(generate_document(spec, pools, rng, p));
      plants.push_back(std::move(p));
    }
  };
  fill(out.train, out.train_plants, spec.docs_train);
  fill(out.dev, out.dev_plants, spec.docs_dev);
  fill(out.test, out.test_plants, spec.docs_test);
  return out;
}

RuleOracle::RuleOracle(const DiscourseSchema& schema, const Vocabulary& vocab)
    : classes_of_(vocab.size()), num_classes_(schema.num_classes()) {
  for (int c = 0; c < schema.num_classes(); ++c)
    for (const auto& m : schema.markers[c])
      if (vocab.contains(m)) classes_of_[vocab.lookup(m)].push_back(c);
}

int RuleOracle::classify(const std::vector<int>& tokens) const {
  std::vector<int> votes(num_classes_, 0);
  bool any = false;
  for (int id : tokens) {
    if (id < 0 || id >= static_cast<int>(classes_of_.size())) continue;
    for (int c : classes_of_[id]) {
      ++votes[c];
      any = true;
    }
  }
  if (!any) return -1;
  int best = 0;
  for (int c = 1; c < num_classes_; ++c)
    if (votes[c] > votes[best]) best = c;
  return best;
}

}  // namespace seqctl
