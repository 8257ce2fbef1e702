#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <utility>

#include "common.hpp"
#include "discriminator.hpp"
#include "doctest.h"
#include "synthetic.hpp"
#include "util.hpp"

using namespace seqctl;
using namespace seqctl::testing;

namespace {

struct Fixture {
  SyntheticCorpus data;
  Lm lm;
  DiscrimConfig dcfg;

  static SyntheticSpec small_spec() {
    SyntheticSpec spec = SyntheticSpec::defaults();
    spec.vocab_size = 192;
    spec.docs_train = 40;
    spec.docs_dev = 12;
    spec.docs_test = 4;
    spec.rho_marker = 0.8;
    spec.seed = 11;
    return spec;
  }

  static LmConfig small_lm() {
    LmConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.d_model = 16;
    cfg.context = 160;
    cfg.epochs = 3;
    cfg.lr = 3e-3;
    cfg.seed = 5;
    return cfg;
  }

  Fixture()
      : data(generate_synthetic_corpus(small_spec(), default_schema())),
        lm(small_lm(), data.train.vocab.size()) {
    lm.train(data.train, nullptr);
    dcfg.window = 3;
    dcfg.label_width = 8;
    dcfg.ctx_layers = 1;
    dcfg.ctx_heads = 2;
    dcfg.head_hidden = 16;
    dcfg.epochs = 0;
    dcfg.seed = 21;
  }

  const Vocabulary& vocab() const { return data.train.vocab; }
  const Document& doc(int i) const { return data.train.docs[i]; }
};

Fixture& fx() {
  static Fixture f;
  return f;
}

// Independent recomputation of the structural score from raw head outputs.
double brute_force_score(const HeadPredictions& heads, const ControlPlan& plan, int k,
                         const StructuralMode& mode) {
  double total = 0.0;
  for (int o = -heads.window; o <= heads.window; ++o) {
    int j = k + o;
    if (j < 1 || j > plan.length()) continue;
    if (mode.kind == StructuralMode::Kind::LocalOnly && o != 0) continue;
    if (mode.kind == StructuralMode::Kind::PastAware && o > 0) continue;
    double w = o == 0 ? 1.0 : std::pow(mode.b, std::abs(o));
    if (w == 0.0) continue;
    total += w * heads.at_offset(o)[plan.tags[j - 1]];
  }
  return total;
}

}  // namespace

TEST_CASE("head predictions: masks follow the window and plan, rows normalize") {
  auto& f = fx();
  Discriminator disc(f.dcfg, 16, f.data.train.schema.num_classes());
  const Document& d = f.doc(0);
  ControlPlan plan = plan_from_document(d);
  int S = plan.length();
  REQUIRE(S >= 5);

  for (int k : {1, 2, S}) {
    auto stream = flatten_prefix(d, k, f.vocab());
    auto heads = disc.predict_heads(f.lm, f.vocab(), stream, plan, k);
    CHECK(heads.window == 3);
    for (int o = -3; o <= 3; ++o) {
      int j = k + o;
      bool expect = j >= 1 && j <= S;
      CHECK(heads.valid_offset(o) == expect);
      if (!expect) {
        CHECK(heads.at_offset(o).empty());
        continue;
      }
      const auto& row = heads.at_offset(o);
      REQUIRE(static_cast<int>(row.size()) == f.data.train.schema.num_classes());
      double sum = 0.0;
      for (double lp : row) sum += std::exp(lp);
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("class log-likelihood: full-sequence matches brute force at 1e-12") {
  auto& f = fx();
  Discriminator disc(f.dcfg, 16, f.data.train.schema.num_classes());
  for (int di = 0; di < 4; ++di) {
    const Document& d = f.doc(di);
    ControlPlan plan = plan_from_document(d);
    auto stream = flatten_document(d, f.vocab());
    for (int k = 1; k <= plan.length(); ++k) {
      auto heads = disc.predict_heads(f.lm, f.vocab(), stream, plan, k);
      for (StructuralMode::Kind kind :
           {StructuralMode::Kind::LocalOnly, StructuralMode::Kind::PastAware,
            StructuralMode::Kind::FullSequence}) {
        StructuralMode mode{kind, 0.33};
        double got = disc.class_log_likelihood(f.lm, f.vocab(), stream, plan, k, mode);
        double want = brute_force_score(heads, plan, k, mode);
        CHECK(std::abs(got - want) < 1e-12);
      }
    }
  }
}

TEST_CASE("class log-likelihood: b = 0 reduces every mode to local-only exactly") {
  auto& f = fx();
  Discriminator disc(f.dcfg, 16, f.data.train.schema.num_classes());
  const Document& d = f.doc(2);
  ControlPlan plan = plan_from_document(d);
  auto stream = flatten_document(d, f.vocab());
  for (int k = 1; k <= plan.length(); ++k) {
    double local = disc.class_log_likelihood(
        f.lm, f.vocab(), stream, plan, k,
        {StructuralMode::Kind::LocalOnly, 0.0});
    double past = disc.class_log_likelihood(
        f.lm, f.vocab(), stream, plan, k,
        {StructuralMode::Kind::PastAware, 0.0});
    double full = disc.class_log_likelihood(
        f.lm, f.vocab(), stream, plan, k,
        {StructuralMode::Kind::FullSequence, 0.0});
    CHECK(past == local);
    CHECK(full == local);
  }
}

TEST_CASE("class log-likelihood: discount weights follow b^|offset|") {
  auto& f = fx();
  Discriminator disc(f.dcfg, 16, f.data.train.schema.num_classes());
  const Document& d = f.doc(3);
  ControlPlan plan = plan_from_document(d);
  auto stream = flatten_document(d, f.vocab());
  int k = 3;
  auto heads = disc.predict_heads(f.lm, f.vocab(), stream, plan, k);
  for (double b : {0.33, 0.66, 1.0}) {
    StructuralMode mode{StructuralMode::Kind::FullSequence, b};
    double got = disc.class_log_likelihood(f.lm, f.vocab(), stream, plan, k, mode);
    double want = 0.0;
    for (int o = -3; o <= 3; ++o) {
      int j = k + o;
      if (j < 1 || j > plan.length()) continue;
      want += std::pow(b, std::abs(o)) * heads.at_offset(o)[plan.tags[j - 1]];
    }
    CHECK(std::abs(got - want) < 1e-12);
  }
}

TEST_CASE("hidden-state gradient matches finite differences") {
  auto& f = fx();
  int C = f.data.train.schema.num_classes();
  Discriminator disc(f.dcfg, 16, C);
  const Document& d = f.doc(1);
  ControlPlan plan = plan_from_document(d);
  auto stream = flatten_document(d, f.vocab());
  Mat h = f.lm.hidden_states(stream);
  StreamLayout layout = parse_stream(stream, f.vocab());
  int k = std::min(3, plan.length());

  for (StructuralMode::Kind kind :
       {StructuralMode::Kind::LocalOnly, StructuralMode::Kind::FullSequence}) {
    StructuralMode mode{kind, 0.33};
    Mat grad = disc.loss_grad_wrt_hidden(h, layout, plan, k, mode);
    REQUIRE(grad.rows == h.rows);
    REQUIRE(grad.cols == h.cols);

    // Probe the strongest-gradient coordinates; near-zero entries drown in
    // finite-difference roundoff and say nothing about correctness.
    std::vector<std::pair<double, int>> ranked;
    for (int i = 0; i < static_cast<int>(grad.size()); ++i)
      ranked.push_back({-std::abs(grad.a[i]), i});
    std::sort(ranked.begin(), ranked.end());
    double worst = 0.0;
    for (int p = 0; p < 12; ++p) {
      int t = ranked[p].second / h.cols;
      int c = ranked[p].second % h.cols;
      double saved = h.at(t, c);
      double eps = 1e-4;
      h.at(t, c) = saved + eps;
      double up = -disc.score_from_hidden(h, layout, plan, k, mode);
      h.at(t, c) = saved - eps;
      double dn = -disc.score_from_hidden(h, layout, plan, k, mode);
      h.at(t, c) = saved;
      double fd = (up - dn) / (2.0 * eps);
      worst = std::max(worst, rel_err(fd, grad.at(t, c)));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("hidden rows outside pooled spans get zero gradient") {
  auto& f = fx();
  Discriminator disc(f.dcfg, 16, f.data.train.schema.num_classes());
  const Document& d = f.doc(4);
  ControlPlan plan = plan_from_document(d);
  auto stream = flatten_document(d, f.vocab());
  Mat h = f.lm.hidden_states(stream);
  StreamLayout layout = parse_stream(stream, f.vocab());
  StructuralMode mode{StructuralMode::Kind::FullSequence, 0.33};
  int k = 2;
  Mat grad = disc.loss_grad_wrt_hidden(h, layout, plan, k, mode);

  // The bos/headline rows and all eos rows feed no pooled span.
  for (int t = 0; t <= layout.headline.end; ++t)
    for (int c = 0; c < grad.cols; ++c) CHECK(grad.at(t, c) == 0.0);
  // Sentences after k are invisible to the score.
  for (size_t j = k; j < layout.body.size(); ++j)
    for (int t = layout.body[j].begin; t < layout.body[j].end; ++t)
      for (int c = 0; c < grad.cols; ++c) CHECK(grad.at(t, c) == 0.0);
}

TEST_CASE("parameter gradients match finite differences") {
  auto& f = fx();
  int C = f.data.train.schema.num_classes();
  DiscrimConfig cfg = f.dcfg;
  cfg.seed = 31;
  Discriminator disc(cfg, 16, C);
  const Document& d = f.doc(5);
  ControlPlan plan = plan_from_document(d);
  auto stream = flatten_document(d, f.vocab());
  Mat h = f.lm.hidden_states(stream);
  StreamLayout layout = parse_stream(stream, f.vocab());
  int k = std::min(4, plan.length());
  StreamLayout sub = layout;
  sub.body.resize(k);

  disc.params().zero_grad();
  disc.training_loss_and_grad(h, sub, plan, k, 1.0);

  Rng rng(77);
  double worst = 0.0;
  for (const char* name :
       {"disc.pool.q", "disc.sent_pos", "disc.ctx0.attn.wq", "disc.ctx0.mlp.w1",
        "disc.label.emb", "disc.label.pos", "disc.label.q", "disc.head3.w1",
        "disc.head2.w2", "disc.head3.b2"}) {
    nn::Param* p = disc.params().find(name);
    REQUIRE(p != nullptr);
    // The strongest entry plus two random ones; tiny gradients are FD noise.
    size_t top = 0;
    for (size_t i = 1; i < p->size(); ++i)
      if (std::abs(p->g[i]) > std::abs(p->g[top])) top = i;
    for (int probe = 0; probe < 3; ++probe) {
      size_t idx = probe == 0 ? top
                              : static_cast<size_t>(rng.uniform_int(
                                    0, static_cast<int>(p->size()) - 1));
      double saved = p->w[idx];
      double eps = 1e-4;
      p->w[idx] = saved + eps;
      double up = [&] {
        auto heads = disc.predict_heads_from_hidden(h, sub, plan, k);
        double loss = 0.0;
        int valid = 0;
        for (int o = -3; o <= 3; ++o)
          if (heads.valid_offset(o)) ++valid;
        for (int o = -3; o <= 3; ++o) {
          if (!heads.valid_offset(o)) continue;
          loss += -heads.at_offset(o)[plan.tags[k + o - 1]] / valid;
        }
        return loss;
      }();
      p->w[idx] = saved - eps;
      double dn = [&] {
        auto heads = disc.predict_heads_from_hidden(h, sub, plan, k);
        double loss = 0.0;
        int valid = 0;
        for (int o = -3; o <= 3; ++o)
          if (heads.valid_offset(o)) ++valid;
        for (int o = -3; o <= 3; ++o) {
          if (!heads.valid_offset(o)) continue;
          loss += -heads.at_offset(o)[plan.tags[k + o - 1]] / valid;
        }
        return loss;
      }();
      p->w[idx] = saved;
      double fd = (up - dn) / (2.0 * eps);
      if (std::abs(fd) < 1e-7 && std::abs(p->g[idx]) < 1e-7) continue;
      worst = std::max(worst, rel_err(fd, p->g[idx]));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("step scorer reproduces class_log_likelihood bit for bit") {
  auto& f = fx();
  Discriminator disc(f.dcfg, 16, f.data.train.schema.num_classes());
  const Document& d = f.doc(6);
  ControlPlan plan = plan_from_document(d);
  int k = 2;
  // Stream up to a partial third word of sentence k.
  auto stream = flatten_prefix(d, k - 1, f.vocab());
  const auto& sent = d.body[k - 1].tokens;
  int partial = std::min<int>(3, sent.size() - 1);
  stream.insert(stream.end(), sent.begin(), sent.begin() + partial);

  StructuralMode mode{StructuralMode::Kind::FullSequence, 0.33};
  Mat h = f.lm.hidden_states(stream);
  StreamLayout layout = parse_stream(stream, f.vocab());
  StepScorer scorer(disc, h, layout, plan, k, mode);

  LmSession session(f.lm);
  for (int t : stream) session.push(t);

  for (int cand : {sent[partial], f.vocab().lookup("topic3"), 17, 150}) {
    auto peek = session.peek(cand);
    double fast = scorer.score(peek.hidden.data(), false);
    auto full = stream;
    full.push_back(cand);
    double slow = disc.class_log_likelihood(f.lm, f.vocab(), full, plan, k, mode);
    CHECK(fast == slow);
  }

  // eos closes the sentence: same score as the state scored as-is.
  double eos_fast = scorer.score(nullptr, true);
  double eos_slow = disc.class_log_likelihood(f.lm, f.vocab(), stream, plan, k, mode);
  CHECK(eos_fast == eos_slow);
}

TEST_CASE("scoring an empty sentence in progress is defined and finite") {
  auto& f = fx();
  Discriminator disc(f.dcfg, 16, f.data.train.schema.num_classes());
  const Document& d = f.doc(7);
  ControlPlan plan = plan_from_document(d);
  auto stream = flatten_prefix(d, 1, f.vocab());  // ends right after an eos
  StructuralMode mode{StructuralMode::Kind::FullSequence, 0.33};
  double score = disc.class_log_likelihood(f.lm, f.vocab(), stream, plan, 2, mode);
  CHECK(std::isfinite(score));
}

TEST_CASE("training learns the offset-0 head and reports per-head dev F1") {
  auto& f = fx();
  int C = f.data.train.schema.num_classes();
  DiscrimConfig cfg = f.dcfg;
  cfg.epochs = 8;
  cfg.lr = 3e-3;
  cfg.batch_docs = 2;
  cfg.seed = 42;
  Discriminator disc(cfg, 16, C);
  auto report = disc.train(f.data.train, &f.data.dev, f.lm);

  REQUIRE(static_cast<int>(report.epoch_ce.size()) == cfg.epochs);
  CHECK(report.epoch_ce.back() < report.epoch_ce.front());
  REQUIRE(static_cast<int>(report.dev_f1.size()) == 7);
  for (double v : report.dev_f1) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  // Markers make the current sentence's class nearly legible from the text,
  // while labels three sentences away are mostly noise.
  CHECK(report.dev_f1[3] > 0.55);
  CHECK(report.dev_f1[3] > report.dev_f1[0]);
  CHECK(report.dev_f1[3] > report.dev_f1[6]);

  // Inverse-frequency weights: rarer classes get larger weights.
  std::vector<long> counts(C, 0);
  for (const auto& doc : f.data.train.docs)
    for (const auto& s : doc.body) ++counts[s.tag];
  long total = 0;
  for (long c : counts) total += c;
  for (int c = 0; c < C; ++c) {
    if (counts[c] == 0) continue;
    double expect = static_cast<double>(total) / (C * counts[c]);
    CHECK(std::abs(disc.class_weights()[c] - expect) < 1e-12);
  }
}

TEST_CASE("training is deterministic and survives a save/load round trip") {
  auto& f = fx();
  int C = f.data.train.schema.num_classes();
  DiscrimConfig cfg = f.dcfg;
  cfg.epochs = 2;
  cfg.seed = 9;

  Discriminator a(cfg, 16, C);
  a.train(f.data.train, nullptr, f.lm);
  Discriminator b(cfg, 16, C);
  b.train(f.data.train, nullptr, f.lm);
  a.save("/tmp/disc_a.ck");
  b.save("/tmp/disc_b.ck");
  CHECK(read_file("/tmp/disc_a.ck") == read_file("/tmp/disc_b.ck"));

  Discriminator c = Discriminator::load("/tmp/disc_a.ck");
  CHECK(c.vocab_hash == a.vocab_hash);
  CHECK(c.class_weights() == a.class_weights());
  const Document& d = f.doc(8);
  ControlPlan plan = plan_from_document(d);
  auto stream = flatten_document(d, f.vocab());
  StructuralMode mode{StructuralMode::Kind::PastAware, 0.66};
  for (int k = 1; k <= plan.length(); ++k) {
    double x = a.class_log_likelihood(f.lm, f.vocab(), stream, plan, k, mode);
    double y = c.class_log_likelihood(f.lm, f.vocab(), stream, plan, k, mode);
    CHECK(x == y);
  }
}

TEST_CASE("contextualizer-free variant scores a sentence standalone") {
  auto& f = fx();
  int C = f.data.train.schema.num_classes();
  DiscrimConfig cfg = f.dcfg;
  cfg.use_contextualizer = false;
  cfg.window = 0;
  cfg.epochs = 4;
  cfg.lr = 2e-3;
  cfg.seed = 13;
  Discriminator disc(cfg, 16, C);
  auto report = disc.train(f.data.train, &f.data.dev, f.lm);
  REQUIRE(report.dev_f1.size() == 1);
  CHECK(report.dev_f1[0] > 0.55);

  // The same sentence always scores the same, no matter which document
  // carried it: the stream is rebuilt from the sentence alone.
  const auto& sent = f.doc(9).body[2];
  auto ss = standalone_sentence_stream(sent.tokens, f.vocab());
  ControlPlan plan;
  plan.tags = {sent.tag};
  double s1 = disc.score_from_hidden(f.lm.hidden_states(ss.stream), ss.layout, plan, 1,
                                     {StructuralMode::Kind::LocalOnly, 0.0});
  auto ss2 = standalone_sentence_stream(sent.tokens, f.vocab());
  double s2 = disc.score_from_hidden(f.lm.hidden_states(ss2.stream), ss2.layout, plan,
                                     1, {StructuralMode::Kind::LocalOnly, 0.0});
  CHECK(s1 == s2);
  CHECK(std::isfinite(s1));
}

TEST_CASE("incompatible models are rejected") {
  auto& f = fx();
  int C = f.data.train.schema.num_classes();
  Discriminator disc(f.dcfg, 16, C);

  LmConfig wide = Fixture::small_lm();
  wide.d_model = 32;
  Lm other(wide, f.vocab().size());
  CHECK_THROWS_AS(disc.check_compatible(other), Error);

  // A vocabulary-hash mismatch surfaces once both sides carry one.
  DiscrimConfig quick = f.dcfg;
  quick.epochs = 0;
  Discriminator d2(quick, 16, C);
  d2.train(f.data.train, nullptr, f.lm);
  d2.vocab_hash ^= 1;
  CHECK_THROWS_AS(d2.check_compatible(f.lm), Error);

  // Bad sentence index and overlong plans are rejected.
  const Document& d = f.doc(0);
  ControlPlan plan = plan_from_document(d);
  auto stream = flatten_document(d, f.vocab());
  CHECK_THROWS_AS(
      disc.class_log_likelihood(f.lm, f.vocab(), stream, plan, 0,
                                {StructuralMode::Kind::LocalOnly, 0.0}),
      Error);
  CHECK_THROWS_AS(
      disc.class_log_likelihood(f.lm, f.vocab(), stream, plan, plan.length() + 1,
                                {StructuralMode::Kind::LocalOnly, 0.0}),
      Error);
}

TEST_CASE("config and mode names round-trip through json") {
  DiscrimConfig cfg;
  cfg.window = 2;
  cfg.label_width = 12;
  cfg.use_contextualizer = false;
  cfg.prefix_training = false;
  cfg.epochs = 17;
  cfg.lr = 5e-4;
  cfg.seed = 99;
  DiscrimConfig back = DiscrimConfig::from_json(cfg.to_json());
  CHECK(back.window == cfg.window);
  CHECK(back.label_width == cfg.label_width);
  CHECK(back.use_contextualizer == cfg.use_contextualizer);
  CHECK(back.prefix_training == cfg.prefix_training);
  CHECK(back.epochs == cfg.epochs);
  CHECK(back.lr == cfg.lr);
  CHECK(back.seed == cfg.seed);

  for (auto kind : {StructuralMode::Kind::LocalOnly, StructuralMode::Kind::PastAware,
                    StructuralMode::Kind::FullSequence})
    CHECK(StructuralMode::kind_from_name(StructuralMode::kind_name(kind)) == kind);
  CHECK_THROWS_AS(StructuralMode::kind_from_name("sideways"), Error);
}
