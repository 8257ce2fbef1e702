#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <utility>

#include "common.hpp"
#include "decode.hpp"
#include "doctest.h"
#include "edit.hpp"
#include "infill.hpp"
#include "synthetic.hpp"
#include "util.hpp"

using namespace seqctl;
using namespace seqctl::testing;

namespace {

// Trained stack on a mixed-density corpus: markers sparse enough that
// saliency has something to find, dense enough that training converges fast.
struct Fixture {
  SyntheticCorpus data;
  Lm lm;
  Discriminator edit_disc;
  Infiller infiller;

  static SyntheticSpec spec() {
    SyntheticSpec s = SyntheticSpec::defaults();
    s.vocab_size = 192;
    s.docs_train = 40;
    s.docs_dev = 12;
    s.docs_test = 4;
    s.rho_marker = 0.35;
    s.rho_topic = 0.15;
    s.seed = 11;
    return s;
  }

  static LmConfig lm_config() {
    LmConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.d_model = 16;
    cfg.context = 256;
    cfg.epochs = 3;
    cfg.lr = 3e-3;
    cfg.seed = 5;
    return cfg;
  }

  static DiscrimConfig disc_config() {
    DiscrimConfig cfg;
    cfg.window = 1;
    cfg.label_width = 8;
    cfg.ctx_layers = 1;
    cfg.ctx_heads = 2;
    cfg.use_contextualizer = false;
    cfg.head_hidden = 16;
    cfg.epochs = 10;
    cfg.lr = 3e-3;
    cfg.batch_docs = 2;
    cfg.seed = 23;
    return cfg;
  }

  static InfillerConfig infiller_config() {
    InfillerConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.d_model = 48;
    cfg.enc_context = 48;
    cfg.dec_context = 32;
    cfg.lr = 2e-3;
    cfg.epochs = 10;
    cfg.batch_pairs = 16;
    cfg.pairs_per_sentence = 2;
    cfg.seed = 13;
    return cfg;
  }

  Infiller::TrainReport infill_report;

  Fixture()
      : data(generate_synthetic_corpus(spec(), default_schema())),
        lm(lm_config(), data.train.vocab.size()),
        edit_disc(disc_config(), lm_config().d_model,
                  data.train.schema.num_classes()),
        infiller(infiller_config(), data.train.vocab.size()) {
    lm.train(data.train, nullptr);
    edit_disc.train(data.train, &data.dev, lm);
    infill_report = infiller.train(data.train, &data.dev);
  }

  const Vocabulary& vocab() const { return data.train.vocab; }
};

Fixture& fx() {
  static Fixture f;
  return f;
}

// All-marker corpus for the marker-infilling measurement.
struct MarkerFixture {
  SyntheticCorpus data;
  Infiller infiller;

  static SyntheticSpec spec() {
    SyntheticSpec s = SyntheticSpec::defaults();
    s.vocab_size = 192;
    s.docs_train = 30;
    s.docs_dev = 10;
    s.docs_test = 2;
    s.rho_marker = 1.0;
    s.rho_topic = 0.0;
    s.seed = 19;
    return s;
  }

  MarkerFixture()
      : data(generate_synthetic_corpus(spec(), default_schema())),
        infiller(
            [] {
              InfillerConfig cfg = Fixture::infiller_config();
              cfg.seed = 17;
              return cfg;
            }(),
            data.train.vocab.size()) {
    infiller.train(data.train, nullptr);
  }
};

MarkerFixture& mfx() {
  static MarkerFixture f;
  return f;
}

StructuralMode local_only() {
  StructuralMode m;
  m.kind = StructuralMode::Kind::LocalOnly;
  return m;
}

double standalone_ll(const Lm& lm, const Discriminator& disc,
                     const Vocabulary& vocab, const std::vector<int>& tokens,
                     int tag) {
  auto ss = standalone_sentence_stream(tokens, vocab);
  ControlPlan plan;
  plan.tags = {tag};
  Mat h = lm.hidden_states(ss.stream);
  return disc.score_from_hidden(h, ss.layout, plan, 1, local_only());
}

int first_id_of(const Vocabulary& vocab, TokenCategory cat, int skip = 0) {
  for (int id = 0; id < vocab.size(); ++id) {
    if (vocab.is_special(id) || vocab.category(id) != cat) continue;
    if (skip-- == 0) return id;
  }
  REQUIRE(false);
  return -1;
}

}  // namespace

// ---------------------------------------------------------------------------
// Masking and serialization
// ---------------------------------------------------------------------------

TEST_CASE("mask/restore round-trips and merges adjacent positions") {
  auto& f = fx();
  const Vocabulary& v = f.vocab();
  Rng rng(71);
  for (int trial = 0; trial < 60; ++trial) {
    int len = rng.uniform_int(1, 12);
    std::vector<int> sent(len);
    for (auto& t : sent) {
      do {
        t = rng.uniform_int(0, v.size() - 1);
      } while (v.is_special(t));
    }
    std::vector<int> all(len);
    for (int i = 0; i < len; ++i) all[i] = i;
    rng.shuffle(all);
    int n = rng.uniform_int(0, std::min(len, Vocabulary::kNumSentinels));
    std::vector<int> pos(all.begin(), all.begin() + n);

    MaskedSentence ms = mask_sentence(sent, pos, v);
    CHECK(ms.original == sent);
    int runs = 0;
    std::sort(pos.begin(), pos.end());
    for (size_t i = 0; i < pos.size(); ++i)
      if (i == 0 || pos[i] != pos[i - 1] + 1) ++runs;
    CHECK(ms.spans == runs);

    // Sentinels appear in strictly increasing order, each exactly once.
    int seen = 0;
    for (int t : ms.tokens)
      if (v.is_sentinel(t)) CHECK(t == v.sentinel(seen++));
    CHECK(seen == ms.spans);

    auto spans = gold_spans(ms, v);
    CHECK(restore_sentence(ms, spans, v) == sent);
    auto target = infill_target(ms, v);
    CHECK(parse_infill_target(target, ms.spans, v) == spans);
    if (n == 0) {
      CHECK(ms.tokens == sent);
      CHECK(target.empty());
    }
  }
}

TEST_CASE("masking rejects bad positions and restoring checks counts") {
  auto& f = fx();
  const Vocabulary& v = f.vocab();
  int w = first_id_of(v, TokenCategory::Function);
  std::vector<int> sent{w, w, w};
  CHECK_THROWS_AS(mask_sentence(sent, {3}, v), Error);
  CHECK_THROWS_AS(mask_sentence(sent, {-1}, v), Error);
  CHECK_THROWS_AS(mask_sentence(sent, {1, 1}, v), Error);

  MaskedSentence ms = mask_sentence(sent, {0, 2}, v);
  CHECK(ms.spans == 2);
  CHECK_THROWS_AS(restore_sentence(ms, {{w}}, v), Error);

  // Targets must open with <m0> and keep sentinel order.
  CHECK_THROWS_AS(parse_infill_target({w, v.sentinel(0)}, 1, v), Error);
  CHECK_THROWS_AS(parse_infill_target({v.sentinel(1)}, 2, v), Error);
  CHECK_THROWS_AS(parse_infill_target({v.sentinel(0)}, 2, v), Error);
}

TEST_CASE("template serialization round-trips") {
  auto& f = fx();
  const Vocabulary& v = f.vocab();
  const Document& d = f.data.dev.docs[0];
  for (int si = 0; si < d.num_sentences(); ++si) {
    const auto& sent = d.body[si].tokens;
    auto eligible = maskable_positions(sent, v);
    if (eligible.empty()) continue;
    MaskedSentence ms = mask_sentence(sent, {eligible.front()}, v);
    auto tmpl = render_infill_template(ms, d.body[si].tag, v);
    auto parsed = parse_infill_template(tmpl, v);
    CHECK(parsed.tag == d.body[si].tag);
    CHECK(parsed.tokens == ms.tokens);
  }
  // Malformed headers are format errors.
  MaskedSentence ms = mask_sentence({first_id_of(v, TokenCategory::Function)}, {}, v);
  auto tmpl = render_infill_template(ms, 0, v);
  std::vector<int> no_label(tmpl.begin() + 1, tmpl.end());
  CHECK_THROWS_AS(parse_infill_template(no_label, v), Error);
  std::vector<int> swapped = tmpl;
  std::swap(swapped[0], swapped[2]);
  CHECK_THROWS_AS(parse_infill_template(swapped, v), Error);
  CHECK_THROWS_AS(render_infill_template(ms, 99, v), Error);
}

TEST_CASE("maskable positions exclude topic and entity words") {
  auto& f = fx();
  const Vocabulary& v = f.vocab();
  int fn = first_id_of(v, TokenCategory::Function);
  int tp = first_id_of(v, TokenCategory::Topic);
  int en = first_id_of(v, TokenCategory::Entity);
  int dt = first_id_of(v, TokenCategory::Date);
  int mk = first_id_of(v, TokenCategory::Marker);
  std::vector<int> sent{tp, fn, en, dt, mk};
  CHECK(maskable_positions(sent, v) == std::vector<int>{1, 3, 4});
}

// ---------------------------------------------------------------------------
// Culling
// ---------------------------------------------------------------------------

TEST_CASE("cull orders by descending saliency with position tie-break") {
  auto& f = fx();
  const Vocabulary& v = f.vocab();
  int fn = first_id_of(v, TokenCategory::Function);
  int tp = first_id_of(v, TokenCategory::Topic);
  int dt = first_id_of(v, TokenCategory::Date);
  int mk = first_id_of(v, TokenCategory::Marker);

  std::vector<int> sent{fn, tp, dt, fn, mk};
  std::vector<double> scores{0.2, 9.0, 0.7, 0.2, 0.7};
  // Topic drops despite the top score; 0.7 tie resolves to position order.
  CHECK(cull(scores, sent, v) == std::vector<int>{2, 4, 0, 3});

  std::vector<int> topics{tp, tp, tp};
  CHECK(cull({1.0, 2.0, 3.0}, topics, v).empty());
  CHECK_THROWS_AS(cull({1.0, 2.0}, sent, v), Error);

  // Date words survive culling.
  auto kept = cull({1.0, 1.0}, std::vector<int>{dt, tp}, v);
  CHECK(kept == std::vector<int>{0});
}

// ---------------------------------------------------------------------------
// Saliency
// ---------------------------------------------------------------------------

TEST_CASE("saliency equals the embedding-gradient row norms and is deterministic") {
  auto& f = fx();
  const Document& d = f.data.dev.docs[1];
  const auto& sent = d.body[0].tokens;
  int tag = d.body[0].tag;

  auto ss = standalone_sentence_stream(sent, f.vocab());
  ControlPlan plan;
  plan.tags = {tag};
  Mat h = f.lm.hidden_states(ss.stream);
  Mat dh = f.edit_disc.loss_grad_wrt_hidden(h, ss.layout, plan, 1, local_only());
  Mat d_emb = f.lm.backward_to_embeddings(ss.stream, dh);

  auto scores = saliency(f.lm, f.edit_disc, f.vocab(), sent, tag);
  REQUIRE(scores.size() == sent.size());
  for (int i = 0; i < static_cast<int>(sent.size()); ++i) {
    double s2 = 0.0;
    for (int j = 0; j < d_emb.cols; ++j)
      s2 += d_emb.at(i + 1, j) * d_emb.at(i + 1, j);
    CHECK(scores[i] == std::sqrt(s2));
    CHECK(scores[i] >= 0.0);
  }
  CHECK(saliency(f.lm, f.edit_disc, f.vocab(), sent, tag) == scores);
  CHECK_THROWS_AS(saliency(f.lm, f.edit_disc, f.vocab(), {}, tag), Error);
  CHECK_THROWS_AS(saliency(f.lm, f.edit_disc, f.vocab(), sent, -1), Error);
}

TEST_CASE("saliency gradient matches finite differences at 1e-4") {
  auto& f = fx();
  nn::Param* emb = f.lm.params().find("lm.tok_emb");
  REQUIRE(emb != nullptr);

  int checked = 0;
  double worst = 0.0;
  for (int di = 0; di < 4 && checked < 24; ++di) {
    const Document& d = f.data.dev.docs[di];
    for (int si = 0; si < d.num_sentences() && checked < 24; ++si) {
      const auto& sent = d.body[si].tokens;
      int tag = d.body[si].tag;
      auto ss = standalone_sentence_stream(sent, f.vocab());
      ControlPlan plan;
      plan.tags = {tag};
      Mat h = f.lm.hidden_states(ss.stream);
      Mat dh =
          f.edit_disc.loss_grad_wrt_hidden(h, ss.layout, plan, 1, local_only());
      Mat d_emb = f.lm.backward_to_embeddings(ss.stream, dh);

      // Probe the largest-gradient coordinates at positions whose token
      // appears exactly once in the stream, so the weight derivative equals
      // the per-position embedding gradient.
      struct Coord {
        double mag;
        int i, j;
      };
      std::vector<Coord> coords;
      for (int i = 0; i < static_cast<int>(sent.size()); ++i) {
        int count = 0;
        for (int t : ss.stream)
          if (t == sent[i]) ++count;
        if (count != 1) continue;
        for (int j = 0; j < d_emb.cols; ++j)
          coords.push_back({std::fabs(d_emb.at(i + 1, j)), i, j});
      }
      if (coords.empty()) continue;
      std::sort(coords.begin(), coords.end(),
                [](const Coord& a, const Coord& b) { return a.mag > b.mag; });

      auto loss = [&]() {
        Mat hh = f.lm.hidden_states(ss.stream);
        return -f.edit_disc.score_from_hidden(hh, ss.layout, plan, 1,
                                              local_only());
      };
      for (int c = 0; c < 2 && c < static_cast<int>(coords.size()); ++c) {
        int i = coords[c].i, j = coords[c].j;
        double* w = emb->row(sent[i]) + j;
        double orig = *w;
        const double step = 1e-4;
        *w = orig + step;
        double up = loss();
        *w = orig - step;
        double down = loss();
        *w = orig;
        double fd = (up - down) / (2.0 * step);
        double an = d_emb.at(i + 1, j);
        if (std::fabs(fd) < 1e-7 && std::fabs(an) < 1e-7) continue;
        worst = std::max(worst, rel_err(an, fd));
        ++checked;
      }
    }
  }
  CAPTURE(worst);
  REQUIRE(checked >= 20);
  CHECK(worst < 1e-4);
}

TEST_CASE("planted markers score above the sentence median on dev") {
  auto& f = fx();
  int hits = 0, total = 0;
  for (size_t di = 0; di < f.data.dev.docs.size(); ++di) {
    const Document& d = f.data.dev.docs[di];
    const DocPlants& plants = f.data.dev_plants[di];
    for (int si = 0; si < d.num_sentences(); ++si) {
      const auto& planted = plants.sentence_positions[si];
      if (planted.empty() || d.body[si].length() < 3) continue;
      auto scores =
          saliency(f.lm, f.edit_disc, f.vocab(), d.body[si].tokens, d.body[si].tag);
      std::vector<double> sorted = scores;
      std::sort(sorted.begin(), sorted.end());
      size_t n = sorted.size();
      double median = n % 2 == 1 ? sorted[n / 2]
                                 : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
      double best = 0.0;
      for (int p : planted) best = std::max(best, scores[p]);
      ++total;
      if (best > median) ++hits;
    }
  }
  CAPTURE(hits);
  CAPTURE(total);
  REQUIRE(total >= 40);
  CHECK(static_cast<double>(hits) >= 0.8 * static_cast<double>(total));
}

// ---------------------------------------------------------------------------
// Infiller
// ---------------------------------------------------------------------------

TEST_CASE("infill pairs are deterministic and well formed") {
  auto& f = fx();
  InfillerConfig cfg = Fixture::infiller_config();
  Rng r1(99), r2(99);
  auto a = build_infill_pairs(f.data.train, cfg, r1);
  auto b = build_infill_pairs(f.data.train, cfg, r2);
  REQUIRE(!a.empty());
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].tmpl == b[i].tmpl);
    CHECK(a[i].target == b[i].target);
  }
  for (size_t i = 0; i < a.size(); i += 17) {
    const auto& p = a[i];
    auto parsed = parse_infill_template(p.tmpl, f.vocab());
    CHECK(parsed.tag == p.tag);
    CHECK(p.spans >= 1);
    CHECK(p.spans <= Vocabulary::kNumSentinels);
    auto spans = parse_infill_target(p.target, p.spans, f.vocab());
    // Splicing the target back into the template recovers a full sentence.
    MaskedSentence ms;
    ms.tokens = parsed.tokens;
    ms.spans = p.spans;
    auto restored = restore_sentence(ms, spans, f.vocab());
    for (int t : restored) CHECK(!f.vocab().is_special(t));
  }
}

TEST_CASE("infiller training lowers cross-entropy") {
  auto& f = fx();
  const auto& report = f.infill_report;
  REQUIRE(report.epoch_ce.size() == 10);
  CHECK(report.epoch_ce.back() < report.epoch_ce.front());
  CHECK(report.dev_ce > 0.0);
  CHECK(report.dev_ce < report.epoch_ce.front());
}

TEST_CASE("sampled spans respect the sentinel skeleton") {
  auto& f = fx();
  const Vocabulary& v = f.vocab();
  const Document& d = f.data.dev.docs[2];
  const auto& sent = d.body[0].tokens;
  auto eligible = maskable_positions(sent, v);
  REQUIRE(eligible.size() >= 2);
  std::vector<int> pos{eligible.front(), eligible.back()};
  MaskedSentence ms = mask_sentence(sent, pos, v);
  auto tmpl = render_infill_template(ms, d.body[0].tag, v);

  Rng r1(5), r2(5);
  auto s1 = f.infiller.sample_spans(tmpl, ms.spans, 1.0, v, r1);
  auto s2 = f.infiller.sample_spans(tmpl, ms.spans, 1.0, v, r2);
  CHECK(s1 == s2);
  REQUIRE(static_cast<int>(s1.size()) == ms.spans);
  for (const auto& span : s1) {
    CHECK(static_cast<int>(span.size()) <= f.infiller.config().max_span_tokens);
    for (int t : span) CHECK(!v.is_special(t));
  }
  auto restored = restore_sentence(ms, s1, v);
  CHECK(restored.size() >= sent.size() - pos.size());

  // A template without sentinels asks for nothing and consumes no draws.
  MaskedSentence plain = mask_sentence(sent, {}, v);
  auto tmpl0 = render_infill_template(plain, d.body[0].tag, v);
  Rng r3(9);
  CHECK(f.infiller.sample_spans(tmpl0, 0, 1.0, v, r3).empty());
  Rng witness(9);
  CHECK(r3.uniform() == witness.uniform());

  CHECK_THROWS_AS(f.infiller.sample_spans(tmpl, ms.spans + 1, 1.0, v, r1), Error);
  CHECK_THROWS_AS(f.infiller.sample_spans(tmpl, ms.spans, 0.0, v, r1), Error);
}

TEST_CASE("masked markers infill to the right class on all-marker data") {
  auto& m = mfx();
  const Vocabulary& v = m.data.train.vocab;
  RuleOracle oracle(m.data.train.schema, v);
  int hits = 0, total = 0;
  for (size_t di = 0; di < m.data.dev.docs.size(); ++di) {
    const Document& d = m.data.dev.docs[di];
    const DocPlants& plants = m.data.dev_plants[di];
    for (int si = 0; si < d.num_sentences(); ++si) {
      const auto& planted = plants.sentence_positions[si];
      if (planted.empty()) continue;
      int tag = d.body[si].tag;
      MaskedSentence ms = mask_sentence(d.body[si].tokens, {planted.front()}, v);
      auto tmpl = render_infill_template(ms, tag, v);
      auto logits = m.infiller.next_logits(tmpl, {v.sentinel(0)}, v);

      std::vector<int> ids(logits.size());
      for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
      std::partial_sort(ids.begin(), ids.begin() + 3, ids.end(),
                        [&](int a, int b) { return logits[a] > logits[b]; });
      bool hit = false;
      for (int r = 0; r < 3; ++r) {
        int id = ids[r];
        if (v.category(id) == TokenCategory::Marker &&
            oracle.classify({id}) == tag)
          hit = true;
      }
      ++total;
      if (hit) ++hits;
    }
  }
  CAPTURE(hits);
  CAPTURE(total);
  REQUIRE(total >= 40);
  CHECK(static_cast<double>(hits) >= 0.8 * static_cast<double>(total));
}

TEST_CASE("infiller checkpoints round-trip") {
  auto& f = fx();
  const char* path = "/tmp/seqctl_test_infiller.ckpt";
  f.infiller.save(path);
  Infiller loaded = Infiller::load(path);
  CHECK(loaded.vocab_hash == f.infiller.vocab_hash);
  CHECK(loaded.config().d_model == f.infiller.config().d_model);

  const Document& d = f.data.dev.docs[0];
  auto eligible = maskable_positions(d.body[0].tokens, f.vocab());
  REQUIRE(!eligible.empty());
  MaskedSentence ms = mask_sentence(d.body[0].tokens, {eligible.front()}, f.vocab());
  auto tmpl = render_infill_template(ms, d.body[0].tag, f.vocab());
  auto a = f.infiller.next_logits(tmpl, {f.vocab().sentinel(0)}, f.vocab());
  auto b = loaded.next_logits(tmpl, {f.vocab().sentinel(0)}, f.vocab());
  CHECK(a == b);

  const char* lm_path = "/tmp/seqctl_test_lm_as_infiller.ckpt";
  f.lm.save(lm_path);
  CHECK_THROWS_AS(Infiller::load(lm_path), Error);
  std::remove(path);
  std::remove(lm_path);
}

// ---------------------------------------------------------------------------
// Edit loop
// ---------------------------------------------------------------------------

TEST_CASE("edit: accepted edits strictly improve, fallbacks are verbatim") {
  auto& f = fx();
  EditConfig cfg;
  cfg.seed = 31;
  int edited = 0, total = 0;
  for (int di = 0; di < 6; ++di) {
    const Document& d = f.data.dev.docs[di];
    ControlPlan plan = plan_from_document(d);
    auto [out, recs] =
        edit_document(d, plan, f.lm, f.edit_disc, f.infiller, f.vocab(), cfg);
    REQUIRE(static_cast<int>(recs.size()) == d.num_sentences());
    for (int k = 0; k < d.num_sentences(); ++k) {
      const EditRecord& r = recs[k];
      CHECK(standalone_ll(f.lm, f.edit_disc, f.vocab(), d.body[k].tokens,
                          plan.tags[k]) == r.before_ll);
      for (const auto& round : r.rounds)
        for (const auto& c : round.candidates)
          if (c.qualifies) CHECK(c.class_ll > r.before_ll);
      if (r.edited) {
        ++edited;
        CHECK(r.skip_reason.empty());
        CHECK(r.after_ll > r.before_ll);
        REQUIRE(!r.rounds.empty());
        const auto& last = r.rounds.back();
        REQUIRE(last.accepted >= 0);
        CHECK(out.body[k].tokens == last.candidates[last.accepted].tokens);
        CHECK(standalone_ll(f.lm, f.edit_disc, f.vocab(), out.body[k].tokens,
                            plan.tags[k]) == r.after_ll);
        // Acceptance stops the round loop.
        for (size_t ri = 0; ri + 1 < r.rounds.size(); ++ri)
          CHECK(r.rounds[ri].accepted == -1);
      } else {
        CHECK(out.body[k].tokens == d.body[k].tokens);
        CHECK(r.after_ll == r.before_ll);
        CHECK(!r.skip_reason.empty());
      }
      ++total;
    }
  }
  CAPTURE(edited);
  REQUIRE(total >= 30);
  CHECK(edited >= 1);
}

TEST_CASE("edit: combined scores recompute from the record") {
  auto& f = fx();
  EditConfig cfg;
  cfg.seed = 47;
  const Document& d = f.data.dev.docs[7];
  ControlPlan plan = plan_from_document(d);
  auto [out, recs] =
      edit_document(d, plan, f.lm, f.edit_disc, f.infiller, f.vocab(), cfg);
  (void)out;
  int rounds_seen = 0;
  for (const auto& r : recs) {
    for (const auto& round : r.rounds) {
      ++rounds_seen;
      std::vector<int> pool;
      for (int i = 0; i < static_cast<int>(round.candidates.size()); ++i)
        if (std::isfinite(round.candidates[i].class_ll) &&
            std::isfinite(round.candidates[i].doc_ppl))
          pool.push_back(i);
      if (pool.empty()) continue;
      double mc = 0.0, mp = 0.0;
      for (int i : pool) {
        mc += round.candidates[i].class_ll;
        mp += round.candidates[i].doc_ppl;
      }
      mc /= static_cast<double>(pool.size());
      mp /= static_cast<double>(pool.size());
      double vc = 0.0, vp = 0.0;
      for (int i : pool) {
        vc += (round.candidates[i].class_ll - mc) * (round.candidates[i].class_ll - mc);
        vp += (round.candidates[i].doc_ppl - mp) * (round.candidates[i].doc_ppl - mp);
      }
      double sc = std::sqrt(vc / static_cast<double>(pool.size()));
      double sp = std::sqrt(vp / static_cast<double>(pool.size()));
      int best = -1;
      for (int i : pool) {
        double zc = sc > 0.0 ? (round.candidates[i].class_ll - mc) / sc : 0.0;
        double zp = sp > 0.0 ? (round.candidates[i].doc_ppl - mp) / sp : 0.0;
        double combined = cfg.alpha * zc + (1.0 - cfg.alpha) * -zp;
        CHECK(std::fabs(combined - round.candidates[i].combined) <= 1e-12);
        if (!round.candidates[i].qualifies) continue;
        if (best < 0 || round.candidates[i].combined >
                            round.candidates[best].combined)
          best = i;
      }
      CHECK(round.accepted == best);
    }
  }
  CHECK(rounds_seen >= 3);
}

TEST_CASE("edit: skip paths never change the sentence") {
  auto& f = fx();
  const Vocabulary& v = f.vocab();
  EditConfig cfg;
  Rng rng(3);
  auto prefix = flatten_prefix(f.data.dev.docs[0], 0, v);

  int tp = first_id_of(v, TokenCategory::Topic);
  std::vector<int> topics{tp, first_id_of(v, TokenCategory::Topic, 1), tp};
  auto [same, rec] = edit_sentence(topics, 2, prefix, f.lm, f.edit_disc,
                                   f.infiller, v, cfg, rng);
  CHECK(same == topics);
  CHECK(!rec.edited);
  CHECK(rec.skip_reason == "no maskable words");
  CHECK(rec.rounds.empty());
  CHECK(rec.after_ll == rec.before_ll);

  auto [empty_out, empty_rec] =
      edit_sentence({}, 2, prefix, f.lm, f.edit_disc, f.infiller, v, cfg, rng);
  CHECK(empty_out.empty());
  CHECK(empty_rec.skip_reason == "empty sentence");
  CHECK(std::isnan(empty_rec.before_ll));

  // Record serialization stays valid JSON with non-finite scores.
  auto text = empty_rec.to_json(v);
  CHECK(text.find("null") != std::string::npos);
}

TEST_CASE("edit: validation rejects incompatible pieces") {
  auto& f = fx();
  const Vocabulary& v = f.vocab();
  EditConfig cfg;
  Rng rng(4);
  const auto& sent = f.data.dev.docs[0].body[0].tokens;
  auto prefix = flatten_prefix(f.data.dev.docs[0], 0, v);

  CHECK_THROWS_AS(edit_sentence(sent, 99, prefix, f.lm, f.edit_disc, f.infiller,
                                v, cfg, rng),
                  Error);
  std::vector<int> bad_prefix{v.eos()};
  CHECK_THROWS_AS(edit_sentence(sent, 0, bad_prefix, f.lm, f.edit_disc,
                                f.infiller, v, cfg, rng),
                  Error);

  // A contextualized discriminator is not an edit discriminator.
  DiscrimConfig ctx_cfg = Fixture::disc_config();
  ctx_cfg.use_contextualizer = true;
  ctx_cfg.epochs = 0;
  Discriminator ctx_disc(ctx_cfg, 16, f.data.train.schema.num_classes());
  ctx_disc.vocab_hash = f.lm.vocab_hash;
  CHECK_THROWS_AS(edit_sentence(sent, 0, prefix, f.lm, ctx_disc, f.infiller, v,
                                cfg, rng),
                  Error);
  CHECK_THROWS_AS(saliency(f.lm, ctx_disc, v, sent, 0), Error);

  EditConfig bad = cfg;
  bad.rounds = 4;  // only three fractions configured
  CHECK_THROWS_AS(edit_sentence(sent, 0, prefix, f.lm, f.edit_disc, f.infiller,
                                v, bad, rng),
                  Error);
  EditConfig bad2 = cfg;
  bad2.alpha = 1.5;
  CHECK_THROWS_AS(bad2.validate(), Error);
}

TEST_CASE("edit: documents edit deterministically and respect the plan") {
  auto& f = fx();
  EditConfig cfg;
  cfg.seed = 52;
  const Document& d = f.data.dev.docs[3];
  ControlPlan plan = plan_from_document(d);
  auto [a, ra] =
      edit_document(d, plan, f.lm, f.edit_disc, f.infiller, f.vocab(), cfg);
  auto [b, rb] =
      edit_document(d, plan, f.lm, f.edit_disc, f.infiller, f.vocab(), cfg);
  REQUIRE(a.num_sentences() == b.num_sentences());
  for (int k = 0; k < a.num_sentences(); ++k) {
    CHECK(a.body[k].tokens == b.body[k].tokens);
    CHECK(ra[k].to_json(f.vocab()) == rb[k].to_json(f.vocab()));
  }
  CHECK(a.headline.tokens == d.headline.tokens);

  ControlPlan short_plan = plan;
  short_plan.tags.pop_back();
  CHECK_THROWS_AS(edit_document(d, short_plan, f.lm, f.edit_disc, f.infiller,
                                f.vocab(), cfg),
                  Error);
}

TEST_CASE("edit: oracle tag accuracy does not drop on naive generations") {
  auto& f = fx();
  RuleOracle oracle(f.data.train.schema, f.vocab());
  GenerationConfig gcfg;
  gcfg.method = Method::Naive;
  gcfg.max_sentence_tokens = 12;
  EditConfig ecfg;
  ecfg.seed = 8;

  int before = 0, after = 0, n = 0;
  for (int di = 0; di < 6; ++di) {
    ControlPlan plan = plan_from_document(f.data.dev.docs[di]);
    gcfg.seed = 100 + static_cast<uint64_t>(di);
    Document doc = naive_generate(plan, f.lm, f.vocab(), gcfg);
    auto [ed, recs] =
        edit_document(doc, plan, f.lm, f.edit_disc, f.infiller, f.vocab(), ecfg);
    (void)recs;
    for (int k = 0; k < doc.num_sentences(); ++k) {
      if (oracle.classify(doc.body[k].tokens) == plan.tags[k]) ++before;
      if (oracle.classify(ed.body[k].tokens) == plan.tags[k]) ++after;
      ++n;
    }
  }
  CAPTURE(before);
  CAPTURE(after);
  REQUIRE(n >= 30);
  CHECK(after >= before);
}
