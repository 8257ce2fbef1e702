#include "edit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"
#include "util.hpp"

namespace seqctl {

using nlohmann::json;

namespace {

StructuralMode local_mode() {
  StructuralMode m;
  m.kind = StructuralMode::Kind::LocalOnly;
  return m;
}

// Offset-0 class log-likelihood of one sentence on its own.
double standalone_class_ll(const Lm& lm, const Discriminator& disc,
                           const Vocabulary& vocab, const std::vector<int>& tokens,
                           int tag) {
  auto ss = standalone_sentence_stream(tokens, vocab);
  ControlPlan plan;
  plan.tags = {tag};
  Mat h = lm.hidden_states(ss.stream);
  return disc.score_from_hidden(h, ss.layout, plan, 1, local_mode());
}

json num_or_null(double x) { return std::isfinite(x) ? json(x) : json(); }

}  // namespace

std::vector<double> saliency(const Lm& lm, const Discriminator& edit_disc,
                             const Vocabulary& vocab,
                             const std::vector<int>& sentence, int tag) {
  require(!sentence.empty(), Error::Kind::InvalidArgument,
          "saliency: empty sentence");
  require(tag >= 0 && tag < edit_disc.num_classes(), Error::Kind::InvalidArgument,
          "saliency: tag out of range");
  require(!edit_disc.config().use_contextualizer, Error::Kind::Incompatible,
          "saliency: edit discriminator must have the contextualizer off");
  edit_disc.check_compatible(lm);

  auto ss = standalone_sentence_stream(sentence, vocab);
  ControlPlan plan;
  plan.tags = {tag};
  Mat h = lm.hidden_states(ss.stream);
  Mat dh = edit_disc.loss_grad_wrt_hidden(h, ss.layout, plan, 1, local_mode());
  Mat d_emb = lm.backward_to_embeddings(ss.stream, dh);

  std::vector<double> scores(sentence.size());
  for (int i = 0; i < static_cast<int>(sentence.size()); ++i) {
    const double* row = d_emb.row(i + 1);  // row 0 is <bos>
    double s2 = 0.0;
    for (int j = 0; j < d_emb.cols; ++j) s2 += row[j] * row[j];
    scores[i] = std::sqrt(s2);
  }
  return scores;
}

std::vector<int> cull(const std::vector<double>& scores,
                      const std::vector<int>& sentence, const Vocabulary& vocab) {
  require(scores.size() == sentence.size(), Error::Kind::InvalidArgument,
          "cull: score count does not match the sentence");
  std::vector<int> out = maskable_positions(sentence, vocab);
  std::stable_sort(out.begin(), out.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  return out;
}

void EditConfig::validate() const {
  require(rounds >= 1, Error::Kind::InvalidArgument, "edit: rounds must be >= 1");
  require(static_cast<int>(mask_fractions.size()) >= rounds,
          Error::Kind::InvalidArgument, "edit: a mask fraction per round is required");
  for (double f : mask_fractions)
    require(f > 0.0 && f <= 1.0, Error::Kind::InvalidArgument,
            "edit: mask fractions must lie in (0, 1]");
  require(candidates >= 1, Error::Kind::InvalidArgument,
          "edit: candidates must be >= 1");
  require(alpha >= 0.0 && alpha <= 1.0, Error::Kind::InvalidArgument,
          "edit: alpha must lie in [0, 1]");
  require(temperature > 0.0, Error::Kind::InvalidArgument,
          "edit: temperature must be positive");
}

std::string EditConfig::to_json() const {
  json j;
  j["rounds"] = rounds;
  j["mask_fractions"] = mask_fractions;
  j["candidates"] = candidates;
  j["alpha"] = alpha;
  j["temperature"] = temperature;
  j["seed"] = seed;
  return j.dump();
}

EditConfig EditConfig::from_json(const std::string& text) {
  EditConfig c;
  try {
    json j = json::parse(text);
    c.rounds = j.value("rounds", c.rounds);
    if (j.contains("mask_fractions"))
      c.mask_fractions = j["mask_fractions"].get<std::vector<double>>();
    c.candidates = j.value("candidates", c.candidates);
    c.alpha = j.value("alpha", c.alpha);
    c.temperature = j.value("temperature", c.temperature);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    fail(Error::Kind::Format, std::string("edit config: ") + e.what());
  }
  return c;
}

std::string EditRecord::to_json(const Vocabulary& vocab) const {
  json j;
  j["edited"] = edited;
  j["before_class_ll"] = num_or_null(before_ll);
  j["after_class_ll"] = num_or_null(after_ll);
  if (!skip_reason.empty()) j["skip_reason"] = skip_reason;
  j["rounds"] = json::array();
  for (const auto& r : rounds) {
    json jr;
    jr["fraction"] = r.fraction;
    jr["saliency"] = r.saliency;
    jr["eligible"] = r.eligible;
    jr["masked_positions"] = r.masked_positions;
    jr["accepted"] = r.accepted;
    jr["candidates"] = json::array();
    for (const auto& c : r.candidates) {
      json jc;
      jc["text"] = detokenize(c.tokens, vocab);
      jc["class_ll"] = num_or_null(c.class_ll);
      jc["doc_ppl"] = num_or_null(c.doc_ppl);
      jc["combined"] = num_or_null(c.combined);
      jc["qualifies"] = c.qualifies;
      jr["candidates"].push_back(std::move(jc));
    }
    j["rounds"].push_back(std::move(jr));
  }
  return j.dump();
}

std::pair<std::vector<int>, EditRecord> edit_sentence(
    const std::vector<int>& sentence, int tag, const std::vector<int>& doc_prefix,
    const Lm& lm, const Discriminator& edit_disc, const Infiller& infiller,
    const Vocabulary& vocab, const EditConfig& config, Rng& rng) {
  config.validate();
  require(!edit_disc.config().use_contextualizer, Error::Kind::Incompatible,
          "edit: discriminator must be the no-contextualizer variant");
  edit_disc.check_compatible(lm);
  require(infiller.vocab_size() == vocab.size(), Error::Kind::Incompatible,
          "edit: infiller vocabulary size mismatch");
  if (infiller.vocab_hash != 0)
    require(infiller.vocab_hash == vocab.hash(), Error::Kind::Incompatible,
            "edit: infiller trained against a different vocabulary");
  require(tag >= 0 && tag < edit_disc.num_classes(), Error::Kind::InvalidArgument,
          "edit: tag out of range");
  require(!doc_prefix.empty() && doc_prefix.front() == vocab.bos(),
          Error::Kind::InvalidArgument,
          "edit: document prefix must start with <bos>");

  EditRecord rec;
  if (sentence.empty()) {
    rec.skip_reason = "empty sentence";
    rec.before_ll = rec.after_ll = std::numeric_limits<double>::quiet_NaN();
    return {sentence, rec};
  }

  rec.before_ll = standalone_class_ll(lm, edit_disc, vocab, sentence, tag);
  rec.after_ll = rec.before_ll;

  auto scores = saliency(lm, edit_disc, vocab, sentence, tag);
  auto eligible = cull(scores, sentence, vocab);
  if (eligible.empty()) {
    rec.skip_reason = "no maskable words";
    return {sentence, rec};
  }

  for (int r = 0; r < config.rounds; ++r) {
    EditRecord::Round round;
    round.fraction = config.mask_fractions[r];
    round.saliency = scores;
    round.eligible = eligible;
    int n = static_cast<int>(
        std::lround(round.fraction * static_cast<double>(eligible.size())));
    n = std::max(1, n);
    n = std::min(n, static_cast<int>(eligible.size()));
    n = std::min(n, Vocabulary::kNumSentinels);
    round.masked_positions.assign(eligible.begin(), eligible.begin() + n);
    std::sort(round.masked_positions.begin(), round.masked_positions.end());

    MaskedSentence ms = mask_sentence(sentence, round.masked_positions, vocab);
    std::vector<int> tmpl = render_infill_template(ms, tag, vocab);

    for (int c = 0; c < config.candidates; ++c) {
      EditRecord::Candidate cand;
      cand.class_ll = std::numeric_limits<double>::quiet_NaN();
      cand.doc_ppl = std::numeric_limits<double>::quiet_NaN();
      cand.combined = std::numeric_limits<double>::quiet_NaN();
      try {
        auto spans =
            infiller.sample_spans(tmpl, ms.spans, config.temperature, vocab, rng);
        cand.tokens = restore_sentence(ms, spans, vocab);
        cand.class_ll = standalone_class_ll(lm, edit_disc, vocab, cand.tokens, tag);
        std::vector<int> full = doc_prefix;
        full.insert(full.end(), cand.tokens.begin(), cand.tokens.end());
        full.push_back(vocab.eos());
        cand.doc_ppl = lm.perplexity(full);
        cand.qualifies =
            std::isfinite(cand.class_ll) && cand.class_ll > rec.before_ll;
      } catch (const Error&) {
        cand.qualifies = false;  // unscoreable candidates drop out silently
      }
      round.candidates.push_back(std::move(cand));
    }

    std::vector<int> pool;  // candidates with both scores available
    for (int i = 0; i < static_cast<int>(round.candidates.size()); ++i)
      if (std::isfinite(round.candidates[i].class_ll) &&
          std::isfinite(round.candidates[i].doc_ppl))
        pool.push_back(i);
    if (!pool.empty()) {
      double mc = 0.0, mp = 0.0;
      for (int i : pool) {
        mc += round.candidates[i].class_ll;
        mp += round.candidates[i].doc_ppl;
      }
      mc /= static_cast<double>(pool.size());
      mp /= static_cast<double>(pool.size());
      double vc = 0.0, vp = 0.0;
      for (int i : pool) {
        double dc = round.candidates[i].class_ll - mc;
        double dp = round.candidates[i].doc_ppl - mp;
        vc += dc * dc;
        vp += dp * dp;
      }
      double sc = std::sqrt(vc / static_cast<double>(pool.size()));
      double sp = std::sqrt(vp / static_cast<double>(pool.size()));
      for (int i : pool) {
        auto& cd = round.candidates[i];
        double zc = sc > 0.0 ? (cd.class_ll - mc) / sc : 0.0;
        double zp = sp > 0.0 ? (cd.doc_ppl - mp) / sp : 0.0;
        cd.combined = config.alpha * zc + (1.0 - config.alpha) * -zp;
      }
    }

    int best = -1;
    for (int i = 0; i < static_cast<int>(round.candidates.size()); ++i) {
      const auto& cd = round.candidates[i];
      if (!cd.qualifies || !std::isfinite(cd.combined)) continue;
      if (best < 0 || cd.combined > round.candidates[best].combined) best = i;
    }
    round.accepted = best;
    rec.rounds.push_back(std::move(round));
    if (best >= 0) {
      const auto& cd = rec.rounds.back().candidates[best];
      rec.edited = true;
      rec.after_ll = cd.class_ll;
      return {cd.tokens, rec};
    }
  }

  rec.skip_reason = "no qualifying candidate";
  return {sentence, rec};
}

std::pair<Document, std::vector<EditRecord>> edit_document(
    const Document& doc, const ControlPlan& plan, const Lm& lm,
    const Discriminator& edit_disc, const Infiller& infiller,
    const Vocabulary& vocab, const EditConfig& config) {
  config.validate();
  require(plan.length() == doc.num_sentences(), Error::Kind::InvalidArgument,
          "edit: plan length does not match the document");
  Document out = doc;
  std::vector<EditRecord> records;
  for (int k = 0; k < out.num_sentences(); ++k) {
    Rng rng = Rng::forked(config.seed, 0xed170000ULL + static_cast<uint64_t>(k));
    auto prefix = flatten_prefix(out, k, vocab);
    auto [tokens, rec] = edit_sentence(out.body[k].tokens, plan.tags[k], prefix, lm,
                                       edit_disc, infiller, vocab, config, rng);
    out.body[k].tokens = std::move(tokens);
    records.push_back(std::move(rec));
  }
  return {out, records};
}

}  // namespace seqctl
