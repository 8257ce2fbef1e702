#include "decode.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "nn.hpp"
#include "util.hpp"

namespace seqctl {

using nlohmann::json;

const char* method_name(Method m) {
  switch (m) {
    case Method::Naive: return "naive";
    case Method::Prompt: return "prompt";
    case Method::Dpc: return "dpc";
    case Method::Hsc: return "hsc";
  }
  return "dpc";
}

Method method_from_name(const std::string& name) {
  if (name == "naive") return Method::Naive;
  if (name == "prompt") return Method::Prompt;
  if (name == "dpc") return Method::Dpc;
  if (name == "hsc") return Method::Hsc;
  fail(Error::Kind::InvalidArgument, "unknown generation method '" + name + "'");
}

const char* prompt_variant_name(PromptVariant v) {
  switch (v) {
    case PromptVariant::Local: return "local";
    case PromptVariant::Past: return "past";
    case PromptVariant::Full: return "full";
  }
  return "full";
}

PromptVariant prompt_variant_from_name(const std::string& name) {
  if (name == "local") return PromptVariant::Local;
  if (name == "past") return PromptVariant::Past;
  if (name == "full") return PromptVariant::Full;
  fail(Error::Kind::InvalidArgument, "unknown prompt variant '" + name + "'");
}

void GenerationConfig::validate() const {
  require(gamma >= 0.0 && gamma <= 1.0, Error::Kind::InvalidArgument,
          "decode: gamma must be in [0, 1]");
  require(top_k >= 1, Error::Kind::InvalidArgument, "decode: top_k must be >= 1");
  require(temperature > 0.0, Error::Kind::InvalidArgument,
          "decode: temperature must be positive");
  require(max_sentence_tokens >= 1, Error::Kind::InvalidArgument,
          "decode: max_sentence_tokens must be >= 1");
  require(hsc_steps >= 0, Error::Kind::InvalidArgument,
          "decode: hsc_steps must be >= 0");
  require(hsc_step_size > 0.0, Error::Kind::InvalidArgument,
          "decode: hsc_step_size must be positive");
  require(hsc_horizon >= 1, Error::Kind::InvalidArgument,
          "decode: hsc_horizon must be >= 1");
  require(mode.b >= 0.0 && mode.b <= 1.0, Error::Kind::InvalidArgument,
          "decode: mode discount must be in [0, 1]");
}

std::string GenerationConfig::to_json() const {
  json j;
  j["method"] = method_name(method);
  j["mode"] = StructuralMode::kind_name(mode.kind);
  j["mode_b"] = mode.b;
  j["gamma"] = gamma;
  j["top_k"] = top_k;
  j["temperature"] = temperature;
  j["max_sentence_tokens"] = max_sentence_tokens;
  j["hsc_steps"] = hsc_steps;
  j["hsc_step_size"] = hsc_step_size;
  j["hsc_horizon"] = hsc_horizon;
  j["hsc_reuse"] = hsc_reuse;
  j["fusion"] = fusion == FusionSpace::Log ? "log" : "linear";
  j["greedy"] = greedy;
  j["edit"] = edit;
  j["seed"] = seed;
  return j.dump();
}

GenerationConfig GenerationConfig::from_json(const std::string& text) {
  GenerationConfig c;
  try {
    json j = json::parse(text);
    if (j.contains("method")) c.method = method_from_name(j["method"].get<std::string>());
    if (j.contains("mode"))
      c.mode.kind = StructuralMode::kind_from_name(j["mode"].get<std::string>());
    c.mode.b = j.value("mode_b", c.mode.b);
    c.gamma = j.value("gamma", c.gamma);
    c.top_k = j.value("top_k", c.top_k);
    c.temperature = j.value("temperature", c.temperature);
    c.max_sentence_tokens = j.value("max_sentence_tokens", c.max_sentence_tokens);
    c.hsc_steps = j.value("hsc_steps", c.hsc_steps);
    c.hsc_step_size = j.value("hsc_step_size", c.hsc_step_size);
    c.hsc_horizon = j.value("hsc_horizon", c.hsc_horizon);
    c.hsc_reuse = j.value("hsc_reuse", c.hsc_reuse);
    if (j.contains("fusion")) {
      std::string f = j["fusion"].get<std::string>();
      if (f == "log") c.fusion = FusionSpace::Log;
      else if (f == "linear") c.fusion = FusionSpace::Linear;
      else fail(Error::Kind::InvalidArgument, "unknown fusion space '" + f + "'");
    }
    c.greedy = j.value("greedy", c.greedy);
    c.edit = j.value("edit", c.edit);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    fail(Error::Kind::Format, std::string("generation config: ") + e.what());
  }
  return c;
}

std::string DecodeTrace::to_json() const {
  json j;
  j["tokens"] = json::array();
  for (const auto& r : tokens) {
    json row;
    row["position"] = r.position;
    row["k"] = r.k;
    row["candidates"] = r.candidates;
    row["naive_lp"] = r.naive_lp;
    if (r.has_class) row["class_ll"] = r.class_ll;
    else row["class_ll"] = nullptr;
    row["fused"] = r.fused;
    row["chosen"] = r.chosen;
    if (std::isnan(r.rng_draw)) row["rng_draw"] = nullptr;
    else row["rng_draw"] = r.rng_draw;
    if (r.hsc_fallback) row["hsc_fallback"] = true;
    j["tokens"].push_back(std::move(row));
  }
  j["sentences"] = json::array();
  for (const auto& s : sentences) {
    json row;
    row["k"] = s.k;
    row["tokens"] = s.tokens;
    row["reason"] = s.budget_hit ? "budget" : "eos";
    j["sentences"].push_back(std::move(row));
  }
  return j.dump();
}

// ---------------------------------------------------------------------------
// Shared decoding state
// ---------------------------------------------------------------------------

namespace {

struct DecodeState {
  const Lm& lm;
  const Vocabulary& vocab;
  LmSession session;
  std::vector<int> stream;

  DecodeState(const Lm& l, const Vocabulary& v, const std::vector<int>& ctx)
      : lm(l), vocab(v), session(l) {
    for (int t : ctx) push(t);
  }
  void push(int t) {
    session.push(t);
    stream.push_back(t);
  }
};

// Sample from softmax(scores / temperature) over parallel candidate arrays,
// or take the argmax when greedy. Candidates must be in ascending token id
// order so ties and the single CDF walk are deterministic.
int choose_index(const std::vector<double>& scores, const GenerationConfig& cfg,
                 Rng& rng, double* draw_out) {
  int n = static_cast<int>(scores.size());
  if (cfg.greedy) {
    int best = 0;
    for (int i = 1; i < n; ++i)
      if (scores[i] > scores[best]) best = i;
    *draw_out = std::numeric_limits<double>::quiet_NaN();
    return best;
  }
  double mx = scores[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, scores[i]);
  std::vector<double> w(scores.size());
  for (int i = 0; i < n; ++i) w[i] = std::exp((scores[i] - mx) / cfg.temperature);
  return rng.categorical(w.data(), n, draw_out);
}

double fuse_scores(const GenerationConfig& cfg, double cls, double naive) {
  double g = cfg.gamma;
  if (cfg.fusion == FusionSpace::Log) {
    if (g >= 1.0) return cls;
    return g * cls + (1.0 - g) * naive;
  }
  if (g >= 1.0) return cls;
  double m = std::max(cls, naive);
  return m + std::log(g * std::exp(cls - m) + (1.0 - g) * std::exp(naive - m));
}

// Candidate scores shared by Dpc and Naive (disc == nullptr or gamma == 0
// drops the class term, which is the naive distribution). prob is left empty;
// sampling runs on the unnormalized weights so every path walks the same CDF.
StepDistribution rescore_candidates(DecodeState& state, const Discriminator* disc,
                                    const ControlPlan& plan, int k,
                                    const GenerationConfig& cfg, bool sentence_start) {
  const std::vector<double>& logits = state.session.logits();
  int V = static_cast<int>(logits.size());
  std::vector<double> nlp(V);
  nn::log_softmax_row(logits.data(), V, nlp.data());

  std::vector<int> pool;
  pool.reserve(V);
  for (int id = 0; id < V; ++id)
    if (!(sentence_start && id == state.vocab.eos())) pool.push_back(id);

  int K = std::min(cfg.top_k, static_cast<int>(pool.size()));
  if (K < static_cast<int>(pool.size())) {
    std::sort(pool.begin(), pool.end(), [&](int a, int b) {
      if (nlp[a] != nlp[b]) return nlp[a] > nlp[b];
      return a < b;
    });
    pool.resize(K);
    std::sort(pool.begin(), pool.end());
  }

  StepDistribution dist;
  dist.ids = std::move(pool);
  bool use_class = disc != nullptr && cfg.gamma > 0.0;
  if (use_class) {
    dist.class_ll.resize(K);
    StreamLayout layout = parse_stream(state.stream, state.vocab);
    StepScorer scorer(*disc, state.session.hidden(), layout, plan, k, cfg.mode);
    for (int i = 0; i < K; ++i) {
      if (dist.ids[i] == state.vocab.eos()) {
        dist.class_ll[i] = scorer.score(nullptr, true);
      } else {
        LmSession::Peek pk = state.session.peek(dist.ids[i]);
        dist.class_ll[i] = scorer.score(pk.hidden.data(), false);
      }
    }
  }

  dist.naive_lp.resize(K);
  dist.fused.resize(K);
  for (int i = 0; i < K; ++i) {
    dist.naive_lp[i] = nlp[dist.ids[i]];
    dist.fused[i] =
        use_class ? fuse_scores(cfg, dist.class_ll[i], dist.naive_lp[i]) : dist.naive_lp[i];
  }
  return dist;
}

StepResult rescoring_step(DecodeState& state, const Discriminator* disc,
                          const ControlPlan& plan, int k, const GenerationConfig& cfg,
                          bool sentence_start, Rng& rng) {
  StepDistribution dist = rescore_candidates(state, disc, plan, k, cfg, sentence_start);
  double draw = 0.0;
  int idx = choose_index(dist.fused, cfg, rng, &draw);

  StepResult r;
  r.token = dist.ids[idx];
  r.row.position = static_cast<int>(state.stream.size());
  r.row.k = k;
  r.row.candidates = static_cast<int>(dist.ids.size());
  r.row.naive_lp = dist.naive_lp[idx];
  r.row.class_ll = dist.class_ll.empty() ? 0.0 : dist.class_ll[idx];
  r.row.has_class = !dist.class_ll.empty();
  r.row.fused = dist.fused[idx];
  r.row.chosen = r.token;
  r.row.rng_draw = draw;
  return r;
}

struct HscCache {
  int k = -1;
  int row0 = 0;
  Mat delta;
};

// Hidden-state perturbation step. Ascends the class log-likelihood over the
// trailing horizon rows of H, interpolates the perturbed logits with the
// plain ones, and samples. With gamma == 0 or steps == 0 this is the naive
// distribution exactly.
StepResult hsc_step_impl(DecodeState& state, const Discriminator& disc,
                         const ControlPlan& plan, int k, const GenerationConfig& cfg,
                         bool sentence_start, Rng& rng, HscCache* cache) {
  const std::vector<double>& l0 = state.session.logits();
  int V = static_cast<int>(l0.size());
  std::vector<double> nlp0(V);
  nn::log_softmax_row(l0.data(), V, nlp0.data());

  std::vector<double> scores(V);
  bool fallback = false;
  bool have_cls = false;
  double cls_val = 0.0;

  bool perturb = cfg.gamma > 0.0 && cfg.hsc_steps > 0;
  if (!perturb) {
    scores = nlp0;
  } else {
    StreamLayout layout = parse_stream(state.stream, state.vocab);
    const Mat& H = state.session.hidden();
    int T = H.rows, d = H.cols;
    int w0 = std::max(0, T - cfg.hsc_horizon);
    Mat Hp = H;
    bool moved = false;

    if (cfg.hsc_reuse && cache != nullptr && cache->k == k && cache->delta.rows > 0) {
      for (int r = 0; r < cache->delta.rows; ++r) {
        int row = cache->row0 + r;
        if (row >= T) break;
        for (int c = 0; c < d; ++c) Hp.at(row, c) += cache->delta.at(r, c);
      }
      moved = true;
    } else {
      for (int s = 0; s < cfg.hsc_steps; ++s) {
        Mat G = disc.loss_grad_wrt_hidden(Hp, layout, plan, k, cfg.mode);
        double norm2 = 0.0;
        bool finite = true;
        for (int r = w0; r < T && finite; ++r)
          for (int c = 0; c < d; ++c) {
            double g = G.at(r, c);
            if (!std::isfinite(g)) {
              finite = false;
              break;
            }
            norm2 += g * g;
          }
        if (!finite) {
          fallback = true;
          break;
        }
        if (norm2 <= 0.0) break;  // no signal to follow (empty current span)
        double scale = cfg.hsc_step_size / std::sqrt(norm2);
        for (int r = w0; r < T; ++r)
          for (int c = 0; c < d; ++c) Hp.at(r, c) -= scale * G.at(r, c);
        moved = true;
      }
      if (fallback) {
        Hp = H;
        moved = false;
      } else if (cfg.hsc_reuse && cache != nullptr && moved) {
        cache->k = k;
        cache->row0 = w0;
        cache->delta.resize(T - w0, d);
        for (int r = w0; r < T; ++r)
          for (int c = 0; c < d; ++c) cache->delta.at(r - w0, c) = Hp.at(r, c) - H.at(r, c);
      }
    }

    if (fallback) {
      scores = nlp0;
    } else {
      cls_val = disc.score_from_hidden(Hp, layout, plan, k, cfg.mode);
      have_cls = true;
      if (!moved) {
        scores = nlp0;
      } else {
        std::vector<double> lhat = state.lm.logits_from_hidden(Hp);
        std::vector<double> li(V);
        for (int v = 0; v < V; ++v)
          li[v] = cfg.gamma * lhat[v] + (1.0 - cfg.gamma) * l0[v];
        nn::log_softmax_row(li.data(), V, scores.data());
      }
    }
  }

  std::vector<int> pool;
  pool.reserve(V);
  for (int id = 0; id < V; ++id)
    if (!(sentence_start && id == state.vocab.eos())) pool.push_back(id);
  std::vector<double> cand(pool.size());
  for (size_t i = 0; i < pool.size(); ++i) cand[i] = scores[pool[i]];

  double draw = 0.0;
  int idx = choose_index(cand, cfg, rng, &draw);

  StepResult r;
  r.token = pool[idx];
  r.row.position = static_cast<int>(state.stream.size());
  r.row.k = k;
  r.row.candidates = static_cast<int>(pool.size());
  r.row.naive_lp = nlp0[r.token];
  r.row.class_ll = cls_val;
  r.row.has_class = have_cls;
  r.row.fused = scores[r.token];
  r.row.chosen = r.token;
  r.row.rng_draw = draw;
  r.row.hsc_fallback = fallback;
  return r;
}

// The step ops take a raw context; recover which sentence is in progress.
bool context_sentence_start(const std::vector<int>& context, const Vocabulary& vocab,
                            int k) {
  StreamLayout layout = parse_stream(context, vocab);
  require(static_cast<int>(layout.body.size()) == k, Error::Kind::InvalidArgument,
          "decode step: context must end inside sentence " + std::to_string(k));
  return layout.body.back().length() == 0;
}

void decode_sentences(DecodeState& state, const Discriminator* disc,
                      const ControlPlan& plan, const GenerationConfig& cfg,
                      Document& doc, DecodeTrace& trace, Rng& rng) {
  HscCache cache;
  int eos = state.vocab.eos();
  for (int k = 1; k <= plan.length(); ++k) {
    std::vector<int> sent;
    bool closed = false;
    for (int i = 0; i < cfg.max_sentence_tokens; ++i) {
      StepResult r = cfg.method == Method::Hsc
                         ? hsc_step_impl(state, *disc, plan, k, cfg, i == 0, rng, &cache)
                         : rescoring_step(state, disc, plan, k, cfg, i == 0, rng);
      trace.tokens.push_back(r.row);
      state.push(r.token);
      if (r.token == eos) {
        closed = true;
        break;
      }
      sent.push_back(r.token);
    }
    // A budget cut still closes the sentence in the stream; the separator is
    // forced, so it gets no trace row.
    if (!closed) state.push(eos);
    trace.sentences.push_back({k, static_cast<int>(sent.size()), !closed});
    doc.body.push_back({std::move(sent), plan.tags[static_cast<size_t>(k) - 1]});
  }
}

}  // namespace

StepResult dpc_step(const Lm& lm, const Discriminator& disc, const Vocabulary& vocab,
                    const std::vector<int>& context, const ControlPlan& plan, int k,
                    const GenerationConfig& config, Rng& rng) {
  config.validate();
  disc.check_compatible(lm);
  validate_plan(plan, vocab, disc.num_classes());
  require(k >= 1 && k <= plan.length(), Error::Kind::InvalidArgument,
          "decode step: sentence index out of range");
  DecodeState state(lm, vocab, context);
  bool start = context_sentence_start(context, vocab, k);
  return rescoring_step(state, &disc, plan, k, config, start, rng);
}

StepResult hsc_step(const Lm& lm, const Discriminator& disc, const Vocabulary& vocab,
                    const std::vector<int>& context, const ControlPlan& plan, int k,
                    const GenerationConfig& config, Rng& rng) {
  config.validate();
  disc.check_compatible(lm);
  validate_plan(plan, vocab, disc.num_classes());
  require(k >= 1 && k <= plan.length(), Error::Kind::InvalidArgument,
          "decode step: sentence index out of range");
  DecodeState state(lm, vocab, context);
  bool start = context_sentence_start(context, vocab, k);
  return hsc_step_impl(state, disc, plan, k, config, start, rng, nullptr);
}

StepDistribution dpc_distribution(const Lm& lm, const Discriminator* disc,
                                  const Vocabulary& vocab,
                                  const std::vector<int>& context,
                                  const ControlPlan& plan, int k,
                                  const GenerationConfig& config) {
  config.validate();
  if (disc != nullptr) {
    disc->check_compatible(lm);
    validate_plan(plan, vocab, disc->num_classes());
  } else {
    validate_plan(plan, vocab, std::numeric_limits<int>::max());
  }
  require(k >= 1 && k <= plan.length(), Error::Kind::InvalidArgument,
          "decode step: sentence index out of range");
  DecodeState state(lm, vocab, context);
  bool start = context_sentence_start(context, vocab, k);
  StepDistribution dist = rescore_candidates(state, disc, plan, k, config, start);

  int n = static_cast<int>(dist.ids.size());
  double mx = dist.fused[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, dist.fused[i]);
  dist.prob.resize(n);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    dist.prob[i] = std::exp((dist.fused[i] - mx) / config.temperature);
    total += dist.prob[i];
  }
  for (double& p : dist.prob) p /= total;
  return dist;
}

std::pair<Document, DecodeTrace> generate_document(const ControlPlan& plan, const Lm& lm,
                                                   const Discriminator* disc,
                                                   const Vocabulary& vocab,
                                                   const GenerationConfig& config) {
  config.validate();
  if (config.method == Method::Prompt) {
    PromptVariant v = PromptVariant::Full;
    if (config.mode.kind == StructuralMode::Kind::LocalOnly) v = PromptVariant::Local;
    if (config.mode.kind == StructuralMode::Kind::PastAware) v = PromptVariant::Past;
    return prompt_generate(plan, lm, v, vocab, config);
  }

  bool needs_disc = config.method == Method::Dpc || config.method == Method::Hsc;
  require(!needs_disc || disc != nullptr, Error::Kind::InvalidArgument,
          "decode: method " + std::string(method_name(config.method)) +
              " requires a discriminator");
  if (disc != nullptr) disc->check_compatible(lm);
  validate_plan(plan, vocab,
                disc != nullptr ? disc->num_classes() : std::numeric_limits<int>::max());

  GenerationConfig cfg = config;
  const Discriminator* use = disc;
  if (cfg.method == Method::Naive) {
    cfg.gamma = 0.0;
    cfg.top_k = lm.vocab_size();
    use = nullptr;
  }

  Document doc;
  doc.headline = plan.headline;
  DecodeTrace trace;
  Rng rng(cfg.seed);

  std::vector<int> ctx;
  ctx.push_back(vocab.bos());
  ctx.insert(ctx.end(), plan.headline.tokens.begin(), plan.headline.tokens.end());
  ctx.push_back(vocab.eos());
  DecodeState state(lm, vocab, ctx);

  decode_sentences(state, use, plan, cfg, doc, trace, rng);
  return {std::move(doc), std::move(trace)};
}

Document naive_generate(const ControlPlan& plan, const Lm& lm, const Vocabulary& vocab,
                        const GenerationConfig& config) {
  GenerationConfig cfg = config;
  cfg.method = Method::Naive;
  return generate_document(plan, lm, nullptr, vocab, cfg).first;
}

// ---------------------------------------------------------------------------
// Prompting baseline
// ---------------------------------------------------------------------------

namespace {

int require_token(const Vocabulary& vocab, const std::string& surface) {
  require(vocab.contains(surface), Error::Kind::InvalidArgument,
          "vocabulary lacks prompt token '" + surface + "'");
  return vocab.lookup(surface);
}

// <c7> -> 7 for prefix "<c"; -1 when the surface has a different shape.
int sentinel_number(const std::string& surface, char tag) {
  if (surface.size() < 4 || surface[0] != '<' || surface[1] != tag ||
      surface.back() != '>')
    return -1;
  int value = 0;
  for (size_t i = 2; i + 1 < surface.size(); ++i) {
    if (surface[i] < '0' || surface[i] > '9') return -1;
    value = value * 10 + (surface[i] - '0');
  }
  return value;
}

}  // namespace

std::vector<int> render_prompt(const ControlPlan& plan, int k, PromptVariant v,
                               const Vocabulary& vocab) {
  require(k >= 1 && k <= plan.length(), Error::Kind::InvalidArgument,
          "render_prompt: sentence index out of range");
  std::vector<int> out;
  out.push_back(require_token(vocab, "<hl>"));
  out.insert(out.end(), plan.headline.tokens.begin(), plan.headline.tokens.end());
  out.push_back(require_token(vocab, "<lb>"));
  auto label = [&](int idx) {
    out.push_back(
        require_token(vocab, "<c" + std::to_string(plan.tags[static_cast<size_t>(idx)]) + ">"));
  };
  switch (v) {
    case PromptVariant::Local:
      label(k - 1);
      break;
    case PromptVariant::Past:
      for (int j = 0; j < k; ++j) label(j);
      break;
    case PromptVariant::Full:
      for (int j = 0; j < plan.length(); ++j) label(j);
      out.push_back(require_token(vocab, "<p" + std::to_string(k) + ">"));
      break;
  }
  out.push_back(require_token(vocab, "<tx>"));
  return out;
}

ParsedPrompt parse_prompt(const std::vector<int>& prompt, const Vocabulary& vocab) {
  int hl = require_token(vocab, "<hl>");
  int lb = require_token(vocab, "<lb>");
  int tx = require_token(vocab, "<tx>");
  require(!prompt.empty() && prompt.front() == hl, Error::Kind::Format,
          "prompt must start with <hl>");
  require(prompt.back() == tx, Error::Kind::Format, "prompt must end with <tx>");

  ParsedPrompt out;
  size_t i = 1;
  while (i < prompt.size() && prompt[i] != lb) out.headline.push_back(prompt[i++]);
  require(i < prompt.size(), Error::Kind::Format, "prompt has no <lb> section");
  ++i;
  for (; i + 1 < prompt.size(); ++i) {
    const std::string& s = vocab.surface(prompt[i]);
    int cls = sentinel_number(s, 'c');
    if (cls >= 0) {
      require(out.position == 0, Error::Kind::Format,
              "prompt labels after the position marker");
      out.labels.push_back(cls);
      continue;
    }
    int pos = sentinel_number(s, 'p');
    if (pos >= 1) {
      require(out.position == 0, Error::Kind::Format, "prompt has two position markers");
      out.position = pos;
      continue;
    }
    fail(Error::Kind::Format, "unexpected token '" + s + "' in prompt label section");
  }
  require(!out.labels.empty(), Error::Kind::Format, "prompt has no labels");
  return out;
}

Corpus build_prompt_corpus(const Corpus& corpus, PromptVariant v) {
  Corpus out;
  out.vocab = corpus.vocab;
  out.schema = corpus.schema;
  for (const auto& doc : corpus.docs) {
    ControlPlan plan = plan_from_document(doc);
    for (int k = 1; k <= plan.length(); ++k) {
      Document pd;
      pd.headline.tokens = render_prompt(plan, k, v, corpus.vocab);
      pd.body.assign(doc.body.begin(), doc.body.begin() + k);
      out.docs.push_back(std::move(pd));
    }
  }
  return out;
}

std::pair<Document, DecodeTrace> prompt_generate(const ControlPlan& plan,
                                                 const Lm& prompt_lm, PromptVariant v,
                                                 const Vocabulary& vocab,
                                                 const GenerationConfig& config) {
  config.validate();
  validate_plan(plan, vocab, std::numeric_limits<int>::max());

  GenerationConfig cfg = config;
  cfg.gamma = 0.0;
  cfg.top_k = prompt_lm.vocab_size();

  Document doc;
  doc.headline = plan.headline;
  DecodeTrace trace;
  Rng rng(cfg.seed);
  int eos = vocab.eos();

  for (int k = 1; k <= plan.length(); ++k) {
    Document ctxdoc;
    ctxdoc.headline.tokens = render_prompt(plan, k, v, vocab);
    ctxdoc.body = doc.body;
    std::vector<int> ctx = flatten_document(ctxdoc, vocab);
    require(static_cast<int>(ctx.size()) < prompt_lm.config().context,
            Error::Kind::InvalidArgument,
            "prompt serialization of " + std::to_string(ctx.size()) +
                " tokens exceeds the model context");

    DecodeState state(prompt_lm, vocab, ctx);
    std::vector<int> sent;
    bool closed = false;
    for (int i = 0; i < cfg.max_sentence_tokens; ++i) {
      StepResult r = rescoring_step(state, nullptr, plan, k, cfg, i == 0, rng);
      trace.tokens.push_back(r.row);
      state.push(r.token);
      if (r.token == eos) {
        closed = true;
        break;
      }
      sent.push_back(r.token);
    }
    trace.sentences.push_back({k, static_cast<int>(sent.size()), !closed});
    doc.body.push_back({std::move(sent), plan.tags[static_cast<size_t>(k) - 1]});
  }
  return {std::move(doc), std::move(trace)};
}

std::vector<ControlPlan> load_generation_requests(const std::string& path,
                                                  const Vocabulary& vocab,
                                                  const DiscourseSchema& schema) {
  std::ifstream in(path);
  require(in.good(), Error::Kind::Io, "cannot open requests file " + path);
  std::vector<ControlPlan> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::string where = "requests line " + std::to_string(lineno) + ": ";
    try {
      json j = json::parse(line);
      require(j.is_object() && j.contains("headline") && j["headline"].is_string(),
              Error::Kind::Format, where + "expected a \"headline\" string");
      require(j.contains("tags") && j["tags"].is_array() && !j["tags"].empty(),
              Error::Kind::Format, where + "expected a non-empty \"tags\" array");
      ControlPlan plan;
      plan.headline.tokens = tokenize(j["headline"].get<std::string>(), vocab);
      for (const auto& t : j["tags"]) {
        require(t.is_string(), Error::Kind::Format, where + "tags must be strings");
        plan.tags.push_back(schema.class_index(t.get<std::string>()));
      }
      validate_plan(plan, vocab, schema.num_classes());
      out.push_back(std::move(plan));
    } catch (const json::exception& e) {
      fail(Error::Kind::Format, where + e.what());
    }
  }
  require(!out.empty(), Error::Kind::Format, "no requests in " + path);
  return out;
}

}  // namespace seqctl
