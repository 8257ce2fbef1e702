#include "infill.hpp"

#include <algorithm>
#include <cmath>

#include "document.hpp"
#include "json.hpp"
#include "util.hpp"

namespace seqctl {

using nlohmann::json;

static constexpr double kAdamBeta1 = 0.9;
static constexpr double kAdamBeta2 = 0.999;
static constexpr double kAdamEps = 1e-8;
static constexpr double kGradClip = 1.0;
static constexpr double kInitStd = 0.02;

static const double kMaskFractions[] = {0.15, 0.30, 0.45};

// ---------------------------------------------------------------------------
// Masking and serialization
// ---------------------------------------------------------------------------

MaskedSentence mask_sentence(const std::vector<int>& sentence,
                             const std::vector<int>& positions,
                             const Vocabulary& vocab) {
  MaskedSentence ms;
  ms.original = sentence;
  ms.positions = positions;
  std::sort(ms.positions.begin(), ms.positions.end());
  for (size_t i = 0; i < ms.positions.size(); ++i) {
    int p = ms.positions[i];
    require(p >= 0 && p < static_cast<int>(sentence.size()),
            Error::Kind::InvalidArgument, "mask: position out of range");
    require(i == 0 || p != ms.positions[i - 1], Error::Kind::InvalidArgument,
            "mask: duplicate position");
  }

  size_t next = 0;
  for (int i = 0; i < static_cast<int>(sentence.size()); ++i) {
    bool masked = next < ms.positions.size() && ms.positions[next] == i;
    if (!masked) {
      ms.tokens.push_back(sentence[i]);
      continue;
    }
    bool continues = i > 0 && next > 0 && ms.positions[next - 1] == i - 1;
    if (!continues) {
      require(ms.spans < Vocabulary::kNumSentinels, Error::Kind::InvalidArgument,
              "mask: more spans than sentinel tokens");
      ms.tokens.push_back(vocab.sentinel(ms.spans++));
    }
    ++next;
  }
  return ms;
}

std::vector<int> restore_sentence(const MaskedSentence& masked,
                                  const std::vector<std::vector<int>>& spans,
                                  const Vocabulary& vocab) {
  require(static_cast<int>(spans.size()) == masked.spans,
          Error::Kind::InvalidArgument, "restore: span count mismatch");
  std::vector<int> out;
  out.reserve(masked.original.size());
  int seen = 0;
  for (int tok : masked.tokens) {
    if (vocab.is_sentinel(tok)) {
      require(seen < masked.spans && tok == vocab.sentinel(seen),
              Error::Kind::InvalidArgument, "restore: sentinel out of order");
      const auto& span = spans[seen++];
      out.insert(out.end(), span.begin(), span.end());
    } else {
      out.push_back(tok);
    }
  }
  return out;
}

std::vector<std::vector<int>> gold_spans(const MaskedSentence& masked,
                                         const Vocabulary& vocab) {
  (void)vocab;
  std::vector<std::vector<int>> spans;
  size_t next = 0;
  for (int i = 0; i < static_cast<int>(masked.original.size()); ++i) {
    if (next >= masked.positions.size() || masked.positions[next] != i) continue;
    bool continues = next > 0 && masked.positions[next - 1] == i - 1;
    if (!continues) spans.emplace_back();
    spans.back().push_back(masked.original[i]);
    ++next;
  }
  require(static_cast<int>(spans.size()) == masked.spans, Error::Kind::Runtime,
          "gold spans: span count mismatch");
  return spans;
}

static int require_surface(const Vocabulary& vocab, const std::string& surface) {
  require(vocab.contains(surface), Error::Kind::InvalidArgument,
          "vocabulary lacks template token " + surface);
  return vocab.lookup(surface);
}

static int class_token_number(const Vocabulary& vocab, int id) {
  const std::string& s = vocab.surface(id);
  if (s.size() < 4 || s.front() != '<' || s[1] != 'c' || s.back() != '>') return -1;
  int value = 0;
  for (size_t i = 2; i + 1 < s.size(); ++i) {
    if (s[i] < '0' || s[i] > '9') return -1;
    value = value * 10 + (s[i] - '0');
  }
  return value;
}

std::vector<int> render_infill_template(const MaskedSentence& masked, int tag,
                                        const Vocabulary& vocab) {
  int lb = require_surface(vocab, "<lb>");
  int tx = require_surface(vocab, "<tx>");
  int cls = require_surface(vocab, "<c" + std::to_string(tag) + ">");
  std::vector<int> out{lb, cls, tx};
  out.insert(out.end(), masked.tokens.begin(), masked.tokens.end());
  return out;
}

ParsedInfillTemplate parse_infill_template(const std::vector<int>& ids,
                                           const Vocabulary& vocab) {
  require(ids.size() >= 3, Error::Kind::Format, "infill template: too short");
  require(ids[0] == require_surface(vocab, "<lb>"), Error::Kind::Format,
          "infill template: missing label marker");
  ParsedInfillTemplate parsed;
  parsed.tag = class_token_number(vocab, ids[1]);
  require(parsed.tag >= 0, Error::Kind::Format,
          "infill template: second token is not a class token");
  require(ids[2] == require_surface(vocab, "<tx>"), Error::Kind::Format,
          "infill template: missing text marker");
  parsed.tokens.assign(ids.begin() + 3, ids.end());
  return parsed;
}

std::vector<int> infill_target(const MaskedSentence& masked,
                               const Vocabulary& vocab) {
  auto spans = gold_spans(masked, vocab);
  std::vector<int> out;
  for (int i = 0; i < masked.spans; ++i) {
    out.push_back(vocab.sentinel(i));
    out.insert(out.end(), spans[i].begin(), spans[i].end());
  }
  return out;
}

std::vector<std::vector<int>> parse_infill_target(const std::vector<int>& target,
                                                  int spans,
                                                  const Vocabulary& vocab) {
  std::vector<std::vector<int>> out;
  for (int tok : target) {
    if (vocab.is_sentinel(tok)) {
      require(static_cast<int>(out.size()) < spans &&
                  tok == vocab.sentinel(static_cast<int>(out.size())),
              Error::Kind::Format, "infill target: sentinel out of order");
      out.emplace_back();
    } else {
      require(!out.empty(), Error::Kind::Format,
              "infill target: content before first sentinel");
      out.back().push_back(tok);
    }
  }
  require(static_cast<int>(out.size()) == spans, Error::Kind::Format,
          "infill target: span count mismatch");
  return out;
}

std::vector<int> maskable_positions(const std::vector<int>& sentence,
                                    const Vocabulary& vocab) {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(sentence.size()); ++i) {
    TokenCategory c = vocab.category(sentence[i]);
    if (c != TokenCategory::Topic && c != TokenCategory::Entity) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void InfillerConfig::validate() const {
  require(layers >= 1, Error::Kind::InvalidArgument, "infiller: layers must be >= 1");
  require(heads >= 1 && d_model % heads == 0, Error::Kind::InvalidArgument,
          "infiller: d_model must be divisible by heads");
  require(enc_context >= 4 && dec_context >= 4, Error::Kind::InvalidArgument,
          "infiller: context must be >= 4");
  require(lr > 0.0, Error::Kind::InvalidArgument, "infiller: lr must be positive");
  require(epochs >= 0, Error::Kind::InvalidArgument, "infiller: epochs must be >= 0");
  require(batch_pairs >= 1, Error::Kind::InvalidArgument,
          "infiller: batch_pairs must be >= 1");
  require(pairs_per_sentence >= 1, Error::Kind::InvalidArgument,
          "infiller: pairs_per_sentence must be >= 1");
  require(max_span_tokens >= 1, Error::Kind::InvalidArgument,
          "infiller: max_span_tokens must be >= 1");
}

std::string InfillerConfig::to_json() const {
  json j;
  j["layers"] = layers;
  j["heads"] = heads;
  j["d_model"] = d_model;
  j["enc_context"] = enc_context;
  j["dec_context"] = dec_context;
  j["lr"] = lr;
  j["epochs"] = epochs;
  j["batch_pairs"] = batch_pairs;
  j["pairs_per_sentence"] = pairs_per_sentence;
  j["max_span_tokens"] = max_span_tokens;
  j["seed"] = seed;
  return j.dump();
}

InfillerConfig InfillerConfig::from_json(const std::string& text) {
  InfillerConfig c;
  try {
    json j = json::parse(text);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.d_model = j.value("d_model", c.d_model);
    c.enc_context = j.value("enc_context", c.enc_context);
    c.dec_context = j.value("dec_context", c.dec_context);
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_pairs = j.value("batch_pairs", c.batch_pairs);
    c.pairs_per_sentence = j.value("pairs_per_sentence", c.pairs_per_sentence);
    c.max_span_tokens = j.value("max_span_tokens", c.max_span_tokens);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    fail(Error::Kind::Format, std::string("infiller config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Training pairs
// ---------------------------------------------------------------------------

std::vector<InfillPair> build_infill_pairs(const Corpus& corpus,
                                           const InfillerConfig& config, Rng& rng) {
  config.validate();
  std::vector<InfillPair> out;
  long cycle = 0;
  for (const auto& doc : corpus.docs) {
    for (const auto& sent : doc.body) {
      require(sent.tag >= 0, Error::Kind::InvalidArgument,
              "infill pairs: untagged sentence");
      auto eligible = maskable_positions(sent.tokens, corpus.vocab);
      if (eligible.empty()) continue;
      for (int p = 0; p < config.pairs_per_sentence; ++p) {
        double f = kMaskFractions[cycle++ % 3];
        int n = static_cast<int>(std::lround(f * static_cast<double>(eligible.size())));
        n = std::max(1, n);
        n = std::min(n, static_cast<int>(eligible.size()));
        n = std::min(n, Vocabulary::kNumSentinels);
        std::vector<int> pick = eligible;
        rng.shuffle(pick);
        pick.resize(n);
        std::sort(pick.begin(), pick.end());
        MaskedSentence ms = mask_sentence(sent.tokens, pick, corpus.vocab);
        InfillPair pair;
        pair.tmpl = render_infill_template(ms, sent.tag, corpus.vocab);
        pair.target = infill_target(ms, corpus.vocab);
        pair.tag = sent.tag;
        pair.spans = ms.spans;
        out.push_back(std::move(pair));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct Infiller::Workspace {
  std::vector<int> enc_ids, dec_ids;
  int Te = 0, Td = 0;

  struct BlockAct {
    Mat a, q, k, v, att_out, x_mid, m, f1, g;
    std::vector<double> att, ln1_cache, ln2_cache;
  };
  std::vector<Mat> ex;  // encoder residual stream entering each layer, +final
  std::vector<BlockAct> eacts;
  Mat mem;  // encoder output the decoder cross-attends to
  std::vector<double> enc_ln_cache;

  struct DecAct {
    BlockAct s;  // self-attention branch and mlp (ln2 reads y_mid2)
    Mat cx, q2, k2, v2, att2_out, y_mid2;
    std::vector<double> att2, lnx_cache;
  };
  std::vector<Mat> ys;  // decoder residual stream
  std::vector<DecAct> dacts;
  Mat hd;  // post-final-norm decoder states
  std::vector<double> dec_ln_cache;
};

Infiller::Infiller(const InfillerConfig& config, int vocab_size)
    : config_(config), vocab_size_(vocab_size) {
  config_.validate();
  require(vocab_size >= 2, Error::Kind::InvalidArgument,
          "infiller: vocabulary too small");
  build_params();
  Rng rng(config_.seed);
  for (auto& p : params_.params()) {
    std::string leaf = p.name.substr(p.name.rfind('.') + 1);
    if (leaf == "g")
      for (auto& w : p.w) w = 1.0;
    else if (leaf[0] == 'b')
      nn::init_zeros(p);
    else
      nn::init_normal(p, rng, kInitStd);
  }
  params_.quantize_f32();
}

void Infiller::build_params() {
  int d = config_.d_model;
  auto make = [&](const std::string& name, int r, int c) {
    return params_.create(name, r, c);
  };
  auto make_block = [&](const std::string& p, Block& B) {
    B.ln1_g = make(p + "ln1.g", 1, d);
    B.ln1_b = make(p + "ln1.b", 1, d);
    B.wq = make(p + "attn.wq", d, d);
    B.bq = make(p + "attn.bq", 1, d);
    B.wk = make(p + "attn.wk", d, d);
    B.bk = make(p + "attn.bk", 1, d);
    B.wv = make(p + "attn.wv", d, d);
    B.bv = make(p + "attn.bv", 1, d);
    B.wo = make(p + "attn.wo", d, d);
    B.bo = make(p + "attn.bo", 1, d);
    B.ln2_g = make(p + "ln2.g", 1, d);
    B.ln2_b = make(p + "ln2.b", 1, d);
    B.w1 = make(p + "mlp.w1", d, 4 * d);
    B.b1 = make(p + "mlp.b1", 1, 4 * d);
    B.w2 = make(p + "mlp.w2", 4 * d, d);
    B.b2 = make(p + "mlp.b2", 1, d);
  };

  tok_emb_ = make("inf.tok_emb", vocab_size_, d);
  enc_pos_ = make("inf.enc_pos", config_.enc_context, d);
  dec_pos_ = make("inf.dec_pos", config_.dec_context, d);
  enc_layers_.resize(config_.layers);
  for (int l = 0; l < config_.layers; ++l)
    make_block("inf.e" + std::to_string(l) + ".", enc_layers_[l]);
  enc_ln_g_ = make("inf.enc_ln.g", 1, d);
  enc_ln_b_ = make("inf.enc_ln.b", 1, d);
  dec_layers_.resize(config_.layers);
  for (int l = 0; l < config_.layers; ++l) {
    std::string p = "inf.d" + std::to_string(l) + ".";
    DecBlock& D = dec_layers_[l];
    make_block(p, D.self);
    D.lnx_g = make(p + "lnx.g", 1, d);
    D.lnx_b = make(p + "lnx.b", 1, d);
    D.cwq = make(p + "cross.wq", d, d);
    D.cbq = make(p + "cross.bq", 1, d);
    D.cwk = make(p + "cross.wk", d, d);
    D.cbk = make(p + "cross.bk", 1, d);
    D.cwv = make(p + "cross.wv", d, d);
    D.cbv = make(p + "cross.bv", 1, d);
    D.cwo = make(p + "cross.wo", d, d);
    D.cbo = make(p + "cross.bo", 1, d);
  }
  dec_ln_g_ = make("inf.dec_ln.g", 1, d);
  dec_ln_b_ = make("inf.dec_ln.b", 1, d);
  out_w_ = make("inf.out.w", d, vocab_size_);
  out_b_ = make("inf.out.b", 1, vocab_size_);
}

void Infiller::encode(const std::vector<int>& ids, Workspace& ws) const {
  int T = static_cast<int>(ids.size());
  require(T >= 1, Error::Kind::InvalidArgument, "infiller: empty template");
  require(T <= config_.enc_context, Error::Kind::InvalidArgument,
          "infiller: template of length " + std::to_string(T) +
              " exceeds encoder context " + std::to_string(config_.enc_context));
  int d = config_.d_model;
  int nh = config_.heads;

  ws.enc_ids = ids;
  ws.Te = T;
  ws.ex.assign(config_.layers + 1, Mat(T, d));
  ws.eacts.assign(config_.layers, {});

  Mat& x0 = ws.ex[0];
  for (int t = 0; t < T; ++t) {
    require(ids[t] >= 0 && ids[t] < vocab_size_, Error::Kind::InvalidArgument,
            "infiller: token id out of range");
    const double* te = tok_emb_->row(ids[t]);
    const double* pe = enc_pos_->row(t);
    double* x = x0.row(t);
    for (int j = 0; j < d; ++j) x[j] = te[j] + pe[j];
  }

  for (int l = 0; l < config_.layers; ++l) {
    const Block& L = enc_layers_[l];
    auto& A = ws.eacts[l];
    const Mat& x = ws.ex[l];
    A.a.resize(T, d);
    A.ln1_cache.assign(2 * T, 0.0);
    nn::layernorm_fwd(x.data(), T, d, L.ln1_g->w.data(), L.ln1_b->w.data(),
                      A.a.data(), A.ln1_cache.data());
    A.q.resize(T, d);
    A.k.resize(T, d);
    A.v.resize(T, d);
    nn::linear_fwd(A.a.data(), T, d, L.wq->w.data(), L.bq->w.data(), A.q.data(), d);
    nn::linear_fwd(A.a.data(), T, d, L.wk->w.data(), L.bk->w.data(), A.k.data(), d);
    nn::linear_fwd(A.a.data(), T, d, L.wv->w.data(), L.bv->w.data(), A.v.data(), d);
    A.att.assign(static_cast<size_t>(nh) * T * T, 0.0);
    A.att_out.resize(T, d);
    nn::attention_fwd(A.q.data(), A.k.data(), A.v.data(), T, T, d, nh, false,
                      A.att_out.data(), A.att.data());
    A.x_mid.resize(T, d);
    {
      Mat proj(T, d);
      nn::linear_fwd(A.att_out.data(), T, d, L.wo->w.data(), L.bo->w.data(),
                     proj.data(), d);
      for (size_t i = 0; i < A.x_mid.size(); ++i)
        A.x_mid.a[i] = x.a[i] + proj.a[i];
    }
    A.m.resize(T, d);
    A.ln2_cache.assign(2 * T, 0.0);
    nn::layernorm_fwd(A.x_mid.data(), T, d, L.ln2_g->w.data(), L.ln2_b->w.data(),
                      A.m.data(), A.ln2_cache.data());
    A.f1.resize(T, 4 * d);
    nn::linear_fwd(A.m.data(), T, d, L.w1->w.data(), L.b1->w.data(), A.f1.data(),
                   4 * d);
    A.g.resize(T, 4 * d);
    nn::gelu_fwd(A.f1.data(), A.f1.size(), A.g.data());
    Mat& x_next = ws.ex[l + 1];
    {
      Mat f2(T, d);
      nn::linear_fwd(A.g.data(), T, 4 * d, L.w2->w.data(), L.b2->w.data(), f2.data(),
                     d);
      for (size_t i = 0; i < x_next.size(); ++i)
        x_next.a[i] = A.x_mid.a[i] + f2.a[i];
    }
  }

  ws.mem.resize(T, d);
  ws.enc_ln_cache.assign(2 * T, 0.0);
  nn::layernorm_fwd(ws.ex[config_.layers].data(), T, d, enc_ln_g_->w.data(),
                    enc_ln_b_->w.data(), ws.mem.data(), ws.enc_ln_cache.data());
}

void Infiller::decode(const std::vector<int>& ids, Workspace& ws) const {
  int T = static_cast<int>(ids.size());
  int Te = ws.Te;
  require(Te >= 1, Error::Kind::InvalidArgument, "infiller: decode before encode");
  require(T >= 1, Error::Kind::InvalidArgument, "infiller: empty decoder input");
  require(T <= config_.dec_context, Error::Kind::InvalidArgument,
          "infiller: target of length " + std::to_string(T) +
              " exceeds decoder context " + std::to_string(config_.dec_context));
  int d = config_.d_model;
  int nh = config_.heads;

  ws.dec_ids = ids;
  ws.Td = T;
  ws.ys.assign(config_.layers + 1, Mat(T, d));
  ws.dacts.assign(config_.layers, {});

  Mat& y0 = ws.ys[0];
  for (int t = 0; t < T; ++t) {
    require(ids[t] >= 0 && ids[t] < vocab_size_, Error::Kind::InvalidArgument,
            "infiller: token id out of range");
    const double* te = tok_emb_->row(ids[t]);
    const double* pe = dec_pos_->row(t);
    double* y = y0.row(t);
    for (int j = 0; j < d; ++j) y[j] = te[j] + pe[j];
  }

  for (int l = 0; l < config_.layers; ++l) {
    const DecBlock& L = dec_layers_[l];
    auto& A = ws.dacts[l];
    auto& S = A.s;
    const Mat& y = ws.ys[l];
    S.a.resize(T, d);
    S.ln1_cache.assign(2 * T, 0.0);
    nn::layernorm_fwd(y.data(), T, d, L.self.ln1_g->w.data(),
                      L.self.ln1_b->w.data(), S.a.data(), S.ln1_cache.data());
    S.q.resize(T, d);
    S.k.resize(T, d);
    S.v.resize(T, d);
    nn::linear_fwd(S.a.data(), T, d, L.self.wq->w.data(), L.self.bq->w.data(),
                   S.q.data(), d);
    nn::linear_fwd(S.a.data(), T, d, L.self.wk->w.data(), L.self.bk->w.data(),
                   S.k.data(), d);
    nn::linear_fwd(S.a.data(), T, d, L.self.wv->w.data(), L.self.bv->w.data(),
                   S.v.data(), d);
    S.att.assign(static_cast<size_t>(nh) * T * T, 0.0);
    S.att_out.resize(T, d);
    nn::attention_fwd(S.q.data(), S.k.data(), S.v.data(), T, T, d, nh, true,
                      S.att_out.data(), S.att.data());
    S.x_mid.resize(T, d);
    {
      Mat proj(T, d);
      nn::linear_fwd(S.att_out.data(), T, d, L.self.wo->w.data(),
                     L.self.bo->w.data(), proj.data(), d);
      for (size_t i = 0; i < S.x_mid.size(); ++i)
        S.x_mid.a[i] = y.a[i] + proj.a[i];
    }

    A.cx.resize(T, d);
    A.lnx_cache.assign(2 * T, 0.0);
    nn::layernorm_fwd(S.x_mid.data(), T, d, L.lnx_g->w.data(), L.lnx_b->w.data(),
                      A.cx.data(), A.lnx_cache.data());
    A.q2.resize(T, d);
    A.k2.resize(Te, d);
    A.v2.resize(Te, d);
    nn::linear_fwd(A.cx.data(), T, d, L.cwq->w.data(), L.cbq->w.data(), A.q2.data(),
                   d);
    nn::linear_fwd(ws.mem.data(), Te, d, L.cwk->w.data(), L.cbk->w.data(),
                   A.k2.data(), d);
    nn::linear_fwd(ws.mem.data(), Te, d, L.cwv->w.data(), L.cbv->w.data(),
                   A.v2.data(), d);
    A.att2.assign(static_cast<size_t>(nh) * T * Te, 0.0);
    A.att2_out.resize(T, d);
    nn::attention_fwd(A.q2.data(), A.k2.data(), A.v2.data(), T, Te, d, nh, false,
                      A.att2_out.data(), A.att2.data());
    A.y_mid2.resize(T, d);
    {
      Mat proj(T, d);
      nn::linear_fwd(A.att2_out.data(), T, d, L.cwo->w.data(), L.cbo->w.data(),
                     proj.data(), d);
      for (size_t i = 0; i < A.y_mid2.size(); ++i)
        A.y_mid2.a[i] = S.x_mid.a[i] + proj.a[i];
    }

    S.m.resize(T, d);
    S.ln2_cache.assign(2 * T, 0.0);
    nn::layernorm_fwd(A.y_mid2.data(), T, d, L.self.ln2_g->w.data(),
                      L.self.ln2_b->w.data(), S.m.data(), S.ln2_cache.data());
    S.f1.resize(T, 4 * d);
    nn::linear_fwd(S.m.data(), T, d, L.self.w1->w.data(), L.self.b1->w.data(),
                   S.f1.data(), 4 * d);
    S.g.resize(T, 4 * d);
    nn::gelu_fwd(S.f1.data(), S.f1.size(), S.g.data());
    Mat& y_next = ws.ys[l + 1];
    {
      Mat f2(T, d);
      nn::linear_fwd(S.g.data(), T, 4 * d, L.self.w2->w.data(),
                     L.self.b2->w.data(), f2.data(), d);
      for (size_t i = 0; i < y_next.size(); ++i)
        y_next.a[i] = A.y_mid2.a[i] + f2.a[i];
    }
  }

  ws.hd.resize(T, d);
  ws.dec_ln_cache.assign(2 * T, 0.0);
  nn::layernorm_fwd(ws.ys[config_.layers].data(), T, d, dec_ln_g_->w.data(),
                    dec_ln_b_->w.data(), ws.hd.data(), ws.dec_ln_cache.data());
}

std::vector<double> Infiller::logits_row(const Workspace& ws, int t) const {
  std::vector<double> logits(vocab_size_);
  nn::linear_fwd(ws.hd.row(t), 1, config_.d_model, out_w_->w.data(),
                 out_b_->w.data(), logits.data(), vocab_size_);
  return logits;
}

void Infiller::backward(const Workspace& ws, const Mat& dHd) {
  int Te = ws.Te, Td = ws.Td;
  int d = config_.d_model;
  int nh = config_.heads;

  Mat dy(Td, d);
  nn::layernorm_bwd(ws.ys[config_.layers].data(), Td, d, dec_ln_g_->w.data(),
                    ws.dec_ln_cache.data(), dHd.data(), dy.data(),
                    dec_ln_g_->g.data(), dec_ln_b_->g.data());

  Mat dmem(Te, d);  // accumulates over decoder layers
  for (int l = config_.layers - 1; l >= 0; --l) {
    DecBlock& L = dec_layers_[l];
    const auto& A = ws.dacts[l];
    const auto& S = A.s;
    // dy holds d/d(y_next) = d/d(y_mid2 + f2)
    Mat dg(Td, 4 * d);
    nn::linear_bwd(S.g.data(), Td, 4 * d, L.self.w2->w.data(), dy.data(), d,
                   dg.data(), L.self.w2->g.data(), L.self.b2->g.data());
    Mat df1(Td, 4 * d);
    nn::gelu_bwd(S.f1.data(), S.f1.size(), dg.data(), df1.data());
    Mat dm(Td, d);
    nn::linear_bwd(S.m.data(), Td, d, L.self.w1->w.data(), df1.data(), 4 * d,
                   dm.data(), L.self.w1->g.data(), L.self.b1->g.data());
    Mat dy_mid2 = dy;  // residual branch
    nn::layernorm_bwd(A.y_mid2.data(), Td, d, L.self.ln2_g->w.data(),
                      S.ln2_cache.data(), dm.data(), dy_mid2.data(),
                      L.self.ln2_g->g.data(), L.self.ln2_b->g.data());
    // dy_mid2 = d/d(x_mid + cross proj)
    Mat datt2(Td, d);
    nn::linear_bwd(A.att2_out.data(), Td, d, L.cwo->w.data(), dy_mid2.data(), d,
                   datt2.data(), L.cwo->g.data(), L.cbo->g.data());
    Mat dq2(Td, d), dk2(Te, d), dv2(Te, d);
    nn::attention_bwd(A.q2.data(), A.k2.data(), A.v2.data(), Td, Te, d, nh, false,
                      A.att2.data(), datt2.data(), dq2.data(), dk2.data(),
                      dv2.data());
    Mat dcx(Td, d);
    nn::linear_bwd(A.cx.data(), Td, d, L.cwq->w.data(), dq2.data(), d, dcx.data(),
                   L.cwq->g.data(), L.cbq->g.data());
    nn::linear_bwd(ws.mem.data(), Te, d, L.cwk->w.data(), dk2.data(), d,
                   dmem.data(), L.cwk->g.data(), L.cbk->g.data());
    nn::linear_bwd(ws.mem.data(), Te, d, L.cwv->w.data(), dv2.data(), d,
                   dmem.data(), L.cwv->g.data(), L.cbv->g.data());
    Mat dx_mid = dy_mid2;  // residual branch
    nn::layernorm_bwd(S.x_mid.data(), Td, d, L.lnx_g->w.data(), A.lnx_cache.data(),
                      dcx.data(), dx_mid.data(), L.lnx_g->g.data(),
                      L.lnx_b->g.data());
    // dx_mid = d/d(y + self proj)
    Mat datt(Td, d);
    nn::linear_bwd(S.att_out.data(), Td, d, L.self.wo->w.data(), dx_mid.data(), d,
                   datt.data(), L.self.wo->g.data(), L.self.bo->g.data());
    Mat dq(Td, d), dk(Td, d), dv(Td, d);
    nn::attention_bwd(S.q.data(), S.k.data(), S.v.data(), Td, Td, d, nh, true,
                      S.att.data(), datt.data(), dq.data(), dk.data(), dv.data());
    Mat da(Td, d);
    nn::linear_bwd(S.a.data(), Td, d, L.self.wq->w.data(), dq.data(), d, da.data(),
                   L.self.wq->g.data(), L.self.bq->g.data());
    nn::linear_bwd(S.a.data(), Td, d, L.self.wk->w.data(), dk.data(), d, da.data(),
                   L.self.wk->g.data(), L.self.bk->g.data());
    nn::linear_bwd(S.a.data(), Td, d, L.self.wv->w.data(), dv.data(), d, da.data(),
                   L.self.wv->g.data(), L.self.bv->g.data());
    Mat dy_prev = dx_mid;  // residual branch into y
    nn::layernorm_bwd(ws.ys[l].data(), Td, d, L.self.ln1_g->w.data(),
                      S.ln1_cache.data(), da.data(), dy_prev.data(),
                      L.self.ln1_g->g.data(), L.self.ln1_b->g.data());
    dy = std::move(dy_prev);
  }
  for (int t = 0; t < Td; ++t) {
    axpy(1.0, dy.row(t), tok_emb_->grow(ws.dec_ids[t]), d);
    axpy(1.0, dy.row(t), dec_pos_->grow(t), d);
  }

  Mat dex(Te, d);
  nn::layernorm_bwd(ws.ex[config_.layers].data(), Te, d, enc_ln_g_->w.data(),
                    ws.enc_ln_cache.data(), dmem.data(), dex.data(),
                    enc_ln_g_->g.data(), enc_ln_b_->g.data());
  for (int l = config_.layers - 1; l >= 0; --l) {
    Block& L = enc_layers_[l];
    const auto& A = ws.eacts[l];
    Mat dg(Te, 4 * d);
    nn::linear_bwd(A.g.data(), Te, 4 * d, L.w2->w.data(), dex.data(), d, dg.data(),
                   L.w2->g.data(), L.b2->g.data());
    Mat df1(Te, 4 * d);
    nn::gelu_bwd(A.f1.data(), A.f1.size(), dg.data(), df1.data());
    Mat dm(Te, d);
    nn::linear_bwd(A.m.data(), Te, d, L.w1->w.data(), df1.data(), 4 * d, dm.data(),
                   L.w1->g.data(), L.b1->g.data());
    Mat dx_mid = dex;  // residual branch
    nn::layernorm_bwd(A.x_mid.data(), Te, d, L.ln2_g->w.data(), A.ln2_cache.data(),
                      dm.data(), dx_mid.data(), L.ln2_g->g.data(),
                      L.ln2_b->g.data());
    Mat datt(Te, d);
    nn::linear_bwd(A.att_out.data(), Te, d, L.wo->w.data(), dx_mid.data(), d,
                   datt.data(), L.wo->g.data(), L.bo->g.data());
    Mat dq(Te, d), dk(Te, d), dv(Te, d);
    nn::attention_bwd(A.q.data(), A.k.data(), A.v.data(), Te, Te, d, nh, false,
                      A.att.data(), datt.data(), dq.data(), dk.data(), dv.data());
    Mat da(Te, d);
    nn::linear_bwd(A.a.data(), Te, d, L.wq->w.data(), dq.data(), d, da.data(),
                   L.wq->g.data(), L.bq->g.data());
    nn::linear_bwd(A.a.data(), Te, d, L.wk->w.data(), dk.data(), d, da.data(),
                   L.wk->g.data(), L.bk->g.data());
    nn::linear_bwd(A.a.data(), Te, d, L.wv->w.data(), dv.data(), d, da.data(),
                   L.wv->g.data(), L.bv->g.data());
    Mat dx_prev = dx_mid;  // residual branch
    nn::layernorm_bwd(ws.ex[l].data(), Te, d, L.ln1_g->w.data(),
                      A.ln1_cache.data(), da.data(), dx_prev.data(),
                      L.ln1_g->g.data(), L.ln1_b->g.data());
    dex = std::move(dx_prev);
  }
  for (int t = 0; t < Te; ++t) {
    axpy(1.0, dex.row(t), tok_emb_->grow(ws.enc_ids[t]), d);
    axpy(1.0, dex.row(t), enc_pos_->grow(t), d);
  }
}

double Infiller::loss_and_grad(const InfillPair& pair, const Vocabulary& vocab,
                               double scale) {
  Workspace ws;
  encode(pair.tmpl, ws);
  std::vector<int> dec_in{vocab.bos()};
  dec_in.insert(dec_in.end(), pair.target.begin(), pair.target.end());
  decode(dec_in, ws);

  int Td = ws.Td;
  int d = config_.d_model;
  Mat dHd(Td, d);
  double loss = 0.0;
  std::vector<double> logp(vocab_size_), dlogits(vocab_size_);
  for (int t = 0; t < Td; ++t) {
    int target = t + 1 <= static_cast<int>(pair.target.size())
                     ? pair.target[t]
                     : vocab.eos();
    auto logits = logits_row(ws, t);
    nn::log_softmax_row(logits.data(), vocab_size_, logp.data());
    loss -= logp[target];
    for (int vtok = 0; vtok < vocab_size_; ++vtok)
      dlogits[vtok] = std::exp(logp[vtok]) * scale;
    dlogits[target] -= scale;
    nn::linear_bwd(ws.hd.row(t), 1, d, out_w_->w.data(), dlogits.data(),
                   vocab_size_, dHd.row(t), out_w_->g.data(), out_b_->g.data());
  }
  backward(ws, dHd);
  return loss;
}

double Infiller::pair_nll(const std::vector<int>& tmpl,
                          const std::vector<int>& target,
                          const Vocabulary& vocab) const {
  Workspace ws;
  encode(tmpl, ws);
  std::vector<int> dec_in{vocab.bos()};
  dec_in.insert(dec_in.end(), target.begin(), target.end());
  decode(dec_in, ws);
  double nll = 0.0;
  std::vector<double> logp(vocab_size_);
  for (int t = 0; t < ws.Td; ++t) {
    int label =
        t + 1 <= static_cast<int>(target.size()) ? target[t] : vocab.eos();
    auto logits = logits_row(ws, t);
    nn::log_softmax_row(logits.data(), vocab_size_, logp.data());
    nll -= logp[label];
  }
  return nll;
}

std::vector<double> Infiller::next_logits(const std::vector<int>& tmpl,
                                          const std::vector<int>& dec_prefix,
                                          const Vocabulary& vocab) const {
  Workspace ws;
  encode(tmpl, ws);
  std::vector<int> dec_in{vocab.bos()};
  dec_in.insert(dec_in.end(), dec_prefix.begin(), dec_prefix.end());
  decode(dec_in, ws);
  return logits_row(ws, ws.Td - 1);
}

std::vector<std::vector<int>> Infiller::sample_spans(const std::vector<int>& tmpl,
                                                     int spans, double temperature,
                                                     const Vocabulary& vocab,
                                                     Rng& rng) const {
  require(temperature > 0.0, Error::Kind::InvalidArgument,
          "infiller: temperature must be positive");
  int seen = 0;
  for (int tok : tmpl)
    if (vocab.is_sentinel(tok)) ++seen;
  require(seen == spans, Error::Kind::InvalidArgument,
          "infiller: span count does not match template sentinels");
  std::vector<std::vector<int>> out;
  if (spans == 0) return out;

  Workspace ws;
  encode(tmpl, ws);
  std::vector<int> prefix{vocab.bos(), vocab.sentinel(0)};
  std::vector<int> cur;
  std::vector<double> w(vocab_size_);
  while (static_cast<int>(out.size()) < spans) {
    bool last = static_cast<int>(out.size()) == spans - 1;
    int closer = last ? vocab.eos() : vocab.sentinel(static_cast<int>(out.size()) + 1);
    int tok;
    if (static_cast<int>(cur.size()) >= config_.max_span_tokens ||
        static_cast<int>(prefix.size()) >= config_.dec_context - 1) {
      tok = closer;
    } else {
      decode(prefix, ws);
      auto logits = logits_row(ws, ws.Td - 1);
      double mx = -1e300;
      for (int id = 0; id < vocab_size_; ++id)
        if (id == closer || !vocab.is_special(id)) mx = std::max(mx, logits[id]);
      for (int id = 0; id < vocab_size_; ++id)
        w[id] = (id == closer || !vocab.is_special(id))
                    ? std::exp((logits[id] - mx) / temperature)
                    : 0.0;
      tok = rng.categorical(w.data(), vocab_size_);
    }
    if (tok == closer) {
      out.push_back(cur);
      cur.clear();
      if (!last) prefix.push_back(closer);
    } else {
      cur.push_back(tok);
      prefix.push_back(tok);
    }
  }
  return out;
}

Infiller::TrainReport Infiller::train(const Corpus& train_corpus,
                                      const Corpus* dev_corpus) {
  require(train_corpus.size() > 0, Error::Kind::InvalidArgument,
          "infiller: empty training corpus");
  Rng pair_rng = Rng::forked(config_.seed, 0x9a17);
  auto pairs = build_infill_pairs(train_corpus, config_, pair_rng);
  require(!pairs.empty(), Error::Kind::InvalidArgument,
          "infiller: no maskable sentences in the training corpus");
  vocab_hash = train_corpus.vocab.hash();
  const Vocabulary& vocab = train_corpus.vocab;

  TrainReport report;
  Rng order_rng = Rng::forked(config_.seed, 0x10ad);
  long step = 0;
  int n = static_cast<int>(pairs.size());
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  for (int epoch = 0; epoch < config_.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    long epoch_tokens = 0;
    for (int start = 0; start < n; start += config_.batch_pairs) {
      int end = std::min(n, start + config_.batch_pairs);
      long batch_tokens = 0;
      for (int i = start; i < end; ++i)
        batch_tokens += static_cast<long>(pairs[order[i]].target.size()) + 1;
      params_.zero_grad();
      double batch_loss = 0.0;
      for (int i = start; i < end; ++i)
        batch_loss += loss_and_grad(pairs[order[i]], vocab,
                                    1.0 / static_cast<double>(batch_tokens));
      require(std::isfinite(batch_loss), Error::Kind::Runtime,
              "infiller training diverged: non-finite loss at epoch " +
                  std::to_string(epoch) + ", batch starting at pair " +
                  std::to_string(start));
      double norm = params_.grad_norm();
      if (norm > kGradClip) params_.scale_grad(kGradClip / norm);
      params_.adam_step(config_.lr, kAdamBeta1, kAdamBeta2, kAdamEps, ++step);
      epoch_loss += batch_loss;
      epoch_tokens += batch_tokens;
    }
    report.epoch_ce.push_back(epoch_loss / static_cast<double>(epoch_tokens));
  }

  params_.quantize_f32();
  if (dev_corpus != nullptr && dev_corpus->size() > 0) {
    Rng dev_rng = Rng::forked(config_.seed, 0xdeb7);
    auto dev_pairs = build_infill_pairs(*dev_corpus, config_, dev_rng);
    double nll = 0.0;
    long tokens = 0;
    for (const auto& pair : dev_pairs) {
      nll += pair_nll(pair.tmpl, pair.target, dev_corpus->vocab);
      tokens += static_cast<long>(pair.target.size()) + 1;
    }
    if (tokens > 0) report.dev_ce = nll / static_cast<double>(tokens);
  }
  return report;
}

std::string Infiller::manifest(const std::string& extra_json) const {
  json j;
  j["kind"] = "infiller";
  j["config"] = json::parse(config_.to_json());
  j["vocab_size"] = vocab_size_;
  j["vocab_hash"] = hex64(vocab_hash);
  json extra = json::parse(extra_json);
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  return j.dump();
}

void Infiller::save(const std::string& path, const std::string& extra_json) const {
  save_checkpoint(path, manifest(extra_json), params_);
}

Infiller Infiller::from_checkpoint(const CheckpointData& data) {
  json j;
  try {
    j = json::parse(data.manifest_json);
  } catch (const json::exception& e) {
    fail(Error::Kind::Format, std::string("infiller checkpoint manifest: ") + e.what());
  }
  require(j.value("kind", "") == "infiller", Error::Kind::Incompatible,
          "checkpoint is not an infiller");
  InfillerConfig config = InfillerConfig::from_json(j.at("config").dump());
  Infiller inf(config, j.at("vocab_size").get<int>());
  restore_params(data, inf.params_);
  if (j.contains("vocab_hash"))
    inf.vocab_hash = std::stoull(j["vocab_hash"].get<std::string>(), nullptr, 16);
  return inf;
}

Infiller Infiller::load(const std::string& path) {
  return from_checkpoint(load_checkpoint(path));
}

}  // namespace seqctl
