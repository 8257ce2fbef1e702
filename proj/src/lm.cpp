#include "lm.hpp"

#include <cmath>

#include "json.hpp"
#include "util.hpp"

namespace seqctl {

using nlohmann::json;

static constexpr double kAdamBeta1 = 0.9;
static constexpr double kAdamBeta2 = 0.999;
static constexpr double kAdamEps = 1e-8;
static constexpr double kGradClip = 1.0;
static constexpr double kInitStd = 0.02;

void LmConfig::validate() const {
  require(layers >= 1, Error::Kind::InvalidArgument, "lm: layers must be >= 1");
  require(heads >= 1 && d_model % heads == 0, Error::Kind::InvalidArgument,
          "lm: d_model must be divisible by heads");
  require(context >= 2, Error::Kind::InvalidArgument, "lm: context must be >= 2");
  require(lr > 0.0, Error::Kind::InvalidArgument, "lm: lr must be positive");
  require(epochs >= 0, Error::Kind::InvalidArgument, "lm: epochs must be >= 0");
  require(batch_docs >= 1, Error::Kind::InvalidArgument, "lm: batch_docs must be >= 1");
}

std::string LmConfig::to_json() const {
  json j;
  j["layers"] = layers;
  j["heads"] = heads;
  j["d_model"] = d_model;
  j["context"] = context;
  j["lr"] = lr;
  j["epochs"] = epochs;
  j["batch_docs"] = batch_docs;
  j["seed"] = seed;
  return j.dump();
}

LmConfig LmConfig::from_json(const std::string& text) {
  LmConfig c;
  try {
    json j = json::parse(text);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.d_model = j.value("d_model", c.d_model);
    c.context = j.value("context", c.context);
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_docs = j.value("batch_docs", c.batch_docs);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    fail(Error::Kind::Format, std::string("lm config: ") + e.what());
  }
  return c;
}

// Every intermediate of one forward pass, kept for the backward sweep.
struct Lm::Workspace {
  std::vector<int> ids;
  int T = 0;
  std::vector<Mat> xs;              // residual stream entering each layer, +final
  struct LayerAct {
    Mat a, q, k, v, att_out, x_mid, m, f1, g;
    std::vector<double> att, ln1_cache, ln2_cache;
  };
  std::vector<LayerAct> acts;
  Mat h;                            // post-final-norm states
  std::vector<double> ln_f_cache;
};

Lm::Lm(const LmConfig& config, int vocab_size)
    : config_(config), vocab_size_(vocab_size) {
  config_.validate();
  require(vocab_size >= 2, Error::Kind::InvalidArgument, "lm: vocabulary too small");
  build_params();
  Rng rng(config_.seed);
  for (auto& p : params_.params()) {
    // Last name component decides: "g" = norm gain (ones), "b*" = bias
    // (zeros), everything else gets small normal noise.
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

void Lm::build_params() {
  int d = config_.d_model;
  auto make = [&](const std::string& name, int r, int c) {
    return params_.create(name, r, c);
  };
  tok_emb_ = make("lm.tok_emb", vocab_size_, d);
  pos_emb_ = make("lm.pos_emb", config_.context, d);
  layers_.resize(config_.layers);
  for (int l = 0; l < config_.layers; ++l) {
    std::string p = "lm.l" + std::to_string(l) + ".";
    Layer& L = layers_[l];
    L.ln1_g = make(p + "ln1.g", 1, d);
    L.ln1_b = make(p + "ln1.b", 1, d);
    L.wq = make(p + "attn.wq", d, d);
    L.bq = make(p + "attn.bq", 1, d);
    L.wk = make(p + "attn.wk", d, d);
    L.bk = make(p + "attn.bk", 1, d);
    L.wv = make(p + "attn.wv", d, d);
    L.bv = make(p + "attn.bv", 1, d);
    L.wo = make(p + "attn.wo", d, d);
    L.bo = make(p + "attn.bo", 1, d);
    L.ln2_g = make(p + "ln2.g", 1, d);
    L.ln2_b = make(p + "ln2.b", 1, d);
    L.w1 = make(p + "mlp.w1", d, 4 * d);
    L.b1 = make(p + "mlp.b1", 1, 4 * d);
    L.w2 = make(p + "mlp.w2", 4 * d, d);
    L.b2 = make(p + "mlp.b2", 1, d);
  }
  ln_f_g_ = make("lm.ln_f.g", 1, d);
  ln_f_b_ = make("lm.ln_f.b", 1, d);
  out_w_ = make("lm.out.w", d, vocab_size_);
  out_b_ = make("lm.out.b", 1, vocab_size_);
}

void Lm::forward(const std::vector<int>& ctx, Workspace& ws) const {
  int T = static_cast<int>(ctx.size());
  require(T >= 1, Error::Kind::InvalidArgument, "lm: empty context");
  require(T <= config_.context, Error::Kind::InvalidArgument,
          "lm: context of length " + std::to_string(T) + " exceeds limit " +
              std::to_string(config_.context));
  int d = config_.d_model;
  int nh = config_.heads;

  ws.ids = ctx;
  ws.T = T;
  ws.xs.assign(config_.layers + 1, Mat(T, d));
  ws.acts.assign(config_.layers, {});

  Mat& x0 = ws.xs[0];
  for (int t = 0; t < T; ++t) {
    require(ctx[t] >= 0 && ctx[t] < vocab_size_, Error::Kind::InvalidArgument,
            "lm: token id out of range");
    const double* te = tok_emb_->row(ctx[t]);
    const double* pe = pos_emb_->row(t);
    double* x = x0.row(t);
    for (int j = 0; j < d; ++j) x[j] = te[j] + pe[j];
  }

  for (int l = 0; l < config_.layers; ++l) {
    const Layer& L = layers_[l];
    auto& A = ws.acts[l];
    const Mat& x = ws.xs[l];
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
    nn::attention_fwd(A.q.data(), A.k.data(), A.v.data(), T, T, d, nh, true,
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
    Mat& x_next = ws.xs[l + 1];
    {
      Mat f2(T, d);
      nn::linear_fwd(A.g.data(), T, 4 * d, L.w2->w.data(), L.b2->w.data(), f2.data(),
                     d);
      for (size_t i = 0; i < x_next.size(); ++i)
        x_next.a[i] = A.x_mid.a[i] + f2.a[i];
    }
  }

  ws.h.resize(T, d);
  ws.ln_f_cache.assign(2 * T, 0.0);
  nn::layernorm_fwd(ws.xs[config_.layers].data(), T, d, ln_f_g_->w.data(),
                    ln_f_b_->w.data(), ws.h.data(), ws.ln_f_cache.data());
}

void Lm::backward(const Workspace& ws, const Mat& dH, bool frozen, Mat* d_emb) const {
  int T = ws.T;
  int d = config_.d_model;
  int nh = config_.heads;
  auto self = const_cast<Lm*>(this);
  auto gw = [&](nn::Param* p) {
    return frozen ? static_cast<double*>(nullptr) : p->g.data();
  };

  Mat dx(T, d);
  nn::layernorm_bwd(ws.xs[config_.layers].data(), T, d, ln_f_g_->w.data(),
                    ws.ln_f_cache.data(), dH.data(), dx.data(),
                    gw(self->ln_f_g_), gw(self->ln_f_b_));

  for (int l = config_.layers - 1; l >= 0; --l) {
    const Layer& L = layers_[l];
    const auto& A = ws.acts[l];
    // dx holds d(loss)/d(x_next) = d/d(x_mid + f2)
    Mat dg(T, 4 * d);
    nn::linear_bwd(A.g.data(), T, 4 * d, L.w2->w.data(), dx.data(), d, dg.data(),
                   gw(self->layers_[l].w2), gw(self->layers_[l].b2));
    Mat df1(T, 4 * d);
    nn::gelu_bwd(A.f1.data(), A.f1.size(), dg.data(), df1.data());
    Mat dm(T, d);
    nn::linear_bwd(A.m.data(), T, d, L.w1->w.data(), df1.data(), 4 * d, dm.data(),
                   gw(self->layers_[l].w1), gw(self->layers_[l].b1));
    Mat dx_mid = dx;  // residual branch
    nn::layernorm_bwd(A.x_mid.data(), T, d, L.ln2_g->w.data(), A.ln2_cache.data(),
                      dm.data(), dx_mid.data(), gw(self->layers_[l].ln2_g),
                      gw(self->layers_[l].ln2_b));
    // dx_mid = d/d(x + proj)
    Mat datt_out(T, d);
    nn::linear_bwd(A.att_out.data(), T, d, L.wo->w.data(), dx_mid.data(), d,
                   datt_out.data(), gw(self->layers_[l].wo), gw(self->layers_[l].bo));
    Mat dq(T, d), dk(T, d), dv(T, d);
    nn::attention_bwd(A.q.data(), A.k.data(), A.v.data(), T, T, d, nh, true,
                      A.att.data(), datt_out.data(), dq.data(), dk.data(), dv.data());
    Mat da(T, d);
    nn::linear_bwd(A.a.data(), T, d, L.wq->w.data(), dq.data(), d, da.data(),
                   gw(self->layers_[l].wq), gw(self->layers_[l].bq));
    nn::linear_bwd(A.a.data(), T, d, L.wk->w.data(), dk.data(), d, da.data(),
                   gw(self->layers_[l].wk), gw(self->layers_[l].bk));
    nn::linear_bwd(A.a.data(), T, d, L.wv->w.data(), dv.data(), d, da.data(),
                   gw(self->layers_[l].wv), gw(self->layers_[l].bv));
    Mat dx_prev = dx_mid;  // residual branch into x
    nn::layernorm_bwd(ws.xs[l].data(), T, d, L.ln1_g->w.data(), A.ln1_cache.data(),
                      da.data(), dx_prev.data(), gw(self->layers_[l].ln1_g),
                      gw(self->layers_[l].ln1_b));
    dx = std::move(dx_prev);
  }

  if (d_emb != nullptr) {
    d_emb->resize(T, d);
    for (size_t i = 0; i < dx.size(); ++i) d_emb->a[i] = dx.a[i];
  }
  if (!frozen) {
    for (int t = 0; t < T; ++t) {
      axpy(1.0, dx.row(t), self->tok_emb_->grow(ws.ids[t]), d);
      axpy(1.0, dx.row(t), self->pos_emb_->grow(t), d);
    }
  }
}

Mat Lm::logp_rows(const std::vector<int>& ctx) const {
  Workspace ws;
  forward(ctx, ws);
  Mat logp(ws.T, vocab_size_);
  std::vector<double> logits(vocab_size_);
  for (int t = 0; t < ws.T; ++t) {
    nn::linear_fwd(ws.h.row(t), 1, config_.d_model, out_w_->w.data(),
                   out_b_->w.data(), logits.data(), vocab_size_);
    nn::log_softmax_row(logits.data(), vocab_size_, logp.row(t));
  }
  return logp;
}

std::vector<double> Lm::next_token_logits(const std::vector<int>& ctx) const {
  Workspace ws;
  forward(ctx, ws);
  std::vector<double> logits(vocab_size_);
  nn::linear_fwd(ws.h.row(ws.T - 1), 1, config_.d_model, out_w_->w.data(),
                 out_b_->w.data(), logits.data(), vocab_size_);
  return logits;
}

Mat Lm::hidden_states(const std::vector<int>& ctx) const {
  Workspace ws;
  forward(ctx, ws);
  return ws.h;
}

std::vector<double> Lm::logits_from_hidden(const Mat& H) const {
  require(H.cols == config_.d_model, Error::Kind::InvalidArgument,
          "logits_from_hidden: width " + std::to_string(H.cols) + " != d_model " +
              std::to_string(config_.d_model));
  require(H.rows >= 1, Error::Kind::InvalidArgument, "logits_from_hidden: empty H");
  std::vector<double> logits(vocab_size_);
  nn::linear_fwd(H.row(H.rows - 1), 1, config_.d_model, out_w_->w.data(),
                 out_b_->w.data(), logits.data(), vocab_size_);
  return logits;
}

double Lm::sequence_nll(const std::vector<int>& ids) const {
  require(ids.size() >= 2, Error::Kind::InvalidArgument,
          "perplexity needs at least two tokens");
  Mat logp = logp_rows(ids);
  double nll = 0.0;
  for (size_t t = 1; t < ids.size(); ++t)
    nll -= logp.at(static_cast<int>(t) - 1, ids[t]);
  return nll;
}

double Lm::perplexity(const std::vector<int>& ids) const {
  double nll = sequence_nll(ids);
  return std::exp(nll / static_cast<double>(ids.size() - 1));
}

Mat Lm::backward_to_embeddings(const std::vector<int>& ctx, const Mat& dH) const {
  Workspace ws;
  forward(ctx, ws);
  require(dH.rows == ws.T && dH.cols == config_.d_model, Error::Kind::InvalidArgument,
          "backward_to_embeddings: dH shape mismatch");
  Mat d_emb;
  backward(ws, dH, /*frozen=*/true, &d_emb);
  return d_emb;
}

double Lm::doc_loss_and_grad(const std::vector<int>& ids, double scale) {
  Workspace ws;
  forward(ids, ws);
  int T = ws.T;
  int d = config_.d_model;
  Mat dH(T, d);
  double loss = 0.0;

  std::vector<double> logits(vocab_size_), logp(vocab_size_), dlogits(vocab_size_);
  for (int t = 0; t + 1 < T; ++t) {
    nn::linear_fwd(ws.h.row(t), 1, d, out_w_->w.data(), out_b_->w.data(),
                   logits.data(), vocab_size_);
    nn::log_softmax_row(logits.data(), vocab_size_, logp.data());
    int target = ids[t + 1];
    loss -= logp[target];
    for (int vtok = 0; vtok < vocab_size_; ++vtok)
      dlogits[vtok] = std::exp(logp[vtok]) * scale;
    dlogits[target] -= scale;
    nn::linear_bwd(ws.h.row(t), 1, d, out_w_->w.data(), dlogits.data(), vocab_size_,
                   dH.row(t), out_w_->g.data(), out_b_->g.data());
  }
  backward(ws, dH, /*frozen=*/false, nullptr);
  return loss;
}

Lm::TrainReport Lm::train(const Corpus& train_corpus, const Corpus* dev_corpus) {
  require(train_corpus.size() > 0, Error::Kind::InvalidArgument,
          "lm: empty training corpus");
  std::vector<std::vector<int>> streams;
  for (const auto& doc : train_corpus.docs) {
    auto ids = flatten_document(doc, train_corpus.vocab);
    require(static_cast<int>(ids.size()) <= config_.context, Error::Kind::InvalidArgument,
            "lm: document stream longer than the context window");
    streams.push_back(std::move(ids));
  }
  vocab_hash = train_corpus.vocab.hash();

  TrainReport report;
  Rng order_rng = Rng::forked(config_.seed, 0x10ad);
  long step = 0;
  int n = static_cast<int>(streams.size());
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  for (int epoch = 0; epoch < config_.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    long epoch_tokens = 0;
    for (int start = 0; start < n; start += config_.batch_docs) {
      int end = std::min(n, start + config_.batch_docs);
      long batch_tokens = 0;
      for (int i = start; i < end; ++i)
        batch_tokens += static_cast<long>(streams[order[i]].size()) - 1;
      params_.zero_grad();
      double batch_loss = 0.0;
      for (int i = start; i < end; ++i)
        batch_loss +=
            doc_loss_and_grad(streams[order[i]], 1.0 / static_cast<double>(batch_tokens));
      require(std::isfinite(batch_loss), Error::Kind::Runtime,
              "lm training diverged: non-finite loss at epoch " +
                  std::to_string(epoch) + ", batch starting at document " +
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
    double nll = 0.0;
    long tokens = 0;
    for (const auto& doc : dev_corpus->docs) {
      auto ids = flatten_document(doc, dev_corpus->vocab);
      nll += sequence_nll(ids);
      tokens += static_cast<long>(ids.size()) - 1;
    }
    report.dev_perplexity = std::exp(nll / static_cast<double>(tokens));
  }
  return report;
}

std::string Lm::manifest(const std::string& extra_json) const {
  json j;
  j["kind"] = "lm";
  j["config"] = json::parse(config_.to_json());
  j["vocab_size"] = vocab_size_;
  j["vocab_hash"] = hex64(vocab_hash);
  json extra = json::parse(extra_json);
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  return j.dump();
}

void Lm::save(const std::string& path, const std::string& extra_json) const {
  save_checkpoint(path, manifest(extra_json), params_);
}

Lm Lm::from_checkpoint(const CheckpointData& data) {
  json j;
  try {
    j = json::parse(data.manifest_json);
  } catch (const json::exception& e) {
    fail(Error::Kind::Format, std::string("lm checkpoint manifest: ") + e.what());
  }
  require(j.value("kind", "") == "lm", Error::Kind::Incompatible,
          "checkpoint is not a language model");
  LmConfig config = LmConfig::from_json(j.at("config").dump());
  Lm lm(config, j.at("vocab_size").get<int>());
  restore_params(data, lm.params_);
  if (j.contains("vocab_hash"))
    lm.vocab_hash = std::stoull(j["vocab_hash"].get<std::string>(), nullptr, 16);
  return lm;
}

Lm Lm::load(const std::string& path) { return from_checkpoint(load_checkpoint(path)); }

// ---------------------------------------------------------------------------
// Incremental session
// ---------------------------------------------------------------------------

LmSession::LmSession(const Lm& lm) : lm_(lm) {
  int d = lm.config().d_model;
  k_cache_.assign(lm.config().layers, Mat(0, d));
  v_cache_.assign(lm.config().layers, Mat(0, d));
  for (auto& m : k_cache_) m.a.reserve(static_cast<size_t>(lm.config().context) * d);
  for (auto& m : v_cache_) m.a.reserve(static_cast<size_t>(lm.config().context) * d);
  hidden_.resize(0, d);
  hidden_.a.reserve(static_cast<size_t>(lm.config().context) * d);
}

void LmSession::step(int token, bool commit, std::vector<double>* h_out,
                     std::vector<double>* logits_out) {
  const LmConfig& cfg = lm_.config();
  int d = cfg.d_model;
  int t = length_;
  require(t < cfg.context, Error::Kind::InvalidArgument,
          "lm session: context window exhausted");
  require(token >= 0 && token < lm_.vocab_size(), Error::Kind::InvalidArgument,
          "lm session: token id out of range");

  std::vector<double> x(d);
  {
    const double* te = lm_.tok_emb_->row(token);
    const double* pe = lm_.pos_emb_->row(t);
    for (int j = 0; j < d; ++j) x[j] = te[j] + pe[j];
  }

  std::vector<double> a(d), q(d), k(d), v(d), att_out(d), proj(d), m(d);
  std::vector<double> f1(4 * d), g(4 * d), f2(d);
  std::vector<double> cache(2), att;
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& L = lm_.layers_[l];
    nn::layernorm_fwd(x.data(), 1, d, L.ln1_g->w.data(), L.ln1_b->w.data(), a.data(),
                      cache.data());
    nn::linear_fwd(a.data(), 1, d, L.wq->w.data(), L.bq->w.data(), q.data(), d);
    nn::linear_fwd(a.data(), 1, d, L.wk->w.data(), L.bk->w.data(), k.data(), d);
    nn::linear_fwd(a.data(), 1, d, L.wv->w.data(), L.bv->w.data(), v.data(), d);

    Mat& K = k_cache_[l];
    Mat& V = v_cache_[l];
    K.a.insert(K.a.end(), k.begin(), k.end());
    V.a.insert(V.a.end(), v.begin(), v.end());
    K.rows = V.rows = t + 1;
    att.assign(static_cast<size_t>(cfg.heads) * (t + 1), 0.0);
    nn::attention_fwd(q.data(), K.data(), V.data(), 1, t + 1, d, cfg.heads, true,
                      att_out.data(), att.data());
    if (!commit) {
      K.a.resize(static_cast<size_t>(t) * d);
      V.a.resize(static_cast<size_t>(t) * d);
      K.rows = V.rows = t;
    }

    nn::linear_fwd(att_out.data(), 1, d, L.wo->w.data(), L.bo->w.data(), proj.data(),
                   d);
    for (int j = 0; j < d; ++j) x[j] += proj[j];
    nn::layernorm_fwd(x.data(), 1, d, L.ln2_g->w.data(), L.ln2_b->w.data(), m.data(),
                      cache.data());
    nn::linear_fwd(m.data(), 1, d, L.w1->w.data(), L.b1->w.data(), f1.data(), 4 * d);
    nn::gelu_fwd(f1.data(), f1.size(), g.data());
    nn::linear_fwd(g.data(), 1, 4 * d, L.w2->w.data(), L.b2->w.data(), f2.data(), d);
    for (int j = 0; j < d; ++j) x[j] += f2[j];
  }

  std::vector<double> h(d);
  nn::layernorm_fwd(x.data(), 1, d, lm_.ln_f_g_->w.data(), lm_.ln_f_b_->w.data(),
                    h.data(), cache.data());
  std::vector<double> logits(lm_.vocab_size());
  nn::linear_fwd(h.data(), 1, d, lm_.out_w_->w.data(), lm_.out_b_->w.data(),
                 logits.data(), lm_.vocab_size());

  if (commit) {
    hidden_.a.insert(hidden_.a.end(), h.begin(), h.end());
    hidden_.rows = t + 1;
    logits_ = logits;
    ++length_;
  }
  if (h_out != nullptr) *h_out = std::move(h);
  if (logits_out != nullptr) *logits_out = std::move(logits);
}

void LmSession::push(int token) { step(token, true, nullptr, nullptr); }

LmSession::Peek LmSession::peek(int token) {
  Peek out;
  step(token, false, &out.hidden, &out.logits);
  return out;
}

}  // namespace seqctl
