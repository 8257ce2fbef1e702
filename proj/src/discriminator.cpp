#include "discriminator.hpp"

#include <algorithm>
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

const char* StructuralMode::kind_name(Kind k) {
  switch (k) {
    case Kind::LocalOnly: return "local";
    case Kind::PastAware: return "past";
    case Kind::FullSequence: return "full";
  }
  return "full";
}

StructuralMode::Kind StructuralMode::kind_from_name(const std::string& name) {
  if (name == "local") return Kind::LocalOnly;
  if (name == "past") return Kind::PastAware;
  if (name == "full") return Kind::FullSequence;
  fail(Error::Kind::InvalidArgument, "unknown structural mode '" + name + "'");
}

void DiscrimConfig::validate(int d_model) const {
  require(window >= 0, Error::Kind::InvalidArgument, "discrim: window must be >= 0");
  require(label_width >= 1, Error::Kind::InvalidArgument,
          "discrim: label_width must be >= 1");
  require(ctx_layers >= 1, Error::Kind::InvalidArgument,
          "discrim: ctx_layers must be >= 1");
  require(ctx_heads >= 1 && d_model % ctx_heads == 0, Error::Kind::InvalidArgument,
          "discrim: d_model must be divisible by ctx_heads");
  require(head_hidden >= 1, Error::Kind::InvalidArgument,
          "discrim: head_hidden must be >= 1");
  require(epochs >= 0, Error::Kind::InvalidArgument, "discrim: epochs must be >= 0");
  require(lr > 0.0, Error::Kind::InvalidArgument, "discrim: lr must be positive");
  require(batch_docs >= 1, Error::Kind::InvalidArgument,
          "discrim: batch_docs must be >= 1");
}

std::string DiscrimConfig::to_json() const {
  json j;
  j["window"] = window;
  j["label_width"] = label_width;
  j["ctx_layers"] = ctx_layers;
  j["ctx_heads"] = ctx_heads;
  j["use_contextualizer"] = use_contextualizer;
  j["head_hidden"] = head_hidden;
  j["prefix_training"] = prefix_training;
  j["epochs"] = epochs;
  j["lr"] = lr;
  j["batch_docs"] = batch_docs;
  j["seed"] = seed;
  return j.dump();
}

DiscrimConfig DiscrimConfig::from_json(const std::string& text) {
  DiscrimConfig c;
  try {
    json j = json::parse(text);
    c.window = j.value("window", c.window);
    c.label_width = j.value("label_width", c.label_width);
    c.ctx_layers = j.value("ctx_layers", c.ctx_layers);
    c.ctx_heads = j.value("ctx_heads", c.ctx_heads);
    c.use_contextualizer = j.value("use_contextualizer", c.use_contextualizer);
    c.head_hidden = j.value("head_hidden", c.head_hidden);
    c.prefix_training = j.value("prefix_training", c.prefix_training);
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.batch_docs = j.value("batch_docs", c.batch_docs);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    fail(Error::Kind::Format, std::string("discrim config: ") + e.what());
  }
  return c;
}

// Weight of the head at offset o under the mode's discount; 0^0 = 1 so b = 0
// leaves only the local term.
static double offset_weight(const StructuralMode& mode, int o) {
  if (o == 0) return 1.0;
  return std::pow(mode.b, std::abs(o));
}

static double combine_rows(const std::vector<std::vector<double>>& logp,
                           const std::vector<bool>& valid, int window,
                           const ControlPlan& plan, int k, const StructuralMode& mode) {
  int lo = -window, hi = window;
  switch (mode.kind) {
    case StructuralMode::Kind::LocalOnly: lo = hi = 0; break;
    case StructuralMode::Kind::PastAware: hi = 0; break;
    case StructuralMode::Kind::FullSequence: break;
  }
  double total = 0.0;
  for (int o = lo; o <= hi; ++o) {
    int j = k + o;
    if (j < 1 || j > plan.length()) continue;
    require(valid[o + window], Error::Kind::InvalidArgument,
            "head predictions were built for a different plan length");
    double w = offset_weight(mode, o);
    if (w == 0.0) continue;  // never multiply a zero weight into -inf
    total += w * logp[o + window][plan.tags[j - 1]];
  }
  return total;
}

double combine_heads(const HeadPredictions& heads, const ControlPlan& plan, int k,
                     const StructuralMode& mode) {
  return combine_rows(heads.logp, heads.valid, heads.window, plan, k, mode);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Discriminator::Discriminator(const DiscrimConfig& config, int d_model, int num_classes)
    : config_(config), d_model_(d_model), num_classes_(num_classes) {
  config_.validate(d_model);
  require(num_classes >= 2, Error::Kind::InvalidArgument,
          "discrim: need at least two classes");
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
  class_weights_.assign(num_classes, 1.0);
  dev_f1_.assign(2 * config_.window + 1, 0.0);
}

void Discriminator::build_params() {
  int d = d_model_;
  int dl = config_.label_width;
  auto make = [&](const std::string& name, int r, int c) {
    return params_.create(name, r, c);
  };
  pool_q_ = make("disc.pool.q", 1, d);
  if (config_.use_contextualizer) {
    sent_pos_ = make("disc.sent_pos", kMaxSentences, d);
    ctx_layers_.resize(config_.ctx_layers);
    for (int l = 0; l < config_.ctx_layers; ++l) {
      std::string p = "disc.ctx" + std::to_string(l) + ".";
      CtxLayer& L = ctx_layers_[l];
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
    ctx_ln_f_g_ = make("disc.ctx_ln_f.g", 1, d);
    ctx_ln_f_b_ = make("disc.ctx_ln_f.b", 1, d);
  }
  label_emb_ = make("disc.label.emb", num_classes_, dl);
  label_pos_ = make("disc.label.pos", kMaxSentences, dl);
  label_empty_ = make("disc.label.empty", 1, dl);
  int n_heads = 2 * config_.window + 1;
  label_q_ = make("disc.label.q", n_heads, dl);
  heads_.resize(n_heads);
  for (int i = 0; i < n_heads; ++i) {
    std::string p = "disc.head" + std::to_string(i) + ".";
    heads_[i].w1 = make(p + "w1", d + dl, config_.head_hidden);
    heads_[i].b1 = make(p + "b1", 1, config_.head_hidden);
    heads_[i].w2 = make(p + "w2", config_.head_hidden, num_classes_);
    heads_[i].b2 = make(p + "b2", 1, num_classes_);
  }
}

// Every intermediate of one (stream, k) evaluation, kept for the backward
// sweep and reused across calls to avoid churn.
struct Discriminator::Forward {
  const Mat* h = nullptr;
  std::vector<StreamLayout::Span> spans;  // sentences 1..k
  ControlPlan plan;
  int k = 0;

  Mat s;  // k x d pooled sentence vectors
  std::vector<std::vector<double>> pool_alpha;

  Mat u;  // contextualizer input (s + position)
  std::vector<Mat> xs;
  struct CtxActs {
    Mat a, q, k, v, att_out, x_mid, m, f1, g;
    std::vector<double> att, ln1_cache, ln2_cache;
  };
  std::vector<CtxActs> acts;
  std::vector<double> ln_f_cache;
  std::vector<double> a_last;  // a_k, input to every head

  std::vector<int> label_len;  // labels in context per head, -1 when masked
  std::vector<Mat> label_rows;
  std::vector<std::vector<double>> label_alpha;
  std::vector<std::vector<double>> h_off;

  std::vector<std::vector<double>> z, f1h, gh, logits, logp;
  std::vector<bool> valid;
};

void Discriminator::run_forward(const Mat& h, const StreamLayout& layout,
                                const ControlPlan& plan, int k, Forward& fw) const {
  int d = d_model_;
  int dl = config_.label_width;
  int S = plan.length();
  require(h.cols == d, Error::Kind::InvalidArgument,
          "discrim: hidden width " + std::to_string(h.cols) + " != d_model " +
              std::to_string(d));
  require(k >= 1 && k <= S, Error::Kind::InvalidArgument,
          "discrim: sentence index " + std::to_string(k) + " outside plan of length " +
              std::to_string(S));
  require(S <= kMaxSentences, Error::Kind::InvalidArgument,
          "discrim: plan longer than " + std::to_string(kMaxSentences) + " sentences");
  require(static_cast<int>(layout.body.size()) >= k, Error::Kind::InvalidArgument,
          "discrim: stream has fewer than " + std::to_string(k) + " body sentences");
  for (int t : plan.tags)
    require(t >= 0 && t < num_classes_, Error::Kind::InvalidArgument,
            "discrim: control code out of range");

  fw.h = &h;
  fw.plan = plan;
  fw.k = k;
  fw.spans.assign(layout.body.begin(), layout.body.begin() + k);
  for (const auto& sp : fw.spans)
    require(sp.begin >= 0 && sp.begin <= sp.end && sp.end <= h.rows,
            Error::Kind::InvalidArgument, "discrim: sentence span outside the stream");

  // Pool each sentence's hidden rows with the learned query. An empty
  // in-progress sentence pools to zero.
  fw.s.resize(k, d);
  fw.s.zero();
  fw.pool_alpha.assign(k, {});
  for (int j = 0; j < k; ++j) {
    int len = fw.spans[j].length();
    if (len == 0) continue;
    fw.pool_alpha[j].assign(len, 0.0);
    const double* rows = h.row(fw.spans[j].begin);
    nn::attnpool_fwd(pool_q_->w.data(), rows, rows, len, d, fw.s.row(j),
                     fw.pool_alpha[j].data());
  }

  fw.a_last.assign(d, 0.0);
  if (config_.use_contextualizer) {
    int nh = config_.ctx_heads;
    fw.u.resize(k, d);
    for (int j = 0; j < k; ++j) {
      const double* pe = sent_pos_->row(j);
      const double* sj = fw.s.row(j);
      double* uj = fw.u.row(j);
      for (int c = 0; c < d; ++c) uj[c] = sj[c] + pe[c];
    }
    fw.xs.assign(config_.ctx_layers + 1, Mat(k, d));
    fw.xs[0] = fw.u;
    fw.acts.assign(config_.ctx_layers, {});
    for (int l = 0; l < config_.ctx_layers; ++l) {
      const CtxLayer& L = ctx_layers_[l];
      auto& A = fw.acts[l];
      const Mat& x = fw.xs[l];
      A.a.resize(k, d);
      A.ln1_cache.assign(2 * k, 0.0);
      nn::layernorm_fwd(x.data(), k, d, L.ln1_g->w.data(), L.ln1_b->w.data(),
                        A.a.data(), A.ln1_cache.data());
      A.q.resize(k, d);
      A.k.resize(k, d);
      A.v.resize(k, d);
      nn::linear_fwd(A.a.data(), k, d, L.wq->w.data(), L.bq->w.data(), A.q.data(), d);
      nn::linear_fwd(A.a.data(), k, d, L.wk->w.data(), L.bk->w.data(), A.k.data(), d);
      nn::linear_fwd(A.a.data(), k, d, L.wv->w.data(), L.bv->w.data(), A.v.data(), d);
      A.att.assign(static_cast<size_t>(nh) * k * k, 0.0);
      A.att_out.resize(k, d);
      nn::attention_fwd(A.q.data(), A.k.data(), A.v.data(), k, k, d, nh, true,
                        A.att_out.data(), A.att.data());
      A.x_mid.resize(k, d);
      {
        Mat proj(k, d);
        nn::linear_fwd(A.att_out.data(), k, d, L.wo->w.data(), L.bo->w.data(),
                       proj.data(), d);
        for (size_t i = 0; i < A.x_mid.size(); ++i)
          A.x_mid.a[i] = x.a[i] + proj.a[i];
      }
      A.m.resize(k, d);
      A.ln2_cache.assign(2 * k, 0.0);
      nn::layernorm_fwd(A.x_mid.data(), k, d, L.ln2_g->w.data(), L.ln2_b->w.data(),
                        A.m.data(), A.ln2_cache.data());
      A.f1.resize(k, 4 * d);
      nn::linear_fwd(A.m.data(), k, d, L.w1->w.data(), L.b1->w.data(), A.f1.data(),
                     4 * d);
      A.g.resize(k, 4 * d);
      nn::gelu_fwd(A.f1.data(), A.f1.size(), A.g.data());
      Mat& xn = fw.xs[l + 1];
      xn.resize(k, d);
      nn::linear_fwd(A.g.data(), k, 4 * d, L.w2->w.data(), L.b2->w.data(), xn.data(),
                     d);
      for (size_t i = 0; i < xn.size(); ++i) xn.a[i] += A.x_mid.a[i];
    }
    fw.ln_f_cache.assign(2, 0.0);
    nn::layernorm_fwd(fw.xs[config_.ctx_layers].row(k - 1), 1, d,
                      ctx_ln_f_g_->w.data(), ctx_ln_f_b_->w.data(), fw.a_last.data(),
                      fw.ln_f_cache.data());
  } else {
    const double* sk = fw.s.row(k - 1);
    std::copy(sk, sk + d, fw.a_last.begin());
  }

  // Teacher-forced label context per head: classes c_1..c_{j-1} embedded with
  // label and position vectors, pooled by that head's query. An empty context
  // uses the learned stand-in.
  int n_heads = 2 * config_.window + 1;
  fw.label_len.assign(n_heads, -1);
  fw.label_rows.resize(n_heads);
  fw.label_alpha.assign(n_heads, {});
  fw.h_off.assign(n_heads, {});
  fw.z.assign(n_heads, {});
  fw.f1h.assign(n_heads, {});
  fw.gh.assign(n_heads, {});
  fw.logits.assign(n_heads, {});
  fw.logp.assign(n_heads, {});
  fw.valid.assign(n_heads, false);
  for (int hi = 0; hi < n_heads; ++hi) {
    int o = hi - config_.window;
    int j = k + o;
    if (j < 1 || j > S) continue;
    fw.valid[hi] = true;
    int len = j - 1;
    fw.label_len[hi] = len;
    fw.h_off[hi].assign(dl, 0.0);
    if (len > 0) {
      fw.label_rows[hi].resize(len, dl);
      for (int m = 0; m < len; ++m) {
        const double* le = label_emb_->row(plan.tags[m]);
        const double* pe = label_pos_->row(m);
        double* r = fw.label_rows[hi].row(m);
        for (int c = 0; c < dl; ++c) r[c] = le[c] + pe[c];
      }
      fw.label_alpha[hi].assign(len, 0.0);
      nn::attnpool_fwd(label_q_->row(hi), fw.label_rows[hi].data(),
                       fw.label_rows[hi].data(), len, dl, fw.h_off[hi].data(),
                       fw.label_alpha[hi].data());
    } else {
      const double* e = label_empty_->w.data();
      std::copy(e, e + dl, fw.h_off[hi].begin());
    }

    const Head& H = heads_[hi];
    fw.z[hi].assign(d + dl, 0.0);
    std::copy(fw.a_last.begin(), fw.a_last.end(), fw.z[hi].begin());
    std::copy(fw.h_off[hi].begin(), fw.h_off[hi].end(), fw.z[hi].begin() + d);
    fw.f1h[hi].assign(config_.head_hidden, 0.0);
    nn::linear_fwd(fw.z[hi].data(), 1, d + dl, H.w1->w.data(), H.b1->w.data(),
                   fw.f1h[hi].data(), config_.head_hidden);
    fw.gh[hi].assign(config_.head_hidden, 0.0);
    nn::gelu_fwd(fw.f1h[hi].data(), fw.f1h[hi].size(), fw.gh[hi].data());
    fw.logits[hi].assign(num_classes_, 0.0);
    nn::linear_fwd(fw.gh[hi].data(), 1, config_.head_hidden, H.w2->w.data(),
                   H.b2->w.data(), fw.logits[hi].data(), num_classes_);
    fw.logp[hi].assign(num_classes_, 0.0);
    nn::log_softmax_row(fw.logits[hi].data(), num_classes_, fw.logp[hi].data());
  }
}

void Discriminator::run_backward(const Forward& fw,
                                 const std::vector<std::vector<double>>& dlogp,
                                 bool frozen, Mat* dh) const {
  int d = d_model_;
  int dl = config_.label_width;
  int k = fw.k;
  int n_heads = 2 * config_.window + 1;
  auto self = const_cast<Discriminator*>(this);
  auto gw = [&](nn::Param* p) {
    return frozen ? static_cast<double*>(nullptr) : p->g.data();
  };

  std::vector<double> da_last(d, 0.0);
  std::vector<double> dlogits(num_classes_), dgh(config_.head_hidden),
      df1h(config_.head_hidden), dz(d + dl), dh_off(dl);
  for (int hi = 0; hi < n_heads; ++hi) {
    if (!fw.valid[hi] || dlogp[hi].empty()) continue;
    const Head& H = heads_[hi];
    std::fill(dlogits.begin(), dlogits.end(), 0.0);
    nn::log_softmax_bwd_row(fw.logp[hi].data(), num_classes_, dlogp[hi].data(),
                            dlogits.data());
    std::fill(dgh.begin(), dgh.end(), 0.0);
    nn::linear_bwd(fw.gh[hi].data(), 1, config_.head_hidden, H.w2->w.data(),
                   dlogits.data(), num_classes_, dgh.data(), gw(self->heads_[hi].w2),
                   gw(self->heads_[hi].b2));
    std::fill(df1h.begin(), df1h.end(), 0.0);
    nn::gelu_bwd(fw.f1h[hi].data(), fw.f1h[hi].size(), dgh.data(), df1h.data());
    std::fill(dz.begin(), dz.end(), 0.0);
    nn::linear_bwd(fw.z[hi].data(), 1, d + dl, H.w1->w.data(), df1h.data(),
                   config_.head_hidden, dz.data(), gw(self->heads_[hi].w1),
                   gw(self->heads_[hi].b1));
    for (int c = 0; c < d; ++c) da_last[c] += dz[c];

    // The label side never touches H, so it only matters when training.
    if (frozen) continue;
    std::copy(dz.begin() + d, dz.end(), dh_off.begin());
    int len = fw.label_len[hi];
    if (len > 0) {
      Mat drows(len, dl);
      nn::attnpool_bwd(label_q_->row(hi), fw.label_rows[hi].data(),
                       fw.label_rows[hi].data(), len, dl,
                       fw.label_alpha[hi].data(), dh_off.data(),
                       self->label_q_->grow(hi), drows.data(), drows.data());
      for (int m = 0; m < len; ++m) {
        axpy(1.0, drows.row(m), self->label_emb_->grow(fw.plan.tags[m]), dl);
        axpy(1.0, drows.row(m), self->label_pos_->grow(m), dl);
      }
    } else {
      axpy(1.0, dh_off.data(), self->label_empty_->grow(0), dl);
    }
  }

  Mat ds(k, d);
  if (config_.use_contextualizer) {
    int nh = config_.ctx_heads;
    Mat dx(k, d);
    nn::layernorm_bwd(fw.xs[config_.ctx_layers].row(k - 1), 1, d,
                      ctx_ln_f_g_->w.data(), fw.ln_f_cache.data(), da_last.data(),
                      dx.row(k - 1), gw(self->ctx_ln_f_g_), gw(self->ctx_ln_f_b_));
    for (int l = config_.ctx_layers - 1; l >= 0; --l) {
      const CtxLayer& L = ctx_layers_[l];
      const auto& A = fw.acts[l];
      Mat dg(k, 4 * d);
      nn::linear_bwd(A.g.data(), k, 4 * d, L.w2->w.data(), dx.data(), d, dg.data(),
                     gw(self->ctx_layers_[l].w2), gw(self->ctx_layers_[l].b2));
      Mat df1(k, 4 * d);
      nn::gelu_bwd(A.f1.data(), A.f1.size(), dg.data(), df1.data());
      Mat dm(k, d);
      nn::linear_bwd(A.m.data(), k, d, L.w1->w.data(), df1.data(), 4 * d, dm.data(),
                     gw(self->ctx_layers_[l].w1), gw(self->ctx_layers_[l].b1));
      Mat dx_mid = dx;
      nn::layernorm_bwd(A.x_mid.data(), k, d, L.ln2_g->w.data(), A.ln2_cache.data(),
                        dm.data(), dx_mid.data(), gw(self->ctx_layers_[l].ln2_g),
                        gw(self->ctx_layers_[l].ln2_b));
      Mat datt_out(k, d);
      nn::linear_bwd(A.att_out.data(), k, d, L.wo->w.data(), dx_mid.data(), d,
                     datt_out.data(), gw(self->ctx_layers_[l].wo),
                     gw(self->ctx_layers_[l].bo));
      Mat dq(k, d), dk(k, d), dv(k, d);
      nn::attention_bwd(A.q.data(), A.k.data(), A.v.data(), k, k, d, nh, true,
                        A.att.data(), datt_out.data(), dq.data(), dk.data(),
                        dv.data());
      Mat da(k, d);
      nn::linear_bwd(A.a.data(), k, d, L.wq->w.data(), dq.data(), d, da.data(),
                     gw(self->ctx_layers_[l].wq), gw(self->ctx_layers_[l].bq));
      nn::linear_bwd(A.a.data(), k, d, L.wk->w.data(), dk.data(), d, da.data(),
                     gw(self->ctx_layers_[l].wk), gw(self->ctx_layers_[l].bk));
      nn::linear_bwd(A.a.data(), k, d, L.wv->w.data(), dv.data(), d, da.data(),
                     gw(self->ctx_layers_[l].wv), gw(self->ctx_layers_[l].bv));
      Mat dx_prev = dx_mid;
      nn::layernorm_bwd(fw.xs[l].data(), k, d, L.ln1_g->w.data(), A.ln1_cache.data(),
                        da.data(), dx_prev.data(), gw(self->ctx_layers_[l].ln1_g),
                        gw(self->ctx_layers_[l].ln1_b));
      dx = std::move(dx_prev);
    }
    ds = dx;
    if (!frozen)
      for (int j = 0; j < k; ++j) axpy(1.0, dx.row(j), self->sent_pos_->grow(j), d);
  } else {
    for (int c = 0; c < d; ++c) ds.row(k - 1)[c] = da_last[c];
  }

  for (int j = 0; j < k; ++j) {
    int len = fw.spans[j].length();
    if (len == 0) continue;
    const double* rows = fw.h->row(fw.spans[j].begin);
    double* dh_rows = dh ? dh->row(fw.spans[j].begin) : nullptr;
    nn::attnpool_bwd(pool_q_->w.data(), rows, rows, len, d, fw.pool_alpha[j].data(),
                     ds.row(j), gw(self->pool_q_), dh_rows, dh_rows);
  }
}

HeadPredictions Discriminator::predict_heads_from_hidden(const Mat& h,
                                                         const StreamLayout& layout,
                                                         const ControlPlan& plan,
                                                         int k) const {
  Forward fw;
  run_forward(h, layout, plan, k, fw);
  HeadPredictions out;
  out.window = config_.window;
  out.logp = fw.logp;
  out.valid = fw.valid;
  return out;
}

double Discriminator::score_from_hidden(const Mat& h, const StreamLayout& layout,
                                        const ControlPlan& plan, int k,
                                        const StructuralMode& mode) const {
  Forward fw;
  run_forward(h, layout, plan, k, fw);
  return combine_rows(fw.logp, fw.valid, config_.window, plan, k, mode);
}

HeadPredictions Discriminator::predict_heads(const Lm& lm, const Vocabulary& vocab,
                                             const std::vector<int>& stream,
                                             const ControlPlan& plan, int k) const {
  check_compatible(lm);
  Mat h = lm.hidden_states(stream);
  StreamLayout layout = parse_stream(stream, vocab);
  return predict_heads_from_hidden(h, layout, plan, k);
}

double Discriminator::class_log_likelihood(const Lm& lm, const Vocabulary& vocab,
                                           const std::vector<int>& stream,
                                           const ControlPlan& plan, int k,
                                           const StructuralMode& mode) const {
  check_compatible(lm);
  Mat h = lm.hidden_states(stream);
  StreamLayout layout = parse_stream(stream, vocab);
  return score_from_hidden(h, layout, plan, k, mode);
}

Mat Discriminator::loss_grad_wrt_hidden(const Mat& h, const StreamLayout& layout,
                                        const ControlPlan& plan, int k,
                                        const StructuralMode& mode) const {
  Forward fw;
  run_forward(h, layout, plan, k, fw);
  int n_heads = 2 * config_.window + 1;
  std::vector<std::vector<double>> dlogp(n_heads);
  int lo = -config_.window, hi = config_.window;
  switch (mode.kind) {
    case StructuralMode::Kind::LocalOnly: lo = hi = 0; break;
    case StructuralMode::Kind::PastAware: hi = 0; break;
    case StructuralMode::Kind::FullSequence: break;
  }
  for (int o = lo; o <= hi; ++o) {
    int j = k + o;
    if (j < 1 || j > plan.length()) continue;
    double w = offset_weight(mode, o);
    if (w == 0.0) continue;
    auto& row = dlogp[o + config_.window];
    row.assign(num_classes_, 0.0);
    row[plan.tags[j - 1]] = -w;  // loss is the negated weighted log-likelihood
  }
  Mat dh(h.rows, h.cols);
  run_backward(fw, dlogp, /*frozen=*/true, &dh);
  return dh;
}

Mat grad_wrt_hidden(const Lm& lm, const Discriminator& disc, const Vocabulary& vocab,
                    const std::vector<int>& stream, const ControlPlan& plan, int k,
                    const StructuralMode& mode) {
  disc.check_compatible(lm);
  Mat h = lm.hidden_states(stream);
  StreamLayout layout = parse_stream(stream, vocab);
  return disc.loss_grad_wrt_hidden(h, layout, plan, k, mode);
}

StandaloneStream standalone_sentence_stream(const std::vector<int>& tokens,
                                            const Vocabulary& vocab) {
  StandaloneStream out;
  out.stream.reserve(tokens.size() + 1);
  out.stream.push_back(vocab.bos());
  out.stream.insert(out.stream.end(), tokens.begin(), tokens.end());
  out.layout.headline = {1, 1};
  out.layout.body.push_back({1, static_cast<int>(out.stream.size())});
  out.layout.last_complete = false;
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

// One training example: sentence k of a document seen up to word prefix i.
struct SampleRef {
  int k = 0;
  int i = 0;
};

struct DocContext {
  Mat h;
  StreamLayout layout;
  ControlPlan plan;
  std::vector<SampleRef> samples;
};

}  // namespace

double Discriminator::training_loss_and_grad(const Mat& h, const StreamLayout& layout,
                                             const ControlPlan& plan, int k,
                                             double grad_scale) {
  Forward fw;
  run_forward(h, layout, plan, k, fw);
  int n_heads = 2 * config_.window + 1;
  int valid_heads = 0;
  for (int hi = 0; hi < n_heads; ++hi)
    if (fw.valid[hi]) ++valid_heads;
  std::vector<std::vector<double>> dlogp(n_heads);
  double loss = 0.0;
  for (int hi = 0; hi < n_heads; ++hi) {
    if (!fw.valid[hi]) continue;
    int target = plan.tags[k + hi - config_.window - 1];
    double cw = class_weights_[target];
    loss += -cw * fw.logp[hi][target] / valid_heads;
    dlogp[hi].assign(num_classes_, 0.0);
    dlogp[hi][target] = -cw * grad_scale / valid_heads;
  }
  run_backward(fw, dlogp, /*frozen=*/false, nullptr);
  return loss;
}

Discriminator::TrainReport Discriminator::train(const Corpus& train_corpus,
                                                const Corpus* dev_corpus,
                                                const Lm& lm) {
  require(train_corpus.size() > 0, Error::Kind::InvalidArgument,
          "discrim: empty training corpus");
  require(lm.config().d_model == d_model_, Error::Kind::Incompatible,
          "discrim: width does not match the language model");
  vocab_hash = train_corpus.vocab.hash();
  require(lm.vocab_hash == 0 || lm.vocab_hash == vocab_hash, Error::Kind::Incompatible,
          "discrim: language model was trained on a different vocabulary");
  int n_heads = 2 * config_.window + 1;

  // Inverse-frequency class weights over the training tags.
  std::vector<long> counts(num_classes_, 0);
  long total = 0;
  for (const auto& doc : train_corpus.docs)
    for (const auto& sent : doc.body) {
      require(sent.tag >= 0 && sent.tag < num_classes_, Error::Kind::InvalidArgument,
              "discrim: document tag out of range");
      ++counts[sent.tag];
      ++total;
    }
  class_weights_.assign(num_classes_, 0.0);
  for (int c = 0; c < num_classes_; ++c)
    if (counts[c] > 0)
      class_weights_[c] = static_cast<double>(total) /
                          (static_cast<double>(num_classes_) * counts[c]);

  // With the contextualizer the unit of context is the whole document; the
  // variant without it sees each sentence on its own, which is how the editing
  // path scores sentences.
  auto build_context = [&](const Document& doc, int sent_index, DocContext& ctx) {
    if (config_.use_contextualizer) {
      auto stream = flatten_document(doc, train_corpus.vocab);
      ctx.h = lm.hidden_states(stream);
      ctx.layout = parse_stream(stream, train_corpus.vocab);
      ctx.plan = plan_from_document(doc);
    } else {
      const Sentence& sent = doc.body[sent_index];
      auto ss = standalone_sentence_stream(sent.tokens, train_corpus.vocab);
      ctx.h = lm.hidden_states(ss.stream);
      ctx.layout = ss.layout;
      ctx.plan.headline = {};
      ctx.plan.tags = {sent.tag};
    }
  };

  // Work units: per document when contextualized, per sentence otherwise.
  struct Unit {
    int doc = 0;
    int sent = 0;  // standalone mode only
  };
  std::vector<Unit> units;
  for (int di = 0; di < train_corpus.size(); ++di) {
    if (config_.use_contextualizer) {
      units.push_back({di, 0});
    } else {
      for (int si = 0; si < train_corpus.docs[di].num_sentences(); ++si)
        units.push_back({di, si});
    }
  }
  auto unit_samples = [&](const Unit& u) {
    std::vector<SampleRef> samples;
    const Document& doc = train_corpus.docs[u.doc];
    if (config_.use_contextualizer) {
      for (int k = 1; k <= doc.num_sentences(); ++k) {
        int n = doc.body[k - 1].length();
        if (config_.prefix_training)
          for (int i = 1; i <= n; ++i) samples.push_back({k, i});
        else if (n > 0)
          samples.push_back({k, n});
      }
    } else {
      int n = doc.body[u.sent].length();
      if (config_.prefix_training)
        for (int i = 1; i <= n; ++i) samples.push_back({1, i});
      else if (n > 0)
        samples.push_back({1, n});
    }
    return samples;
  };

  TrainReport report;
  Rng order_rng = Rng::forked(config_.seed, 0xd15c);
  long step = 0;
  int n_units = static_cast<int>(units.size());
  std::vector<int> order(n_units);
  for (int i = 0; i < n_units; ++i) order[i] = i;

  Forward fw;
  DocContext ctx;

  for (int epoch = 0; epoch < config_.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    long epoch_samples = 0;
    for (int start = 0; start < n_units; start += config_.batch_docs) {
      int end = std::min(n_units, start + config_.batch_docs);
      long batch_samples = 0;
      for (int i = start; i < end; ++i)
        batch_samples += static_cast<long>(unit_samples(units[order[i]]).size());
      if (batch_samples == 0) continue;
      params_.zero_grad();
      double batch_loss = 0.0;
      double inv = 1.0 / static_cast<double>(batch_samples);
      for (int ui = start; ui < end; ++ui) {
        const Unit& u = units[order[ui]];
        build_context(train_corpus.docs[u.doc], u.sent, ctx);
        for (const SampleRef& sr : unit_samples(u)) {
          StreamLayout sub = ctx.layout;
          sub.body.resize(sr.k);
          sub.body[sr.k - 1].end = sub.body[sr.k - 1].begin + sr.i;
          sub.last_complete = false;
          batch_loss += inv * training_loss_and_grad(ctx.h, sub, ctx.plan, sr.k, inv);
        }
      }
      require(std::isfinite(batch_loss), Error::Kind::Runtime,
              "discriminator training diverged: non-finite loss at epoch " +
                  std::to_string(epoch) + ", batch starting at unit " +
                  std::to_string(start));
      double norm = params_.grad_norm();
      if (norm > kGradClip) params_.scale_grad(kGradClip / norm);
      params_.adam_step(config_.lr, kAdamBeta1, kAdamBeta2, kAdamEps, ++step);
      epoch_loss += batch_loss * batch_samples;
      epoch_samples += batch_samples;
    }
    report.epoch_ce.push_back(
        epoch_samples > 0 ? epoch_loss / static_cast<double>(epoch_samples) : 0.0);
  }

  params_.quantize_f32();

  // Per-head macro-F1 on complete dev sentences.
  dev_f1_.assign(n_heads, 0.0);
  if (dev_corpus != nullptr && dev_corpus->size() > 0) {
    std::vector<std::vector<long>> tp(n_heads, std::vector<long>(num_classes_, 0));
    auto fp = tp, fn = tp;
    for (int di = 0; di < dev_corpus->size(); ++di) {
      const Document& doc = dev_corpus->docs[di];
      if (config_.use_contextualizer) {
        auto stream = flatten_document(doc, dev_corpus->vocab);
        Mat h = lm.hidden_states(stream);
        StreamLayout layout = parse_stream(stream, dev_corpus->vocab);
        ControlPlan plan = plan_from_document(doc);
        for (int k = 1; k <= doc.num_sentences(); ++k) {
          StreamLayout sub = layout;
          sub.body.resize(k);
          run_forward(h, sub, plan, k, fw);
          for (int hi = 0; hi < n_heads; ++hi) {
            if (!fw.valid[hi]) continue;
            int gold = plan.tags[k + hi - config_.window - 1];
            int pred = 0;
            for (int c = 1; c < num_classes_; ++c)
              if (fw.logp[hi][c] > fw.logp[hi][pred]) pred = c;
            if (pred == gold) ++tp[hi][gold];
            else { ++fp[hi][pred]; ++fn[hi][gold]; }
          }
        }
      } else {
        for (const auto& sent : doc.body) {
          if (sent.length() == 0) continue;
          auto ss = standalone_sentence_stream(sent.tokens, dev_corpus->vocab);
          Mat h = lm.hidden_states(ss.stream);
          ControlPlan plan;
          plan.tags = {sent.tag};
          run_forward(h, ss.layout, plan, 1, fw);
          int hi = config_.window;
          int pred = 0;
          for (int c = 1; c < num_classes_; ++c)
            if (fw.logp[hi][c] > fw.logp[hi][pred]) pred = c;
          if (pred == sent.tag) ++tp[hi][sent.tag];
          else { ++fp[hi][pred]; ++fn[hi][sent.tag]; }
        }
      }
    }
    for (int hi = 0; hi < n_heads; ++hi) {
      double f1_sum = 0.0;
      int supported = 0;
      for (int c = 0; c < num_classes_; ++c) {
        if (tp[hi][c] + fn[hi][c] == 0) continue;
        ++supported;
        double prec = tp[hi][c] + fp[hi][c] > 0
                          ? static_cast<double>(tp[hi][c]) / (tp[hi][c] + fp[hi][c])
                          : 0.0;
        double rec = static_cast<double>(tp[hi][c]) / (tp[hi][c] + fn[hi][c]);
        if (prec + rec > 0.0) f1_sum += 2.0 * prec * rec / (prec + rec);
      }
      dev_f1_[hi] = supported > 0 ? f1_sum / supported : 0.0;
    }
  }
  report.dev_f1 = dev_f1_;
  return report;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

std::string Discriminator::manifest(const std::string& extra_json) const {
  json j;
  j["kind"] = "discriminator";
  j["config"] = json::parse(config_.to_json());
  j["d_model"] = d_model_;
  j["num_classes"] = num_classes_;
  j["vocab_hash"] = hex64(vocab_hash);
  j["class_weights"] = class_weights_;
  j["dev_f1"] = dev_f1_;
  json extra = json::parse(extra_json);
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  return j.dump();
}

void Discriminator::save(const std::string& path, const std::string& extra_json) const {
  save_checkpoint(path, manifest(extra_json), params_);
}

Discriminator Discriminator::load(const std::string& path) {
  return from_checkpoint(load_checkpoint(path));
}

Discriminator Discriminator::from_checkpoint(const CheckpointData& data) {
  json j;
  try {
    j = json::parse(data.manifest_json);
  } catch (const json::exception& e) {
    fail(Error::Kind::Format, std::string("discrim checkpoint manifest: ") + e.what());
  }
  require(j.value("kind", "") == "discriminator", Error::Kind::Incompatible,
          "checkpoint is not a discriminator");
  DiscrimConfig config = DiscrimConfig::from_json(j.at("config").dump());
  Discriminator disc(config, j.at("d_model").get<int>(),
                     j.at("num_classes").get<int>());
  restore_params(data, disc.params_);
  if (j.contains("vocab_hash"))
    disc.vocab_hash = std::stoull(j["vocab_hash"].get<std::string>(), nullptr, 16);
  if (j.contains("class_weights"))
    disc.class_weights_ = j["class_weights"].get<std::vector<double>>();
  if (j.contains("dev_f1")) disc.dev_f1_ = j["dev_f1"].get<std::vector<double>>();
  return disc;
}

void Discriminator::check_compatible(const Lm& lm) const {
  require(lm.config().d_model == d_model_, Error::Kind::Incompatible,
          "discriminator width does not match the language model");
  require(vocab_hash == 0 || lm.vocab_hash == 0 || vocab_hash == lm.vocab_hash,
          Error::Kind::Incompatible,
          "discriminator and language model disagree on the vocabulary");
}

// ---------------------------------------------------------------------------
// Per-step candidate scoring
// ---------------------------------------------------------------------------

StepScorer::StepScorer(const Discriminator& disc, const Mat& h,
                       const StreamLayout& layout, const ControlPlan& plan, int k,
                       const StructuralMode& mode)
    : disc_(disc), mode_(mode), plan_(plan), k_(k), base_rows_(h.rows),
      fw_(new Discriminator::Forward) {
  require(static_cast<int>(layout.body.size()) >= k && k >= 1,
          Error::Kind::InvalidArgument, "step scorer: bad sentence index");
  h_buf_.resize(h.rows + 1, h.cols);
  std::copy(h.a.begin(), h.a.end(), h_buf_.a.begin());

  open_ = layout;
  open_.body.resize(k);
  open_.last_complete = false;
  require(open_.body[k - 1].end == h.rows, Error::Kind::InvalidArgument,
          "step scorer: current sentence must end at the last hidden row");

  // Closing the sentence adds no pooled content, so the eos score is the
  // score of the state as it stands.
  eos_score_ = disc_.score_from_hidden(h, open_, plan_, k_, mode_);
  open_.body[k - 1].end = h.rows + 1;
}

StepScorer::~StepScorer() = default;

double StepScorer::score(const double* candidate_h_row, bool candidate_is_eos) {
  if (candidate_is_eos) return eos_score_;
  std::copy(candidate_h_row, candidate_h_row + h_buf_.cols,
            h_buf_.row(base_rows_));
  disc_.run_forward(h_buf_, open_, plan_, k_, *fw_);
  return combine_rows(fw_->logp, fw_->valid, disc_.config().window, plan_, k_, mode_);
}

}  // namespace seqctl
