#include "nn.hpp"

#include <algorithm>
#include <cmath>

namespace seqctl::nn {

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

Param* ParamStore::create(const std::string& name, int rows, int cols) {
  require(find(name) == nullptr, Error::Kind::InvalidArgument,
          "duplicate parameter name: " + name);
  params_.emplace_back();
  Param& p = params_.back();
  p.name = name;
  p.rows = rows;
  p.cols = cols;
  size_t n = static_cast<size_t>(rows) * cols;
  p.w.assign(n, 0.0);
  p.g.assign(n, 0.0);
  p.m.assign(n, 0.0);
  p.v.assign(n, 0.0);
  return &p;
}

Param* ParamStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

const Param* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) std::fill(p.g.begin(), p.g.end(), 0.0);
}

void ParamStore::adam_step(double lr, double beta1, double beta2, double eps, long t) {
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (auto& p : params_) {
    for (size_t i = 0; i < p.w.size(); ++i) {
      double g = p.g[i];
      p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
      p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
      double mhat = p.m[i] / bc1;
      double vhat = p.v[i] / bc2;
      p.w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

void ParamStore::scale_grad(double s) {
  for (auto& p : params_)
    for (auto& g : p.g) g *= s;
}

void ParamStore::quantize_f32() {
  for (auto& p : params_)
    for (auto& w : p.w) w = static_cast<double>(static_cast<float>(w));
}

size_t ParamStore::param_count() const {
  size_t n = 0;
  for (const auto& p : params_) n += p.w.size();
  return n;
}

double ParamStore::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_)
    for (double g : p.g) s += g * g;
  return std::sqrt(s);
}

void init_normal(Param& p, Rng& rng, double std) {
  for (auto& w : p.w) w = rng.gaussian() * std;
}

void init_zeros(Param& p) { std::fill(p.w.begin(), p.w.end(), 0.0); }

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

void linear_fwd(const double* x, int T, int in, const double* w, const double* b,
                double* y, int out) {
  for (int t = 0; t < T; ++t) {
    double* yt = y + static_cast<size_t>(t) * out;
    if (b)
      std::copy(b, b + out, yt);
    else
      std::fill(yt, yt + out, 0.0);
    const double* xt = x + static_cast<size_t>(t) * in;
    for (int i = 0; i < in; ++i) {
      double xv = xt[i];
      if (xv == 0.0) continue;
      const double* wrow = w + static_cast<size_t>(i) * out;
      for (int o = 0; o < out; ++o) yt[o] += xv * wrow[o];
    }
  }
}

void linear_bwd(const double* x, int T, int in, const double* w, const double* dy,
                int out, double* dx, double* dw, double* db) {
  for (int t = 0; t < T; ++t) {
    const double* dyt = dy + static_cast<size_t>(t) * out;
    const double* xt = x + static_cast<size_t>(t) * in;
    if (db)
      for (int o = 0; o < out; ++o) db[o] += dyt[o];
    if (dw) {
      for (int i = 0; i < in; ++i) {
        double xv = xt[i];
        if (xv == 0.0) continue;
        double* dwrow = dw + static_cast<size_t>(i) * out;
        for (int o = 0; o < out; ++o) dwrow[o] += xv * dyt[o];
      }
    }
    if (dx) {
      double* dxt = dx + static_cast<size_t>(t) * in;
      for (int i = 0; i < in; ++i) {
        const double* wrow = w + static_cast<size_t>(i) * out;
        double s = 0.0;
        for (int o = 0; o < out; ++o) s += wrow[o] * dyt[o];
        dxt[i] += s;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

static constexpr double kLnEps = 1e-5;

void layernorm_fwd(const double* x, int T, int d, const double* gain,
                   const double* bias, double* y, double* cache) {
  for (int t = 0; t < T; ++t) {
    const double* xt = x + static_cast<size_t>(t) * d;
    double* yt = y + static_cast<size_t>(t) * d;
    double mean = 0.0;
    for (int i = 0; i < d; ++i) mean += xt[i];
    mean /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
      double c = xt[i] - mean;
      var += c * c;
    }
    var /= d;
    double rstd = 1.0 / std::sqrt(var + kLnEps);
    cache[2 * t] = mean;
    cache[2 * t + 1] = rstd;
    for (int i = 0; i < d; ++i) yt[i] = (xt[i] - mean) * rstd * gain[i] + bias[i];
  }
}

void layernorm_bwd(const double* x, int T, int d, const double* gain,
                   const double* cache, const double* dy, double* dx,
                   double* dgain, double* dbias) {
  for (int t = 0; t < T; ++t) {
    const double* xt = x + static_cast<size_t>(t) * d;
    const double* dyt = dy + static_cast<size_t>(t) * d;
    double mean = cache[2 * t];
    double rstd = cache[2 * t + 1];
    double sum_dn = 0.0, sum_dn_xhat = 0.0;
    for (int i = 0; i < d; ++i) {
      double xhat = (xt[i] - mean) * rstd;
      double dn = dyt[i] * gain[i];
      sum_dn += dn;
      sum_dn_xhat += dn * xhat;
      if (dgain) dgain[i] += dyt[i] * xhat;
      if (dbias) dbias[i] += dyt[i];
    }
    if (dx) {
      double* dxt = dx + static_cast<size_t>(t) * d;
      for (int i = 0; i < d; ++i) {
        double xhat = (xt[i] - mean) * rstd;
        double dn = dyt[i] * gain[i];
        dxt[i] += rstd * (dn - sum_dn / d - xhat * sum_dn_xhat / d);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation; smooth, so finite-difference checks behave)
// ---------------------------------------------------------------------------

static constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu(double x) {
  double u = kGeluC * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

void gelu_fwd(const double* x, size_t n, double* y) {
  for (size_t i = 0; i < n; ++i) y[i] = gelu(x[i]);
}

void gelu_bwd(const double* x, size_t n, const double* dy, double* dx) {
  for (size_t i = 0; i < n; ++i) {
    double xi = x[i];
    double u = kGeluC * (xi + 0.044715 * xi * xi * xi);
    double th = std::tanh(u);
    double sech2 = 1.0 - th * th;
    double du = kGeluC * (1.0 + 3.0 * 0.044715 * xi * xi);
    dx[i] += dy[i] * (0.5 * (1.0 + th) + 0.5 * xi * sech2 * du);
  }
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

void softmax_row(const double* x, int n, double* y) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    sum += y[i];
  }
  double inv = 1.0 / sum;
  for (int i = 0; i < n; ++i) y[i] *= inv;
}

void log_softmax_row(const double* x, int n, double* y) {
  double lse = log_sum_exp(x, n);
  for (int i = 0; i < n; ++i) y[i] = x[i] - lse;
}

void log_softmax_bwd_row(const double* logp, int n, const double* dlogp, double* dx) {
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += dlogp[i];
  for (int i = 0; i < n; ++i) dx[i] += dlogp[i] - std::exp(logp[i]) * total;
}

double log_sum_exp(const double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
  return mx + std::log(sum);
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

void attention_fwd(const double* q, const double* k, const double* v, int Tq,
                   int Tk, int d, int nh, bool causal, double* y, double* att) {
  int hd = d / nh;
  double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  int off = Tk - Tq;  // causal alignment offset
  std::vector<double> scores(Tk);
  for (int h = 0; h < nh; ++h) {
    int hoff = h * hd;
    for (int i = 0; i < Tq; ++i) {
      int jmax = causal ? (i + off + 1) : Tk;
      const double* qi = q + static_cast<size_t>(i) * d + hoff;
      for (int j = 0; j < jmax; ++j) {
        const double* kj = k + static_cast<size_t>(j) * d + hoff;
        scores[j] = dot(qi, kj, hd) * scale;
      }
      double* arow = att + (static_cast<size_t>(h) * Tq + i) * Tk;
      softmax_row(scores.data(), jmax, arow);
      for (int j = jmax; j < Tk; ++j) arow[j] = 0.0;
      double* yi = y + static_cast<size_t>(i) * d + hoff;
      std::fill(yi, yi + hd, 0.0);
      for (int j = 0; j < jmax; ++j) {
        double a = arow[j];
        if (a == 0.0) continue;
        const double* vj = v + static_cast<size_t>(j) * d + hoff;
        for (int c = 0; c < hd; ++c) yi[c] += a * vj[c];
      }
    }
  }
}

void attention_bwd(const double* q, const double* k, const double* v, int Tq,
                   int Tk, int d, int nh, bool causal, const double* att,
                   const double* dy, double* dq, double* dk, double* dv) {
  int hd = d / nh;
  double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  int off = Tk - Tq;
  std::vector<double> dscore(Tk);
  for (int h = 0; h < nh; ++h) {
    int hoff = h * hd;
    for (int i = 0; i < Tq; ++i) {
      int jmax = causal ? (i + off + 1) : Tk;
      const double* arow = att + (static_cast<size_t>(h) * Tq + i) * Tk;
      const double* dyi = dy + static_cast<size_t>(i) * d + hoff;
      // d att
      double inner = 0.0;
      for (int j = 0; j < jmax; ++j) {
        const double* vj = v + static_cast<size_t>(j) * d + hoff;
        dscore[j] = dot(dyi, vj, hd);
        inner += arow[j] * dscore[j];
      }
      // softmax backward into raw scores
      for (int j = 0; j < jmax; ++j) dscore[j] = arow[j] * (dscore[j] - inner);
      const double* qi = q + static_cast<size_t>(i) * d + hoff;
      double* dqi = dq + static_cast<size_t>(i) * d + hoff;
      for (int j = 0; j < jmax; ++j) {
        double a = arow[j];
        double ds = dscore[j] * scale;
        const double* kj = k + static_cast<size_t>(j) * d + hoff;
        double* dkj = dk + static_cast<size_t>(j) * d + hoff;
        double* dvj = dv + static_cast<size_t>(j) * d + hoff;
        for (int c = 0; c < hd; ++c) {
          dqi[c] += ds * kj[c];
          dkj[c] += ds * qi[c];
          dvj[c] += a * dyi[c];
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Learned-query attention pooling
// ---------------------------------------------------------------------------

void attnpool_fwd(const double* q, const double* k, const double* v, int T,
                  int d, double* y, double* alpha) {
  double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> scores(T);
  for (int t = 0; t < T; ++t)
    scores[t] = dot(q, k + static_cast<size_t>(t) * d, d) * scale;
  softmax_row(scores.data(), T, alpha);
  std::fill(y, y + d, 0.0);
  for (int t = 0; t < T; ++t)
    axpy(alpha[t], v + static_cast<size_t>(t) * d, y, d);
}

void attnpool_bwd(const double* q, const double* k, const double* v, int T,
                  int d, const double* alpha, const double* dy, double* dq,
                  double* dk, double* dv) {
  double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> dscore(T);
  double inner = 0.0;
  for (int t = 0; t < T; ++t) {
    dscore[t] = dot(dy, v + static_cast<size_t>(t) * d, d);
    inner += alpha[t] * dscore[t];
  }
  for (int t = 0; t < T; ++t) dscore[t] = alpha[t] * (dscore[t] - inner);
  for (int t = 0; t < T; ++t) {
    double ds = dscore[t] * scale;
    const double* kt = k + static_cast<size_t>(t) * d;
    double* dkt = dk ? dk + static_cast<size_t>(t) * d : nullptr;
    double* dvt = dv ? dv + static_cast<size_t>(t) * d : nullptr;
    for (int c = 0; c < d; ++c) {
      if (dq) dq[c] += ds * kt[c];
      if (dkt) dkt[c] += ds * q[c];
      if (dvt) dvt[c] += alpha[t] * dy[c];
    }
  }
}

}  // namespace seqctl::nn
