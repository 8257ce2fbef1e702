#pragma once

#include <deque>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace seqctl::nn {

using seqctl::Mat;

// ---------------------------------------------------------------------------
// Parameters and optimizer state
// ---------------------------------------------------------------------------

struct Param {
  std::string name;
  int rows = 0, cols = 0;
  std::vector<double> w;  // values
  std::vector<double> g;  // gradient accumulator
  std::vector<double> m;  // Adam first moment
  std::vector<double> v;  // Adam second moment

  size_t size() const { return w.size(); }
  double* row(int i) { return w.data() + static_cast<size_t>(i) * cols; }
  const double* row(int i) const { return w.data() + static_cast<size_t>(i) * cols; }
  double* grow(int i) { return g.data() + static_cast<size_t>(i) * cols; }
};

// Owns every parameter of one model. Registration order is the serialization
// order, so it must be deterministic.
class ParamStore {
 public:
  Param* create(const std::string& name, int rows, int cols);
  Param* find(const std::string& name);
  const Param* find(const std::string& name) const;

  void zero_grad();
  // Adam with bias correction; `t` is the 1-based step count.
  void adam_step(double lr, double beta1, double beta2, double eps, long t);
  // Scales all accumulated gradients (for averaging over a batch).
  void scale_grad(double s);
  // Rounds every weight through float32 so that in-memory values match the
  // checkpoint payload exactly.
  void quantize_f32();

  size_t param_count() const;
  double grad_norm() const;
  std::deque<Param>& params() { return params_; }
  const std::deque<Param>& params() const { return params_; }

 private:
  std::deque<Param> params_;  // deque: stable addresses
};

void init_normal(Param& p, Rng& rng, double std);
void init_zeros(Param& p);

// ---------------------------------------------------------------------------
// Kernels. Forward writes outputs; backward ACCUMULATES into every gradient
// output (callers zero buffers once per pass).
// ---------------------------------------------------------------------------

// y[T x out] = x[T x in] . w[in x out] + b[out]; b may be null.
void linear_fwd(const double* x, int T, int in, const double* w, const double* b,
                double* y, int out);
// dx may be null when input gradients are not needed; dw/db may be null for
// frozen weights.
void linear_bwd(const double* x, int T, int in, const double* w, const double* dy,
                int out, double* dx, double* dw, double* db);

// Row-wise layer norm with learned gain/bias. cache holds (mean, rstd) per row.
void layernorm_fwd(const double* x, int T, int d, const double* gain,
                   const double* bias, double* y, double* cache);
void layernorm_bwd(const double* x, int T, int d, const double* gain,
                   const double* cache, const double* dy, double* dx,
                   double* dgain, double* dbias);

double gelu(double x);
void gelu_fwd(const double* x, size_t n, double* y);
void gelu_bwd(const double* x, size_t n, const double* dy, double* dx);

// Multi-head attention. q:[Tq x d], k,v:[Tk x d], nh heads with head dim d/nh.
// When causal, query row i attends keys j <= i + (Tk - Tq) (aligned suffix,
// so incremental decode with Tq = 1 sees the whole cache).
// att is a caller-provided buffer of nh*Tq*Tk doubles (softmax weights).
void attention_fwd(const double* q, const double* k, const double* v, int Tq,
                   int Tk, int d, int nh, bool causal, double* y, double* att);
void attention_bwd(const double* q, const double* k, const double* v, int Tq,
                   int Tk, int d, int nh, bool causal, const double* att,
                   const double* dy, double* dq, double* dk, double* dv);

// Learned-query attention pooling: alpha = softmax_t(q . k_t / sqrt(d)),
// y = sum_t alpha_t v_t. k,v:[T x d], q:[d], alpha:[T].
void attnpool_fwd(const double* q, const double* k, const double* v, int T,
                  int d, double* y, double* alpha);
void attnpool_bwd(const double* q, const double* k, const double* v, int T,
                  int d, const double* alpha, const double* dy, double* dq,
                  double* dk, double* dv);

// Stable row softmax / log-softmax.
void softmax_row(const double* x, int n, double* y);
void log_softmax_row(const double* x, int n, double* y);
// d(loss)/dx given d(loss)/d(logp) for one log-softmax row.
void log_softmax_bwd_row(const double* logp, int n, const double* dlogp, double* dx);

double log_sum_exp(const double* x, int n);

}  // namespace seqctl::nn
