#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "common.hpp"
#include "nn.hpp"

using namespace seqctl;
using namespace seqctl::testing;

namespace {
constexpr double kH = 1e-5;
constexpr double kTol = 1e-6;
}  // namespace

TEST_CASE("linear forward matches hand computation") {
  // y = x.W + b with x = [1, 2], W = [[1, 0], [0, 3]], b = [10, 20]
  double x[2] = {1.0, 2.0};
  double w[4] = {1.0, 0.0, 0.0, 3.0};
  double b[2] = {10.0, 20.0};
  double y[2];
  nn::linear_fwd(x, 1, 2, w, b, y, 2);
  CHECK(y[0] == doctest::Approx(11.0));
  CHECK(y[1] == doctest::Approx(26.0));
}

TEST_CASE("linear backward passes finite differences") {
  Rng rng(11);
  int T = 3, in = 5, out = 4;
  auto x = random_vec(T * in, rng);
  auto w = random_vec(in * out, rng);
  auto b = random_vec(out, rng);
  auto loss_w = random_vec(T * out, rng);

  auto loss_given = [&](const std::vector<double>& xv, const std::vector<double>& wv,
                        const std::vector<double>& bv) {
    std::vector<double> y(T * out);
    nn::linear_fwd(xv.data(), T, in, wv.data(), bv.data(), y.data(), out);
    double s = 0.0;
    for (int i = 0; i < T * out; ++i) s += loss_w[i] * y[i];
    return s;
  };

  std::vector<double> dx(T * in, 0.0), dw(in * out, 0.0), db(out, 0.0);
  nn::linear_bwd(x.data(), T, in, w.data(), loss_w.data(), out, dx.data(), dw.data(),
                 db.data());

  auto fx = [&](const std::vector<double>& v) { return loss_given(v, w, b); };
  auto fw = [&](const std::vector<double>& v) { return loss_given(x, v, b); };
  auto fb = [&](const std::vector<double>& v) { return loss_given(x, w, v); };
  CHECK(max_grad_err(fx, x, dx, sample_coords(x.size(), 8, rng), kH) < kTol);
  CHECK(max_grad_err(fw, w, dw, sample_coords(w.size(), 8, rng), kH) < kTol);
  CHECK(max_grad_err(fb, b, db, sample_coords(b.size(), 4, rng), kH) < kTol);
}

TEST_CASE("layernorm output is normalized and backward passes finite differences") {
  Rng rng(12);
  int T = 4, d = 8;
  auto x = random_vec(T * d, rng, 2.0);
  auto gain = random_vec(d, rng);
  auto bias = random_vec(d, rng);
  auto loss_w = random_vec(T * d, rng);

  std::vector<double> y(T * d), cache(2 * T);
  nn::layernorm_fwd(x.data(), T, d, gain.data(), bias.data(), y.data(), cache.data());
  // With unit gain and zero bias each row has mean 0, variance ~= 1.
  std::vector<double> ones(d, 1.0), zeros(d, 0.0), yn(T * d);
  nn::layernorm_fwd(x.data(), T, d, ones.data(), zeros.data(), yn.data(), cache.data());
  for (int t = 0; t < T; ++t) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < d; ++j) mean += yn[t * d + j];
    mean /= d;
    for (int j = 0; j < d; ++j) var += (yn[t * d + j] - mean) * (yn[t * d + j] - mean);
    var /= d;
    CHECK(std::fabs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }

  auto loss_given = [&](const std::vector<double>& xv, const std::vector<double>& gv,
                        const std::vector<double>& bv) {
    std::vector<double> out(T * d), c(2 * T);
    nn::layernorm_fwd(xv.data(), T, d, gv.data(), bv.data(), out.data(), c.data());
    double s = 0.0;
    for (int i = 0; i < T * d; ++i) s += loss_w[i] * out[i];
    return s;
  };

  nn::layernorm_fwd(x.data(), T, d, gain.data(), bias.data(), y.data(), cache.data());
  std::vector<double> dx(T * d, 0.0), dgain(d, 0.0), dbias(d, 0.0);
  nn::layernorm_bwd(x.data(), T, d, gain.data(), cache.data(), loss_w.data(),
                    dx.data(), dgain.data(), dbias.data());

  auto fx = [&](const std::vector<double>& v) { return loss_given(v, gain, bias); };
  auto fg = [&](const std::vector<double>& v) { return loss_given(x, v, bias); };
  auto fb = [&](const std::vector<double>& v) { return loss_given(x, gain, v); };
  CHECK(max_grad_err(fx, x, dx, sample_coords(x.size(), 10, rng), kH) < kTol);
  CHECK(max_grad_err(fg, gain, dgain, sample_coords(d, 4, rng), kH) < kTol);
  CHECK(max_grad_err(fb, bias, dbias, sample_coords(d, 4, rng), kH) < kTol);
}

TEST_CASE("gelu matches its derivative by finite differences") {
  Rng rng(13);
  auto x = random_vec(16, rng, 2.0);
  auto loss_w = random_vec(16, rng);
  std::vector<double> dy = loss_w, dx(16, 0.0);
  nn::gelu_bwd(x.data(), x.size(), dy.data(), dx.data());
  auto f = [&](const std::vector<double>& v) {
    std::vector<double> y(v.size());
    nn::gelu_fwd(v.data(), v.size(), y.data());
    double s = 0.0;
    for (size_t i = 0; i < y.size(); ++i) s += loss_w[i] * y[i];
    return s;
  };
  CHECK(max_grad_err(f, x, dx, sample_coords(x.size(), 8, rng), kH) < kTol);
  CHECK(nn::gelu(0.0) == doctest::Approx(0.0));
  CHECK(nn::gelu(10.0) == doctest::Approx(10.0).epsilon(1e-6));
}

TEST_CASE("attention respects the causal mask") {
  Rng rng(14);
  int T = 5, d = 8, nh = 2;
  auto q = random_vec(T * d, rng);
  auto k = random_vec(T * d, rng);
  auto v = random_vec(T * d, rng);
  std::vector<double> y1(T * d), att(nh * T * T, 0.0);
  nn::attention_fwd(q.data(), k.data(), v.data(), T, T, d, nh, true, y1.data(),
                    att.data());
  // Changing the future must not affect earlier outputs.
  auto k2 = k, v2 = v;
  for (int j = 0; j < d; ++j) {
    k2[(T - 1) * d + j] += 3.0;
    v2[(T - 1) * d + j] -= 2.0;
  }
  std::vector<double> y2(T * d);
  nn::attention_fwd(q.data(), k2.data(), v2.data(), T, T, d, nh, true, y2.data(),
                    att.data());
  for (int t = 0; t + 1 < T; ++t)
    for (int j = 0; j < d; ++j) CHECK(y1[t * d + j] == y2[t * d + j]);
}

TEST_CASE("attention backward passes finite differences") {
  Rng rng(15);
  int T = 5, d = 8, nh = 2;
  auto q = random_vec(T * d, rng);
  auto k = random_vec(T * d, rng);
  auto v = random_vec(T * d, rng);
  auto loss_w = random_vec(T * d, rng);

  for (bool causal : {true, false}) {
    CAPTURE(causal);
    auto loss_given = [&](const std::vector<double>& qv, const std::vector<double>& kv,
                          const std::vector<double>& vv) {
      std::vector<double> y(T * d), att(nh * T * T, 0.0);
      nn::attention_fwd(qv.data(), kv.data(), vv.data(), T, T, d, nh, causal,
                        y.data(), att.data());
      double s = 0.0;
      for (int i = 0; i < T * d; ++i) s += loss_w[i] * y[i];
      return s;
    };
    std::vector<double> y(T * d), att(nh * T * T, 0.0);
    nn::attention_fwd(q.data(), k.data(), v.data(), T, T, d, nh, causal, y.data(),
                      att.data());
    std::vector<double> dq(T * d, 0.0), dk(T * d, 0.0), dv(T * d, 0.0);
    nn::attention_bwd(q.data(), k.data(), v.data(), T, T, d, nh, causal, att.data(),
                      loss_w.data(), dq.data(), dk.data(), dv.data());
    auto fq = [&](const std::vector<double>& x) { return loss_given(x, k, v); };
    auto fk = [&](const std::vector<double>& x) { return loss_given(q, x, v); };
    auto fv = [&](const std::vector<double>& x) { return loss_given(q, k, x); };
    CHECK(max_grad_err(fq, q, dq, sample_coords(q.size(), 10, rng), kH) < kTol);
    CHECK(max_grad_err(fk, k, dk, sample_coords(k.size(), 10, rng), kH) < kTol);
    CHECK(max_grad_err(fv, v, dv, sample_coords(v.size(), 10, rng), kH) < kTol);
  }
}

TEST_CASE("attention pooling backward passes finite differences") {
  Rng rng(16);
  int T = 6, d = 8;
  auto q = random_vec(d, rng);
  auto k = random_vec(T * d, rng);
  auto v = random_vec(T * d, rng);
  auto loss_w = random_vec(d, rng);

  auto loss_given = [&](const std::vector<double>& qv, const std::vector<double>& kv,
                        const std::vector<double>& vv) {
    std::vector<double> y(d), alpha(T);
    nn::attnpool_fwd(qv.data(), kv.data(), vv.data(), T, d, y.data(), alpha.data());
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += loss_w[i] * y[i];
    return s;
  };

  std::vector<double> y(d), alpha(T);
  nn::attnpool_fwd(q.data(), k.data(), v.data(), T, d, y.data(), alpha.data());
  double asum = 0.0;
  for (double a : alpha) asum += a;
  CHECK(asum == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<double> dq(d, 0.0), dk(T * d, 0.0), dv(T * d, 0.0);
  nn::attnpool_bwd(q.data(), k.data(), v.data(), T, d, alpha.data(), loss_w.data(),
                   dq.data(), dk.data(), dv.data());
  auto fq = [&](const std::vector<double>& x) { return loss_given(x, k, v); };
  auto fk = [&](const std::vector<double>& x) { return loss_given(q, x, v); };
  auto fv = [&](const std::vector<double>& x) { return loss_given(q, k, x); };
  CHECK(max_grad_err(fq, q, dq, sample_coords(q.size(), 6, rng), kH) < kTol);
  CHECK(max_grad_err(fk, k, dk, sample_coords(k.size(), 10, rng), kH) < kTol);
  CHECK(max_grad_err(fv, v, dv, sample_coords(v.size(), 10, rng), kH) < kTol);
}

TEST_CASE("softmax and log-softmax are normalized and consistent") {
  Rng rng(17);
  auto x = random_vec(12, rng, 5.0);
  std::vector<double> p(12), lp(12);
  nn::softmax_row(x.data(), 12, p.data());
  nn::log_softmax_row(x.data(), 12, lp.data());
  double sum = 0.0;
  for (int i = 0; i < 12; ++i) {
    sum += p[i];
    CHECK(std::exp(lp[i]) == doctest::Approx(p[i]).epsilon(1e-12));
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(nn::log_sum_exp(x.data(), 12) ==
        doctest::Approx(x[0] - lp[0]).epsilon(1e-12));

  // Stability under large shifts.
  for (auto& v : x) v += 1000.0;
  nn::log_softmax_row(x.data(), 12, lp.data());
  double lse = nn::log_sum_exp(x.data(), 12);
  CHECK(std::isfinite(lse));
  for (double v : lp) CHECK(std::isfinite(v));
}

TEST_CASE("log-softmax backward passes finite differences") {
  Rng rng(18);
  int n = 10;
  auto x = random_vec(n, rng, 3.0);
  auto loss_w = random_vec(n, rng);
  std::vector<double> lp(n);
  nn::log_softmax_row(x.data(), n, lp.data());
  std::vector<double> dx(n, 0.0);
  nn::log_softmax_bwd_row(lp.data(), n, loss_w.data(), dx.data());
  auto f = [&](const std::vector<double>& v) {
    std::vector<double> out(n);
    nn::log_softmax_row(v.data(), n, out.data());
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += loss_w[i] * out[i];
    return s;
  };
  CHECK(max_grad_err(f, x, dx, sample_coords(n, 6, rng), kH) < kTol);
}

TEST_CASE("adam updates and f32 quantization behave") {
  nn::ParamStore store;
  auto* p = store.create("p", 1, 4);
  for (int i = 0; i < 4; ++i) p->w[i] = 1.0;
  // Constant gradient of 1: first Adam step moves each weight by about -lr.
  for (int i = 0; i < 4; ++i) p->g[i] = 1.0;
  store.adam_step(0.1, 0.9, 0.999, 1e-8, 1);
  for (int i = 0; i < 4; ++i) CHECK(p->w[i] == doctest::Approx(0.9).epsilon(1e-6));

  p->w[0] = 0.1234567890123456789;
  store.quantize_f32();
  CHECK(p->w[0] == doctest::Approx(static_cast<double>(0.1234567890123456789f)));
  CHECK(p->w[0] == static_cast<double>(static_cast<float>(0.1234567890123456789)));
}

TEST_CASE("gradient accumulation adds across backward calls") {
  double x[2] = {1.0, 2.0};
  double w[4] = {1.0, 2.0, 3.0, 4.0};
  double dy[2] = {1.0, 1.0};
  double dw[4] = {0.0, 0.0, 0.0, 0.0};
  nn::linear_bwd(x, 1, 2, w, dy, 2, nullptr, dw, nullptr);
  nn::linear_bwd(x, 1, 2, w, dy, 2, nullptr, dw, nullptr);
  CHECK(dw[0] == doctest::Approx(2.0));  // two passes, each x[0]*dy[0] = 1
  CHECK(dw[2] == doctest::Approx(4.0));
}
