#pragma once

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <utility>
#include <vector>

namespace vmscan::ssm {

/// Series branch threshold for (e^{dA} - 1)/A; below it the first-order
/// limit B_bar = delta * B is used to avoid cancellation.
inline constexpr double kZohSeriesThreshold = 1e-8;

struct ZohCoeffs {
  double a_bar;  // e^{delta * a}
  double b_bar;  // (e^{delta * a} - 1) / a * b, series limit delta * b
};

/// Zero-order-hold discretization of one diagonal entry.
inline ZohCoeffs discretize_zoh(double a, double b, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("discretize_zoh: delta must be > 0");
  const double z = delta * a;
  ZohCoeffs out;
  out.a_bar = std::exp(z);
  out.b_bar = (std::fabs(z) < kZohSeriesThreshold) ? delta * b : std::expm1(z) / a * b;
  return out;
}

/// Discretized parameters for one channel with diagonal state of size N.
/// a_bar/b_bar may be per-token (L*N values) or constant (N values).
struct DiscreteParams {
  long state = 1;
  std::vector<double> a_bar;
  std::vector<double> b_bar;
  std::vector<double> c;  // N values
  double d = 0.0;
};

/// Discrete recurrence h_k = a_bar h_{k-1} + b_bar x_k, y_k = c h_k + d x_k.
/// Sequential left-to-right evaluation is the reference semantics.
/// Returns (y, final state).
inline std::pair<std::vector<double>, std::vector<double>> ssm_scan(
    const std::vector<double>& x, const DiscreteParams& p,
    std::vector<double> h0 = {}) {
  const long L = static_cast<long>(x.size());
  const long N = p.state;
  const bool per_token_a = static_cast<long>(p.a_bar.size()) == L * N;
  const bool per_token_b = static_cast<long>(p.b_bar.size()) == L * N;
  if (!per_token_a && static_cast<long>(p.a_bar.size()) != N)
    throw std::invalid_argument("ssm_scan: a_bar must hold N or L*N values");
  if (!per_token_b && static_cast<long>(p.b_bar.size()) != N)
    throw std::invalid_argument("ssm_scan: b_bar must hold N or L*N values");
  if (static_cast<long>(p.c.size()) != N)
    throw std::invalid_argument("ssm_scan: c must hold N values");
  if (h0.empty()) h0.assign(static_cast<size_t>(N), 0.0);
  if (static_cast<long>(h0.size()) != N)
    throw std::invalid_argument("ssm_scan: h0 must hold N values");
  for (double v : x)
    if (!std::isfinite(v)) throw std::invalid_argument("ssm_scan: non-finite input");

  std::vector<double> y(static_cast<size_t>(L));
  std::vector<double>& h = h0;
  for (long k = 0; k < L; ++k) {
    double acc = 0.0;
    const double* a = p.a_bar.data() + (per_token_a ? k * N : 0);
    const double* b = p.b_bar.data() + (per_token_b ? k * N : 0);
    for (long n = 0; n < N; ++n) {
      h[static_cast<size_t>(n)] = a[n] * h[static_cast<size_t>(n)] + b[n] * x[static_cast<size_t>(k)];
      acc += p.c[static_cast<size_t>(n)] * h[static_cast<size_t>(n)];
    }
    y[static_cast<size_t>(k)] = acc + p.d * x[static_cast<size_t>(k)];
  }
  return {std::move(y), std::move(h0)};
}

/// S6 parameter bundle: per-token delta/B/C are projections of the input
/// token; A (diagonal, per channel x state) and D (per channel) are static.
///   delta[k,c] = softplus(w_delta . x_k + b_delta[c])
///   B_k = wb x_k + bb, C_k = wc x_k + bc (state-dimension vectors)
struct SelectiveScanParams {
  long channels = 0;
  long state = 0;
  std::vector<double> w_delta;  // [C]
  std::vector<double> b_delta;  // [C]
  std::vector<double> wb;       // [N, C] row-major
  std::vector<double> bb;       // [N]
  std::vector<double> wc;       // [N, C] row-major
  std::vector<double> bc;       // [N]
  std::vector<double> a;        // [C, N] row-major, diagonal state matrix per channel
  std::vector<double> d;        // [C]

  void check() const {
    if (channels < 1 || state < 1)
      throw std::invalid_argument("SelectiveScanParams: channels/state must be >= 1");
    auto need = [](size_t got, long want, const char* name) {
      if (got != static_cast<size_t>(want))
        throw std::invalid_argument(std::string("SelectiveScanParams: bad size for ") + name);
    };
    need(w_delta.size(), channels, "w_delta");
    need(b_delta.size(), channels, "b_delta");
    need(wb.size(), state * channels, "wb");
    need(bb.size(), state, "bb");
    need(wc.size(), state * channels, "wc");
    need(bc.size(), state, "bc");
    need(a.size(), channels * state, "a");
    need(d.size(), channels, "d");
  }
};

/// Activations saved by the forward pass; exactly what the backward needs.
struct ScanSaved {
  long length = 0, channels = 0, state = 0;
  std::vector<double> x;       // [L, C]
  std::vector<double> s;       // [L] raw shared delta projection
  std::vector<double> delta;   // [L, C]
  std::vector<double> bproj;   // [L, N]
  std::vector<double> cproj;   // [L, N]
  std::vector<double> h;       // [L, C, N]
  std::vector<double> a_bar;   // [L, C, N]
};

struct ScanGrads {
  std::vector<double> dx;        // [L, C]
  std::vector<double> dw_delta;  // [C]
  std::vector<double> db_delta;  // [C]
  std::vector<double> dwb;       // [N, C]
  std::vector<double> dbb;       // [N]
  std::vector<double> dwc;       // [N, C]
  std::vector<double> dbc;       // [N]
  std::vector<double> da;        // [C, N]
  std::vector<double> dd;        // [C]
};

inline double softplus(double v) {
  return v > 30.0 ? v : std::log1p(std::exp(v));
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// Selective scan over L tokens of C channels. x and y are [L, C] row-major.
/// When saved is non-null it is filled for an exact backward pass.
inline void selective_scan_forward(const double* x, long L,
                                   const SelectiveScanParams& p, double* y,
                                   ScanSaved* saved = nullptr) {
  p.check();
  if (L < 1) throw std::invalid_argument("selective_scan_forward: L must be >= 1");
  const long C = p.channels, N = p.state;
  for (long i = 0; i < L * C; ++i)
    if (!std::isfinite(x[i]))
      throw std::invalid_argument("selective_scan_forward: non-finite input");

  if (saved) {
    saved->length = L;
    saved->channels = C;
    saved->state = N;
    saved->x.assign(x, x + L * C);
    saved->s.assign(static_cast<size_t>(L), 0.0);
    saved->delta.assign(static_cast<size_t>(L * C), 0.0);
    saved->bproj.assign(static_cast<size_t>(L * N), 0.0);
    saved->cproj.assign(static_cast<size_t>(L * N), 0.0);
    saved->h.assign(static_cast<size_t>(L * C * N), 0.0);
    saved->a_bar.assign(static_cast<size_t>(L * C * N), 0.0);
  }

  std::vector<double> h(static_cast<size_t>(C * N), 0.0);
  std::vector<double> bk(static_cast<size_t>(N)), ck(static_cast<size_t>(N));
  for (long k = 0; k < L; ++k) {
    const double* xk = x + k * C;
    double s = 0.0;
    for (long c = 0; c < C; ++c) s += p.w_delta[static_cast<size_t>(c)] * xk[c];
    for (long n = 0; n < N; ++n) {
      double b = p.bb[static_cast<size_t>(n)], cc = p.bc[static_cast<size_t>(n)];
      const double* wbn = p.wb.data() + n * C;
      const double* wcn = p.wc.data() + n * C;
      for (long c = 0; c < C; ++c) {
        b += wbn[c] * xk[c];
        cc += wcn[c] * xk[c];
      }
      bk[static_cast<size_t>(n)] = b;
      ck[static_cast<size_t>(n)] = cc;
    }
    if (saved) {
      saved->s[static_cast<size_t>(k)] = s;
      std::memcpy(saved->bproj.data() + k * N, bk.data(), sizeof(double) * static_cast<size_t>(N));
      std::memcpy(saved->cproj.data() + k * N, ck.data(), sizeof(double) * static_cast<size_t>(N));
    }
    for (long c = 0; c < C; ++c) {
      const double delta = softplus(s + p.b_delta[static_cast<size_t>(c)]);
      if (saved) saved->delta[static_cast<size_t>(k * C + c)] = delta;
      const double* ac = p.a.data() + c * N;
      double* hc = h.data() + c * N;
      double acc = 0.0;
      for (long n = 0; n < N; ++n) {
        const double z = delta * ac[n];
        const double abar = std::exp(z);
        const double phi = (std::fabs(z) < kZohSeriesThreshold) ? delta : std::expm1(z) / ac[n];
        hc[n] = abar * hc[n] + phi * bk[static_cast<size_t>(n)] * xk[c];
        acc += ck[static_cast<size_t>(n)] * hc[n];
        if (saved) {
          saved->a_bar[static_cast<size_t>((k * C + c) * N + n)] = abar;
          saved->h[static_cast<size_t>((k * C + c) * N + n)] = hc[n];
        }
      }
      y[k * C + c] = acc + p.d[static_cast<size_t>(c)] * xk[c];
    }
  }
}

/// Exact reverse-mode gradients of selective_scan_forward. dy is [L, C].
inline ScanGrads selective_scan_backward(const ScanSaved& saved,
                                         const SelectiveScanParams& p,
                                         const double* dy) {
  p.check();
  const long L = saved.length, C = saved.channels, N = saved.state;
  if (L < 1 || C != p.channels || N != p.state)
    throw std::invalid_argument("selective_scan_backward: saved/params mismatch");

  ScanGrads g;
  g.dx.assign(static_cast<size_t>(L * C), 0.0);
  g.dw_delta.assign(static_cast<size_t>(C), 0.0);
  g.db_delta.assign(static_cast<size_t>(C), 0.0);
  g.dwb.assign(static_cast<size_t>(N * C), 0.0);
  g.dbb.assign(static_cast<size_t>(N), 0.0);
  g.dwc.assign(static_cast<size_t>(N * C), 0.0);
  g.dbc.assign(static_cast<size_t>(N), 0.0);
  g.da.assign(static_cast<size_t>(C * N), 0.0);
  g.dd.assign(static_cast<size_t>(C), 0.0);

  // lam[c,n] = dLoss/dh_{k,c,n}, carried backward through the recurrence.
  std::vector<double> lam(static_cast<size_t>(C * N), 0.0);
  std::vector<double> dbk(static_cast<size_t>(N)), dck(static_cast<size_t>(N));

  for (long k = L - 1; k >= 0; --k) {
    const double* xk = saved.x.data() + k * C;
    const double* dyk = dy + k * C;
    const double* bk = saved.bproj.data() + k * N;
    const double* ck = saved.cproj.data() + k * N;
    std::fill(dbk.begin(), dbk.end(), 0.0);
    std::fill(dck.begin(), dck.end(), 0.0);
    double ds = 0.0;

    for (long c = 0; c < C; ++c) {
      const double delta = saved.delta[static_cast<size_t>(k * C + c)];
      const double* ac = p.a.data() + c * N;
      const double* abar = saved.a_bar.data() + (k * C + c) * N;
      const double* hk = saved.h.data() + (k * C + c) * N;
      const double* hprev = (k > 0) ? saved.h.data() + ((k - 1) * C + c) * N : nullptr;
      double* lamc = lam.data() + c * N;

      g.dd[static_cast<size_t>(c)] += dyk[c] * xk[c];
      double dxkc = dyk[c] * p.d[static_cast<size_t>(c)];
      double ddelta = 0.0;

      for (long n = 0; n < N; ++n) {
        // y_k contribution: y = sum_n c_n h_n + d x.
        double l = lamc[n] + dyk[c] * ck[n];
        dck[static_cast<size_t>(n)] += dyk[c] * hk[n];

        const double z = delta * ac[n];
        const bool series = std::fabs(z) < kZohSeriesThreshold;
        const double phi = series ? delta : (abar[n] - 1.0) / ac[n];
        const double dphi_ddelta = series ? 1.0 : abar[n];
        // d/dA of (e^{dA}-1)/A; series form guards the cancellation near 0.
        const double dphi_da =
            series ? 0.0
                   : (std::fabs(z) < 1e-4
                          ? delta * delta * (0.5 + z / 3.0 + z * z / 8.0)
                          : (delta * abar[n] - phi) / ac[n]);

        const double hp = hprev ? hprev[n] : 0.0;
        // h_k = abar h_{k-1} + phi b x.
        const double dabar = l * hp;
        const double dphi = l * bk[n] * xk[c];
        dbk[static_cast<size_t>(n)] += l * phi * xk[c];
        dxkc += l * phi * bk[n];

        ddelta += dabar * ac[n] * abar[n] + dphi * dphi_ddelta;
        g.da[static_cast<size_t>(c * N + n)] += dabar * delta * abar[n] + dphi * dphi_da;

        lamc[n] = l * abar[n];  // propagate to h_{k-1}
      }

      const double sig = sigmoid(saved.s[static_cast<size_t>(k)] + p.b_delta[static_cast<size_t>(c)]);
      g.db_delta[static_cast<size_t>(c)] += ddelta * sig;
      ds += ddelta * sig;
      g.dx[static_cast<size_t>(k * C + c)] += dxkc;
    }

    // Shared projections: s = w_delta . x_k, bproj = wb x_k, cproj = wc x_k.
    for (long c = 0; c < C; ++c) {
      g.dw_delta[static_cast<size_t>(c)] += ds * xk[c];
      g.dx[static_cast<size_t>(k * C + c)] += ds * p.w_delta[static_cast<size_t>(c)];
    }
    for (long n = 0; n < N; ++n) {
      const double* wbn = p.wb.data() + n * C;
      const double* wcn = p.wc.data() + n * C;
      double* dwbn = g.dwb.data() + n * C;
      double* dwcn = g.dwc.data() + n * C;
      const double db = dbk[static_cast<size_t>(n)];
      const double dc = dck[static_cast<size_t>(n)];
      g.dbb[static_cast<size_t>(n)] += db;
      g.dbc[static_cast<size_t>(n)] += dc;
      for (long c = 0; c < C; ++c) {
        dwbn[c] += db * xk[c];
        dwcn[c] += dc * xk[c];
        g.dx[static_cast<size_t>(k * C + c)] += db * wbn[c] + dc * wcn[c];
      }
    }
  }
  return g;
}

/// Chunked evaluation. Mathematically identical to the sequential forward:
/// each step is h <- a h + b, an affine map; within a chunk the prefix maps
/// are built by the associative composition (a2,b2)o(a1,b1) = (a1 a2,
/// a2 b1 + b2), then applied to the state carried across chunks.
inline std::vector<double> selective_scan_chunked(const double* x, long L,
                                                  const SelectiveScanParams& p,
                                                  long chunk) {
  p.check();
  if (chunk < 1) throw std::invalid_argument("selective_scan_chunked: chunk must be >= 1");
  const long C = p.channels, N = p.state;
  for (long i = 0; i < L * C; ++i)
    if (!std::isfinite(x[i]))
      throw std::invalid_argument("selective_scan_chunked: non-finite input");

  std::vector<double> y(static_cast<size_t>(L * C));
  std::vector<double> h(static_cast<size_t>(C * N), 0.0);
  std::vector<double> pre_a, pre_b;  // prefix operators within the chunk
  std::vector<double> bk(static_cast<size_t>(N)), ck(static_cast<size_t>(N));

  for (long k0 = 0; k0 < L; k0 += chunk) {
    const long m = std::min(chunk, L - k0);
    pre_a.assign(static_cast<size_t>(m * C * N), 0.0);
    pre_b.assign(static_cast<size_t>(m * C * N), 0.0);

    for (long j = 0; j < m; ++j) {
      const long k = k0 + j;
      const double* xk = x + k * C;
      double s = 0.0;
      for (long c = 0; c < C; ++c) s += p.w_delta[static_cast<size_t>(c)] * xk[c];
      for (long n = 0; n < N; ++n) {
        double b = p.bb[static_cast<size_t>(n)];
        const double* wbn = p.wb.data() + n * C;
        for (long c = 0; c < C; ++c) b += wbn[c] * xk[c];
        bk[static_cast<size_t>(n)] = b;
      }
      for (long c = 0; c < C; ++c) {
        const double delta = softplus(s + p.b_delta[static_cast<size_t>(c)]);
        const double* ac = p.a.data() + c * N;
        double* pa = pre_a.data() + (j * C + c) * N;
        double* pb = pre_b.data() + (j * C + c) * N;
        const double* pa_prev = (j > 0) ? pre_a.data() + ((j - 1) * C + c) * N : nullptr;
        const double* pb_prev = (j > 0) ? pre_b.data() + ((j - 1) * C + c) * N : nullptr;
        for (long n = 0; n < N; ++n) {
          const double z = delta * ac[n];
          const double abar = std::exp(z);
          const double phi = (std::fabs(z) < kZohSeriesThreshold) ? delta : std::expm1(z) / ac[n];
          const double step_b = phi * bk[static_cast<size_t>(n)] * xk[c];
          if (j == 0) {
            pa[n] = abar;
            pb[n] = step_b;
          } else {
            pa[n] = pa_prev[n] * abar;
            pb[n] = abar * pb_prev[n] + step_b;
          }
        }
      }
    }

    // Apply prefix operators to the carried state and emit outputs.
    for (long j = 0; j < m; ++j) {
      const long k = k0 + j;
      const double* xk = x + k * C;
      for (long n = 0; n < N; ++n) {
        double cc = p.bc[static_cast<size_t>(n)];
        const double* wcn = p.wc.data() + n * C;
        for (long c = 0; c < C; ++c) cc += wcn[c] * xk[c];
        ck[static_cast<size_t>(n)] = cc;
      }
      for (long c = 0; c < C; ++c) {
        const double* pa = pre_a.data() + (j * C + c) * N;
        const double* pb = pre_b.data() + (j * C + c) * N;
        const double* hc = h.data() + c * N;
        double acc = 0.0;
        for (long n = 0; n < N; ++n)
          acc += ck[static_cast<size_t>(n)] * (pa[n] * hc[n] + pb[n]);
        y[static_cast<size_t>(k * C + c)] = acc + p.d[static_cast<size_t>(c)] * xk[c];
      }
    }

    // Carry the chunk-final state.
    for (long c = 0; c < C; ++c) {
      const double* pa = pre_a.data() + ((m - 1) * C + c) * N;
      const double* pb = pre_b.data() + ((m - 1) * C + c) * N;
      double* hc = h.data() + c * N;
      for (long n = 0; n < N; ++n) hc[n] = pa[n] * hc[n] + pb[n];
    }
  }
  return y;
}

}  // namespace vmscan::ssm
