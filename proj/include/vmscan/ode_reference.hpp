#pragma once

#include <stdexcept>
#include <vector>

namespace vmscan::ssm {

/// Continuous diagonal SSM h'(t) = A h(t) + B x(t), y(t) = C h(t) + D x(t)
/// with the input held constant over each token interval.
struct ContinuousParams {
  long state = 1;
  std::vector<double> a;      // N diagonal entries, negative for stability
  std::vector<double> b;      // N
  std::vector<double> c;      // N
  double d = 0.0;
  std::vector<double> delta;  // per-token step sizes, all > 0
};

/// Classical RK4 integration of the continuous system, substeps fine enough
/// to serve as an independent oracle for the discretized scan. Evaluates y
/// at the end of each token interval. Shares no code with the scan path.
inline std::vector<double> ode_oracle(const ContinuousParams& p,
                                      const std::vector<double>& x,
                                      long substeps = 1000) {
  const long L = static_cast<long>(x.size());
  const long N = p.state;
  if (static_cast<long>(p.delta.size()) != L)
    throw std::invalid_argument("ode_oracle: delta must hold one step per token");
  if (static_cast<long>(p.a.size()) != N || static_cast<long>(p.b.size()) != N ||
      static_cast<long>(p.c.size()) != N)
    throw std::invalid_argument("ode_oracle: a/b/c must hold N values");
  for (double dt : p.delta)
    if (!(dt > 0.0)) throw std::invalid_argument("ode_oracle: delta must be > 0");

  std::vector<double> h(static_cast<size_t>(N), 0.0);
  std::vector<double> y(static_cast<size_t>(L));
  for (long k = 0; k < L; ++k) {
    const double u = x[static_cast<size_t>(k)];
    const double dt = p.delta[static_cast<size_t>(k)] / static_cast<double>(substeps);
    for (long s = 0; s < substeps; ++s) {
      for (long n = 0; n < N; ++n) {
        const double a = p.a[static_cast<size_t>(n)];
        const double bu = p.b[static_cast<size_t>(n)] * u;
        const double hn = h[static_cast<size_t>(n)];
        const double k1 = a * hn + bu;
        const double k2 = a * (hn + 0.5 * dt * k1) + bu;
        const double k3 = a * (hn + 0.5 * dt * k2) + bu;
        const double k4 = a * (hn + dt * k3) + bu;
        h[static_cast<size_t>(n)] = hn + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      }
    }
    double acc = 0.0;
    for (long n = 0; n < N; ++n) acc += p.c[static_cast<size_t>(n)] * h[static_cast<size_t>(n)];
    y[static_cast<size_t>(k)] = acc + p.d * u;
  }
  return y;
}

}  // namespace vmscan::ssm
