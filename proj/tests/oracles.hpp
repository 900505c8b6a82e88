#pragma once

// Test-only reference implementations, independent of the library's own
// kernels: brute-force window enumeration, central finite differences and a
// plain triple-loop matmul.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "discn/tensor.hpp"

namespace oracle {

// plain triple-loop product, no library code
inline std::vector<double> matmul_ref(const std::vector<double>& a, const std::vector<double>& b, long m,
                                      long k, long n) {
  std::vector<double> c(static_cast<size_t>(m * n), 0.0);
  for (long i = 0; i < m; ++i)
    for (long kk = 0; kk < k; ++kk)
      for (long j = 0; j < n; ++j) c[i * n + j] += a[i * k + kk] * b[kk * n + j];
  return c;
}

struct WindowToken {
  std::vector<double> values;  // channel-first flattened window
};

// direct sliding-window enumeration over a zero-padded image
inline std::vector<WindowToken> unfold_ref(const std::vector<double>& img, long C, long H, long W, long k,
                                           long p, long s) {
  std::vector<WindowToken> tokens;
  for (long y0 = -p; y0 + k <= H + p; y0 += s) {
    for (long x0 = -p; x0 + k <= W + p; x0 += s) {
      WindowToken t;
      for (long c = 0; c < C; ++c)
        for (long ky = 0; ky < k; ++ky)
          for (long kx = 0; kx < k; ++kx) {
            long y = y0 + ky, x = x0 + kx;
            t.values.push_back((y >= 0 && y < H && x >= 0 && x < W) ? img[(c * H + y) * W + x] : 0.0);
          }
      tokens.push_back(std::move(t));
    }
  }
  return tokens;
}

// per-pixel window membership count by direct enumeration
inline std::vector<int> coverage_ref(long H, long W, long k, long p, long s) {
  std::vector<int> counts(static_cast<size_t>(H * W), 0);
  for (long y0 = -p; y0 + k <= H + p; y0 += s)
    for (long x0 = -p; x0 + k <= W + p; x0 += s)
      for (long ky = 0; ky < k; ++ky)
        for (long kx = 0; kx < k; ++kx) {
          long y = y0 + ky, x = x0 + kx;
          if (y >= 0 && y < H && x >= 0 && x < W) counts[y * W + x]++;
        }
  return counts;
}

// central finite difference of f at x[i]
inline double central_diff(std::function<double(double)> f, double x, double h = 1e-3) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

// relative-error comparison used by every gradient check
inline double rel_err(double a, double b) {
  double denom = std::max({std::fabs(a), std::fabs(b), 1e-6});
  return std::fabs(a - b) / denom;
}

// Checks the analytic gradient of `loss_fn` (re-evaluated from scratch) wrt
// entries of `param` against central differences. Probes `probes` indices.
template <class T>
double max_grad_rel_err(discn::Tensor<T>& param, const std::function<double()>& loss_fn,
                        const std::vector<T>& analytic_grad, int probes, std::mt19937_64& rng,
                        double h = 1e-3) {
  double worst = 0.0;
  long n = param.numel();
  std::uniform_int_distribution<long> pick(0, n - 1);
  for (int i = 0; i < probes; ++i) {
    long idx = probes >= n ? (i % n) : pick(rng);
    T saved = param.mutable_data()[idx];
    param.mutable_data()[idx] = saved + static_cast<T>(h);
    double up = loss_fn();
    param.mutable_data()[idx] = saved - static_cast<T>(h);
    double down = loss_fn();
    param.mutable_data()[idx] = saved;
    double numeric = (up - down) / (2.0 * h);
    worst = std::max(worst, rel_err(static_cast<double>(analytic_grad[idx]), numeric));
  }
  return worst;
}

}  // namespace oracle
