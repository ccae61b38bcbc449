#pragma once

// Scalar-loop reference implementations used as test oracles.

#include <algorithm>
#include <cmath>
#include <vector>

#include "ssnt/tensor.hpp"

namespace ssnt::ref {

inline double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// W·x + b with W stored out × in.
inline std::vector<double> dense(const Tensor& w, const Tensor& b, const std::vector<double>& x) {
  std::vector<double> out(w.dim(0));
  for (std::size_t r = 0; r < out.size(); ++r) {
    double s = b[r];
    for (std::size_t k = 0; k < x.size(); ++k) s += w(r, k) * x[k];
    out[r] = s;
  }
  return out;
}

inline std::vector<double> relu(std::vector<double> v) {
  for (double& x : v) x = std::max(x, 0.0);
  return v;
}

inline void lstm_step(const Tensor& w_ih, const Tensor& w_hh, const Tensor& b, const std::vector<double>& x,
                      std::vector<double>& h, std::vector<double>& c) {
  const std::size_t H = h.size();
  std::vector<double> gates(4 * H);
  for (std::size_t r = 0; r < 4 * H; ++r) {
    double s = b[r];
    for (std::size_t k = 0; k < x.size(); ++k) s += w_ih(r, k) * x[k];
    for (std::size_t k = 0; k < H; ++k) s += w_hh(r, k) * h[k];
    gates[r] = s;
  }
  for (std::size_t u = 0; u < H; ++u) {
    const double i = sigm(gates[u]), f = sigm(gates[H + u]), g = std::tanh(gates[2 * H + u]),
                 o = sigm(gates[3 * H + u]);
    c[u] = f * c[u] + i * g;
    h[u] = o * std::tanh(c[u]);
  }
}

}  // namespace ssnt::ref
