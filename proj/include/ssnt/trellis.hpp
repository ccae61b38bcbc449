#pragma once

// Exact marginalization over hard monotonic alignments.
//
// Cells are (i, j) with input position i and output frame j, both zero-based
// in storage. A path starts at (0, 0), moves one frame per step and either
// stays on its row (Emit) or moves down one row (Shift then Emit), and ends
// at (I-1, J-1). Every visited cell contributes its emission log-density.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ssnt/autodiff.hpp"

namespace ssnt {

/// Per-cell log-domain scores, each stored I × J.
struct TrellisGrid {
  std::size_t I = 0;
  std::size_t J = 0;
  Tensor log_emit;        // log p(y_j | ..., z_j = i)
  Tensor log_emit_prob;   // log p(a_ij = Emit)
  Tensor log_shift_prob;  // log p(a_ij = Shift)

  /// Checks extents, complementarity of Emit/Shift, and that no entry is NaN or +inf.
  void validate() const {
    const Shape want{I, J};
    if (I == 0 || J == 0) throw ShapeError("trellis grid extents must be positive");
    if (log_emit.shape() != want || log_emit_prob.shape() != want || log_shift_prob.shape() != want) {
      throw ShapeError("trellis grid matrices must all be " + shape_str(want));
    }
    if (!log_emit.all_finite_or_neg_inf()) throw Error("trellis grid: log_emit has NaN or +inf");
    for (std::size_t k = 0; k < I * J; ++k) {
      const double s = std::exp(log_emit_prob[k]) + std::exp(log_shift_prob[k]);
      if (!(std::abs(s - 1.0) <= 1e-12)) {
        throw Error("trellis grid: Emit and Shift probabilities at cell " + std::to_string(k) +
                    " sum to " + std::to_string(s));
      }
    }
  }
};

/// Monotone alignment. Positions are one-based: z[0] == 1, steps in {0, 1}.
struct AlignmentPath {
  std::vector<std::size_t> z;

  /// True when the path starts at 1, moves by 0 or 1, and never exceeds I.
  /// With `require_end`, the last position must also equal I.
  bool valid_for(std::size_t I, bool require_end = true) const {
    if (z.empty() || z.front() != 1) return false;
    for (std::size_t j = 1; j < z.size(); ++j) {
      if (z[j] < z[j - 1] || z[j] - z[j - 1] > 1) return false;
    }
    if (z.back() > I) return false;
    return !require_end || z.back() == I;
  }

  friend bool operator==(const AlignmentPath&, const AlignmentPath&) = default;
};

struct ForwardResult {
  Tensor log_alpha;
  double log_likelihood = kNegInf;
};

struct ForwardBackwardResult {
  Tensor log_alpha;
  Tensor log_beta;
  double log_likelihood = kNegInf;
  Tensor gamma;
};

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

namespace detail {

inline void require_path_exists(std::size_t I, std::size_t J) {
  if (I > J) {
    throw Error("no monotonic path exists: " + std::to_string(I) + " input positions but only " +
                std::to_string(J) + " output steps");
  }
}

inline Var column(Var m, std::size_t j) { return slice(m, 1, j, j + 1); }

}  // namespace detail

struct ForwardVars {
  Var log_alpha;       // I × J
  Var log_likelihood;  // scalar
};

/// Forward recursion built from tape primitives, so the gradient of the
/// likelihood with respect to every grid entry comes from tape reversal.
inline ForwardVars forward_pass(Var log_emit, Var log_emit_prob, Var log_shift_prob) {
  const Shape& s = log_emit.shape();
  if (s.size() != 2 || log_emit_prob.shape() != s || log_shift_prob.shape() != s) {
    throw ShapeError("forward_pass: grid matrices must share an I x J shape, got " + shape_str(s) +
                     ", " + shape_str(log_emit_prob.shape()) + ", " + shape_str(log_shift_prob.shape()));
  }
  const std::size_t I = s[0], J = s[1];
  detail::require_path_exists(I, J);
  Tape& tape = log_emit.tape();

  Var first = add(slice(detail::column(log_emit, 0), 0, 0, 1), slice(detail::column(log_emit_prob, 0), 0, 0, 1));
  Var prev = I == 1 ? first : concat({first, tape.constant(Tensor({I - 1, 1}, kNegInf))}, 0);
  std::vector<Var> cols{prev};
  cols.reserve(J);
  const Var top = tape.constant(Tensor({1, 1}, kNegInf));
  for (std::size_t j = 1; j < J; ++j) {
    Var lep = detail::column(log_emit_prob, j);
    Var stay = add(prev, lep);
    Var advance;
    if (I == 1) {
      advance = tape.constant(Tensor({1, 1}, kNegInf));
    } else {
      Var from = add(prev, detail::column(log_shift_prob, j));
      advance = add(concat({top, slice(from, 0, 0, I - 1)}, 0), lep);
    }
    Var both = concat({stay, advance}, 1);
    prev = add(reshape(logsumexp(both, 1), {I, 1}), detail::column(log_emit, j));
    cols.push_back(prev);
  }
  Var alpha = J == 1 ? cols[0] : concat(cols, 1);
  Var ll = reshape(slice(prev, 0, I - 1, I), {});
  return {alpha, ll};
}

/// Value-level forward pass on a fresh, non-differentiable tape.
inline ForwardResult forward_pass(const TrellisGrid& grid) {
  grid.validate();
  detail::require_path_exists(grid.I, grid.J);
  Tape tape;
  ForwardVars fv = forward_pass(tape.constant(grid.log_emit), tape.constant(grid.log_emit_prob),
                                tape.constant(grid.log_shift_prob));
  return {fv.log_alpha.value(), fv.log_likelihood.value().item()};
}

inline Tensor backward_pass(const TrellisGrid& grid) {
  grid.validate();
  detail::require_path_exists(grid.I, grid.J);
  const std::size_t I = grid.I, J = grid.J;
  const Tensor& le = grid.log_emit;
  const Tensor& lep = grid.log_emit_prob;
  const Tensor& lsp = grid.log_shift_prob;
  Tensor beta({I, J}, kNegInf);
  beta(I - 1, J - 1) = 0.0;
  for (std::size_t j = J - 1; j-- > 0;) {
    for (std::size_t i = 0; i < I; ++i) {
      double stay = lep(i, j + 1) + le(i, j + 1) + beta(i, j + 1);
      double advance = kNegInf;
      if (i + 1 < I) advance = lsp(i, j + 1) + lep(i + 1, j + 1) + le(i + 1, j + 1) + beta(i + 1, j + 1);
      beta(i, j) = log_add(stay, advance);
    }
  }
  return beta;
}

/// gamma(i,j) = exp(log_alpha + log_beta - log_likelihood).
inline Tensor posteriors(const Tensor& log_alpha, const Tensor& log_beta, double log_likelihood) {
  if (log_alpha.shape() != log_beta.shape()) {
    throw ShapeError("posteriors: alpha " + shape_str(log_alpha.shape()) + " vs beta " +
                     shape_str(log_beta.shape()));
  }
  if (log_likelihood == kNegInf) throw Error("zero-probability instance");
  if (!std::isfinite(log_likelihood)) throw Error("posteriors: log-likelihood is not finite");
  Tensor gamma(log_alpha.shape());
  for (std::size_t k = 0; k < gamma.numel(); ++k) {
    const double s = log_alpha[k] + log_beta[k];
    gamma[k] = s == kNegInf ? 0.0 : std::exp(s - log_likelihood);
  }
  return gamma;
}

inline ForwardBackwardResult forward_backward(const TrellisGrid& grid) {
  ForwardResult f = forward_pass(grid);
  Tensor beta = backward_pass(grid);
  Tensor gamma = posteriors(f.log_alpha, beta, f.log_likelihood);
  return {std::move(f.log_alpha), std::move(beta), f.log_likelihood, std::move(gamma)};
}

// ---------------------------------------------------------------------------
// Path enumeration

/// Binomial coefficient C(n, k), saturating at UINT64_MAX.
inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  long double r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) r = r * static_cast<long double>(n - k + i) / i;
  if (r > 1.8e19L) return UINT64_MAX;
  return static_cast<std::uint64_t>(r + 0.5L);
}

inline std::uint64_t path_count(std::size_t I, std::size_t J) {
  if (I == 0 || I > J) return 0;
  return binomial(J - 1, I - 1);
}

/// Calls `visit` on every complete path for an I × J trellis.
inline void for_each_path(std::size_t I, std::size_t J, const std::function<void(const AlignmentPath&)>& visit) {
  if (I == 0 || I > J) return;
  AlignmentPath path;
  path.z.assign(J, 1);
  std::function<void(std::size_t)> rec = [&](std::size_t j) {
    if (j == J) {
      if (path.z.back() == I) visit(path);
      return;
    }
    const std::size_t cur = path.z[j - 1];
    // Remaining steps must be able to reach I.
    if (I - cur <= J - 1 - j) {
      path.z[j] = cur;
      rec(j + 1);
    }
    if (cur < I) {
      path.z[j] = cur + 1;
      rec(j + 1);
    }
  };
  if (J == 1) {
    if (I == 1) visit(path);
    return;
  }
  rec(1);
}

/// Log weight of one complete path under the grid.
inline double path_log_weight(const TrellisGrid& grid, const AlignmentPath& path) {
  double w = grid.log_emit_prob(0, 0) + grid.log_emit(0, 0);
  for (std::size_t j = 1; j < path.z.size(); ++j) {
    const std::size_t i = path.z[j] - 1;
    if (path.z[j] == path.z[j - 1]) {
      w += grid.log_emit_prob(i, j);
    } else {
      w += grid.log_shift_prob(i - 1, j) + grid.log_emit_prob(i, j);
    }
    w += grid.log_emit(i, j);
  }
  return w;
}

inline constexpr std::uint64_t kMaxEnumeratedPaths = 1000000;

/// Marginal likelihood by summing over every alignment path explicitly.
inline double brute_force_likelihood(const TrellisGrid& grid) {
  grid.validate();
  detail::require_path_exists(grid.I, grid.J);
  const std::uint64_t n = path_count(grid.I, grid.J);
  if (n > kMaxEnumeratedPaths) {
    throw Error("brute_force_likelihood: " + std::to_string(n) + " paths exceed the limit of " +
                std::to_string(kMaxEnumeratedPaths));
  }
  double total = kNegInf;
  for_each_path(grid.I, grid.J, [&](const AlignmentPath& p) { total = log_add(total, path_log_weight(grid, p)); });
  return total;
}

// ---------------------------------------------------------------------------
// Best path

struct BestPath {
  AlignmentPath path;
  double log_weight = kNegInf;
};

/// Max-product forward pass with backtrace. Ties prefer staying on the row.
inline BestPath best_path(const TrellisGrid& grid) {
  grid.validate();
  detail::require_path_exists(grid.I, grid.J);
  const std::size_t I = grid.I, J = grid.J;
  const Tensor& le = grid.log_emit;
  const Tensor& lep = grid.log_emit_prob;
  const Tensor& lsp = grid.log_shift_prob;
  Tensor delta({I, J}, kNegInf);
  std::vector<unsigned char> advanced(I * J, 0);
  delta(0, 0) = lep(0, 0) + le(0, 0);
  for (std::size_t j = 1; j < J; ++j) {
    for (std::size_t i = 0; i < I; ++i) {
      const double stay = delta(i, j - 1) + lep(i, j);
      const double adv = i > 0 ? delta(i - 1, j - 1) + lsp(i - 1, j) + lep(i, j) : kNegInf;
      if (adv > stay) {
        delta(i, j) = adv + le(i, j);
        advanced[i * J + j] = 1;
      } else {
        delta(i, j) = stay + le(i, j);
      }
    }
  }
  BestPath out;
  out.log_weight = delta(I - 1, J - 1);
  out.path.z.assign(J, 1);
  std::size_t i = I - 1;
  for (std::size_t j = J; j-- > 0;) {
    out.path.z[j] = i + 1;
    if (j > 0 && advanced[i * J + j]) --i;
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Random grid with Emit logits ~ N(0, 1.5²) and emission log-densities
/// ~ N(0, 2²). Used by the self-check and tests.
inline TrellisGrid random_grid(std::size_t I, std::size_t J, std::mt19937_64& rng) {
  TrellisGrid g{I, J, Tensor({I, J}), Tensor({I, J}), Tensor({I, J})};
  std::normal_distribution<double> logit(0.0, 1.5), emit(0.0, 2.0);
  for (std::size_t k = 0; k < I * J; ++k) {
    const double z = logit(rng);
    g.log_emit_prob[k] = detail::log_sigmoid(z);
    g.log_shift_prob[k] = detail::log_sigmoid(-z);
    g.log_emit[k] = emit(rng);
  }
  return g;
}

}  // namespace ssnt
