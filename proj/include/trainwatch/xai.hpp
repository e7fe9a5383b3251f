// SPDX-License-Identifier: Apache-2.0
#pragma once

// Post-hoc explanation math over supplied tensors: attention aggregation and
// token importance, GradCAM, and exact O(N^2) t-SNE.
//
// GradCAM's normalizer Z (number of entries per feature map) is unrelated to
// the z-score outlier rule in stats.hpp.

#include <Eigen/Dense>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <fmt/format.h>

#include "trainwatch/error.hpp"
#include "trainwatch/rng.hpp"
#include "trainwatch/stats.hpp"

namespace trainwatch {

// ---------------------------------------------------------------------------
// Attention

/// h heads of n x n row-stochastic attention weights.
struct AttentionTensor {
  std::vector<Eigen::MatrixXd> heads;

  std::size_t tokens() const noexcept { return heads.empty() ? 0 : static_cast<std::size_t>(heads.front().rows()); }

  void validate(double tol = 1e-6) const {
    if (heads.empty()) throw InvalidArgument("attention tensor needs at least one head");
    const auto n = heads.front().rows();
    if (n == 0) throw InvalidArgument("attention tensor needs at least one token");
    for (std::size_t h = 0; h < heads.size(); ++h) {
      const auto& a = heads[h];
      if (a.rows() != n || a.cols() != n) throw InvalidArgument(fmt::format("head {} is not {}x{}", h, n, n));
      if ((a.array() < 0.0).any() || !a.allFinite())
        throw InvalidArgument(fmt::format("head {} has negative or non-finite weights", h));
      for (Eigen::Index i = 0; i < n; ++i)
        if (std::fabs(a.row(i).sum() - 1.0) > tol)
          throw InvalidArgument(fmt::format("head {} row {} sums to {}, not 1", h, i, a.row(i).sum()));
    }
  }
};

/// Mean over heads.
inline Eigen::MatrixXd attention_head_mean(const AttentionTensor& a) {
  a.validate();
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(a.heads.front().rows(), a.heads.front().cols());
  for (const auto& h : a.heads) mean += h;
  return mean / static_cast<double>(a.heads.size());
}

/// Attention received by each token: the column sums of the head mean.
inline Eigen::VectorXd token_importance(const Eigen::MatrixXd& mean) {
  if (mean.rows() != mean.cols()) throw InvalidArgument("token importance needs a square matrix");
  return mean.colwise().sum().transpose();
}

// ---------------------------------------------------------------------------
// GradCAM

/// Feature maps A^k and the class-score gradients dy^c/dA^k, one pair per map.
struct GradcamInput {
  std::vector<Eigen::MatrixXd> maps;
  std::vector<Eigen::MatrixXd> gradients;

  void validate() const {
    if (maps.empty()) throw InvalidArgument("GradCAM needs at least one feature map");
    if (maps.size() != gradients.size()) throw InvalidArgument("GradCAM needs one gradient per feature map");
    for (std::size_t k = 0; k < maps.size(); ++k) {
      if (maps[k].rows() != gradients[k].rows() || maps[k].cols() != gradients[k].cols())
        throw InvalidArgument(fmt::format("feature map {} and its gradient differ in shape", k));
      if (maps[k].size() == 0) throw InvalidArgument(fmt::format("feature map {} is empty", k));
      if (maps[k].rows() != maps.front().rows() || maps[k].cols() != maps.front().cols())
        throw InvalidArgument("feature maps must share one shape");
    }
  }
};

/// alpha_k = (1/Z) sum_ij dy/dA^k_ij with Z = i*j. Uses a compensated sum;
/// a constant gradient map returns that constant exactly.
inline std::vector<double> gradcam_weights(const GradcamInput& in) {
  in.validate();
  std::vector<double> alpha;
  alpha.reserve(in.gradients.size());
  for (const auto& g : in.gradients) {
    const double first = g(0, 0);
    if ((g.array() == first).all()) {
      alpha.push_back(first);
      continue;
    }
    detail::CompensatedSum sum;
    for (Eigen::Index j = 0; j < g.cols(); ++j)
      for (Eigen::Index i = 0; i < g.rows(); ++i) sum.add(g(i, j));
    alpha.push_back(sum.value() / static_cast<double>(g.size()));
  }
  return alpha;
}

/// ReLU(sum_k alpha_k A^k).
inline Eigen::MatrixXd gradcam_map(const std::vector<double>& alpha, const std::vector<Eigen::MatrixXd>& maps) {
  if (maps.empty()) throw InvalidArgument("GradCAM needs at least one feature map");
  if (alpha.size() != maps.size())
    throw InvalidArgument(fmt::format("{} weights for {} feature maps", alpha.size(), maps.size()));
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(maps.front().rows(), maps.front().cols());
  for (std::size_t k = 0; k < maps.size(); ++k) {
    if (maps[k].rows() != sum.rows() || maps[k].cols() != sum.cols())
      throw InvalidArgument("feature maps must share one shape");
    sum += alpha[k] * maps[k];
  }
  return sum.cwiseMax(0.0);
}

// ---------------------------------------------------------------------------
// t-SNE

namespace detail {

inline Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& x) {
  const auto n = x.rows();
  Eigen::MatrixXd d(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) d(i, j) = d(j, i) = (x.row(i) - x.row(j)).squaredNorm();
  }
  return d;
}

// Divides by the off-diagonal total and symmetrizes; diagonal stays 0.
inline Eigen::MatrixXd normalize_joint(Eigen::MatrixXd w) {
  const auto n = w.rows();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) total += w(i, j);
  if (!(total > 0.0) || !std::isfinite(total))
    throw InvalidArgument("t-SNE affinities underflow; the bandwidth is too small for these distances");
  w /= total;
  w.diagonal().setZero();
  return 0.5 * (w + w.transpose());
}

}  // namespace detail

/// Gaussian joint affinities with one global bandwidth: exp(-|x_i-x_j|^2 /
/// 2 sigma^2) normalized over every ordered pair k != l, then (P + P^T)/2.
inline Eigen::MatrixXd tsne_p_matrix(const Eigen::MatrixXd& x, double sigma) {
  if (x.rows() < 2) throw InvalidArgument("t-SNE needs at least two points");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidArgument("sigma must be positive");
  const auto d = detail::squared_distances(x);
  // std::exp rather than Eigen's vectorized exp, which clamps large negative
  // arguments instead of underflowing to 0.
  const double denom = 2.0 * sigma * sigma;
  Eigen::MatrixXd w = d.unaryExpr([denom](double v) { return std::exp(-v / denom); });
  return detail::normalize_joint(std::move(w));
}

/// Extension, not used unless asked for: the usual per-point bandwidths
/// found by bisection so each conditional distribution has the requested
/// perplexity, combined as (p_j|i + p_i|j) / 2N.
inline Eigen::MatrixXd tsne_p_matrix_perplexity(const Eigen::MatrixXd& x, double perplexity, int max_iter = 200) {
  const auto n = x.rows();
  if (n < 2) throw InvalidArgument("t-SNE needs at least two points");
  if (!(perplexity > 0.0) || perplexity > static_cast<double>(n - 1))
    throw InvalidArgument("perplexity must be in (0, N-1]");
  const auto d = detail::squared_distances(x);
  const double target = std::log(perplexity);
  Eigen::MatrixXd cond = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double dmin = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) dmin = std::min(dmin, d(i, j));
    for (int it = 0; it < max_iter; ++it) {
      double z = 0.0, dot = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        const double w = std::exp(-beta * (d(i, j) - dmin));
        cond(i, j) = w;
        z += w;
        dot += w * (d(i, j) - dmin);
      }
      const double entropy = std::log(z) + beta * dot / z;
      cond.row(i) /= z;
      if (std::fabs(entropy - target) < 1e-10) break;
      if (entropy > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
  }
  return detail::normalize_joint(cond);
}

/// Student-t (one degree of freedom) joint similarities of the embedding.
inline Eigen::MatrixXd tsne_q_matrix(const Eigen::MatrixXd& y) {
  if (y.rows() < 2) throw InvalidArgument("t-SNE needs at least two points");
  const auto d = detail::squared_distances(y);
  Eigen::MatrixXd w = (1.0 + d.array()).inverse().matrix();
  return detail::normalize_joint(std::move(w));
}

/// sum over i != j of p log(p/q), with 0 log(0/q) = 0.
inline double kl_divergence(const Eigen::MatrixXd& p, const Eigen::MatrixXd& q) {
  if (p.rows() != q.rows() || p.cols() != q.cols() || p.rows() != p.cols())
    throw InvalidArgument("P and Q must be square and the same size");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      if (i == j || p(i, j) == 0.0) continue;
      assert(q(i, j) > 0.0);
      kl += p(i, j) * std::log(p(i, j) / q(i, j));
    }
  return kl;
}

/// dKL/dy_i = 4 sum_j (p_ij - q_ij)(1 + |y_i - y_j|^2)^-1 (y_i - y_j).
inline Eigen::MatrixXd tsne_gradient(const Eigen::MatrixXd& p, const Eigen::MatrixXd& y) {
  const auto n = y.rows();
  if (p.rows() != n || p.cols() != n) throw InvalidArgument("P does not match the embedding size");
  const auto q = tsne_q_matrix(y);
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(n, y.cols());
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const Eigen::RowVectorXd diff = y.row(i) - y.row(j);
      grad.row(i) += 4.0 * (p(i, j) - q(i, j)) / (1.0 + diff.squaredNorm()) * diff;
    }
  return grad;
}

struct TsneOptions {
  std::size_t dims = 2;
  double sigma = 1.0;
  std::size_t iters = 500;
  double learning_rate = 10.0;
  std::uint64_t seed = 0;
  /// Extension: per-point perplexity calibration instead of the global sigma.
  bool use_perplexity = false;
  double perplexity = 30.0;
};

struct TsneResult {
  Eigen::MatrixXd y;
  std::vector<double> kl;  // iters + 1 values, starting at the initial embedding
};

/// Plain gradient descent on KL(P || Q) from a N(0, 1e-4) initialization.
inline TsneResult tsne_embed(const Eigen::MatrixXd& x, const TsneOptions& opt = {}) {
  if (x.rows() < 2) throw InvalidArgument("t-SNE needs at least two points");
  if (opt.iters < 1) throw InvalidArgument("t-SNE needs at least one iteration");
  if (opt.dims != 2 && opt.dims != 3) throw InvalidArgument("t-SNE embeds into 2 or 3 dimensions");
  if (!(opt.learning_rate > 0.0)) throw InvalidArgument("learning_rate must be positive");
  const auto p = opt.use_perplexity ? tsne_p_matrix_perplexity(x, opt.perplexity) : tsne_p_matrix(x, opt.sigma);
  Rng rng(opt.seed);
  TsneResult r;
  r.y.resize(x.rows(), static_cast<Eigen::Index>(opt.dims));
  for (Eigen::Index i = 0; i < r.y.size(); ++i) r.y.data()[i] = rng.normal(0.0, 1e-2);
  r.kl.push_back(kl_divergence(p, tsne_q_matrix(r.y)));
  for (std::size_t it = 0; it < opt.iters; ++it) {
    r.y -= opt.learning_rate * tsne_gradient(p, r.y);
    r.kl.push_back(kl_divergence(p, tsne_q_matrix(r.y)));
  }
  return r;
}

}  // namespace trainwatch
