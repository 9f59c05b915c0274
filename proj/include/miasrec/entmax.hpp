#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "miasrec/types.hpp"

namespace miasrec {

// Output of an entmax mapping: a point on the probability simplex together
// with the indices where it is strictly positive.
template <typename Scalar>
struct SparseDistribution {
  Vector<Scalar> probabilities;
  std::vector<Eigen::Index> support;
  double alpha = 1.5;
};

struct EntmaxOptions {
  int max_iterations = 60;
  double tolerance = 1e-9;
};

namespace detail {

template <typename Derived>
void check_scores(const Eigen::MatrixBase<Derived>& z, double alpha) {
  if (z.size() < 1) throw std::invalid_argument("entmax: empty score vector");
  if (!z.allFinite()) throw std::invalid_argument("entmax: non-finite score");
  if (!(alpha >= 1.0)) throw std::invalid_argument("entmax: alpha must be >= 1");
}

template <typename Scalar>
void collect_support(SparseDistribution<Scalar>& out) {
  out.support.clear();
  for (Eigen::Index j = 0; j < out.probabilities.size(); ++j)
    if (out.probabilities[j] > Scalar(0)) out.support.push_back(j);
}

}  // namespace detail

template <typename Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  const Scalar shift = z.maxCoeff();
  Vector<Scalar> p = (z.array() - shift).exp().matrix();
  return p / p.sum();
}

// alpha-entmax by bisection on the threshold. The solve runs in double
// regardless of the input scalar type.
//
// For alpha > 1:  p_j = [(alpha - 1) z_j - t]_+ ^ (1 / (alpha - 1)),  sum_j p_j = 1.
// The threshold t lies in [max - 1, max] where max = max_j (alpha - 1) z_j.
template <typename Derived>
SparseDistribution<typename Derived::Scalar> entmax(const Eigen::MatrixBase<Derived>& z, double alpha,
                                                    const EntmaxOptions& options = {}) {
  using Scalar = typename Derived::Scalar;
  detail::check_scores(z, alpha);

  SparseDistribution<Scalar> out;
  out.alpha = alpha;
  if (alpha == 1.0) {
    out.probabilities = softmax(z.template cast<double>()).template cast<Scalar>();
    detail::collect_support(out);
    return out;
  }

  const Eigen::VectorXd x = (alpha - 1.0) * z.template cast<double>();
  const double exponent = 1.0 / (alpha - 1.0);
  const double top = x.maxCoeff();
  double lo = top - 1.0;  // mass >= 1 here
  double hi = top;        // mass == 0 here

  Eigen::VectorXd p(x.size());
  auto evaluate = [&](double threshold) {
    for (Eigen::Index j = 0; j < x.size(); ++j) {
      const double gap = x[j] - threshold;
      p[j] = gap > 0.0 ? std::pow(gap, exponent) : 0.0;
    }
    return p.sum();
  };

  double threshold = lo;
  for (int it = 0; it < options.max_iterations; ++it) {
    threshold = 0.5 * (lo + hi);
    const double mass = evaluate(threshold);
    if (std::abs(mass - 1.0) <= options.tolerance) break;
    if (mass > 1.0) {
      lo = threshold;
    } else {
      hi = threshold;
    }
  }
  double mass = evaluate(threshold);
  if (mass <= 0.0) mass = evaluate(lo);
  out.probabilities = (p / mass).template cast<Scalar>();
  detail::collect_support(out);
  return out;
}

// Vector-Jacobian product of entmax: maps d(loss)/dp to d(loss)/dz.
template <typename Scalar, typename Derived>
Vector<Scalar> entmax_grad(const SparseDistribution<Scalar>& p, const Eigen::MatrixBase<Derived>& upstream) {
  if (upstream.size() != p.probabilities.size()) {
    throw std::invalid_argument("entmax_grad: upstream size mismatch");
  }
  const Eigen::VectorXd prob = p.probabilities.template cast<double>();
  const Eigen::VectorXd up = upstream.template cast<double>();
  Eigen::VectorXd grad;
  if (p.alpha == 1.0) {
    grad = prob.cwiseProduct(up) - prob * prob.dot(up);
  } else {
    Eigen::VectorXd s = Eigen::VectorXd::Zero(prob.size());
    for (const auto j : p.support) s[j] = std::pow(prob[j], 2.0 - p.alpha);
    const double total = s.sum();
    grad = s.cwiseProduct(up) - s * (s.dot(up) / total);
  }
  return grad.template cast<Scalar>();
}

// Euclidean projection onto the probability simplex by sorting. Equal to
// 2-entmax (sparsemax); kept as an independent reference.
template <typename Derived>
Vector<typename Derived::Scalar> simplex_projection_oracle(const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  const auto n = z.size();
  std::vector<double> sorted(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) sorted[static_cast<std::size_t>(i)] = static_cast<double>(z[i]);
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double cumulative = 0.0;
  double threshold = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    cumulative += sorted[static_cast<std::size_t>(k)];
    const double candidate = (cumulative - 1.0) / static_cast<double>(k + 1);
    if (sorted[static_cast<std::size_t>(k)] > candidate) threshold = candidate;
  }
  Vector<Scalar> out(n);
  for (Eigen::Index j = 0; j < n; ++j) out[j] = static_cast<Scalar>(std::max(static_cast<double>(z[j]) - threshold, 0.0));
  return out;
}

}  // namespace miasrec
