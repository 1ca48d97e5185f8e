#ifndef LTX_LOGSPACE_HPP
#define LTX_LOGSPACE_HPP

#include <Eigen/Dense>

#include <cmath>
#include <initializer_list>
#include <limits>
#include <span>

namespace ltx {

template <typename Scalar = double>
inline constexpr Scalar kLogZero = -std::numeric_limits<Scalar>::infinity();

template <typename Scalar>
inline bool is_log_zero(Scalar v) {
  return v == kLogZero<Scalar>;
}

/// log(exp(a) + exp(b)) without overflow. -inf absorbs; never produces NaN
/// for -inf inputs.
template <typename Scalar>
inline Scalar log_add(Scalar a, Scalar b) {
  if (a < b) std::swap(a, b);
  if (is_log_zero(b)) return a;
  return a + std::log1p(std::exp(b - a));
}

/// Saturating product in log space: -inf times anything stays -inf.
template <typename Scalar>
inline Scalar log_mul(Scalar a, Scalar b) {
  if (is_log_zero(a) || is_log_zero(b)) return kLogZero<Scalar>;
  return a + b;
}

template <typename Scalar>
Scalar logsumexp(std::span<const Scalar> values) {
  Scalar max = kLogZero<Scalar>;
  for (Scalar v : values) max = std::max(max, v);
  if (is_log_zero(max)) return max;
  if (std::isinf(max)) return max;
  Scalar acc = 0;
  for (Scalar v : values) acc += std::exp(v - max);
  return max + std::log(acc);
}

inline double logsumexp(std::initializer_list<double> values) {
  return logsumexp<double>(std::span<const double>(values.begin(), values.size()));
}

/// Eigen overload; works on any dense expression.
template <typename Derived>
typename Derived::Scalar logsumexp(const Eigen::DenseBase<Derived>& values) {
  using Scalar = typename Derived::Scalar;
  if (values.size() == 0) return kLogZero<Scalar>;
  const Scalar max = values.maxCoeff();
  if (std::isinf(max)) return max;
  return max + std::log((values.derived().array() - max).exp().sum());
}

/// Row-stable log-softmax of a column vector.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> log_softmax(
    const Eigen::MatrixBase<Derived>& logits) {
  return logits.array() - logsumexp(logits);
}

/// log(sigmoid(x)) = -log1p(exp(-x)), evaluated stably on both tails.
template <typename Scalar>
inline Scalar log_sigmoid(Scalar x) {
  if (x >= 0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

template <typename Scalar>
inline Scalar sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

}  // namespace ltx

#endif  // LTX_LOGSPACE_HPP
