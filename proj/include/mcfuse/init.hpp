#ifndef MCFUSE_INIT_HPP_
#define MCFUSE_INIT_HPP_

#include <cmath>
#include <random>
#include <string>

#include "mcfuse/autodiff.hpp"

namespace mcfuse {

using Rng = std::mt19937_64;

template <typename Scalar>
Parameter<Scalar> zeros(std::string name, Eigen::Index rows, Eigen::Index cols) {
  return {std::move(name), Matrix<Scalar>::Zero(rows, cols), {}};
}

template <typename Scalar>
Parameter<Scalar> ones(std::string name, Eigen::Index rows, Eigen::Index cols) {
  return {std::move(name), Matrix<Scalar>::Ones(rows, cols), {}};
}

// Normal(0, stddev) resampled outside two standard deviations.
template <typename Scalar>
Parameter<Scalar> truncated_normal(std::string name, Eigen::Index rows, Eigen::Index cols,
                                   double stddev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<Scalar> value(rows, cols);
  for (Eigen::Index i = 0; i < value.size(); ++i) {
    double v = normal(rng);
    while (std::abs(v) > 2.0) v = normal(rng);
    value.data()[i] = static_cast<Scalar>(stddev * v);
  }
  return {std::move(name), std::move(value), {}};
}

// Glorot uniform over a [fan_in x fan_out] weight.
template <typename Scalar>
Parameter<Scalar> xavier(std::string name, Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> uniform(-limit, limit);
  Matrix<Scalar> value(fan_in, fan_out);
  for (Eigen::Index i = 0; i < value.size(); ++i) value.data()[i] = static_cast<Scalar>(uniform(rng));
  return {std::move(name), std::move(value), {}};
}

}  // namespace mcfuse

#endif  // MCFUSE_INIT_HPP_
