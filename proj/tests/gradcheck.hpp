// Central finite-difference checks for tape-recorded functions.

#ifndef MCFUSE_TESTS_GRADCHECK_HPP_
#define MCFUSE_TESTS_GRADCHECK_HPP_

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mcfuse/autodiff.hpp"

namespace mcfuse::testing {

using Forward = std::function<Var(Tape<double>&)>;

// Scalar sum(x .* weights), so every output entry reaches the gradient.
inline Var project(Tape<double>& t, Var x, const MatrixXd& weights) {
  const double value = (t.value(x).array() * weights.array()).sum();
  return t.record(MatrixXd::Constant(1, 1, value), {x}, [x, weights](Tape<double>& t, const MatrixXd& g) {
    t.grad(x) += g(0, 0) * weights;
  });
}

struct BlockError {
  std::string name;
  double relative = 0;
  double analytic_norm = 0;
};

// Compares the tape gradient of project(forward) with central differences,
// one relative error per parameter block: |ga - gfd| / max(|ga| + |gfd|, floor).
// The floor keeps blocks whose true gradient is zero (attention key biases)
// from comparing rounding noise against rounding noise.
inline std::vector<BlockError> check_gradients(const std::vector<Parameter<double>*>& params, const Forward& forward,
                                               std::uint64_t seed = 3, double step = 1e-6,
                                               double floor = 1e-4) {
  MatrixXd weights;
  {
    Tape<double> t;
    const MatrixXd& out = t.value(forward(t));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    weights = MatrixXd::NullaryExpr(out.rows(), out.cols(), [&]() { return normal(rng); });
  }
  auto loss = [&]() {
    Tape<double> t;
    return t.value(project(t, forward(t), weights))(0, 0);
  };
  for (auto* p : params) p->grad.resize(0, 0);
  {
    Tape<double> t;
    t.backward(project(t, forward(t), weights));
  }
  std::vector<BlockError> errors;
  for (auto* p : params) {
    MatrixXd analytic = p->grad.size() == 0 ? MatrixXd::Zero(p->value.rows(), p->value.cols()) : p->grad;
    MatrixXd numeric(p->value.rows(), p->value.cols());
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double saved = p->value.data()[i];
      p->value.data()[i] = saved + step;
      const double up = loss();
      p->value.data()[i] = saved - step;
      const double down = loss();
      p->value.data()[i] = saved;
      numeric.data()[i] = (up - down) / (2 * step);
    }
    const double scale = std::max(analytic.norm() + numeric.norm(), floor);
    errors.push_back({p->name, (analytic - numeric).norm() / scale, analytic.norm()});
  }
  return errors;
}

}  // namespace mcfuse::testing

#endif  // MCFUSE_TESTS_GRADCHECK_HPP_
