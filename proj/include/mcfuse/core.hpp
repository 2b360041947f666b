#ifndef MCFUSE_CORE_HPP_
#define MCFUSE_CORE_HPP_

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace mcfuse {

// Row-major so that one token (or one sample) is one contiguous row.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixXf = Matrix<float>;
using MatrixXd = Matrix<double>;
using BoolArray = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidSchema : public Error {
 public:
  using Error::Error;
};

class InvalidConfig : public Error {
 public:
  using Error::Error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ContractViolation : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class NumericFailure : public Error {
 public:
  NumericFailure(const std::string& what, int layer)
      : Error(what + " (layer " + std::to_string(layer) + ")"), layer_(layer) {}
  int layer() const { return layer_; }

 private:
  int layer_;
};

}  // namespace mcfuse

#endif  // MCFUSE_CORE_HPP_
