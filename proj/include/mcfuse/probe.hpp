#ifndef MCFUSE_PROBE_HPP_
#define MCFUSE_PROBE_HPP_

#include <cstdint>
#include <optional>
#include <vector>

#include "mcfuse/core.hpp"

namespace mcfuse {

enum class ProbeTask { kRegression, kClassification };

struct ProbeHyper {
  double lr = 0.5;
  int steps = 2000;
  std::uint64_t seed = 0;
};

// A single linear layer over frozen embeddings.
struct ProbeParams {
  ProbeTask task = ProbeTask::kRegression;
  MatrixXd weight;  // [dim x outputs]
  RowVector<double> bias;

  int outputs() const { return static_cast<int>(weight.cols()); }
  MatrixXd predict(const MatrixXd& embeddings) const;
};

// Full-batch gradient descent with cosine-decayed step size. Regression
// minimizes L1 against `targets`; classification minimizes cross entropy
// against integer labels stored in `targets`.
ProbeParams fit_probe(const MatrixXd& embeddings, const std::vector<double>& targets, ProbeTask task,
                      const ProbeHyper& hyper, int classes = 0);

struct RegressionReport {
  double l1 = 0;
  std::optional<double> pearson_r;  // undefined for zero-variance inputs
};

struct ClassificationReport {
  double cross_entropy = 0;
  std::optional<double> macro_aupr;
  std::vector<std::optional<double>> per_class_aupr;  // nullopt: class absent
  double accuracy = 0;
};

RegressionReport eval_regression(const ProbeParams& probe, const MatrixXd& embeddings,
                                 const std::vector<double>& targets);
ClassificationReport eval_classification(const ProbeParams& probe, const MatrixXd& embeddings,
                                         const std::vector<int>& labels);

std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y);

// Step-interpolated average precision: mean over positives of the precision
// at each positive's rank. Equal scores rank negatives first.
std::optional<double> average_precision(const std::vector<double>& scores, const std::vector<bool>& positive);

}  // namespace mcfuse

#endif  // MCFUSE_PROBE_HPP_
