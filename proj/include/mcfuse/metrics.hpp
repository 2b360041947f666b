#ifndef MCFUSE_METRICS_HPP_
#define MCFUSE_METRICS_HPP_

#include <string>
#include <vector>

#include <json.hpp>

#include "mcfuse/core.hpp"

namespace mcfuse {

// Mean squared distance between matched rows.
double alignment(const MatrixXd& x, const MatrixXd& y);

// Mean of exp(-2 ||x_i - x_j||^2) over ordered pairs i != j.
double uniformity(const MatrixXd& x);
// The conventional log form, log(uniformity(x)).
double log_uniformity(const MatrixXd& x);

struct RankTable {
  std::vector<int> ranks;  // 1-based rank of the matching key per query
  int n = 0;               // key count
};

// Ranks keys by descending cosine similarity per query; the matching key is
// placed after every non-matching key with equal similarity.
RankTable rank_matrix(const MatrixXd& queries, const MatrixXd& keys);

double median_rank(const RankTable& table);
double recall_at_k(const RankTable& table, int k);

struct MetricRecord {
  std::string run;
  std::string mode;
  double sparsity = 0;
  int epoch = 0;
  std::string split;
  std::string metric;
  double value = 0;

  nlohmann::json to_json() const;
  static MetricRecord from_json(const nlohmann::json& j);
};

}  // namespace mcfuse

#endif  // MCFUSE_METRICS_HPP_
