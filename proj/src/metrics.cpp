#include "mcfuse/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace mcfuse {

namespace {

constexpr Eigen::Index kBlockRows = 512;

MatrixXd normalized_rows(const MatrixXd& x) {
  MatrixXd out = x;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double norm = out.row(r).norm();
    if (norm > 0) out.row(r) /= norm;
  }
  return out;
}

}  // namespace

double alignment(const MatrixXd& x, const MatrixXd& y) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw InvalidInput("alignment: size mismatch");
  if (x.rows() < 1) throw InvalidInput("alignment: no pairs");
  return (x - y).rowwise().squaredNorm().mean();
}

double uniformity(const MatrixXd& x) {
  const Eigen::Index n = x.rows();
  if (n < 2) throw InvalidInput("uniformity needs at least two embeddings");
  const Vector<double> sq = x.rowwise().squaredNorm();
  double sum = 0;
  for (Eigen::Index begin = 0; begin < n; begin += kBlockRows) {
    const Eigen::Index rows = std::min(kBlockRows, n - begin);
    MatrixXd gram = x.middleRows(begin, rows) * x.transpose();
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (begin + i == j) continue;
        const double d2 = std::max(0.0, sq(begin + i) + sq(j) - 2.0 * gram(i, j));
        sum += std::exp(-2.0 * d2);
      }
    }
  }
  return sum / (static_cast<double>(n) * static_cast<double>(n - 1));
}

double log_uniformity(const MatrixXd& x) { return std::log(uniformity(x)); }

RankTable rank_matrix(const MatrixXd& queries, const MatrixXd& keys) {
  if (queries.rows() != keys.rows() || queries.cols() != keys.cols()) {
    throw InvalidInput("rank_matrix: size mismatch");
  }
  const Eigen::Index n = queries.rows();
  const MatrixXd q = normalized_rows(queries);
  const MatrixXd k = normalized_rows(keys);
  RankTable table;
  table.n = static_cast<int>(n);
  table.ranks.resize(static_cast<std::size_t>(n));
  for (Eigen::Index begin = 0; begin < n; begin += kBlockRows) {
    const Eigen::Index rows = std::min(kBlockRows, n - begin);
    MatrixXd sims = q.middleRows(begin, rows) * k.transpose();
    for (Eigen::Index i = 0; i < rows; ++i) {
      const double match = sims(i, begin + i);
      int rank = 1;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j != begin + i && sims(i, j) >= match) ++rank;
      }
      table.ranks[begin + i] = rank;
    }
  }
  return table;
}

double median_rank(const RankTable& table) {
  if (table.ranks.empty()) throw InvalidInput("median_rank of an empty table");
  std::vector<int> sorted = table.ranks;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  if (n % 2 == 1) return sorted[n / 2];
  return 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
}

double recall_at_k(const RankTable& table, int k) {
  if (table.ranks.empty()) throw InvalidInput("recall_at_k of an empty table");
  if (k < 1) throw InvalidInput("recall_at_k needs k >= 1");
  const auto hits = std::count_if(table.ranks.begin(), table.ranks.end(), [k](int r) { return r <= k; });
  return static_cast<double>(hits) / static_cast<double>(table.ranks.size());
}

nlohmann::json MetricRecord::to_json() const {
  return {{"run", run},       {"mode", mode},     {"sparsity", sparsity}, {"epoch", epoch},
          {"split", split},   {"metric", metric}, {"value", value}};
}

MetricRecord MetricRecord::from_json(const nlohmann::json& j) {
  MetricRecord r;
  r.run = j.value("run", "");
  r.mode = j.at("mode").get<std::string>();
  r.sparsity = j.at("sparsity").get<double>();
  r.epoch = j.value("epoch", 0);
  r.split = j.at("split").get<std::string>();
  r.metric = j.at("metric").get<std::string>();
  r.value = j.at("value").is_null() ? std::nan("") : j.at("value").get<double>();
  return r;
}

}  // namespace mcfuse
