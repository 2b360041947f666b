#ifndef MCFUSE_CONTRASTIVE_HPP_
#define MCFUSE_CONTRASTIVE_HPP_

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mcfuse/autodiff.hpp"
#include "mcfuse/embedding.hpp"
#include "mcfuse/masking.hpp"

namespace mcfuse {

inline constexpr double kUnitNormTolerance = 1e-4;

template <typename Scalar>
struct InfoNceResult {
  Scalar loss = 0;
  Matrix<Scalar> grad_a;
  Matrix<Scalar> grad_b;
};

/// Symmetric InfoNCE between row-aligned unit vectors: the mean of the
/// row-wise and column-wise cross entropies of A B^T / temperature with the
/// diagonal as targets. Returns nullopt (skip) when fewer than two rows.
template <typename Scalar>
std::optional<InfoNceResult<Scalar>> info_nce_pair(const Matrix<Scalar>& a, const Matrix<Scalar>& b,
                                                   Scalar temperature, bool with_grad = true) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("info_nce_pair: shape mismatch");
  if (!(temperature > Scalar(0))) throw InvalidConfig("temperature must be positive");
  const Eigen::Index n = a.rows();
  if (n < 2) return std::nullopt;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::abs(a.row(i).norm() - Scalar(1)) > Scalar(kUnitNormTolerance) ||
        std::abs(b.row(i).norm() - Scalar(1)) > Scalar(kUnitNormTolerance)) {
      throw ContractViolation("info_nce_pair expects unit-norm rows");
    }
  }
  const Matrix<Scalar> logits = (a * b.transpose()) / temperature;

  // Row-wise and column-wise softmax.
  Matrix<Scalar> row_p = logits;
  Vector<Scalar> row_max = row_p.rowwise().maxCoeff();
  row_p = (row_p.colwise() - row_max).array().exp();
  Vector<Scalar> row_sum = row_p.rowwise().sum();
  Matrix<Scalar> col_p = logits;
  RowVector<Scalar> col_max = col_p.colwise().maxCoeff();
  col_p = (col_p.rowwise() - col_max).array().exp();
  RowVector<Scalar> col_sum = col_p.colwise().sum();

  Scalar row_loss = 0;
  Scalar col_loss = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    row_loss += std::log(row_sum(i)) + row_max(i) - logits(i, i);
    col_loss += std::log(col_sum(i)) + col_max(i) - logits(i, i);
  }
  InfoNceResult<Scalar> result;
  result.loss = Scalar(0.5) * (row_loss + col_loss) / Scalar(n);
  if (!with_grad) return result;

  row_p.array().colwise() /= row_sum.array();
  col_p.array().rowwise() /= col_sum.array();
  // dL/dlogits = (softmax_rows - I + softmax_cols - I) / (2n)
  Matrix<Scalar> dlogits = row_p + col_p;
  dlogits.diagonal().array() -= Scalar(2);
  dlogits /= Scalar(2) * Scalar(n) * temperature;
  result.grad_a = dlogits * b;
  result.grad_b = dlogits.transpose() * a;
  return result;
}

// Channel index pairs contrasted for a mode. MCA and EAO: every unordered
// pair. Zorro: unimodal-unimodal plus unimodal-fusion.
std::vector<std::pair<int, int>> contrastive_pairs(const std::vector<ChannelSet>& channels, Mode mode);

struct PairLoss {
  int a = 0;
  int b = 0;
  double loss = 0;
  int count = 0;
  bool skipped = true;
};

struct LossReport {
  double total = 0;
  std::vector<PairLoss> pairs;

  int contributing() const;
  nlohmann::json to_json(const std::vector<ChannelSet>& channels) const;
};

// Non-differentiable evaluation over a stored embedding set.
LossReport total_contrastive_loss(const EmbeddingSet& embeddings, Mode mode, double temperature);

template <typename Scalar>
Var info_nce(Tape<Scalar>& t, Var a, Var b, Scalar temperature) {
  auto result = info_nce_pair<Scalar>(t.value(a), t.value(b), temperature);
  if (!result) throw InvalidInput("info_nce needs at least two rows");
  Matrix<Scalar> value(1, 1);
  value(0, 0) = result->loss;
  return t.record(std::move(value), {a, b},
                  [a, b, grad_a = std::move(result->grad_a), grad_b = std::move(result->grad_b)](
                      Tape<Scalar>& t, const Matrix<Scalar>& g) {
                    if (t.requires_grad(a)) t.grad(a) += g(0, 0) * grad_a;
                    if (t.requires_grad(b)) t.grad(b) += g(0, 0) * grad_b;
                  });
}

/// Differentiable total loss over channel-major embeddings [channels*batch x d]
/// (as produced by Model::forward). Each pair uses the samples where both
/// channels are available; pairs with fewer than two are skipped and left out
/// of the mean. The report, when given, receives the per-pair values.
template <typename Scalar>
Var contrastive_loss(Tape<Scalar>& t, Var embeddings, const BoolArray& available,
                     const std::vector<std::pair<int, int>>& pairs, Scalar temperature,
                     LossReport* report = nullptr) {
  const int b_count = static_cast<int>(available.rows());
  if (b_count == 0) throw InvalidInput("empty batch");
  std::vector<Var> terms;
  if (report != nullptr) *report = LossReport{};
  for (const auto& [ca, cb] : pairs) {
    std::vector<int> rows_a;
    std::vector<int> rows_b;
    for (int s = 0; s < b_count; ++s) {
      if (available(s, ca) && available(s, cb)) {
        rows_a.push_back(ca * b_count + s);
        rows_b.push_back(cb * b_count + s);
      }
    }
    PairLoss entry{ca, cb, 0.0, static_cast<int>(rows_a.size()), rows_a.size() < 2};
    if (!entry.skipped) {
      Var va = ad::gather_rows(t, embeddings, std::move(rows_a));
      Var vb = ad::gather_rows(t, embeddings, std::move(rows_b));
      Var term = info_nce(t, va, vb, temperature);
      entry.loss = static_cast<double>(t.value(term)(0, 0));
      terms.push_back(term);
    }
    if (report != nullptr) report->pairs.push_back(entry);
  }
  if (terms.empty()) {
    if (report != nullptr) report->total = 0;
    return t.constant(Matrix<Scalar>::Zero(1, 1));
  }
  std::vector<Scalar> weights(terms.size(), Scalar(1) / Scalar(terms.size()));
  Var total = ad::weighted_sum(t, terms, std::move(weights));
  if (report != nullptr) report->total = static_cast<double>(t.value(total)(0, 0));
  return total;
}

}  // namespace mcfuse

#endif  // MCFUSE_CONTRASTIVE_HPP_
