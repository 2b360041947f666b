#include "mcfuse/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace mcfuse {

namespace {

MatrixXd softmax_rows(const MatrixXd& logits) {
  MatrixXd p = logits.colwise() - logits.rowwise().maxCoeff();
  p = p.array().exp();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

}  // namespace

MatrixXd ProbeParams::predict(const MatrixXd& embeddings) const {
  if (embeddings.cols() != weight.rows()) throw ShapeError("probe input width mismatch");
  return (embeddings * weight).rowwise() + bias;
}

ProbeParams fit_probe(const MatrixXd& embeddings, const std::vector<double>& targets, ProbeTask task,
                      const ProbeHyper& hyper, int classes) {
  const Eigen::Index n = embeddings.rows();
  if (n == 0) throw InvalidInput("probe needs training samples");
  if (static_cast<Eigen::Index>(targets.size()) != n) throw InvalidInput("one target per embedding is required");
  if (hyper.steps < 1 || !(hyper.lr > 0)) throw InvalidConfig("probe needs positive steps and lr");

  const int outputs = task == ProbeTask::kRegression ? 1 : classes;
  if (task == ProbeTask::kClassification) {
    if (classes < 2) throw InvalidInput("classification needs at least two classes");
    for (double t : targets) {
      if (t < 0 || t >= classes || t != std::floor(t)) throw InvalidInput("class label outside range");
    }
  }

  ProbeParams probe;
  probe.task = task;
  std::mt19937_64 rng(hyper.seed);
  std::normal_distribution<double> normal(0.0, 1e-3);
  probe.weight = MatrixXd::NullaryExpr(embeddings.cols(), outputs, [&]() { return normal(rng); });
  probe.bias = RowVector<double>::Zero(outputs);

  MatrixXd onehot;
  if (task == ProbeTask::kClassification) {
    onehot = MatrixXd::Zero(n, outputs);
    for (Eigen::Index i = 0; i < n; ++i) onehot(i, static_cast<Eigen::Index>(targets[i])) = 1.0;
  }
  const Vector<double> y = Eigen::Map<const Vector<double>>(targets.data(), n);

  for (int step = 0; step < hyper.steps; ++step) {
    const double lr = hyper.lr * 0.5 * (1.0 + std::cos(M_PI * step / hyper.steps));
    const MatrixXd pred = probe.predict(embeddings);
    MatrixXd dpred;
    if (task == ProbeTask::kRegression) {
      dpred = (pred.col(0) - y).unaryExpr([](double d) { return d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0); });
    } else {
      dpred = softmax_rows(pred) - onehot;
    }
    dpred /= static_cast<double>(n);
    probe.weight -= lr * (embeddings.transpose() * dpred);
    probe.bias -= lr * dpred.colwise().sum();
  }
  return probe;
}

std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw InvalidInput("pearson: size mismatch");
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0;
  double sxx = 0;
  double syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0 || syy <= 0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

std::optional<double> average_precision(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw InvalidInput("average_precision: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return !positive[a] && positive[b];
  });
  double hits = 0;
  double sum = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (!positive[order[rank]]) continue;
    hits += 1;
    sum += hits / static_cast<double>(rank + 1);
  }
  if (hits == 0) return std::nullopt;
  return sum / hits;
}

RegressionReport eval_regression(const ProbeParams& probe, const MatrixXd& embeddings,
                                 const std::vector<double>& targets) {
  if (probe.task != ProbeTask::kRegression) throw InvalidInput("not a regression probe");
  if (static_cast<Eigen::Index>(targets.size()) != embeddings.rows() || targets.empty()) {
    throw InvalidInput("one target per embedding is required");
  }
  const MatrixXd pred = probe.predict(embeddings);
  std::vector<double> predicted(targets.size());
  RegressionReport report;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    predicted[i] = pred(static_cast<Eigen::Index>(i), 0);
    report.l1 += std::abs(predicted[i] - targets[i]);
  }
  report.l1 /= static_cast<double>(targets.size());
  report.pearson_r = pearson(predicted, targets);
  return report;
}

ClassificationReport eval_classification(const ProbeParams& probe, const MatrixXd& embeddings,
                                         const std::vector<int>& labels) {
  if (probe.task != ProbeTask::kClassification) throw InvalidInput("not a classification probe");
  if (static_cast<Eigen::Index>(labels.size()) != embeddings.rows() || labels.empty()) {
    throw InvalidInput("one label per embedding is required");
  }
  const int classes = probe.outputs();
  const MatrixXd logits = probe.predict(embeddings);
  const MatrixXd p = softmax_rows(logits);
  ClassificationReport report;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) throw InvalidInput("class label outside range");
    const auto r = static_cast<Eigen::Index>(i);
    const double lse = logits.row(r).maxCoeff() +
                       std::log((logits.row(r).array() - logits.row(r).maxCoeff()).exp().sum());
    report.cross_entropy += lse - logits(r, labels[i]);
    Eigen::Index best = 0;
    logits.row(r).maxCoeff(&best);
    report.accuracy += best == labels[i] ? 1.0 : 0.0;
  }
  report.cross_entropy /= static_cast<double>(labels.size());
  report.accuracy /= static_cast<double>(labels.size());

  double sum = 0;
  int defined = 0;
  for (int c = 0; c < classes; ++c) {
    std::vector<double> scores(labels.size());
    std::vector<bool> positive(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      scores[i] = p(static_cast<Eigen::Index>(i), c);
      positive[i] = labels[i] == c;
    }
    auto ap = average_precision(scores, positive);
    report.per_class_aupr.push_back(ap);
    if (ap) {
      sum += *ap;
      ++defined;
    }
  }
  if (defined > 0) report.macro_aupr = sum / defined;
  return report;
}

}  // namespace mcfuse
