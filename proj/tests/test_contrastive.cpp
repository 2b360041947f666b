#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "mcfuse/contrastive.hpp"
#include "mcfuse/model.hpp"

namespace mcfuse {
namespace {

MatrixXd random_unit_rows(int n, int d, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  MatrixXd x = MatrixXd::NullaryExpr(n, d, [&]() { return normal(rng); });
  x.rowwise().normalize();
  return x;
}

TEST(InfoNce, TwoByTwoIdentity) {
  const MatrixXd eye = MatrixXd::Identity(2, 2);
  const auto r = info_nce_pair<double>(eye, eye, 1.0);
  ASSERT_TRUE(r);
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(r->loss, expected, 1e-15);
  EXPECT_NEAR(r->loss, 0.3133, 5e-5);
}

TEST(InfoNce, IdenticalRowsGiveLogN) {
  for (int n : {2, 5, 17}) {
    MatrixXd a(n, 3);
    a.rowwise() = RowVector<double>(RowVector<double>::Unit(3, 1));
    EXPECT_NEAR(info_nce_pair<double>(a, a, 0.07)->loss, std::log(static_cast<double>(n)), 1e-12);
  }
}

TEST(InfoNce, CommonPermutationInvariance) {
  std::mt19937_64 rng(1);
  const MatrixXd a = random_unit_rows(7, 4, rng);
  const MatrixXd b = random_unit_rows(7, 4, rng);
  std::vector<int> perm{3, 6, 0, 2, 5, 1, 4};
  MatrixXd pa(7, 4);
  MatrixXd pb(7, 4);
  for (int i = 0; i < 7; ++i) {
    pa.row(i) = a.row(perm[i]);
    pb.row(i) = b.row(perm[i]);
  }
  EXPECT_NEAR(info_nce_pair<double>(a, b, 0.07)->loss, info_nce_pair<double>(pa, pb, 0.07)->loss, 1e-12);
}

TEST(InfoNce, SkipAndContract) {
  const MatrixXd one = MatrixXd::Identity(1, 3);
  EXPECT_FALSE(info_nce_pair<double>(one, one, 0.07));
  const MatrixXd scaled = 2.0 * MatrixXd::Identity(2, 3);
  EXPECT_THROW(info_nce_pair<double>(scaled, scaled, 0.07), ContractViolation);
  const MatrixXd eye = MatrixXd::Identity(2, 3);
  EXPECT_THROW(info_nce_pair<double>(eye, eye, 0.0), InvalidConfig);
}

TEST(InfoNce, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> normal;
  Parameter<double> a{"a", MatrixXd::NullaryExpr(5, 4, [&]() { return normal(rng); }), {}};
  Parameter<double> b{"b", MatrixXd::NullaryExpr(5, 4, [&]() { return normal(rng); }), {}};
  const auto errors = testing::check_gradients({&a, &b}, [&](Tape<double>& t) {
    Var na = ad::l2_normalize_rows(t, t.leaf(a));
    Var nb = ad::l2_normalize_rows(t, t.leaf(b));
    return info_nce(t, na, nb, 0.3);
  });
  for (const auto& e : errors) EXPECT_LE(e.relative, 1e-6) << e.name;
}

TEST(InfoNce, DescentOnTwoSampleToy) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  Parameter<double> a{"a", MatrixXd::NullaryExpr(2, 3, [&]() { return normal(rng); }), {}};
  Parameter<double> b{"b", MatrixXd::NullaryExpr(2, 3, [&]() { return normal(rng); }), {}};
  auto step = [&]() {
    Tape<double> t;
    a.zero_grad();
    b.zero_grad();
    Var loss = info_nce(t, ad::l2_normalize_rows(t, t.leaf(a)), ad::l2_normalize_rows(t, t.leaf(b)), 0.5);
    const double value = t.value(loss)(0, 0);
    t.backward(loss);
    a.value -= 0.5 * a.grad;
    b.value -= 0.5 * b.grad;
    return value;
  };
  const double first = step();
  double last = first;
  for (int i = 0; i < 200; ++i) last = step();
  EXPECT_LT(last, first);
  EXPECT_LT(last, 0.5 * first);
}

std::size_t choose2(std::size_t n) { return n * (n - 1) / 2; }

TEST(Pairs, CountsByMode) {
  for (int m = 2; m <= 4; ++m) {
    const auto channels = embedding_channels(m, Mode::kMca);
    EXPECT_EQ(contrastive_pairs(channels, Mode::kMca).size(), choose2((std::size_t{1} << m) - 1));
  }
  EXPECT_EQ(contrastive_pairs(embedding_channels(4, Mode::kMca), Mode::kMca).size(), 105u);
  EXPECT_EQ(contrastive_pairs(embedding_channels(4, Mode::kZorro), Mode::kZorro).size(), 10u);
  EXPECT_EQ(contrastive_pairs(embedding_channels(4, Mode::kEao), Mode::kEao).size(), 45u);
}

TEST(Pairs, ZorroPairsAlwaysTouchAUnimodalChannel) {
  const auto channels = embedding_channels(4, Mode::kZorro);
  for (auto [a, b] : contrastive_pairs(channels, Mode::kZorro)) {
    EXPECT_TRUE(channels[a].unimodal() || channels[b].unimodal());
  }
}

EmbeddingSet random_set(int samples, Mode mode, int modalities, std::mt19937_64& rng) {
  EmbeddingSet e;
  e.channels = embedding_channels(modalities, mode);
  const int c = e.channel_count();
  e.vectors = random_unit_rows(samples * c, 4, rng).cast<float>();
  e.available = BoolArray::Constant(samples, c, true);
  return e;
}

TEST(TotalLoss, RestrictsPairsToJointlyAvailableSamples) {
  std::mt19937_64 rng(4);
  EmbeddingSet e = random_set(5, Mode::kMca, 2, rng);
  // Sample 0 carries modality 0 only: unimodal [1] is unavailable, [0,1] stays.
  e.available(0, 1) = false;
  const LossReport r = total_contrastive_loss(e, Mode::kMca, 0.07);
  ASSERT_EQ(r.pairs.size(), 3u);
  const auto count = [&](int a, int b) {
    for (const auto& p : r.pairs) {
      if (p.a == a && p.b == b) return p.count;
    }
    return -1;
  };
  EXPECT_EQ(count(0, 1), 4);
  EXPECT_EQ(count(0, 2), 5);
  EXPECT_EQ(count(1, 2), 4);
  double mean = 0;
  for (const auto& p : r.pairs) mean += p.loss / 3;
  EXPECT_NEAR(r.total, mean, 1e-12);
}

TEST(TotalLoss, SkippedPairsLeaveTheDenominator) {
  std::mt19937_64 rng(5);
  EmbeddingSet e = random_set(3, Mode::kMca, 2, rng);
  for (int s = 1; s < 3; ++s) e.available(s, 1) = false;
  const LossReport r = total_contrastive_loss(e, Mode::kMca, 0.07);
  EXPECT_EQ(r.contributing(), 1);
  EXPECT_TRUE(r.pairs[0].skipped);
  EXPECT_TRUE(r.pairs[2].skipped);
  EXPECT_NEAR(r.total, r.pairs[1].loss, 1e-15);
  const auto j = r.to_json(e.channels);
  EXPECT_TRUE(j["pairs"].contains("[0]|[0,1]"));
  EXPECT_TRUE(j["pairs"]["[0]|[1]"]["skipped"].get<bool>());
}

TEST(TotalLoss, EmptyBatchRejected) {
  EmbeddingSet e;
  e.channels = embedding_channels(2, Mode::kMca);
  e.vectors = MatrixXf(0, 4);
  e.available = BoolArray(0, 3);
  EXPECT_THROW(total_contrastive_loss(e, Mode::kMca, 0.07), InvalidInput);
}

TEST(TapeLoss, MatchesReportAndZeroesUnavailableSlots) {
  std::mt19937_64 rng(6);
  const int b = 6;
  const auto channels = embedding_channels(3, Mode::kMca);
  const int c = static_cast<int>(channels.size());
  Parameter<double> emb{"emb", random_unit_rows(b * c, 4, rng), {}};
  BoolArray available = BoolArray::Constant(b, c, true);
  available(0, 0) = false;
  available(2, 4) = false;
  available(5, 6) = false;
  Tape<double> t;
  LossReport report;
  Var loss = contrastive_loss<double>(t, t.leaf(emb), available, contrastive_pairs(channels, Mode::kMca), 0.07,
                                      &report);
  t.backward(loss);
  for (int ch = 0; ch < c; ++ch) {
    for (int s = 0; s < b; ++s) {
      if (!available(s, ch)) EXPECT_EQ(emb.grad.row(ch * b + s).cwiseAbs().maxCoeff(), 0.0);
    }
  }
  EmbeddingSet set;
  set.channels = channels;
  set.vectors = MatrixXf(b * c, 4);
  set.available = available;
  for (int s = 0; s < b; ++s) {
    for (int ch = 0; ch < c; ++ch) set.vector(s, ch) = emb.value.row(ch * b + s).cast<float>();
  }
  EXPECT_NEAR(t.value(loss)(0, 0), total_contrastive_loss(set, Mode::kMca, 0.07).total, 1e-5);
  EXPECT_NEAR(t.value(loss)(0, 0), report.total, 1e-12);
}

TEST(TapeLoss, AbsentModalityGetsNoGradient) {
  const auto schema = testing::mixed_schema(4);
  std::mt19937_64 rng(7);
  for (Mode mode : {Mode::kMca, Mode::kZorro, Mode::kEao}) {
    ModelConfig cfg;
    cfg.mode = mode;
    cfg.depth = 1;
    cfg.width = 8;
    cfg.heads = 2;
    cfg.embed_dim = 8;
    Model<double> model(cfg, schema, 1);
    std::vector<Sample> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(testing::random_sample(schema, {true, true, false, true}, rng));
    std::vector<const Sample*> ptrs;
    for (const auto& s : batch) ptrs.push_back(&s);
    Tape<double> t;
    auto out = model.forward(t, ptrs);
    LossReport report;
    Var loss = contrastive_loss<double>(t, out.embeddings, out.available, contrastive_pairs(model.channels(), mode),
                                        0.07, &report);
    model.zero_grad();
    t.backward(loss);
    for (auto* p : model.parameters()) {
      if (p->name.starts_with("modality.2.")) EXPECT_EQ(p->grad.cwiseAbs().maxCoeff(), 0.0) << p->name;
    }
    for (const auto& pair : report.pairs) {
      const bool needs_two =
          model.channels()[pair.a] == ChannelSet({2}) || model.channels()[pair.b] == ChannelSet({2});
      if (needs_two) {
        EXPECT_TRUE(pair.skipped);
        EXPECT_EQ(pair.count, 0);
      }
    }
    EXPECT_GT(report.contributing(), 0);
  }
}

}  // namespace
}  // namespace mcfuse
