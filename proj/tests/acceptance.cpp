// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero
// when any gated criterion fails; the sparsity trend is reported only.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "mcfuse/contrastive.hpp"
#include "mcfuse/experiment.hpp"
#include "mcfuse/metrics.hpp"
#include "mcfuse/model.hpp"

namespace fs = std::filesystem;
using namespace mcfuse;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
  bool gated = true;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream out;
  out << std::setprecision(precision) << v;
  return out.str();
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::vector<const Sample*> pointers(const std::vector<Sample>& samples) {
  std::vector<const Sample*> out;
  for (const auto& s : samples) out.push_back(&s);
  return out;
}

ModalitySchema desk_schema() {
  ModalitySchema schema;
  for (const auto& m : SyntheticConfig::desk_default().modalities) schema.modalities.push_back(m.spec);
  return schema;
}

// Random presence with at least one modality present and one absent.
std::vector<bool> incomplete_presence(int modalities, std::mt19937_64& rng) {
  for (;;) {
    std::vector<bool> p(static_cast<std::size_t>(modalities));
    int present = 0;
    for (int m = 0; m < modalities; ++m) {
      p[m] = rng() % 2 == 0;
      present += p[m] ? 1 : 0;
    }
    if (present >= 1 && present < modalities) return p;
  }
}

// Synthetic samples with sequence lengths shortened at random so padded
// tails occur inside the token budget.
std::vector<Sample> varied_samples(int count, std::uint64_t seed) {
  SyntheticConfig cfg = SyntheticConfig::desk_default();
  cfg.samples = count;
  Dataset d = synthetic_multimodal(cfg, seed);
  std::mt19937_64 rng(seed + 1);
  for (auto& s : d.samples) {
    for (int m = 0; m < d.schema.size(); ++m) {
      if (d.schema.modalities[m].kind != ModalityKind::kSequence) continue;
      const int keep = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(s.payload[m]->rows()));
      s.payload[m] = MatrixXf(s.payload[m]->topRows(keep));
    }
  }
  return d.samples;
}

// The channel rule restated over raw token ranges: a modality token sees its
// own block; a fusion token sees its own block and every member modality.
bool rule_allows(const TokenLayout& layout, int q, int k) {
  auto find = [](const std::vector<Block>& blocks, int t) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      if (t >= blocks[i].offset && t < blocks[i].offset + blocks[i].length) return static_cast<int>(i);
    }
    return -1;
  };
  const int qm = find(layout.modality_blocks, q);
  const int km = find(layout.modality_blocks, k);
  const int qf = find(layout.fusion_blocks, q);
  const int kf = find(layout.fusion_blocks, k);
  if (qm >= 0) return qm == km;
  if (km >= 0) return layout.fusion_channels[qf].contains(km);
  return qf == kf;
}

Outcome mask_structure() {
  const auto start = std::chrono::steady_clock::now();
  const TokenLayout full = build_token_layout(desk_schema().token_budgets(), 8, Mode::kMca);
  const bool counts = full.fusion_channels.size() == 11 && full.fusion_token_count() == 88;
  const TokenLayout small = build_token_layout({2, 3, 1, 2}, 2, Mode::kMca);
  const AttentionMask mask = build_attention_mask(small, Mode::kMca);
  long mismatches = 0;
  for (int q = 0; q < small.total_tokens; ++q) {
    for (int k = 0; k < small.total_tokens; ++k) mismatches += mask(q, k) != rule_allows(small, q, k) ? 1 : 0;
  }
  const double elapsed = seconds_since(start);
  return {counts && mismatches == 0 && elapsed < 1.0,
          std::to_string(full.fusion_channels.size()) + " channels, " + std::to_string(full.fusion_token_count()) +
              " fusion tokens, " + std::to_string(mismatches) + " rule mismatches over " +
              std::to_string(small.total_tokens * small.total_tokens) + " pairs, " + fmt(elapsed, 2) + " s"};
}

Outcome padding_invariance() {
  const auto start = std::chrono::steady_clock::now();
  const auto schema = desk_schema();
  std::vector<Sample> samples = varied_samples(100, 21);
  std::mt19937_64 rng(22);
  for (auto& s : samples) {
    const auto presence = incomplete_presence(schema.size(), rng);
    for (int m = 0; m < schema.size(); ++m) {
      if (!presence[m]) s.payload[m].reset();
    }
  }
  double worst = 0;
  for (Mode mode : {Mode::kMca, Mode::kZorro, Mode::kEao}) {
    ModelConfig cfg = ModelConfig::desk_scale();
    cfg.mode = mode;
    Model<float> model(cfg, schema, 23);
    Tape<float> t;
    const auto ptrs = pointers(samples);
    auto padded = model.forward(t, ptrs);
    const MatrixXf& a = t.value(padded.embeddings);
    const int b = static_cast<int>(samples.size());
    for (int i = 0; i < b; ++i) {
      Tape<float> tc;
      const Sample* one[] = {&samples[i]};
      auto compact = model.forward(tc, std::span<const Sample* const>(one, 1), true);
      const MatrixXf& c = tc.value(compact.embeddings);
      for (int ch = 0; ch < padded.available.cols(); ++ch) {
        if (padded.available(i, ch) != compact.available(0, ch)) return {false, "availability differs"};
        if (!compact.available(0, ch)) continue;
        worst = std::max(worst, static_cast<double>((a.row(ch * b + i) - c.row(ch)).cwiseAbs().maxCoeff()));
      }
    }
  }
  const double elapsed = seconds_since(start);
  return {worst <= 1e-5 && elapsed < 60,
          "max |padded - truncated| = " + fmt(worst, 3) + " over 100 samples x 3 modes, " + fmt(elapsed, 2) + " s"};
}

Outcome channel_isolation() {
  const auto schema = desk_schema();
  Model<float> model(ModelConfig::desk_scale(), schema, 31);
  std::mt19937_64 rng(32);
  std::normal_distribution<float> normal;
  double worst = 0;
  long compared = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::vector<Sample> batch = varied_samples(4, 100 + trial);
    const int m = static_cast<int>(rng() % static_cast<std::uint64_t>(schema.size()));
    std::vector<Sample> perturbed = batch;
    for (auto& s : perturbed) s.payload[m]->array() += normal(rng);
    Tape<float> t1;
    Tape<float> t2;
    auto before = model.forward(t1, pointers(batch));
    auto after = model.forward(t2, pointers(perturbed));
    const Eigen::Index b = static_cast<Eigen::Index>(batch.size());
    for (std::size_t c = 0; c < model.channels().size(); ++c) {
      if (model.channels()[c].contains(m)) continue;
      const auto r = static_cast<Eigen::Index>(c) * b;
      const MatrixXf diff = t1.value(before.embeddings).middleRows(r, b) - t2.value(after.embeddings).middleRows(r, b);
      worst = std::max(worst, static_cast<double>(diff.cwiseAbs().maxCoeff()));
      ++compared;
    }
  }
  return {worst <= 1e-6, "max change on channels excluding the perturbed modality = " + fmt(worst, 3) + " (" +
                             std::to_string(compared) + " channel comparisons, 50 trials)"};
}

Outcome gradient_check() {
  const auto start = std::chrono::steady_clock::now();
  ModalitySchema schema;
  schema.modalities = {{"seq", ModalityKind::kSequence, 3, 3}, {"tab", ModalityKind::kTabular, 2, 2}};
  std::mt19937_64 rng(41);
  std::normal_distribution<float> normal;
  auto sample = [&](bool a, bool b) {
    Sample s;
    s.payload.emplace_back();
    s.payload.emplace_back();
    if (a) s.payload[0] = MatrixXf::NullaryExpr(2, 3, [&]() { return normal(rng); });
    if (b) s.payload[1] = MatrixXf::NullaryExpr(1, 2, [&]() { return normal(rng); });
    return s;
  };
  double worst = 0;
  std::string worst_name;
  bool saw_fusion = false;
  bool saw_queries = false;
  bool key_bias_zero = true;
  for (Mode mode : {Mode::kMca, Mode::kZorro, Mode::kEao}) {
    ModelConfig cfg;
    cfg.mode = mode;
    cfg.depth = 1;
    cfg.width = 8;
    cfg.heads = 2;
    cfg.ff_multiplier = 2;
    cfg.tokens_per_channel = 2;
    cfg.embed_dim = 6;
    Model<double> model(cfg, schema, 42);
    const std::vector<Sample> batch{sample(true, true), sample(true, false), sample(false, true)};
    const auto errors = testing::check_gradients(model.parameters(), [&](Tape<double>& t) {
      return model.forward(t, pointers(batch)).embeddings;
    });
    for (const auto& e : errors) {
      if (e.relative > worst) {
        worst = e.relative;
        worst_name = to_string(mode) + ":" + e.name;
      }
      saw_fusion = saw_fusion || e.name == "fusion_tokens";
      saw_queries = saw_queries || e.name == "pooling.queries";
      if (e.name.ends_with("attn.key.bias")) key_bias_zero = key_bias_zero && e.analytic_norm < 1e-12;
    }
  }
  const double elapsed = seconds_since(start);
  return {worst <= 1e-3 && saw_fusion && saw_queries && key_bias_zero && elapsed < 60,
          "worst block relative error " + fmt(worst, 3) + " (" + worst_name + "), fusion tokens and pooling " +
              "queries checked, " + fmt(elapsed, 2) + " s"};
}

Outcome loss_masking() {
  const auto schema = desk_schema();
  const int absent = 2;
  std::vector<Sample> batch = varied_samples(6, 51);
  for (auto& s : batch) s.payload[absent].reset();
  bool zero_grads = true;
  bool pairs_skipped = true;
  for (Mode mode : {Mode::kMca, Mode::kZorro, Mode::kEao}) {
    ModelConfig cfg = ModelConfig::desk_scale();
    cfg.mode = mode;
    cfg.depth = 1;
    Model<double> model(cfg, schema, 52);
    Tape<double> t;
    auto out = model.forward(t, pointers(batch));
    LossReport report;
    Var loss = contrastive_loss<double>(t, out.embeddings, out.available, contrastive_pairs(model.channels(), mode),
                                        0.07, &report);
    model.zero_grad();
    t.backward(loss);
    const std::string prefix = "modality." + std::to_string(absent) + ".";
    for (auto* p : model.parameters()) {
      if (p->name.starts_with(prefix) && p->grad.size() > 0 && p->grad.cwiseAbs().maxCoeff() != 0.0) {
        zero_grads = false;
      }
    }
    const ChannelSet lone({absent});
    for (const auto& pair : report.pairs) {
      if (model.channels()[pair.a] == lone || model.channels()[pair.b] == lone) {
        pairs_skipped = pairs_skipped && pair.skipped && pair.count == 0;
      }
    }
  }
  // Enumerated pair counts against closed forms: all channel pairs for MCA
  // (15 channels) and EAO (10 subsets); Zorro pairs touch a unimodal channel.
  const auto mca = contrastive_pairs(embedding_channels(4, Mode::kMca), Mode::kMca).size();
  const auto zorro = contrastive_pairs(embedding_channels(4, Mode::kZorro), Mode::kZorro).size();
  const auto eao = contrastive_pairs(embedding_channels(4, Mode::kEao), Mode::kEao).size();
  const bool counts = mca == 15 * 14 / 2 && mca == 105 && zorro == 10 && eao == 10 * 9 / 2 && eao == 45;
  return {zero_grads && pairs_skipped && counts,
          std::string("absent-modality encoder gradients ") + (zero_grads ? "exactly zero" : "NONZERO") +
              ", pairs needing it " + (pairs_skipped ? "skipped" : "NOT skipped") + "; pair counts MCA " +
              std::to_string(mca) + ", Zorro " + std::to_string(zorro) + ", EAO " + std::to_string(eao)};
}

Outcome eao_structure() {
  const auto schema = desk_schema();
  ModelConfig cfg = ModelConfig::desk_scale();
  cfg.mode = Mode::kEao;
  Model<float> model(cfg, schema, 61);
  const std::vector<Sample> batch = varied_samples(3, 62);
  bool passes = true;
  for (const auto& s : batch) {
    Tape<float> t;
    const Sample* one[] = {&s};
    passes = passes && model.forward(t, std::span<const Sample* const>(one, 1)).forward_passes == 4 + 6;
  }
  const MatrixXd basis = MatrixXd::Identity(3, 3);
  const auto all = eao_inference_fusion(basis, {true, true, true});
  const auto two = eao_inference_fusion(basis, {true, false, true});
  MatrixXd mixed(3, 3);
  mixed << 0.6, 0.8, 0, 0, 0.6, 0.8, 1, 0, 0;
  const auto third = eao_inference_fusion(mixed, {true, true, false});
  const double s3 = 1 / std::sqrt(3.0);
  const double s2 = 1 / std::sqrt(2.0);
  // (0.6, 1.4, 0.8) / |(0.6, 1.4, 0.8)|
  const double n = std::sqrt(0.36 + 1.96 + 0.64);
  const bool fusion = all && two && third && ((*all).array() - s3).abs().maxCoeff() < 1e-15 &&
                      std::abs((*two)(0) - s2) < 1e-15 && (*two)(1) == 0 && std::abs((*two)(2) - s2) < 1e-15 &&
                      std::abs((*third)(0) - 0.6 / n) < 1e-15 && std::abs((*third)(1) - 1.4 / n) < 1e-15 &&
                      std::abs((*third)(2) - 0.8 / n) < 1e-15;
  return {passes && fusion, std::string("10 forward passes per fully present sample: ") + (passes ? "yes" : "no") +
                                "; renormalized-mean fusion hand cases: " + (fusion ? "match" : "MISMATCH")};
}

Outcome parameter_parity() {
  const auto schema = desk_schema();
  ModelConfig cfg = ModelConfig::desk_scale();
  Model<float> mca(cfg, schema, 1);
  cfg.mode = Mode::kZorro;
  Model<float> zorro(cfg, schema, 1);
  const double a = static_cast<double>(parameter_count(mca));
  const double b = static_cast<double>(parameter_count(zorro));
  const double rel = std::abs(a - b) / std::max(a, b);
  return {rel < 0.01, "MCA " + fmt(a, 10) + ", Zorro " + fmt(b, 10) + ", relative difference " + fmt(100 * rel, 3) +
                          "%"};
}

Outcome sparsity_procedure() {
  const int n = 10000;
  const int m = 4;
  std::ostringstream detail;
  bool ok = true;
  for (double s : {0.2, 0.4, 0.6, 0.8}) {
    const BoolArray keep = plan_drops(n, m, s, 71);
    const double measured = measured_sparsity(keep);
    int lost = 0;
    for (int i = 0; i < n; ++i) lost += keep.row(i).any() ? 0 : 1;
    const double p = std::pow(s, m);
    const double sigma = std::sqrt(p * (1 - p) / n);
    const double frac = static_cast<double>(lost) / n;
    const bool cell = std::abs(measured - s) <= 0.02 && std::abs(frac - p) <= 3 * sigma;
    ok = ok && cell;
    detail << "S=" << s << ": measured " << fmt(measured) << ", lost " << fmt(frac) << " vs " << fmt(p) << (s < 0.8 ? "; " : "");
  }
  return {ok, detail.str()};
}

MatrixXd random_unit_rows(int n, int d, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  MatrixXd x = MatrixXd::NullaryExpr(n, d, [&]() { return normal(rng); });
  x.rowwise().normalize();
  return x;
}

Outcome metric_oracles() {
  std::mt19937_64 rng(81);
  bool ranks_ok = true;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 50);
    const MatrixXd q = random_unit_rows(n, 6, rng);
    MatrixXd k = random_unit_rows(n, 6, rng);
    if (trial % 4 == 0 && n > 1) k.row(n - 1) = k.row(0);
    const RankTable t = rank_matrix(q, k);
    for (int i = 0; i < n; ++i) {
      std::vector<std::pair<double, int>> scored;
      for (int j = 0; j < n; ++j) scored.emplace_back(-q.row(i).dot(k.row(j)), j == i ? 1 : 0);
      std::sort(scored.begin(), scored.end());
      int rank = 0;
      while (scored[rank].second != 1) ++rank;
      ranks_ok = ranks_ok && t.ranks[i] == rank + 1;
    }
  }
  const MatrixXd x = random_unit_rows(10000, 8, rng);
  std::mt19937_64 oracle_rng(82);
  double sum = 0;
  const int draws = 1000000;
  for (int i = 0; i < draws; ++i) {
    const MatrixXd p = random_unit_rows(2, 8, oracle_rng);
    sum += std::exp(-2 * (p.row(0) - p.row(1)).squaredNorm());
  }
  const double u = uniformity(x);
  const double rel = std::abs(u / (sum / draws) - 1);
  const auto ap = average_precision({0.9, 0.8, 0.4, 0.2}, {true, false, true, false});
  const bool ap_ok = ap && *ap == (1.0 + 2.0 / 3.0) / 2.0;
  MatrixXd y = random_unit_rows(5, 4, rng);
  MatrixXd same(3, 4);
  same.rowwise() = y.row(0);
  MatrixXd antipodal(2, 4);
  antipodal << y.row(1), -y.row(1);
  const bool trivial = std::abs(alignment(y, y)) <= 1e-9 && std::abs(alignment(y, -y) - 4) <= 1e-9 &&
                       std::abs(uniformity(same) - 1) <= 1e-9 && std::abs(uniformity(antipodal) - std::exp(-8.0)) <= 1e-9;
  return {ranks_ok && rel < 0.01 && ap_ok && trivial,
          std::string("ranks vs brute force: ") + (ranks_ok ? "equal" : "DIFFER") + " (200 instances); uniformity " +
              "vs Monte Carlo: " + fmt(100 * rel, 3) + "% off; AP hand case " + (ap ? fmt(*ap, 6) : "undefined") +
              "; trivial cases " + (trivial ? "exact" : "WRONG")};
}

std::map<std::string, double> test_metrics(const std::vector<MetricRecord>& records) {
  std::map<std::string, double> out;
  for (const auto& r : records) {
    if (r.split == "test") out[r.metric] = r.value;
  }
  return out;
}

Outcome learning_signal(const fs::path& out_dir) {
  ExperimentConfig config = ExperimentConfig::desk_scale();
  config.synthetic->samples = 4608;
  config.test_fraction = 512.5 / 4608.0;  // floor(f * 4608) = 512 test samples
  config.training.epochs = 20;
  std::ostringstream detail;
  bool ok = true;
  std::set<std::string> grid;
  for (Mode mode : {Mode::kMca, Mode::kZorro, Mode::kEao}) {
    config.model.mode = mode;
    const auto start = std::chrono::steady_clock::now();
    TrainResult result;
    const auto records = run_cell(config, 0.0, out_dir / to_string(mode), &result);
    append_records(out_dir / "records.jsonl", records);
    const double elapsed = seconds_since(start);
    const auto metrics = test_metrics(records);
    const double initial = result.test_loss.front();
    const double best = result.test_loss.at(result.selected_epoch);
    const double reduction = 1 - best / initial;
    const double r1 = metrics.at("recall_at_1_mean");
    const double samples = metrics.at("test_samples");
    detail << to_string(mode) << ": test loss " << fmt(initial) << " -> " << fmt(best) << " (epoch "
           << result.selected_epoch << ", -" << fmt(100 * reduction, 3) << "%), R@1 " << fmt(r1) << " vs chance "
           << fmt(1 / samples) << ", " << fmt(elapsed, 3) << " s; ";
    std::set<std::string> names;
    for (const auto& [name, value] : metrics) names.insert(name);
    if (mode == Mode::kMca) {
      ok = ok && samples == 512 && reduction >= 0.30 && r1 >= 10.0 / samples && elapsed < 600;
      grid = names;
    } else {
      ok = ok && names == grid;
    }
  }
  detail << "metric grid of " << grid.size() << " series per mode";
  return {ok, detail.str()};
}

Outcome sparsity_trend(const fs::path& out_dir) {
  ExperimentConfig config = ExperimentConfig::desk_scale();
  config.synthetic->samples = 1152;
  config.test_fraction = 0.2;
  config.training.epochs = 6;
  const auto records = sweep(config, out_dir);
  std::map<std::string, std::map<double, double>> series;
  for (const auto& r : records) {
    if (r.split == "test" && r.metric == "recall_at_1_mean") series[r.mode][r.sparsity] = r.value;
  }
  std::ostringstream detail;
  bool ok = true;
  for (Mode mode : config.sweep_modes) {
    const auto& s = series[to_string(mode)];
    std::vector<double> values;
    for (double x : config.sparsities) values.push_back(s.at(x));
    // Inversions among consecutive levels from 0.4 upward.
    int inversions = 0;
    for (std::size_t i = 2; i + 1 < values.size(); ++i) inversions += values[i + 1] > values[i] ? 1 : 0;
    const bool shape = inversions <= 1 && values.back() < values[2];
    ok = ok && shape;
    detail << to_string(mode) << " R@1";
    for (double v : values) detail << " " << fmt(v, 3);
    detail << (shape ? "; " : " (trend not reproduced); ");
  }
  detail << "series in " << (out_dir / "series").string();
  return {ok, detail.str(), false};
}

Outcome determinism(const fs::path& out_dir) {
  ExperimentConfig config = ExperimentConfig::desk_scale();
  config.synthetic->samples = 384;
  config.training.epochs = 2;
  auto run = [&](const std::string& name) {
    const fs::path dir = out_dir / name;
    fs::remove_all(dir);
    const auto records = run_cell(config, 0.4, dir);
    append_records(dir / "records.jsonl", records);
    std::ifstream in(dir / "records.jsonl", std::ios::binary);
    std::stringstream bytes;
    bytes << in.rdbuf();
    return bytes.str();
  };
  const std::string a = run("run_a");
  const std::string b = run("run_b");
  return {!a.empty() && a == b, std::to_string(a.size()) + " bytes of records, " +
                                    (a == b ? "byte-identical" : "DIFFERENT")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks for the multimodal fusion toolkit"};
  std::string out = "acceptance_out";
  std::vector<int> only;
  app.add_option("-o,--out", out, "directory for run artifacts");
  app.add_option("--only", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);
  const fs::path out_dir(out);
  fs::create_directories(out_dir);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"mask structure", mask_structure},
      {"padding invariance", padding_invariance},
      {"channel isolation", channel_isolation},
      {"gradient check", gradient_check},
      {"loss masking", loss_masking},
      {"EAO structure", eao_structure},
      {"parameter parity", parameter_parity},
      {"sparsity procedure", sparsity_procedure},
      {"metric oracles", metric_oracles},
      {"end-to-end learning signal", [&] { return learning_signal(out_dir / "learning"); }},
      {"sparsity trend (soft)", [&] { return sparsity_trend(out_dir / "sweep"); }},
      {"determinism", [&] { return determinism(out_dir / "determinism"); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), number) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    if (!o.pass && o.gated) ++failures;
    std::cout << "criterion " << std::setw(2) << number << ": " << (o.pass ? "PASS" : "FAIL")
              << (o.gated ? "" : " (reported, not gated)") << "  " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
