#ifndef MCFUSE_EXPERIMENT_HPP_
#define MCFUSE_EXPERIMENT_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcfuse/data.hpp"
#include "mcfuse/embedding.hpp"
#include "mcfuse/metrics.hpp"
#include "mcfuse/model.hpp"
#include "mcfuse/probe.hpp"

namespace mcfuse {

struct TrainingConfig {
  int batch_size = 32;
  double max_lr = 1e-3;
  int warmup_steps = 100;
  int epochs = 20;
  std::uint64_t seed = 1;
};

struct ExperimentConfig {
  ModelConfig model;
  TrainingConfig training;
  std::optional<SyntheticConfig> synthetic;
  std::uint64_t data_seed = 7;
  std::string manifest;  // used when synthetic is empty
  std::vector<double> sparsities{0.0, 0.2, 0.4, 0.6, 0.8};
  std::vector<Mode> sweep_modes{Mode::kMca, Mode::kZorro, Mode::kEao};
  double test_fraction = 0.1;
  std::uint64_t split_seed = 11;
  std::uint64_t sparsity_seed = 13;
  ProbeHyper probe;
  std::string probe_channel = "fusion";  // or a channel label such as "[0]"
  int eval_batch = 64;

  // Optimizer-schedule values used for full-scale runs: batch 32, max LR
  // 1e-4, 2000 warmup steps.
  static ExperimentConfig full_scale();
  static ExperimentConfig desk_scale();

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  void validate() const;
};

// Differences between two configs in the fields a checkpoint depends on
// (mode, model hyperparameters, modality schema), as "field: a vs b" lines.
std::vector<std::string> checkpoint_mismatches(const nlohmann::json& checkpoint_config,
                                               const nlohmann::json& config);

// Source data with split tags and the requested sparsity applied.
Dataset prepare_dataset(const ExperimentConfig& config, double sparsity);

// Linear warmup to max_lr, then cosine decay reaching zero at total_steps.
double learning_rate(const TrainingConfig& training, long step, long total_steps);

// Epoch with the lowest test loss; ties resolve to the earliest.
int select_epoch(const std::vector<double>& test_losses);

template <typename Scalar>
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Parameter<Scalar>*>& params, double lr) {
    if (first_.empty()) {
      for (auto* p : params) {
        first_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
        second_.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter<Scalar>& p = *params[i];
      if (p.grad.size() == 0) continue;
      first_[i] = Scalar(beta1_) * first_[i] + Scalar(1 - beta1_) * p.grad;
      second_[i] = Scalar(beta2_) * second_[i] + Scalar(1 - beta2_) * p.grad.cwiseProduct(p.grad);
      p.value.array() -= Scalar(lr / c1) * first_[i].array() /
                         ((second_[i].array() / Scalar(c2)).sqrt() + Scalar(eps_));
    }
  }

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Matrix<Scalar>> first_, second_;
};

struct TrainResult {
  std::vector<double> train_loss;  // index = epoch; epoch 0 is initialization (NaN)
  std::vector<double> test_loss;
  int selected_epoch = 0;
  std::vector<std::filesystem::path> checkpoints;  // index = epoch
  double seconds = 0;
};

using RecordSink = std::function<void(const MetricRecord&)>;

std::string run_id(const ExperimentConfig& config, double sparsity);

// Trains one model on the prepared dataset and writes a checkpoint per epoch
// to out_dir (epoch_000.mfck is the initialization). Loss records go to sink.
TrainResult train(const ExperimentConfig& config, const Dataset& dataset, double sparsity,
                  const std::filesystem::path& out_dir, const RecordSink& sink = {});

// Mean in-batch contrastive loss over fixed-order batches.
double mean_batch_loss(Model<float>& model, const std::vector<const Sample*>& samples, int batch_size);

Model<float> load_model(const ExperimentConfig& config, const ModalitySchema& schema,
                        const std::filesystem::path& checkpoint);

EmbeddingSet embed_split(Model<float>& model, const Dataset& dataset, Split split, int batch_size);

// Index of the all-modalities channel, or -1 for EAO (fusion is computed).
int full_fusion_channel(const EmbeddingSet& embeddings);

// Single-channel view used as probe input: fusion_view for "fusion",
// otherwise the channel whose label matches.
EmbeddingSet probe_view(const EmbeddingSet& embeddings, Mode mode, const std::string& channel);

// Per-sample fusion embedding used for cross-mode comparison: the
// all-modalities channel for MCA/Zorro, the renormalized mean of available
// subset embeddings for EAO.
EmbeddingSet fusion_view(const EmbeddingSet& embeddings, Mode mode);

std::vector<MetricRecord> evaluate(const ExperimentConfig& config, const EmbeddingSet& train_embeddings,
                                   const EmbeddingSet& test_embeddings, const Dataset& train_data,
                                   const Dataset& test_data, double sparsity, int epoch);

struct SeriesReport {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> missing;  // "metric/mode@sparsity"
};

// One CSV series per (metric, mode) over the configured sparsities, from
// test-split records.
SeriesReport write_report(const std::vector<MetricRecord>& records, const std::vector<double>& sparsities,
                          const std::vector<Mode>& modes, const std::filesystem::path& out_dir);

std::vector<MetricRecord> read_records(const std::filesystem::path& path);
void append_records(const std::filesystem::path& path, const std::vector<MetricRecord>& records);

struct SweepOptions {
  bool verbose = false;
};

// Trains and evaluates every (mode, sparsity) cell, writing records.jsonl
// and the series report under out_dir.
std::vector<MetricRecord> sweep(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                                const SweepOptions& options = {});

// Train, select the best epoch, embed both splits and evaluate one cell.
std::vector<MetricRecord> run_cell(const ExperimentConfig& config, double sparsity,
                                   const std::filesystem::path& out_dir, TrainResult* result = nullptr);

}  // namespace mcfuse

#endif  // MCFUSE_EXPERIMENT_HPP_
