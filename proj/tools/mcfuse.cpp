// Command-line experiment runner.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "mcfuse/experiment.hpp"
#include "mcfuse/io.hpp"

namespace fs = std::filesystem;
using namespace mcfuse;

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "test") return Split::kTest;
  throw InvalidConfig("split must be 'train' or 'test', got '" + text + "'");
}

void print_records(const std::vector<MetricRecord>& records) {
  for (const auto& r : records) {
    if (r.metric == "train_loss" || r.metric == "test_loss") continue;
    std::cout << r.mode << " s=" << r.sparsity << " " << r.metric << " = " << r.value << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal channel-attention contrastive experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out;
  double sparsity = 0.0;

  auto* generate = app.add_subcommand("generate-data", "Write the synthetic dataset named by a config as a manifest");
  generate->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
  generate->add_option("-o,--out", out, "output directory")->required();

  std::string manifest;
  std::uint64_t seed = 13;
  auto* sparsify = app.add_subcommand("sparsify", "Drop modalities from a manifest dataset");
  sparsify->add_option("-m,--manifest", manifest, "input manifest")->required();
  sparsify->add_option("-s,--sparsity", sparsity, "target modal sparsity in [0, 1)")->required();
  sparsify->add_option("--seed", seed, "drop seed");
  sparsify->add_option("-o,--out", out, "output directory")->required();

  auto* train_cmd = app.add_subcommand("train", "Train one model and write per-epoch checkpoints");
  train_cmd->add_option("-c,--config", config_path)->required();
  train_cmd->add_option("-s,--sparsity", sparsity, "modal sparsity applied to the data");
  train_cmd->add_option("-o,--out", out, "run directory")->required();

  std::string checkpoint;
  std::string split_name = "test";
  auto* embed = app.add_subcommand("embed", "Export per-channel embeddings for one split");
  embed->add_option("-c,--config", config_path)->required();
  embed->add_option("-k,--checkpoint", checkpoint)->required();
  embed->add_option("--split", split_name, "train or test");
  embed->add_option("-s,--sparsity", sparsity);
  embed->add_option("-o,--out", out, "embedding file")->required();

  std::string train_embeddings;
  std::string test_embeddings;
  int epoch = 0;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Compute metrics and probes from embedding files");
  evaluate_cmd->add_option("-c,--config", config_path)->required();
  evaluate_cmd->add_option("--train", train_embeddings, "train-split embedding file")->required();
  evaluate_cmd->add_option("--test", test_embeddings, "test-split embedding file")->required();
  evaluate_cmd->add_option("-s,--sparsity", sparsity);
  evaluate_cmd->add_option("--epoch", epoch, "epoch tag for the records");
  evaluate_cmd->add_option("-o,--out", out, "records file (JSON lines, appended)")->required();

  bool quiet = false;
  auto* sweep_cmd = app.add_subcommand("sweep", "Train and evaluate every (mode, sparsity) cell");
  sweep_cmd->add_option("-c,--config", config_path)->required();
  sweep_cmd->add_option("-o,--out", out)->required();
  sweep_cmd->add_flag("-q,--quiet", quiet);

  std::string records_path;
  auto* report = app.add_subcommand("report", "Write metric-vs-sparsity series from records");
  report->add_option("-c,--config", config_path)->required();
  report->add_option("-r,--records", records_path)->required();
  report->add_option("-o,--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*generate) {
      const ExperimentConfig config = ExperimentConfig::load(config_path);
      if (!config.synthetic) throw InvalidConfig("config has no synthetic data section");
      const Dataset data = synthetic_multimodal(*config.synthetic, config.data_seed);
      const fs::path path = save_manifest(data, out);
      std::cout << "wrote " << data.size() << " samples to " << path.string() << '\n';
    } else if (*sparsify) {
      const Dataset data = drop_modalities(load_manifest(manifest), sparsity, seed);
      const fs::path path = save_manifest(data, out);
      std::cout << "kept " << data.size() << " samples, measured sparsity " << measured_sparsity(data) << ", wrote "
                << path.string() << '\n';
    } else if (*train_cmd) {
      const ExperimentConfig config = ExperimentConfig::load(config_path);
      const Dataset data = prepare_dataset(config, sparsity);
      std::vector<MetricRecord> records;
      const TrainResult result =
          train(config, data, sparsity, out, [&](const MetricRecord& r) { records.push_back(r); });
      append_records(fs::path(out) / "records.jsonl", records);
      for (std::size_t e = 0; e < result.test_loss.size(); ++e) {
        std::cout << "epoch " << e << " train " << result.train_loss[e] << " test " << result.test_loss[e] << '\n';
      }
      std::cout << "selected epoch " << result.selected_epoch << ": "
                << result.checkpoints[result.selected_epoch].string() << '\n';
      std::ofstream(fs::path(out) / "selected.txt") << result.checkpoints[result.selected_epoch].string() << '\n';
    } else if (*embed) {
      const ExperimentConfig config = ExperimentConfig::load(config_path);
      const Dataset data = prepare_dataset(config, sparsity);
      Model<float> model = load_model(config, data.schema, checkpoint);
      const EmbeddingSet e = embed_split(model, data, parse_split(split_name), config.eval_batch);
      write_embeddings(out, e);
      std::cout << "wrote " << e.sample_count() << " x " << e.channel_count() << " embeddings to " << out << '\n';
    } else if (*evaluate_cmd) {
      const ExperimentConfig config = ExperimentConfig::load(config_path);
      const Dataset data = prepare_dataset(config, sparsity);
      const auto channels = embedding_channels(data.schema.size(), config.model.mode);
      const EmbeddingSet tr = read_embeddings(train_embeddings, channels);
      const EmbeddingSet te = read_embeddings(test_embeddings, channels);
      const auto records = evaluate(config, tr, te, data.subset(Split::kTrain), data.subset(Split::kTest), sparsity,
                                    epoch);
      append_records(out, records);
      print_records(records);
    } else if (*sweep_cmd) {
      const ExperimentConfig config = ExperimentConfig::load(config_path);
      const auto records = sweep(config, out, SweepOptions{!quiet});
      std::cout << records.size() << " records written to " << (fs::path(out) / "records.jsonl").string() << '\n';
    } else if (*report) {
      const ExperimentConfig config = ExperimentConfig::load(config_path);
      const SeriesReport r = write_report(read_records(records_path), config.sparsities, config.sweep_modes, out);
      std::cout << r.files.size() << " series written";
      if (!r.missing.empty()) std::cout << ", " << r.missing.size() << " cells missing (see missing.txt)";
      std::cout << '\n';
    }
  } catch (const NumericFailure& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const InvalidConfig& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const InvalidSchema& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const LoadError& e) {
    std::cerr << "load error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitOther;
  }
  return 0;
}
