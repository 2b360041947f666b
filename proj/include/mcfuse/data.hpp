#ifndef MCFUSE_DATA_HPP_
#define MCFUSE_DATA_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mcfuse/core.hpp"

namespace mcfuse {

enum class ModalityKind { kSequence, kTabular };

std::string to_string(ModalityKind kind);
ModalityKind parse_modality_kind(const std::string& text);

struct ModalitySpec {
  std::string name;
  ModalityKind kind = ModalityKind::kTabular;
  int dim = 0;     // vector size (sequence) or column count (tabular)
  int tokens = 0;  // token budget; equals dim for tabular modalities

  friend bool operator==(const ModalitySpec&, const ModalitySpec&) = default;
};

struct ModalitySchema {
  std::vector<ModalitySpec> modalities;

  int size() const { return static_cast<int>(modalities.size()); }
  std::vector<int> token_budgets() const;
  void validate() const;

  friend bool operator==(const ModalitySchema&, const ModalitySchema&) = default;
};

struct Sample {
  std::string id;
  // Sequence: [steps x dim]. Tabular: [1 x columns]. Empty optional = absent.
  std::vector<std::optional<MatrixXf>> payload;
  std::optional<double> regression;
  std::optional<int> label;

  std::vector<bool> presence() const;
  int present_count() const;
};

enum class Split { kTrain, kTest };

struct Dataset {
  ModalitySchema schema;
  std::vector<Sample> samples;
  std::vector<Split> split;  // empty until assign_split
  int class_count = 0;
  std::string provenance;

  std::size_t size() const { return samples.size(); }
  bool has_split() const { return split.size() == samples.size() && !samples.empty(); }
  Dataset subset(Split which) const;
  void validate() const;
};

// keep(i, m) == false means modality m of sample i is dropped.
BoolArray plan_drops(std::size_t samples, int modalities, double sparsity, std::uint64_t seed);
// Removes dropped payloads, then removes samples left with no modality.
Dataset apply_drops(const Dataset& dataset, const BoolArray& keep);
Dataset drop_modalities(const Dataset& dataset, double sparsity, std::uint64_t seed);

// Fraction of dropped (sample, modality) slots.
double measured_sparsity(const Dataset& dataset);
double measured_sparsity(const BoolArray& presence);

struct SyntheticModality {
  ModalitySpec spec;
  int map_id = -1;  // modalities sharing a map_id (and dim) share their projection
};

struct SyntheticConfig {
  std::vector<SyntheticModality> modalities;
  int samples = 4608;
  int latent_dim = 8;
  double noise = 0.1;
  int classes = 8;

  static SyntheticConfig desk_default();
};

Dataset synthetic_multimodal(const SyntheticConfig& config, std::uint64_t seed);

// Indices of the k highest-variance columns, variance descending, ties to the
// lower index.
std::vector<int> select_top_variance(const MatrixXd& table, int k);

// Seeded permutation of the sorted sample ids; the first floor(f * n) become test.
Dataset assign_split(const Dataset& dataset, double test_fraction, std::uint64_t seed);

// Reads a JSON manifest (format "mcfuse-manifest", version 1) plus the CSV
// payloads it references.
Dataset load_manifest(const std::filesystem::path& path);
// Writes manifest.json and one CSV per modality (plus targets.csv) into dir.
std::filesystem::path save_manifest(const Dataset& dataset, const std::filesystem::path& dir);

// Per-column standardization statistics for one tabular modality.
struct ColumnStats {
  RowVector<double> mean;
  RowVector<double> scale;  // std, floored away from zero
};
// Tabular modalities get stats from the given samples; sequence entries stay empty.
std::vector<ColumnStats> tabular_stats(const Dataset& dataset);

}  // namespace mcfuse

#endif  // MCFUSE_DATA_HPP_
