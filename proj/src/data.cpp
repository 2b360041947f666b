#include "mcfuse/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace mcfuse {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ModalityKind kind) {
  return kind == ModalityKind::kSequence ? "sequence" : "tabular";
}

ModalityKind parse_modality_kind(const std::string& text) {
  if (text == "sequence") return ModalityKind::kSequence;
  if (text == "tabular") return ModalityKind::kTabular;
  throw InvalidSchema("unknown modality kind '" + text + "'");
}

std::vector<int> ModalitySchema::token_budgets() const {
  std::vector<int> out;
  for (const auto& m : modalities) out.push_back(m.tokens);
  return out;
}

void ModalitySchema::validate() const {
  if (modalities.size() < 2) throw InvalidSchema("at least two modalities are required");
  std::set<std::string> names;
  for (const auto& m : modalities) {
    if (m.dim < 1) throw InvalidSchema("modality '" + m.name + "' has no dimensions");
    if (m.tokens < 1) throw InvalidSchema("modality '" + m.name + "' has a zero token budget");
    if (m.kind == ModalityKind::kTabular && m.tokens != m.dim) {
      throw InvalidSchema("tabular modality '" + m.name + "' must have one token per column");
    }
    if (!names.insert(m.name).second) throw InvalidSchema("duplicate modality name '" + m.name + "'");
  }
}

std::vector<bool> Sample::presence() const {
  std::vector<bool> out;
  out.reserve(payload.size());
  for (const auto& p : payload) out.push_back(p.has_value());
  return out;
}

int Sample::present_count() const {
  int n = 0;
  for (const auto& p : payload) n += p.has_value() ? 1 : 0;
  return n;
}

Dataset Dataset::subset(Split which) const {
  if (!has_split()) throw InvalidInput("dataset has no split assignment");
  Dataset out;
  out.schema = schema;
  out.class_count = class_count;
  out.provenance = provenance;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (split[i] == which) {
      out.samples.push_back(samples[i]);
      out.split.push_back(which);
    }
  }
  return out;
}

void Dataset::validate() const {
  schema.validate();
  for (const auto& s : samples) {
    if (static_cast<int>(s.payload.size()) != schema.size()) {
      throw ShapeError("sample '" + s.id + "' does not match the schema modality count");
    }
    if (s.present_count() == 0) throw InvalidInput("sample '" + s.id + "' has no modality");
    for (int m = 0; m < schema.size(); ++m) {
      if (!s.payload[m]) continue;
      const auto& spec = schema.modalities[m];
      const MatrixXf& p = *s.payload[m];
      if (p.cols() != spec.dim) throw ShapeError("sample '" + s.id + "' modality '" + spec.name + "' has wrong width");
      if (spec.kind == ModalityKind::kTabular && p.rows() != 1) {
        throw ShapeError("tabular payload must be a single row");
      }
      if (spec.kind == ModalityKind::kSequence && p.rows() < 1) {
        throw ShapeError("sequence payload must have at least one step");
      }
    }
  }
  if (!split.empty() && split.size() != samples.size()) throw ShapeError("split tags do not match samples");
}

BoolArray plan_drops(std::size_t samples, int modalities, double sparsity, std::uint64_t seed) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw InvalidConfig("sparsity must lie in [0, 1)");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  BoolArray keep(static_cast<Eigen::Index>(samples), modalities);
  for (std::size_t i = 0; i < samples; ++i) {
    for (int m = 0; m < modalities; ++m) keep(static_cast<Eigen::Index>(i), m) = uniform(rng) >= sparsity;
  }
  return keep;
}

Dataset apply_drops(const Dataset& dataset, const BoolArray& keep) {
  if (keep.rows() != static_cast<Eigen::Index>(dataset.size()) || keep.cols() != dataset.schema.size()) {
    throw ShapeError("drop plan does not match dataset");
  }
  Dataset out;
  out.schema = dataset.schema;
  out.class_count = dataset.class_count;
  out.provenance = dataset.provenance;
  const bool tagged = dataset.has_split();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    Sample s = dataset.samples[i];
    for (int m = 0; m < dataset.schema.size(); ++m) {
      if (!keep(static_cast<Eigen::Index>(i), m)) s.payload[m].reset();
    }
    if (s.present_count() == 0) continue;
    out.samples.push_back(std::move(s));
    if (tagged) out.split.push_back(dataset.split[i]);
  }
  return out;
}

Dataset drop_modalities(const Dataset& dataset, double sparsity, std::uint64_t seed) {
  for (const auto& s : dataset.samples) {
    if (s.present_count() != dataset.schema.size()) {
      throw InvalidInput("drop_modalities expects a fully modal dataset");
    }
  }
  return apply_drops(dataset, plan_drops(dataset.size(), dataset.schema.size(), sparsity, seed));
}

double measured_sparsity(const BoolArray& presence) {
  if (presence.size() == 0) throw InvalidInput("measured_sparsity of an empty dataset");
  double present = 0.0;
  for (Eigen::Index i = 0; i < presence.rows(); ++i) {
    present += static_cast<double>(presence.row(i).count()) / static_cast<double>(presence.cols());
  }
  return 1.0 - present / static_cast<double>(presence.rows());
}

double measured_sparsity(const Dataset& dataset) {
  if (dataset.size() == 0) throw InvalidInput("measured_sparsity of an empty dataset");
  BoolArray presence(static_cast<Eigen::Index>(dataset.size()), dataset.schema.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto bits = dataset.samples[i].presence();
    for (int m = 0; m < dataset.schema.size(); ++m) presence(static_cast<Eigen::Index>(i), m) = bits[m];
  }
  return measured_sparsity(presence);
}

SyntheticConfig SyntheticConfig::desk_default() {
  SyntheticConfig config;
  config.modalities = {
      {{"seq_a", ModalityKind::kSequence, 12, 4}, -1},
      {{"seq_b", ModalityKind::kSequence, 16, 4}, -1},
      {{"tab_a", ModalityKind::kTabular, 6, 6}, -1},
      {{"tab_b", ModalityKind::kTabular, 8, 8}, -1},
  };
  return config;
}

Dataset synthetic_multimodal(const SyntheticConfig& config, std::uint64_t seed) {
  Dataset out;
  for (const auto& m : config.modalities) out.schema.modalities.push_back(m.spec);
  out.schema.validate();
  if (config.latent_dim < 1 || config.samples < 1 || config.classes < 2 || config.noise < 0) {
    throw InvalidConfig("invalid synthetic dataset configuration");
  }
  out.class_count = config.classes;
  out.provenance = "synthetic:seed=" + std::to_string(seed);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int latent = config.latent_dim;
  auto random_matrix = [&](int rows, int cols, double stddev) {
    MatrixXd a(rows, cols);
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) a(i, j) = stddev * normal(rng);
    }
    return a;
  };

  std::map<int, MatrixXd> shared_maps;
  std::vector<MatrixXd> maps;
  for (std::size_t m = 0; m < config.modalities.size(); ++m) {
    const auto& modality = config.modalities[m];
    const int map_id = modality.map_id >= 0 ? modality.map_id : 1000 + static_cast<int>(m);
    auto it = shared_maps.find(map_id);
    if (it == shared_maps.end()) {
      it = shared_maps.emplace(map_id, random_matrix(modality.spec.dim, latent, 1.0 / std::sqrt(latent))).first;
    }
    if (it->second.rows() != modality.spec.dim) throw InvalidConfig("shared map requires equal dims");
    maps.push_back(it->second);
  }
  const MatrixXd readout = random_matrix(1, latent, 1.0);
  const MatrixXd classifier = random_matrix(config.classes, latent, 1.0);

  std::vector<double> raw_targets;
  for (int i = 0; i < config.samples; ++i) {
    Vector<double> z(latent);
    for (int j = 0; j < latent; ++j) z(j) = normal(rng);
    Sample s;
    s.id = "s" + std::to_string(i);
    for (std::size_t m = 0; m < config.modalities.size(); ++m) {
      const ModalitySpec& spec = config.modalities[m].spec;
      const Vector<double> clean = maps[m] * z;
      const int steps = spec.kind == ModalityKind::kSequence ? spec.tokens : 1;
      MatrixXf payload(steps, spec.dim);
      for (int t = 0; t < steps; ++t) {
        for (int d = 0; d < spec.dim; ++d) {
          payload(t, d) = static_cast<float>(clean(d) + config.noise * normal(rng));
        }
      }
      s.payload.emplace_back(std::move(payload));
    }
    raw_targets.push_back((readout * z)(0));
    Eigen::Index best = 0;
    (classifier * z).maxCoeff(&best);
    s.label = static_cast<int>(best);
    out.samples.push_back(std::move(s));
  }

  // Targets are min-max scaled into [0, 1].
  const auto [lo, hi] = std::minmax_element(raw_targets.begin(), raw_targets.end());
  const double span = *hi - *lo;
  for (std::size_t i = 0; i < out.samples.size(); ++i) {
    out.samples[i].regression = span > 0 ? (raw_targets[i] - *lo) / span : 0.0;
  }
  return out;
}

std::vector<int> select_top_variance(const MatrixXd& table, int k) {
  if (k < 0 || k > table.cols()) throw InvalidConfig("k exceeds the column count");
  std::vector<double> variance(static_cast<std::size_t>(table.cols()), 0.0);
  for (Eigen::Index c = 0; c < table.cols(); ++c) {
    if (table.rows() < 2) break;
    const double mean = table.col(c).mean();
    variance[c] = (table.col(c).array() - mean).square().sum() / static_cast<double>(table.rows() - 1);
  }
  std::vector<int> order(static_cast<std::size_t>(table.cols()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return variance[a] > variance[b]; });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

Dataset assign_split(const Dataset& dataset, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw InvalidConfig("test fraction must lie in (0, 1)");
  const std::size_t n = dataset.size();
  const auto test_count = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(n)));
  if (test_count == 0 || test_count >= n) throw InvalidConfig("split leaves one side empty");

  std::vector<std::size_t> by_id(n);
  std::iota(by_id.begin(), by_id.end(), 0);
  std::sort(by_id.begin(), by_id.end(),
            [&](std::size_t a, std::size_t b) { return dataset.samples[a].id < dataset.samples[b].id; });
  for (std::size_t i = 1; i < n; ++i) {
    if (dataset.samples[by_id[i]].id == dataset.samples[by_id[i - 1]].id) {
      throw InvalidInput("duplicate sample id '" + dataset.samples[by_id[i]].id + "'");
    }
  }
  std::mt19937_64 rng(seed);
  std::shuffle(by_id.begin(), by_id.end(), rng);

  Dataset out = dataset;
  out.split.assign(n, Split::kTrain);
  for (std::size_t i = 0; i < test_count; ++i) out.split[by_id[i]] = Split::kTest;
  return out;
}

std::vector<ColumnStats> tabular_stats(const Dataset& dataset) {
  std::vector<ColumnStats> out(static_cast<std::size_t>(dataset.schema.size()));
  for (int m = 0; m < dataset.schema.size(); ++m) {
    const auto& spec = dataset.schema.modalities[m];
    if (spec.kind != ModalityKind::kTabular) continue;
    RowVector<double> sum = RowVector<double>::Zero(spec.dim);
    RowVector<double> sq = RowVector<double>::Zero(spec.dim);
    double count = 0;
    for (const auto& s : dataset.samples) {
      if (!s.payload[m]) continue;
      const RowVector<double> row = s.payload[m]->row(0).cast<double>();
      sum += row;
      sq += row.cwiseProduct(row);
      count += 1;
    }
    ColumnStats& stats = out[m];
    stats.mean = RowVector<double>::Zero(spec.dim);
    stats.scale = RowVector<double>::Ones(spec.dim);
    if (count > 0) {
      stats.mean = sum / count;
      for (int c = 0; c < spec.dim; ++c) {
        const double var = std::max(0.0, sq(c) / count - stats.mean(c) * stats.mean(c));
        stats.scale(c) = std::max(std::sqrt(var), 1e-6);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest + CSV

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell += c;
    }
  }
  cells.push_back(cell);
  return cells;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open '" + path.string() + "'");
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw LoadError("'" + path.string() + "' is empty");
  table.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (cells.size() != table.header.size()) {
      throw LoadError("'" + path.string() + "': row has " + std::to_string(cells.size()) +
                      " cells, header has " + std::to_string(table.header.size()));
    }
    table.rows.push_back(std::move(cells));
  }
  return table;
}

double parse_number(const std::string& text, const fs::path& where) {
  double value = 0;
  const char* begin = text.data();
  const char* end = text.data() + text.size();
  while (begin < end && *begin == ' ') ++begin;
  if (begin < end && *begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    throw LoadError("'" + where.string() + "': cannot parse number '" + text + "'");
  }
  return value;
}

template <typename T>
std::string format_number(T value) {
  char buffer[64];
  auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof(buffer), value);
  return std::string(buffer, ptr);
}

int column_of(const CsvTable& table, const std::string& name, const fs::path& where) {
  auto it = std::find(table.header.begin(), table.header.end(), name);
  if (it == table.header.end()) throw LoadError("'" + where.string() + "' lacks column '" + name + "'");
  return static_cast<int>(it - table.header.begin());
}

}  // namespace

Dataset load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open manifest '" + path.string() + "'");
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError("manifest is not valid JSON: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "mcfuse-manifest" || manifest.value("version", 0) != 1) {
    throw LoadError("manifest must declare format 'mcfuse-manifest' version 1");
  }
  const fs::path root = path.parent_path();
  const std::string id_column = manifest.value("id_column", "id");

  Dataset out;
  out.provenance = "manifest:" + path.string();
  out.class_count = manifest.value("classes", 0);
  std::vector<std::string> order;
  std::unordered_map<std::string, std::size_t> index;
  auto sample_for = [&](const std::string& id) -> Sample& {
    auto [it, inserted] = index.emplace(id, order.size());
    if (inserted) {
      order.push_back(id);
      Sample s;
      s.id = id;
      out.samples.push_back(std::move(s));
    }
    return out.samples[it->second];
  };

  if (!manifest.contains("modalities") || !manifest["modalities"].is_array()) {
    throw LoadError("manifest lacks a 'modalities' array");
  }
  const auto& modalities = manifest["modalities"];
  const int m_count = static_cast<int>(modalities.size());
  for (int m = 0; m < m_count; ++m) {
    const auto& entry = modalities[m];
    ModalitySpec spec;
    try {
      spec.name = entry.at("name").get<std::string>();
      spec.kind = parse_modality_kind(entry.at("kind").get<std::string>());
      spec.dim = entry.at("dim").get<int>();
      spec.tokens = spec.kind == ModalityKind::kTabular ? spec.dim : entry.at("tokens").get<int>();
    } catch (const json::exception& e) {
      throw LoadError("modality entry " + std::to_string(m) + ": " + e.what());
    }
    out.schema.modalities.push_back(spec);
  }
  try {
    out.schema.validate();
  } catch (const InvalidSchema& e) {
    throw LoadError(std::string("manifest schema: ") + e.what());
  }

  auto ensure_slots = [&](Sample& s) {
    if (s.payload.size() != static_cast<std::size_t>(m_count)) s.payload.resize(m_count);
  };

  for (int m = 0; m < m_count; ++m) {
    const ModalitySpec& spec = out.schema.modalities[m];
    const fs::path file = root / modalities[m].at("file").get<std::string>();
    const CsvTable table = read_csv(file);
    const int id_col = column_of(table, id_column, file);
    if (spec.kind == ModalityKind::kTabular) {
      if (static_cast<int>(table.header.size()) - 1 != spec.dim) {
        throw LoadError("'" + file.string() + "' has " + std::to_string(table.header.size() - 1) +
                        " value columns, manifest declares " + std::to_string(spec.dim));
      }
      std::set<std::string> seen;
      for (const auto& row : table.rows) {
        if (!seen.insert(row[id_col]).second) {
          throw LoadError("'" + file.string() + "': duplicate id '" + row[id_col] + "'");
        }
        MatrixXf values(1, spec.dim);
        int c = 0;
        for (std::size_t j = 0; j < row.size(); ++j) {
          if (static_cast<int>(j) == id_col) continue;
          values(0, c++) = static_cast<float>(parse_number(row[j], file));
        }
        Sample& s = sample_for(row[id_col]);
        ensure_slots(s);
        s.payload[m] = std::move(values);
      }
    } else {
      const int t_col = column_of(table, "t", file);
      if (static_cast<int>(table.header.size()) - 2 != spec.dim) {
        throw LoadError("'" + file.string() + "' has " + std::to_string(table.header.size() - 2) +
                        " feature columns, manifest declares " + std::to_string(spec.dim));
      }
      std::map<std::string, std::map<long, RowVector<float>>> steps;
      std::vector<std::string> file_order;
      for (const auto& row : table.rows) {
        const long t = static_cast<long>(parse_number(row[t_col], file));
        RowVector<float> v(spec.dim);
        int c = 0;
        for (std::size_t j = 0; j < row.size(); ++j) {
          if (static_cast<int>(j) == id_col || static_cast<int>(j) == t_col) continue;
          v(c++) = static_cast<float>(parse_number(row[j], file));
        }
        auto [it, fresh] = steps.try_emplace(row[id_col]);
        if (fresh) file_order.push_back(row[id_col]);
        if (!it->second.emplace(t, std::move(v)).second) {
          throw LoadError("'" + file.string() + "': duplicate step " + std::to_string(t) + " for id '" +
                          row[id_col] + "'");
        }
      }
      for (const auto& id : file_order) {
        const auto& by_step = steps[id];
        MatrixXf values(static_cast<Eigen::Index>(by_step.size()), spec.dim);
        Eigen::Index r = 0;
        for (const auto& [t, v] : by_step) values.row(r++) = v;
        Sample& s = sample_for(id);
        ensure_slots(s);
        s.payload[m] = std::move(values);
      }
    }
  }

  if (manifest.contains("targets")) {
    const auto& targets = manifest["targets"];
    const fs::path file = root / targets.at("file").get<std::string>();
    const CsvTable table = read_csv(file);
    const int id_col = column_of(table, id_column, file);
    const int reg_col = targets.contains("regression")
                            ? column_of(table, targets["regression"].get<std::string>(), file)
                            : -1;
    const int label_col =
        targets.contains("label") ? column_of(table, targets["label"].get<std::string>(), file) : -1;
    for (const auto& row : table.rows) {
      auto it = index.find(row[id_col]);
      if (it == index.end()) continue;
      Sample& s = out.samples[it->second];
      if (reg_col >= 0 && !row[reg_col].empty()) s.regression = parse_number(row[reg_col], file);
      if (label_col >= 0 && !row[label_col].empty()) {
        s.label = static_cast<int>(parse_number(row[label_col], file));
        out.class_count = std::max(out.class_count, *s.label + 1);
      }
    }
  }

  for (auto& s : out.samples) ensure_slots(s);
  std::erase_if(out.samples, [](const Sample& s) { return s.present_count() == 0; });
  if (out.samples.empty()) throw LoadError("no usable samples");
  try {
    out.validate();
  } catch (const Error& e) {
    throw LoadError(std::string("manifest data: ") + e.what());
  }
  return out;
}

fs::path save_manifest(const Dataset& dataset, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "mcfuse-manifest";
  manifest["version"] = 1;
  manifest["id_column"] = "id";
  manifest["classes"] = dataset.class_count;
  manifest["modalities"] = json::array();
  for (int m = 0; m < dataset.schema.size(); ++m) {
    const ModalitySpec& spec = dataset.schema.modalities[m];
    const std::string file = spec.name + ".csv";
    json entry = {{"name", spec.name}, {"kind", to_string(spec.kind)}, {"dim", spec.dim}, {"file", file}};
    if (spec.kind == ModalityKind::kSequence) entry["tokens"] = spec.tokens;
    manifest["modalities"].push_back(entry);

    std::ofstream out(dir / file);
    out << "id";
    if (spec.kind == ModalityKind::kSequence) out << ",t";
    for (int c = 0; c < spec.dim; ++c) out << ",c" << c;
    out << '\n';
    for (const auto& s : dataset.samples) {
      if (!s.payload[m]) continue;
      const MatrixXf& p = *s.payload[m];
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        out << s.id;
        if (spec.kind == ModalityKind::kSequence) out << ',' << r;
        for (Eigen::Index c = 0; c < p.cols(); ++c) out << ',' << format_number(p(r, c));
        out << '\n';
      }
    }
    if (!out) throw LoadError("failed writing '" + (dir / file).string() + "'");
  }
  manifest["targets"] = {{"file", "targets.csv"}, {"regression", "regression"}, {"label", "label"}};
  std::ofstream targets(dir / "targets.csv");
  targets << "id,regression,label\n";
  for (const auto& s : dataset.samples) {
    targets << s.id << ',' << (s.regression ? format_number(*s.regression) : "") << ','
            << (s.label ? std::to_string(*s.label) : "") << '\n';
  }
  const fs::path manifest_path = dir / "manifest.json";
  std::ofstream(manifest_path) << manifest.dump(2) << '\n';
  return manifest_path;
}

}  // namespace mcfuse
