#include "mcfuse/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "mcfuse/contrastive.hpp"
#include "mcfuse/io.hpp"

namespace mcfuse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw InvalidConfig(where + " must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) throw InvalidConfig("unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw InvalidConfig(std::string("bad value for '") + key + "': " + e.what());
  }
}

json modality_json(const ModalitySpec& spec) {
  return {{"name", spec.name}, {"kind", to_string(spec.kind)}, {"dim", spec.dim}, {"tokens", spec.tokens}};
}

json schema_json(const ModalitySchema& schema) {
  json out = json::array();
  for (const auto& m : schema.modalities) out.push_back(modality_json(m));
  return out;
}

std::string format_sparsity(double s) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << s;
  return out.str();
}

}  // namespace

ExperimentConfig ExperimentConfig::desk_scale() {
  ExperimentConfig c;
  c.synthetic = SyntheticConfig::desk_default();
  return c;
}

ExperimentConfig ExperimentConfig::full_scale() {
  ExperimentConfig c;
  c.model = ModelConfig::full_scale();
  c.training.batch_size = 32;
  c.training.max_lr = 1e-4;
  c.training.warmup_steps = 2000;
  c.training.epochs = 32;
  return c;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  check_keys(j, "config", {"mode", "model", "training", "data", "sparsities", "sweep_modes", "test_fraction",
                           "split_seed", "sparsity_seed", "probe", "eval_batch", "schema"});
  ExperimentConfig c;
  if (j.contains("mode")) c.model.mode = parse_mode(j["mode"].get<std::string>());
  if (j.contains("model")) {
    const json& m = j["model"];
    check_keys(m, "model", {"depth", "width", "heads", "ff_multiplier", "tokens_per_channel", "embed_dim",
                            "temperature"});
    read_if(m, "depth", c.model.depth);
    read_if(m, "width", c.model.width);
    read_if(m, "heads", c.model.heads);
    read_if(m, "ff_multiplier", c.model.ff_multiplier);
    read_if(m, "tokens_per_channel", c.model.tokens_per_channel);
    read_if(m, "embed_dim", c.model.embed_dim);
    read_if(m, "temperature", c.model.temperature);
  }
  if (j.contains("training")) {
    const json& t = j["training"];
    check_keys(t, "training", {"batch_size", "max_lr", "warmup_steps", "epochs", "seed"});
    read_if(t, "batch_size", c.training.batch_size);
    read_if(t, "max_lr", c.training.max_lr);
    read_if(t, "warmup_steps", c.training.warmup_steps);
    read_if(t, "epochs", c.training.epochs);
    read_if(t, "seed", c.training.seed);
  }
  if (!j.contains("data")) throw InvalidConfig("config needs a 'data' section");
  const json& d = j["data"];
  check_keys(d, "data", {"synthetic", "manifest"});
  if (d.contains("synthetic") == d.contains("manifest")) {
    throw InvalidConfig("data must name exactly one of 'synthetic' or 'manifest'");
  }
  if (d.contains("manifest")) {
    c.manifest = d["manifest"].get<std::string>();
  } else {
    const json& s = d["synthetic"];
    check_keys(s, "data.synthetic", {"samples", "latent_dim", "noise", "classes", "seed", "modalities"});
    SyntheticConfig syn = SyntheticConfig::desk_default();
    read_if(s, "samples", syn.samples);
    read_if(s, "latent_dim", syn.latent_dim);
    read_if(s, "noise", syn.noise);
    read_if(s, "classes", syn.classes);
    read_if(s, "seed", c.data_seed);
    if (s.contains("modalities")) {
      syn.modalities.clear();
      for (const json& m : s["modalities"]) {
        check_keys(m, "data.synthetic.modalities[]", {"name", "kind", "dim", "tokens", "map_id"});
        SyntheticModality sm;
        try {
          sm.spec.name = m.at("name").get<std::string>();
          sm.spec.kind = parse_modality_kind(m.at("kind").get<std::string>());
          sm.spec.dim = m.at("dim").get<int>();
        } catch (const json::exception& e) {
          throw InvalidConfig(std::string("synthetic modality: ") + e.what());
        } catch (const InvalidSchema& e) {
          throw InvalidConfig(e.what());
        }
        sm.spec.tokens = sm.spec.kind == ModalityKind::kTabular ? sm.spec.dim : m.value("tokens", 0);
        read_if(m, "map_id", sm.map_id);
        syn.modalities.push_back(sm);
      }
    }
    c.synthetic = syn;
  }
  read_if(j, "sparsities", c.sparsities);
  if (j.contains("sweep_modes")) {
    c.sweep_modes.clear();
    for (const json& m : j["sweep_modes"]) c.sweep_modes.push_back(parse_mode(m.get<std::string>()));
  }
  read_if(j, "test_fraction", c.test_fraction);
  read_if(j, "split_seed", c.split_seed);
  read_if(j, "sparsity_seed", c.sparsity_seed);
  read_if(j, "eval_batch", c.eval_batch);
  if (j.contains("probe")) {
    const json& p = j["probe"];
    check_keys(p, "probe", {"lr", "steps", "seed", "channel"});
    read_if(p, "channel", c.probe_channel);
    read_if(p, "lr", c.probe.lr);
    read_if(p, "steps", c.probe.steps);
    read_if(p, "seed", c.probe.seed);
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidConfig("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidConfig("config is not valid JSON: " + std::string(e.what()));
  }
  ExperimentConfig c = from_json(j);
  if (!c.manifest.empty() && fs::path(c.manifest).is_relative()) {
    c.manifest = (path.parent_path() / c.manifest).string();
  }
  return c;
}

json ExperimentConfig::to_json() const {
  json j;
  j["mode"] = to_string(model.mode);
  j["model"] = {{"depth", model.depth},
                {"width", model.width},
                {"heads", model.heads},
                {"ff_multiplier", model.ff_multiplier},
                {"tokens_per_channel", model.tokens_per_channel},
                {"embed_dim", model.embed_dim},
                {"temperature", model.temperature}};
  j["training"] = {{"batch_size", training.batch_size},
                   {"max_lr", training.max_lr},
                   {"warmup_steps", training.warmup_steps},
                   {"epochs", training.epochs},
                   {"seed", training.seed}};
  if (synthetic) {
    json mods = json::array();
    for (const auto& m : synthetic->modalities) {
      json e = modality_json(m.spec);
      if (m.map_id >= 0) e["map_id"] = m.map_id;
      mods.push_back(e);
    }
    j["data"] = {{"synthetic",
                  {{"samples", synthetic->samples},
                   {"latent_dim", synthetic->latent_dim},
                   {"noise", synthetic->noise},
                   {"classes", synthetic->classes},
                   {"seed", data_seed},
                   {"modalities", mods}}}};
  } else {
    j["data"] = {{"manifest", manifest}};
  }
  j["sparsities"] = sparsities;
  json modes = json::array();
  for (Mode m : sweep_modes) modes.push_back(to_string(m));
  j["sweep_modes"] = modes;
  j["test_fraction"] = test_fraction;
  j["split_seed"] = split_seed;
  j["sparsity_seed"] = sparsity_seed;
  j["probe"] = {{"lr", probe.lr}, {"steps", probe.steps}, {"seed", probe.seed}, {"channel", probe_channel}};
  j["eval_batch"] = eval_batch;
  return j;
}

void ExperimentConfig::validate() const {
  model.validate();
  if (training.batch_size < 2) throw InvalidConfig("batch_size must be at least 2");
  if (!(training.max_lr > 0)) throw InvalidConfig("max_lr must be positive");
  if (training.warmup_steps < 0) throw InvalidConfig("warmup_steps must be nonnegative");
  if (training.epochs < 0) throw InvalidConfig("epochs must be nonnegative");
  if (!synthetic && manifest.empty()) throw InvalidConfig("config names no data source");
  if (!(test_fraction > 0 && test_fraction < 1)) throw InvalidConfig("test_fraction must lie in (0, 1)");
  for (double s : sparsities) {
    if (!(s >= 0 && s < 1)) throw InvalidConfig("sparsities must lie in [0, 1)");
  }
  if (eval_batch < 1) throw InvalidConfig("eval_batch must be positive");
  if (probe.steps < 1 || !(probe.lr > 0)) throw InvalidConfig("probe needs positive steps and lr");
  if (synthetic) {
    ModalitySchema schema;
    for (const auto& m : synthetic->modalities) schema.modalities.push_back(m.spec);
    try {
      schema.validate();
    } catch (const InvalidSchema& e) {
      throw InvalidConfig(e.what());
    }
  }
}

std::vector<std::string> checkpoint_mismatches(const json& checkpoint_config, const json& config) {
  std::vector<std::string> out;
  auto compare = [&](const std::string& field, const json& a, const json& b) {
    if (a != b) out.push_back(field + ": checkpoint=" + a.dump() + " config=" + b.dump());
  };
  compare("mode", checkpoint_config.value("mode", json()), config.value("mode", json()));
  const json empty = json::object();
  const json& ma = checkpoint_config.contains("model") ? checkpoint_config["model"] : empty;
  const json& mb = config.contains("model") ? config["model"] : empty;
  std::set<std::string> keys;
  for (auto it = ma.begin(); it != ma.end(); ++it) keys.insert(it.key());
  for (auto it = mb.begin(); it != mb.end(); ++it) keys.insert(it.key());
  for (const auto& k : keys) compare("model." + k, ma.value(k, json()), mb.value(k, json()));
  compare("schema", checkpoint_config.value("schema", json()), config.value("schema", json()));
  return out;
}

Dataset prepare_dataset(const ExperimentConfig& config, double sparsity) {
  Dataset source = config.synthetic ? synthetic_multimodal(*config.synthetic, config.data_seed)
                                    : load_manifest(config.manifest);
  Dataset split = assign_split(source, config.test_fraction, config.split_seed);
  if (sparsity == 0.0) return split;
  return apply_drops(split, plan_drops(split.size(), split.schema.size(), sparsity, config.sparsity_seed));
}

double learning_rate(const TrainingConfig& training, long step, long total_steps) {
  if (training.warmup_steps > 0 && step < training.warmup_steps) {
    return training.max_lr * static_cast<double>(step + 1) / training.warmup_steps;
  }
  const long decay = std::max<long>(1, total_steps - training.warmup_steps);
  const double progress = std::clamp(static_cast<double>(step - training.warmup_steps) / decay, 0.0, 1.0);
  return training.max_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

int select_epoch(const std::vector<double>& test_losses) {
  int best = -1;
  for (std::size_t e = 0; e < test_losses.size(); ++e) {
    if (std::isnan(test_losses[e])) continue;
    if (best < 0 || test_losses[e] < test_losses[best]) best = static_cast<int>(e);
  }
  return std::max(best, 0);
}

std::string run_id(const ExperimentConfig& config, double sparsity) {
  return to_string(config.model.mode) + "-s" + format_sparsity(sparsity) + "-seed" +
         std::to_string(config.training.seed);
}

namespace {

std::vector<const Sample*> pointers(const Dataset& d) {
  std::vector<const Sample*> out;
  for (const auto& s : d.samples) out.push_back(&s);
  return out;
}

json checkpoint_echo(const ExperimentConfig& config, const ModalitySchema& schema) {
  json j = config.to_json();
  j["schema"] = schema_json(schema);
  return j;
}

}  // namespace

double mean_batch_loss(Model<float>& model, const std::vector<const Sample*>& samples, int batch_size) {
  const auto pairs = contrastive_pairs(model.channels(), model.config().mode);
  double sum = 0;
  int batches = 0;
  for (std::size_t begin = 0; begin + 1 < samples.size(); begin += batch_size) {
    const std::size_t end = std::min(samples.size(), begin + batch_size);
    Tape<float> t;
    auto out = model.forward(t, std::span<const Sample* const>(samples.data() + begin, end - begin));
    LossReport report;
    contrastive_loss<float>(t, out.embeddings, out.available, pairs, static_cast<float>(model.config().temperature),
                            &report);
    if (report.contributing() == 0) continue;
    sum += report.total;
    ++batches;
  }
  return batches > 0 ? sum / batches : std::nan("");
}

TrainResult train(const ExperimentConfig& config, const Dataset& dataset, double sparsity, const fs::path& out_dir,
                  const RecordSink& sink) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  fs::create_directories(out_dir);
  const Dataset train_set = dataset.subset(Split::kTrain);
  const Dataset test_set = dataset.subset(Split::kTest);
  if (train_set.size() < 2) throw InvalidConfig("training split has fewer than two samples");

  Model<float> model(config.model, dataset.schema, config.training.seed);
  model.set_tabular_stats(tabular_stats(train_set));
  const auto pairs = contrastive_pairs(model.channels(), config.model.mode);
  const float temperature = static_cast<float>(config.model.temperature);
  const std::string echo = checkpoint_echo(config, dataset.schema).dump();
  std::ofstream(out_dir / "config.json") << checkpoint_echo(config, dataset.schema).dump(2) << '\n';

  std::vector<const Sample*> order = pointers(train_set);
  const std::vector<const Sample*> test_ptrs = pointers(test_set);
  const int batch = config.training.batch_size;
  const long steps_per_epoch = static_cast<long>((order.size() + batch - 1) / batch);
  const long total_steps = steps_per_epoch * config.training.epochs;
  std::mt19937_64 shuffle_rng(config.training.seed ^ 0x9e3779b97f4a7c15ULL);
  Adam<float> adam;

  TrainResult result;
  const std::string run = run_id(config, sparsity);
  auto emit = [&](int epoch, const std::string& split, const std::string& metric, double value) {
    if (sink) sink(MetricRecord{run, to_string(config.model.mode), sparsity, epoch, split, metric, value});
  };
  auto checkpoint = [&](int epoch) {
    std::ostringstream name;
    name << "epoch_" << std::setw(3) << std::setfill('0') << epoch << ".mfck";
    const fs::path path = out_dir / name.str();
    write_checkpoint(path, capture_checkpoint(model, echo, config.training.seed));
    result.checkpoints.push_back(path);
  };

  result.train_loss.push_back(std::nan(""));
  result.test_loss.push_back(mean_batch_loss(model, test_ptrs, batch));
  emit(0, "test", "test_loss", result.test_loss.back());
  checkpoint(0);

  long step = 0;
  for (int epoch = 1; epoch <= config.training.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double sum = 0;
    int batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += batch, ++step) {
      const std::size_t end = std::min(order.size(), begin + batch);
      if (end - begin < 2) continue;
      Tape<float> t;
      auto out = model.forward(t, std::span<const Sample* const>(order.data() + begin, end - begin));
      LossReport report;
      Var loss = contrastive_loss<float>(t, out.embeddings, out.available, pairs, temperature, &report);
      if (!std::isfinite(report.total)) throw NumericFailure("non-finite loss at step " + std::to_string(step), -1);
      if (report.contributing() == 0) continue;
      model.zero_grad();
      t.backward(loss);
      adam.step(model.parameters(), learning_rate(config.training, step, total_steps));
      sum += report.total;
      ++batches;
    }
    result.train_loss.push_back(batches > 0 ? sum / batches : std::nan(""));
    result.test_loss.push_back(mean_batch_loss(model, test_ptrs, batch));
    if (!std::isfinite(result.test_loss.back()) && !test_ptrs.empty()) {
      throw NumericFailure("non-finite test loss after epoch " + std::to_string(epoch), -1);
    }
    emit(epoch, "train", "train_loss", result.train_loss.back());
    emit(epoch, "test", "test_loss", result.test_loss.back());
    checkpoint(epoch);
  }
  result.selected_epoch = select_epoch(result.test_loss);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

Model<float> load_model(const ExperimentConfig& config, const ModalitySchema& schema, const fs::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  json stored;
  try {
    stored = json::parse(ck.config_json);
  } catch (const json::exception&) {
    throw LoadError("checkpoint carries an unreadable config echo");
  }
  const auto diff = checkpoint_mismatches(stored, checkpoint_echo(config, schema));
  if (!diff.empty()) {
    std::string message = "checkpoint does not match config:";
    for (const auto& line : diff) message += "\n  " + line;
    throw InvalidConfig(message);
  }
  Model<float> model(config.model, schema, ck.seed);
  restore_checkpoint(model, ck);
  return model;
}

EmbeddingSet embed_split(Model<float>& model, const Dataset& dataset, Split split, int batch_size) {
  std::vector<const Sample*> selected;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset.split.at(i) == split) selected.push_back(&dataset.samples[i]);
  }
  return model.embed(selected, batch_size);
}

int full_fusion_channel(const EmbeddingSet& embeddings) {
  const auto modalities = std::count_if(embeddings.channels.begin(), embeddings.channels.end(),
                                        [](const ChannelSet& x) { return x.unimodal(); });
  for (int c = 0; c < embeddings.channel_count(); ++c) {
    const auto& ch = embeddings.channels[c];
    if (ch.size() >= 2 && ch.size() == modalities) return c;
  }
  return -1;
}

EmbeddingSet fusion_view(const EmbeddingSet& e, Mode mode) {
  EmbeddingSet out;
  const int n = e.sample_count();
  int modality_count = 0;
  for (const auto& ch : e.channels) modality_count += ch.unimodal() ? 1 : 0;
  std::vector<int> members(static_cast<std::size_t>(modality_count));
  for (int m = 0; m < modality_count; ++m) members[m] = m;
  out.channels = {ChannelSet(members)};
  out.vectors = MatrixXf::Zero(n, e.dim());
  out.available = BoolArray::Constant(n, 1, false);
  if (mode != Mode::kEao) {
    const int c = full_fusion_channel(e);
    if (c < 0) throw InvalidInput("embedding set has no all-modalities channel");
    for (int s = 0; s < n; ++s) {
      out.available(s, 0) = e.available(s, c);
      if (e.available(s, c)) out.vectors.row(s) = e.vector(s, c);
    }
    return out;
  }
  for (int s = 0; s < n; ++s) {
    MatrixXf rows(e.channel_count(), e.dim());
    std::vector<bool> avail(static_cast<std::size_t>(e.channel_count()));
    for (int c = 0; c < e.channel_count(); ++c) {
      rows.row(c) = e.vector(s, c);
      avail[c] = e.available(s, c);
    }
    auto fused = eao_inference_fusion(rows, avail);
    if (fused) {
      out.available(s, 0) = true;
      out.vectors.row(s) = fused->cast<float>();
    }
  }
  return out;
}

EmbeddingSet probe_view(const EmbeddingSet& e, Mode mode, const std::string& channel) {
  if (channel == "fusion") return fusion_view(e, mode);
  for (int c = 0; c < e.channel_count(); ++c) {
    if (e.channels[c].label() != channel) continue;
    EmbeddingSet out;
    out.channels = {e.channels[c]};
    out.vectors = MatrixXf(e.sample_count(), e.dim());
    out.available = BoolArray(e.sample_count(), 1);
    for (int s = 0; s < e.sample_count(); ++s) {
      out.vectors.row(s) = e.vector(s, c);
      out.available(s, 0) = e.available(s, c);
    }
    return out;
  }
  throw InvalidConfig("probe channel '" + channel + "' is not an embedding channel");
}

std::vector<MetricRecord> evaluate(const ExperimentConfig& config, const EmbeddingSet& train_embeddings,
                                   const EmbeddingSet& test_embeddings, const Dataset& train_data,
                                   const Dataset& test_data, double sparsity, int epoch) {
  if (test_embeddings.sample_count() != static_cast<int>(test_data.size()) ||
      train_embeddings.sample_count() != static_cast<int>(train_data.size())) {
    throw InvalidInput("embedding files do not match the dataset splits");
  }
  const Mode mode = config.model.mode;
  std::vector<MetricRecord> out;
  const std::string run = run_id(config, sparsity);
  auto emit = [&](const std::string& metric, double value) {
    out.push_back(MetricRecord{run, to_string(mode), sparsity, epoch, "test", metric, value});
  };
  const double nan = std::numeric_limits<double>::quiet_NaN();

  const EmbeddingSet fusion = fusion_view(test_embeddings, mode);
  const std::vector<int> fused_rows = fusion.samples_with({0});
  emit("test_samples", static_cast<double>(test_embeddings.sample_count()));
  if (fused_rows.size() >= 2) {
    const MatrixXd f = fusion.gather(0, fused_rows);
    emit("uniformity_fusion", uniformity(f));
    emit("log_uniformity_fusion", log_uniformity(f));
  }

  std::vector<double> uni_u, uni_lu, align, med, r1, r5, r10;
  for (int c = 0; c < test_embeddings.channel_count(); ++c) {
    if (!test_embeddings.channels[c].unimodal()) continue;
    const int m = test_embeddings.channels[c].members()[0];
    const std::string suffix = "_m" + std::to_string(m);
    std::vector<int> rows;
    for (int s = 0; s < test_embeddings.sample_count(); ++s) {
      if (test_embeddings.available(s, c) && fusion.available(s, 0)) rows.push_back(s);
    }
    if (rows.size() < 2) continue;
    const MatrixXd u = test_embeddings.gather(c, rows);
    const MatrixXd f = fusion.gather(0, rows);
    uni_u.push_back(uniformity(u));
    uni_lu.push_back(std::log(uni_u.back()));
    align.push_back(alignment(u, f));
    const RankTable ranks = rank_matrix(u, f);
    med.push_back(median_rank(ranks));
    r1.push_back(recall_at_k(ranks, 1));
    r5.push_back(recall_at_k(ranks, 5));
    r10.push_back(recall_at_k(ranks, 10));
    emit("uniformity_unimodal" + suffix, uni_u.back());
    emit("alignment" + suffix, align.back());
    emit("median_rank" + suffix, med.back());
    emit("recall_at_1" + suffix, r1.back());
    emit("recall_at_5" + suffix, r5.back());
    emit("recall_at_10" + suffix, r10.back());
  }
  auto mean = [&](const std::vector<double>& v) {
    if (v.empty()) return nan;
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  emit("uniformity_unimodal_mean", mean(uni_u));
  emit("log_uniformity_unimodal_mean", mean(uni_lu));
  emit("alignment_mean", mean(align));
  emit("median_rank_mean", mean(med));
  emit("recall_at_1_mean", mean(r1));
  emit("recall_at_5_mean", mean(r5));
  emit("recall_at_10_mean", mean(r10));
  emit("contrastive_loss_full",
       test_embeddings.sample_count() >= 2
           ? total_contrastive_loss(test_embeddings, mode, config.model.temperature).total
           : nan);

  const EmbeddingSet train_probe = probe_view(train_embeddings, mode, config.probe_channel);
  const EmbeddingSet test_probe = probe_view(test_embeddings, mode, config.probe_channel);
  auto probe_rows = [](const EmbeddingSet& f, const Dataset& d, bool regression) {
    std::vector<int> rows;
    for (int s = 0; s < f.sample_count(); ++s) {
      if (!f.available(s, 0)) continue;
      const Sample& sample = d.samples[s];
      if (regression ? sample.regression.has_value() : sample.label.has_value()) rows.push_back(s);
    }
    return rows;
  };
  {
    const auto tr = probe_rows(train_probe, train_data, true);
    const auto te = probe_rows(test_probe, test_data, true);
    if (!tr.empty() && !te.empty()) {
      std::vector<double> ytr, yte;
      for (int s : tr) ytr.push_back(*train_data.samples[s].regression);
      for (int s : te) yte.push_back(*test_data.samples[s].regression);
      const ProbeParams p = fit_probe(train_probe.gather(0, tr), ytr, ProbeTask::kRegression, config.probe);
      const RegressionReport r = eval_regression(p, test_probe.gather(0, te), yte);
      emit("probe_regression_l1", r.l1);
      emit("probe_regression_pearson_r", r.pearson_r.value_or(nan));
    }
  }
  if (train_data.class_count >= 2) {
    const auto tr = probe_rows(train_probe, train_data, false);
    const auto te = probe_rows(test_probe, test_data, false);
    if (!tr.empty() && !te.empty()) {
      std::vector<double> ytr;
      std::vector<int> yte;
      for (int s : tr) ytr.push_back(*train_data.samples[s].label);
      for (int s : te) yte.push_back(*test_data.samples[s].label);
      const ProbeParams p = fit_probe(train_probe.gather(0, tr), ytr, ProbeTask::kClassification, config.probe,
                                      train_data.class_count);
      const ClassificationReport r = eval_classification(p, test_probe.gather(0, te), yte);
      emit("probe_classification_ce", r.cross_entropy);
      emit("probe_classification_macro_aupr", r.macro_aupr.value_or(nan));
      emit("probe_classification_accuracy", r.accuracy);
    }
  }
  return out;
}

std::vector<MetricRecord> read_records(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open records '" + path.string() + "'");
  std::vector<MetricRecord> out;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    try {
      out.push_back(MetricRecord::from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw LoadError("bad record line in '" + path.string() + "': " + e.what());
    }
  }
  return out;
}

void append_records(const fs::path& path, const std::vector<MetricRecord>& records) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  for (const auto& r : records) out << r.to_json().dump() << '\n';
  if (!out) throw LoadError("failed writing '" + path.string() + "'");
}

SeriesReport write_report(const std::vector<MetricRecord>& records, const std::vector<double>& sparsities,
                          const std::vector<Mode>& modes, const fs::path& out_dir) {
  // metric -> mode -> sparsity -> value (last record wins)
  std::map<std::string, std::map<std::string, std::map<std::string, double>>> table;
  for (const auto& r : records) {
    if (r.split != "test" || r.metric == "test_loss" || r.metric == "train_loss") continue;
    table[r.metric][r.mode][format_sparsity(r.sparsity)] = r.value;
  }
  SeriesReport report;
  fs::create_directories(out_dir);
  for (const auto& [metric, by_mode] : table) {
    for (Mode mode : modes) {
      const std::string mode_name = to_string(mode);
      const fs::path file = out_dir / (metric + "__" + mode_name + ".csv");
      std::ofstream out(file);
      out << "sparsity,value\n";
      auto it = by_mode.find(mode_name);
      for (double s : sparsities) {
        const std::string key = format_sparsity(s);
        if (it == by_mode.end() || !it->second.count(key)) {
          report.missing.push_back(metric + "/" + mode_name + "@" + key);
          continue;
        }
        const double v = it->second.at(key);
        out << key << ',';
        if (std::isnan(v)) {
          out << "nan";
        } else {
          out << std::setprecision(10) << v;
        }
        out << '\n';
      }
      report.files.push_back(file);
    }
  }
  std::ofstream missing(out_dir / "missing.txt");
  for (const auto& m : report.missing) missing << m << '\n';
  return report;
}

std::vector<MetricRecord> run_cell(const ExperimentConfig& config, double sparsity, const fs::path& out_dir,
                                   TrainResult* result_out) {
  std::vector<MetricRecord> records;
  const Dataset dataset = prepare_dataset(config, sparsity);
  TrainResult result =
      train(config, dataset, sparsity, out_dir, [&](const MetricRecord& r) { records.push_back(r); });
  Model<float> model = load_model(config, dataset.schema, result.checkpoints.at(result.selected_epoch));
  const EmbeddingSet train_e = embed_split(model, dataset, Split::kTrain, config.eval_batch);
  const EmbeddingSet test_e = embed_split(model, dataset, Split::kTest, config.eval_batch);
  write_embeddings(out_dir / "train.mfl", train_e);
  write_embeddings(out_dir / "test.mfl", test_e);
  auto evaluated = evaluate(config, train_e, test_e, dataset.subset(Split::kTrain), dataset.subset(Split::kTest),
                            sparsity, result.selected_epoch);
  records.insert(records.end(), evaluated.begin(), evaluated.end());
  if (result_out != nullptr) *result_out = std::move(result);
  return records;
}

std::vector<MetricRecord> sweep(const ExperimentConfig& config, const fs::path& out_dir, const SweepOptions& options) {
  fs::create_directories(out_dir);
  const fs::path records_path = out_dir / "records.jsonl";
  fs::remove(records_path);
  std::ofstream(out_dir / "config.json") << config.to_json().dump(2) << '\n';
  std::vector<MetricRecord> all;
  for (Mode mode : config.sweep_modes) {
    ExperimentConfig cell = config;
    cell.model.mode = mode;
    for (double s : config.sparsities) {
      const fs::path dir = out_dir / to_string(mode) / ("sparsity_" + format_sparsity(s));
      TrainResult result;
      auto records = run_cell(cell, s, dir, &result);
      append_records(records_path, records);
      all.insert(all.end(), records.begin(), records.end());
      if (options.verbose) {
        std::ostringstream line;
        line << to_string(mode) << " sparsity " << format_sparsity(s) << ": selected epoch " << result.selected_epoch
             << ", test loss " << result.test_loss[result.selected_epoch] << " (" << std::setprecision(3)
             << result.seconds << " s)\n";
        std::cerr << line.str();
      }
    }
  }
  write_report(all, config.sparsities, config.sweep_modes, out_dir / "series");
  return all;
}

}  // namespace mcfuse
