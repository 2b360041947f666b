#include "mcfuse/contrastive.hpp"

namespace mcfuse {

std::vector<std::pair<int, int>> contrastive_pairs(const std::vector<ChannelSet>& channels, Mode mode) {
  std::vector<std::pair<int, int>> out;
  const int n = static_cast<int>(channels.size());
  for (int a = 0; a < n; ++a) {
    for (int b = a + 1; b < n; ++b) {
      if (mode == Mode::kZorro && !channels[a].unimodal() && !channels[b].unimodal()) continue;
      out.emplace_back(a, b);
    }
  }
  return out;
}

int LossReport::contributing() const {
  int n = 0;
  for (const auto& p : pairs) n += p.skipped ? 0 : 1;
  return n;
}

nlohmann::json LossReport::to_json(const std::vector<ChannelSet>& channels) const {
  nlohmann::json pairs_json = nlohmann::json::object();
  for (const auto& p : pairs) {
    const std::string key = channels.at(p.a).label() + "|" + channels.at(p.b).label();
    pairs_json[key] = {{"loss", p.loss}, {"count", p.count}, {"skipped", p.skipped}};
  }
  return {{"total", total}, {"pairs", pairs_json}};
}

LossReport total_contrastive_loss(const EmbeddingSet& embeddings, Mode mode, double temperature) {
  if (embeddings.sample_count() == 0) throw InvalidInput("empty embedding set");
  LossReport report;
  double sum = 0;
  for (const auto& [a, b] : contrastive_pairs(embeddings.channels, mode)) {
    const std::vector<int> rows = embeddings.samples_with({a, b});
    PairLoss entry{a, b, 0.0, static_cast<int>(rows.size()), true};
    auto result = info_nce_pair<double>(embeddings.gather(a, rows), embeddings.gather(b, rows), temperature,
                                        /*with_grad=*/false);
    if (result) {
      entry.loss = result->loss;
      entry.skipped = false;
      sum += result->loss;
    }
    report.pairs.push_back(entry);
  }
  const int used = report.contributing();
  report.total = used > 0 ? sum / used : 0.0;
  return report;
}

}  // namespace mcfuse
