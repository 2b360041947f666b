#ifndef MCFUSE_EMBEDDING_HPP_
#define MCFUSE_EMBEDDING_HPP_

#include <vector>

#include "mcfuse/core.hpp"
#include "mcfuse/masking.hpp"

namespace mcfuse {

// Per-sample, per-channel embeddings. Row s * channels + c holds channel c of
// sample s; rows of unavailable slots are zero and must not be read.
struct EmbeddingSet {
  std::vector<ChannelSet> channels;
  MatrixXf vectors;
  BoolArray available;  // [samples x channels]

  int sample_count() const { return static_cast<int>(available.rows()); }
  int channel_count() const { return static_cast<int>(channels.size()); }
  int dim() const { return static_cast<int>(vectors.cols()); }

  auto vector(int sample, int channel) const { return vectors.row(sample * channel_count() + channel); }
  auto vector(int sample, int channel) { return vectors.row(sample * channel_count() + channel); }

  // Rows of one channel for the given samples, in order.
  MatrixXd gather(int channel, const std::vector<int>& samples) const {
    MatrixXd out(static_cast<Eigen::Index>(samples.size()), dim());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      out.row(static_cast<Eigen::Index>(i)) = vector(samples[i], channel).cast<double>();
    }
    return out;
  }

  // Samples where every listed channel is available.
  std::vector<int> samples_with(std::initializer_list<int> required) const {
    std::vector<int> out;
    for (int s = 0; s < sample_count(); ++s) {
      bool ok = true;
      for (int c : required) ok = ok && available(s, c);
      if (ok) out.push_back(s);
    }
    return out;
  }

  int index_of(const ChannelSet& channel) const {
    for (int c = 0; c < channel_count(); ++c) {
      if (channels[c] == channel) return c;
    }
    return -1;
  }
};

}  // namespace mcfuse

#endif  // MCFUSE_EMBEDDING_HPP_
