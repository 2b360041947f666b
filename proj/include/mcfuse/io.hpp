#ifndef MCFUSE_IO_HPP_
#define MCFUSE_IO_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mcfuse/embedding.hpp"
#include "mcfuse/model.hpp"

namespace mcfuse {

// Checkpoint container, all integers little-endian:
//   "MFCK" u32 version(1) u64 seed u32 config_len config_json[config_len]
//   u32 tensor_count, then per tensor:
//   u32 name_len name u32 rank u32 dims[rank] f32 payload (row-major)
struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::string config_json;
  std::uint64_t seed = 0;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Embedding file: "MFL1" u32 samples u32 channels u32 dim, availability bitmap
// (bit s*channels + c, LSB first, padded to a byte), then f32 vectors for
// every slot in sample-major, canonical channel order.
void write_embeddings(const std::filesystem::path& path, const EmbeddingSet& embeddings);
EmbeddingSet read_embeddings(const std::filesystem::path& path, const std::vector<ChannelSet>& channels);

template <typename Scalar>
Checkpoint capture_checkpoint(Model<Scalar>& model, std::string config_json, std::uint64_t seed) {
  Checkpoint ck;
  ck.config_json = std::move(config_json);
  ck.seed = seed;
  for (Parameter<Scalar>* p : model.parameters()) {
    NamedTensor t{p->name, {static_cast<std::uint32_t>(p->value.rows()), static_cast<std::uint32_t>(p->value.cols())}, {}};
    t.data.resize(static_cast<std::size_t>(p->value.size()));
    for (Eigen::Index i = 0; i < p->value.size(); ++i) t.data[i] = static_cast<float>(p->value.data()[i]);
    ck.tensors.push_back(std::move(t));
  }
  for (auto& [name, row] : model.buffers()) {
    NamedTensor t{name, {1u, static_cast<std::uint32_t>(row->size())}, {}};
    for (Eigen::Index i = 0; i < row->size(); ++i) t.data.push_back(static_cast<float>((*row)(i)));
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

template <typename Scalar>
void restore_checkpoint(Model<Scalar>& model, const Checkpoint& ck) {
  auto fetch = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) -> const NamedTensor& {
    const NamedTensor* t = ck.find(name);
    if (t == nullptr) throw LoadError("checkpoint lacks tensor '" + name + "'");
    if (t->shape.size() != 2 || t->shape[0] != rows || t->shape[1] != cols) {
      throw LoadError("checkpoint tensor '" + name + "' has the wrong shape");
    }
    return *t;
  };
  for (Parameter<Scalar>* p : model.parameters()) {
    const NamedTensor& t = fetch(p->name, p->value.rows(), p->value.cols());
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = static_cast<Scalar>(t.data[i]);
  }
  for (auto& [name, row] : model.buffers()) {
    const NamedTensor& t = fetch(name, 1, row->size());
    for (Eigen::Index i = 0; i < row->size(); ++i) (*row)(i) = static_cast<double>(t.data[i]);
  }
}

}  // namespace mcfuse

#endif  // MCFUSE_IO_HPP_
