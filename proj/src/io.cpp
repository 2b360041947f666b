#include "mcfuse/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mcfuse {

namespace fs = std::filesystem;

namespace {

class Writer {
 public:
  explicit Writer(const fs::path& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw LoadError("cannot write '" + path.string() + "'");
  }

  void bytes(const void* data, std::size_t n) { out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n)); }

  void u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 4);
  }

  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 8);
  }

  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

  void string(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

  void finish() {
    out_.flush();
    if (!out_) throw LoadError("failed writing '" + path_.string() + "'");
  }

 private:
  std::ofstream out_;
  fs::path path_;
};

class Reader {
 public:
  explicit Reader(const fs::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw LoadError("cannot open '" + path.string() + "'");
  }

  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw LoadError("'" + path_.string() + "' is truncated");
  }

  std::uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    unsigned char b[8];
    bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  std::string string(std::uint32_t limit = 1u << 28) {
    const std::uint32_t n = u32();
    if (n > limit) throw LoadError("'" + path_.string() + "': implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

  void magic(const char* expected) {
    char m[4];
    bytes(m, 4);
    if (std::memcmp(m, expected, 4) != 0) {
      throw LoadError("'" + path_.string() + "' is not a " + std::string(expected, 4) + " file");
    }
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::ifstream in_;
  fs::path path_;
};

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void write_checkpoint(const fs::path& path, const Checkpoint& ck) {
  // Write to a sibling file first so an interrupted write never clobbers a
  // previous good checkpoint.
  const fs::path staging = path.string() + ".partial";
  {
    Writer w(staging);
    w.bytes("MFCK", 4);
    w.u32(1);
    w.u64(ck.seed);
    w.string(ck.config_json);
    w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& t : ck.tensors) {
      w.string(t.name);
      w.u32(static_cast<std::uint32_t>(t.shape.size()));
      std::size_t count = 1;
      for (std::uint32_t d : t.shape) {
        w.u32(d);
        count *= d;
      }
      if (count != t.data.size()) throw ShapeError("tensor '" + t.name + "' payload does not match its shape");
      for (float v : t.data) w.f32(v);
    }
    w.finish();
  }
  fs::rename(staging, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
  Reader r(path);
  r.magic("MFCK");
  if (const auto version = r.u32(); version != 1) {
    throw LoadError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.seed = r.u64();
  ck.config_json = r.string();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.string(4096);
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw LoadError("implausible tensor rank in '" + path.string() + "'");
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(r.u32());
      n *= t.shape.back();
    }
    if (n > (1u << 30)) throw LoadError("implausible tensor size in '" + path.string() + "'");
    t.data.resize(n);
    for (float& v : t.data) v = r.f32();
    ck.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw LoadError("trailing bytes in '" + path.string() + "'");
  return ck;
}

void write_embeddings(const fs::path& path, const EmbeddingSet& e) {
  const std::uint32_t samples = static_cast<std::uint32_t>(e.sample_count());
  const std::uint32_t channels = static_cast<std::uint32_t>(e.channel_count());
  const std::uint32_t dim = static_cast<std::uint32_t>(e.dim());
  if (e.vectors.rows() != static_cast<Eigen::Index>(samples) * channels) {
    throw ShapeError("embedding set rows do not match samples x channels");
  }
  Writer w(path);
  w.bytes("MFL1", 4);
  w.u32(samples);
  w.u32(channels);
  w.u32(dim);
  const std::size_t slots = static_cast<std::size_t>(samples) * channels;
  std::vector<unsigned char> bitmap((slots + 7) / 8, 0);
  for (std::size_t i = 0; i < slots; ++i) {
    if (e.available(static_cast<Eigen::Index>(i / channels), static_cast<Eigen::Index>(i % channels))) {
      bitmap[i / 8] |= static_cast<unsigned char>(1u << (i % 8));
    }
  }
  w.bytes(bitmap.data(), bitmap.size());
  for (Eigen::Index r = 0; r < e.vectors.rows(); ++r) {
    for (Eigen::Index c = 0; c < e.vectors.cols(); ++c) w.f32(e.vectors(r, c));
  }
  w.finish();
}

EmbeddingSet read_embeddings(const fs::path& path, const std::vector<ChannelSet>& channels) {
  Reader r(path);
  r.magic("MFL1");
  const std::uint32_t samples = r.u32();
  const std::uint32_t channel_count = r.u32();
  const std::uint32_t dim = r.u32();
  if (channel_count != channels.size()) {
    throw LoadError("'" + path.string() + "' holds " + std::to_string(channel_count) + " channels, expected " +
                    std::to_string(channels.size()));
  }
  const std::size_t slots = static_cast<std::size_t>(samples) * channel_count;
  std::vector<unsigned char> bitmap((slots + 7) / 8);
  r.bytes(bitmap.data(), bitmap.size());
  EmbeddingSet e;
  e.channels = channels;
  e.available = BoolArray(samples, channel_count);
  for (std::size_t i = 0; i < slots; ++i) {
    e.available(static_cast<Eigen::Index>(i / channel_count), static_cast<Eigen::Index>(i % channel_count)) =
        (bitmap[i / 8] >> (i % 8)) & 1u;
  }
  e.vectors = MatrixXf(static_cast<Eigen::Index>(slots), dim);
  for (Eigen::Index row = 0; row < e.vectors.rows(); ++row) {
    for (Eigen::Index c = 0; c < e.vectors.cols(); ++c) e.vectors(row, c) = r.f32();
  }
  if (!r.at_end()) throw LoadError("trailing bytes in '" + path.string() + "'");
  return e;
}

}  // namespace mcfuse
