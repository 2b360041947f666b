// Small schemas and random samples shared by the test binaries.

#ifndef MCFUSE_TESTS_FIXTURES_HPP_
#define MCFUSE_TESTS_FIXTURES_HPP_

#include <random>
#include <string>
#include <vector>

#include "mcfuse/data.hpp"

namespace mcfuse::testing {

// Alternates sequence (dim 3, budget 3) and tabular (2 columns) modalities.
inline ModalitySchema mixed_schema(int modalities) {
  ModalitySchema schema;
  for (int m = 0; m < modalities; ++m) {
    if (m % 2 == 0) {
      schema.modalities.push_back({"seq" + std::to_string(m), ModalityKind::kSequence, 3, 3});
    } else {
      schema.modalities.push_back({"tab" + std::to_string(m), ModalityKind::kTabular, 2, 2});
    }
  }
  return schema;
}

// Sequence lengths vary in [1, budget + 1] so both padded tails and
// truncation occur.
inline Sample random_sample(const ModalitySchema& schema, const std::vector<bool>& presence, std::mt19937_64& rng,
                            const std::string& id = "s") {
  std::normal_distribution<float> normal;
  Sample s;
  s.id = id;
  for (int m = 0; m < schema.size(); ++m) {
    const ModalitySpec& spec = schema.modalities[m];
    if (!presence[m]) {
      s.payload.emplace_back();
      continue;
    }
    int rows = 1;
    if (spec.kind == ModalityKind::kSequence) {
      rows = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(spec.tokens + 1));
    }
    s.payload.emplace_back(MatrixXf::NullaryExpr(rows, spec.dim, [&]() { return normal(rng); }));
  }
  return s;
}

inline Sample full_sample(const ModalitySchema& schema, std::mt19937_64& rng, const std::string& id = "s") {
  return random_sample(schema, std::vector<bool>(static_cast<std::size_t>(schema.size()), true), rng, id);
}

// Random presence with at least one present and, when possible, one absent.
inline std::vector<bool> random_incomplete_presence(int modalities, std::mt19937_64& rng) {
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

}  // namespace mcfuse::testing

#endif  // MCFUSE_TESTS_FIXTURES_HPP_
