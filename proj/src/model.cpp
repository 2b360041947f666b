#include "mcfuse/model.hpp"

namespace mcfuse {

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.depth = 4;
  c.width = 512;
  c.heads = 8;
  c.ff_multiplier = 4;
  c.tokens_per_channel = 8;
  c.embed_dim = 512;
  return c;
}

ModelConfig ModelConfig::desk_scale() { return ModelConfig{}; }

void ModelConfig::validate() const {
  if (depth < 0) throw InvalidConfig("depth must be nonnegative");
  if (width < 2 || width % 2 != 0) throw InvalidConfig("width must be even and at least 2");
  if (heads < 1 || width % heads != 0) throw InvalidConfig("width must be divisible by heads");
  if (ff_multiplier < 1) throw InvalidConfig("ff_multiplier must be at least 1");
  if (tokens_per_channel < 1) throw InvalidConfig("tokens_per_channel must be at least 1");
  if (embed_dim < 1) throw InvalidConfig("embed_dim must be at least 1");
  if (!(temperature > 0)) throw InvalidConfig("temperature must be positive");
}

}  // namespace mcfuse
