#include "mcfuse/encoders.hpp"

#include <cmath>

namespace mcfuse {

RowVector<double> sinusoidal(int pos, int width) {
  if (width <= 0 || width % 2 != 0) throw InvalidConfig("sinusoidal width must be positive and even");
  RowVector<double> out(width);
  for (int i = 0; 2 * i < width; ++i) {
    const double rate = std::pow(10000.0, static_cast<double>(2 * i) / width);
    out(2 * i) = std::sin(pos / rate);
    out(2 * i + 1) = std::cos(pos / rate);
  }
  return out;
}

}  // namespace mcfuse
