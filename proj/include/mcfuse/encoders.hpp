#ifndef MCFUSE_ENCODERS_HPP_
#define MCFUSE_ENCODERS_HPP_

#include <string>
#include <vector>

#include "mcfuse/autodiff.hpp"
#include "mcfuse/data.hpp"
#include "mcfuse/init.hpp"

namespace mcfuse {

/// Interleaved sinusoidal position code: entry 2i is sin(pos / 10000^(2i/width)),
/// entry 2i+1 the matching cosine. Width must be even.
RowVector<double> sinusoidal(int pos, int width);

template <typename Scalar>
Matrix<Scalar> sinusoidal_rows(const std::vector<int>& positions, int width) {
  Matrix<Scalar> out(static_cast<Eigen::Index>(positions.size()), width);
  for (std::size_t r = 0; r < positions.size(); ++r) {
    out.row(static_cast<Eigen::Index>(r)) = sinusoidal(positions[r], width).cast<Scalar>();
  }
  return out;
}

/// Sequence steps: linear -> layer norm -> + sinusoidal(step).
template <typename Scalar>
struct SequenceEncoder {
  Parameter<Scalar> weight;  // [input_dim x width]
  Parameter<Scalar> bias;    // [1 x width]
  Parameter<Scalar> gain;
  Parameter<Scalar> shift;

  static SequenceEncoder init(const std::string& prefix, int input_dim, int width, Rng& rng) {
    return {xavier<Scalar>(prefix + ".linear.weight", input_dim, width, rng),
            zeros<Scalar>(prefix + ".linear.bias", 1, width), ones<Scalar>(prefix + ".norm.gain", 1, width),
            zeros<Scalar>(prefix + ".norm.shift", 1, width)};
  }

  void collect(std::vector<Parameter<Scalar>*>& out) {
    out.insert(out.end(), {&weight, &bias, &gain, &shift});
  }

  int input_dim() const { return static_cast<int>(weight.value.rows()); }
  int width() const { return static_cast<int>(weight.value.cols()); }

  // steps: stacked raw vectors; positions[r] is the step index of row r.
  Var encode(Tape<Scalar>& t, Matrix<Scalar> steps, const std::vector<int>& positions) {
    if (steps.cols() != input_dim()) throw ShapeError("sequence step has the wrong dimension");
    if (static_cast<std::size_t>(steps.rows()) != positions.size()) {
      throw ShapeError("one position per sequence step is required");
    }
    Var x = t.constant(std::move(steps));
    Var h = ad::layer_norm(t, ad::linear(t, x, t.leaf(weight), t.leaf(bias)), t.leaf(gain), t.leaf(shift));
    return ad::add(t, h, t.constant(sinusoidal_rows<Scalar>(positions, width())));
  }
};

/// Encodes one sample's steps, keeping at most `budget` of them (earliest first).
template <typename Scalar>
Matrix<Scalar> encode_sequence(SequenceEncoder<Scalar>& encoder, const Matrix<Scalar>& steps, int budget,
                               int* truncated = nullptr) {
  const Eigen::Index kept = std::min<Eigen::Index>(steps.rows(), budget);
  if (truncated != nullptr) *truncated = static_cast<int>(steps.rows() - kept);
  std::vector<int> positions(static_cast<std::size_t>(kept));
  for (Eigen::Index i = 0; i < kept; ++i) positions[i] = static_cast<int>(i);
  Tape<Scalar> t;
  return t.value(encoder.encode(t, steps.topRows(kept), positions));
}

/// Tabular cells: MLP(1 -> width, ReLU, width -> width) of the standardized
/// value plus a learned embedding of the column index.
template <typename Scalar>
struct TabularEncoder {
  Parameter<Scalar> hidden_weight;  // [1 x width]
  Parameter<Scalar> hidden_bias;
  Parameter<Scalar> out_weight;     // [width x width]
  Parameter<Scalar> out_bias;
  Parameter<Scalar> columns;        // [columns x width]
  RowVector<double> mean;           // standardization, not trained
  RowVector<double> scale;

  static TabularEncoder init(const std::string& prefix, int column_count, int width, Rng& rng) {
    return {xavier<Scalar>(prefix + ".mlp.0.weight", 1, width, rng),
            zeros<Scalar>(prefix + ".mlp.0.bias", 1, width),
            xavier<Scalar>(prefix + ".mlp.1.weight", width, width, rng),
            zeros<Scalar>(prefix + ".mlp.1.bias", 1, width),
            truncated_normal<Scalar>(prefix + ".column_embedding", column_count, width, 0.02, rng),
            RowVector<double>::Zero(column_count),
            RowVector<double>::Ones(column_count)};
  }

  void collect(std::vector<Parameter<Scalar>*>& out) {
    out.insert(out.end(), {&hidden_weight, &hidden_bias, &out_weight, &out_bias, &columns});
  }

  int column_count() const { return static_cast<int>(columns.value.rows()); }
  int width() const { return static_cast<int>(columns.value.cols()); }

  // rows: [samples x columns] raw values -> [samples*columns x width] tokens.
  Var encode(Tape<Scalar>& t, const Matrix<Scalar>& rows) {
    if (rows.cols() != column_count()) throw ShapeError("tabular row has the wrong column count");
    const Eigen::Index n = rows.rows() * rows.cols();
    Matrix<Scalar> cells(n, 1);
    std::vector<int> column_index(static_cast<std::size_t>(n));
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      for (Eigen::Index c = 0; c < rows.cols(); ++c) {
        const Eigen::Index i = r * rows.cols() + c;
        cells(i, 0) = static_cast<Scalar>((static_cast<double>(rows(r, c)) - mean(c)) / scale(c));
        column_index[i] = static_cast<int>(c);
      }
    }
    Var x = t.constant(std::move(cells));
    Var h = ad::relu(t, ad::linear(t, x, t.leaf(hidden_weight), t.leaf(hidden_bias)));
    Var v = ad::linear(t, h, t.leaf(out_weight), t.leaf(out_bias));
    return ad::add(t, v, ad::gather_rows(t, t.leaf(columns), std::move(column_index)));
  }
};

template <typename Scalar>
Matrix<Scalar> encode_tabular(TabularEncoder<Scalar>& encoder, const Matrix<Scalar>& row) {
  Tape<Scalar> t;
  return t.value(encoder.encode(t, row));
}

}  // namespace mcfuse

#endif  // MCFUSE_ENCODERS_HPP_
