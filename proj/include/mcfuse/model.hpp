#ifndef MCFUSE_MODEL_HPP_
#define MCFUSE_MODEL_HPP_

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcfuse/autodiff.hpp"
#include "mcfuse/data.hpp"
#include "mcfuse/embedding.hpp"
#include "mcfuse/encoders.hpp"
#include "mcfuse/init.hpp"
#include "mcfuse/masking.hpp"

namespace mcfuse {

struct ModelConfig {
  Mode mode = Mode::kMca;
  int depth = 2;
  int width = 64;
  int heads = 8;
  int ff_multiplier = 4;
  int tokens_per_channel = 2;
  int embed_dim = 32;
  double temperature = 0.07;

  // Full-scale transformer settings (hidden 512, 8 heads, GeGLU x4, 8 tokens
  // per channel).
  static ModelConfig full_scale();
  static ModelConfig desk_scale();
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename Scalar>
struct EncoderLayer {
  Parameter<Scalar> attn_norm_gain, attn_norm_shift;
  Parameter<Scalar> query_weight, query_bias, key_weight, key_bias, value_weight, value_bias;
  Parameter<Scalar> out_weight, out_bias;
  Parameter<Scalar> ff_norm_gain, ff_norm_shift;
  Parameter<Scalar> ff_in_weight, ff_in_bias;  // [width x 2*hidden], GeGLU halves
  Parameter<Scalar> ff_out_weight, ff_out_bias;

  static EncoderLayer init(const std::string& prefix, int width, int ff_multiplier, Rng& rng) {
    const int hidden = width * ff_multiplier;
    EncoderLayer l;
    l.attn_norm_gain = ones<Scalar>(prefix + ".attn_norm.gain", 1, width);
    l.attn_norm_shift = zeros<Scalar>(prefix + ".attn_norm.shift", 1, width);
    l.query_weight = xavier<Scalar>(prefix + ".attn.query.weight", width, width, rng);
    l.query_bias = zeros<Scalar>(prefix + ".attn.query.bias", 1, width);
    l.key_weight = xavier<Scalar>(prefix + ".attn.key.weight", width, width, rng);
    l.key_bias = zeros<Scalar>(prefix + ".attn.key.bias", 1, width);
    l.value_weight = xavier<Scalar>(prefix + ".attn.value.weight", width, width, rng);
    l.value_bias = zeros<Scalar>(prefix + ".attn.value.bias", 1, width);
    l.out_weight = xavier<Scalar>(prefix + ".attn.out.weight", width, width, rng);
    l.out_bias = zeros<Scalar>(prefix + ".attn.out.bias", 1, width);
    l.ff_norm_gain = ones<Scalar>(prefix + ".ff_norm.gain", 1, width);
    l.ff_norm_shift = zeros<Scalar>(prefix + ".ff_norm.shift", 1, width);
    l.ff_in_weight = xavier<Scalar>(prefix + ".ff.in.weight", width, 2 * hidden, rng);
    l.ff_in_bias = zeros<Scalar>(prefix + ".ff.in.bias", 1, 2 * hidden);
    l.ff_out_weight = xavier<Scalar>(prefix + ".ff.out.weight", hidden, width, rng);
    l.ff_out_bias = zeros<Scalar>(prefix + ".ff.out.bias", 1, width);
    return l;
  }

  void collect(std::vector<Parameter<Scalar>*>& out) {
    out.insert(out.end(), {&attn_norm_gain, &attn_norm_shift, &query_weight, &query_bias, &key_weight,
                           &key_bias, &value_weight, &value_bias, &out_weight, &out_bias, &ff_norm_gain,
                           &ff_norm_shift, &ff_in_weight, &ff_in_bias, &ff_out_weight, &ff_out_bias});
  }
};

template <typename Scalar>
struct EncoderParams {
  std::vector<EncoderLayer<Scalar>> layers;
  int heads = 1;

  static EncoderParams init(int depth, int width, int heads, int ff_multiplier, Rng& rng) {
    EncoderParams p;
    p.heads = heads;
    for (int l = 0; l < depth; ++l) {
      p.layers.push_back(EncoderLayer<Scalar>::init("layers." + std::to_string(l), width, ff_multiplier, rng));
    }
    return p;
  }

  void collect(std::vector<Parameter<Scalar>*>& out) {
    for (auto& layer : layers) layer.collect(out);
  }
};

using MaskList = std::vector<std::shared_ptr<const AttentionMask>>;

/// Pre-norm transformer stack over `masks.size()` stacked sequences of
/// `seq_len` tokens each: x += attn(norm(x)); x += geglu_ff(norm(x)).
template <typename Scalar>
Var forward_encoder(Tape<Scalar>& t, Var tokens, int seq_len, const MaskList& masks,
                    EncoderParams<Scalar>& params) {
  Var x = tokens;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    EncoderLayer<Scalar>& L = params.layers[l];
    Var h = ad::layer_norm(t, x, t.leaf(L.attn_norm_gain), t.leaf(L.attn_norm_shift));
    Var q = ad::linear(t, h, t.leaf(L.query_weight), t.leaf(L.query_bias));
    Var k = ad::linear(t, h, t.leaf(L.key_weight), t.leaf(L.key_bias));
    Var v = ad::linear(t, h, t.leaf(L.value_weight), t.leaf(L.value_bias));
    Var a = ad::self_attention(t, q, k, v, seq_len, params.heads, masks);
    x = ad::add(t, x, ad::linear(t, a, t.leaf(L.out_weight), t.leaf(L.out_bias)));
    Var f = ad::layer_norm(t, x, t.leaf(L.ff_norm_gain), t.leaf(L.ff_norm_shift));
    f = ad::geglu(t, ad::linear(t, f, t.leaf(L.ff_in_weight), t.leaf(L.ff_in_bias)));
    x = ad::add(t, x, ad::linear(t, f, t.leaf(L.ff_out_weight), t.leaf(L.ff_out_bias)));
    if (!t.value(x).allFinite()) throw NumericFailure("non-finite activations", static_cast<int>(l));
  }
  return x;
}

template <typename Scalar>
Matrix<Scalar> forward_encoder(const Matrix<Scalar>& tokens, const AttentionMask& mask,
                               EncoderParams<Scalar>& params) {
  Tape<Scalar> t;
  Var x = t.constant(tokens);
  MaskList masks{std::make_shared<const AttentionMask>(mask)};
  return t.value(forward_encoder(t, x, static_cast<int>(tokens.rows()), masks, params));
}

struct ParameterTally {
  long encoders = 0;
  long layers = 0;
  long fusion_tokens = 0;
  long pooling_queries = 0;
  long projection = 0;

  long total() const { return encoders + layers + fusion_tokens + pooling_queries + projection; }
};

// Mean of the available embeddings, renormalized. Returns nullopt when nothing
// is available or the mean vanishes.
template <typename Derived>
std::optional<RowVector<double>> eao_inference_fusion(const Eigen::MatrixBase<Derived>& embeddings,
                                                      const std::vector<bool>& available) {
  RowVector<double> sum = RowVector<double>::Zero(embeddings.cols());
  int count = 0;
  for (Eigen::Index r = 0; r < embeddings.rows(); ++r) {
    if (!available[static_cast<std::size_t>(r)]) continue;
    sum += embeddings.row(r).template cast<double>();
    ++count;
  }
  if (count == 0) return std::nullopt;
  sum /= static_cast<double>(count);
  const double norm = sum.norm();
  if (norm < 1e-9) return std::nullopt;
  return RowVector<double>(sum / norm);
}

template <typename Scalar>
class Model {
 public:
  struct Output {
    Var embeddings;       // [channels*batch x embed_dim], channel-major
    BoolArray available;  // [batch x channels]
    int forward_passes = 0;
    int truncated_steps = 0;
  };

  Model(ModelConfig config, ModalitySchema schema, std::uint64_t seed)
      : config_(config), schema_(std::move(schema)) {
    config_.validate();
    schema_.validate();
    const int m_count = schema_.size();
    channels_ = embedding_channels(m_count, config_.mode);
    layout_ = build_token_layout(schema_.token_budgets(), config_.tokens_per_channel, config_.mode);

    Rng rng(seed);
    const int width = config_.width;
    for (int m = 0; m < m_count; ++m) {
      const ModalitySpec& spec = schema_.modalities[m];
      const std::string prefix = "modality." + std::to_string(m);
      if (spec.kind == ModalityKind::kSequence) {
        sequence_.push_back(SequenceEncoder<Scalar>::init(prefix, spec.dim, width, rng));
        tabular_.emplace_back();
      } else {
        sequence_.emplace_back();
        tabular_.push_back(TabularEncoder<Scalar>::init(prefix, spec.dim, width, rng));
      }
    }
    if (config_.mode != Mode::kEao) {
      fusion_tokens_ = truncated_normal<Scalar>("fusion_tokens", layout_.fusion_token_count(), width, 0.02, rng);
      pooling_queries_ = truncated_normal<Scalar>("pooling.queries", static_cast<Eigen::Index>(channels_.size()),
                                                  width, 0.02, rng);
      mask_cache_ = std::make_shared<MaskCache>(build_attention_mask(layout_, config_.mode));
    } else {
      for (const auto& subset : channels_) {
        int tokens = 0;
        for (int member : subset.members()) tokens += schema_.modalities[member].tokens;
        subset_caches_.push_back(std::make_shared<MaskCache>(full_attention_mask(tokens)));
      }
    }
    encoder_ = EncoderParams<Scalar>::init(config_.depth, width, config_.heads, config_.ff_multiplier, rng);
    projection_weight_ = truncated_normal<Scalar>("projection.weight", width, config_.embed_dim, 0.02, rng);
    projection_bias_ = zeros<Scalar>("projection.bias", 1, config_.embed_dim);
  }

  const ModelConfig& config() const { return config_; }
  const ModalitySchema& schema() const { return schema_; }
  const std::vector<ChannelSet>& channels() const { return channels_; }
  const TokenLayout& layout() const { return layout_; }
  EncoderParams<Scalar>& encoder() { return encoder_; }
  SequenceEncoder<Scalar>* sequence_encoder(int m) { return sequence_[m] ? &*sequence_[m] : nullptr; }
  TabularEncoder<Scalar>* tabular_encoder(int m) { return tabular_[m] ? &*tabular_[m] : nullptr; }

  // Trainable parameters in a fixed order.
  std::vector<Parameter<Scalar>*> parameters() {
    std::vector<Parameter<Scalar>*> out;
    for (int m = 0; m < schema_.size(); ++m) {
      if (sequence_[m]) sequence_[m]->collect(out);
      if (tabular_[m]) tabular_[m]->collect(out);
    }
    if (config_.mode != Mode::kEao) out.push_back(&fusion_tokens_);
    encoder_.collect(out);
    if (config_.mode != Mode::kEao) out.push_back(&pooling_queries_);
    out.push_back(&projection_weight_);
    out.push_back(&projection_bias_);
    return out;
  }

  ParameterTally tally() {
    ParameterTally tally;
    for (Parameter<Scalar>* p : parameters()) {
      const long n = static_cast<long>(p->size());
      const std::string& name = p->name;
      if (name.starts_with("modality.")) {
        tally.encoders += n;
      } else if (name.starts_with("layers.")) {
        tally.layers += n;
      } else if (name == "fusion_tokens") {
        tally.fusion_tokens += n;
      } else if (name == "pooling.queries") {
        tally.pooling_queries += n;
      } else {
        tally.projection += n;
      }
    }
    return tally;
  }

  void zero_grad() {
    for (Parameter<Scalar>* p : parameters()) p->zero_grad();
  }

  // Standardization statistics for tabular modalities (rounded to float so a
  // checkpoint round trip is exact).
  void set_tabular_stats(const std::vector<ColumnStats>& stats) {
    for (int m = 0; m < schema_.size(); ++m) {
      if (!tabular_[m]) continue;
      if (stats.at(m).mean.size() != tabular_[m]->column_count()) throw ShapeError("tabular stats size mismatch");
      tabular_[m]->mean = stats[m].mean.template cast<float>().template cast<double>();
      tabular_[m]->scale = stats[m].scale.template cast<float>().template cast<double>();
    }
  }

  // Non-trainable state: name -> [1 x n] rows.
  std::vector<std::pair<std::string, RowVector<double>*>> buffers() {
    std::vector<std::pair<std::string, RowVector<double>*>> out;
    for (int m = 0; m < schema_.size(); ++m) {
      if (!tabular_[m]) continue;
      const std::string prefix = "modality." + std::to_string(m) + ".stats";
      out.emplace_back(prefix + ".mean", &tabular_[m]->mean);
      out.emplace_back(prefix + ".scale", &tabular_[m]->scale);
    }
    return out;
  }

  // Embeds a batch. With `compact`, absent modalities (and steps beyond a
  // sequence's length) are removed from the token sequence instead of
  // padded; this requires a batch of one sample.
  Output forward(Tape<Scalar>& t, std::span<const Sample* const> batch, bool compact = false) {
    if (batch.empty()) throw InvalidInput("empty batch");
    if (compact && batch.size() != 1) throw InvalidInput("compact evaluation needs a batch of one");
    const int m_count = schema_.size();
    const int b_count = static_cast<int>(batch.size());
    const int c_count = static_cast<int>(channels_.size());

    Output out;
    std::vector<Var> parts;
    std::vector<int> part_offset(static_cast<std::size_t>(m_count), 0);
    // counts[b][m]: tokens sample b contributes for modality m; starts[b][m]:
    // its first row within the modality's encoded block.
    std::vector<std::vector<int>> counts(b_count, std::vector<int>(m_count, 0));
    std::vector<std::vector<int>> starts(b_count, std::vector<int>(m_count, 0));
    int rows = 0;
    for (int m = 0; m < m_count; ++m) {
      part_offset[m] = rows;
      Var encoded = encode_modality(t, m, batch, counts, starts, out.truncated_steps);
      if (encoded.id >= 0) {
        parts.push_back(encoded);
        rows += static_cast<int>(t.value(encoded).rows());
      }
    }
    const int fusion_offset = rows;
    if (config_.mode != Mode::kEao) parts.push_back(t.leaf(fusion_tokens_));
    if (parts.empty()) throw InvalidInput("batch has no present modality");
    Var all = ad::concat_rows(t, parts);

    std::vector<std::vector<bool>> presence;
    for (const Sample* s : batch) presence.push_back(s->presence());

    Var pooled;
    BoolArray available = BoolArray::Constant(b_count, c_count, false);
    if (config_.mode == Mode::kEao) {
      pooled = eao_passes(t, all, part_offset, counts, starts, compact, available, out.forward_passes);
    } else {
      pooled = single_pass(t, all, part_offset, fusion_offset, counts, starts, presence, compact, available);
      out.forward_passes = 1;
    }

    Var projected = ad::linear(t, pooled, t.leaf(projection_weight_), t.leaf(projection_bias_));
    std::vector<int> keep(static_cast<std::size_t>(c_count * b_count));
    for (int c = 0; c < c_count; ++c) {
      for (int b = 0; b < b_count; ++b) keep[c * b_count + b] = available(b, c) ? c * b_count + b : -1;
    }
    out.embeddings = ad::l2_normalize_rows(t, ad::gather_rows(t, projected, std::move(keep)));
    out.available = std::move(available);
    return out;
  }

  // Inference over many samples; sample-major float output.
  EmbeddingSet embed(const std::vector<const Sample*>& samples, int batch_size = 64) {
    EmbeddingSet set;
    set.channels = channels_;
    const int c_count = static_cast<int>(channels_.size());
    const int n = static_cast<int>(samples.size());
    set.vectors = MatrixXf::Zero(static_cast<Eigen::Index>(n) * c_count, config_.embed_dim);
    set.available = BoolArray::Constant(n, c_count, false);
    for (int begin = 0; begin < n; begin += batch_size) {
      const int end = std::min(n, begin + batch_size);
      Tape<Scalar> t;
      std::span<const Sample* const> batch(samples.data() + begin, static_cast<std::size_t>(end - begin));
      Output o = forward(t, batch);
      const Matrix<Scalar>& e = t.value(o.embeddings);
      const int b_count = end - begin;
      for (int b = 0; b < b_count; ++b) {
        for (int c = 0; c < c_count; ++c) {
          set.available(begin + b, c) = o.available(b, c);
          if (o.available(b, c)) set.vector(begin + b, c) = e.row(c * b_count + b).template cast<float>();
        }
      }
    }
    return set;
  }

 private:
  // Encodes modality m for every sample in the batch that carries it.
  Var encode_modality(Tape<Scalar>& t, int m, std::span<const Sample* const> batch,
                      std::vector<std::vector<int>>& counts, std::vector<std::vector<int>>& starts,
                      int& truncated) {
    const ModalitySpec& spec = schema_.modalities[m];
    std::vector<int> positions;
    std::vector<const MatrixXf*> payloads;
    int total = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& payload = batch[b]->payload.at(m);
      if (!payload) continue;
      if (payload->cols() != spec.dim) throw ShapeError("payload width does not match modality '" + spec.name + "'");
      const int steps = static_cast<int>(payload->rows());
      const int kept = spec.kind == ModalityKind::kSequence ? std::min(steps, spec.tokens) : spec.dim;
      if (spec.kind == ModalityKind::kSequence) truncated += steps - kept;
      counts[b][m] = kept;
      starts[b][m] = total;
      total += kept;
      payloads.push_back(&*payload);
    }
    if (payloads.empty()) return Var{};
    if (spec.kind == ModalityKind::kSequence) {
      Matrix<Scalar> steps(total, spec.dim);
      int r = 0;
      for (const MatrixXf* p : payloads) {
        const int kept = std::min(static_cast<int>(p->rows()), spec.tokens);
        steps.middleRows(r, kept) = p->topRows(kept).template cast<Scalar>();
        for (int i = 0; i < kept; ++i) positions.push_back(i);
        r += kept;
      }
      return sequence_[m]->encode(t, std::move(steps), positions);
    }
    Matrix<Scalar> values(static_cast<Eigen::Index>(payloads.size()), spec.dim);
    for (std::size_t i = 0; i < payloads.size(); ++i) {
      values.row(static_cast<Eigen::Index>(i)) = payloads[i]->row(0).template cast<Scalar>();
    }
    return tabular_[m]->encode(t, values);
  }

  Var single_pass(Tape<Scalar>& t, Var all, const std::vector<int>& part_offset, int fusion_offset,
                  const std::vector<std::vector<int>>& counts, const std::vector<std::vector<int>>& starts,
                  const std::vector<std::vector<bool>>& presence, bool compact, BoolArray& available) {
    const int m_count = schema_.size();
    const int b_count = static_cast<int>(counts.size());
    std::vector<int> fusion_lengths;
    for (const auto& block : layout_.fusion_blocks) fusion_lengths.push_back(block.length);
    const TokenLayout layout =
        compact ? make_layout(counts[0], layout_.fusion_channels, fusion_lengths) : layout_;
    const int seq_len = layout.total_tokens;

    std::vector<int> index(static_cast<std::size_t>(b_count) * seq_len, -1);
    MaskList masks;
    for (int b = 0; b < b_count; ++b) {
      std::vector<bool> is_pad(static_cast<std::size_t>(seq_len), false);
      for (int m = 0; m < m_count; ++m) {
        const Block& block = layout.modality_blocks[m];
        for (int i = 0; i < block.length; ++i) {
          const int token = block.offset + i;
          if (i < counts[b][m]) {
            index[b * seq_len + token] = part_offset[m] + starts[b][m] + i;
          } else {
            is_pad[token] = true;
          }
        }
      }
      int fusion_row = fusion_offset;
      for (const Block& block : layout.fusion_blocks) {
        for (int i = 0; i < block.length; ++i) index[b * seq_len + block.offset + i] = fusion_row++;
      }
      if (compact) {
        masks.push_back(std::make_shared<const AttentionMask>(build_attention_mask(layout, config_.mode)));
      } else {
        masks.push_back(mask_cache_->get(is_pad));
      }
    }
    Var tokens = ad::gather_rows(t, all, std::move(index));
    Var hidden = forward_encoder(t, tokens, seq_len, masks, encoder_);

    const int c_count = static_cast<int>(channels_.size());
    std::vector<ad::PoolGroup> groups;
    groups.reserve(static_cast<std::size_t>(c_count * b_count));
    for (int c = 0; c < c_count; ++c) {
      const ChannelSet& channel = channels_[c];
      for (int b = 0; b < b_count; ++b) {
        ad::PoolGroup group{c, {}};
        if (channel.unimodal()) {
          const int m = channel.members()[0];
          const Block& block = layout.modality_blocks[m];
          for (int i = 0; i < counts[b][m]; ++i) group.rows.push_back(b * seq_len + block.offset + i);
        } else if (channel_availability(presence[b], {channel})[0]) {
          const Block& block = layout.fusion_blocks[c - m_count];
          for (int i = 0; i < block.length; ++i) group.rows.push_back(b * seq_len + block.offset + i);
        }
        available(b, c) = !group.rows.empty();
        groups.push_back(std::move(group));
      }
    }
    return ad::attention_pool(t, t.leaf(pooling_queries_), hidden, std::move(groups));
  }

  Var eao_passes(Tape<Scalar>& t, Var all, const std::vector<int>& part_offset,
                 const std::vector<std::vector<int>>& counts, const std::vector<std::vector<int>>& starts,
                 bool compact, BoolArray& available, int& passes) {
    const int b_count = static_cast<int>(counts.size());
    const int width = config_.width;
    std::vector<Var> means;
    for (std::size_t s = 0; s < channels_.size(); ++s) {
      const auto& members = channels_[s].members();
      bool any = false;
      for (int b = 0; b < b_count; ++b) {
        for (int m : members) any = any || counts[b][m] > 0;
      }
      if (!any) {
        means.push_back(t.constant(Matrix<Scalar>::Zero(b_count, width)));
        continue;
      }
      ++passes;
      std::vector<int> lengths;
      for (int m : members) lengths.push_back(compact ? counts[0][m] : schema_.modalities[m].tokens);
      const TokenLayout layout = make_layout(lengths, {}, {});
      const int seq_len = layout.total_tokens;

      std::vector<int> index(static_cast<std::size_t>(b_count) * seq_len, -1);
      std::vector<std::vector<int>> segments(static_cast<std::size_t>(b_count));
      MaskList masks;
      for (int b = 0; b < b_count; ++b) {
        std::vector<bool> is_pad(static_cast<std::size_t>(seq_len), false);
        for (std::size_t j = 0; j < members.size(); ++j) {
          const int m = members[j];
          const Block& block = layout.modality_blocks[j];
          for (int i = 0; i < block.length; ++i) {
            const int token = block.offset + i;
            if (i < counts[b][m]) {
              index[b * seq_len + token] = part_offset[m] + starts[b][m] + i;
              segments[b].push_back(b * seq_len + token);
            } else {
              is_pad[token] = true;
            }
          }
        }
        available(b, static_cast<Eigen::Index>(s)) = !segments[b].empty();
        if (compact) {
          masks.push_back(std::make_shared<const AttentionMask>(full_attention_mask(seq_len)));
        } else {
          masks.push_back(subset_caches_[s]->get(is_pad));
        }
      }
      Var tokens = ad::gather_rows(t, all, std::move(index));
      Var hidden = forward_encoder(t, tokens, seq_len, masks, encoder_);
      means.push_back(ad::segment_mean(t, hidden, std::move(segments)));
    }
    return ad::concat_rows(t, means);
  }

  ModelConfig config_;
  ModalitySchema schema_;
  std::vector<ChannelSet> channels_;
  TokenLayout layout_;
  std::vector<std::optional<SequenceEncoder<Scalar>>> sequence_;
  std::vector<std::optional<TabularEncoder<Scalar>>> tabular_;
  Parameter<Scalar> fusion_tokens_;
  EncoderParams<Scalar> encoder_;
  Parameter<Scalar> pooling_queries_;
  Parameter<Scalar> projection_weight_;
  Parameter<Scalar> projection_bias_;
  std::shared_ptr<MaskCache> mask_cache_;
  std::vector<std::shared_ptr<MaskCache>> subset_caches_;
};

template <typename Scalar>
long parameter_count(Model<Scalar>& model) {
  return model.tally().total();
}

}  // namespace mcfuse

#endif  // MCFUSE_MODEL_HPP_
