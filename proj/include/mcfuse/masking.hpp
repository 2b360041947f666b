#ifndef MCFUSE_MASKING_HPP_
#define MCFUSE_MASKING_HPP_

#include <map>
#include <memory>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include "mcfuse/core.hpp"

namespace mcfuse {

enum class Mode { kMca, kZorro, kEao };

std::string to_string(Mode mode);
Mode parse_mode(std::string_view text);

// A nonempty, strictly increasing subset of modality indices.
class ChannelSet {
 public:
  ChannelSet() = default;
  explicit ChannelSet(std::vector<int> members);

  const std::vector<int>& members() const { return members_; }
  int size() const { return static_cast<int>(members_.size()); }
  bool contains(int modality) const;
  bool unimodal() const { return members_.size() == 1; }

  // "[0,2,3]"
  std::string label() const;

  friend bool operator==(const ChannelSet&, const ChannelSet&) = default;

 private:
  std::vector<int> members_;
};

// Size ascending, then lexicographic.
bool canonical_less(const ChannelSet& a, const ChannelSet& b);

// MCA: every subset of size >= 2. Zorro: the single full set. EAO: all
// subsets of size 1 and 2 (one per forward pass).
std::vector<ChannelSet> enumerate_channels(int modality_count, Mode mode);

// Channels that own a pooled embedding, unimodal channels first. For EAO this
// is the forward-pass subset list.
std::vector<ChannelSet> embedding_channels(int modality_count, Mode mode);

struct Block {
  int offset = 0;
  int length = 0;
  bool contains(int token) const { return token >= offset && token < offset + length; }
};

struct TokenLayout {
  std::vector<Block> modality_blocks;
  std::vector<ChannelSet> fusion_channels;
  std::vector<Block> fusion_blocks;
  int total_tokens = 0;

  int modality_count() const { return static_cast<int>(modality_blocks.size()); }
  int fusion_token_count() const;
  // Modality owning the token, or -1 for a fusion token.
  int modality_of(int token) const;
  // Index into fusion_blocks, or -1 for a modality token.
  int fusion_block_of(int token) const;
};

// Per-modality token budgets drive the modality blocks. EAO layouts carry no
// fusion blocks.
TokenLayout build_token_layout(const std::vector<int>& modality_tokens, int tokens_per_channel,
                               Mode mode);

// Lays out blocks back to back without validation; zero-length blocks allowed.
TokenLayout make_layout(const std::vector<int>& modality_lengths,
                        const std::vector<ChannelSet>& fusion_channels,
                        const std::vector<int>& fusion_lengths);

using AttentionMask = BoolArray;  // [query x key]

AttentionMask build_attention_mask(const TokenLayout& layout, Mode mode);

// The EAO mask: every pair allowed; only padding is applied later.
AttentionMask full_attention_mask(int tokens);

// Pad tokens lose their keys for every other query and keep only their own
// diagonal entry as queries.
AttentionMask apply_token_padding(const AttentionMask& mask, const std::vector<bool>& is_pad);
AttentionMask apply_padding(const AttentionMask& mask, const TokenLayout& layout,
                            const std::vector<bool>& presence);
std::vector<bool> pad_tokens(const TokenLayout& layout, const std::vector<bool>& presence);

std::vector<bool> channel_availability(const std::vector<bool>& presence,
                                       const std::vector<ChannelSet>& channels);

// Rows of '0'/'1', one line per query.
std::string to_bitmap_text(const AttentionMask& mask);
AttentionMask parse_bitmap_text(std::string_view text);

// Padded masks for one base mask, keyed by pad pattern. Concurrent readers,
// single writer on insertion.
class MaskCache {
 public:
  explicit MaskCache(AttentionMask base) : base_(std::move(base)) {}

  std::shared_ptr<const AttentionMask> get(const std::vector<bool>& is_pad);
  const AttentionMask& base() const { return base_; }
  std::size_t size() const;

 private:
  AttentionMask base_;
  mutable std::shared_mutex mutex_;
  std::map<std::vector<bool>, std::shared_ptr<const AttentionMask>> cache_;
};

}  // namespace mcfuse

#endif  // MCFUSE_MASKING_HPP_
