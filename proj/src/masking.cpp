#include "mcfuse/masking.hpp"

#include <algorithm>
#include <mutex>
#include <sstream>

namespace mcfuse {

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::kMca:
      return "MCA";
    case Mode::kZorro:
      return "Zorro";
    case Mode::kEao:
      return "EAO";
  }
  return "?";
}

Mode parse_mode(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "mca") return Mode::kMca;
  if (lower == "zorro") return Mode::kZorro;
  if (lower == "eao") return Mode::kEao;
  throw InvalidConfig("unknown mode '" + std::string(text) + "'");
}

ChannelSet::ChannelSet(std::vector<int> members) : members_(std::move(members)) {
  if (members_.empty()) throw InvalidSchema("channel set must be nonempty");
  for (std::size_t i = 0; i < members_.size(); ++i) {
    if (members_[i] < 0 || (i > 0 && members_[i] <= members_[i - 1])) {
      throw InvalidSchema("channel members must be strictly increasing and nonnegative");
    }
  }
}

bool ChannelSet::contains(int modality) const {
  return std::binary_search(members_.begin(), members_.end(), modality);
}

std::string ChannelSet::label() const {
  std::string out = "[";
  for (std::size_t i = 0; i < members_.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(members_[i]);
  }
  return out + "]";
}

bool canonical_less(const ChannelSet& a, const ChannelSet& b) {
  if (a.size() != b.size()) return a.size() < b.size();
  return a.members() < b.members();
}

namespace {

std::vector<ChannelSet> subsets_by_size(int m, int min_size, int max_size) {
  std::vector<ChannelSet> out;
  for (unsigned bits = 1; bits < (1u << m); ++bits) {
    const int count = __builtin_popcount(bits);
    if (count < min_size || count > max_size) continue;
    std::vector<int> members;
    for (int i = 0; i < m; ++i) {
      if (bits & (1u << i)) members.push_back(i);
    }
    out.emplace_back(std::move(members));
  }
  std::sort(out.begin(), out.end(), canonical_less);
  return out;
}

void check_modality_count(int m) {
  if (m < 2) throw InvalidSchema("at least two modalities are required");
  if (m > 16) throw InvalidSchema("too many modalities for channel enumeration");
}

}  // namespace

std::vector<ChannelSet> enumerate_channels(int modality_count, Mode mode) {
  check_modality_count(modality_count);
  switch (mode) {
    case Mode::kMca:
      return subsets_by_size(modality_count, 2, modality_count);
    case Mode::kZorro:
      return subsets_by_size(modality_count, modality_count, modality_count);
    case Mode::kEao:
      return subsets_by_size(modality_count, 1, 2);
  }
  return {};
}

std::vector<ChannelSet> embedding_channels(int modality_count, Mode mode) {
  if (mode == Mode::kEao) return enumerate_channels(modality_count, mode);
  auto out = subsets_by_size(modality_count, 1, 1);
  for (auto& channel : enumerate_channels(modality_count, mode)) out.push_back(std::move(channel));
  return out;
}

int TokenLayout::fusion_token_count() const {
  int total = 0;
  for (const auto& block : fusion_blocks) total += block.length;
  return total;
}

int TokenLayout::modality_of(int token) const {
  for (int m = 0; m < modality_count(); ++m) {
    if (modality_blocks[m].contains(token)) return m;
  }
  return -1;
}

int TokenLayout::fusion_block_of(int token) const {
  for (std::size_t f = 0; f < fusion_blocks.size(); ++f) {
    if (fusion_blocks[f].contains(token)) return static_cast<int>(f);
  }
  return -1;
}

TokenLayout make_layout(const std::vector<int>& modality_lengths,
                        const std::vector<ChannelSet>& fusion_channels,
                        const std::vector<int>& fusion_lengths) {
  TokenLayout layout;
  int offset = 0;
  for (int length : modality_lengths) {
    layout.modality_blocks.push_back({offset, length});
    offset += length;
  }
  layout.fusion_channels = fusion_channels;
  for (int length : fusion_lengths) {
    layout.fusion_blocks.push_back({offset, length});
    offset += length;
  }
  layout.total_tokens = offset;
  return layout;
}

TokenLayout build_token_layout(const std::vector<int>& modality_tokens, int tokens_per_channel,
                               Mode mode) {
  const int m = static_cast<int>(modality_tokens.size());
  check_modality_count(m);
  if (tokens_per_channel < 1) throw InvalidSchema("tokens_per_channel must be at least 1");
  for (int length : modality_tokens) {
    if (length < 1) throw InvalidSchema("modality token budget must be at least 1");
  }
  if (mode == Mode::kEao) return make_layout(modality_tokens, {}, {});

  const int mca_channels = static_cast<int>(enumerate_channels(m, Mode::kMca).size());
  auto channels = enumerate_channels(m, mode);
  std::vector<int> lengths;
  if (mode == Mode::kMca) {
    lengths.assign(channels.size(), tokens_per_channel);
  } else {
    // One block carrying the same fusion-token total as MCA.
    lengths.assign(1, mca_channels * tokens_per_channel);
  }
  return make_layout(modality_tokens, channels, lengths);
}

AttentionMask build_attention_mask(const TokenLayout& layout, Mode mode) {
  if (mode == Mode::kEao) throw InvalidConfig("EAO uses full_attention_mask with padding only");
  const int t = layout.total_tokens;
  AttentionMask mask = AttentionMask::Constant(t, t, false);
  for (const auto& block : layout.modality_blocks) {
    mask.block(block.offset, block.offset, block.length, block.length).setConstant(true);
  }
  for (std::size_t f = 0; f < layout.fusion_blocks.size(); ++f) {
    const Block& fusion = layout.fusion_blocks[f];
    mask.block(fusion.offset, fusion.offset, fusion.length, fusion.length).setConstant(true);
    for (int member : layout.fusion_channels[f].members()) {
      const Block& source = layout.modality_blocks.at(member);
      mask.block(fusion.offset, source.offset, fusion.length, source.length).setConstant(true);
    }
  }
  return mask;
}

AttentionMask full_attention_mask(int tokens) {
  return AttentionMask::Constant(tokens, tokens, true);
}

AttentionMask apply_token_padding(const AttentionMask& mask, const std::vector<bool>& is_pad) {
  if (static_cast<Eigen::Index>(is_pad.size()) != mask.rows()) {
    throw ShapeError("pad flags do not match mask size");
  }
  AttentionMask out = mask;
  for (Eigen::Index p = 0; p < out.rows(); ++p) {
    if (!is_pad[p]) continue;
    out.col(p).setConstant(false);
    out.row(p).setConstant(false);
    out(p, p) = true;
  }
  return out;
}

std::vector<bool> pad_tokens(const TokenLayout& layout, const std::vector<bool>& presence) {
  if (static_cast<int>(presence.size()) != layout.modality_count()) {
    throw ShapeError("presence length does not match modality count");
  }
  std::vector<bool> is_pad(layout.total_tokens, false);
  for (int m = 0; m < layout.modality_count(); ++m) {
    if (presence[m]) continue;
    const Block& block = layout.modality_blocks[m];
    for (int i = 0; i < block.length; ++i) is_pad[block.offset + i] = true;
  }
  return is_pad;
}

AttentionMask apply_padding(const AttentionMask& mask, const TokenLayout& layout,
                            const std::vector<bool>& presence) {
  return apply_token_padding(mask, pad_tokens(layout, presence));
}

std::vector<bool> channel_availability(const std::vector<bool>& presence,
                                       const std::vector<ChannelSet>& channels) {
  std::vector<bool> out;
  out.reserve(channels.size());
  for (const auto& channel : channels) {
    bool any = false;
    for (int member : channel.members()) {
      if (member >= static_cast<int>(presence.size())) {
        throw ShapeError("channel member outside presence bitmap");
      }
      any = any || presence[member];
    }
    out.push_back(any);
  }
  return out;
}

std::string to_bitmap_text(const AttentionMask& mask) {
  std::string out;
  out.reserve(static_cast<std::size_t>(mask.rows() * (mask.cols() + 1)));
  for (Eigen::Index q = 0; q < mask.rows(); ++q) {
    for (Eigen::Index k = 0; k < mask.cols(); ++k) out += mask(q, k) ? '1' : '0';
    out += '\n';
  }
  return out;
}

AttentionMask parse_bitmap_text(std::string_view text) {
  std::vector<std::string> rows;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) rows.push_back(line);
  }
  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  AttentionMask mask(n, n);
  for (Eigen::Index q = 0; q < n; ++q) {
    if (static_cast<Eigen::Index>(rows[q].size()) != n) throw ShapeError("bitmap is not square");
    for (Eigen::Index k = 0; k < n; ++k) {
      const char c = rows[q][k];
      if (c != '0' && c != '1') throw InvalidInput("bitmap must contain only 0 and 1");
      mask(q, k) = c == '1';
    }
  }
  return mask;
}

std::shared_ptr<const AttentionMask> MaskCache::get(const std::vector<bool>& is_pad) {
  {
    std::shared_lock lock(mutex_);
    auto it = cache_.find(is_pad);
    if (it != cache_.end()) return it->second;
  }
  auto mask = std::make_shared<const AttentionMask>(apply_token_padding(base_, is_pad));
  std::unique_lock lock(mutex_);
  auto [it, inserted] = cache_.emplace(is_pad, std::move(mask));
  return it->second;
}

std::size_t MaskCache::size() const {
  std::shared_lock lock(mutex_);
  return cache_.size();
}

}  // namespace mcfuse
