// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fastprefill/mpu.hpp"
#include "fastprefill/quant.hpp"

namespace fastprefill {

struct SigConfig {
  size_t block_size = 128;
  double tau = 0.1;
  double gamma = 0.9;

  void validate() const;
};

enum class Pattern { vertical_slash, query_aware };

std::string_view pattern_name(Pattern p);
Pattern parse_pattern(std::string_view name);

// Block-level statistics of one head. All vectors have num_blocks entries and
// sum to 1 in Q16.16 up to rounding. a_s is indexed by diagonal offset.
struct BlockScores {
  size_t num_blocks = 0;
  FixedVec a_hat;
  FixedVec a_bar;
  FixedVec a_v;
  FixedVec a_s;
};

// Selected key blocks per query block, each list sorted ascending.
struct BlockIndexSet {
  uint32_t head = 0;
  Pattern pattern = Pattern::vertical_slash;
  std::vector<std::vector<uint32_t>> blocks;

  size_t num_blocks() const { return blocks.size(); }
  size_t total() const;
  friend bool operator==(const BlockIndexSet&, const BlockIndexSet&) = default;
};

// One coverage decision: the score vector and the indices chosen from it.
struct CoverageRecord {
  FixedVec scores;
  std::vector<uint32_t> selected;

  friend bool operator==(const CoverageRecord&, const CoverageRecord&) = default;
};

struct SigResult {
  BlockIndexSet indices;
  BlockScores scores;
  double divergence = 0.0;
  // vertical_slash: {vertical, slash}; query_aware: {flattened causal map}.
  std::vector<CoverageRecord> coverage;
  uint64_t mpu_cycles = 0;
  uint64_t mpu_macs = 0;
  size_t key_blocks_consumed = 0;
};

// Column means of a B x d block in Q16.16 INT8-grid units.
std::vector<int32_t> pool_mean(const QTensor& block);

// Q16.16 logit of two pooled rows: dot(p, k) * scale, where scale maps the
// INT8 grid product to real units (q_scale * k_scale / sqrt(d)).
int32_t pooled_logit(std::span<const int32_t> pooled_q, std::span<const int32_t> pooled_k, double scale);

// Streaming block statistics for the last query block. Key blocks must be
// pushed exactly once each, in ascending block order. State is O(num_blocks)
// plus one B x B score tile.
class BlockScoreStream {
 public:
  BlockScoreStream(const QTensor& q_hat, size_t seq_len, const SigConfig& cfg, const MpuConfig& mpu);

  void push(size_t block_index, const QTensor& key_block);
  BlockScores finish();

  size_t num_blocks() const { return num_blocks_; }
  size_t consumed() const { return next_; }
  uint64_t mpu_cycles() const { return cycles_; }
  uint64_t mpu_macs() const { return macs_; }
  // Pooled key rows (num_blocks x d); valid once every block has been pushed.
  const std::vector<int32_t>& pooled_keys() const { return pooled_k_; }
  double key_scale() const { return key_scale_; }

 private:
  static constexpr size_t kLevels = 24;

  QTensor q_hat_;
  std::vector<int32_t> pooled_q_;
  size_t seq_len_;
  size_t block_size_;
  size_t num_blocks_;
  size_t head_dim_;
  MpuConfig mpu_;
  size_t next_ = 0;
  uint64_t cycles_ = 0;
  uint64_t macs_ = 0;
  double key_scale_ = 1.0;
  std::vector<int64_t> top_level_;  // per block; INT64_MIN when fully masked
  std::vector<int64_t> histogram_;  // num_blocks x kLevels
  std::vector<int32_t> pooled_k_;   // num_blocks x d
  std::vector<int32_t> bar_logit_;  // num_blocks
};

// sqrt of the Jensen-Shannon divergence (natural log).
double jsd_sqrt(const FixedVec& p, const FixedVec& q);

Pattern classify_head(const BlockScores& scores, double tau);

// Smallest set of indices, taken in descending score order (lower index first
// on ties), whose cumulative score reaches gamma. Uses a bounded candidate
// heap rather than a full sort. gamma >= 1 selects everything.
std::vector<uint32_t> coverage_select(const FixedVec& scores, double gamma);

// Same contract through a full stable sort.
std::vector<uint32_t> coverage_select_oracle(const FixedVec& scores, double gamma);

// Q16.16 coverage threshold for gamma.
int64_t coverage_threshold(double gamma);

BlockIndexSet expand_vertical_slash(std::span<const uint32_t> verticals, std::span<const uint32_t> slash_offsets,
                                    size_t num_blocks, uint32_t head = 0);

// Flattened, normalized pooled attention over causal (q_b, k_b) pairs in
// row-major order: index q(q+1)/2 + k.
FixedVec query_aware_map(std::span<const int32_t> pooled_q, std::span<const int32_t> pooled_k, size_t num_blocks,
                         size_t head_dim, double logit_scale);

BlockIndexSet query_aware_indices(const FixedVec& flat_map, std::span<const uint32_t> selected, size_t num_blocks,
                                  uint32_t head = 0);

// Full per-head index generation, streaming over key blocks. q and k hold at
// least seq_len rows of one head (head_dim columns).
SigResult generate_indices(uint32_t head, const QTensor& q, const QTensor& k, size_t seq_len, const SigConfig& cfg,
                           const MpuConfig& mpu);

// Materializing reference with the same contract.
SigResult generate_indices_oracle(uint32_t head, const QTensor& q, const QTensor& k, size_t seq_len,
                                  const SigConfig& cfg);

// One JSON object per head: {"head", "pattern", "blocks": [[...], ...]}.
std::string index_set_to_json(const BlockIndexSet& set);
BlockIndexSet index_set_from_json(std::string_view line);

}  // namespace fastprefill
