// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fastprefill/mpu.hpp"
#include "fastprefill/quant.hpp"
#include "fastprefill/sigu.hpp"

namespace fastprefill {

struct BlockKey {
  uint32_t kv_head = 0;
  uint32_t block = 0;

  friend auto operator<=>(const BlockKey&, const BlockKey&) = default;
};

struct Consumer {
  uint32_t head = 0;     // query head
  uint32_t q_block = 0;

  friend auto operator<=>(const Consumer&, const Consumer&) = default;
};

// Inverted index: for every KV block, the (query head, query block) pairs that
// read it, ordered by head then query block.
class JobList {
 public:
  JobList() = default;
  // One index set per query head; heads [g*group, (g+1)*group) share KV head g.
  JobList(const std::vector<BlockIndexSet>& sets, size_t num_kv_heads);

  size_t num_kv_heads() const { return num_kv_heads_; }
  size_t num_blocks() const { return num_blocks_; }
  size_t group_size() const { return group_; }
  size_t num_jobs() const { return consumers_.size(); }

  std::span<const Consumer> consumers(BlockKey key) const;
  uint32_t use_count(BlockKey key) const { return static_cast<uint32_t>(consumers(key).size()); }
  // Selected-block count of one (head, q_block) accumulator.
  uint32_t pending(const Consumer& c) const { return pending_[c.head * num_blocks_ + c.q_block]; }
  size_t num_query_heads() const { return pending_.size() / std::max<size_t>(num_blocks_, 1); }

 private:
  size_t slot(BlockKey key) const { return static_cast<size_t>(key.kv_head) * num_blocks_ + key.block; }

  size_t num_kv_heads_ = 0;
  size_t num_blocks_ = 0;
  size_t group_ = 1;
  std::vector<size_t> offsets_;  // num_kv_heads * num_blocks + 1
  std::vector<Consumer> consumers_;
  std::vector<uint32_t> pending_;
};

// One fetch of a KV block by the attention unit, serving `consumers` jobs.
struct TraceRecord {
  BlockKey key;
  uint32_t consumers = 0;
  uint32_t pass = 0;

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

std::string trace_to_jsonl(const std::vector<TraceRecord>& trace);
std::vector<TraceRecord> trace_from_jsonl(const std::string& text);

// Running softmax state of one query block (B rows) in fixed point.
// m: row max logit (Q16.16); l: weight sum; acc: weighted V sum (B x d).
// l and acc carry 16 fractional bits on top of the 14-bit probability grid.
struct RowState {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<int64_t> m;
  std::vector<int64_t> l;
  std::vector<int64_t> acc;
  bool empty = true;
};

struct AttentionShape {
  size_t seq_len = 0;
  size_t block_size = 128;
  size_t head_dim = 0;
};

// Scores, softmax and value product of one (query block, key block) tile.
// causal masks key j > query i; keys at or past seq_len are masked.
RowState block_state(const QTensor& q_block, const QTensor& k_block, const QTensor& v_block, size_t q_index,
                     size_t k_index, const AttentionShape& shape, const MpuConfig& mpu, uint64_t* cycles);

// Online-softmax merge; an empty state is the identity.
RowState merge_states(const RowState& a, const RowState& b);

// acc / l in Q16.16 V-grid units (B x d).
std::vector<int32_t> finalize_state(const RowState& s);

struct SauConfig {
  size_t num_banks = 8;
  // Query blocks per pass; 0 runs every query block in one pass.
  size_t query_group_blocks = 0;
};

struct AttentionInput {
  std::vector<QTensor> q;  // per query head, >= seq_len rows
  std::vector<QTensor> k;  // per KV head
  std::vector<QTensor> v;  // per KV head
  AttentionShape shape;
};

struct AttentionOutput {
  std::vector<FixedMatrix> heads;  // per query head, seq_len x d, Q16.16 V-grid units
  std::vector<double> v_scale;     // per query head

  RealMatrix head_real(size_t h) const;
};

struct SauResult {
  AttentionOutput out;
  std::vector<TraceRecord> trace;
  uint64_t cycles = 0;
  uint64_t macs = 0;
  size_t jobs = 0;
  size_t passes = 0;
  size_t peak_live_accumulators = 0;
};

// Pass schedule: passes are query-block groups; inside a pass KV blocks run in
// (block, kv_head) order, each fetched once for all of its consumers.
std::vector<TraceRecord> schedule_trace(const JobList& jobs, const SauConfig& cfg);

SauResult sparse_attention(const AttentionInput& in, const std::vector<BlockIndexSet>& sets, const SauConfig& cfg,
                           const MpuConfig& mpu);

// Query-major reference: each (head, q_block) merges its selected key blocks
// in ascending order using the same kernels.
AttentionOutput sequential_attention(const AttentionInput& in, const std::vector<BlockIndexSet>& sets,
                                     const MpuConfig& mpu);

// Every causal block selected, query-major.
AttentionOutput dense_attention(const AttentionInput& in, const MpuConfig& mpu);

// Double-precision masked softmax attention on the dequantized inputs.
std::vector<RealMatrix> masked_attention_oracle(const AttentionInput& in, const std::vector<BlockIndexSet>& sets);

// max |a - b| / max |b|.
double normwise_error(const RealMatrix& a, const RealMatrix& b);

}  // namespace fastprefill
