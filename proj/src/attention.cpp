// SPDX-License-Identifier: Apache-2.0

#include "fastprefill/attention.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include <json.hpp>

namespace fastprefill {

namespace {

// Largest unnormalized probability; 14 bits.
constexpr int64_t kProbMax = 16383;

}  // namespace

JobList::JobList(const std::vector<BlockIndexSet>& sets, size_t num_kv_heads) : num_kv_heads_(num_kv_heads) {
  require(!sets.empty(), "JobList: no index sets");
  require(num_kv_heads >= 1 && sets.size() % num_kv_heads == 0,
          "JobList: query heads must be a multiple of KV heads");
  group_ = sets.size() / num_kv_heads;
  num_blocks_ = sets.front().num_blocks();
  pending_.assign(sets.size() * num_blocks_, 0);
  std::vector<size_t> count(num_kv_heads_ * num_blocks_ + 1, 0);
  for (size_t h = 0; h < sets.size(); ++h) {
    require(sets[h].num_blocks() == num_blocks_, "JobList: index sets disagree on block count");
    for (size_t qb = 0; qb < num_blocks_; ++qb) {
      for (uint32_t kb : sets[h].blocks[qb]) {
        require(kb <= qb, "JobList: non-causal block in index set");
        ++count[slot({static_cast<uint32_t>(h / group_), kb}) + 1];
      }
      pending_[h * num_blocks_ + qb] = static_cast<uint32_t>(sets[h].blocks[qb].size());
    }
  }
  offsets_.resize(count.size());
  for (size_t i = 1; i < count.size(); ++i) count[i] += count[i - 1];
  offsets_ = count;
  consumers_.resize(offsets_.back());
  std::vector<size_t> fill(offsets_.begin(), offsets_.end() - 1);
  for (size_t h = 0; h < sets.size(); ++h)
    for (size_t qb = 0; qb < num_blocks_; ++qb)
      for (uint32_t kb : sets[h].blocks[qb])
        consumers_[fill[slot({static_cast<uint32_t>(h / group_), kb})]++] = {static_cast<uint32_t>(h),
                                                                              static_cast<uint32_t>(qb)};
}

std::span<const Consumer> JobList::consumers(BlockKey key) const {
  require(key.kv_head < num_kv_heads_ && key.block < num_blocks_, "JobList: block key out of range");
  const size_t s = slot(key);
  return {consumers_.data() + offsets_[s], offsets_[s + 1] - offsets_[s]};
}

std::string trace_to_jsonl(const std::vector<TraceRecord>& trace) {
  std::string out;
  for (const auto& r : trace) {
    nlohmann::json j;
    j["kv_head"] = r.key.kv_head;
    j["block"] = r.key.block;
    j["consumers"] = r.consumers;
    j["pass"] = r.pass;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<TraceRecord> trace_from_jsonl(const std::string& text) {
  std::vector<TraceRecord> trace;
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TraceRecord r;
      r.key.kv_head = j.at("kv_head").get<uint32_t>();
      r.key.block = j.at("block").get<uint32_t>();
      r.consumers = j.at("consumers").get<uint32_t>();
      r.pass = j.value("pass", 0u);
      require(r.consumers >= 1, "trace: record with zero consumers");
      trace.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw Error("trace line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return trace;
}

RowState block_state(const QTensor& q_block, const QTensor& k_block, const QTensor& v_block, size_t q_index,
                     size_t k_index, const AttentionShape& shape, const MpuConfig& mpu, uint64_t* cycles) {
  const size_t B = shape.block_size;
  require(k_index <= q_index, "block_state: key block after query block");
  require(q_block.rows() == B && k_block.rows() == B && v_block.rows() == B, "block_state: blocks must have B rows");
  const GemmResult scores = gemm(q_block, k_block.transposed(), mpu);
  const double c = q_block.scale() * k_block.scale() / std::sqrt(static_cast<double>(shape.head_dim));

  RowState s;
  s.rows = B;
  s.cols = v_block.cols();
  s.m.assign(B, 0);
  s.l.assign(B, 0);
  s.empty = false;
  // P carries 14 bits as two INT8 planes, P = hi * 128 + lo, both in [0, 127].
  std::vector<int8_t> hi(B * B, 0), lo(B * B, 0);
  std::vector<int64_t> x(B);
  std::vector<uint8_t> live(B);
  for (size_t i = 0; i < B; ++i) {
    int64_t m = INT64_MIN;
    for (size_t j = 0; j < B; ++j) {
      live[j] = k_index * B + j < shape.seq_len && !(k_index == q_index && j > i);
      if (!live[j]) continue;
      x[j] = logit_q16(scores.tile.at(i, j), c);
      m = std::max(m, x[j]);
    }
    require(m != INT64_MIN, "block_state: fully masked row");
    int64_t l = 0;
    for (size_t j = 0; j < B; ++j) {
      if (!live[j]) continue;
      const int64_t p = (exp_lut(x[j] - m) * kProbMax + 32768) >> 16;
      hi[i * B + j] = static_cast<int8_t>(p >> 7);
      lo[i * B + j] = static_cast<int8_t>(p & 127);
      l += p;
    }
    s.m[i] = m;
    s.l[i] = l << kFracBits;
  }
  const GemmResult pv_hi = gemm(QTensor(B, B, std::move(hi), 1.0), v_block, mpu);
  const GemmResult pv_lo = gemm(QTensor(B, B, std::move(lo), 1.0), v_block, mpu);
  s.acc.resize(pv_hi.tile.data.size());
  for (size_t i = 0; i < s.acc.size(); ++i)
    s.acc[i] = ((static_cast<int64_t>(pv_hi.tile.data[i]) << 7) + pv_lo.tile.data[i]) << kFracBits;
  if (cycles != nullptr) *cycles += scores.cycles + pv_hi.cycles + pv_lo.cycles;
  return s;
}

RowState merge_states(const RowState& a, const RowState& b) {
  if (a.empty) return b;
  if (b.empty) return a;
  require(a.rows == b.rows && a.cols == b.cols, "merge_states: shape mismatch");
  RowState s = a;
  for (size_t i = 0; i < a.rows; ++i) {
    const int64_t m = std::max(a.m[i], b.m[i]);
    const int64_t fa = exp_lut(a.m[i] - m);
    const int64_t fb = exp_lut(b.m[i] - m);
    s.m[i] = m;
    s.l[i] = round_shift(static_cast<__int128>(a.l[i]) * fa, kFracBits) +
             round_shift(static_cast<__int128>(b.l[i]) * fb, kFracBits);
    for (size_t c = 0; c < a.cols; ++c) {
      const size_t e = i * a.cols + c;
      s.acc[e] = round_shift(static_cast<__int128>(a.acc[e]) * fa, kFracBits) +
                 round_shift(static_cast<__int128>(b.acc[e]) * fb, kFracBits);
    }
  }
  return s;
}

std::vector<int32_t> finalize_state(const RowState& s) {
  require(!s.empty, "finalize_state: no key block was merged");
  std::vector<int32_t> out(s.acc.size());
  for (size_t i = 0; i < s.rows; ++i)
    for (size_t c = 0; c < s.cols; ++c)
      out[i * s.cols + c] = saturate_i32(fixed_div(s.acc[i * s.cols + c], s.l[i], kFracBits));
  return out;
}

RealMatrix AttentionOutput::head_real(size_t h) const {
  const FixedMatrix& f = heads.at(h);
  RealMatrix r(f.rows, f.cols);
  for (size_t i = 0; i < f.data.size(); ++i) r.data[i] = static_cast<double>(f.data[i]) / 65536.0 * v_scale[h];
  return r;
}

namespace {

size_t kv_of(const AttentionInput& in, size_t h) { return h / (in.q.size() / in.k.size()); }

void check_input(const AttentionInput& in, const std::vector<BlockIndexSet>& sets) {
  const auto& sh = in.shape;
  require(sh.block_size >= 1 && sh.seq_len >= 1, "attention: empty shape");
  require(!in.q.empty() && !in.k.empty() && in.k.size() == in.v.size(), "attention: head lists mismatch");
  require(in.q.size() % in.k.size() == 0, "attention: query heads must be a multiple of KV heads");
  require(sets.size() == in.q.size(), "attention: one index set per query head is required");
  const size_t nb = (sh.seq_len + sh.block_size - 1) / sh.block_size;
  for (const auto& s : sets) require(s.num_blocks() == nb, "attention: index set block count mismatch");
  for (const auto* group : {&in.q, &in.k, &in.v})
    for (const auto& t : *group)
      require(t.cols() == sh.head_dim && t.rows() >= sh.seq_len, "attention: tensor shape mismatch");
}

AttentionOutput make_output(const AttentionInput& in) {
  AttentionOutput out;
  for (size_t h = 0; h < in.q.size(); ++h) {
    out.heads.emplace_back(in.shape.seq_len, in.shape.head_dim);
    out.v_scale.push_back(in.v[kv_of(in, h)].scale());
  }
  return out;
}

void store_block(FixedMatrix& dst, size_t q_block, size_t B, const std::vector<int32_t>& vals) {
  for (size_t i = 0; i < B && q_block * B + i < dst.rows; ++i)
    std::copy_n(vals.begin() + static_cast<std::ptrdiff_t>(i * dst.cols), dst.cols,
                dst.row(q_block * B + i).begin());
}

}  // namespace

std::vector<TraceRecord> schedule_trace(const JobList& jobs, const SauConfig& cfg) {
  const size_t nb = jobs.num_blocks();
  const size_t group = cfg.query_group_blocks == 0 ? std::max<size_t>(nb, 1) : cfg.query_group_blocks;
  std::vector<TraceRecord> trace;
  for (size_t lo = 0, pass = 0; lo < nb; lo += group, ++pass) {
    const size_t hi = std::min(nb, lo + group);
    for (size_t b = 0; b < hi; ++b) {
      for (size_t kv = 0; kv < jobs.num_kv_heads(); ++kv) {
        const BlockKey key{static_cast<uint32_t>(kv), static_cast<uint32_t>(b)};
        uint32_t n = 0;
        for (const Consumer& c : jobs.consumers(key)) n += c.q_block >= lo && c.q_block < hi;
        if (n > 0) trace.push_back({key, n, static_cast<uint32_t>(pass)});
      }
    }
  }
  return trace;
}

SauResult sparse_attention(const AttentionInput& in, const std::vector<BlockIndexSet>& sets, const SauConfig& cfg,
                           const MpuConfig& mpu) {
  check_input(in, sets);
  require(cfg.num_banks >= 1, "sparse_attention: at least one accumulation bank is required");
  const size_t B = in.shape.block_size;
  const JobList jobs(sets, in.k.size());
  const size_t nb = jobs.num_blocks();
  const size_t group = cfg.query_group_blocks == 0 ? nb : cfg.query_group_blocks;

  SauResult res;
  res.out = make_output(in);
  res.trace = schedule_trace(jobs, cfg);
  res.jobs = jobs.num_jobs();
  res.passes = (nb + group - 1) / group;

  std::vector<uint32_t> remaining(in.q.size() * nb);
  for (size_t h = 0; h < in.q.size(); ++h)
    for (size_t qb = 0; qb < nb; ++qb) remaining[h * nb + qb] = jobs.pending({uint32_t(h), uint32_t(qb)});

  std::vector<std::map<Consumer, RowState>> banks(cfg.num_banks);
  size_t live = 0;
  for (const TraceRecord& rec : res.trace) {
    const size_t lo = rec.pass * group, hi = lo + group;
    const QTensor kb = in.k[rec.key.kv_head].row_block(rec.key.block * B, B);
    const QTensor vb = in.v[rec.key.kv_head].row_block(rec.key.block * B, B);
    for (const Consumer& c : jobs.consumers(rec.key)) {
      if (c.q_block < lo || c.q_block >= hi) continue;
      const QTensor qb = in.q[c.head].row_block(c.q_block * B, B);
      RowState part = block_state(qb, kb, vb, c.q_block, rec.key.block, in.shape, mpu, &res.cycles);
      res.macs += 2ull * B * B * in.shape.head_dim;
      auto& bank = banks[c.q_block % cfg.num_banks];
      auto [it, fresh] = bank.try_emplace(c);
      if (fresh) res.peak_live_accumulators = std::max(res.peak_live_accumulators, ++live);
      it->second = merge_states(it->second, part);
      if (--remaining[c.head * nb + c.q_block] == 0) {
        store_block(res.out.heads[c.head], c.q_block, B, finalize_state(it->second));
        bank.erase(it);
        --live;
      }
    }
  }
  for (uint32_t r : remaining) require(r == 0, "sparse_attention: accumulator left unfinished");
  return res;
}

AttentionOutput sequential_attention(const AttentionInput& in, const std::vector<BlockIndexSet>& sets,
                                     const MpuConfig& mpu) {
  check_input(in, sets);
  const size_t B = in.shape.block_size;
  AttentionOutput out = make_output(in);
  for (size_t h = 0; h < in.q.size(); ++h) {
    const size_t kv = kv_of(in, h);
    for (size_t qb = 0; qb < sets[h].num_blocks(); ++qb) {
      const QTensor q = in.q[h].row_block(qb * B, B);
      RowState state;
      for (uint32_t kb : sets[h].blocks[qb]) {
        const RowState part = block_state(q, in.k[kv].row_block(kb * B, B), in.v[kv].row_block(kb * B, B), qb, kb,
                                          in.shape, mpu, nullptr);
        state = merge_states(state, part);
      }
      store_block(out.heads[h], qb, B, finalize_state(state));
    }
  }
  return out;
}

AttentionOutput dense_attention(const AttentionInput& in, const MpuConfig& mpu) {
  const size_t nb = (in.shape.seq_len + in.shape.block_size - 1) / in.shape.block_size;
  std::vector<BlockIndexSet> sets(in.q.size());
  for (size_t h = 0; h < sets.size(); ++h) {
    sets[h].head = static_cast<uint32_t>(h);
    sets[h].blocks.resize(nb);
    for (size_t qb = 0; qb < nb; ++qb)
      for (size_t kb = 0; kb <= qb; ++kb) sets[h].blocks[qb].push_back(static_cast<uint32_t>(kb));
  }
  return sequential_attention(in, sets, mpu);
}

std::vector<RealMatrix> masked_attention_oracle(const AttentionInput& in, const std::vector<BlockIndexSet>& sets) {
  check_input(in, sets);
  const size_t S = in.shape.seq_len, B = in.shape.block_size, d = in.shape.head_dim;
  std::vector<RealMatrix> out;
  for (size_t h = 0; h < in.q.size(); ++h) {
    const QTensor& q = in.q[h];
    const QTensor& k = in.k[kv_of(in, h)];
    const QTensor& v = in.v[kv_of(in, h)];
    const double c = q.scale() * k.scale() / std::sqrt(static_cast<double>(d));
    RealMatrix o(S, d);
    std::vector<double> w;
    std::vector<size_t> keys;
    for (size_t i = 0; i < S; ++i) {
      keys.clear();
      for (uint32_t kb : sets[h].blocks[i / B])
        for (size_t j = kb * B; j < (kb + 1) * B && j <= i && j < S; ++j) keys.push_back(j);
      w.assign(keys.size(), 0.0);
      double mx = -INFINITY;
      for (size_t t = 0; t < keys.size(); ++t) {
        double dot = 0.0;
        for (size_t e = 0; e < d; ++e) dot += static_cast<double>(q.at(i, e)) * k.at(keys[t], e);
        w[t] = dot * c;
        mx = std::max(mx, w[t]);
      }
      double sum = 0.0;
      for (double& x : w) sum += (x = std::exp(x - mx));
      for (size_t t = 0; t < keys.size(); ++t)
        for (size_t e = 0; e < d; ++e) o.at(i, e) += w[t] / sum * v.at(keys[t], e) * v.scale();
    }
    out.push_back(std::move(o));
  }
  return out;
}

double normwise_error(const RealMatrix& a, const RealMatrix& b) {
  require(a.rows == b.rows && a.cols == b.cols, "normwise_error: shape mismatch");
  double err = 0.0, ref = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    err = std::max(err, std::fabs(a.data[i] - b.data[i]));
    ref = std::max(ref, std::fabs(b.data[i]));
  }
  return ref > 0.0 ? err / ref : err;
}

}  // namespace fastprefill
