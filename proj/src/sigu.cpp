// SPDX-License-Identifier: Apache-2.0

#include "fastprefill/sigu.hpp"

#include <algorithm>
#include <climits>
#include <cmath>
#include <functional>
#include <queue>
#include <set>

#include <json.hpp>

namespace fastprefill {

namespace {

// ln 2 in Q16.16.
constexpr int64_t kLn2 = 45426;
// Levels below global_max - kWindow are dropped from the pooled mass.
constexpr int64_t kWindow = 23;

int64_t floor_div(int64_t a, int64_t b) {
  int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

// exp(x) ~= mantissa * 2^level (up to a common factor), mantissa from the LUT.
struct Split {
  int64_t level;
  int64_t mantissa;
};

Split split_exp(int64_t x) {
  const int64_t level = floor_div(x, kLn2);
  const int64_t r = x - level * kLn2;
  return {level, exp_lut(r - kLn2)};
}

bool masked(size_t row, size_t col, bool diagonal, size_t valid_rows) {
  return row >= valid_rows || (diagonal && col > row);
}

size_t block_count(size_t seq_len, size_t block) { return (seq_len + block - 1) / block; }

FixedVec normalize_u128(const std::vector<unsigned __int128>& mass) {
  unsigned __int128 total = 0;
  for (auto m : mass) total += m;
  FixedVec out;
  out.data.resize(mass.size());
  for (size_t i = 0; i < mass.size(); ++i)
    out.data[i] = static_cast<int32_t>(
        round_half_even_div(static_cast<__int128>(mass[i] << kFracBits), static_cast<__int128>(total)));
  return out;
}

BlockScores assemble(FixedVec a_hat, FixedVec a_bar) {
  BlockScores s;
  s.num_blocks = a_hat.size();
  s.a_v = a_hat;
  s.a_s.data.resize(a_hat.size());
  for (size_t o = 0; o < a_hat.size(); ++o) s.a_s.data[o] = a_hat.data[a_hat.size() - 1 - o];
  s.a_hat = std::move(a_hat);
  s.a_bar = std::move(a_bar);
  return s;
}

void check_inputs(const QTensor& q, const QTensor& k, size_t seq_len, const SigConfig& cfg) {
  cfg.validate();
  require(q.cols() == k.cols(), "generate_indices: Q and K head dims differ");
  require(q.cols() >= 1, "generate_indices: empty head dimension");
  require(seq_len >= 1, "generate_indices: empty sequence");
  require(q.rows() >= seq_len && k.rows() >= seq_len, "generate_indices: fewer rows than seq_len");
}

double logit_scale(double sq, double sk, size_t d) { return sq * sk / std::sqrt(static_cast<double>(d)); }

}  // namespace

void SigConfig::validate() const {
  require(block_size >= 1, "SigConfig: block_size must be positive");
  require(gamma > 0.0 && gamma <= 1.0, "SigConfig: gamma must lie in (0, 1]");
  require(tau >= 0.0 && !std::isnan(tau), "SigConfig: tau must be >= 0");
}

std::string_view pattern_name(Pattern p) {
  return p == Pattern::query_aware ? "query_aware" : "vertical_slash";
}

Pattern parse_pattern(std::string_view name) {
  if (name == "query_aware") return Pattern::query_aware;
  if (name == "vertical_slash") return Pattern::vertical_slash;
  throw Error("unknown pattern: " + std::string(name));
}

size_t BlockIndexSet::total() const {
  size_t n = 0;
  for (const auto& b : blocks) n += b.size();
  return n;
}

std::vector<int32_t> pool_mean(const QTensor& block) {
  require(block.rows() >= 1, "pool_mean: empty block");
  std::vector<int32_t> out(block.cols());
  for (size_t c = 0; c < block.cols(); ++c) {
    int64_t sum = 0;
    for (size_t r = 0; r < block.rows(); ++r) sum += block.at(r, c);
    out[c] = static_cast<int32_t>(round_half_even_div(static_cast<__int128>(sum) << kFracBits, block.rows()));
  }
  return out;
}

int32_t pooled_logit(std::span<const int32_t> pooled_q, std::span<const int32_t> pooled_k, double scale) {
  require(pooled_q.size() == pooled_k.size(), "pooled_logit: length mismatch");
  int64_t dot = 0;
  for (size_t i = 0; i < pooled_q.size(); ++i) dot += static_cast<int64_t>(pooled_q[i]) * pooled_k[i];
  // dot is Q32.32 in grid units; one 2^-16 brings the logit back to Q16.16.
  return saturate_i32(logit_q16(dot, scale / 4294967296.0));
}

// ---------------------------------------------------------------------------

BlockScoreStream::BlockScoreStream(const QTensor& q_hat, size_t seq_len, const SigConfig& cfg, const MpuConfig& mpu)
    : q_hat_(q_hat), seq_len_(seq_len), block_size_(cfg.block_size), mpu_(mpu) {
  cfg.validate();
  require(seq_len >= 1, "BlockScoreStream: empty sequence");
  require(q_hat.rows() == block_size_, "BlockScoreStream: q_hat must have exactly B rows");
  num_blocks_ = block_count(seq_len, block_size_);
  head_dim_ = q_hat.cols();
  pooled_q_ = pool_mean(q_hat_);
  top_level_.assign(num_blocks_, INT64_MIN);
  histogram_.assign(num_blocks_ * kLevels, 0);
  pooled_k_.assign(num_blocks_ * head_dim_, 0);
  bar_logit_.assign(num_blocks_, 0);
}

void BlockScoreStream::push(size_t block_index, const QTensor& key_block) {
  require(block_index == next_, "BlockScoreStream: key blocks must arrive once each, in ascending order");
  require(block_index < num_blocks_, "BlockScoreStream: block index past the end of the sequence");
  require(key_block.rows() == block_size_ && key_block.cols() == head_dim_,
          "BlockScoreStream: key block shape mismatch");
  if (block_index == 0) key_scale_ = key_block.scale();

  const GemmResult tile = gemm(q_hat_, key_block.transposed(), mpu_);
  cycles_ += tile.cycles;
  macs_ += tile.macs;

  const bool diagonal = block_index + 1 == num_blocks_;
  const size_t valid_rows = seq_len_ - (num_blocks_ - 1) * block_size_;
  const double c = logit_scale(q_hat_.scale(), key_block.scale(), head_dim_);

  int64_t top = INT64_MIN;
  for (size_t i = 0; i < block_size_; ++i)
    for (size_t j = 0; j < block_size_; ++j)
      if (!masked(i, j, diagonal, valid_rows))
        top = std::max(top, split_exp(logit_q16(tile.tile.at(i, j), c)).level);
  top_level_[block_index] = top;

  int64_t* hist = histogram_.data() + block_index * kLevels;
  for (size_t i = 0; i < block_size_; ++i) {
    for (size_t j = 0; j < block_size_; ++j) {
      if (masked(i, j, diagonal, valid_rows)) continue;
      const Split s = split_exp(logit_q16(tile.tile.at(i, j), c));
      const int64_t rel = top - s.level;
      if (rel < static_cast<int64_t>(kLevels)) hist[rel] += s.mantissa;
    }
  }

  const std::vector<int32_t> pk = pool_mean(key_block);
  std::copy(pk.begin(), pk.end(), pooled_k_.begin() + static_cast<std::ptrdiff_t>(block_index * head_dim_));
  bar_logit_[block_index] = pooled_logit(pooled_q_, pk, c);
  ++next_;
}

BlockScores BlockScoreStream::finish() {
  require(next_ == num_blocks_, "BlockScoreStream: stream finished before every key block arrived");
  const int64_t global = *std::max_element(top_level_.begin(), top_level_.end());
  std::vector<unsigned __int128> mass(num_blocks_, 0);
  for (size_t b = 0; b < num_blocks_; ++b) {
    if (top_level_[b] == INT64_MIN) continue;
    for (size_t j = 0; j < kLevels; ++j) {
      const int64_t gap = global - (top_level_[b] - static_cast<int64_t>(j));
      if (gap > kWindow) break;
      mass[b] += static_cast<unsigned __int128>(histogram_[b * kLevels + j]) << (kWindow - gap);
    }
  }
  return assemble(normalize_u128(mass), softmax_fixed(bar_logit_, 1.0 / 65536.0));
}

// ---------------------------------------------------------------------------

double jsd_sqrt(const FixedVec& p, const FixedVec& q) {
  require(p.size() == q.size(), "jsd_sqrt: length mismatch");
  require(p.size() >= 1, "jsd_sqrt: empty vectors");
  double sp = 0.0, sq = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    require(p.data[i] >= 0 && q.data[i] >= 0, "jsd_sqrt: negative probability");
    sp += p.real(i);
    sq += q.real(i);
  }
  require(sp > 0.0 && sq > 0.0, "jsd_sqrt: zero vector");
  auto kl_half = [](double a, double m) { return a > 0.0 ? 0.5 * a * std::log(a / m) : 0.0; };
  double js = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double a = p.real(i) / sp;
    const double b = q.real(i) / sq;
    const double m = 0.5 * (a + b);
    js += kl_half(a, m) + kl_half(b, m);
  }
  return std::sqrt(std::max(js, 0.0));
}

Pattern classify_head(const BlockScores& scores, double tau) {
  return jsd_sqrt(scores.a_bar, scores.a_hat) < tau ? Pattern::query_aware : Pattern::vertical_slash;
}

int64_t coverage_threshold(double gamma) { return static_cast<int64_t>(std::ceil(gamma * 65536.0)); }

namespace {

constexpr size_t kCandidateSlots = 16;

struct Candidate {
  int32_t score;
  uint32_t index;
};

// a ranks ahead of b: higher score, then lower index.
bool ahead(const Candidate& a, const Candidate& b) {
  return a.score != b.score ? a.score > b.score : a.index < b.index;
}

}  // namespace

std::vector<uint32_t> coverage_select(const FixedVec& scores, double gamma) {
  require(gamma > 0.0, "coverage_select: gamma must be positive");
  const size_t n = scores.size();
  std::vector<uint32_t> out;
  if (gamma >= 1.0) {
    out.resize(n);
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<uint32_t>(i);
    return out;
  }
  const int64_t need = coverage_threshold(gamma);
  int64_t cum = 0;
  bool have_frontier = false;
  Candidate frontier{0, 0};
  // Max-heap on "behind": top is the weakest candidate kept so far.
  std::priority_queue<Candidate, std::vector<Candidate>, decltype(&ahead)> heap(ahead);
  std::vector<Candidate> batch;
  batch.reserve(kCandidateSlots);
  while (true) {
    for (size_t i = 0; i < n; ++i) {
      const Candidate c{scores.data[i], static_cast<uint32_t>(i)};
      if (have_frontier && !ahead(frontier, c)) continue;
      if (heap.size() < kCandidateSlots) {
        heap.push(c);
      } else if (ahead(c, heap.top())) {
        heap.pop();
        heap.push(c);
      }
    }
    if (heap.empty()) break;
    batch.clear();
    while (!heap.empty()) {
      batch.push_back(heap.top());
      heap.pop();
    }
    std::reverse(batch.begin(), batch.end());  // best first
    for (const Candidate& c : batch) {
      out.push_back(c.index);
      cum += c.score;
      if (cum >= need) {
        std::sort(out.begin(), out.end());
        return out;
      }
    }
    frontier = batch.back();
    have_frontier = true;
  }
  // Rounding kept the total below gamma: everything is selected.
  std::sort(out.begin(), out.end());
  return out;
}

BlockIndexSet expand_vertical_slash(std::span<const uint32_t> verticals, std::span<const uint32_t> slash_offsets,
                                    size_t num_blocks, uint32_t head) {
  for (uint32_t v : verticals) require(v < num_blocks, "expand_vertical_slash: vertical index out of range");
  for (uint32_t o : slash_offsets) require(o < num_blocks, "expand_vertical_slash: slash offset out of range");
  BlockIndexSet set;
  set.head = head;
  set.pattern = Pattern::vertical_slash;
  set.blocks.resize(num_blocks);
  std::vector<uint8_t> mark(num_blocks);
  for (size_t q = 0; q < num_blocks; ++q) {
    std::fill_n(mark.begin(), q + 1, 0);
    for (uint32_t v : verticals)
      if (v <= q) mark[v] = 1;
    for (uint32_t o : slash_offsets)
      if (o <= q) mark[q - o] = 1;
    mark[q] = 1;
    for (size_t k = 0; k <= q; ++k)
      if (mark[k]) set.blocks[q].push_back(static_cast<uint32_t>(k));
  }
  return set;
}

FixedVec query_aware_map(std::span<const int32_t> pooled_q, std::span<const int32_t> pooled_k, size_t num_blocks,
                         size_t head_dim, double logit_scale) {
  require(pooled_q.size() == num_blocks * head_dim && pooled_k.size() == num_blocks * head_dim,
          "query_aware_map: pooled shape mismatch");
  std::vector<int64_t> flat;
  flat.reserve(num_blocks * (num_blocks + 1) / 2);
  std::vector<int32_t> logits;
  int64_t total = 0;
  for (size_t q = 0; q < num_blocks; ++q) {
    logits.resize(q + 1);
    const auto pq = pooled_q.subspan(q * head_dim, head_dim);
    for (size_t k = 0; k <= q; ++k) logits[k] = pooled_logit(pq, pooled_k.subspan(k * head_dim, head_dim), logit_scale);
    const FixedVec row = softmax_fixed(logits, 1.0 / 65536.0);
    for (int32_t v : row.data) {
      flat.push_back(v);
      total += v;
    }
  }
  FixedVec out;
  out.data.resize(flat.size());
  for (size_t i = 0; i < flat.size(); ++i)
    out.data[i] = static_cast<int32_t>(round_half_even_div(static_cast<__int128>(flat[i]) << kFracBits, total));
  return out;
}

BlockIndexSet query_aware_indices(const FixedVec& flat_map, std::span<const uint32_t> selected, size_t num_blocks,
                                  uint32_t head) {
  require(flat_map.size() == num_blocks * (num_blocks + 1) / 2, "query_aware_indices: map size mismatch");
  BlockIndexSet set;
  set.head = head;
  set.pattern = Pattern::query_aware;
  set.blocks.resize(num_blocks);
  std::vector<uint8_t> mark(flat_map.size(), 0);
  for (uint32_t f : selected) {
    require(f < flat_map.size(), "query_aware_indices: selection out of range");
    mark[f] = 1;
  }
  for (size_t q = 0; q < num_blocks; ++q) {
    const size_t row0 = q * (q + 1) / 2;
    for (size_t k = 0; k <= q; ++k)
      if (mark[row0 + k] || k == q) set.blocks[q].push_back(static_cast<uint32_t>(k));
  }
  return set;
}

SigResult generate_indices(uint32_t head, const QTensor& q, const QTensor& k, size_t seq_len, const SigConfig& cfg,
                           const MpuConfig& mpu) {
  check_inputs(q, k, seq_len, cfg);
  const size_t B = cfg.block_size;
  const size_t nb = block_count(seq_len, B);
  const size_t d = q.cols();

  BlockScoreStream stream(q.row_block((nb - 1) * B, B), seq_len, cfg, mpu);
  for (size_t b = 0; b < nb; ++b) stream.push(b, k.row_block(b * B, B));

  SigResult res;
  res.mpu_cycles = stream.mpu_cycles();
  res.mpu_macs = stream.mpu_macs();
  res.key_blocks_consumed = stream.consumed();
  res.scores = stream.finish();
  res.divergence = jsd_sqrt(res.scores.a_bar, res.scores.a_hat);
  const Pattern pattern = res.divergence < cfg.tau ? Pattern::query_aware : Pattern::vertical_slash;

  if (pattern == Pattern::vertical_slash) {
    auto sv = coverage_select(res.scores.a_v, cfg.gamma);
    auto ss = coverage_select(res.scores.a_s, cfg.gamma);
    res.indices = expand_vertical_slash(sv, ss, nb, head);
    res.coverage.push_back({res.scores.a_v, std::move(sv)});
    res.coverage.push_back({res.scores.a_s, std::move(ss)});
  } else {
    std::vector<int32_t> pooled_q(nb * d);
    for (size_t b = 0; b < nb; ++b) {
      const auto pq = pool_mean(q.row_block(b * B, B));
      std::copy(pq.begin(), pq.end(), pooled_q.begin() + static_cast<std::ptrdiff_t>(b * d));
    }
    FixedVec flat = query_aware_map(pooled_q, stream.pooled_keys(), nb, d, logit_scale(q.scale(), k.scale(), d));
    auto sel = coverage_select(flat, cfg.gamma);
    res.indices = query_aware_indices(flat, sel, nb, head);
    res.coverage.push_back({std::move(flat), std::move(sel)});
  }
  return res;
}

// ---------------------------------------------------------------------------

std::vector<uint32_t> coverage_select_oracle(const FixedVec& scores, double gamma) {
  std::vector<uint32_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<uint32_t>(i);
  if (gamma >= 1.0) return order;
  std::stable_sort(order.begin(), order.end(),
                   [&](uint32_t a, uint32_t b) { return scores.data[a] > scores.data[b]; });
  const int64_t need = coverage_threshold(gamma);
  int64_t cum = 0;
  size_t take = order.size();
  for (size_t i = 0; i < order.size(); ++i) {
    cum += scores.data[order[i]];
    if (cum >= need) {
      take = i + 1;
      break;
    }
  }
  order.resize(take);
  std::sort(order.begin(), order.end());
  return order;
}

SigResult generate_indices_oracle(uint32_t head, const QTensor& q, const QTensor& k, size_t seq_len,
                                  const SigConfig& cfg) {
  check_inputs(q, k, seq_len, cfg);
  const size_t B = cfg.block_size;
  const size_t nb = block_count(seq_len, B);
  const size_t d = q.cols();
  const size_t padded = nb * B;
  const size_t q0 = (nb - 1) * B;
  const double c = logit_scale(q.scale(), k.scale(), d);

  // Full B x S_pad logit map of the last query block, masked entries flagged.
  std::vector<int64_t> logit(B * padded, 0);
  std::vector<uint8_t> live(B * padded, 0);
  for (size_t i = 0; i < B; ++i) {
    const size_t qi = q0 + i;
    for (size_t j = 0; j < padded; ++j) {
      if (qi >= seq_len || j > qi) continue;
      int64_t dot = 0;
      for (size_t t = 0; t < d; ++t) dot += static_cast<int64_t>(q.at(qi, t)) * k.at(j, t);
      logit[i * padded + j] = logit_q16(dot, c);
      live[i * padded + j] = 1;
    }
  }
  int64_t global = INT64_MIN;
  for (size_t e = 0; e < logit.size(); ++e)
    if (live[e]) global = std::max(global, floor_div(logit[e], kLn2));
  std::vector<unsigned __int128> mass(nb, 0);
  for (size_t i = 0; i < B; ++i) {
    for (size_t j = 0; j < padded; ++j) {
      if (!live[i * padded + j]) continue;
      const int64_t x = logit[i * padded + j];
      const int64_t level = floor_div(x, kLn2);
      const int64_t gap = global - level;
      if (gap > kWindow) continue;
      const int64_t mant = exp_lut(x - level * kLn2 - kLn2);
      mass[j / B] += static_cast<unsigned __int128>(mant) << (kWindow - gap);
    }
  }

  std::vector<std::vector<int32_t>> pooled_k(nb), pooled_q(nb);
  for (size_t b = 0; b < nb; ++b) {
    pooled_k[b] = pool_mean(k.row_block(b * B, B));
    pooled_q[b] = pool_mean(q.row_block(b * B, B));
  }
  std::vector<int32_t> bar(nb);
  for (size_t b = 0; b < nb; ++b) bar[b] = pooled_logit(pooled_q[nb - 1], pooled_k[b], c);

  SigResult res;
  res.scores = assemble(normalize_u128(mass), softmax_fixed(bar, 1.0 / 65536.0));
  res.key_blocks_consumed = nb;
  res.divergence = jsd_sqrt(res.scores.a_bar, res.scores.a_hat);
  const bool qa = res.divergence < cfg.tau;

  BlockIndexSet set;
  set.head = head;
  set.blocks.resize(nb);
  if (!qa) {
    set.pattern = Pattern::vertical_slash;
    const auto sv = coverage_select_oracle(res.scores.a_v, cfg.gamma);
    const auto ss = coverage_select_oracle(res.scores.a_s, cfg.gamma);
    for (size_t qb = 0; qb < nb; ++qb) {
      std::set<uint32_t> s{static_cast<uint32_t>(qb)};
      for (uint32_t v : sv)
        if (v <= qb) s.insert(v);
      for (uint32_t o : ss)
        if (o <= qb) s.insert(static_cast<uint32_t>(qb - o));
      set.blocks[qb].assign(s.begin(), s.end());
    }
    res.coverage.push_back({res.scores.a_v, sv});
    res.coverage.push_back({res.scores.a_s, ss});
  } else {
    set.pattern = Pattern::query_aware;
    // Full nb x nb pooled map; the upper triangle is masked out.
    std::vector<int32_t> full(nb * nb, 0);
    for (size_t qb = 0; qb < nb; ++qb)
      for (size_t kb = 0; kb <= qb; ++kb) full[qb * nb + kb] = pooled_logit(pooled_q[qb], pooled_k[kb], c);
    std::vector<int64_t> probs;
    int64_t total = 0;
    for (size_t qb = 0; qb < nb; ++qb) {
      const FixedVec row = softmax_fixed(std::span<const int32_t>(full.data() + qb * nb, qb + 1), 1.0 / 65536.0);
      for (int32_t v : row.data) {
        probs.push_back(v);
        total += v;
      }
    }
    FixedVec flat;
    for (int64_t v : probs)
      flat.data.push_back(static_cast<int32_t>(round_half_even_div(static_cast<__int128>(v) * 65536, total)));
    const auto sel = coverage_select_oracle(flat, cfg.gamma);
    std::vector<std::set<uint32_t>> rows(nb);
    for (size_t qb = 0; qb < nb; ++qb) rows[qb].insert(static_cast<uint32_t>(qb));
    for (uint32_t f : sel) {
      size_t qb = 0;
      while ((qb + 1) * (qb + 2) / 2 <= f) ++qb;
      rows[qb].insert(static_cast<uint32_t>(f - qb * (qb + 1) / 2));
    }
    for (size_t qb = 0; qb < nb; ++qb) set.blocks[qb].assign(rows[qb].begin(), rows[qb].end());
    res.coverage.push_back({std::move(flat), sel});
  }
  res.indices = std::move(set);
  return res;
}

// ---------------------------------------------------------------------------

std::string index_set_to_json(const BlockIndexSet& set) {
  nlohmann::json j;
  j["head"] = set.head;
  j["pattern"] = pattern_name(set.pattern);
  j["blocks"] = set.blocks;
  return j.dump();
}

BlockIndexSet index_set_from_json(std::string_view line) {
  try {
    const auto j = nlohmann::json::parse(line);
    BlockIndexSet set;
    set.head = j.at("head").get<uint32_t>();
    set.pattern = parse_pattern(j.at("pattern").get<std::string>());
    set.blocks = j.at("blocks").get<std::vector<std::vector<uint32_t>>>();
    for (size_t q = 0; q < set.blocks.size(); ++q) {
      const auto& row = set.blocks[q];
      require(std::is_sorted(row.begin(), row.end()), "index set: rows must be sorted");
      for (uint32_t kb : row) require(kb <= q, "index set: non-causal block");
    }
    return set;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("index set: malformed JSON: ") + e.what());
  }
}

}  // namespace fastprefill
