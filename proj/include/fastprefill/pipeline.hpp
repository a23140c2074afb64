// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fastprefill/attention.hpp"
#include "fastprefill/perf.hpp"
#include "fastprefill/quant.hpp"
#include "fastprefill/sigu.hpp"

namespace fastprefill {

struct ModelConfig {
  size_t layers = 2;
  size_t d_model = 256;
  size_t num_q_heads = 4;
  size_t num_kv_heads = 2;
  size_t head_dim = 64;
  size_t ffn_dim = 512;
  size_t chunk_size = 128;
  size_t vocab = 256;
  // Synthetic weights only: attention-norm gain; larger values sharpen attention.
  double attn_norm_gain = 1.0;
  uint64_t seed = 0;

  void validate() const;
  size_t qkv_width() const { return (num_q_heads + 2 * num_kv_heads) * head_dim; }
};

struct LayerWeights {
  std::vector<int32_t> attn_norm;  // Q16.16, d_model
  QTensor w_qkv;                   // d_model x qkv_width: [Q heads | K heads | V heads]
  std::vector<int32_t> ffn_norm;
  QTensor w1;  // d_model x ffn_dim
  QTensor w2;  // ffn_dim x d_model
};

struct ModelWeights {
  ModelConfig cfg;
  std::vector<LayerWeights> layers;
  std::vector<int32_t> final_norm;
  QTensor w_out;  // d_model x vocab
};

// Deterministic pseudo-random INT8 weights (mt19937_64 raw output).
ModelWeights synth_model(const ModelConfig& cfg, uint64_t seed);

// Weights from a JSON manifest naming little-endian INT8 files; see README.
ModelWeights load_model(const std::string& manifest_path, const ModelConfig& cfg);

// Synthetic prompt with attention structure: a shared direction in every token,
// an attention-sink component in the first block, per-block coherence, noise.
struct WorkloadConfig {
  double sink_strength = 4.0;
  double block_coherence = 0.5;
  double noise = 1.0;
};

QTensor synth_embeddings(const ModelWeights& model, size_t seq_len, const WorkloadConfig& w, uint64_t seed);

struct PipelineOptions {
  SigConfig sparsity;
  SauConfig attention;
  MpuConfig mpu;
  // Process QKV in one pass instead of per chunk (for chunk-independence checks).
  bool single_pass_qkv = false;
  // Skip index generation; query-major dense attention (reference path).
  bool dense_reference = false;
};

enum class EventKind : uint8_t { k_write, barrier, sigu_read };

struct Event {
  size_t layer = 0;
  EventKind kind = EventKind::k_write;
  size_t chunk = 0;
};

struct LayerRecord {
  FixedMatrix q_store, k_store, v_store;  // Q16.16 projections, seq_len rows
  std::vector<BlockIndexSet> index_sets;
  std::vector<Pattern> patterns;
  FixedMatrix attn_out;  // seq_len x d_model, Q16.16
};

struct PrefillResult {
  std::vector<double> logits;  // first-token logits stub
  FixedMatrix hidden;          // final residual stream, Q16.16
  std::vector<LayerRecord> layers;
  std::vector<Event> events;
  PerfTrace trace;
};

PrefillResult run_prefill(const QTensor& embeddings, const ModelWeights& model, const PipelineOptions& opts);

// True iff, in every layer, every K write precedes the barrier and the barrier
// precedes every SIGU read.
bool barrier_respected(const std::vector<Event>& events, size_t layers);

// Pre-norm layer of double-precision dense attention + FFN on the same INT8
// weights and embeddings; used as an end-to-end oracle for short inputs.
std::vector<double> reference_layer_output(const QTensor& embeddings, const ModelWeights& model);

// FNV-1a over the hidden state and logits; a compact equality witness.
uint64_t output_digest(const PrefillResult& r);

}  // namespace fastprefill
