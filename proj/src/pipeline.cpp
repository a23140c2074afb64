// SPDX-License-Identifier: Apache-2.0

#include "fastprefill/pipeline.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "fastprefill/parallel.hpp"

namespace fastprefill {

void ModelConfig::validate() const {
  require(layers >= 1, "ModelConfig: at least one layer");
  require(num_q_heads >= 1 && num_kv_heads >= 1, "ModelConfig: head counts must be positive");
  require(num_q_heads % num_kv_heads == 0, "ModelConfig: num_q_heads must be divisible by num_kv_heads");
  require(head_dim >= 1 && d_model == num_q_heads * head_dim, "ModelConfig: d_model must equal num_q_heads * head_dim");
  require(ffn_dim >= 1 && vocab >= 1, "ModelConfig: ffn_dim and vocab must be positive");
  require(chunk_size >= 1, "ModelConfig: chunk_size must be positive");
  require(attn_norm_gain > 0.0 && attn_norm_gain < 32768.0, "ModelConfig: attn_norm_gain must lie in (0, 32768)");
  require(d_model <= kMaxReduction && ffn_dim <= kMaxReduction, "ModelConfig: reduction depth exceeds 2^15");
}

namespace {

QTensor random_weight(std::mt19937_64& rng, size_t rows, size_t cols) {
  std::vector<int8_t> data(rows * cols);
  for (auto& v : data) v = static_cast<int8_t>(static_cast<int64_t>(rng() % 255) - 127);
  // Uniform on [-127, 127] has standard deviation ~73.6; keep unit output variance.
  const double scale = 1.0 / (73.6 * std::sqrt(static_cast<double>(rows)));
  return QTensor(rows, cols, std::move(data), scale);
}

}  // namespace

ModelWeights synth_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ModelWeights m;
  m.cfg = cfg;
  m.cfg.seed = seed;
  for (size_t l = 0; l < cfg.layers; ++l) {
    LayerWeights w;
    w.attn_norm.assign(cfg.d_model, static_cast<int32_t>(std::llround(cfg.attn_norm_gain * 65536.0)));
    w.ffn_norm.assign(cfg.d_model, static_cast<int32_t>(kOne));
    w.w_qkv = random_weight(rng, cfg.d_model, cfg.qkv_width());
    w.w1 = random_weight(rng, cfg.d_model, cfg.ffn_dim);
    w.w2 = random_weight(rng, cfg.ffn_dim, cfg.d_model);
    m.layers.push_back(std::move(w));
  }
  m.final_norm.assign(cfg.d_model, static_cast<int32_t>(kOne));
  m.w_out = random_weight(rng, cfg.d_model, cfg.vocab);
  return m;
}

namespace {

QTensor read_tensor(const nlohmann::json& entry, const std::filesystem::path& base, size_t rows, size_t cols,
                    const std::string& name) {
  const auto path = base / entry.at("file").get<std::string>();
  const double scale = entry.at("scale").get<double>();
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "load_model: cannot open " + path.string());
  std::vector<int8_t> data(rows * cols);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
  require(static_cast<size_t>(in.gcount()) == data.size(), "load_model: " + name + " is shorter than its shape");
  in.peek();
  require(in.eof(), "load_model: " + name + " is longer than its shape");
  return QTensor(rows, cols, std::move(data), scale);
}

std::vector<int32_t> read_norm(const nlohmann::json& layer, const char* key, size_t n) {
  std::vector<int32_t> w(n, static_cast<int32_t>(kOne));
  if (!layer.contains(key)) return w;
  const auto vals = layer.at(key).get<std::vector<double>>();
  require(vals.size() == n, std::string("load_model: ") + key + " length mismatch");
  for (size_t i = 0; i < n; ++i) w[i] = saturate_i32(std::llround(vals[i] * 65536.0));
  return w;
}

}  // namespace

ModelWeights load_model(const std::string& manifest_path, const ModelConfig& cfg) {
  cfg.validate();
  std::ifstream in(manifest_path);
  require(in.good(), "load_model: cannot open manifest " + manifest_path);
  const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  try {
    const auto j = nlohmann::json::parse(in);
    ModelWeights m;
    m.cfg = cfg;
    const auto& layers = j.at("layers");
    require(layers.size() == cfg.layers, "load_model: layer count differs from the model config");
    for (size_t l = 0; l < cfg.layers; ++l) {
      const auto& e = layers[l];
      const std::string tag = "layer " + std::to_string(l);
      LayerWeights w;
      w.attn_norm = read_norm(e, "attn_norm", cfg.d_model);
      w.ffn_norm = read_norm(e, "ffn_norm", cfg.d_model);
      w.w_qkv = read_tensor(e.at("w_qkv"), base, cfg.d_model, cfg.qkv_width(), tag + " w_qkv");
      w.w1 = read_tensor(e.at("w1"), base, cfg.d_model, cfg.ffn_dim, tag + " w1");
      w.w2 = read_tensor(e.at("w2"), base, cfg.ffn_dim, cfg.d_model, tag + " w2");
      m.layers.push_back(std::move(w));
    }
    m.final_norm = read_norm(j, "final_norm", cfg.d_model);
    m.w_out = read_tensor(j.at("w_out"), base, cfg.d_model, cfg.vocab, "w_out");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("load_model: malformed manifest: ") + e.what());
  }
}

namespace {

// Columns [c0, c0 + n) of a dequantized weight as a real matrix.
RealMatrix weight_cols(const QTensor& w, size_t c0, size_t n) {
  RealMatrix r(w.rows(), n);
  for (size_t i = 0; i < w.rows(); ++i)
    for (size_t j = 0; j < n; ++j) r.at(i, j) = w.at(i, c0 + j) * w.scale();
  return r;
}

std::vector<double> row_times(const std::vector<double>& x, const RealMatrix& w) {
  std::vector<double> y(w.cols, 0.0);
  for (size_t i = 0; i < w.rows; ++i)
    for (size_t j = 0; j < w.cols; ++j) y[j] += x[i] * w.at(i, j);
  return y;
}

void normalize_rms(std::vector<double>& v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  const double rms = std::sqrt(ss / static_cast<double>(v.size()));
  if (rms > 0.0)
    for (double& x : v) x /= rms;
}

}  // namespace

QTensor synth_embeddings(const ModelWeights& model, size_t seq_len, const WorkloadConfig& w, uint64_t seed) {
  const ModelConfig& c = model.cfg;
  require(seq_len >= 1, "synth_embeddings: empty sequence");
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto draw = [&](size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = gauss(rng);
    return v;
  };

  // Shared direction: of a few candidates, the one whose query/key images
  // overlap least, so that ordinary keys score low against every query.
  const QTensor& wqkv = model.layers.front().w_qkv;
  const size_t d = c.head_dim, group = c.num_q_heads / c.num_kv_heads;
  std::vector<RealMatrix> wq, wk;
  for (size_t h = 0; h < c.num_q_heads; ++h) wq.push_back(weight_cols(wqkv, h * d, d));
  for (size_t g = 0; g < c.num_kv_heads; ++g) wk.push_back(weight_cols(wqkv, (c.num_q_heads + g) * d, d));
  std::vector<double> shared;
  double best = INFINITY;
  for (int cand = 0; cand < 32; ++cand) {
    auto v = draw(c.d_model);
    normalize_rms(v);
    double overlap = 0.0;
    for (size_t h = 0; h < c.num_q_heads; ++h) {
      const auto qv = row_times(v, wq[h]);
      const auto kv = row_times(v, wk[h / group]);
      for (size_t t = 0; t < d; ++t) overlap += qv[t] * kv[t];
    }
    if (overlap < best) {
      best = overlap;
      shared = v;
    }
  }
  // Sink direction: its key image follows the queries' shared component.
  std::vector<double> sink(c.d_model, 0.0);
  for (size_t h = 0; h < c.num_q_heads; ++h) {
    const auto qv = row_times(shared, wq[h]);
    const RealMatrix& k = wk[h / group];
    for (size_t i = 0; i < c.d_model; ++i)
      for (size_t t = 0; t < d; ++t) sink[i] += k.at(i, t) * qv[t];
  }
  normalize_rms(sink);

  const size_t B = c.chunk_size;
  RealMatrix x(seq_len, c.d_model);
  std::vector<double> coherent;
  for (size_t i = 0; i < seq_len; ++i) {
    if (i % B == 0) {
      // AR(1) across blocks: neighbouring blocks share content.
      const auto fresh = draw(c.d_model);
      if (coherent.empty()) {
        coherent = fresh;
      } else {
        for (size_t j = 0; j < c.d_model; ++j) coherent[j] = 0.8 * coherent[j] + 0.6 * fresh[j];
      }
    }
    const auto noise = draw(c.d_model);
    for (size_t j = 0; j < c.d_model; ++j) {
      double v = w.noise * noise[j] + w.block_coherence * coherent[j];
      v += i < B ? w.sink_strength * sink[j] : shared[j];
      x.at(i, j) = v;
    }
  }
  return quantize(x);
}

namespace {

// Per-row INT8 quantization: one scale per token keeps projections per-token.
struct RowQuant {
  QTensor q;  // unit scale; real row r = q.row(r) * scales[r]
  std::vector<double> scales;
};

RowQuant quantize_rows(const FixedMatrix& x, size_t first, size_t count) {
  std::vector<int8_t> data(count * x.cols, 0);
  std::vector<double> scales(count, 1.0);
  for (size_t r = 0; r < count; ++r) {
    FixedMatrix one(1, x.cols);
    const auto src = x.row(first + r);
    std::copy(src.begin(), src.end(), one.data.begin());
    const QTensor q = quantize_fixed(one);
    std::copy(q.data().begin(), q.data().end(), data.begin() + static_cast<std::ptrdiff_t>(r * x.cols));
    scales[r] = q.scale();
  }
  return {QTensor(count, x.cols, std::move(data), 1.0), std::move(scales)};
}

// x (rows x k, Q16.16) times w (k x n) in row chunks; Q16.16 result.
FixedMatrix project(const FixedMatrix& x, const QTensor& w, size_t chunk, const MpuConfig& mpu, StageWork* work,
                    std::vector<Event>* events = nullptr, size_t layer = 0) {
  require(x.cols == w.rows(), "project: inner dimensions differ");
  FixedMatrix out(x.rows, w.cols());
  for (size_t c0 = 0, ci = 0; c0 < x.rows; c0 += chunk, ++ci) {
    const size_t n = std::min(chunk, x.rows - c0);
    const RowQuant rq = quantize_rows(x, c0, n);
    const GemmResult g = gemm(rq.q, w, mpu);
    for (size_t r = 0; r < n; ++r) {
      const double mult = rq.scales[r] * w.scale() * 65536.0;
      for (size_t j = 0; j < w.cols(); ++j) {
        const double v = std::nearbyint(static_cast<double>(g.tile.at(r, j)) * mult);
        out.data[(c0 + r) * out.cols + j] = saturate_i32(static_cast<int64_t>(std::clamp(v, -2147483648.0, 2147483647.0)));
      }
    }
    if (work != nullptr) {
      work->add_gemm(n, w.rows(), w.cols());
      work->ddr_bytes += static_cast<uint64_t>(w.rows()) * w.cols();
    }
    if (events != nullptr) events->push_back({layer, EventKind::k_write, ci});
  }
  return out;
}

FixedMatrix normalize_rows(const FixedMatrix& x, const std::vector<int32_t>& weight) {
  FixedMatrix out(x.rows, x.cols);
  for (size_t r = 0; r < x.rows; ++r) {
    const auto y = rmsnorm_fixed(x.row(r), weight);
    std::copy(y.begin(), y.end(), out.row(r).begin());
  }
  return out;
}

FixedMatrix col_block(const FixedMatrix& x, size_t c0, size_t n) {
  FixedMatrix out(x.rows, n);
  for (size_t r = 0; r < x.rows; ++r)
    for (size_t j = 0; j < n; ++j) out.data[r * n + j] = x.data[r * x.cols + c0 + j];
  return out;
}

void add_into(FixedMatrix& acc, const FixedMatrix& y) {
  for (size_t i = 0; i < acc.data.size(); ++i)
    acc.data[i] = saturate_i32(static_cast<int64_t>(acc.data[i]) + y.data[i]);
}

}  // namespace

PrefillResult run_prefill(const QTensor& embeddings, const ModelWeights& model, const PipelineOptions& opts) {
  const ModelConfig& cfg = model.cfg;
  cfg.validate();
  opts.sparsity.validate();
  opts.mpu.validate();
  require(cfg.chunk_size == opts.sparsity.block_size, "run_prefill: chunk_size must equal the sparsity block size");
  require(embeddings.cols() == cfg.d_model, "run_prefill: embedding width differs from d_model");
  require(model.layers.size() == cfg.layers, "run_prefill: weights do not match the layer count");
  const size_t S = embeddings.rows();
  const size_t B = cfg.chunk_size, d = cfg.head_dim;
  const size_t Hq = cfg.num_q_heads, Hkv = cfg.num_kv_heads;
  require(S >= B, "run_prefill: sequence shorter than one block");
  const size_t nb = (S + B - 1) / B;
  const size_t qkv_chunk = opts.single_pass_qkv ? S : B;

  PrefillResult res;
  res.trace.seq_len = S;
  FixedMatrix resid(S, cfg.d_model);
  for (size_t i = 0; i < resid.data.size(); ++i)
    resid.data[i] = saturate_i32(std::llround(embeddings.data()[i] * embeddings.scale() * 65536.0));

  for (size_t l = 0; l < cfg.layers; ++l) {
    const LayerWeights& w = model.layers[l];
    LayerWork work;
    LayerRecord rec;

    // QKV projection per chunk, written to the off-chip stores.
    const FixedMatrix h = normalize_rows(resid, w.attn_norm);
    const FixedMatrix qkv = project(h, w.w_qkv, qkv_chunk, opts.mpu, &work[Stage::qkv], &res.events, l);
    work[Stage::qkv].hbm_bytes += static_cast<uint64_t>(S) * (cfg.d_model + cfg.qkv_width());
    rec.q_store = col_block(qkv, 0, Hq * d);
    rec.k_store = col_block(qkv, Hq * d, Hkv * d);
    rec.v_store = col_block(qkv, (Hq + Hkv) * d, Hkv * d);
    res.events.push_back({l, EventKind::barrier, 0});

    AttentionInput in;
    in.shape = {S, B, d};
    for (size_t hh = 0; hh < Hq; ++hh) in.q.push_back(quantize_fixed(col_block(rec.q_store, hh * d, d)));
    for (size_t g = 0; g < Hkv; ++g) {
      in.k.push_back(quantize_fixed(col_block(rec.k_store, g * d, d)));
      in.v.push_back(quantize_fixed(col_block(rec.v_store, g * d, d)));
    }

    AttentionOutput attn;
    if (opts.dense_reference) {
      std::vector<uint32_t> all(nb);
      for (size_t b = 0; b < nb; ++b) all[b] = static_cast<uint32_t>(b);
      for (size_t hh = 0; hh < Hq; ++hh) {
        rec.index_sets.push_back(expand_vertical_slash(all, {}, nb, static_cast<uint32_t>(hh)));
        rec.patterns.push_back(Pattern::vertical_slash);
      }
      attn = dense_attention(in, opts.mpu);
    } else {
      // Index generation, one head per task.
      for (size_t hh = 0; hh < Hq; ++hh) res.events.push_back({l, EventKind::sigu_read, hh});
      std::vector<SigResult> sig(Hq);
      parallel_for(Hq, [&](size_t hh) {
        sig[hh] = generate_indices(static_cast<uint32_t>(hh), in.q[hh], in.k[hh / (Hq / Hkv)], S, opts.sparsity, opts.mpu);
      });
      StageWork& sw = work[Stage::sigu];
      for (size_t hh = 0; hh < Hq; ++hh) {
        sw.add_gemm(B, d, B, nb);
        sw.hbm_bytes += static_cast<uint64_t>(nb) * B * d + B * d;
        if (sig[hh].indices.pattern == Pattern::query_aware) sw.hbm_bytes += static_cast<uint64_t>(S) * d;
        rec.patterns.push_back(sig[hh].indices.pattern);
        rec.index_sets.push_back(std::move(sig[hh].indices));
      }

      // Sparse attention, block-major.
      SauResult sau = sparse_attention(in, rec.index_sets, opts.attention, opts.mpu);
      StageWork& aw = work[Stage::sau];
      aw.add_gemm(B, d, B, sau.jobs);
      aw.add_gemm(B, B, d, 2 * sau.jobs);  // two probability planes
      aw.hbm_bytes += static_cast<uint64_t>(sau.jobs) * B * d + static_cast<uint64_t>(S) * Hq * d;
      aw.kv_trace = sau.trace;
      aw.kv_block_bytes = 2ull * B * d;
      aw.num_query_blocks = nb;
      attn = std::move(sau.out);
    }

    rec.attn_out = FixedMatrix(S, cfg.d_model);
    for (size_t hh = 0; hh < Hq; ++hh) {
      const FixedMatrix& o = attn.heads[hh];
      const double vs = attn.v_scale[hh];
      for (size_t i = 0; i < S; ++i)
        for (size_t t = 0; t < d; ++t)
          rec.attn_out.data[i * cfg.d_model + hh * d + t] =
              saturate_i32(std::llround(static_cast<double>(o.data[i * d + t]) * vs));
    }
    add_into(resid, rec.attn_out);

    // Feed-forward.
    const FixedMatrix h2 = normalize_rows(resid, w.ffn_norm);
    FixedMatrix u = project(h2, w.w1, B, opts.mpu, &work[Stage::ffn]);
    for (auto& v : u.data) v = silu_fixed(v);
    const FixedMatrix f = project(u, w.w2, B, opts.mpu, &work[Stage::ffn]);
    work[Stage::ffn].hbm_bytes += 2ull * S * cfg.d_model;
    add_into(resid, f);

    res.trace.layers.push_back(std::move(work));
    res.layers.push_back(std::move(rec));
  }

  // First-token logits stub: final norm of the last row, output projection.
  FixedMatrix last(1, cfg.d_model);
  const auto y = rmsnorm_fixed(resid.row(S - 1), model.final_norm);
  std::copy(y.begin(), y.end(), last.data.begin());
  const RowQuant rq = quantize_rows(last, 0, 1);
  const GemmResult g = gemm(rq.q, model.w_out, opts.mpu);
  res.logits.resize(cfg.vocab);
  for (size_t j = 0; j < cfg.vocab; ++j) res.logits[j] = g.tile.at(0, j) * rq.scales[0] * model.w_out.scale();

  res.hidden = std::move(resid);
  res.trace.complete = true;
  return res;
}

bool barrier_respected(const std::vector<Event>& events, size_t layers) {
  for (size_t l = 0; l < layers; ++l) {
    bool barrier = false, any_write = false, any_read = false;
    for (const Event& e : events) {
      if (e.layer != l) continue;
      switch (e.kind) {
        case EventKind::k_write:
          if (barrier) return false;
          any_write = true;
          break;
        case EventKind::barrier:
          if (barrier) return false;
          barrier = true;
          break;
        case EventKind::sigu_read:
          if (!barrier) return false;
          any_read = true;
          break;
      }
    }
    if (!barrier || !any_write || !any_read) return false;
  }
  return true;
}

std::vector<double> reference_layer_output(const QTensor& embeddings, const ModelWeights& model) {
  const ModelConfig& c = model.cfg;
  const size_t S = embeddings.rows(), D = c.d_model, d = c.head_dim;
  const size_t Hq = c.num_q_heads, group = c.num_q_heads / c.num_kv_heads;
  const LayerWeights& w = model.layers.front();
  auto rms = [](std::vector<double> v, const std::vector<int32_t>& g) {
    double ss = 0.0;
    for (double x : v) ss += x * x;
    const double r = std::sqrt(ss / static_cast<double>(v.size()) + std::ldexp(1.0, -20));
    for (size_t i = 0; i < v.size(); ++i) v[i] = v[i] / r * g[i] / 65536.0;
    return v;
  };
  const RealMatrix wqkv = weight_cols(w.w_qkv, 0, c.qkv_width());
  const RealMatrix w1 = weight_cols(w.w1, 0, c.ffn_dim);
  const RealMatrix w2 = weight_cols(w.w2, 0, D);

  std::vector<std::vector<double>> x(S), qkv(S);
  for (size_t i = 0; i < S; ++i) {
    x[i].resize(D);
    for (size_t j = 0; j < D; ++j) x[i][j] = embeddings.at(i, j) * embeddings.scale();
    qkv[i] = row_times(rms(x[i], w.attn_norm), wqkv);
  }
  for (size_t h = 0; h < Hq; ++h) {
    const size_t qo = h * d, ko = (Hq + h / group) * d, vo = (Hq + c.num_kv_heads + h / group) * d;
    for (size_t i = 0; i < S; ++i) {
      std::vector<double> p(i + 1);
      double mx = -INFINITY;
      for (size_t j = 0; j <= i; ++j) {
        double dot = 0.0;
        for (size_t t = 0; t < d; ++t) dot += qkv[i][qo + t] * qkv[j][ko + t];
        p[j] = dot / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, p[j]);
      }
      double sum = 0.0;
      for (double& v : p) sum += (v = std::exp(v - mx));
      for (size_t t = 0; t < d; ++t) {
        double o = 0.0;
        for (size_t j = 0; j <= i; ++j) o += p[j] / sum * qkv[j][vo + t];
        x[i][h * d + t] += o;
      }
    }
  }
  std::vector<double> out;
  out.reserve(S * D);
  for (size_t i = 0; i < S; ++i) {
    auto u = row_times(rms(x[i], w.ffn_norm), w1);
    for (double& v : u) v = v / (1.0 + std::exp(-v));
    const auto f = row_times(u, w2);
    for (size_t j = 0; j < D; ++j) out.push_back(x[i][j] + f[j]);
  }
  return out;
}

uint64_t output_digest(const PrefillResult& r) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  mix(r.hidden.data.data(), r.hidden.data.size() * sizeof(int32_t));
  mix(r.logits.data(), r.logits.size() * sizeof(double));
  return h;
}

}  // namespace fastprefill
