// SPDX-License-Identifier: Apache-2.0

#include "fastprefill/config.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include <json.hpp>

namespace fastprefill {

namespace {

using nlohmann::json;

void only_keys(const json& obj, const std::string& where, std::initializer_list<const char*> keys) {
  require(obj.is_object(), where + ": expected an object");
  for (const auto& [k, v] : obj.items()) {
    bool known = false;
    for (const char* allowed : keys) known = known || k == allowed;
    require(known, where + ": unknown key '" + k + "'");
  }
}

template <typename T>
void take(const json& obj, const char* key, T& dst) {
  if (obj.contains(key)) dst = obj.at(key).get<T>();
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  platform.validate();
  sparsity.validate();
  require(model.chunk_size == sparsity.block_size, "config: chunk size must equal the sparsity block size");
  require(attention.num_banks >= 1, "config: attention.num_banks must be positive");
  require(workload.noise >= 0.0 && workload.sink_strength >= 0.0 && workload.block_coherence >= 0.0,
          "config: workload weights must be non-negative");
  require(!lengths.empty(), "config: run.lengths is empty");
  for (size_t s : lengths) require(s >= sparsity.block_size, "config: every length must be at least one block");
}

PipelineOptions RunConfig::pipeline_options() const {
  PipelineOptions o;
  o.sparsity = sparsity;
  o.attention = attention;
  o.mpu = platform.mpu;
  return o;
}

RunConfig parse_run_config(const std::string& text, const std::string& base_dir) {
  RunConfig c;
  try {
    const json j = json::parse(text);
    only_keys(j, "config", {"model", "platform", "sparsity", "attention", "workload", "run"});
    if (j.contains("model")) {
      const auto& m = j["model"];
      only_keys(m, "model", {"layers", "d_model", "num_q_heads", "num_kv_heads", "head_dim", "ffn_dim", "vocab",
                             "attn_norm_gain", "weights"});
      take(m, "layers", c.model.layers);
      take(m, "d_model", c.model.d_model);
      take(m, "num_q_heads", c.model.num_q_heads);
      take(m, "num_kv_heads", c.model.num_kv_heads);
      take(m, "head_dim", c.model.head_dim);
      take(m, "ffn_dim", c.model.ffn_dim);
      take(m, "vocab", c.model.vocab);
      take(m, "attn_norm_gain", c.model.attn_norm_gain);
      if (m.contains("weights")) {
        std::filesystem::path p = m["weights"].get<std::string>();
        if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
        c.weights_manifest = p.string();
      }
    }
    if (j.contains("platform")) {
      const auto& p = j["platform"];
      only_keys(p, "platform", {"frequency_hz", "hbm_bw", "ddr_bw", "hbm_latency_ns", "mpu", "cache"});
      take(p, "frequency_hz", c.platform.frequency);
      take(p, "hbm_bw", c.platform.hbm_bw);
      take(p, "ddr_bw", c.platform.ddr_bw);
      take(p, "hbm_latency_ns", c.platform.hbm_latency_ns);
      if (p.contains("mpu")) {
        const auto& m = p["mpu"];
        only_keys(m, "platform.mpu", {"dsp_arrays", "lut_arrays", "array_dim"});
        take(m, "dsp_arrays", c.platform.mpu.dsp_arrays);
        take(m, "lut_arrays", c.platform.mpu.lut_arrays);
        take(m, "array_dim", c.platform.mpu.array_dim);
      }
      if (p.contains("cache")) {
        const auto& k = p["cache"];
        only_keys(k, "platform.cache", {"enabled", "total_capacity", "hot_fraction", "t_hot", "lookahead"});
        take(k, "enabled", c.platform.cache.enabled);
        take(k, "total_capacity", c.platform.cache.total_capacity);
        take(k, "hot_fraction", c.platform.cache.hot_fraction);
        take(k, "t_hot", c.platform.cache.t_hot);
        take(k, "lookahead", c.platform.cache.lookahead);
      }
    }
    if (j.contains("sparsity")) {
      const auto& s = j["sparsity"];
      only_keys(s, "sparsity", {"block_size", "tau", "gamma"});
      take(s, "block_size", c.sparsity.block_size);
      take(s, "tau", c.sparsity.tau);
      take(s, "gamma", c.sparsity.gamma);
    }
    if (j.contains("attention")) {
      const auto& a = j["attention"];
      only_keys(a, "attention", {"num_banks", "query_group_blocks"});
      take(a, "num_banks", c.attention.num_banks);
      take(a, "query_group_blocks", c.attention.query_group_blocks);
    }
    if (j.contains("workload")) {
      const auto& w = j["workload"];
      only_keys(w, "workload", {"sink_strength", "block_coherence", "noise"});
      take(w, "sink_strength", c.workload.sink_strength);
      take(w, "block_coherence", c.workload.block_coherence);
      take(w, "noise", c.workload.noise);
    }
    if (j.contains("run")) {
      const auto& r = j["run"];
      only_keys(r, "run", {"seed", "lengths"});
      take(r, "seed", c.seed);
      take(r, "lengths", c.lengths);
    }
  } catch (const json::exception& e) {
    throw Error(std::string("config: ") + e.what());
  }
  c.model.chunk_size = c.sparsity.block_size;
  c.model.seed = c.seed;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), std::filesystem::path(path).parent_path().string());
}

std::vector<size_t> parse_lengths(const std::string& csv) {
  std::vector<size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    size_t v = 0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    require(ec == std::errc() && ptr == item.data() + item.size() && v > 0, "lengths: invalid entry '" + item + "'");
    out.push_back(v);
  }
  require(!out.empty(), "lengths: empty list");
  return out;
}

}  // namespace fastprefill
