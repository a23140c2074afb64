// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fastprefill/attention.hpp"
#include "fastprefill/perf.hpp"
#include "fastprefill/pipeline.hpp"
#include "fastprefill/sigu.hpp"

namespace fastprefill {

struct RunConfig {
  ModelConfig model;
  std::string weights_manifest;  // empty: synthetic weights from the seed
  PlatformConfig platform;
  SigConfig sparsity;
  SauConfig attention;
  WorkloadConfig workload;
  uint64_t seed = 0;
  std::vector<size_t> lengths{1024};

  void validate() const;
  PipelineOptions pipeline_options() const;
};

// Parses and validates a JSON run configuration. Unknown keys are rejected.
// Relative weight paths resolve against base_dir.
RunConfig parse_run_config(const std::string& text, const std::string& base_dir = ".");
RunConfig load_run_config(const std::string& path);

// Comma-separated positive integers, e.g. "4096,8192".
std::vector<size_t> parse_lengths(const std::string& csv);

}  // namespace fastprefill
