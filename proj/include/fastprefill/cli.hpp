// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fastprefill/perf.hpp"

namespace fastprefill {

inline constexpr int kSchemaVersion = 1;

struct CliOptions {
  std::string config_path;
  std::string out_path;  // empty: stdout
  std::string format = "json";
  std::optional<uint64_t> seed;
  std::optional<std::vector<size_t>> lengths;
  std::string trace_path;   // trace-cache: replay this JSON-lines trace
  std::string trace_out;    // trace-cache: write the generated trace here
  std::string index_out;    // trace-cache: write the per-head index sets here
};

// Each command validates its inputs before any compute, writes its report
// atomically (temp file + rename) and returns a process exit status.
int cmd_run(const CliOptions& o, std::ostream& log);
int cmd_ablate_cache(const CliOptions& o, std::ostream& log);
int cmd_ablate_mpu(const CliOptions& o, std::ostream& log);
int cmd_trace_cache(const CliOptions& o, std::ostream& log);
int cmd_verify(const CliOptions& o, std::ostream& log);

// Replaces `path` with `content` via a temporary file in the same directory.
void write_atomic(const std::string& path, const std::string& content);

// Fixed CSV header for per-length reports.
std::string report_csv_header();

}  // namespace fastprefill
