// Copyright 2026 The margindyn Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "margindyn/analysis.hpp"
#include "margindyn/norms.hpp"
#include "margindyn/run_record.hpp"
#include "margindyn/tensor.hpp"
#include "margindyn/trainer.hpp"

namespace margindyn {

// ---------------------------------------------------------------------------
// Runs: JSON Lines. Line 1 is the manifest, each further line one epoch.

struct Run {
  RunManifest manifest;
  std::vector<RunRecord> records;
};

/// Streaming reader; holds one record at a time.
class RunReader {
 public:
  explicit RunReader(const std::filesystem::path& path);

  const RunManifest& manifest() const noexcept { return manifest_; }
  /// Next record, or nullopt at end of file. Blank lines are skipped.
  /// Throws FormatError/ValidationError carrying the 1-based line number.
  std::optional<RunRecord> next();
  /// 1-based line number of the last line read.
  std::size_t line() const noexcept { return line_no_; }

 private:
  std::ifstream in_;
  std::size_t line_no_ = 0;
  RunManifest manifest_;
};

Run read_run(const std::filesystem::path& path);

/// Writes the whole run atomically (temporary file, then rename).
void write_run(const std::filesystem::path& path, const RunManifest& manifest, const std::vector<RunRecord>& records);

/// Parses a single manifest or record line; `line` is used in error messages.
RunManifest parse_manifest(const std::string& text, std::size_t line = 1);
RunRecord parse_record(const std::string& text, std::size_t line = 0);
std::string serialize_manifest(const RunManifest& m);
std::string serialize_record(const RunRecord& r);

// ---------------------------------------------------------------------------
// Tensors: "MTEN" binary format, little-endian.
//
//   bytes 0-3   magic 'M' 'T' 'E' 'N' (0x4D 0x54 0x45 0x4E)
//   u32         version = 1
//   u8          dtype: 0 = f32, 1 = f64
//   u8          ndim in [1, 8]
//   u64 x ndim  dimensions
//   payload     row-major values, exactly prod(dims) elements

enum class TensorDtype : std::uint8_t { kF32 = 0, kF64 = 1 };

inline constexpr std::uint32_t kTensorFormatVersion = 1;

std::vector<std::uint8_t> encode_tensor(const Tensor& t, TensorDtype dtype = TensorDtype::kF64);
/// Throws FormatError on bad magic, version, dtype, rank or payload length.
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);

void write_tensor(const std::filesystem::path& path, const Tensor& t, TensorDtype dtype = TensorDtype::kF64);
Tensor read_tensor(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Networks: a directory with layers.json plus MTEN files it references.

NetworkSpec read_network(const std::filesystem::path& dir);
/// Writes layers.json and one MTEN file per tensor into `dir`.
void write_network(const std::filesystem::path& dir, const NetworkSpec& net);

// ---------------------------------------------------------------------------
// Toy-trainer configuration files (JSON object).
//
// Optional "base" names a canonical config ("small" or "large") that the
// remaining keys override. Unknown keys are rejected.

TrainConfig parse_train_config(const std::string& text);
TrainConfig read_train_config(const std::filesystem::path& path);
std::string serialize_train_config(const TrainConfig& config);

// ---------------------------------------------------------------------------
// Reports

struct ReportPaths {
  std::filesystem::path report_json;
  std::filesystem::path curves_csv;
  std::optional<std::filesystem::path> heatmap_csv;
  std::optional<std::filesystem::path> heatmap_svg;
};

/// report.json, curves.csv and, when a heatmap exists, heatmap.csv (+ .svg
/// when `svg` is set) inside `dir`. Files are written atomically.
ReportPaths write_report(const AnalysisReport& report, const std::filesystem::path& dir, bool svg = true);

std::string report_to_json(const AnalysisReport& report);
/// Inverse of report_to_json for the parts needed to re-render CSV/SVG.
AnalysisReport report_from_json(const std::string& text);

std::string heatmap_to_csv(const CorrelationHeatmap& h);
std::string heatmap_to_svg(const CorrelationHeatmap& h);
std::string curves_to_csv(const AnalysisReport& report);

/// Fill colour used for one heatmap cell ("#rrggbb"); grey for NaN.
std::string heatmap_color(double value);

/// Writes `contents` to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace margindyn
