#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "usrn/synthdata.hpp"
#include "usrn/trainer.hpp"

namespace usrn {

namespace fs = std::filesystem;

/// On-disk dataset: spec.json, {labelled,unlabelled,eval}.bin, manifest.json.
struct DatasetDir {
  SceneSpec spec;
  DatasetSplit split;
  std::uint64_t split_seed = 0;
};

/// Writes the dataset files; the manifest carries per-file content hashes.
void write_dataset_dir(const fs::path& dir, const DatasetDir& data);

/// Reads and verifies a dataset directory. Throws DataError on a missing
/// file or a hash that does not match the manifest.
DatasetDir read_dataset_dir(const fs::path& dir);

nlohmann::json dataset_manifest(const DatasetDir& data);

// Run directory: config.json, losses.csv, metrics.csv, taxonomy.json
// (usrn runs), params.bin, summary.json.
std::string losses_csv(const RunRecord& rec);
std::string metrics_csv(const RunRecord& rec);
nlohmann::json run_summary(const RunRecord& rec);
void write_run_dir(const fs::path& dir, const RunRecord& rec);

/// Ladder table: one row per ladder row with per-seed and median values.
std::string ladder_csv(const LadderResult& ladder);

struct ReportEntry {
  std::string run_id;
  double miou = 0.0;
  std::vector<double> per_class;
  double predicted_cbr = 0.0;
  double subclass_cbr = 0.0;
  double gate_open = 0.0;
  std::vector<std::pair<int, double>> curve;  // (step, eval mIoU)
};

/// Reads summary.json from a run directory.
ReportEntry read_report_entry(const fs::path& run_dir);

std::string report_csv(const std::vector<ReportEntry>& entries);
/// Line chart of eval mIoU against step, one polyline per entry.
std::string report_svg(const std::vector<ReportEntry>& entries);

void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

}  // namespace usrn
