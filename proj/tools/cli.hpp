#pragma once

// Experiment files and the train / sweep / verify-grad / analyze commands.

#include "metadistil/distill.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace metadistil::cli {

inline constexpr int kManifestVersion = 1;
inline constexpr const char* kOutputRootEnv = "METADISTIL_OUTPUT_ROOT";

struct DataSection {
  std::string generator = "blobs";  // blobs | spirals | csv
  std::size_t per_class = 600;
  std::size_t classes = 3;
  double radius = 2.0;   // blob centers on a circle
  double spread = 0.9;   // blob stddev
  double turns = 1.5;    // spirals
  double noise = 0.1;    // spirals
  std::filesystem::path path;  // csv
  double dev_fraction = 0.1;
  double test_fraction = 0.1;
  std::uint64_t seed = 0;

  friend bool operator==(const DataSection&, const DataSection&) = default;
};

struct SweepSection {
  std::string parameter;            // alpha | temperature | student_layers | mode
  std::vector<std::string> values;  // as written; layer lists use '-' separators
  std::vector<std::uint64_t> seeds;
  std::size_t workers = 1;
  std::filesystem::path static_snapshot;  // per-mode overrides of [teacher] snapshot
  std::filesystem::path cross_snapshot;
};

struct ExperimentFile {
  DataSection data;
  DistillConfig distill;
  std::filesystem::path snapshot;  // [teacher] snapshot; empty when absent
  std::optional<SweepSection> sweep;
  std::filesystem::path output;  // resolved run directory
  std::filesystem::path source;  // file the config came from, if any
};

/// Parses INI text. Unknown sections or keys, missing required keys and
/// out-of-range values raise ConfigError naming the key.
ExperimentFile parse_config_text(const std::string& text, const std::filesystem::path& source = {});
ExperimentFile parse_config(const std::filesystem::path& path);

/// Fully resolved configuration as INI; parses back to the same values.
std::string to_ini(const ExperimentFile& config);

Dataset make_dataset(const DataSection& data);
SplitSet make_splits(const ExperimentFile& config);

struct RunManifest {
  std::string config;
  std::string started_at;
  std::string finished_at;
  std::vector<std::string> files;  // relative to the run directory
  int format_version = kManifestVersion;
};

RunManifest cmd_train(const ExperimentFile& config, std::ostream& log);
RunManifest cmd_sweep(const ExperimentFile& config, std::ostream& log);

struct VerifyOptions {
  std::size_t instances = 20;
  double tolerance = 1e-5;
  double step = 1e-5;
  bool zero_lambda = false;
  std::uint64_t seed = 1;
};

struct VerifyReport {
  std::size_t instances = 0;
  double worst_error = 0.0;
  bool passed = false;
};

VerifyReport cmd_verify_grad(const VerifyOptions& options, std::ostream& log);

/// Re-derives the analysis metrics from run directories and writes
/// analysis.json into `out_dir` (the first run directory when empty).
std::string cmd_analyze(const std::vector<std::filesystem::path>& runs, const std::filesystem::path& out_dir,
                        std::ostream& log);

/// Entry point shared by the executable and the tests; returns the exit code.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace metadistil::cli
