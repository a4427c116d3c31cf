#pragma once

// JSON run configuration for the command-line tool.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "json.hpp"
#include "sonoalign/dataset.hpp"
#include "sonoalign/eval.hpp"
#include "sonoalign/model.hpp"
#include "sonoalign/taxonomy.hpp"

namespace sonoalign::cli {

struct RunPaths {
  std::filesystem::path data;        // records JSONL
  std::filesystem::path split;       // split manifest JSON
  std::filesystem::path checkpoint;
  std::filesystem::path log;         // training log (JSON lines)
  std::filesystem::path report;      // metric report JSON
  std::filesystem::path catalog;     // replaces the built-in catalog
  std::map<std::string, std::filesystem::path> sim_tables;  // task id -> SimTable JSON
};

struct RunConfig {
  model::TrainConfig train;
  dataset::SynthConfig synth;
  dataset::SplitRatios ratios = dataset::kDefaultRatios;
  std::uint64_t split_seed = 0;
  eval::ZeroShotOptions zero_shot;
  RunPaths paths;

  // Unknown keys anywhere raise ValidationError. Relative paths are resolved
  // against `base_dir`.
  static RunConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  // Built-in catalog, or paths.catalog, with any similarity tables applied.
  taxonomy::TaxonomyCatalog catalog() const;

  // Applies SONO_ALIGN_SEED to train.seed when set; returns the value used.
  std::optional<std::uint64_t> apply_seed_override();
};

dataset::SynthConfig synth_config_from_json(const nlohmann::json& doc);
nlohmann::json synth_config_to_json(const dataset::SynthConfig& cfg);

}  // namespace sonoalign::cli
