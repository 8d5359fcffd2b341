#pragma once

#include <cstdint>
#include <string>

#include "detseg/dataio.hpp"
#include "detseg/distill.hpp"
#include "detseg/model.hpp"
#include "detseg/synthetic.hpp"
#include "detseg/trainer.hpp"

namespace detseg::config {

// Everything one experiment needs, resolved from a config file tree. Files
// are JSON; an `extends` key pulls in a base file (path relative to the
// child) whose values the child overrides key by key, objects merging
// recursively. Unknown keys anywhere are an error listing every offender, so
// a misspelled knob can never fall back to a default silently.
struct RunConfig {
  std::string data_root;   // training dataset directory
  std::string val_root;    // validation dataset directory; empty = none
  std::string run_dir;     // output directory; empty = decided by the caller

  // Split section: either a precomputed split file, or the parameters to
  // derive one from data_root.
  std::string split_path;
  uint64_t split_seed = 0;
  data::SplitOptions split;
  std::string halve;  // "", "det", or "seg"

  model::ModelConfig model;
  train::TrainConfig train;

  bool has_distill = false;
  distill::DistillConfig kd;
};

// Loads and fully resolves a config file. The same function reads back the
// config.resolved snapshot a run writes.
RunConfig load_run_config(const std::string& path);

// Parses the merged JSON text directly (exposed for tests).
RunConfig parse_run_config(const std::string& json_text);

std::string to_json(const RunConfig& cfg);
void save_resolved(const RunConfig& cfg, const std::string& path);

// Synthetic-generator spec files share the strict-key treatment.
data::SyntheticSpec load_synthetic_spec(const std::string& path);

}  // namespace detseg::config
