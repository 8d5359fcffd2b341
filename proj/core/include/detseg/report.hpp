#pragma once

#include <string>
#include <vector>

namespace detseg::report {

// Digest of one run directory: the training mode from config.resolved and
// the last reported validation metrics from metrics.jsonl.
struct RunSummary {
  std::string name;   // directory basename
  std::string label;  // table row label derived from the mode
  std::string mode;
  std::string kd_mode;  // empty unless distilled
  uint64_t seed = 0;
  int epochs = 0;
  double map = -1.0;
  double ap50 = -1.0;
  double miou = -1.0;
  double det_loss = -1.0;
  double seg_loss = -1.0;
};

RunSummary summarize_run(const std::string& run_dir);

// Scans root's direct subdirectories for metrics.jsonl files.
std::vector<RunSummary> collect_runs(const std::string& root);

// Strategy comparison (single task, finetuning, multi-task variants) and the
// distillation-routing comparison with "Multi-task + {0,1,2}mse" rows. Runs
// sharing a row label are averaged; n gives the run count per cell.
std::string format_strategy_table(const std::vector<RunSummary>& runs);
std::string format_distill_table(const std::vector<RunSummary>& runs);

// Both tables plus a per-run listing.
std::string format_report(const std::vector<RunSummary>& runs);

}  // namespace detseg::report
