#include "detseg/report.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include "json.hpp"

namespace detseg::report {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string row_label(const std::string& mode, const std::string& kd_mode) {
  if (mode == "single_det" || mode == "single_seg")
    return kd_mode.empty() ? "Single task" : "Single task + " + kd_mode;
  if (mode == "finetune_head") return "Finetuning head";
  if (mode == "finetune_full") return "Finetuning full";
  if (mode == "mt_epoch") return "Multi-task (epoch)";
  if (mode == "mt_full") return "Multi-task (full)";
  if (mode == "mt_iteration")
    return kd_mode.empty() ? "Multi-task (iteration)" : "Multi-task + " + kd_mode;
  return mode;
}

std::string cell(double v) {
  if (v < 0) return "      -";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%7.2f", v);
  return buf;
}

struct Agg {
  double map = 0, ap50 = 0, miou = 0;
  int n_map = 0, n_miou = 0, n = 0;

  void add(const RunSummary& r) {
    ++n;
    if (r.map >= 0) map += r.map, ap50 += r.ap50, ++n_map;
    if (r.miou >= 0) miou += r.miou, ++n_miou;
  }
  double mean_map() const { return n_map ? map / n_map : -1; }
  double mean_ap50() const { return n_map ? ap50 / n_map : -1; }
  double mean_miou() const { return n_miou ? miou / n_miou : -1; }
};

std::string format_rows(const std::vector<std::string>& order,
                        const std::map<std::string, Agg>& by_label) {
  std::string out = "  row                         mAP    AP50    mIoU   runs\n";
  for (const auto& label : order) {
    auto it = by_label.find(label);
    if (it == by_label.end()) continue;
    char head[40];
    std::snprintf(head, sizeof(head), "  %-26s", label.c_str());
    out += head;
    out += cell(it->second.mean_map());
    out += cell(it->second.mean_ap50());
    out += cell(it->second.mean_miou());
    char tail[16];
    std::snprintf(tail, sizeof(tail), "  %5d\n", it->second.n);
    out += tail;
  }
  return out;
}

std::map<std::string, Agg> aggregate(const std::vector<RunSummary>& runs) {
  std::map<std::string, Agg> by_label;
  for (const auto& r : runs) by_label[r.label].add(r);
  return by_label;
}

}  // namespace

RunSummary summarize_run(const std::string& run_dir) {
  RunSummary s;
  s.name = fs::path(run_dir).filename().string();

  const std::string cfg_path = run_dir + "/config.resolved";
  if (fs::exists(cfg_path)) {
    std::ifstream in(cfg_path);
    json cfg = json::parse(in);
    if (cfg.contains("train")) {
      s.mode = cfg["train"].value("mode", "");
      s.seed = cfg["train"].value("seed", static_cast<uint64_t>(0));
    }
    if (cfg.contains("distill")) s.kd_mode = cfg["distill"].value("mode", "");
  }
  s.label = row_label(s.mode, s.kd_mode);

  const std::string metrics_path = run_dir + "/metrics.jsonl";
  std::ifstream in(metrics_path);
  if (!in) throw std::runtime_error("no metrics.jsonl under " + run_dir);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line);
    ++s.epochs;
    const auto take = [&](const char* key, double& into) {
      if (rec.contains(key) && !rec[key].is_null()) into = rec[key].get<double>();
    };
    take("map", s.map);
    take("ap50", s.ap50);
    take("miou", s.miou);
    take("det_loss", s.det_loss);
    take("seg_loss", s.seg_loss);
  }
  return s;
}

std::vector<RunSummary> collect_runs(const std::string& root) {
  std::vector<RunSummary> out;
  if (!fs::is_directory(root)) throw std::runtime_error(root + " is not a directory");
  std::vector<std::string> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "metrics.jsonl"))
      dirs.push_back(e.path().string());
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) out.push_back(summarize_run(d));
  return out;
}

std::string format_strategy_table(const std::vector<RunSummary>& runs) {
  static const std::vector<std::string> order = {
      "Single task",       "Finetuning head",        "Finetuning full",
      "Multi-task (epoch)", "Multi-task (iteration)", "Multi-task (full)"};
  std::vector<RunSummary> keep;
  for (const auto& r : runs)
    if (std::find(order.begin(), order.end(), r.label) != order.end()) keep.push_back(r);
  return "Training strategies\n" + format_rows(order, aggregate(keep));
}

std::string format_distill_table(const std::vector<RunSummary>& runs) {
  static const std::vector<std::string> order = {
      "Multi-task (iteration)", "Multi-task + 0mse", "Multi-task + 1mse", "Multi-task + 2mse"};
  std::vector<RunSummary> keep;
  for (const auto& r : runs)
    if (std::find(order.begin(), order.end(), r.label) != order.end()) keep.push_back(r);
  return "Distillation routing\n" + format_rows(order, aggregate(keep));
}

std::string format_report(const std::vector<RunSummary>& runs) {
  std::string out = format_strategy_table(runs) + "\n" + format_distill_table(runs) + "\nRuns\n";
  for (const auto& r : runs) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "  %-24s %-24s seed=%llu epochs=%d", r.name.c_str(),
                  r.label.c_str(), static_cast<unsigned long long>(r.seed), r.epochs);
    out += buf;
    out += " map=" + (r.map >= 0 ? std::to_string(r.map) : "-");
    out += " miou=" + (r.miou >= 0 ? std::to_string(r.miou) : "-");
    out += "\n";
  }
  return out;
}

}  // namespace detseg::report
