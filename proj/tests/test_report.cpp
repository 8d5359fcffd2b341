#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "detseg/report.hpp"
#include "doctest.h"

using namespace detseg;
namespace fs = std::filesystem;

namespace {

// Builds throwaway run directories with just the two files the report reads.
struct FakeRuns {
  fs::path root;
  FakeRuns() : root(fs::temp_directory_path() / "detseg_report_test") {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~FakeRuns() { fs::remove_all(root); }

  std::string add(const std::string& name, const std::string& mode, uint64_t seed,
                  const std::vector<std::string>& metric_lines,
                  const std::string& kd_mode = "") {
    const fs::path dir = root / name;
    fs::create_directories(dir);
    std::ofstream cfg(dir / "config.resolved");
    cfg << R"({"train": {"mode": ")" << mode << R"(", "seed": )" << seed << "}";
    if (!kd_mode.empty()) cfg << R"(, "distill": {"mode": ")" << kd_mode << R"("})";
    cfg << "}";
    std::ofstream metrics(dir / "metrics.jsonl");
    for (const auto& line : metric_lines) metrics << line << "\n";
    return dir.string();
  }
};

}  // namespace

TEST_SUITE("report") {
  TEST_CASE("a run summary keeps the last reported value of each metric") {
    FakeRuns runs;
    const auto dir = runs.add(
        "stl_det_s5", "single_det", 5,
        {R"({"epoch": 0, "det_loss": 1.5, "map": 10.0, "ap50": 20.0, "miou": null})",
         R"({"epoch": 1, "det_loss": 1.2})",
         R"({"epoch": 2, "det_loss": 0.9, "map": 15.0, "ap50": 25.0})"});
    auto s = report::summarize_run(dir);
    CHECK(s.name == "stl_det_s5");
    CHECK(s.mode == "single_det");
    CHECK(s.label == "Single task");
    CHECK(s.seed == 5);
    CHECK(s.epochs == 3);
    CHECK(s.map == doctest::Approx(15.0));
    CHECK(s.ap50 == doctest::Approx(25.0));
    CHECK(s.miou == -1.0);  // never reported
    CHECK(s.det_loss == doctest::Approx(0.9));
  }

  TEST_CASE("row labels follow the mode and the distillation variant") {
    FakeRuns runs;
    const auto line = R"({"epoch": 0, "map": 1.0, "ap50": 1.0, "miou": 1.0})";
    CHECK(report::summarize_run(runs.add("a", "finetune_head", 1, {line})).label ==
          "Finetuning head");
    CHECK(report::summarize_run(runs.add("b", "finetune_full", 1, {line})).label ==
          "Finetuning full");
    CHECK(report::summarize_run(runs.add("c", "mt_epoch", 1, {line})).label ==
          "Multi-task (epoch)");
    CHECK(report::summarize_run(runs.add("d", "mt_full", 1, {line})).label ==
          "Multi-task (full)");
    CHECK(report::summarize_run(runs.add("e", "mt_iteration", 1, {line})).label ==
          "Multi-task (iteration)");
    CHECK(report::summarize_run(runs.add("f", "mt_iteration", 1, {line}, "2mse")).label ==
          "Multi-task + 2mse");
    CHECK(report::summarize_run(runs.add("g", "single_seg", 1, {line}, "stl_kd")).label ==
          "Single task + stl_kd");
    CHECK(report::summarize_run(runs.add("h", "mt_iteration", 1, {line}, "0mse")).kd_mode ==
          "0mse");
  }

  TEST_CASE("a run directory without metrics is an error") {
    FakeRuns runs;
    fs::create_directories(runs.root / "empty");
    CHECK_THROWS_WITH_AS(report::summarize_run((runs.root / "empty").string()),
                         doctest::Contains("metrics.jsonl"), std::runtime_error);
  }

  TEST_CASE("collect_runs scans direct children and sorts by name") {
    FakeRuns runs;
    const auto line = R"({"epoch": 0, "map": 1.0, "ap50": 1.0})";
    runs.add("z_last", "single_det", 1, {line});
    runs.add("a_first", "single_det", 2, {line});
    fs::create_directories(runs.root / "no_metrics_here");

    auto all = report::collect_runs(runs.root.string());
    REQUIRE(all.size() == 2);
    CHECK(all[0].name == "a_first");
    CHECK(all[1].name == "z_last");

    CHECK_THROWS_AS(report::collect_runs((runs.root / "missing").string()), std::runtime_error);
  }

  TEST_CASE("runs sharing a label average into one strategy row") {
    FakeRuns runs;
    runs.add("det_s1", "single_det", 1, {R"({"epoch": 0, "map": 10.0, "ap50": 30.0})"});
    runs.add("det_s2", "single_det", 2, {R"({"epoch": 0, "map": 20.0, "ap50": 40.0})"});
    runs.add("seg_s1", "single_seg", 1, {R"({"epoch": 0, "miou": 44.0})"});
    runs.add("mt_s1", "mt_iteration", 1,
             {R"({"epoch": 0, "map": 18.0, "ap50": 28.0, "miou": 50.0})"});
    auto all = report::collect_runs(runs.root.string());

    auto table = report::format_strategy_table(all);
    // Three single-task runs fold into one row: mAP (10+20)/2, mIoU 44.
    CHECK(table.find("Single task") != std::string::npos);
    CHECK(table.find("15.00") != std::string::npos);
    CHECK(table.find("35.00") != std::string::npos);
    CHECK(table.find("44.00") != std::string::npos);
    CHECK(table.find("Multi-task (iteration)") != std::string::npos);
    CHECK(table.find("18.00") != std::string::npos);
    // No distillation rows in the strategy table.
    CHECK(table.find("mse") == std::string::npos);
  }

  TEST_CASE("the distill table compares routing variants against plain multi-task") {
    FakeRuns runs;
    const char* line = R"({"epoch": 0, "map": 12.0, "ap50": 22.0, "miou": 32.0})";
    runs.add("mt", "mt_iteration", 1, {line});
    runs.add("kd0", "mt_iteration", 1, {line}, "0mse");
    runs.add("kd2", "mt_iteration", 1, {line}, "2mse");
    runs.add("stl", "single_det", 1, {line});
    auto all = report::collect_runs(runs.root.string());

    auto table = report::format_distill_table(all);
    CHECK(table.find("Multi-task (iteration)") != std::string::npos);
    CHECK(table.find("Multi-task + 0mse") != std::string::npos);
    CHECK(table.find("Multi-task + 2mse") != std::string::npos);
    CHECK(table.find("Multi-task + 1mse") == std::string::npos);  // no such run
    CHECK(table.find("Single task") == std::string::npos);
  }

  TEST_CASE("a missing metric renders as a dash") {
    FakeRuns runs;
    runs.add("det_only", "single_det", 1, {R"({"epoch": 0, "map": 10.0, "ap50": 30.0})"});
    auto table = report::format_strategy_table(report::collect_runs(runs.root.string()));
    CHECK(table.find("-") != std::string::npos);
  }

  TEST_CASE("the full report carries both tables and the run listing") {
    FakeRuns runs;
    runs.add("mt_seed1", "mt_iteration", 1,
             {R"({"epoch": 0, "map": 18.0, "ap50": 28.0, "miou": 50.0})"});
    auto out = report::format_report(report::collect_runs(runs.root.string()));
    CHECK(out.find("Training strategies") != std::string::npos);
    CHECK(out.find("Distillation routing") != std::string::npos);
    CHECK(out.find("Runs") != std::string::npos);
    CHECK(out.find("mt_seed1") != std::string::npos);
    CHECK(out.find("seed=1") != std::string::npos);
  }
}
