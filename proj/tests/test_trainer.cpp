#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "detseg/model.hpp"
#include "detseg/synthetic.hpp"
#include "detseg/trainer.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace detseg;
namespace fs = std::filesystem;

namespace {

// Small enough that a handful of epochs stays in the sub-second range.
model::ModelConfig tiny_cfg() {
  model::ModelConfig cfg;
  cfg.enc.backbone.widths = {8, 12, 16, 20};
  cfg.enc.det_channels = 16;
  cfg.enc.context_enhancement = false;
  cfg.det.conv_blocks = 1;
  cfg.seg.seg_channels = 16;
  return cfg;
}

data::Dataset tiny_data(int n, uint64_t seed) {
  data::SyntheticSpec spec;
  spec.width = 32;
  spec.height = 32;
  spec.max_shapes = 2;
  spec.min_size = 8;
  spec.max_size = 14;
  return data::generate_synthetic(n, spec, seed);
}

std::vector<std::string> ids_of(const data::Dataset& ds, size_t from, size_t count) {
  std::vector<std::string> out;
  for (size_t i = from; i < from + count; ++i) out.push_back(ds.samples[i].id);
  return out;
}

data::PartialSplit split_of(const data::Dataset& ds, size_t n_det, size_t n_seg) {
  data::PartialSplit sp;
  sp.det_ids = ids_of(ds, 0, n_det);
  sp.seg_ids = ids_of(ds, n_det, n_seg);
  return sp;
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempRun {
  fs::path dir;
  explicit TempRun(const char* name) : dir(fs::temp_directory_path() / name) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~TempRun() { fs::remove_all(dir); }
};

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("zero learning rate leaves every parameter untouched") {
    auto ds = tiny_data(4, 1);
    model::Model m(tiny_cfg(), 5);
    const uint64_t before = m.params().content_hash();
    train::TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 2;
    cfg.lr = 0.f;
    train::train_single(m, ds, ids_of(ds, 0, 4), data::TaskTag::DET, cfg);
    CHECK(m.params().content_hash() == before);
  }

  TEST_CASE("a single-task run never touches the other head") {
    auto ds = tiny_data(4, 2);
    model::Model m(tiny_cfg(), 5);
    const uint64_t seg_before = m.params().content_hash("seg_head/");
    const uint64_t bb_before = m.params().content_hash("backbone/");
    train::TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 2;
    train::train_single(m, ds, ids_of(ds, 0, 4), data::TaskTag::DET, cfg);
    CHECK(m.params().content_hash("seg_head/") == seg_before);
    CHECK(m.params().content_hash("backbone/") != bb_before);
    CHECK(m.params().content_hash("det_head/") != 0);
  }

  TEST_CASE("losses fall over a short multi-task run") {
    auto ds = tiny_data(8, 3);
    model::Model m(tiny_cfg(), 9);
    train::TrainConfig cfg;
    cfg.mode = train::TrainMode::MT_ITERATION;
    cfg.epochs = 5;
    cfg.batch_size = 4;
    auto res = train::train_multitask(m, ds, split_of(ds, 4, 4), cfg);
    REQUIRE(res.history.size() == 5);
    CHECK(res.history.back().det_loss < res.history.front().det_loss);
    CHECK(res.history.back().seg_loss < res.history.front().seg_loss);
  }

  TEST_CASE("an epoch-alternating run trains only the leading block") {
    auto ds = tiny_data(4, 4);
    model::Model m(tiny_cfg(), 5);
    const uint64_t seg_before = m.params().content_hash("seg_head/");
    train::TrainConfig cfg;
    cfg.mode = train::TrainMode::MT_EPOCH;
    cfg.epochs = 1;  // epoch 0 is a DET epoch
    cfg.batch_size = 2;
    auto res = train::train_multitask(m, ds, split_of(ds, 2, 2), cfg);
    CHECK(res.history[0].det_loss >= 0);
    CHECK(res.history[0].seg_loss == -1.0);
    CHECK(m.params().content_hash("seg_head/") == seg_before);
  }

  TEST_CASE("history records the cosine schedule") {
    auto ds = tiny_data(2, 5);
    train::TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 2;
    cfg.lr = 0.08f;
    {
      model::Model m(tiny_cfg(), 5);
      auto res = train::train_single(m, ds, ids_of(ds, 0, 2), data::TaskTag::DET, cfg);
      REQUIRE(res.history.size() == 4);
      for (int e = 0; e < 4; ++e) {
        const double want = 0.08 * 0.5 * (1.0 + std::cos(std::numbers::pi * e / 4.0));
        CHECK(res.history[e].lr == doctest::Approx(want).epsilon(1e-5));
      }
    }
    cfg.cosine = false;
    model::Model m(tiny_cfg(), 5);
    auto res = train::train_single(m, ds, ids_of(ds, 0, 2), data::TaskTag::DET, cfg);
    for (const auto& st : res.history) CHECK(st.lr == doctest::Approx(0.08));
  }

  TEST_CASE("evaluation follows eval_every and always covers the last epoch") {
    auto ds = tiny_data(2, 6);
    auto val = tiny_data(2, 7);
    train::TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 2;
    cfg.eval_every = 2;
    model::Model m(tiny_cfg(), 5);
    auto res = train::train_single(m, ds, ids_of(ds, 0, 2), data::TaskTag::DET, cfg, &val);
    REQUIRE(res.history.size() == 5);
    for (int e : {1, 3, 4}) CHECK(res.history[e].eval.map >= 0);
    for (int e : {0, 2}) CHECK(res.history[e].eval.map == -1.0);

    cfg.eval_every = 0;  // final only
    model::Model m2(tiny_cfg(), 5);
    auto r2 = train::train_single(m2, ds, ids_of(ds, 0, 2), data::TaskTag::DET, cfg, &val);
    for (int e : {0, 1, 2, 3}) CHECK(r2.history[e].eval.map == -1.0);
    CHECK(r2.history[4].eval.map >= 0);
    CHECK(r2.final_eval.map == r2.history[4].eval.map);
  }

  TEST_CASE("a run directory receives metrics, checkpoints, and the best snapshot") {
    TempRun run("detseg_trainer_rundir");
    auto ds = tiny_data(4, 8);
    auto val = tiny_data(2, 9);
    train::TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.save_epoch_checkpoints = true;
    model::ModelConfig det_only = tiny_cfg();
    det_only.with_seg = false;  // so the seg fields below stay null
    model::Model m(det_only, 5);
    auto res =
        train::train_single(m, ds, ids_of(ds, 0, 4), data::TaskTag::DET, cfg, &val, run.dir.string());

    CHECK(fs::exists(run.dir / "checkpoints" / "last.ckpt"));
    CHECK(fs::exists(run.dir / "checkpoints" / "best.ckpt"));
    CHECK(fs::exists(run.dir / "checkpoints" / "last.train"));
    CHECK(fs::exists(run.dir / "checkpoints" / "epoch_000.ckpt"));
    CHECK(fs::exists(run.dir / "checkpoints" / "epoch_001.ckpt"));
    CHECK(res.last_checkpoint == (run.dir / "checkpoints" / "last.ckpt").string());
    CHECK(res.best_checkpoint == (run.dir / "checkpoints" / "best.ckpt").string());

    // One metrics line per epoch; fields the mode never produces stay null.
    std::ifstream in(run.dir / "metrics.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
      auto rec = nlohmann::json::parse(line);
      CHECK(rec["epoch"] == lines);
      CHECK_FALSE(rec["det_loss"].is_null());
      CHECK(rec["seg_loss"].is_null());
      CHECK(rec["kd_loss"].is_null());
      CHECK(rec["miou"].is_null());
      CHECK_FALSE(rec["map"].is_null());  // eval_every defaults to 1
      ++lines;
    }
    CHECK(lines == 2);
  }

  TEST_CASE("resuming an interrupted run reproduces the straight run bit for bit") {
    auto ds = tiny_data(8, 10);
    auto sp = split_of(ds, 4, 4);
    train::TrainConfig cfg;
    cfg.mode = train::TrainMode::MT_ITERATION;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.seed = 7;

    TempRun straight("detseg_trainer_straight");
    {
      model::Model m(tiny_cfg(), 7);
      train::train_multitask(m, ds, sp, cfg, nullptr, straight.dir.string());
    }

    TempRun resumed("detseg_trainer_resumed");
    {
      train::TrainConfig first = cfg;
      first.stop_after_epochs = 1;
      model::Model m(tiny_cfg(), 7);
      auto res = train::train_multitask(m, ds, sp, first, nullptr, resumed.dir.string());
      CHECK(res.history.size() == 1);
    }
    {
      // The checkpoint supplies the parameters, so the construction seed is
      // irrelevant on the second leg.
      train::TrainConfig second = cfg;
      second.resume = true;
      model::Model m(tiny_cfg(), 123);
      auto res = train::train_multitask(m, ds, sp, second, nullptr, resumed.dir.string());
      CHECK(res.history.size() == 2);
      CHECK(res.history.front().epoch == 1);
    }

    CHECK(file_bytes((straight.dir / "checkpoints" / "last.ckpt").string()) ==
          file_bytes((resumed.dir / "checkpoints" / "last.ckpt").string()));
    CHECK(file_bytes((straight.dir / "metrics.jsonl").string()) ==
          file_bytes((resumed.dir / "metrics.jsonl").string()));
  }

  TEST_CASE("resume without a run directory is rejected") {
    auto ds = tiny_data(2, 11);
    train::TrainConfig cfg;
    cfg.epochs = 1;
    cfg.resume = true;
    model::Model m(tiny_cfg(), 5);
    CHECK_THROWS_WITH_AS(train::train_single(m, ds, ids_of(ds, 0, 2), data::TaskTag::DET, cfg),
                         doctest::Contains("run directory"), std::runtime_error);
  }

  TEST_CASE("training ids must exist and carry the annotation the task needs") {
    auto ds = tiny_data(2, 12);
    train::TrainConfig cfg;
    cfg.epochs = 1;
    {
      model::Model m(tiny_cfg(), 5);
      CHECK_THROWS_WITH_AS(train::train_single(m, ds, {"nope"}, data::TaskTag::DET, cfg),
                           doctest::Contains("'nope' is not in the dataset"), std::runtime_error);
    }
    {
      data::Dataset unmasked = ds;
      unmasked.samples[0].has_mask = false;
      model::Model m(tiny_cfg(), 5);
      CHECK_THROWS_WITH_AS(
          train::train_single(m, unmasked, {unmasked.samples[0].id}, data::TaskTag::SEG, cfg),
          doctest::Contains("has no mask annotation"), std::runtime_error);
    }
  }

  TEST_CASE("modes check that the heads they train exist") {
    auto ds = tiny_data(2, 13);
    train::TrainConfig cfg;
    cfg.epochs = 1;
    model::ModelConfig det_only = tiny_cfg();
    det_only.with_seg = false;
    model::Model m(det_only, 5);
    CHECK_THROWS_WITH_AS(train::train_single(m, ds, ids_of(ds, 0, 2), data::TaskTag::SEG, cfg),
                         doctest::Contains("segmentation head"), std::runtime_error);
    cfg.mode = train::TrainMode::MT_ITERATION;
    train::Trainer t(m, cfg);
    CHECK_THROWS_WITH_AS(t.run(ds, split_of(ds, 1, 1), nullptr, ""),
                         doctest::Contains("segmentation head"), std::runtime_error);
  }

  TEST_CASE("head finetuning freezes the encoder where full finetuning moves it") {
    auto ds = tiny_data(6, 14);
    TempRun donor_dir("detseg_trainer_donor");
    const std::string donor_ckpt = (donor_dir.dir / "seg.ckpt").string();
    {
      model::Model donor(tiny_cfg(), 21);
      train::TrainConfig cfg;
      cfg.epochs = 1;
      cfg.batch_size = 2;
      train::train_single(donor, ds, ids_of(ds, 0, 3), data::TaskTag::SEG, cfg);
      model::save_checkpoint(donor, donor_ckpt);
    }

    train::TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 3;
    cfg.init_checkpoint = donor_ckpt;
    cfg.finetune_task = data::TaskTag::DET;

    {
      cfg.mode = train::TrainMode::FINETUNE_HEAD;
      model::Model m(tiny_cfg(), 22);
      train::finetune(m, ds, ids_of(ds, 3, 3), cfg);
      model::Model donor_back(tiny_cfg(), 23);
      model::load_checkpoint(donor_back, donor_ckpt);
      CHECK(m.params().content_hash("backbone/") ==
            donor_back.params().content_hash("backbone/"));
      CHECK(m.params().content_hash("neck/") == donor_back.params().content_hash("neck/"));
    }
    {
      cfg.mode = train::TrainMode::FINETUNE_FULL;
      model::Model m(tiny_cfg(), 22);
      train::finetune(m, ds, ids_of(ds, 3, 3), cfg);
      model::Model donor_back(tiny_cfg(), 23);
      model::load_checkpoint(donor_back, donor_ckpt);
      CHECK(m.params().content_hash("backbone/") !=
            donor_back.params().content_hash("backbone/"));
    }

    cfg.mode = train::TrainMode::SINGLE_DET;
    model::Model m(tiny_cfg(), 22);
    CHECK_THROWS_WITH_AS(train::finetune(m, ds, ids_of(ds, 3, 3), cfg),
                         doctest::Contains("finetune expects"), std::invalid_argument);
    cfg.mode = train::TrainMode::FINETUNE_HEAD;
    cfg.init_checkpoint = "";
    CHECK_THROWS_WITH_AS(train::finetune(m, ds, ids_of(ds, 3, 3), cfg),
                         doctest::Contains("init_checkpoint"), std::invalid_argument);
  }

  TEST_CASE("evaluating a checkpoint matches evaluating the live model") {
    TempRun run("detseg_trainer_evalckpt");
    auto ds = tiny_data(4, 15);
    auto val = tiny_data(3, 16);
    model::Model m(tiny_cfg(), 31);
    train::TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 2;
    train::train_multitask(m, ds, split_of(ds, 2, 2), cfg);
    const std::string ckpt = (run.dir / "m.ckpt").string();
    model::save_checkpoint(m, ckpt);

    auto live = train::evaluate_model(m, val);
    auto loaded = train::evaluate_checkpoint(ckpt, val);
    CHECK(loaded.map == doctest::Approx(live.map));
    CHECK(loaded.ap50 == doctest::Approx(live.ap50));
    CHECK(loaded.miou == doctest::Approx(live.miou));

    auto art = train::evaluate_model_full(m, val);
    CHECK(art.has_det);
    CHECK(art.has_iou);
    CHECK(art.summary.map == doctest::Approx(live.map));
    CHECK(art.gts.size() >= val.samples.size());  // at least one box per sample
    CHECK(art.ap.thresholds.size() == 10);
  }
}
