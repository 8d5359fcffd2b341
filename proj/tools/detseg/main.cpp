// detseg: command line front end for the detection + segmentation lab.
//
//   synth    generate a synthetic shape dataset
//   split    partition ids into detection / segmentation subsets
//   train    run one training configuration end to end
//   distill  train a student against frozen teachers
//   eval     score a checkpoint on a dataset
//   tide     decompose detection errors from a prediction dump
//   cam      render a Grad-CAM figure for one image
//   report   aggregate run directories into a results table

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "detseg/config.hpp"
#include "detseg/dataio.hpp"
#include "detseg/distill.hpp"
#include "detseg/evalmetrics.hpp"
#include "detseg/introspect.hpp"
#include "detseg/model.hpp"
#include "detseg/pngio.hpp"
#include "detseg/report.hpp"
#include "detseg/synthetic.hpp"
#include "detseg/tide.hpp"
#include "detseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace detseg;

namespace {

std::string fmt(double v) {
  if (v < 0) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

model::Model load_model(const std::string& ckpt) {
  model::Model m(model::read_checkpoint_config(ckpt), 0);
  // Prefix loading tolerates extra tensors in the file, so distilled
  // checkpoints (which carry their projection weights) open the same way
  // as plain ones.
  model::load_checkpoint_prefixes(m, ckpt, {""});
  return m;
}

std::vector<eval::GtRecord> gt_records(const data::Dataset& ds) {
  std::vector<eval::GtRecord> gts;
  for (const auto& s : ds.samples)
    for (const auto& b : s.boxes) gts.push_back({s.id, b.x1, b.y1, b.x2, b.y2, b.cls});
  return gts;
}

// Shared by `train` and `distill`: loads the data, resolves the split,
// snapshots the config, runs the requested mode, and scores the result.
void run_training(config::RunConfig rc) {
  if (rc.run_dir.empty())
    throw std::runtime_error("no run directory: pass --out or set run_dir in the config");
  if (rc.data_root.empty())
    throw std::runtime_error("no dataset: pass --data or set data_root in the config");

  data::Dataset ds = data::load_dataset(rc.data_root);
  data::Dataset valset;
  const bool has_val = !rc.val_root.empty();
  if (has_val) valset = data::load_dataset(rc.val_root);

  data::PartialSplit sp;
  if (!rc.split_path.empty())
    sp = data::load_split(rc.split_path);
  else
    sp = data::split_partial(ds, rc.split_seed, rc.split);
  if (rc.halve == "det") sp = data::halve_subset(sp, data::TaskTag::DET, rc.split_seed);
  if (rc.halve == "seg") sp = data::halve_subset(sp, data::TaskTag::SEG, rc.split_seed);

  fs::create_directories(rc.run_dir);
  config::save_resolved(rc, (fs::path(rc.run_dir) / "config.resolved").string());

  model::Model m(rc.model, rc.train.seed);
  const data::Dataset* val = has_val ? &valset : nullptr;

  train::TrainResult res;
  if (rc.has_distill) {
    res = distill::train_student(m, ds, sp, rc.train, rc.kd, val, rc.run_dir);
  } else {
    switch (rc.train.mode) {
      case train::TrainMode::SINGLE_DET:
        res = train::train_single(m, ds, sp.det_ids, data::TaskTag::DET, rc.train, val,
                                  rc.run_dir);
        break;
      case train::TrainMode::SINGLE_SEG:
        res = train::train_single(m, ds, sp.seg_ids, data::TaskTag::SEG, rc.train, val,
                                  rc.run_dir);
        break;
      case train::TrainMode::FINETUNE_HEAD:
      case train::TrainMode::FINETUNE_FULL: {
        const auto& subset =
            rc.train.finetune_task == data::TaskTag::DET ? sp.det_ids : sp.seg_ids;
        res = train::finetune(m, ds, subset, rc.train, val, rc.run_dir);
        break;
      }
      default:
        res = train::train_multitask(m, ds, sp, rc.train, val, rc.run_dir);
        break;
    }
  }

  if (has_val) {
    train::EvalArtifacts art = train::evaluate_model_full(m, valset);
    eval::save_eval_json(art.ap, art.has_iou ? &art.iou : nullptr,
                         (fs::path(rc.run_dir) / "eval.json").string());
  }
  std::cout << "final  mAP " << fmt(res.final_eval.map) << "  AP50 " << fmt(res.final_eval.ap50)
            << "  mIoU " << fmt(res.final_eval.miou) << "\n"
            << "run directory: " << rc.run_dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"detection + segmentation laboratory"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Generate a synthetic shape dataset");
  struct {
    int n = 100;
    uint64_t seed = 1;
    std::string spec, out;
  } sy;
  synth->add_option("--n", sy.n, "number of samples");
  synth->add_option("--seed", sy.seed, "generator seed");
  synth->add_option("--spec", sy.spec, "spec json (canvas size, shape counts, size range)");
  synth->add_option("--out", sy.out, "output dataset directory")->required();
  synth->callback([&] {
    data::SyntheticSpec spec;
    if (!sy.spec.empty()) spec = config::load_synthetic_spec(sy.spec);
    data::Dataset ds = data::generate_synthetic(sy.n, spec, sy.seed);
    data::save_dataset(ds, sy.out);
    std::cout << "wrote " << ds.samples.size() << " samples (" << spec.width << "x"
              << spec.height << ") under " << sy.out << "\n";
  });

  auto* split = app.add_subcommand("split", "Partition ids into det / seg subsets");
  struct {
    std::string data, out, halve;
    uint64_t seed = 0;
    double det_fraction = 0.5;
    int seg_count = -1;
  } sv;
  split->add_option("--data", sv.data, "dataset directory or id-list file")->required();
  split->add_option("--out", sv.out, "split json path")->required();
  split->add_option("--seed", sv.seed, "shuffle seed");
  split->add_option("--det-fraction", sv.det_fraction, "fraction assigned to detection");
  split->add_option("--seg-count", sv.seg_count, "exact seg subset size (overrides fraction)");
  split->add_option("--halve", sv.halve, "drop half of one side: det or seg");
  split->callback([&] {
    data::SplitOptions opt;
    opt.det_fraction = sv.det_fraction;
    opt.seg_count = sv.seg_count;
    data::PartialSplit ps = fs::is_directory(sv.data)
                                ? data::split_partial(data::load_dataset(sv.data), sv.seed, opt)
                                : data::split_partial(data::load_id_list(sv.data), sv.seed, opt);
    if (sv.halve == "det")
      ps = data::halve_subset(ps, data::TaskTag::DET, sv.seed);
    else if (sv.halve == "seg")
      ps = data::halve_subset(ps, data::TaskTag::SEG, sv.seed);
    else if (!sv.halve.empty())
      throw std::runtime_error("--halve takes det or seg");
    data::save_split(ps, sv.out);
    std::cout << "det " << ps.det_ids.size() << " / seg " << ps.seg_ids.size() << " -> "
              << sv.out << "\n";
  });

  struct TrainArgs {
    std::string config, out, data, val;
    uint64_t seed = 0;
    int epochs = 0;
  };

  auto add_train_options = [](CLI::App* cmd, TrainArgs& a) {
    cmd->add_option("--config", a.config, "run config json")->required();
    cmd->add_option("--out", a.out, "run directory (overrides config)");
    cmd->add_option("--data", a.data, "training data root (overrides config)");
    cmd->add_option("--val", a.val, "validation data root (overrides config)");
    cmd->add_option("--seed", a.seed, "training seed (overrides config)");
    cmd->add_option("--epochs", a.epochs, "epoch count (overrides config)");
  };
  auto apply_train_args = [](CLI::App* cmd, const TrainArgs& a) {
    config::RunConfig rc = config::load_run_config(a.config);
    if (!a.out.empty()) rc.run_dir = a.out;
    if (!a.data.empty()) rc.data_root = a.data;
    if (!a.val.empty()) rc.val_root = a.val;
    if (cmd->count("--seed")) rc.train.seed = a.seed;
    if (cmd->count("--epochs")) rc.train.epochs = a.epochs;
    return rc;
  };

  auto* trn = app.add_subcommand("train", "Run one training configuration");
  TrainArgs ta;
  add_train_options(trn, ta);
  trn->callback([&] { run_training(apply_train_args(trn, ta)); });

  auto* dst = app.add_subcommand("distill", "Train a student against frozen teachers");
  TrainArgs da;
  struct {
    std::string mode, det_teacher, seg_teacher;
    double kd_weight = 1.0;
  } dx;
  add_train_options(dst, da);
  dst->add_option("--mode", dx.mode, "kd routing: 0mse, 1mse, 2mse, or stl_kd");
  dst->add_option("--teacher-det", dx.det_teacher, "detection teacher checkpoint");
  dst->add_option("--teacher-seg", dx.seg_teacher, "segmentation teacher checkpoint");
  dst->add_option("--kd-weight", dx.kd_weight, "imitation loss weight");
  dst->callback([&] {
    config::RunConfig rc = apply_train_args(dst, da);
    rc.has_distill = true;
    if (!dx.mode.empty()) rc.kd.mode = distill::kd_mode_from_string(dx.mode);
    if (!dx.det_teacher.empty()) rc.kd.det_teacher = dx.det_teacher;
    if (!dx.seg_teacher.empty()) rc.kd.seg_teacher = dx.seg_teacher;
    if (dst->count("--kd-weight")) rc.kd.kd_weight = dx.kd_weight;
    run_training(std::move(rc));
  });

  auto* ev = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  struct {
    std::string ckpt, data, out, pred;
  } ea;
  ev->add_option("--ckpt", ea.ckpt, "model checkpoint")->required();
  ev->add_option("--data", ea.data, "dataset directory")->required();
  ev->add_option("--out", ea.out, "write metric breakdown json here");
  ev->add_option("--pred", ea.pred, "dump raw detections json here");
  ev->callback([&] {
    model::Model m = load_model(ea.ckpt);
    data::Dataset ds = data::load_dataset(ea.data);
    train::EvalArtifacts art = train::evaluate_model_full(m, ds);
    std::cout << "mAP " << fmt(art.summary.map) << "  AP50 " << fmt(art.summary.ap50)
              << "  mIoU " << fmt(art.summary.miou) << "\n";
    if (!ea.out.empty())
      eval::save_eval_json(art.ap, art.has_iou ? &art.iou : nullptr, ea.out);
    if (!ea.pred.empty()) eval::save_predictions(art.preds, ea.pred);
  });

  auto* td = app.add_subcommand("tide", "Decompose detection errors");
  struct {
    std::string pred, data, out, compare;
  } tt;
  td->add_option("--pred", tt.pred, "predictions json (from eval --pred)")->required();
  td->add_option("--data", tt.data, "dataset directory with the ground truth")->required();
  td->add_option("--out", tt.out, "write the report json here");
  td->add_option("--compare", tt.compare, "baseline report json to diff against");
  td->callback([&] {
    std::vector<eval::PredRecord> dets = eval::load_predictions(tt.pred);
    data::Dataset ds = data::load_dataset(tt.data);
    tide::TideReport r = tide::tide_deltas(dets, gt_records(ds), {});
    if (!tt.out.empty()) tide::save_tide_json(r, tt.out);
    if (!tt.compare.empty()) {
      tide::TideReport base = tide::load_tide_json(tt.compare);
      std::cout << tide::format_tide_table(r, &base);
    } else {
      std::cout << tide::format_tide_table(r);
    }
  });

  auto* cm = app.add_subcommand("cam", "Render a Grad-CAM figure");
  struct {
    std::string ckpt, image, target = "det:top", out;
    std::vector<int> levels;
  } ca;
  cm->add_option("--ckpt", ca.ckpt, "model checkpoint")->required();
  cm->add_option("--image", ca.image, "input png")->required();
  cm->add_option("--target", ca.target, "det:top, det:<anchor>:<cls>, or seg:<cls>");
  cm->add_option("--levels", ca.levels, "pyramid level indices (default: finest)");
  cm->add_option("--out", ca.out, "output png (input | overlay)")->required();
  cm->callback([&] {
    model::Model m = load_model(ca.ckpt);
    img::ImageU8 image = img::read_png(ca.image);
    introspect::CamResult res =
        introspect::grad_cam(m, image, introspect::cam_target_from_string(ca.target), ca.levels);
    introspect::save_cam_figure(image, res.heatmap, ca.out);
    if (res.det_cls > 0)
      std::cout << "explains class " << res.det_cls << " (score " << fmt(res.det_score) << ")\n";
    std::cout << "wrote " << ca.out << "\n";
  });

  auto* rp = app.add_subcommand("report", "Aggregate run directories into tables");
  struct {
    std::string runs, out;
  } ra;
  rp->add_option("--runs", ra.runs, "directory holding run subdirectories")->required();
  rp->add_option("--out", ra.out, "also write the table here");
  rp->callback([&] {
    std::string text = report::format_report(report::collect_runs(ra.runs));
    std::cout << text;
    if (!ra.out.empty()) {
      std::ofstream f(ra.out);
      if (!f) throw std::runtime_error("cannot write report: " + ra.out);
      f << text;
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
