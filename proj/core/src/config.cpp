#include "detseg/config.hpp"

#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace detseg::config {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

void merge_into(json& base, const json& child) {
  for (const auto& [k, v] : child.items()) {
    if (base.contains(k) && base[k].is_object() && v.is_object())
      merge_into(base[k], v);
    else
      base[k] = v;
  }
}

json resolve_file(const std::string& path, int depth) {
  if (depth > 16) throw std::runtime_error("extends chain too deep at " + path);
  json j = load_file(path);
  if (!j.is_object()) throw std::runtime_error(path + ": config root must be an object");
  if (j.contains("extends")) {
    const std::string rel = j.at("extends").get<std::string>();
    j.erase("extends");
    json base = resolve_file((fs::path(path).parent_path() / rel).string(), depth + 1);
    merge_into(base, j);
    return base;
  }
  return j;
}

// Tracks which keys of one JSON object were consumed; leftovers are reported
// with their full dotted path.
class Section {
 public:
  Section(const json& j, std::string prefix, std::vector<std::string>* unknown)
      : j_(j), prefix_(std::move(prefix)), unknown_(unknown) {}

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  template <typename T>
  void get(const std::string& key, T& into) {
    if (const json* v = find(key)) {
      try {
        into = v->get<T>();
      } catch (const json::exception&) {
        throw std::runtime_error("config key " + prefix_ + key + " has the wrong type");
      }
    }
  }

  void finish() {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) unknown_->push_back(prefix_ + k);
  }

  const std::string& prefix() const { return prefix_; }

 private:
  const json& j_;
  std::string prefix_;
  std::vector<std::string>* unknown_;
  std::set<std::string> seen_;
};

model::EncoderConfig preset_by_name(const std::string& name) {
  if (name == "small") return model::encoder_small();
  if (name == "large") return model::encoder_large();
  if (name == "rn18") return model::encoder_rn18();
  if (name == "rn50") return model::encoder_rn50();
  throw std::runtime_error("unknown encoder preset '" + name + "'");
}

model::NeckKind neck_by_name(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (s == "fpn") return model::NeckKind::FPN;
  if (s == "pafpn") return model::NeckKind::PAFPN;
  throw std::runtime_error("unknown neck '" + s + "'");
}

data::TaskTag task_by_name(const std::string& s) {
  if (s == "det") return data::TaskTag::DET;
  if (s == "seg") return data::TaskTag::SEG;
  throw std::runtime_error("unknown task '" + s + "' (want det or seg)");
}

void parse_model(const json& j, model::ModelConfig& cfg, std::vector<std::string>* unknown) {
  Section top(j, "model.", unknown);
  if (const json* p = top.find("preset")) cfg.enc = preset_by_name(p->get<std::string>());

  if (const json* e = top.find("encoder")) {
    Section s(*e, "model.encoder.", unknown);
    s.get("widths", cfg.enc.backbone.widths);
    s.get("depths", cfg.enc.backbone.depths);
    s.get("stem_width", cfg.enc.backbone.stem_width);
    s.get("bottleneck", cfg.enc.backbone.bottleneck);
    s.get("remove_first_maxpool", cfg.enc.backbone.remove_first_maxpool);
    if (const json* n = s.find("neck")) cfg.enc.neck = neck_by_name(n->get<std::string>());
    s.get("strides", cfg.enc.strides);
    s.get("det_channels", cfg.enc.det_channels);
    s.get("context_enhancement", cfg.enc.context_enhancement);
    s.finish();
  }
  if (const json* d = top.find("det")) {
    Section s(*d, "model.det.", unknown);
    s.get("enabled", cfg.with_det);
    s.get("conv_blocks", cfg.det.conv_blocks);
    s.get("num_classes", cfg.det.num_classes);
    s.get("anchor_scales", cfg.det.anchor_scales);
    s.get("anchor_ratios", cfg.det.anchor_ratios);
    s.get("focal_alpha", cfg.det.focal_alpha);
    s.get("focal_gamma", cfg.det.focal_gamma);
    s.get("bl1_alpha", cfg.det.bl1_alpha);
    s.get("bl1_gamma", cfg.det.bl1_gamma);
    s.get("pos_iou", cfg.det.pos_iou);
    s.get("neg_iou", cfg.det.neg_iou);
    s.get("nms_iou", cfg.det.nms_iou);
    s.get("score_thresh", cfg.det.score_thresh);
    s.get("max_detections", cfg.det.max_detections);
    s.get("prior_prob", cfg.det.prior_prob);
    s.finish();
  }
  if (const json* g = top.find("seg")) {
    Section s(*g, "model.seg.", unknown);
    s.get("enabled", cfg.with_seg);
    s.get("seg_channels", cfg.seg.seg_channels);
    s.get("num_classes", cfg.seg.num_classes);
    s.get("ignore_label", cfg.seg.ignore_label);
    s.finish();
  }
  top.finish();
}

void parse_train(const json& j, train::TrainConfig& cfg, std::vector<std::string>* unknown) {
  Section s(j, "train.", unknown);
  if (const json* m = s.find("mode")) cfg.mode = train::train_mode_from_string(m->get<std::string>());
  s.get("epochs", cfg.epochs);
  s.get("batch_size", cfg.batch_size);
  s.get("lr", cfg.lr);
  s.get("momentum", cfg.momentum);
  s.get("weight_decay", cfg.weight_decay);
  s.get("clip_norm", cfg.clip_norm);
  s.get("cosine", cfg.cosine);
  s.get("hflip", cfg.hflip);
  s.get("seed", cfg.seed);
  s.get("det_cls_weight", cfg.det_cls_weight);
  s.get("det_loc_weight", cfg.det_loc_weight);
  s.get("seg_weight", cfg.seg_weight);
  s.get("eval_every", cfg.eval_every);
  s.get("save_epoch_checkpoints", cfg.save_epoch_checkpoints);
  s.get("resume", cfg.resume);
  s.get("init_checkpoint", cfg.init_checkpoint);
  if (const json* t = s.find("finetune_task"))
    cfg.finetune_task = task_by_name(t->get<std::string>());
  s.finish();
}

RunConfig parse_merged(const json& j) {
  std::vector<std::string> unknown;
  RunConfig cfg;

  Section top(j, "", &unknown);
  top.get("data_root", cfg.data_root);
  top.get("val_root", cfg.val_root);
  top.get("run_dir", cfg.run_dir);

  if (const json* sp = top.find("split")) {
    Section s(*sp, "split.", &unknown);
    s.get("path", cfg.split_path);
    s.get("seed", cfg.split_seed);
    s.get("det_fraction", cfg.split.det_fraction);
    s.get("seg_count", cfg.split.seg_count);
    if (const json* h = s.find("halve")) {
      cfg.halve = h->get<std::string>();
      if (!cfg.halve.empty() && cfg.halve != "det" && cfg.halve != "seg")
        throw std::runtime_error("split.halve must be det, seg, or empty");
    }
    s.finish();
  }
  if (const json* m = top.find("model")) parse_model(*m, cfg.model, &unknown);
  if (const json* t = top.find("train")) parse_train(*t, cfg.train, &unknown);
  if (const json* d = top.find("distill")) {
    cfg.has_distill = true;
    Section s(*d, "distill.", &unknown);
    if (const json* md = s.find("mode"))
      cfg.kd.mode = distill::kd_mode_from_string(md->get<std::string>());
    s.get("kd_weight", cfg.kd.kd_weight);
    s.get("det_teacher", cfg.kd.det_teacher);
    s.get("seg_teacher", cfg.kd.seg_teacher);
    s.finish();
  }
  top.finish();

  if (!unknown.empty()) {
    std::string msg = "unknown config keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw std::runtime_error(msg);
  }
  return cfg;
}

}  // namespace

RunConfig load_run_config(const std::string& path) { return parse_merged(resolve_file(path, 0)); }

RunConfig parse_run_config(const std::string& json_text) {
  return parse_merged(json::parse(json_text));
}

std::string to_json(const RunConfig& cfg) {
  json j;
  j["data_root"] = cfg.data_root;
  j["val_root"] = cfg.val_root;
  j["run_dir"] = cfg.run_dir;
  j["split"] = {{"path", cfg.split_path},
                {"seed", cfg.split_seed},
                {"det_fraction", cfg.split.det_fraction},
                {"seg_count", cfg.split.seg_count},
                {"halve", cfg.halve}};
  j["model"] = json::parse(model::to_json(cfg.model));
  j["train"] = {{"mode", train::to_string(cfg.train.mode)},
                {"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"lr", cfg.train.lr},
                {"momentum", cfg.train.momentum},
                {"weight_decay", cfg.train.weight_decay},
                {"clip_norm", cfg.train.clip_norm},
                {"cosine", cfg.train.cosine},
                {"hflip", cfg.train.hflip},
                {"seed", cfg.train.seed},
                {"det_cls_weight", cfg.train.det_cls_weight},
                {"det_loc_weight", cfg.train.det_loc_weight},
                {"seg_weight", cfg.train.seg_weight},
                {"eval_every", cfg.train.eval_every},
                {"save_epoch_checkpoints", cfg.train.save_epoch_checkpoints},
                {"resume", cfg.train.resume},
                {"init_checkpoint", cfg.train.init_checkpoint},
                {"finetune_task", data::task_name(cfg.train.finetune_task)}};
  if (cfg.has_distill)
    j["distill"] = {{"mode", distill::to_string(cfg.kd.mode)},
                    {"kd_weight", cfg.kd.kd_weight},
                    {"det_teacher", cfg.kd.det_teacher},
                    {"seg_teacher", cfg.kd.seg_teacher}};
  return j.dump(2);
}

void save_resolved(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_json(cfg) << "\n";
}

data::SyntheticSpec load_synthetic_spec(const std::string& path) {
  const json j = load_file(path);
  std::vector<std::string> unknown;
  data::SyntheticSpec spec;
  Section s(j, "", &unknown);
  s.get("width", spec.width);
  s.get("height", spec.height);
  s.get("min_shapes", spec.min_shapes);
  s.get("max_shapes", spec.max_shapes);
  s.get("min_size", spec.min_size);
  s.get("max_size", spec.max_size);
  s.finish();
  if (!unknown.empty()) {
    std::string msg = "unknown config keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw std::runtime_error(msg);
  }
  return spec;
}

}  // namespace detseg::config
