#include "detseg/distill.hpp"

#include <cstring>
#include <stdexcept>

#include "detseg/loss_ops.hpp"
#include "detseg/ops.hpp"
#include "detseg/rng.hpp"

namespace detseg::distill {

using data::TaskTag;

KdMode kd_mode_from_string(const std::string& s) {
  if (s == "1mse") return KdMode::MSE1;
  if (s == "0mse") return KdMode::MSE0;
  if (s == "2mse") return KdMode::MSE2;
  if (s == "stl_kd") return KdMode::STL_KD;
  throw std::invalid_argument("unknown distillation mode '" + s + "'");
}

const char* to_string(KdMode m) {
  switch (m) {
    case KdMode::MSE1: return "1mse";
    case KdMode::MSE0: return "0mse";
    case KdMode::MSE2: return "2mse";
    case KdMode::STL_KD: return "stl_kd";
  }
  throw std::logic_error("bad KdMode");
}

TaskTag other_task(TaskTag t) { return t == TaskTag::DET ? TaskTag::SEG : TaskTag::DET; }

std::vector<TaskTag> route_kd(TaskTag tag, KdMode mode) {
  switch (mode) {
    case KdMode::MSE1:
    case KdMode::STL_KD: return {tag};
    case KdMode::MSE0: return {other_task(tag)};
    case KdMode::MSE2: return {TaskTag::DET, TaskTag::SEG};
  }
  throw std::logic_error("bad KdMode");
}

FlatFeatures flatten_levels(const std::vector<Var>& levels) {
  FlatFeatures f;
  f.mat = ops::flatten_concat(levels);
  int off = 0;
  f.level_offsets.push_back(0);
  for (const Var& l : levels) {
    off += l.val().shape[2] * l.val().shape[3];
    f.level_offsets.push_back(off);
  }
  return f;
}

std::vector<Tensor> unflatten_levels(const Tensor& flat,
                                     const std::vector<std::pair<int, int>>& level_hw) {
  if (flat.shape.size() != 3) throw std::invalid_argument("unflatten_levels: want [N,C,M]");
  const int n = flat.shape[0], c = flat.shape[1], m = flat.shape[2];
  int total = 0;
  for (auto& [h, w] : level_hw) total += h * w;
  if (total != m)
    throw std::invalid_argument("unflatten_levels: level shapes cover " + std::to_string(total) +
                                " columns, tensor has " + std::to_string(m));
  std::vector<Tensor> out;
  int off = 0;
  for (auto& [h, w] : level_hw) {
    Tensor t({n, c, h, w});
    for (int in = 0; in < n; ++in)
      for (int ic = 0; ic < c; ++ic)
        std::memcpy(t.data.data() + (static_cast<int64_t>(in) * c + ic) * h * w,
                    flat.data.data() + (static_cast<int64_t>(in) * c + ic) * m + off,
                    static_cast<size_t>(h) * w * sizeof(float));
    out.push_back(std::move(t));
    off += h * w;
  }
  return out;
}

namespace {

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::string proj_prefix(TaskTag teacher_task) {
  return std::string("kd_proj/") + data::task_name(teacher_task);
}

}  // namespace

void register_projection(model::Model& student, TaskTag teacher_task, int student_c,
                         int teacher_c) {
  const std::string wname = proj_prefix(teacher_task) + "/w";
  const std::string bname = proj_prefix(teacher_task) + "/b";
  if (student.params().has(wname)) return;

  Tensor w({teacher_c, student_c});
  if (teacher_c == student_c) {
    for (int i = 0; i < teacher_c; ++i) w.data[static_cast<int64_t>(i) * student_c + i] = 1.f;
  } else {
    Rng rng(mix_seed(0x6b64, fnv1a(wname)));
    kaiming_normal_(w, student_c, rng);
  }
  student.params().create(wname, w.shape, w.data);
  student.params().create(bname, {teacher_c});
}

FeatureImitation::FeatureImitation(model::Model& student, const DistillConfig& cfg)
    : student_(student), cfg_(cfg) {}

void FeatureImitation::set_teachers(model::Model* det_teacher, model::Model* seg_teacher) {
  det_t_ = det_teacher;
  seg_t_ = seg_teacher;
  const int sc = student_.config().enc.det_channels;
  if (det_t_) register_projection(student_, TaskTag::DET, sc, det_t_->config().enc.det_channels);
  if (seg_t_) register_projection(student_, TaskTag::SEG, sc, seg_t_->config().enc.det_channels);
}

Var FeatureImitation::kd_term(const std::vector<Var>& student_levels, const Tensor& images,
                              TaskTag tag) {
  const int bi = batch_counter_++;
  if (cfg_.kd_weight == 0) return {};  // keeps the trace identical to the plain loop

  std::vector<Var> terms;
  for (TaskTag tt : route_kd(tag, cfg_.mode)) {
    model::Model* teacher = tt == TaskTag::DET ? det_t_ : seg_t_;
    if (!teacher)
      throw std::runtime_error(std::string("routing needs the ") + data::task_name(tt) +
                               " teacher but none is loaded");
    calls_.push_back({bi, tag, tt});

    Tensor tfeat;
    {
      NoGradGuard ng;
      Var x(images);
      tfeat = flatten_levels(teacher->encode(x)).mat.val();
    }

    FlatFeatures sf = flatten_levels(student_levels);
    Var proj = ops::project_columns(sf.mat, student_.params().get(proj_prefix(tt) + "/w"),
                                    student_.params().get(proj_prefix(tt) + "/b"));
    if (proj.val().shape != tfeat.shape)
      throw std::runtime_error("teacher and student feature grids disagree");
    terms.push_back(ops::mse_loss(proj, Var(std::move(tfeat))));
  }
  if (terms.empty()) return {};
  return ops::scale(terms.size() == 1 ? terms[0] : ops::add_scalars(terms), cfg_.kd_weight);
}

train::TrainResult train_student(model::Model& student, const data::Dataset& data,
                                 const data::PartialSplit& split, train::TrainConfig tcfg,
                                 const DistillConfig& dcfg, const data::Dataset* val,
                                 const std::string& run_dir,
                                 std::vector<TeacherCall>* call_log) {
  const auto load_teacher = [&](const std::string& path) {
    auto t = std::make_unique<model::Model>(model::read_checkpoint_config(path), 0);
    model::load_checkpoint(*t, path);
    t->freeze({"backbone", "neck", "det_head", "seg_head"});
    if (t->config().enc.strides != student.config().enc.strides)
      throw std::runtime_error("teacher and student stride lists differ (" + path + ")");
    return t;
  };

  std::unique_ptr<model::Model> det_t, seg_t;
  if (!dcfg.det_teacher.empty()) det_t = load_teacher(dcfg.det_teacher);
  if (!dcfg.seg_teacher.empty()) seg_t = load_teacher(dcfg.seg_teacher);

  // Eager checks so a missing teacher fails before hours of training, not on
  // the first routed batch.
  const bool single = tcfg.mode == train::TrainMode::SINGLE_DET ||
                      tcfg.mode == train::TrainMode::SINGLE_SEG;
  const TaskTag single_tag =
      tcfg.mode == train::TrainMode::SINGLE_DET ? TaskTag::DET : TaskTag::SEG;
  const auto require = [&](TaskTag tt) {
    if (!(tt == TaskTag::DET ? det_t : seg_t))
      throw std::runtime_error(std::string("distillation mode ") + to_string(dcfg.mode) +
                               " needs the " + data::task_name(tt) + " teacher");
  };
  if (dcfg.mode == KdMode::MSE2) {
    require(TaskTag::DET);
    require(TaskTag::SEG);
  } else if (single) {
    for (TaskTag tt : route_kd(single_tag, dcfg.mode)) require(tt);
  } else {
    for (TaskTag batch_tag : {TaskTag::DET, TaskTag::SEG})
      for (TaskTag tt : route_kd(batch_tag, dcfg.mode)) require(tt);
  }

  FeatureImitation hook(student, dcfg);
  hook.set_teachers(det_t.get(), seg_t.get());
  train::TrainResult res = train::train_multitask(student, data, split, tcfg, val, run_dir, &hook);
  if (call_log) *call_log = hook.calls();
  return res;
}

}  // namespace detseg::distill
