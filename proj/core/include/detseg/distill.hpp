#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "detseg/dataio.hpp"
#include "detseg/model.hpp"
#include "detseg/trainer.hpp"

namespace detseg::distill {

// Routing modes: imitate the teacher of the annotated task (MSE1), of the
// other task (MSE0), or both (MSE2). STL_KD distills into a single-task
// student from its own task's teacher.
enum class KdMode { MSE1, MSE0, MSE2, STL_KD };

KdMode kd_mode_from_string(const std::string& s);
const char* to_string(KdMode m);

struct DistillConfig {
  KdMode mode = KdMode::MSE2;
  float kd_weight = 1.0f;
  std::string det_teacher;  // checkpoint paths; empty = teacher absent
  std::string seg_teacher;
};

data::TaskTag other_task(data::TaskTag t);

// Teacher tasks imitated for a mini-batch annotated for `tag`, in DET-first
// order.
std::vector<data::TaskTag> route_kd(data::TaskTag tag, KdMode mode);

// Post-neck pyramid flattened to [N, C, M] with column blocks in level order
// (increasing stride). level_offsets has one entry per level plus the total.
struct FlatFeatures {
  Var mat;
  std::vector<int> level_offsets;
};

FlatFeatures flatten_levels(const std::vector<Var>& levels);

// Splits a flat [N, C, M] tensor back into [N, C, H, W] levels.
std::vector<Tensor> unflatten_levels(const Tensor& flat,
                                     const std::vector<std::pair<int, int>>& level_hw);

// Creates kd_proj/<task>/{w,b} in the student's store mapping student_c
// channels onto teacher_c. Square projections start as the exact identity
// with zero bias; rectangular ones get a kaiming weight. Safe to call twice.
void register_projection(model::Model& student, data::TaskTag teacher_task, int student_c,
                         int teacher_c);

// One teacher forward, recorded in call order; the routing contract is
// checked against this log.
struct TeacherCall {
  int batch_index = 0;
  data::TaskTag batch_task = data::TaskTag::DET;
  data::TaskTag teacher_task = data::TaskTag::DET;
};

// Trainer hook computing kd_weight * sum of MSE terms between the projected
// student pyramid and each routed teacher's. Teachers run without gradient
// recording, so nothing ever flows into them.
class FeatureImitation : public train::KdHook {
 public:
  FeatureImitation(model::Model& student, const DistillConfig& cfg);

  // Registers the needed projections; teachers are borrowed, not owned.
  void set_teachers(model::Model* det_teacher, model::Model* seg_teacher);

  Var kd_term(const std::vector<Var>& student_levels, const Tensor& images,
              data::TaskTag tag) override;

  const std::vector<TeacherCall>& calls() const { return calls_; }

 private:
  model::Model& student_;
  DistillConfig cfg_;
  model::Model* det_t_ = nullptr;
  model::Model* seg_t_ = nullptr;
  std::vector<TeacherCall> calls_;
  int batch_counter_ = 0;
};

// Loads the frozen teachers, wires the hook into the trainer, and runs the
// student loop (MT_ITERATION for the MSE modes, a SINGLE_* mode for STL_KD).
// call_log, when given, receives the teacher-call record.
train::TrainResult train_student(model::Model& student, const data::Dataset& data,
                                 const data::PartialSplit& split, train::TrainConfig tcfg,
                                 const DistillConfig& dcfg, const data::Dataset* val = nullptr,
                                 const std::string& run_dir = "",
                                 std::vector<TeacherCall>* call_log = nullptr);

}  // namespace detseg::distill
