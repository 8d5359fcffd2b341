#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "detseg/anchors.hpp"
#include "detseg/dataio.hpp"
#include "detseg/evalmetrics.hpp"
#include "detseg/model.hpp"

namespace detseg::train {

// SINGLE_* train one head on one subset. MT_EPOCH alternates whole epochs
// between tasks; MT_ITERATION alternates mini-batches and folds one DET and
// one SEG batch into a single optimizer step with encoder gradients summed.
// MT_FULL assumes fully annotated samples and sums both losses per batch.
// FINETUNE_* start from a cross-task checkpoint's encoder with a fresh head.
enum class TrainMode {
  SINGLE_DET,
  SINGLE_SEG,
  MT_EPOCH,
  MT_ITERATION,
  MT_FULL,
  FINETUNE_HEAD,
  FINETUNE_FULL,
};

TrainMode train_mode_from_string(const std::string& s);
const char* to_string(TrainMode m);

struct TrainConfig {
  TrainMode mode = TrainMode::MT_ITERATION;
  int epochs = 30;
  int batch_size = 8;
  float lr = 5e-3f;  // zero is allowed and leaves parameters untouched
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  float clip_norm = 10.0f;  // global-norm clip, <= 0 disables
  bool cosine = true;       // per-epoch cosine decay of lr
  bool hflip = true;        // horizontal-flip augmentation
  uint64_t seed = 0;

  float det_cls_weight = 1.0f;
  float det_loc_weight = 1.0f;
  float seg_weight = 1.0f;

  int eval_every = 1;                 // validation cadence in epochs; 0 = final only
  bool save_epoch_checkpoints = false;  // keep epoch_NNN.ckpt next to last/best
  bool resume = false;                // continue from run_dir/checkpoints/last.*

  std::string init_checkpoint;  // finetune source (trained on the other task)
  data::TaskTag finetune_task = data::TaskTag::DET;  // task trained when finetuning

  // Ends the loop once this many epochs are complete, as if the process had
  // been killed at the checkpoint boundary. Not part of the config file
  // surface; tests use it to exercise resume.
  int stop_after_epochs = 0;
};

struct EvalResult {
  double map = -1.0;   // mean AP over IoU 0.50:0.05:0.95, 0-100
  double ap50 = -1.0;  // 0-100
  double miou = -1.0;  // 0-100
};

struct EpochStats {
  int epoch = 0;
  double det_loss = -1.0;  // mean optimized value per batch; -1 when absent
  double seg_loss = -1.0;
  double kd_loss = -1.0;
  double lr = 0.0;
  EvalResult eval;  // -1 fields when this epoch was not evaluated
};

struct TrainResult {
  std::vector<EpochStats> history;
  EvalResult final_eval;
  std::string last_checkpoint;  // set when run_dir was given
  std::string best_checkpoint;
};

// Extension point used by the distillation module. Called once per task
// mini-batch (every mode except MT_FULL) while the batch graph is alive; the
// returned scalar is added to that batch's loss. Return a
// default-constructed Var to contribute nothing.
class KdHook {
 public:
  virtual ~KdHook() = default;
  virtual Var kd_term(const std::vector<Var>& student_levels, const Tensor& images,
                      data::TaskTag tag) = 0;
};

// Runs the configured loop over a dataset + split. The model is updated in
// place. run_dir may be empty (nothing written); otherwise it receives
// metrics.jsonl and checkpoints/{last,best}.ckpt plus last.train holding the
// optimizer state for bit-exact resume. Evaluation always runs on the
// checkpointed parameter values via a read-only pass.
class Trainer {
 public:
  Trainer(model::Model& m, const TrainConfig& cfg);

  void set_kd_hook(KdHook* hook) { kd_ = hook; }

  TrainResult run(const data::Dataset& data, const data::PartialSplit& split,
                  const data::Dataset* val, const std::string& run_dir);

 private:
  struct Raw;
  struct DetBatch;
  struct SegBatch;

  Raw gather(const data::Dataset& data, const std::vector<std::string>& ids, Rng& aug,
             bool need_mask) const;
  DetBatch make_det_batch(const Raw& raw);
  SegBatch make_seg_batch(const Raw& raw) const;

  Var det_loss(const std::vector<Var>& levels, const DetBatch& b, double* value);
  Var seg_loss(const std::vector<Var>& levels, const SegBatch& b, double* value);
  Var kd_wrap(const std::vector<Var>& levels, const Tensor& images, data::TaskTag tag,
              double* acc, int* count);

  void step(float lr);
  void save_state(const std::string& dir, int next_epoch, double best_metric) const;
  int load_state(const std::string& dir, double* best_metric);

  const std::vector<det::Anchor>& anchors_for(int hp, int wp);

  model::Model& m_;
  TrainConfig cfg_;
  KdHook* kd_ = nullptr;
  std::map<std::string, Tensor> velocity_;
  std::map<std::pair<int, int>, std::vector<det::Anchor>> anchor_cache_;
};

// Convenience wrappers matching the workflows the CLI exposes.
TrainResult train_single(model::Model& m, const data::Dataset& data,
                         const std::vector<std::string>& subset, data::TaskTag task,
                         TrainConfig cfg, const data::Dataset* val = nullptr,
                         const std::string& run_dir = "");

// Loads the encoder from cfg.init_checkpoint, freezes it for FINETUNE_HEAD,
// and trains cfg.finetune_task's fresh head on the subset.
TrainResult finetune(model::Model& m, const data::Dataset& data,
                     const std::vector<std::string>& subset, TrainConfig cfg,
                     const data::Dataset* val = nullptr, const std::string& run_dir = "");

TrainResult train_multitask(model::Model& m, const data::Dataset& data,
                            const data::PartialSplit& split, TrainConfig cfg,
                            const data::Dataset* val = nullptr, const std::string& run_dir = "",
                            KdHook* kd = nullptr);

// Forward passes every val sample (batch of one) and scores detections and
// masks against the sample's own annotations. Heads that the model lacks
// report -1.
EvalResult evaluate_model(model::Model& m, const data::Dataset& val);
EvalResult evaluate_checkpoint(const std::string& checkpoint, const data::Dataset& val);

// Same pass, keeping the per-detection records and metric breakdowns that
// eval.json and the error-analysis tooling consume.
struct EvalArtifacts {
  std::vector<eval::PredRecord> preds;
  std::vector<eval::GtRecord> gts;
  eval::APResult ap;
  eval::IoUResult iou;
  bool has_det = false;
  bool has_iou = false;
  EvalResult summary;
};
EvalArtifacts evaluate_model_full(model::Model& m, const data::Dataset& val);

}  // namespace detseg::train
