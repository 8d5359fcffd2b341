#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "detseg/pngio.hpp"
#include "detseg/tensor.hpp"

namespace detseg::eval {

struct PredRecord {
  std::string image_id;
  float x1, y1, x2, y2;
  int cls = 0;
  float score = 0.f;
};

struct GtRecord {
  std::string image_id;
  float x1, y1, x2, y2;
  int cls = 0;
};

// Dump format: JSON array of {image_id, x1, y1, x2, y2, class, score} sorted
// by (image_id, -score).
void save_predictions(const std::vector<PredRecord>& dets, const std::string& path);
std::vector<PredRecord> load_predictions(const std::string& path);

// Greedy matching at one IoU threshold: detections visited by descending
// score (canonicalized so input order never matters), each taking the
// unmatched same-class same-image gt of highest IoU >= thr, ties to the
// lowest gt index. det_to_gt[i] indexes gts, -1 when unmatched.
struct MatchResult {
  std::vector<int> det_to_gt;
  std::vector<int> gt_to_det;
  std::vector<int> visit_order;  // det indices in canonical score order
};
MatchResult greedy_match(const std::vector<PredRecord>& dets, const std::vector<GtRecord>& gts,
                         double iou_thr);

// VOC-style average precision for one class on a 0-100 scale. All-points
// interpolation by default; eleven_point switches to the 2007 convention.
// Returns 0 when the class has no gt boxes.
double compute_ap(const std::vector<PredRecord>& dets, const std::vector<GtRecord>& gts, int cls,
                  double iou_thr, bool eleven_point = false);

struct APResult {
  std::vector<double> thresholds;       // 0.50 .. 0.95
  std::vector<int> classes;             // classes with >= 1 gt, ascending
  std::vector<std::vector<double>> ap;  // [class idx][threshold idx]
  double ap50 = 0.0;
  double map = 0.0;
};

// Classes without any gt are excluded from all means.
APResult compute_map(const std::vector<PredRecord>& dets, const std::vector<GtRecord>& gts,
                     bool eleven_point = false);

struct IoUResult {
  std::vector<int64_t> inter, uni;    // per class
  std::vector<double> class_iou;      // 0-100, -1 where union is 0 (excluded)
  double miou = 0.0;                  // 0-100
};

// Confusion counts pooled over all images; gt pixels equal to ignore_label
// are skipped entirely.
IoUResult compute_miou(const std::vector<const img::ImageU8*>& pred,
                       const std::vector<const img::ImageU8*>& gt, int num_classes,
                       int ignore_label);

// Per-pixel argmax over [N,K,H,W] logits for batch element n; ties go to the
// lowest class id.
img::ImageU8 predict_mask(const Tensor& logits, int n);

void save_eval_json(const APResult& ap, const IoUResult* iou, const std::string& path);

}  // namespace detseg::eval
