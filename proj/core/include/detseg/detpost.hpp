#pragma once

#include <vector>

#include "detseg/anchors.hpp"
#include "detseg/tensor.hpp"

namespace detseg::det {

struct Detection {
  float x1, y1, x2, y2;
  int cls = 0;  // 1-based, matching annotation classes
  float score = 0.f;
};

// Greedy per-class NMS on an arbitrary detection list: candidates visited by
// descending score (ties by list index), suppressed when IoU with a kept box
// of the same class exceeds iou_thresh. Returns kept indices in visit order.
std::vector<int> nms_keep(const std::vector<Detection>& dets, float iou_thresh);

// Applies deltas to anchors, clips to the image, drops scores below the
// config threshold, runs per-class NMS, and keeps the top max_detections by
// score. cls_logits [M,K] and reg [M,4] are single-image anchor-major slabs.
std::vector<Detection> decode_detections(const Tensor& cls_logits, const Tensor& reg,
                                         const std::vector<Anchor>& anchors,
                                         const model::DetHeadConfig& cfg, int img_w, int img_h);

}  // namespace detseg::det
