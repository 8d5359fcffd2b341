#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "detseg/dataio.hpp"
#include "detseg/model.hpp"
#include "detseg/tensor.hpp"

namespace detseg::det {

struct Anchor {
  float cx, cy, w, h;
};

float iou_xyxy(float ax1, float ay1, float ax2, float ay2, float bx1, float by1, float bx2,
               float by2);
float iou_box(const data::Box& a, const data::Box& b);

// Row order matches the head's anchor-major layout: levels in stride order,
// cells row-major within a level, then scale-major/ratio-minor within a cell.
// Centers sit at (s/2 + s*j, s/2 + s*i); box size is scale*stride shaped by
// the h/w ratio at constant area.
std::vector<Anchor> generate_anchors(
    const std::vector<std::pair<int, std::pair<int, int>>>& level_shapes,
    const model::DetHeadConfig& cfg);

struct DetTargets {
  std::vector<int32_t> labels;  // per anchor: -2 ignore, -1 negative, >=0 class index
  Tensor deltas;                // [M,4], defined at positive rows
  int num_pos = 0;
};

// Max-IoU assignment with the usual force-match rule: every gt claims its
// best overlapping anchor (ties to the lowest anchor index) even below the
// positive threshold. gt boxes use 1-based classes; emitted labels are
// 0-based.
DetTargets match_anchors(const std::vector<Anchor>& anchors, const std::vector<data::Box>& gts,
                         const model::DetHeadConfig& cfg);

// Center/size delta encoding with the (0.1, 0.1, 0.2, 0.2) normalization.
void encode_delta(const Anchor& a, const data::Box& g, float out[4]);
void decode_delta(const Anchor& a, const float t[4], float out_xyxy[4]);

}  // namespace detseg::det
