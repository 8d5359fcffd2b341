#include "detseg/anchors.hpp"

#include <algorithm>
#include <cmath>

namespace detseg::det {

float iou_xyxy(float ax1, float ay1, float ax2, float ay2, float bx1, float by1, float bx2,
               float by2) {
  const float ix = std::max(0.f, std::min(ax2, bx2) - std::max(ax1, bx1));
  const float iy = std::max(0.f, std::min(ay2, by2) - std::max(ay1, by1));
  const float inter = ix * iy;
  if (inter <= 0.f) return 0.f;
  const float uni = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
  return inter / uni;
}

float iou_box(const data::Box& a, const data::Box& b) {
  return iou_xyxy(a.x1, a.y1, a.x2, a.y2, b.x1, b.y1, b.x2, b.y2);
}

std::vector<Anchor> generate_anchors(
    const std::vector<std::pair<int, std::pair<int, int>>>& level_shapes,
    const model::DetHeadConfig& cfg) {
  std::vector<Anchor> out;
  for (const auto& [stride, hw] : level_shapes) {
    const int H = hw.first, W = hw.second;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j)
        for (float scale : cfg.anchor_scales)
          for (float ratio : cfg.anchor_ratios) {
            const float base = scale * static_cast<float>(stride);
            const float sq = std::sqrt(ratio);
            Anchor a;
            a.cx = static_cast<float>(stride) * 0.5f + static_cast<float>(stride * j);
            a.cy = static_cast<float>(stride) * 0.5f + static_cast<float>(stride * i);
            a.w = base / sq;
            a.h = base * sq;
            out.push_back(a);
          }
  }
  return out;
}

void encode_delta(const Anchor& a, const data::Box& g, float out[4]) {
  const float gcx = 0.5f * (g.x1 + g.x2), gcy = 0.5f * (g.y1 + g.y2);
  const float gw = g.x2 - g.x1, gh = g.y2 - g.y1;
  out[0] = (gcx - a.cx) / a.w / 0.1f;
  out[1] = (gcy - a.cy) / a.h / 0.1f;
  out[2] = std::log(gw / a.w) / 0.2f;
  out[3] = std::log(gh / a.h) / 0.2f;
}

void decode_delta(const Anchor& a, const float t[4], float out_xyxy[4]) {
  const float cx = t[0] * 0.1f * a.w + a.cx;
  const float cy = t[1] * 0.1f * a.h + a.cy;
  // Clamp the log-scale term so stray regressions cannot overflow exp.
  const float w = std::exp(std::min(t[2] * 0.2f, 4.f)) * a.w;
  const float h = std::exp(std::min(t[3] * 0.2f, 4.f)) * a.h;
  out_xyxy[0] = cx - 0.5f * w;
  out_xyxy[1] = cy - 0.5f * h;
  out_xyxy[2] = cx + 0.5f * w;
  out_xyxy[3] = cy + 0.5f * h;
}

DetTargets match_anchors(const std::vector<Anchor>& anchors, const std::vector<data::Box>& gts,
                         const model::DetHeadConfig& cfg) {
  const int M = static_cast<int>(anchors.size());
  const int G = static_cast<int>(gts.size());
  DetTargets t;
  t.labels.assign(static_cast<size_t>(M), -1);
  t.deltas = Tensor({M, 4});
  if (G == 0) return t;

  std::vector<int> best_gt(static_cast<size_t>(M), -1);
  std::vector<float> best_iou(static_cast<size_t>(M), 0.f);
  // Starting at zero keeps gts with no overlap anywhere from claiming an
  // arbitrary anchor in the force-match pass below.
  std::vector<int> gt_best_anchor(static_cast<size_t>(G), -1);
  std::vector<float> gt_best_iou(static_cast<size_t>(G), 0.f);

  for (int m = 0; m < M; ++m) {
    const Anchor& a = anchors[static_cast<size_t>(m)];
    const float ax1 = a.cx - 0.5f * a.w, ay1 = a.cy - 0.5f * a.h;
    const float ax2 = a.cx + 0.5f * a.w, ay2 = a.cy + 0.5f * a.h;
    for (int g = 0; g < G; ++g) {
      const auto& b = gts[static_cast<size_t>(g)];
      const float v = iou_xyxy(ax1, ay1, ax2, ay2, b.x1, b.y1, b.x2, b.y2);
      if (v > best_iou[static_cast<size_t>(m)]) {
        best_iou[static_cast<size_t>(m)] = v;
        best_gt[static_cast<size_t>(m)] = g;
      }
      if (v > gt_best_iou[static_cast<size_t>(g)]) {
        gt_best_iou[static_cast<size_t>(g)] = v;
        gt_best_anchor[static_cast<size_t>(g)] = m;
      }
    }
  }

  for (int m = 0; m < M; ++m) {
    const float v = best_iou[static_cast<size_t>(m)];
    if (v >= cfg.pos_iou)
      t.labels[static_cast<size_t>(m)] = gts[static_cast<size_t>(best_gt[static_cast<size_t>(m)])].cls - 1;
    else if (v >= cfg.neg_iou)
      t.labels[static_cast<size_t>(m)] = -2;
  }
  for (int g = 0; g < G; ++g) {
    const int m = gt_best_anchor[static_cast<size_t>(g)];
    if (m < 0) continue;
    t.labels[static_cast<size_t>(m)] = gts[static_cast<size_t>(g)].cls - 1;
    best_gt[static_cast<size_t>(m)] = g;
  }

  for (int m = 0; m < M; ++m) {
    if (t.labels[static_cast<size_t>(m)] < 0) continue;
    ++t.num_pos;
    float d[4];
    encode_delta(anchors[static_cast<size_t>(m)], gts[static_cast<size_t>(best_gt[static_cast<size_t>(m)])], d);
    for (int k = 0; k < 4; ++k) t.deltas.data[static_cast<size_t>(m) * 4 + k] = d[k];
  }
  return t;
}

}  // namespace detseg::det
