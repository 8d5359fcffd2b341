#include "detseg/detpost.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace detseg::det {

std::vector<int> nms_keep(const std::vector<Detection>& dets, float iou_thresh) {
  std::vector<int> order(dets.size());
  for (size_t i = 0; i < dets.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return dets[static_cast<size_t>(a)].score > dets[static_cast<size_t>(b)].score;
  });

  std::vector<int> kept;
  for (int idx : order) {
    const Detection& d = dets[static_cast<size_t>(idx)];
    bool suppressed = false;
    for (int k : kept) {
      const Detection& kd = dets[static_cast<size_t>(k)];
      if (kd.cls != d.cls) continue;
      if (iou_xyxy(d.x1, d.y1, d.x2, d.y2, kd.x1, kd.y1, kd.x2, kd.y2) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

std::vector<Detection> decode_detections(const Tensor& cls_logits, const Tensor& reg,
                                         const std::vector<Anchor>& anchors,
                                         const model::DetHeadConfig& cfg, int img_w, int img_h) {
  if (cls_logits.ndim() != 2 || reg.ndim() != 2 || reg.shape[1] != 4)
    throw std::invalid_argument("decode_detections: expected [M,K] logits and [M,4] deltas");
  const int M = cls_logits.shape[0];
  const int K = cls_logits.shape[1];
  if (M != static_cast<int>(anchors.size()) || reg.shape[0] != M)
    throw std::invalid_argument("decode_detections: anchor count mismatch");

  std::vector<Detection> cands;
  for (int m = 0; m < M; ++m) {
    float box[4];
    decode_delta(anchors[static_cast<size_t>(m)], reg.ptr() + static_cast<int64_t>(m) * 4, box);
    const float x1 = std::clamp(box[0], 0.f, static_cast<float>(img_w));
    const float y1 = std::clamp(box[1], 0.f, static_cast<float>(img_h));
    const float x2 = std::clamp(box[2], 0.f, static_cast<float>(img_w));
    const float y2 = std::clamp(box[3], 0.f, static_cast<float>(img_h));
    if (x2 <= x1 || y2 <= y1) continue;
    for (int k = 0; k < K; ++k) {
      const float logit = cls_logits.data[static_cast<size_t>(m) * K + k];
      const float score = 1.f / (1.f + std::exp(-logit));
      if (score < cfg.score_thresh) continue;
      Detection d;
      d.x1 = x1;
      d.y1 = y1;
      d.x2 = x2;
      d.y2 = y2;
      d.cls = k + 1;
      d.score = score;
      cands.push_back(d);
    }
  }

  const std::vector<int> kept = nms_keep(cands, cfg.nms_iou);
  std::vector<Detection> out;
  out.reserve(kept.size());
  for (int idx : kept) out.push_back(cands[static_cast<size_t>(idx)]);
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.cls < b.cls;
  });
  if (static_cast<int>(out.size()) > cfg.max_detections)
    out.resize(static_cast<size_t>(cfg.max_detections));
  return out;
}

}  // namespace detseg::det
