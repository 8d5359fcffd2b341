#pragma once

#include <string>
#include <vector>

#include "detseg/model.hpp"
#include "detseg/pngio.hpp"
#include "detseg/tensor.hpp"

namespace detseg::introspect {

// What the class-activation map should explain. DET_TOP picks the
// top-scoring decoded detection's classification logit; DET_ANCHOR names an
// anchor row and 0-based class directly; SEG_CLASS sums one class's logit
// map over all pixels.
struct CamTarget {
  enum class Kind { DET_TOP, DET_ANCHOR, SEG_CLASS };
  Kind kind = Kind::DET_TOP;
  int cls = 0;      // 0-based head class (DET_ANCHOR, SEG_CLASS)
  int anchor = -1;  // anchor-major row (DET_ANCHOR)
};

CamTarget cam_target_from_string(const std::string& s);

struct CamResult {
  Tensor heatmap;  // [H,W], values in [0,1]
  int det_cls = -1;      // 1-based class of the explained detection, if any
  float det_score = 0.f;
};

// Gradient-weighted class-activation map over the chosen neck levels
// (indices into the pyramid; empty selects the finest level). Channel
// weights are the spatial means of the target's gradient, the map is the
// rectified weighted channel sum, upsampled to image size, averaged across
// levels, and divided by its max when positive.
CamResult grad_cam(model::Model& m, const img::ImageU8& image, const CamTarget& target,
                   const std::vector<int>& levels = {});

// Writes input | heatmap-overlay side by side.
void save_cam_figure(const img::ImageU8& image, const Tensor& heatmap, const std::string& path);

}  // namespace detseg::introspect
