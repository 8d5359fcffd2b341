#include "detseg/introspect.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "detseg/detpost.hpp"
#include "detseg/ops.hpp"

namespace detseg::introspect {

CamTarget cam_target_from_string(const std::string& s) {
  CamTarget t;
  if (s == "det:top" || s == "det") {
    t.kind = CamTarget::Kind::DET_TOP;
    return t;
  }
  const auto fields = [&] {
    std::vector<std::string> out;
    size_t start = 0;
    for (size_t i = 0; i <= s.size(); ++i)
      if (i == s.size() || s[i] == ':') {
        out.push_back(s.substr(start, i - start));
        start = i + 1;
      }
    return out;
  }();
  if (fields.size() == 2 && fields[0] == "seg") {
    t.kind = CamTarget::Kind::SEG_CLASS;
    t.cls = std::stoi(fields[1]);
    return t;
  }
  if (fields.size() == 3 && fields[0] == "det") {
    t.kind = CamTarget::Kind::DET_ANCHOR;
    t.anchor = std::stoi(fields[1]);
    t.cls = std::stoi(fields[2]);
    return t;
  }
  throw std::invalid_argument("bad cam target '" + s + "' (want det:top, det:<anchor>:<cls>, or seg:<cls>)");
}

namespace {

int round_up(int v, int m) { return (v + m - 1) / m * m; }

Tensor image_tensor(const img::ImageU8& image, int hp, int wp) {
  Tensor t({1, 3, hp, wp});
  const int ch = std::min(image.channels, 3);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x)
        t.data[(static_cast<int64_t>(c) * hp + y) * wp + x] =
            image.at(y, x, std::min(c, ch - 1)) / 255.f;
  return t;
}

}  // namespace

CamResult grad_cam(model::Model& m, const img::ImageU8& image, const CamTarget& target,
                   const std::vector<int>& level_sel) {
  const auto& mc = m.config();
  const int ms = mc.enc.strides.back();
  const int hp = round_up(image.height, ms), wp = round_up(image.width, ms);

  m.params().zero_grad();
  Var x(image_tensor(image, hp, wp));
  x.set_requires_grad(true);  // records the graph even when everything is frozen
  auto levels = m.encode(x);

  std::vector<int> sel = level_sel.empty() ? std::vector<int>{0} : level_sel;
  for (int i : sel)
    if (i < 0 || i >= static_cast<int>(levels.size()))
      throw std::invalid_argument("level selector " + std::to_string(i) + " out of range");

  CamResult res;
  Var score;
  switch (target.kind) {
    case CamTarget::Kind::DET_TOP: {
      if (!mc.with_det) throw std::runtime_error("model has no detection head");
      model::DetOut out = m.det_forward(levels);
      std::vector<det::Detection> dets;
      {
        NoGradGuard ng;
        const int mrows = out.cls.val().shape[1], k = out.cls.val().shape[2];
        Tensor cls0({mrows, k}), reg0({mrows, 4});
        std::copy_n(out.cls.val().data.begin(), cls0.data.size(), cls0.data.begin());
        std::copy_n(out.reg.val().data.begin(), reg0.data.size(), reg0.data.begin());
        const auto anchors = det::generate_anchors(out.level_shapes, mc.det);
        dets = det::decode_detections(cls0, reg0, anchors, mc.det, image.width, image.height);
      }
      if (dets.empty()) throw std::runtime_error("no detection above threshold to explain");
      // decode sorts by (-score, cls); front is the top detection, but its
      // anchor row is gone, so rescan the logits for that class's best row.
      const det::Detection& top = dets.front();
      const int k = out.cls.val().shape[2];
      if (top.cls - 1 >= k) throw std::runtime_error("target class absent from the head");
      int best_row = 0;
      float best = -1e30f;
      for (int r = 0; r < out.cls.val().shape[1]; ++r) {
        const float v = out.cls.val().data[static_cast<int64_t>(r) * k + (top.cls - 1)];
        if (v > best) best = v, best_row = r;
      }
      score = ops::select_scalar(out.cls, static_cast<int64_t>(best_row) * k + (top.cls - 1));
      res.det_cls = top.cls;
      res.det_score = top.score;
      break;
    }
    case CamTarget::Kind::DET_ANCHOR: {
      if (!mc.with_det) throw std::runtime_error("model has no detection head");
      model::DetOut out = m.det_forward(levels);
      const int mrows = out.cls.val().shape[1], k = out.cls.val().shape[2];
      if (target.cls < 0 || target.cls >= k)
        throw std::runtime_error("target class absent from the head");
      if (target.anchor < 0 || target.anchor >= mrows)
        throw std::invalid_argument("anchor row out of range");
      score = ops::select_scalar(out.cls, static_cast<int64_t>(target.anchor) * k + target.cls);
      res.det_cls = target.cls + 1;
      break;
    }
    case CamTarget::Kind::SEG_CLASS: {
      if (!mc.with_seg) throw std::runtime_error("model has no segmentation head");
      if (target.cls < 0 || target.cls >= mc.seg.num_classes)
        throw std::runtime_error("target class absent from the head");
      Var logits = m.seg_forward(levels, hp, wp);
      score = ops::channel_sum(logits, target.cls);
      break;
    }
  }

  backward(score);

  Tensor acc({hp, wp});
  for (int i : sel) {
    const Tensor& a = levels[i].val();
    const Tensor& g = levels[i].node()->grad;
    const int c = a.shape[1], h = a.shape[2], w = a.shape[3];
    Tensor cam({1, 1, h, w});
    if (!g.data.empty()) {
      for (int ic = 0; ic < c; ++ic) {
        const float* ap = a.data.data() + static_cast<int64_t>(ic) * h * w;
        const float* gp = g.data.data() + static_cast<int64_t>(ic) * h * w;
        double wsum = 0;
        for (int p = 0; p < h * w; ++p) wsum += gp[p];
        const float wc = static_cast<float>(wsum / (h * w));
        for (int p = 0; p < h * w; ++p) cam.data[p] += wc * ap[p];
      }
      for (float& v : cam.data) v = std::max(v, 0.f);
    }
    NoGradGuard ng;
    Var up = ops::upsample_bilinear(Var(std::move(cam)), hp / h);
    for (int p = 0; p < hp * wp; ++p) acc.data[p] += up.val().data[p];
  }

  float mx = 0.f;
  for (float v : acc.data) mx = std::max(mx, v);
  res.heatmap = Tensor({image.height, image.width});
  for (int y = 0; y < image.height; ++y)
    for (int x2 = 0; x2 < image.width; ++x2)
      res.heatmap.data[static_cast<int64_t>(y) * image.width + x2] =
          mx > 0 ? acc.data[static_cast<int64_t>(y) * wp + x2] / mx : 0.f;
  return res;
}

void save_cam_figure(const img::ImageU8& image, const Tensor& heatmap, const std::string& path) {
  if (heatmap.shape.size() != 2 || heatmap.shape[0] != image.height ||
      heatmap.shape[1] != image.width)
    throw std::invalid_argument("heatmap size does not match the image");
  const int h = image.height, w = image.width;
  img::ImageU8 fig = img::make_image(2 * w, h, 3);
  const auto ramp = [](float v, float center) {
    return std::clamp(1.5f - std::fabs(4.f * v - center), 0.f, 1.f);
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float v = heatmap.data[static_cast<int64_t>(y) * w + x];
      const float rgb[3] = {ramp(v, 3.f), ramp(v, 2.f), ramp(v, 1.f)};
      for (int c = 0; c < 3; ++c) {
        const uint8_t px = image.at(y, x, std::min(c, image.channels - 1));
        fig.at(y, x, c) = px;
        fig.at(y, x + w, c) =
            static_cast<uint8_t>(std::clamp(0.5f * px + 0.5f * 255.f * rgb[c], 0.f, 255.f));
      }
    }
  img::write_png(path, fig);
}

}  // namespace detseg::introspect
