#include "detseg/evalmetrics.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include "json.hpp"

#include "detseg/anchors.hpp"

using json = nlohmann::json;

namespace detseg::eval {

namespace {

bool canonical_less(const PredRecord& a, const PredRecord& b) {
  if (a.image_id != b.image_id) return a.image_id < b.image_id;
  if (a.score != b.score) return a.score > b.score;
  if (a.x1 != b.x1) return a.x1 < b.x1;
  if (a.y1 != b.y1) return a.y1 < b.y1;
  if (a.x2 != b.x2) return a.x2 < b.x2;
  if (a.y2 != b.y2) return a.y2 < b.y2;
  return a.cls < b.cls;
}

double iou_rec(const PredRecord& d, const GtRecord& g) {
  return det::iou_xyxy(d.x1, d.y1, d.x2, d.y2, g.x1, g.y1, g.x2, g.y2);
}

}  // namespace

void save_predictions(const std::vector<PredRecord>& dets, const std::string& path) {
  std::vector<PredRecord> sorted = dets;
  std::sort(sorted.begin(), sorted.end(), canonical_less);
  json arr = json::array();
  for (const auto& d : sorted)
    arr.push_back({{"image_id", d.image_id},
                   {"x1", d.x1},
                   {"y1", d.y1},
                   {"x2", d.x2},
                   {"y2", d.y2},
                   {"class", d.cls},
                   {"score", d.score}});
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write predictions: " + path);
  out << arr.dump(2) << "\n";
}

std::vector<PredRecord> load_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open predictions: " + path);
  json doc;
  in >> doc;
  std::vector<PredRecord> out;
  for (const auto& r : doc) {
    PredRecord d;
    d.image_id = r.at("image_id").get<std::string>();
    d.x1 = r.at("x1").get<float>();
    d.y1 = r.at("y1").get<float>();
    d.x2 = r.at("x2").get<float>();
    d.y2 = r.at("y2").get<float>();
    d.cls = r.at("class").get<int>();
    d.score = r.at("score").get<float>();
    out.push_back(std::move(d));
  }
  return out;
}

MatchResult greedy_match(const std::vector<PredRecord>& dets, const std::vector<GtRecord>& gts,
                         double iou_thr) {
  MatchResult res;
  res.det_to_gt.assign(dets.size(), -1);
  res.gt_to_det.assign(gts.size(), -1);

  res.visit_order.resize(dets.size());
  for (size_t i = 0; i < dets.size(); ++i) res.visit_order[i] = static_cast<int>(i);
  std::sort(res.visit_order.begin(), res.visit_order.end(), [&](int a, int b) {
    const auto& da = dets[static_cast<size_t>(a)];
    const auto& db = dets[static_cast<size_t>(b)];
    if (da.score != db.score) return da.score > db.score;
    return canonical_less(da, db);
  });

  for (int di : res.visit_order) {
    const auto& d = dets[static_cast<size_t>(di)];
    int best_gt = -1;
    double best = 0.0;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      const auto& g = gts[gi];
      if (g.image_id != d.image_id || g.cls != d.cls) continue;
      if (res.gt_to_det[gi] >= 0) continue;
      const double v = iou_rec(d, g);
      if (v >= iou_thr && v > best) {
        best = v;
        best_gt = static_cast<int>(gi);
      }
    }
    if (best_gt >= 0) {
      res.det_to_gt[static_cast<size_t>(di)] = best_gt;
      res.gt_to_det[static_cast<size_t>(best_gt)] = di;
    }
  }
  return res;
}

double compute_ap(const std::vector<PredRecord>& dets, const std::vector<GtRecord>& gts, int cls,
                  double iou_thr, bool eleven_point) {
  if (!(iou_thr > 0.0 && iou_thr <= 1.0))
    throw std::invalid_argument("compute_ap: threshold must be in (0,1]");

  std::vector<PredRecord> d;
  std::vector<GtRecord> g;
  for (const auto& x : dets)
    if (x.cls == cls) d.push_back(x);
  for (const auto& x : gts)
    if (x.cls == cls) g.push_back(x);
  const size_t n_gt = g.size();
  if (n_gt == 0) return 0.0;
  if (d.empty()) return 0.0;

  const MatchResult m = greedy_match(d, g, iou_thr);

  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (int di : m.visit_order) {
    if (m.det_to_gt[static_cast<size_t>(di)] >= 0)
      ++tp;
    else
      ++fp;
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }

  if (eleven_point) {
    double sum = 0.0;
    for (int k = 0; k <= 10; ++k) {
      const double r = k / 10.0;
      double pmax = 0.0;
      for (size_t i = 0; i < recall.size(); ++i)
        if (recall[i] >= r) pmax = std::max(pmax, precision[i]);
      sum += pmax;
    }
    return 100.0 * sum / 11.0;
  }

  // All-points interpolation over the precision envelope.
  std::vector<double> mrec{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mrec.push_back(1.0);
  std::vector<double> mpre{0.0};
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mpre.push_back(0.0);
  for (size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double area = 0.0;
  for (size_t i = 1; i < mrec.size(); ++i)
    if (mrec[i] != mrec[i - 1]) area += (mrec[i] - mrec[i - 1]) * mpre[i];
  return 100.0 * area;
}

APResult compute_map(const std::vector<PredRecord>& dets, const std::vector<GtRecord>& gts,
                     bool eleven_point) {
  APResult r;
  for (int k = 0; k < 10; ++k) r.thresholds.push_back(0.50 + 0.05 * k);

  std::set<int> class_set;
  for (const auto& g : gts) class_set.insert(g.cls);
  r.classes.assign(class_set.begin(), class_set.end());
  if (r.classes.empty()) return r;

  r.ap.assign(r.classes.size(), std::vector<double>(r.thresholds.size(), 0.0));
  for (size_t ci = 0; ci < r.classes.size(); ++ci)
    for (size_t ti = 0; ti < r.thresholds.size(); ++ti)
      r.ap[ci][ti] = compute_ap(dets, gts, r.classes[ci], r.thresholds[ti], eleven_point);

  double total = 0.0;
  for (size_t ti = 0; ti < r.thresholds.size(); ++ti) {
    double cls_mean = 0.0;
    for (size_t ci = 0; ci < r.classes.size(); ++ci) cls_mean += r.ap[ci][ti];
    cls_mean /= static_cast<double>(r.classes.size());
    if (r.thresholds[ti] == 0.50) r.ap50 = cls_mean;
    total += cls_mean;
  }
  r.map = total / static_cast<double>(r.thresholds.size());
  return r;
}

IoUResult compute_miou(const std::vector<const img::ImageU8*>& pred,
                       const std::vector<const img::ImageU8*>& gt, int num_classes,
                       int ignore_label) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("compute_miou: pred/gt count mismatch");
  IoUResult r;
  r.inter.assign(static_cast<size_t>(num_classes), 0);
  r.uni.assign(static_cast<size_t>(num_classes), 0);

  std::vector<int64_t> pred_count(static_cast<size_t>(num_classes), 0);
  std::vector<int64_t> gt_count(static_cast<size_t>(num_classes), 0);
  for (size_t i = 0; i < pred.size(); ++i) {
    const auto& p = *pred[i];
    const auto& g = *gt[i];
    if (p.width != g.width || p.height != g.height || p.channels != 1 || g.channels != 1)
      throw std::invalid_argument("compute_miou: mask shape mismatch at pair " +
                                  std::to_string(i));
    for (size_t px = 0; px < g.pixels.size(); ++px) {
      const int gv = g.pixels[px];
      if (gv == ignore_label) continue;
      const int pv = p.pixels[px];
      if (gv >= num_classes || pv >= num_classes)
        throw std::invalid_argument("compute_miou: class id out of range");
      ++gt_count[static_cast<size_t>(gv)];
      ++pred_count[static_cast<size_t>(pv)];
      if (pv == gv) ++r.inter[static_cast<size_t>(gv)];
    }
  }

  double sum = 0.0;
  int counted = 0;
  r.class_iou.assign(static_cast<size_t>(num_classes), -1.0);
  for (int c = 0; c < num_classes; ++c) {
    r.uni[static_cast<size_t>(c)] =
        pred_count[static_cast<size_t>(c)] + gt_count[static_cast<size_t>(c)] -
        r.inter[static_cast<size_t>(c)];
    if (r.uni[static_cast<size_t>(c)] == 0) continue;
    r.class_iou[static_cast<size_t>(c)] = 100.0 * static_cast<double>(r.inter[static_cast<size_t>(c)]) /
                                          static_cast<double>(r.uni[static_cast<size_t>(c)]);
    sum += r.class_iou[static_cast<size_t>(c)];
    ++counted;
  }
  r.miou = counted > 0 ? sum / counted : 0.0;
  return r;
}

img::ImageU8 predict_mask(const Tensor& logits, int n) {
  if (logits.ndim() != 4) throw std::invalid_argument("predict_mask: logits must be [N,K,H,W]");
  const int K = logits.shape[1], H = logits.shape[2], W = logits.shape[3];
  img::ImageU8 out = img::make_image(W, H, 1);
  const int64_t plane = static_cast<int64_t>(H) * W;
  const float* base = logits.ptr() + static_cast<int64_t>(n) * K * plane;
  for (int64_t p = 0; p < plane; ++p) {
    int best = 0;
    float bv = base[p];
    for (int k = 1; k < K; ++k) {
      const float v = base[static_cast<int64_t>(k) * plane + p];
      if (v > bv) {
        bv = v;
        best = k;
      }
    }
    out.pixels[static_cast<size_t>(p)] = static_cast<uint8_t>(best);
  }
  return out;
}

void save_eval_json(const APResult& ap, const IoUResult* iou, const std::string& path) {
  json doc;
  doc["thresholds"] = ap.thresholds;
  json per_class = json::object();
  for (size_t ci = 0; ci < ap.classes.size(); ++ci)
    per_class[std::to_string(ap.classes[ci])] = ap.ap[ci];
  doc["ap_per_class"] = std::move(per_class);
  doc["ap50"] = ap.ap50;
  doc["map"] = ap.map;
  if (iou) {
    doc["iou_per_class"] = iou->class_iou;
    doc["miou"] = iou->miou;
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write eval json: " + path);
  out << doc.dump(2) << "\n";
}

}  // namespace detseg::eval
