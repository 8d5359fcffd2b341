#include "detseg/tide.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"

#include "detseg/anchors.hpp"

namespace detseg::tide {

using eval::GtRecord;
using eval::PredRecord;
using nlohmann::json;

const char* error_name(ErrorType t) {
  switch (t) {
    case ErrorType::Cls: return "Cls";
    case ErrorType::Loc: return "Loc";
    case ErrorType::Both: return "Both";
    case ErrorType::Dupe: return "Dupe";
    case ErrorType::Bkg: return "Bkg";
  }
  throw std::logic_error("bad ErrorType");
}

namespace {

double iou(const PredRecord& d, const GtRecord& g) {
  return det::iou_xyxy(d.x1, d.y1, d.x2, d.y2, g.x1, g.y1, g.x2, g.y2);
}

// Mean AP at IoU 0.5 over classes that own at least one gt, mirroring the
// class set compute_map uses.
double ap50_of(const std::vector<PredRecord>& dets, const std::vector<GtRecord>& gts) {
  std::set<int> classes;
  for (const auto& g : gts) classes.insert(g.cls);
  if (classes.empty()) return 0.0;
  double sum = 0.0;
  for (int c : classes) sum += eval::compute_ap(dets, gts, c, 0.5);
  return sum / static_cast<double>(classes.size());
}

}  // namespace

Classified classify_errors(const std::vector<PredRecord>& dets,
                           const std::vector<GtRecord>& gts, const TideConfig& cfg) {
  const eval::MatchResult m = eval::greedy_match(dets, gts, cfg.t_f);

  Classified out;
  out.det_error.assign(dets.size(), -1);
  out.det_best_gt.assign(dets.size(), -1);
  for (const char* k : {"Cls", "Loc", "Both", "Dupe", "Bkg", "Miss"}) out.counts[k] = 0;

  std::set<int> explained;
  for (size_t i = 0; i < dets.size(); ++i) {
    if (m.det_to_gt[i] >= 0) continue;  // true positive
    const PredRecord& d = dets[i];
    double same_max = 0.0, diff_max = 0.0;
    int same_gt = -1, diff_gt = -1;
    for (size_t j = 0; j < gts.size(); ++j) {
      if (gts[j].image_id != d.image_id) continue;
      const double v = iou(d, gts[j]);
      if (gts[j].cls == d.cls) {
        if (v > same_max) same_max = v, same_gt = static_cast<int>(j);
      } else {
        if (v > diff_max) diff_max = v, diff_gt = static_cast<int>(j);
      }
    }

    ErrorType e;
    if (diff_max >= cfg.t_f) {
      e = ErrorType::Cls;
      out.det_best_gt[i] = diff_gt;
      explained.insert(diff_gt);
    } else if (same_max >= cfg.t_f) {
      e = ErrorType::Dupe;
    } else if (same_max >= cfg.t_b) {
      e = ErrorType::Loc;
      out.det_best_gt[i] = same_gt;
      explained.insert(same_gt);
    } else if (diff_max >= cfg.t_b) {
      e = ErrorType::Both;
    } else {
      e = ErrorType::Bkg;
    }
    out.det_error[i] = static_cast<int>(e);
    ++out.counts[error_name(e)];
  }

  for (size_t j = 0; j < gts.size(); ++j) {
    if (m.gt_to_det[j] >= 0) continue;
    out.unmatched_gts.push_back(static_cast<int>(j));
    if (!explained.count(static_cast<int>(j))) out.miss_gts.push_back(static_cast<int>(j));
  }
  out.counts["Miss"] = static_cast<int>(out.miss_gts.size());
  return out;
}

namespace {

// Applies one oracle fix, re-runs matching, deletes the listed detections if
// they still match nothing, and returns the resulting AP50. `fixed` indexes
// into `dets`; deletions elsewhere must already be done by the caller.
double ap_after_fix(std::vector<PredRecord> dets, const std::vector<GtRecord>& gts,
                    const std::vector<int>& fixed, const TideConfig& cfg) {
  if (!fixed.empty()) {
    const eval::MatchResult m = eval::greedy_match(dets, gts, cfg.t_f);
    std::vector<PredRecord> kept;
    kept.reserve(dets.size());
    std::set<int> drop;
    for (int i : fixed)
      if (m.det_to_gt[i] < 0) drop.insert(i);
    for (size_t i = 0; i < dets.size(); ++i)
      if (!drop.count(static_cast<int>(i))) kept.push_back(dets[i]);
    dets.swap(kept);
  }
  return ap50_of(dets, gts);
}

}  // namespace

TideReport tide_deltas(const std::vector<PredRecord>& dets, const std::vector<GtRecord>& gts,
                       const TideConfig& cfg) {
  const Classified cl = classify_errors(dets, gts, cfg);

  TideReport r;
  r.base_ap50 = ap50_of(dets, gts);
  r.counts = cl.counts;
  const auto cnt = [&](const char* k) {
    auto it = cl.counts.find(k);
    return it == cl.counts.end() ? 0 : it->second;
  };
  r.counts["FP"] = cnt("Cls") + cnt("Loc") + cnt("Both") + cnt("Dupe") + cnt("Bkg");
  r.counts["FN"] = static_cast<int>(cl.unmatched_gts.size());

  const auto is_type = [&](size_t i, ErrorType e) {
    return cl.det_error[i] == static_cast<int>(e);
  };

  // Cls: rewrite the label to the overlapped gt's class.
  {
    std::vector<PredRecord> d = dets;
    std::vector<int> fixed;
    for (size_t i = 0; i < d.size(); ++i)
      if (is_type(i, ErrorType::Cls)) {
        d[i].cls = gts[cl.det_best_gt[i]].cls;
        fixed.push_back(static_cast<int>(i));
      }
    r.deltas["Cls"] = ap_after_fix(std::move(d), gts, fixed, cfg) - r.base_ap50;
  }

  // Loc: snap the box onto the overlapped same-class gt.
  {
    std::vector<PredRecord> d = dets;
    std::vector<int> fixed;
    for (size_t i = 0; i < d.size(); ++i)
      if (is_type(i, ErrorType::Loc)) {
        const GtRecord& g = gts[cl.det_best_gt[i]];
        d[i].x1 = g.x1, d[i].y1 = g.y1, d[i].x2 = g.x2, d[i].y2 = g.y2;
        fixed.push_back(static_cast<int>(i));
      }
    r.deltas["Loc"] = ap_after_fix(std::move(d), gts, fixed, cfg) - r.base_ap50;
  }

  // Both / Dupe / Bkg: the only sensible oracle is deletion.
  for (ErrorType e : {ErrorType::Both, ErrorType::Dupe, ErrorType::Bkg}) {
    std::vector<PredRecord> d;
    for (size_t i = 0; i < dets.size(); ++i)
      if (!is_type(i, e)) d.push_back(dets[i]);
    r.deltas[error_name(e)] = ap50_of(d, gts) - r.base_ap50;
  }

  // Miss: drop the unexplained unmatched gts from the denominator.
  {
    std::set<int> missed(cl.miss_gts.begin(), cl.miss_gts.end());
    std::vector<GtRecord> g;
    for (size_t j = 0; j < gts.size(); ++j)
      if (!missed.count(static_cast<int>(j))) g.push_back(gts[j]);
    r.deltas["Miss"] = ap50_of(dets, g) - r.base_ap50;
  }

  // FP / FN: the aggregate oracles.
  {
    std::vector<PredRecord> d;
    for (size_t i = 0; i < dets.size(); ++i)
      if (cl.det_error[i] < 0) d.push_back(dets[i]);
    r.deltas["FP"] = ap50_of(d, gts) - r.base_ap50;
  }
  {
    std::set<int> unmatched(cl.unmatched_gts.begin(), cl.unmatched_gts.end());
    std::vector<GtRecord> g;
    for (size_t j = 0; j < gts.size(); ++j)
      if (!unmatched.count(static_cast<int>(j))) g.push_back(gts[j]);
    r.deltas["FN"] = ap50_of(dets, g) - r.base_ap50;
  }
  return r;
}

std::map<std::string, double> compare_reports(const TideReport& a, const TideReport& b) {
  std::map<std::string, double> out;
  out["AP50"] = b.base_ap50 - a.base_ap50;
  for (const auto& [k, v] : a.deltas) {
    auto it = b.deltas.find(k);
    out[k] = (it == b.deltas.end() ? 0.0 : it->second) - v;
  }
  return out;
}

void save_tide_json(const TideReport& r, const std::string& path) {
  json doc;
  doc["ap50"] = r.base_ap50;
  doc["deltas"] = r.deltas;
  doc["counts"] = r.counts;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << doc.dump(2) << "\n";
}

TideReport load_tide_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json doc = json::parse(in);
  TideReport r;
  r.base_ap50 = doc.at("ap50").get<double>();
  for (const auto& [k, v] : doc.at("deltas").items()) r.deltas[k] = v.get<double>();
  for (const auto& [k, v] : doc.at("counts").items()) r.counts[k] = v.get<int>();
  return r;
}

std::string format_tide_table(const TideReport& r, const TideReport* baseline) {
  static const char* kCols[] = {"AP50", "Cls", "Loc", "Both", "Dupe", "Bkg", "Miss", "FP", "FN"};
  const auto cell = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%8.2f", v);
    return std::string(buf);
  };
  const auto value = [&](const TideReport& rep, const std::string& col) {
    if (col == "AP50") return rep.base_ap50;
    auto it = rep.deltas.find(col);
    return it == rep.deltas.end() ? 0.0 : it->second;
  };

  std::string head = "     ", row = "     ";
  for (const char* c : kCols) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%8s", c);
    head += buf;
    row += cell(value(r, c));
  }
  std::string out = head + "\n" + row + "\n";
  if (baseline) {
    std::string drow = "delta";
    for (const char* c : kCols) drow += cell(value(r, c) - value(*baseline, c));
    out += drow + "\n";
  }
  return out;
}

}  // namespace detseg::tide
