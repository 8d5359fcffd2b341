#pragma once

#include <map>
#include <string>
#include <vector>

#include "detseg/evalmetrics.hpp"

namespace detseg::tide {

enum class ErrorType { Cls, Loc, Both, Dupe, Bkg };

const char* error_name(ErrorType t);

struct TideConfig {
  float t_f = 0.5f;  // foreground threshold (also the TP matching threshold)
  float t_b = 0.1f;  // background threshold
};

struct Classified {
  std::vector<int> det_error;     // per det: -1 = TP, else static_cast<int>(ErrorType)
  std::vector<int> det_best_gt;   // gt index explaining a Cls/Loc error, else -1
  std::vector<int> miss_gts;      // unmatched gts not explained by any Cls/Loc error
  std::vector<int> unmatched_gts; // all unmatched gts (FN pool)
  std::map<std::string, int> counts;  // per error name plus "Miss"
};

// One exclusive label per false positive: Cls when a different-class gt
// overlaps at >= t_f; else Dupe when a same-class gt does (it must already be
// matched, or the det would be a TP); else Loc / Both for the [t_b, t_f)
// band, same class taking precedence; else Bkg.
Classified classify_errors(const std::vector<eval::PredRecord>& dets,
                           const std::vector<eval::GtRecord>& gts, const TideConfig& cfg);

struct TideReport {
  double base_ap50 = 0.0;
  // Keys: Cls, Loc, Both, Dupe, Bkg, Miss, FP, FN. Values are delta-AP points.
  std::map<std::string, double> deltas;
  std::map<std::string, int> counts;
};

// Fix-and-recompute attribution: each error type is fixed in isolation (Cls:
// rewrite the class to the overlapped gt's; Loc: snap the box onto the gt;
// Both/Dupe/Bkg: delete; Miss: drop the missed gts from the denominator),
// matching is re-run, fixed detections that still match nothing are deleted,
// and the delta is the AP50 change. FP deletes every false positive; FN drops
// every unmatched gt.
TideReport tide_deltas(const std::vector<eval::PredRecord>& dets,
                       const std::vector<eval::GtRecord>& gts, const TideConfig& cfg);

// Column-wise B - A over [AP50, Cls, Loc, Both, Dupe, Bkg, Miss, FP, FN].
std::map<std::string, double> compare_reports(const TideReport& a, const TideReport& b);

void save_tide_json(const TideReport& r, const std::string& path);
TideReport load_tide_json(const std::string& path);

// Plain-text table in the usual column order; delta row optional.
std::string format_tide_table(const TideReport& r, const TideReport* baseline = nullptr);

}  // namespace detseg::tide
