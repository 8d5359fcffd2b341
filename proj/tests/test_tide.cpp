#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "detseg/evalmetrics.hpp"
#include "detseg/tide.hpp"
#include "doctest.h"

using namespace detseg;
namespace fs = std::filesystem;

namespace {

eval::GtRecord gt(const std::string& img, float x1, float y1, float x2, float y2, int cls) {
  return {img, x1, y1, x2, y2, cls};
}

eval::PredRecord det(const std::string& img, float x1, float y1, float x2, float y2, int cls,
                     float score) {
  return {img, x1, y1, x2, y2, cls, score};
}

}  // namespace

TEST_SUITE("tide") {
  TEST_CASE("each planted error type is classified as itself") {
    tide::TideConfig cfg;

    SUBCASE("wrong class on a well-placed box is Cls") {
      std::vector<eval::GtRecord> gts = {gt("a", 0, 0, 10, 10, 1)};
      std::vector<eval::PredRecord> dets = {det("a", 0, 0, 10, 10, 2, 0.9f)};
      auto cl = tide::classify_errors(dets, gts, cfg);
      REQUIRE(cl.det_error.size() == 1);
      CHECK(cl.det_error[0] == static_cast<int>(tide::ErrorType::Cls));
      CHECK(cl.det_best_gt[0] == 0);
      CHECK(cl.counts.at("Cls") == 1);
      CHECK(cl.counts.at("Miss") == 0);  // the Cls error explains the unmatched gt
      CHECK(cl.unmatched_gts == std::vector<int>{0});
      CHECK(cl.miss_gts.empty());
    }

    SUBCASE("right class in the loose-overlap band is Loc") {
      // IoU((0,0,10,10), (6,0,16,10)) = 40 / 160 = 0.25, inside [0.1, 0.5).
      std::vector<eval::GtRecord> gts = {gt("a", 0, 0, 10, 10, 1)};
      std::vector<eval::PredRecord> dets = {det("a", 6, 0, 16, 10, 1, 0.9f)};
      auto cl = tide::classify_errors(dets, gts, cfg);
      CHECK(cl.det_error[0] == static_cast<int>(tide::ErrorType::Loc));
      CHECK(cl.det_best_gt[0] == 0);
      CHECK(cl.counts.at("Loc") == 1);
      CHECK(cl.counts.at("Miss") == 0);
    }

    SUBCASE("wrong class in the loose-overlap band is Both") {
      std::vector<eval::GtRecord> gts = {gt("a", 0, 0, 10, 10, 1)};
      std::vector<eval::PredRecord> dets = {det("a", 6, 0, 16, 10, 2, 0.9f)};
      auto cl = tide::classify_errors(dets, gts, cfg);
      CHECK(cl.det_error[0] == static_cast<int>(tide::ErrorType::Both));
      CHECK(cl.counts.at("Both") == 1);
      // A Both error does not explain the gt away.
      CHECK(cl.counts.at("Miss") == 1);
    }

    SUBCASE("second hit on an already-matched gt is Dupe") {
      std::vector<eval::GtRecord> gts = {gt("a", 0, 0, 10, 10, 1)};
      std::vector<eval::PredRecord> dets = {det("a", 0, 0, 10, 10, 1, 0.9f),
                                            det("a", 1, 0, 11, 10, 1, 0.8f)};
      auto cl = tide::classify_errors(dets, gts, cfg);
      CHECK(cl.det_error[0] == -1);  // TP
      CHECK(cl.det_error[1] == static_cast<int>(tide::ErrorType::Dupe));
      CHECK(cl.counts.at("Dupe") == 1);
      CHECK(cl.unmatched_gts.empty());
    }

    SUBCASE("a box overlapping nothing is Bkg") {
      std::vector<eval::GtRecord> gts = {gt("a", 0, 0, 10, 10, 1)};
      std::vector<eval::PredRecord> dets = {det("a", 0, 0, 10, 10, 1, 0.9f),
                                            det("a", 50, 50, 60, 60, 1, 0.8f)};
      auto cl = tide::classify_errors(dets, gts, cfg);
      CHECK(cl.det_error[0] == -1);
      CHECK(cl.det_error[1] == static_cast<int>(tide::ErrorType::Bkg));
      CHECK(cl.counts.at("Bkg") == 1);
    }

    SUBCASE("a gt nothing fires on is Miss") {
      std::vector<eval::GtRecord> gts = {gt("a", 0, 0, 10, 10, 1), gt("a", 30, 30, 40, 40, 1)};
      std::vector<eval::PredRecord> dets = {det("a", 0, 0, 10, 10, 1, 0.9f)};
      auto cl = tide::classify_errors(dets, gts, cfg);
      CHECK(cl.det_error[0] == -1);
      CHECK(cl.counts.at("Miss") == 1);
      CHECK(cl.miss_gts == std::vector<int>{1});
      CHECK(cl.unmatched_gts == std::vector<int>{1});
    }
  }

  TEST_CASE("matches never cross images or classes") {
    tide::TideConfig cfg;
    std::vector<eval::GtRecord> gts = {gt("a", 0, 0, 10, 10, 1)};
    // Same coordinates but a different image: background, not Cls or Dupe.
    std::vector<eval::PredRecord> dets = {det("b", 0, 0, 10, 10, 1, 0.9f)};
    auto cl = tide::classify_errors(dets, gts, cfg);
    CHECK(cl.det_error[0] == static_cast<int>(tide::ErrorType::Bkg));
  }

  TEST_CASE("deltas attribute each planted error with the expected magnitude") {
    tide::TideConfig cfg;

    SUBCASE("fixing the lone Cls error recovers full AP") {
      std::vector<eval::GtRecord> gts = {gt("a", 0, 0, 10, 10, 1)};
      std::vector<eval::PredRecord> dets = {det("a", 0, 0, 10, 10, 2, 0.9f)};
      auto r = tide::tide_deltas(dets, gts, cfg);
      CHECK(r.base_ap50 == doctest::Approx(0.0));
      CHECK(r.deltas.at("Cls") == doctest::Approx(100.0));
      CHECK(r.counts.at("Cls") == 1);
    }

    SUBCASE("fixing the lone Loc error snaps the box onto the gt") {
      std::vector<eval::GtRecord> gts = {gt("a", 0, 0, 10, 10, 1)};
      std::vector<eval::PredRecord> dets = {det("a", 6, 0, 16, 10, 1, 0.9f)};
      auto r = tide::tide_deltas(dets, gts, cfg);
      CHECK(r.base_ap50 == doctest::Approx(0.0));
      CHECK(r.deltas.at("Loc") == doctest::Approx(100.0));
    }

    SUBCASE("dropping the missed gt from the denominator lifts AP to 100") {
      std::vector<eval::GtRecord> gts = {gt("a", 0, 0, 10, 10, 1), gt("a", 30, 30, 40, 40, 1)};
      std::vector<eval::PredRecord> dets = {det("a", 0, 0, 10, 10, 1, 0.9f)};
      auto r = tide::tide_deltas(dets, gts, cfg);
      CHECK(r.base_ap50 == doctest::Approx(50.0));
      CHECK(r.deltas.at("Miss") == doctest::Approx(50.0));
      CHECK(r.deltas.at("FN") == doctest::Approx(50.0));
      CHECK(r.counts.at("Miss") == 1);
      CHECK(r.counts.at("FN") == 1);
    }
  }

  TEST_CASE("every delta is non-negative and FP counts add up on a mixed scene") {
    tide::TideConfig cfg;
    std::vector<eval::GtRecord> gts = {
        gt("a", 0, 0, 10, 10, 1),  gt("a", 20, 0, 30, 10, 2), gt("a", 40, 0, 50, 10, 1),
        gt("b", 0, 0, 10, 10, 2),  gt("b", 30, 30, 40, 40, 1)};
    std::vector<eval::PredRecord> dets = {
        det("a", 0, 0, 10, 10, 1, 0.95f),   // TP
        det("a", 20, 0, 30, 10, 1, 0.90f),  // Cls (gt 1 is class 2)
        det("a", 44, 0, 54, 10, 1, 0.85f),  // Loc on gt 2 (IoU = 60/140)
        det("a", 1, 0, 11, 10, 1, 0.80f),   // Dupe of gt 0
        det("b", 60, 60, 70, 70, 2, 0.75f), // Bkg
        det("b", 24, 30, 34, 40, 2, 0.70f), // Both on gt 4 (IoU = 40/160, class 2 vs 1)
    };
    auto r = tide::tide_deltas(dets, gts, cfg);
    CHECK(r.counts.at("Cls") == 1);
    CHECK(r.counts.at("Loc") == 1);
    CHECK(r.counts.at("Both") == 1);
    CHECK(r.counts.at("Dupe") == 1);
    CHECK(r.counts.at("Bkg") == 1);
    CHECK(r.counts.at("FP") == r.counts.at("Cls") + r.counts.at("Loc") + r.counts.at("Both") +
                                   r.counts.at("Dupe") + r.counts.at("Bkg"));
    for (const char* key : {"Cls", "Loc", "Both", "Dupe", "Bkg", "Miss", "FP", "FN"}) {
      INFO("delta for ", key);
      CHECK(r.deltas.at(key) >= -1e-9);
    }
  }

  TEST_CASE("reports round-trip through json and compare column-wise") {
    tide::TideConfig cfg;
    std::vector<eval::GtRecord> gts = {gt("a", 0, 0, 10, 10, 1), gt("a", 30, 30, 40, 40, 1)};
    std::vector<eval::PredRecord> dets = {det("a", 0, 0, 10, 10, 1, 0.9f),
                                          det("a", 50, 50, 60, 60, 1, 0.8f)};
    auto r = tide::tide_deltas(dets, gts, cfg);

    const std::string path = (fs::temp_directory_path() / "detseg_tide_roundtrip.json").string();
    tide::save_tide_json(r, path);
    auto back = tide::load_tide_json(path);
    CHECK(back.base_ap50 == doctest::Approx(r.base_ap50));
    REQUIRE(back.deltas.size() == r.deltas.size());
    for (const auto& [k, v] : r.deltas) CHECK(back.deltas.at(k) == doctest::Approx(v));
    for (const auto& [k, v] : r.counts) CHECK(back.counts.at(k) == v);
    fs::remove(path);

    // A second report where the only detection is the exact TP.
    auto better = tide::tide_deltas({dets[0]}, gts, cfg);
    auto diff = tide::compare_reports(r, better);
    CHECK(diff.at("AP50") == doctest::Approx(better.base_ap50 - r.base_ap50));
    CHECK(diff.at("Bkg") == doctest::Approx(better.deltas.at("Bkg") - r.deltas.at("Bkg")));
    CHECK(diff.size() == 9);
  }

  TEST_CASE("the table lists every column and optionally a delta row") {
    tide::TideConfig cfg;
    std::vector<eval::GtRecord> gts = {gt("a", 0, 0, 10, 10, 1)};
    std::vector<eval::PredRecord> dets = {det("a", 0, 0, 10, 10, 2, 0.9f)};
    auto r = tide::tide_deltas(dets, gts, cfg);

    auto table = tide::format_tide_table(r);
    for (const char* col : {"AP50", "Cls", "Loc", "Both", "Dupe", "Bkg", "Miss", "FP", "FN"})
      CHECK(table.find(col) != std::string::npos);
    CHECK(table.find("delta") == std::string::npos);

    auto base = tide::tide_deltas({det("a", 0, 0, 10, 10, 1, 0.9f)}, gts, cfg);
    auto with_delta = tide::format_tide_table(r, &base);
    CHECK(with_delta.find("delta") != std::string::npos);
  }
}
