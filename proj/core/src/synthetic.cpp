#include "detseg/synthetic.hpp"

#include <algorithm>
#include <cstdio>
#include <stdexcept>

#include "detseg/rng.hpp"

namespace detseg::data {

namespace {

struct RectI {
  int x1, y1, x2, y2;  // inclusive-exclusive
};

bool overlaps(const RectI& a, const RectI& b, int margin) {
  return a.x1 < b.x2 + margin && b.x1 < a.x2 + margin && a.y1 < b.y2 + margin &&
         b.y1 < a.y2 + margin;
}

// All classes draw from one palette so color alone never identifies a class;
// the learnable signal is the silhouette.
constexpr uint8_t kPalette[6][3] = {{204, 64, 54},  {58, 160, 82},  {66, 98, 196},
                                    {222, 170, 40}, {150, 70, 180}, {60, 180, 180}};

// Returns true if pixel (px, py) center lies inside the shape `cls` bounded
// by r. Rectangles fill the box; ellipses are inscribed; triangles stand on
// the box bottom with apex at (apex_x, top).
bool inside_shape(int cls, const RectI& r, int apex_x, int px, int py) {
  switch (cls) {
    case 1:
      return true;
    case 2: {
      const double cx = 0.5 * (r.x1 + r.x2), cy = 0.5 * (r.y1 + r.y2);
      const double rx = 0.5 * (r.x2 - r.x1), ry = 0.5 * (r.y2 - r.y1);
      const double dx = (px + 0.5 - cx) / rx, dy = (py + 0.5 - cy) / ry;
      return dx * dx + dy * dy <= 1.0;
    }
    case 3: {
      // Vertices at pixel centers: bottom corners and the apex.
      const double ax = r.x1 + 0.5, ay = r.y2 - 0.5;
      const double bx = r.x2 - 0.5, by = r.y2 - 0.5;
      const double cx = apex_x + 0.5, cy = r.y1 + 0.5;
      const double x = px + 0.5, y = py + 0.5;
      const auto edge = [](double x0, double y0, double x1, double y1, double qx, double qy) {
        return (x1 - x0) * (qy - y0) - (y1 - y0) * (qx - x0);
      };
      const double d0 = edge(ax, ay, bx, by, x, y);
      const double d1 = edge(bx, by, cx, cy, x, y);
      const double d2 = edge(cx, cy, ax, ay, x, y);
      const bool neg = d0 < 0 || d1 < 0 || d2 < 0;
      const bool pos = d0 > 0 || d1 > 0 || d2 > 0;
      return !(neg && pos);
    }
    default:
      throw std::logic_error("inside_shape: unknown class");
  }
}

}  // namespace

Dataset generate_synthetic(int n, const SyntheticSpec& spec, uint64_t seed) {
  if (n < 1) throw std::invalid_argument("generate_synthetic: n must be >= 1");
  if (spec.width < spec.min_size || spec.height < spec.min_size)
    throw std::invalid_argument("generate_synthetic: image smaller than min shape size");

  Dataset ds;
  ds.num_det_classes = 3;
  ds.num_seg_classes = 4;
  ds.samples.reserve(static_cast<size_t>(n));

  for (int si = 0; si < n; ++si) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(si)));
    Sample s;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "syn_%06d", si);
    s.id = idbuf;
    s.width = spec.width;
    s.height = spec.height;
    s.has_mask = true;
    s.image = img::make_image(spec.width, spec.height, 3);
    s.mask = img::make_image(spec.width, spec.height, 1, 0);

    // Textured background: shaded base plus per-pixel noise.
    const int base = rng.uniform_int(90, 150);
    const double slope = rng.uniform(-0.3, 0.3);
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        const int v = base + static_cast<int>(slope * x) + rng.uniform_int(-18, 18);
        const uint8_t g = static_cast<uint8_t>(std::clamp(v, 0, 255));
        s.image.at(y, x, 0) = g;
        s.image.at(y, x, 1) = g;
        s.image.at(y, x, 2) = g;
      }

    const int want = rng.uniform_int(spec.min_shapes, spec.max_shapes);
    std::vector<RectI> placed;
    for (int k = 0; k < want; ++k) {
      RectI r{};
      bool ok = false;
      for (int attempt = 0; attempt < 30 && !ok; ++attempt) {
        const int w = rng.uniform_int(spec.min_size, std::min(spec.max_size, spec.width));
        const int h = rng.uniform_int(spec.min_size, std::min(spec.max_size, spec.height));
        r.x1 = rng.uniform_int(0, spec.width - w);
        r.y1 = rng.uniform_int(0, spec.height - h);
        r.x2 = r.x1 + w;
        r.y2 = r.y1 + h;
        ok = true;
        for (const auto& p : placed)
          if (overlaps(r, p, 2)) ok = false;
      }
      if (!ok) break;  // image stays sparser than requested
      placed.push_back(r);

      const int cls = rng.uniform_int(1, 3);
      const int apex_x = rng.uniform_int(r.x1, r.x2 - 1);
      const uint8_t* color = kPalette[rng.uniform_index(6)];
      const int jr = rng.uniform_int(-20, 20), jg = rng.uniform_int(-20, 20),
                jb = rng.uniform_int(-20, 20);

      int mnx = spec.width, mny = spec.height, mxx = -1, mxy = -1;
      for (int y = r.y1; y < r.y2; ++y)
        for (int x = r.x1; x < r.x2; ++x) {
          if (!inside_shape(cls, r, apex_x, x, y)) continue;
          s.mask.at(y, x) = static_cast<uint8_t>(cls);
          s.image.at(y, x, 0) = static_cast<uint8_t>(std::clamp(color[0] + jr, 0, 255));
          s.image.at(y, x, 1) = static_cast<uint8_t>(std::clamp(color[1] + jg, 0, 255));
          s.image.at(y, x, 2) = static_cast<uint8_t>(std::clamp(color[2] + jb, 0, 255));
          mnx = std::min(mnx, x);
          mny = std::min(mny, y);
          mxx = std::max(mxx, x);
          mxy = std::max(mxy, y);
        }
      if (mxx < 0) throw std::logic_error("generate_synthetic: shape rendered no pixels");

      Box b;
      b.x1 = static_cast<float>(mnx);
      b.y1 = static_cast<float>(mny);
      b.x2 = static_cast<float>(mxx + 1);
      b.y2 = static_cast<float>(mxy + 1);
      b.cls = cls;
      s.boxes.push_back(b);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace detseg::data
