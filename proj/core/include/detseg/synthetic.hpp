#pragma once

#include <cstdint>

#include "detseg/dataio.hpp"

namespace detseg::data {

// Shape classes: 1 = rectangle, 2 = ellipse, 3 = triangle.
struct SyntheticSpec {
  int width = 64;
  int height = 64;
  int min_shapes = 1;
  int max_shapes = 4;
  int min_size = 8;   // smallest box side, px
  int max_size = 28;  // largest box side, px
};

// Every sample carries both boxes and a mask. Instances never overlap, and
// each box annotation equals the bounding box of the instance's rendered mask
// pixels (inclusive-exclusive). Byte-identical output for equal (spec, seed).
Dataset generate_synthetic(int n, const SyntheticSpec& spec, uint64_t seed);

}  // namespace detseg::data
