#pragma once

// Autograd-wrapped loss terms. Every wrapper returns a scalar Var and throws
// if the value comes out NaN or infinite, naming the offending term.

#include <cstdint>
#include <vector>

#include "detseg/autograd.hpp"
#include "detseg/tensor.hpp"

namespace detseg::ops {

// cls_logits: [N, M, K] anchor-major rows. labels has one entry per row
// (n-major): -2 ignore, -1 negative, c in [0, K) positive class. The summed
// loss is divided by max(1, num_pos).
Var focal_loss(const Var& cls_logits, const std::vector<int32_t>& labels, float alpha,
               float gamma, int num_pos);

// deltas/target_deltas: [N, M, 4]. Only rows whose label is >= 0 contribute;
// the sum over their four coordinates is divided by max(1, num_pos).
Var balanced_l1_loss(const Var& deltas, const std::vector<int32_t>& labels,
                     const Tensor& target_deltas, float alpha, float gamma, int num_pos);

// logits: [N, K, H, W]; target: [N, H, W] with ignore_label skipped. Mean
// over valid pixels.
Var softmax_ce_loss(const Var& logits, const IntTensor& target, int32_t ignore_label);

// Mean squared error over the whole tensor; shapes must match exactly.
Var mse_loss(const Var& a, const Var& b);

}  // namespace detseg::ops
