#pragma once

#include <vector>

#include "detseg/autograd.hpp"
#include "detseg/tensor.hpp"

namespace detseg::ops {

// All ops take/return NCHW Vars unless noted. Backward closures are recorded
// only while grad_enabled() and some input requires grad.

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps = 1e-5f);
Var relu(const Var& x);
Var max_pool2d(const Var& x, int kernel, int stride, int pad);
Var add(const Var& a, const Var& b);
// x: [N,C,H,W] + v: [N,C,1,1] broadcast over spatial dims.
Var add_channel_bias(const Var& x, const Var& v);
Var global_avg_pool(const Var& x);  // -> [N,C,1,1]
Var upsample_nearest2x(const Var& x);
Var upsample_bilinear(const Var& x, int factor);  // align_corners=false

// [N, A*K, H, W] -> [N, H*W*A, K]; anchor index runs (row, col, anchor).
Var to_anchor_major(const Var& x, int A, int K);
// Concat [N, M_i, K] blocks along dim 1.
Var concat_rows(const std::vector<Var>& xs);
// Concat [N, C, H_i, W_i] levels to [N, C, M] along flattened spatial dim.
Var flatten_concat(const std::vector<Var>& levels);
// Per-column linear map: out[n] = W (Cout x Cin) * x[n] + b, x: [N, Cin, M].
Var project_columns(const Var& x, const Var& w, const Var& b);

// Scalar extraction (grad-cam targets).
Var select_scalar(const Var& x, int64_t flat_index);
Var channel_sum(const Var& x, int channel);  // sum over batch and spatial at one channel

// Scalar utilities.
Var add_scalars(const std::vector<Var>& xs);
Var scale(const Var& x, float s);

// Keeps the top-left h x w window of each plane (crops padded logits back).
Var crop_spatial(const Var& x, int h, int w);

}  // namespace detseg::ops
