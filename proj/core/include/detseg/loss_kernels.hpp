#pragma once

// Raw loss kernels, templated on the scalar type so tests can run them in
// double precision. The autograd wrappers in loss_ops.cpp instantiate float.

#include <cmath>
#include <cstdint>
#include <limits>

namespace detseg::losses {

template <typename T>
inline T softplus(T z) {
  return std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
}

template <typename T>
inline T sigmoid(T z) {
  if (z >= 0) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

// Sigmoid focal loss summed over all non-ignored (anchor, class) cells.
// logits: row-major [M, K]. labels: per row, -2 = ignore, -1 = negative,
// c in [0, K) = positive with one-hot target at c. grad (same layout as
// logits) receives d(sum)/d(logit) when non-null; caller applies any
// normalization to both the sum and the gradient.
template <typename T>
T focal_loss_sum(const T* logits, int M, int K, const int32_t* labels, T alpha, T gamma,
                 T* grad) {
  T total = 0;
  for (int m = 0; m < M; ++m) {
    if (labels[m] == -2) {
      if (grad)
        for (int k = 0; k < K; ++k) grad[static_cast<int64_t>(m) * K + k] = 0;
      continue;
    }
    for (int k = 0; k < K; ++k) {
      const int64_t i = static_cast<int64_t>(m) * K + k;
      const T x = logits[i];
      const T p = sigmoid(x);
      const T logp = -softplus(-x);
      const T log1mp = -softplus(x);
      if (labels[m] == k) {
        const T om = T(1) - p;
        total += -alpha * std::pow(om, gamma) * logp;
        if (grad) grad[i] = alpha * std::pow(om, gamma) * (gamma * p * logp - om);
      } else {
        total += -(T(1) - alpha) * std::pow(p, gamma) * log1mp;
        if (grad)
          grad[i] = (T(1) - alpha) * std::pow(p, gamma) * (p - gamma * (T(1) - p) * log1mp);
      }
    }
  }
  return total;
}

// Balanced L1, summed over n residuals x = pred - target. The inner branch
// joins the outer linear branch with a continuous value and first derivative
// when b = e^(gamma/alpha) - 1.
template <typename T>
T balanced_l1_sum(const T* pred, const T* target, int64_t n, T alpha, T gamma, T* grad) {
  const T b = std::expm1(gamma / alpha);
  const T C = (alpha / b) * (b + 1) * std::log1p(b) - alpha - gamma;
  T total = 0;
  for (int64_t i = 0; i < n; ++i) {
    const T x = pred[i] - target[i];
    const T ax = std::abs(x);
    if (ax < T(1)) {
      total += (alpha / b) * (b * ax + 1) * std::log1p(b * ax) - alpha * ax;
      if (grad) grad[i] = (x < 0 ? -1 : 1) * alpha * std::log1p(b * ax);
    } else {
      total += gamma * ax + C;
      if (grad) grad[i] = (x < 0 ? -gamma : gamma);
    }
  }
  return total;
}

// Softmax cross-entropy averaged over pixels whose target differs from
// ignore_label. logits: [N, K, HW] row-major; target: [N, HW]. grad receives
// d(mean)/d(logit) when non-null. Returns 0 with zero grad if every pixel is
// ignored.
template <typename T>
T softmax_ce_mean(const T* logits, const int32_t* target, int N, int K, int64_t HW,
                  int32_t ignore_label, T* grad, int64_t* valid_out) {
  int64_t valid = 0;
  for (int64_t i = 0; i < static_cast<int64_t>(N) * HW; ++i)
    if (target[i] != ignore_label) ++valid;
  if (valid_out) *valid_out = valid;
  if (grad) {
    const int64_t total = static_cast<int64_t>(N) * K * HW;
    for (int64_t i = 0; i < total; ++i) grad[i] = 0;
  }
  if (valid == 0) return 0;

  T total = 0;
  for (int n = 0; n < N; ++n) {
    for (int64_t p = 0; p < HW; ++p) {
      const int32_t t = target[static_cast<int64_t>(n) * HW + p];
      if (t == ignore_label) continue;
      const int64_t base = static_cast<int64_t>(n) * K * HW + p;
      T mx = -std::numeric_limits<T>::infinity();
      for (int k = 0; k < K; ++k) mx = std::max(mx, logits[base + static_cast<int64_t>(k) * HW]);
      T z = 0;
      for (int k = 0; k < K; ++k) z += std::exp(logits[base + static_cast<int64_t>(k) * HW] - mx);
      const T logz = std::log(z) + mx;
      total += logz - logits[base + static_cast<int64_t>(t) * HW];
      if (grad) {
        for (int k = 0; k < K; ++k) {
          const int64_t i = base + static_cast<int64_t>(k) * HW;
          T g = std::exp(logits[i] - logz);
          if (k == t) g -= T(1);
          grad[i] = g / static_cast<T>(valid);
        }
      }
    }
  }
  return total / static_cast<T>(valid);
}

// Mean squared error over the full tensor. grad_a receives d(mean)/da when
// non-null; the gradient with respect to b is its negation.
template <typename T>
T mse_mean(const T* a, const T* b, int64_t n, T* grad_a) {
  T total = 0;
  for (int64_t i = 0; i < n; ++i) {
    const T d = a[i] - b[i];
    total += d * d;
    if (grad_a) grad_a[i] = T(2) * d / static_cast<T>(n);
  }
  return total / static_cast<T>(n);
}

}  // namespace detseg::losses
