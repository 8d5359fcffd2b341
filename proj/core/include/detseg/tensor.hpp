#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace detseg {

// Dense row-major float tensor. Images and feature maps are NCHW.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) { data.assign(numel_of(shape), 0.f); }
  Tensor(std::vector<int> s, float fill) : shape(std::move(s)) { data.assign(numel_of(shape), fill); }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, float v) { return Tensor(std::move(s), v); }
  static Tensor from(std::vector<int> s, std::vector<float> d) {
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(d);
    if (static_cast<int64_t>(t.data.size()) != numel_of(t.shape))
      throw std::invalid_argument("Tensor::from: data size does not match shape");
    return t;
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }

  // 4-d accessor for NCHW tensors; bounds unchecked in release builds.
  float& at4(int n, int c, int h, int w) {
    return data[((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  float at4(int n, int c, int h, int w) const {
    return data[((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  void fill(float v) { std::fill(data.begin(), data.end(), v); }

  std::string shape_str() const;
};

// Integer label tensor (segmentation masks, anchor labels).
struct IntTensor {
  std::vector<int> shape;
  std::vector<int32_t> data;

  IntTensor() = default;
  explicit IntTensor(std::vector<int> s, int32_t fill = 0) : shape(std::move(s)) {
    data.assign(Tensor::numel_of(shape), fill);
  }
  int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

}  // namespace detseg
