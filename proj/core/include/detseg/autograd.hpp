#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "detseg/rng.hpp"
#include "detseg/tensor.hpp"

namespace detseg {

// Reverse-mode autodiff over a dynamically recorded graph. Every op builds a
// Node whose backward_fn reads this node's grad and accumulates into the
// parents'. Leaf nodes are parameters; their grads persist across backward
// calls until zero_grad, which is exactly the accumulation contract the
// multi-task iteration loop relies on.
struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  bool is_leaf = false;
  std::string name;  // set for parameters
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;

  Tensor& grad_buf() {
    if (grad.data.empty()) grad = Tensor::zeros(value.shape);
    return grad;
  }
  // Releases the buffer instead of filling with zeros so callers can tell
  // whether a later backward pass actually reached this node.
  void zero_grad() { grad = Tensor{}; }
};

using NodePtr = std::shared_ptr<Node>;

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : n_(std::move(n)) {}
  explicit Var(Tensor t) : n_(std::make_shared<Node>()) { n_->value = std::move(t); }

  bool defined() const { return static_cast<bool>(n_); }
  const Tensor& val() const { return n_->value; }
  Tensor& val() { return n_->value; }
  Tensor& grad() { return n_->grad_buf(); }
  const NodePtr& node() const { return n_; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  void set_requires_grad(bool rg) {
    n_->requires_grad = rg;
    n_->is_leaf = true;
  }

 private:
  NodePtr n_;
};

// Global (single-threaded) grad-recording switch.
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
  NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(prev_); }

 private:
  bool prev_;
};

// Runs reverse-mode accumulation from a scalar root. Leaf grads accumulate;
// interior grads live as long as the caller keeps the nodes alive (grad-cam
// reads them right after).
void backward(const Var& root);

// Named parameter registry. Insertion order is the canonical order for
// checkpoints, optimizer state, and global-norm clipping, so results are
// reproducible run to run.
class ParamStore {
 public:
  Var create(const std::string& name, std::vector<int> shape);
  Var create(const std::string& name, std::vector<int> shape, const std::vector<float>& init);
  Var get(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<std::pair<std::string, NodePtr>>& items() const { return items_; }
  size_t size() const { return items_.size(); }

  int64_t count_scalars() const;  // every learnable scalar, frozen or not
  void zero_grad();
  void set_trainable(const std::string& prefix, bool trainable);

  // FNV-1a over raw parameter bytes in store order; used by the frozen-part
  // and head-isolation contracts.
  uint64_t content_hash() const;
  uint64_t content_hash(const std::string& prefix) const;

 private:
  std::vector<std::pair<std::string, NodePtr>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// Initializers.
void kaiming_normal_(Tensor& w, int fan_in, Rng& rng, double gain = 1.0);
void constant_(Tensor& w, float v);

}  // namespace detseg
