#include "detseg/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace detseg {

namespace {
bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

void backward(const Var& root) {
  if (!root.defined()) throw std::invalid_argument("backward: undefined root");
  if (root.val().numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!root.node()->requires_grad) return;  // nothing reaches a trainable leaf

  // Iterative post-order DFS over grad-requiring ancestry.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buf().fill(1.f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn();
  }
}

Var ParamStore::create(const std::string& name, std::vector<int> shape) {
  if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  auto n = std::make_shared<Node>();
  n->value = Tensor::zeros(std::move(shape));
  n->requires_grad = true;
  n->is_leaf = true;
  n->name = name;
  index_[name] = items_.size();
  items_.emplace_back(name, n);
  return Var(n);
}

Var ParamStore::create(const std::string& name, std::vector<int> shape,
                       const std::vector<float>& init) {
  Var v = create(name, std::move(shape));
  if (static_cast<int64_t>(init.size()) != v.val().numel())
    throw std::invalid_argument("ParamStore: init size mismatch for " + name);
  v.val().data = init;
  return v;
}

Var ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
  return Var(items_[it->second].second);
}

int64_t ParamStore::count_scalars() const {
  int64_t n = 0;
  for (const auto& [name, node] : items_) n += node->value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, node] : items_) node->zero_grad();
}

void ParamStore::set_trainable(const std::string& prefix, bool trainable) {
  bool any = false;
  for (auto& [name, node] : items_) {
    if (name.rfind(prefix, 0) == 0) {
      node->requires_grad = trainable;
      any = true;
    }
  }
  if (!any) throw std::invalid_argument("ParamStore: no parameters under prefix " + prefix);
}

static uint64_t fnv1a(const void* bytes, size_t n, uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

uint64_t ParamStore::content_hash() const { return content_hash(""); }

uint64_t ParamStore::content_hash(const std::string& prefix) const {
  uint64_t h = 14695981039346656037ULL;
  for (const auto& [name, node] : items_) {
    if (name.rfind(prefix, 0) != 0) continue;
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(node->value.data.data(), node->value.data.size() * sizeof(float), h);
  }
  return h;
}

void kaiming_normal_(Tensor& w, int fan_in, Rng& rng, double gain) {
  const double std = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& x : w.data) x = static_cast<float>(rng.normal() * std);
}

void constant_(Tensor& w, float v) { w.fill(v); }

}  // namespace detseg
