#include "detseg/loss_ops.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

#include "detseg/loss_kernels.hpp"

namespace detseg::ops {

namespace {

NodePtr make_scalar_node(float value, std::vector<NodePtr> parents, const char* term) {
  if (!std::isfinite(value))
    throw std::runtime_error(std::string(term) + " loss is not finite");
  auto n = std::make_shared<Node>();
  n->value = Tensor({1});
  n->value.data[0] = value;
  bool any = false;
  for (const auto& p : parents)
    if (p->requires_grad) any = true;
  n->requires_grad = grad_enabled() && any;
  if (n->requires_grad) n->parents = std::move(parents);
  return n;
}

}  // namespace

Var focal_loss(const Var& cls_logits, const std::vector<int32_t>& labels, float alpha,
               float gamma, int num_pos) {
  const auto& s = cls_logits.val().shape;
  if (s.size() != 3) throw std::invalid_argument("focal_loss: logits must be [N,M,K]");
  const int rows = s[0] * s[1];
  const int K = s[2];
  if (static_cast<int>(labels.size()) != rows)
    throw std::invalid_argument("focal_loss: label count does not match logit rows");
  const float norm = static_cast<float>(std::max(1, num_pos));

  const bool want_grad = grad_enabled() && cls_logits.requires_grad();
  auto grad = want_grad ? std::make_shared<Tensor>(cls_logits.val().shape) : nullptr;
  const float sum = losses::focal_loss_sum<float>(cls_logits.val().ptr(), rows, K, labels.data(),
                                                  alpha, gamma, grad ? grad->ptr() : nullptr);

  auto node = make_scalar_node(sum / norm, {cls_logits.node()}, "focal");
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = cls_logits.node();
    node->backward_fn = [self, xn, grad, norm]() {
      if (!xn->requires_grad) return;
      const float dy = self->grad.data[0] / norm;
      float* dx = xn->grad_buf().ptr();
      for (int64_t i = 0; i < xn->value.numel(); ++i) dx[i] += dy * grad->data[i];
    };
  }
  return Var(node);
}

Var balanced_l1_loss(const Var& deltas, const std::vector<int32_t>& labels,
                     const Tensor& target_deltas, float alpha, float gamma, int num_pos) {
  const auto& s = deltas.val().shape;
  if (s.size() != 3 || s[2] != 4)
    throw std::invalid_argument("balanced_l1_loss: deltas must be [N,M,4]");
  if (!deltas.val().same_shape(target_deltas))
    throw std::invalid_argument("balanced_l1_loss: target shape mismatch");
  const int rows = s[0] * s[1];
  if (static_cast<int>(labels.size()) != rows)
    throw std::invalid_argument("balanced_l1_loss: label count does not match rows");
  const float norm = static_cast<float>(std::max(1, num_pos));

  const bool want_grad = grad_enabled() && deltas.requires_grad();
  auto grad = want_grad ? std::make_shared<Tensor>(deltas.val().shape) : nullptr;
  float sum = 0.f;
  for (int r = 0; r < rows; ++r) {
    if (labels[static_cast<size_t>(r)] < 0) continue;
    const int64_t off = static_cast<int64_t>(r) * 4;
    sum += losses::balanced_l1_sum<float>(deltas.val().ptr() + off, target_deltas.ptr() + off, 4,
                                          alpha, gamma, grad ? grad->ptr() + off : nullptr);
  }

  auto node = make_scalar_node(sum / norm, {deltas.node()}, "balanced_l1");
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = deltas.node();
    node->backward_fn = [self, xn, grad, norm]() {
      if (!xn->requires_grad) return;
      const float dy = self->grad.data[0] / norm;
      float* dx = xn->grad_buf().ptr();
      for (int64_t i = 0; i < xn->value.numel(); ++i) dx[i] += dy * grad->data[i];
    };
  }
  return Var(node);
}

Var softmax_ce_loss(const Var& logits, const IntTensor& target, int32_t ignore_label) {
  const auto& s = logits.val().shape;
  if (s.size() != 4) throw std::invalid_argument("softmax_ce_loss: logits must be [N,K,H,W]");
  if (target.shape.size() != 3 || target.shape[0] != s[0] || target.shape[1] != s[2] ||
      target.shape[2] != s[3])
    throw std::invalid_argument("softmax_ce_loss: target must be [N,H,W] matching logits");
  const int N = s[0], K = s[1];
  const int64_t HW = static_cast<int64_t>(s[2]) * s[3];

  const bool want_grad = grad_enabled() && logits.requires_grad();
  auto grad = want_grad ? std::make_shared<Tensor>(logits.val().shape) : nullptr;
  int64_t valid = 0;
  const float mean = losses::softmax_ce_mean<float>(logits.val().ptr(), target.data.data(), N, K,
                                                    HW, ignore_label,
                                                    grad ? grad->ptr() : nullptr, &valid);

  auto node = make_scalar_node(mean, {logits.node()}, "seg_ce");
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = logits.node();
    node->backward_fn = [self, xn, grad]() {
      if (!xn->requires_grad) return;
      const float dy = self->grad.data[0];
      float* dx = xn->grad_buf().ptr();
      for (int64_t i = 0; i < xn->value.numel(); ++i) dx[i] += dy * grad->data[i];
    };
  }
  return Var(node);
}

Var mse_loss(const Var& a, const Var& b) {
  if (!a.val().same_shape(b.val()))
    throw std::invalid_argument("mse_loss: shape mismatch " + a.val().shape_str() + " vs " +
                                b.val().shape_str());
  const int64_t n = a.val().numel();
  const bool want_grad = grad_enabled() && (a.requires_grad() || b.requires_grad());
  auto grad = want_grad ? std::make_shared<Tensor>(a.val().shape) : nullptr;
  const float mean =
      losses::mse_mean<float>(a.val().ptr(), b.val().ptr(), n, grad ? grad->ptr() : nullptr);

  auto node = make_scalar_node(mean, {a.node(), b.node()}, "mse");
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr an = a.node(), bn = b.node();
    node->backward_fn = [self, an, bn, grad]() {
      const float dy = self->grad.data[0];
      if (an->requires_grad) {
        float* da = an->grad_buf().ptr();
        for (int64_t i = 0; i < an->value.numel(); ++i) da[i] += dy * grad->data[i];
      }
      if (bn->requires_grad) {
        float* db = bn->grad_buf().ptr();
        for (int64_t i = 0; i < bn->value.numel(); ++i) db[i] -= dy * grad->data[i];
      }
    };
  }
  return Var(node);
}

}  // namespace detseg::ops
