#include "detseg/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace detseg::ops {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;

namespace {

NodePtr make_node(Tensor value, std::vector<NodePtr> parents) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool any = false;
  for (const auto& p : parents)
    if (p->requires_grad) any = true;
  n->requires_grad = grad_enabled() && any;
  if (n->requires_grad) n->parents = std::move(parents);
  return n;
}

void check4d(const Var& x, const char* who) {
  if (!x.defined() || x.val().ndim() != 4)
    throw std::invalid_argument(std::string(who) + ": expected 4-d input");
}

inline int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

void im2col(const float* x, int C, int H, int W, int k, int stride, int pad, float* col) {
  const int Ho = conv_out(H, k, stride, pad);
  const int Wo = conv_out(W, k, stride, pad);
  const int M = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* row = col + (static_cast<int64_t>(c) * k * k + ky * k + kx) * M;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            std::fill(row + oy * Wo, row + (oy + 1) * Wo, 0.f);
            continue;
          }
          const float* src = x + (static_cast<int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[oy * Wo + ox] = (ix < 0 || ix >= W) ? 0.f : src[ix];
          }
        }
      }
    }
  }
}

void col2im_acc(const float* col, int C, int H, int W, int k, int stride, int pad, float* dx) {
  const int Ho = conv_out(H, k, stride, pad);
  const int Wo = conv_out(W, k, stride, pad);
  const int M = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* row = col + (static_cast<int64_t>(c) * k * k + ky * k + kx) * M;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          float* dst = dx + (static_cast<int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += row[oy * Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  check4d(x, "conv2d");
  const auto& xs = x.val().shape;
  const auto& ws = w.val().shape;
  if (ws.size() != 4 || ws[1] != xs[1])
    throw std::invalid_argument("conv2d: weight/input channel mismatch (" + w.val().shape_str() +
                                " vs " + x.val().shape_str() + ")");
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int Cout = ws[0], k = ws[2];
  const int Ho = conv_out(H, k, stride, pad);
  const int Wo = conv_out(W, k, stride, pad);
  if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: output would be empty");
  const int K = C * k * k;
  const int M = Ho * Wo;

  Tensor out({N, Cout, Ho, Wo});
  Tensor col({N, K, M});
  const float* xp = x.val().ptr();
  for (int n = 0; n < N; ++n) {
    float* cn = col.ptr() + static_cast<int64_t>(n) * K * M;
    im2col(xp + static_cast<int64_t>(n) * C * H * W, C, H, W, k, stride, pad, cn);
    MapMat y(out.ptr() + static_cast<int64_t>(n) * Cout * M, Cout, M);
    MapConst wm(w.val().ptr(), Cout, K);
    MapConst cm(cn, K, M);
    y.noalias() = wm * cm;
    if (b.defined()) {
      const float* bp = b.val().ptr();
      for (int co = 0; co < Cout; ++co) y.row(co).array() += bp[co];
    }
  }

  std::vector<NodePtr> parents{x.node(), w.node()};
  if (b.defined()) parents.push_back(b.node());
  auto node = make_node(std::move(out), std::move(parents));
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = x.node(), wn = w.node(), bn = b.defined() ? b.node() : nullptr;
    auto saved_col = std::make_shared<Tensor>(std::move(col));
    node->backward_fn = [self, xn, wn, bn, saved_col, N, C, H, W, Cout, k, K, M, stride, pad]() {
      const float* dy = self->grad.ptr();
      if (wn->requires_grad) {
        MapMat dwm(wn->grad_buf().ptr(), Cout, K);
        for (int n = 0; n < N; ++n) {
          MapConst dyn(dy + static_cast<int64_t>(n) * Cout * M, Cout, M);
          MapConst cm(saved_col->ptr() + static_cast<int64_t>(n) * K * M, K, M);
          dwm.noalias() += dyn * cm.transpose();
        }
      }
      if (bn && bn->requires_grad) {
        // Summed by hand: Eigen's redux splits at SIMD-alignment boundaries,
        // so its result depends on where the heap placed this buffer.
        float* db = bn->grad_buf().ptr();
        for (int n = 0; n < N; ++n) {
          const float* dyn = dy + static_cast<int64_t>(n) * Cout * M;
          for (int co = 0; co < Cout; ++co) {
            float acc = 0.f;
            for (int i = 0; i < M; ++i) acc += dyn[static_cast<int64_t>(co) * M + i];
            db[co] += acc;
          }
        }
      }
      if (xn->requires_grad) {
        Tensor dcol({K, M});
        float* dxp = xn->grad_buf().ptr();
        for (int n = 0; n < N; ++n) {
          MapConst dyn(dy + static_cast<int64_t>(n) * Cout * M, Cout, M);
          MapConst wm(wn->value.ptr(), Cout, K);
          MapMat dcm(dcol.ptr(), K, M);
          dcm.noalias() = wm.transpose() * dyn;
          col2im_acc(dcol.ptr(), C, H, W, k, stride, pad,
                     dxp + static_cast<int64_t>(n) * C * H * W);
        }
      }
    };
  }
  return Var(node);
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps) {
  check4d(x, "group_norm");
  const auto& xs = x.val().shape;
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  if (groups < 1 || C % groups != 0)
    throw std::invalid_argument("group_norm: groups must divide channels");
  const int cpg = C / groups;
  const int64_t gsz = static_cast<int64_t>(cpg) * H * W;

  Tensor out({N, C, H, W});
  Tensor xhat({N, C, H, W});
  Tensor inv_std({N, groups});
  const float* xp = x.val().ptr();
  const float* gp = gamma.val().ptr();
  const float* bp = beta.val().ptr();
  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < groups; ++g) {
      const int64_t base = (static_cast<int64_t>(n) * C + g * cpg) * H * W;
      double mean = 0.0;
      for (int64_t i = 0; i < gsz; ++i) mean += xp[base + i];
      mean /= static_cast<double>(gsz);
      double var = 0.0;
      for (int64_t i = 0; i < gsz; ++i) {
        const double d = xp[base + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(gsz);
      const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
      inv_std.data[n * groups + g] = is;
      for (int c = 0; c < cpg; ++c) {
        const int ch = g * cpg + c;
        const int64_t off = base + static_cast<int64_t>(c) * H * W;
        for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) {
          const float xh = (xp[off + i] - static_cast<float>(mean)) * is;
          xhat.data[off + i] = xh;
          out.data[off + i] = gp[ch] * xh + bp[ch];
        }
      }
    }
  }

  auto node = make_node(std::move(out), {x.node(), gamma.node(), beta.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
    auto s_xhat = std::make_shared<Tensor>(std::move(xhat));
    auto s_istd = std::make_shared<Tensor>(std::move(inv_std));
    node->backward_fn = [self, xn, gn, bn, s_xhat, s_istd, N, C, H, W, groups, cpg, gsz]() {
      const float* dy = self->grad.ptr();
      const float* xh = s_xhat->ptr();
      if (gn->requires_grad || bn->requires_grad) {
        float* dg = gn->grad_buf().ptr();
        float* db = bn->grad_buf().ptr();
        for (int n = 0; n < N; ++n) {
          for (int ch = 0; ch < C; ++ch) {
            const int64_t off = (static_cast<int64_t>(n) * C + ch) * H * W;
            double sg = 0.0, sb = 0.0;
            for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) {
              sg += dy[off + i] * xh[off + i];
              sb += dy[off + i];
            }
            dg[ch] += static_cast<float>(sg);
            db[ch] += static_cast<float>(sb);
          }
        }
      }
      if (xn->requires_grad) {
        float* dx = xn->grad_buf().ptr();
        const float* gp = gn->value.ptr();
        for (int n = 0; n < N; ++n) {
          for (int g = 0; g < groups; ++g) {
            const int64_t base = (static_cast<int64_t>(n) * C + g * cpg) * H * W;
            const float is = s_istd->data[n * groups + g];
            double m_dxh = 0.0, m_dxh_xh = 0.0;
            for (int c = 0; c < cpg; ++c) {
              const int ch = g * cpg + c;
              const int64_t off = base + static_cast<int64_t>(c) * H * W;
              for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) {
                const double dxh = static_cast<double>(dy[off + i]) * gp[ch];
                m_dxh += dxh;
                m_dxh_xh += dxh * xh[off + i];
              }
            }
            m_dxh /= static_cast<double>(gsz);
            m_dxh_xh /= static_cast<double>(gsz);
            for (int c = 0; c < cpg; ++c) {
              const int ch = g * cpg + c;
              const int64_t off = base + static_cast<int64_t>(c) * H * W;
              for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) {
                const double dxh = static_cast<double>(dy[off + i]) * gp[ch];
                dx[off + i] += static_cast<float>(is * (dxh - m_dxh - xh[off + i] * m_dxh_xh));
              }
            }
          }
        }
      }
    };
  }
  return Var(node);
}

Var relu(const Var& x) {
  Tensor out = x.val();
  for (auto& v : out.data) v = v > 0.f ? v : 0.f;
  auto node = make_node(std::move(out), {x.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = x.node();
    node->backward_fn = [self, xn]() {
      if (!xn->requires_grad) return;
      float* dx = xn->grad_buf().ptr();
      const float* dy = self->grad.ptr();
      const float* y = self->value.ptr();
      const int64_t n = self->value.numel();
      for (int64_t i = 0; i < n; ++i)
        if (y[i] > 0.f) dx[i] += dy[i];
    };
  }
  return Var(node);
}

Var max_pool2d(const Var& x, int kernel, int stride, int pad) {
  check4d(x, "max_pool2d");
  const auto& xs = x.val().shape;
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int Ho = conv_out(H, kernel, stride, pad);
  const int Wo = conv_out(W, kernel, stride, pad);
  Tensor out({N, C, Ho, Wo});
  std::vector<int64_t> argmax(static_cast<size_t>(out.numel()));
  const float* xp = x.val().ptr();
  int64_t o = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const int64_t plane = (static_cast<int64_t>(n) * C + c) * H * W;
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox, ++o) {
          float best = -std::numeric_limits<float>::infinity();
          int64_t bi = -1;
          for (int ky = 0; ky < kernel; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              const float v = xp[plane + static_cast<int64_t>(iy) * W + ix];
              if (v > best) {
                best = v;
                bi = plane + static_cast<int64_t>(iy) * W + ix;
              }
            }
          }
          out.data[o] = best;
          argmax[static_cast<size_t>(o)] = bi;
        }
      }
    }
  }
  auto node = make_node(std::move(out), {x.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = x.node();
    auto amax = std::make_shared<std::vector<int64_t>>(std::move(argmax));
    node->backward_fn = [self, xn, amax]() {
      if (!xn->requires_grad) return;
      float* dx = xn->grad_buf().ptr();
      const float* dy = self->grad.ptr();
      for (size_t i = 0; i < amax->size(); ++i)
        if ((*amax)[i] >= 0) dx[(*amax)[i]] += dy[i];
    };
  }
  return Var(node);
}

Var add(const Var& a, const Var& b) {
  if (!a.val().same_shape(b.val()))
    throw std::invalid_argument("add: shape mismatch " + a.val().shape_str() + " vs " +
                                b.val().shape_str());
  Tensor out = a.val();
  const float* bp = b.val().ptr();
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += bp[i];
  auto node = make_node(std::move(out), {a.node(), b.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr an = a.node(), bn = b.node();
    node->backward_fn = [self, an, bn]() {
      const float* dy = self->grad.ptr();
      const int64_t n = self->value.numel();
      if (an->requires_grad) {
        float* da = an->grad_buf().ptr();
        for (int64_t i = 0; i < n; ++i) da[i] += dy[i];
      }
      if (bn->requires_grad) {
        float* db = bn->grad_buf().ptr();
        for (int64_t i = 0; i < n; ++i) db[i] += dy[i];
      }
    };
  }
  return Var(node);
}

Var add_channel_bias(const Var& x, const Var& v) {
  check4d(x, "add_channel_bias");
  const auto& xs = x.val().shape;
  const auto& vs = v.val().shape;
  if (vs.size() != 4 || vs[0] != xs[0] || vs[1] != xs[1] || vs[2] != 1 || vs[3] != 1)
    throw std::invalid_argument("add_channel_bias: bias must be [N,C,1,1]");
  const int N = xs[0], C = xs[1];
  const int64_t HW = static_cast<int64_t>(xs[2]) * xs[3];
  Tensor out = x.val();
  const float* vp = v.val().ptr();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float add = vp[n * C + c];
      float* o = out.ptr() + (static_cast<int64_t>(n) * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) o[i] += add;
    }
  auto node = make_node(std::move(out), {x.node(), v.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = x.node(), vn = v.node();
    node->backward_fn = [self, xn, vn, N, C, HW]() {
      const float* dy = self->grad.ptr();
      if (xn->requires_grad) {
        float* dx = xn->grad_buf().ptr();
        for (int64_t i = 0; i < self->value.numel(); ++i) dx[i] += dy[i];
      }
      if (vn->requires_grad) {
        float* dv = vn->grad_buf().ptr();
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            const float* d = dy + (static_cast<int64_t>(n) * C + c) * HW;
            double s = 0.0;
            for (int64_t i = 0; i < HW; ++i) s += d[i];
            dv[n * C + c] += static_cast<float>(s);
          }
      }
    };
  }
  return Var(node);
}

Var global_avg_pool(const Var& x) {
  check4d(x, "global_avg_pool");
  const auto& xs = x.val().shape;
  const int N = xs[0], C = xs[1];
  const int64_t HW = static_cast<int64_t>(xs[2]) * xs[3];
  Tensor out({N, C, 1, 1});
  const float* xp = x.val().ptr();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float* p = xp + (static_cast<int64_t>(n) * C + c) * HW;
      double s = 0.0;
      for (int64_t i = 0; i < HW; ++i) s += p[i];
      out.data[n * C + c] = static_cast<float>(s / static_cast<double>(HW));
    }
  auto node = make_node(std::move(out), {x.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = x.node();
    node->backward_fn = [self, xn, N, C, HW]() {
      if (!xn->requires_grad) return;
      float* dx = xn->grad_buf().ptr();
      const float* dy = self->grad.ptr();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const float g = dy[n * C + c] / static_cast<float>(HW);
          float* d = dx + (static_cast<int64_t>(n) * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) d[i] += g;
        }
    };
  }
  return Var(node);
}

Var upsample_nearest2x(const Var& x) {
  check4d(x, "upsample_nearest2x");
  const auto& xs = x.val().shape;
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  Tensor out({N, C, H * 2, W * 2});
  const float* xp = x.val().ptr();
  for (int nc = 0; nc < N * C; ++nc) {
    const float* src = xp + static_cast<int64_t>(nc) * H * W;
    float* dst = out.ptr() + static_cast<int64_t>(nc) * H * W * 4;
    for (int y = 0; y < 2 * H; ++y)
      for (int x2 = 0; x2 < 2 * W; ++x2) dst[y * 2 * W + x2] = src[(y / 2) * W + x2 / 2];
  }
  auto node = make_node(std::move(out), {x.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = x.node();
    node->backward_fn = [self, xn, N, C, H, W]() {
      if (!xn->requires_grad) return;
      float* dx = xn->grad_buf().ptr();
      const float* dy = self->grad.ptr();
      for (int nc = 0; nc < N * C; ++nc) {
        const float* d = dy + static_cast<int64_t>(nc) * H * W * 4;
        float* o = dx + static_cast<int64_t>(nc) * H * W;
        for (int y = 0; y < 2 * H; ++y)
          for (int x2 = 0; x2 < 2 * W; ++x2) o[(y / 2) * W + x2 / 2] += d[y * 2 * W + x2];
      }
    };
  }
  return Var(node);
}

namespace {
struct LinW {
  int i0, i1;
  float w0, w1;
};
// align_corners=false sampling weights for one axis.
std::vector<LinW> bilinear_axis(int out, int in, int factor) {
  std::vector<LinW> w(static_cast<size_t>(out));
  for (int o = 0; o < out; ++o) {
    const float s = (o + 0.5f) / static_cast<float>(factor) - 0.5f;
    int i0 = static_cast<int>(std::floor(s));
    float f = s - static_cast<float>(i0);
    int i1 = i0 + 1;
    i0 = std::clamp(i0, 0, in - 1);
    i1 = std::clamp(i1, 0, in - 1);
    w[static_cast<size_t>(o)] = {i0, i1, 1.f - f, f};
  }
  return w;
}
}  // namespace

Var upsample_bilinear(const Var& x, int factor) {
  check4d(x, "upsample_bilinear");
  if (factor < 1) throw std::invalid_argument("upsample_bilinear: factor must be >= 1");
  const auto& xs = x.val().shape;
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int Ho = H * factor, Wo = W * factor;
  const auto wy = bilinear_axis(Ho, H, factor);
  const auto wx = bilinear_axis(Wo, W, factor);
  Tensor out({N, C, Ho, Wo});
  const float* xp = x.val().ptr();
  for (int nc = 0; nc < N * C; ++nc) {
    const float* src = xp + static_cast<int64_t>(nc) * H * W;
    float* dst = out.ptr() + static_cast<int64_t>(nc) * Ho * Wo;
    for (int y = 0; y < Ho; ++y) {
      const auto& ay = wy[static_cast<size_t>(y)];
      for (int x2 = 0; x2 < Wo; ++x2) {
        const auto& ax = wx[static_cast<size_t>(x2)];
        dst[y * Wo + x2] = ay.w0 * (ax.w0 * src[ay.i0 * W + ax.i0] + ax.w1 * src[ay.i0 * W + ax.i1]) +
                           ay.w1 * (ax.w0 * src[ay.i1 * W + ax.i0] + ax.w1 * src[ay.i1 * W + ax.i1]);
      }
    }
  }
  auto node = make_node(std::move(out), {x.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = x.node();
    node->backward_fn = [self, xn, N, C, H, W, Ho, Wo, wy, wx]() {
      if (!xn->requires_grad) return;
      float* dx = xn->grad_buf().ptr();
      const float* dy = self->grad.ptr();
      for (int nc = 0; nc < N * C; ++nc) {
        const float* d = dy + static_cast<int64_t>(nc) * Ho * Wo;
        float* o = dx + static_cast<int64_t>(nc) * H * W;
        for (int y = 0; y < Ho; ++y) {
          const auto& ay = wy[static_cast<size_t>(y)];
          for (int x2 = 0; x2 < Wo; ++x2) {
            const auto& ax = wx[static_cast<size_t>(x2)];
            const float g = d[y * Wo + x2];
            o[ay.i0 * W + ax.i0] += ay.w0 * ax.w0 * g;
            o[ay.i0 * W + ax.i1] += ay.w0 * ax.w1 * g;
            o[ay.i1 * W + ax.i0] += ay.w1 * ax.w0 * g;
            o[ay.i1 * W + ax.i1] += ay.w1 * ax.w1 * g;
          }
        }
      }
    };
  }
  return Var(node);
}

Var to_anchor_major(const Var& x, int A, int K) {
  check4d(x, "to_anchor_major");
  const auto& xs = x.val().shape;
  if (xs[1] != A * K) throw std::invalid_argument("to_anchor_major: channel count != A*K");
  const int N = xs[0], H = xs[2], W = xs[3];
  Tensor out({N, H * W * A, K});
  const float* xp = x.val().ptr();
  for (int n = 0; n < N; ++n)
    for (int a = 0; a < A; ++a)
      for (int k = 0; k < K; ++k) {
        const float* src = xp + ((static_cast<int64_t>(n) * A * K + a * K + k)) * H * W;
        float* dst = out.ptr() + static_cast<int64_t>(n) * H * W * A * K;
        for (int i = 0; i < H * W; ++i) dst[(static_cast<int64_t>(i) * A + a) * K + k] = src[i];
      }
  auto node = make_node(std::move(out), {x.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = x.node();
    node->backward_fn = [self, xn, N, A, K, H, W]() {
      if (!xn->requires_grad) return;
      float* dx = xn->grad_buf().ptr();
      const float* dy = self->grad.ptr();
      for (int n = 0; n < N; ++n)
        for (int a = 0; a < A; ++a)
          for (int k = 0; k < K; ++k) {
            float* dst = dx + ((static_cast<int64_t>(n) * A * K + a * K + k)) * H * W;
            const float* src = dy + static_cast<int64_t>(n) * H * W * A * K;
            for (int i = 0; i < H * W; ++i) dst[i] += src[(static_cast<int64_t>(i) * A + a) * K + k];
          }
    };
  }
  return Var(node);
}

Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_rows: empty input");
  const int N = xs[0].val().shape[0];
  const int K = xs[0].val().shape[2];
  int Mtot = 0;
  for (const auto& v : xs) {
    if (v.val().ndim() != 3 || v.val().shape[0] != N || v.val().shape[2] != K)
      throw std::invalid_argument("concat_rows: incompatible block shapes");
    Mtot += v.val().shape[1];
  }
  Tensor out({N, Mtot, K});
  int off = 0;
  for (const auto& v : xs) {
    const int M = v.val().shape[1];
    for (int n = 0; n < N; ++n)
      std::copy_n(v.val().ptr() + static_cast<int64_t>(n) * M * K, static_cast<int64_t>(M) * K,
                  out.ptr() + (static_cast<int64_t>(n) * Mtot + off) * K);
    off += M;
  }
  std::vector<NodePtr> parents;
  for (const auto& v : xs) parents.push_back(v.node());
  auto node = make_node(std::move(out), parents);
  if (node->requires_grad) {
    Node* self = node.get();
    node->backward_fn = [self, parents, N, K, Mtot]() {
      const float* dy = self->grad.ptr();
      int off = 0;
      for (const auto& p : parents) {
        const int M = p->value.shape[1];
        if (p->requires_grad) {
          float* dp = p->grad_buf().ptr();
          for (int n = 0; n < N; ++n) {
            const float* src = dy + (static_cast<int64_t>(n) * Mtot + off) * K;
            float* dst = dp + static_cast<int64_t>(n) * M * K;
            for (int64_t i = 0; i < static_cast<int64_t>(M) * K; ++i) dst[i] += src[i];
          }
        }
        off += M;
      }
    };
  }
  return Var(node);
}

Var flatten_concat(const std::vector<Var>& levels) {
  if (levels.empty()) throw std::invalid_argument("flatten_concat: no levels");
  const int N = levels[0].val().shape[0];
  const int C = levels[0].val().shape[1];
  int64_t Mtot = 0;
  for (const auto& l : levels) {
    if (l.val().ndim() != 4 || l.val().shape[0] != N)
      throw std::invalid_argument("flatten_concat: incompatible level shapes");
    if (l.val().shape[1] != C)
      throw std::invalid_argument("flatten_concat: mixed channel counts across levels");
    Mtot += static_cast<int64_t>(l.val().shape[2]) * l.val().shape[3];
  }
  Tensor out({N, C, static_cast<int>(Mtot)});
  int64_t off = 0;
  for (const auto& l : levels) {
    const int64_t hw = static_cast<int64_t>(l.val().shape[2]) * l.val().shape[3];
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        std::copy_n(l.val().ptr() + (static_cast<int64_t>(n) * C + c) * hw, hw,
                    out.ptr() + (static_cast<int64_t>(n) * C + c) * Mtot + off);
    off += hw;
  }
  std::vector<NodePtr> parents;
  for (const auto& l : levels) parents.push_back(l.node());
  auto node = make_node(std::move(out), parents);
  if (node->requires_grad) {
    Node* self = node.get();
    node->backward_fn = [self, parents, N, C, Mtot]() {
      const float* dy = self->grad.ptr();
      int64_t off = 0;
      for (const auto& p : parents) {
        const int64_t hw = static_cast<int64_t>(p->value.shape[2]) * p->value.shape[3];
        if (p->requires_grad) {
          float* dp = p->grad_buf().ptr();
          for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
              const float* src = dy + (static_cast<int64_t>(n) * C + c) * Mtot + off;
              float* dst = dp + (static_cast<int64_t>(n) * C + c) * hw;
              for (int64_t i = 0; i < hw; ++i) dst[i] += src[i];
            }
        }
        off += hw;
      }
    };
  }
  return Var(node);
}

Var project_columns(const Var& x, const Var& w, const Var& b) {
  if (x.val().ndim() != 3) throw std::invalid_argument("project_columns: input must be [N,C,M]");
  const int N = x.val().shape[0], Cin = x.val().shape[1], M = x.val().shape[2];
  const int Cout = w.val().shape[0];
  if (w.val().ndim() != 2 || w.val().shape[1] != Cin)
    throw std::invalid_argument("project_columns: weight shape mismatch");
  Tensor out({N, Cout, M});
  for (int n = 0; n < N; ++n) {
    MapConst xm(x.val().ptr() + static_cast<int64_t>(n) * Cin * M, Cin, M);
    MapConst wm(w.val().ptr(), Cout, Cin);
    MapMat ym(out.ptr() + static_cast<int64_t>(n) * Cout * M, Cout, M);
    ym.noalias() = wm * xm;
    if (b.defined())
      for (int c = 0; c < Cout; ++c) ym.row(c).array() += b.val().data[static_cast<size_t>(c)];
  }
  std::vector<NodePtr> parents{x.node(), w.node()};
  if (b.defined()) parents.push_back(b.node());
  auto node = make_node(std::move(out), std::move(parents));
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = x.node(), wn = w.node(), bn = b.defined() ? b.node() : nullptr;
    node->backward_fn = [self, xn, wn, bn, N, Cin, Cout, M]() {
      const float* dy = self->grad.ptr();
      if (wn->requires_grad) {
        MapMat dwm(wn->grad_buf().ptr(), Cout, Cin);
        for (int n = 0; n < N; ++n) {
          MapConst dyn(dy + static_cast<int64_t>(n) * Cout * M, Cout, M);
          MapConst xm(xn->value.ptr() + static_cast<int64_t>(n) * Cin * M, Cin, M);
          dwm.noalias() += dyn * xm.transpose();
        }
      }
      if (bn && bn->requires_grad) {
        // Same address-independent summation as the conv bias above.
        float* db = bn->grad_buf().ptr();
        for (int n = 0; n < N; ++n) {
          const float* dyn = dy + static_cast<int64_t>(n) * Cout * M;
          for (int c = 0; c < Cout; ++c) {
            float acc = 0.f;
            for (int i = 0; i < M; ++i) acc += dyn[static_cast<int64_t>(c) * M + i];
            db[c] += acc;
          }
        }
      }
      if (xn->requires_grad) {
        MapConst wm(wn->value.ptr(), Cout, Cin);
        for (int n = 0; n < N; ++n) {
          MapConst dyn(dy + static_cast<int64_t>(n) * Cout * M, Cout, M);
          MapMat dxm(xn->grad_buf().ptr() + static_cast<int64_t>(n) * Cin * M, Cin, M);
          dxm.noalias() += wm.transpose() * dyn;
        }
      }
    };
  }
  return Var(node);
}

Var select_scalar(const Var& x, int64_t flat_index) {
  if (flat_index < 0 || flat_index >= x.val().numel())
    throw std::out_of_range("select_scalar: index out of range");
  Tensor out({1});
  out.data[0] = x.val().data[static_cast<size_t>(flat_index)];
  auto node = make_node(std::move(out), {x.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = x.node();
    node->backward_fn = [self, xn, flat_index]() {
      if (xn->requires_grad) xn->grad_buf().data[static_cast<size_t>(flat_index)] += self->grad.data[0];
    };
  }
  return Var(node);
}

Var channel_sum(const Var& x, int channel) {
  check4d(x, "channel_sum");
  const auto& xs = x.val().shape;
  if (channel < 0 || channel >= xs[1]) throw std::out_of_range("channel_sum: bad channel");
  const int N = xs[0], C = xs[1];
  const int64_t HW = static_cast<int64_t>(xs[2]) * xs[3];
  Tensor out({1});
  double s = 0.0;
  for (int n = 0; n < N; ++n) {
    const float* p = x.val().ptr() + (static_cast<int64_t>(n) * C + channel) * HW;
    for (int64_t i = 0; i < HW; ++i) s += p[i];
  }
  out.data[0] = static_cast<float>(s);
  auto node = make_node(std::move(out), {x.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = x.node();
    node->backward_fn = [self, xn, N, C, HW, channel]() {
      if (!xn->requires_grad) return;
      const float g = self->grad.data[0];
      for (int n = 0; n < N; ++n) {
        float* d = xn->grad_buf().ptr() + (static_cast<int64_t>(n) * C + channel) * HW;
        for (int64_t i = 0; i < HW; ++i) d[i] += g;
      }
    };
  }
  return Var(node);
}

Var add_scalars(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("add_scalars: empty input");
  Tensor out({1});
  double s = 0.0;
  for (const auto& v : xs) {
    if (v.val().numel() != 1) throw std::invalid_argument("add_scalars: non-scalar term");
    s += v.val().data[0];
  }
  out.data[0] = static_cast<float>(s);
  std::vector<NodePtr> parents;
  for (const auto& v : xs) parents.push_back(v.node());
  auto node = make_node(std::move(out), parents);
  if (node->requires_grad) {
    Node* self = node.get();
    node->backward_fn = [self, parents]() {
      for (const auto& p : parents)
        if (p->requires_grad) p->grad_buf().data[0] += self->grad.data[0];
    };
  }
  return Var(node);
}

Var crop_spatial(const Var& x, int h, int w) {
  check4d(x, "crop_spatial");
  const auto& xs = x.val().shape;
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  if (h < 1 || w < 1 || h > H || w > W)
    throw std::invalid_argument("crop_spatial: window exceeds input");
  if (h == H && w == W) return x;
  Tensor out({N, C, h, w});
  const float* xp = x.val().ptr();
  for (int nc = 0; nc < N * C; ++nc)
    for (int y = 0; y < h; ++y)
      std::copy_n(xp + (static_cast<int64_t>(nc) * H + y) * W, w,
                  out.ptr() + (static_cast<int64_t>(nc) * h + y) * w);
  auto node = make_node(std::move(out), {x.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = x.node();
    node->backward_fn = [self, xn, N, C, H, W, h, w]() {
      if (!xn->requires_grad) return;
      float* dx = xn->grad_buf().ptr();
      const float* dy = self->grad.ptr();
      for (int nc = 0; nc < N * C; ++nc)
        for (int y = 0; y < h; ++y)
          for (int x2 = 0; x2 < w; ++x2)
            dx[(static_cast<int64_t>(nc) * H + y) * W + x2] +=
                dy[(static_cast<int64_t>(nc) * h + y) * w + x2];
    };
  }
  return Var(node);
}

Var scale(const Var& x, float s) {
  Tensor out = x.val();
  for (auto& v : out.data) v *= s;
  auto node = make_node(std::move(out), {x.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    NodePtr xn = x.node();
    node->backward_fn = [self, xn, s]() {
      if (!xn->requires_grad) return;
      float* dx = xn->grad_buf().ptr();
      const float* dy = self->grad.ptr();
      for (int64_t i = 0; i < self->value.numel(); ++i) dx[i] += s * dy[i];
    };
  }
  return Var(node);
}

}  // namespace detseg::ops
