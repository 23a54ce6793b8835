#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace treefix {

// Dense trainable tensor (row-major) with a gradient accumulator.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;
  std::vector<double> g;

  Tensor() = default;
  Tensor(int r, int c) { resize(r, c); }

  void resize(int r, int c) {
    rows = r;
    cols = c;
    v.assign(static_cast<size_t>(r) * c, 0.0);
    g.assign(v.size(), 0.0);
  }

  int count() const { return rows * cols; }
  double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
  void zero_grad() { std::fill(g.begin(), g.end(), 0.0); }
};

// Eager reverse-mode tape over small dense vectors. Nodes live in a slot
// arena that is reused across reset() calls, so steady-state forward passes
// allocate almost nothing. Construction order is topological order, which
// makes backward a single reverse sweep.
class Tape {
 public:
  struct Ref {
    int i = -1;
    bool valid() const { return i >= 0; }
  };

  void reset() { n_active_ = 0; }

  const std::vector<double>& val(Ref r) const { return nodes_[r.i].val; }
  double scalar(Ref r) const { return nodes_[r.i].val[0]; }
  int size(Ref r) const { return static_cast<int>(nodes_[r.i].val.size()); }

  Ref input(std::span<const double> x) {
    int i = alloc(OpK::Input, static_cast<int>(x.size()));
    std::copy(x.begin(), x.end(), nodes_[i].val.begin());
    return {i};
  }

  Ref constant(double x) {
    int i = alloc(OpK::Input, 1);
    nodes_[i].val[0] = x;
    return {i};
  }

  Ref zeros(int n) { return {alloc(OpK::Input, n)}; }

  // Trainable row of a tensor; backward accumulates into t.g.
  Ref row(Tensor& t, int r) {
    int i = alloc(OpK::Row, t.cols);
    Node& nd = nodes_[i];
    nd.t = &t;
    nd.idx = r;
    const double* src = t.v.data() + static_cast<size_t>(r) * t.cols;
    std::copy(src, src + t.cols, nd.val.begin());
    return {i};
  }

  Ref matvec(Tensor& w, Ref x) {
    assert(w.cols == size(x));
    int i = alloc(OpK::MatVec, w.rows, x);
    Node& nd = nodes_[i];
    nd.t = &w;
    const std::vector<double>& xv = nodes_[x.i].val;
    for (int r = 0; r < w.rows; ++r) {
      const double* wr = w.v.data() + static_cast<size_t>(r) * w.cols;
      double s = 0.0;
      for (int c = 0; c < w.cols; ++c) s += wr[c] * xv[c];
      nd.val[r] = s;
    }
    return {i};
  }

  Ref add(Ref a, Ref b) {
    assert(size(a) == size(b));
    int i = alloc(OpK::Add, size(a), a, b);
    const auto& av = nodes_[a.i].val;
    const auto& bv = nodes_[b.i].val;
    auto& y = nodes_[i].val;
    for (size_t k = 0; k < y.size(); ++k) y[k] = av[k] + bv[k];
    return {i};
  }

  Ref mul(Ref a, Ref b) {
    assert(size(a) == size(b));
    int i = alloc(OpK::Mul, size(a), a, b);
    const auto& av = nodes_[a.i].val;
    const auto& bv = nodes_[b.i].val;
    auto& y = nodes_[i].val;
    for (size_t k = 0; k < y.size(); ++k) y[k] = av[k] * bv[k];
    return {i};
  }

  Ref one_minus(Ref a) {
    int i = alloc(OpK::OneMinus, size(a), a);
    const auto& av = nodes_[a.i].val;
    auto& y = nodes_[i].val;
    for (size_t k = 0; k < y.size(); ++k) y[k] = 1.0 - av[k];
    return {i};
  }

  Ref tanh_(Ref a) {
    int i = alloc(OpK::Tanh, size(a), a);
    const auto& av = nodes_[a.i].val;
    auto& y = nodes_[i].val;
    for (size_t k = 0; k < y.size(); ++k) y[k] = std::tanh(av[k]);
    return {i};
  }

  Ref sigmoid_(Ref a) {
    int i = alloc(OpK::Sigmoid, size(a), a);
    const auto& av = nodes_[a.i].val;
    auto& y = nodes_[i].val;
    for (size_t k = 0; k < y.size(); ++k) y[k] = 1.0 / (1.0 + std::exp(-av[k]));
    return {i};
  }

  Ref scale(Ref a, double c) {
    int i = alloc(OpK::Scale, size(a), a);
    nodes_[i].c = c;
    const auto& av = nodes_[a.i].val;
    auto& y = nodes_[i].val;
    for (size_t k = 0; k < y.size(); ++k) y[k] = c * av[k];
    return {i};
  }

  Ref concat(std::initializer_list<Ref> parts) {
    int total = 0;
    for (Ref p : parts) total += size(p);
    int i = alloc(OpK::Concat, total);
    Node& nd = nodes_[i];
    nd.multi.assign(parts.begin(), parts.end());
    int off = 0;
    for (Ref p : parts) {
      const auto& pv = nodes_[p.i].val;
      std::copy(pv.begin(), pv.end(), nd.val.begin() + off);
      off += static_cast<int>(pv.size());
    }
    return {i};
  }

  // Scalar product with a trainable vector tensor (rows x 1 or 1 x cols).
  Ref dot(Tensor& v, Ref a) {
    assert(v.count() == size(a));
    int i = alloc(OpK::Dot, 1, a);
    Node& nd = nodes_[i];
    nd.t = &v;
    const auto& av = nodes_[a.i].val;
    double s = 0.0;
    for (size_t k = 0; k < av.size(); ++k) s += v.v[k] * av[k];
    nd.val[0] = s;
    return {i};
  }

  Ref stack(std::span<const Ref> scalars) {
    int i = alloc(OpK::Stack, static_cast<int>(scalars.size()));
    Node& nd = nodes_[i];
    nd.multi.assign(scalars.begin(), scalars.end());
    for (size_t k = 0; k < scalars.size(); ++k) nd.val[k] = nodes_[scalars[k].i].val[0];
    return {i};
  }

  Ref softmax_(Ref a) {
    int i = alloc(OpK::Softmax, size(a), a);
    const auto& av = nodes_[a.i].val;
    auto& y = nodes_[i].val;
    double m = av[0];
    for (double x : av) m = std::max(m, x);
    double z = 0.0;
    for (size_t k = 0; k < av.size(); ++k) {
      y[k] = std::exp(av[k] - m);
      z += y[k];
    }
    for (auto& x : y) x /= z;
    return {i};
  }

  // Log-softmax over unmasked entries; masked entries get -inf surrogate.
  Ref masked_log_softmax(Ref a, const std::vector<char>& mask) {
    assert(static_cast<int>(mask.size()) == size(a));
    int i = alloc(OpK::MaskedLogSoftmax, size(a), a);
    Node& nd = nodes_[i];
    nd.mask = mask;
    const auto& av = nodes_[a.i].val;
    auto& y = nodes_[i].val;
    double m = -1e300;
    for (size_t k = 0; k < av.size(); ++k)
      if (mask[k]) m = std::max(m, av[k]);
    double z = 0.0;
    for (size_t k = 0; k < av.size(); ++k)
      if (mask[k]) z += std::exp(av[k] - m);
    const double lse = m + std::log(z);
    for (size_t k = 0; k < av.size(); ++k) y[k] = mask[k] ? av[k] - lse : -1e300;
    return {i};
  }

  // sum_i w[i] * xs[i]; w is a weight vector node, xs are same-size vectors.
  Ref weighted_sum(Ref w, std::span<const Ref> xs) {
    assert(size(w) == static_cast<int>(xs.size()));
    const int d = size(xs[0]);
    int i = alloc(OpK::WeightedSum, d, w);
    Node& nd = nodes_[i];
    nd.multi.assign(xs.begin(), xs.end());
    const auto& wv = nodes_[w.i].val;
    auto& y = nodes_[i].val;
    for (size_t k = 0; k < xs.size(); ++k) {
      const auto& xv = nodes_[xs[k].i].val;
      for (int c = 0; c < d; ++c) y[c] += wv[k] * xv[c];
    }
    return {i};
  }

  Ref pick(Ref a, int idx) {
    assert(idx >= 0 && idx < size(a));
    int i = alloc(OpK::Pick, 1, a);
    nodes_[i].idx = idx;
    nodes_[i].val[0] = nodes_[a.i].val[idx];
    return {i};
  }

  // Seeds d(loss)/d(loss)=1 and sweeps the arena in reverse construction
  // order, accumulating into node grads and tensor grads.
  void backward(Ref loss) {
    assert(size(loss) == 1);
    for (int i = 0; i < n_active_; ++i) {
      auto& g = nodes_[i].grad;
      g.assign(nodes_[i].val.size(), 0.0);
    }
    nodes_[loss.i].grad[0] = 1.0;

    for (int i = loss.i; i >= 0; --i) {
      Node& nd = nodes_[i];
      const auto& gy = nd.grad;
      bool live = false;
      for (double g : gy)
        if (g != 0.0) {
          live = true;
          break;
        }
      if (!live) continue;

      switch (nd.op) {
        case OpK::Input:
          break;
        case OpK::Row: {
          double* dst = nd.t->g.data() + static_cast<size_t>(nd.idx) * nd.t->cols;
          for (size_t k = 0; k < gy.size(); ++k) dst[k] += gy[k];
          break;
        }
        case OpK::MatVec: {
          Tensor& w = *nd.t;
          const auto& xv = nodes_[nd.a].val;
          auto& gx = nodes_[nd.a].grad;
          for (int r = 0; r < w.rows; ++r) {
            const double gr = gy[r];
            if (gr == 0.0) continue;
            double* wgr = w.g.data() + static_cast<size_t>(r) * w.cols;
            const double* wvr = w.v.data() + static_cast<size_t>(r) * w.cols;
            for (int c = 0; c < w.cols; ++c) {
              wgr[c] += gr * xv[c];
              gx[c] += gr * wvr[c];
            }
          }
          break;
        }
        case OpK::Add: {
          auto& ga = nodes_[nd.a].grad;
          auto& gb = nodes_[nd.b].grad;
          for (size_t k = 0; k < gy.size(); ++k) {
            ga[k] += gy[k];
            gb[k] += gy[k];
          }
          break;
        }
        case OpK::Mul: {
          auto& ga = nodes_[nd.a].grad;
          auto& gb = nodes_[nd.b].grad;
          const auto& av = nodes_[nd.a].val;
          const auto& bv = nodes_[nd.b].val;
          for (size_t k = 0; k < gy.size(); ++k) {
            ga[k] += gy[k] * bv[k];
            gb[k] += gy[k] * av[k];
          }
          break;
        }
        case OpK::OneMinus: {
          auto& ga = nodes_[nd.a].grad;
          for (size_t k = 0; k < gy.size(); ++k) ga[k] -= gy[k];
          break;
        }
        case OpK::Tanh: {
          auto& ga = nodes_[nd.a].grad;
          const auto& y = nd.val;
          for (size_t k = 0; k < gy.size(); ++k) ga[k] += gy[k] * (1.0 - y[k] * y[k]);
          break;
        }
        case OpK::Sigmoid: {
          auto& ga = nodes_[nd.a].grad;
          const auto& y = nd.val;
          for (size_t k = 0; k < gy.size(); ++k) ga[k] += gy[k] * y[k] * (1.0 - y[k]);
          break;
        }
        case OpK::Scale: {
          auto& ga = nodes_[nd.a].grad;
          for (size_t k = 0; k < gy.size(); ++k) ga[k] += nd.c * gy[k];
          break;
        }
        case OpK::Concat: {
          int off = 0;
          for (int p : nd.multi) {
            auto& gp = nodes_[p].grad;
            for (size_t k = 0; k < gp.size(); ++k) gp[k] += gy[off + static_cast<int>(k)];
            off += static_cast<int>(gp.size());
          }
          break;
        }
        case OpK::Dot: {
          Tensor& v = *nd.t;
          const auto& av = nodes_[nd.a].val;
          auto& ga = nodes_[nd.a].grad;
          const double g0 = gy[0];
          for (size_t k = 0; k < av.size(); ++k) {
            v.g[k] += g0 * av[k];
            ga[k] += g0 * v.v[k];
          }
          break;
        }
        case OpK::Stack: {
          for (size_t k = 0; k < nd.multi.size(); ++k) nodes_[nd.multi[k]].grad[0] += gy[k];
          break;
        }
        case OpK::Softmax: {
          auto& ga = nodes_[nd.a].grad;
          const auto& y = nd.val;
          double dot = 0.0;
          for (size_t k = 0; k < gy.size(); ++k) dot += gy[k] * y[k];
          for (size_t k = 0; k < gy.size(); ++k) ga[k] += y[k] * (gy[k] - dot);
          break;
        }
        case OpK::MaskedLogSoftmax: {
          auto& ga = nodes_[nd.a].grad;
          const auto& y = nd.val;
          double gsum = 0.0;
          for (size_t k = 0; k < gy.size(); ++k)
            if (nd.mask[k]) gsum += gy[k];
          for (size_t k = 0; k < gy.size(); ++k)
            if (nd.mask[k]) ga[k] += gy[k] - std::exp(y[k]) * gsum;
          break;
        }
        case OpK::WeightedSum: {
          auto& gw = nodes_[nd.a].grad;
          const auto& wv = nodes_[nd.a].val;
          for (size_t k = 0; k < nd.multi.size(); ++k) {
            const auto& xv = nodes_[nd.multi[k]].val;
            auto& gx = nodes_[nd.multi[k]].grad;
            double s = 0.0;
            for (size_t c = 0; c < gy.size(); ++c) {
              s += gy[c] * xv[c];
              gx[c] += wv[k] * gy[c];
            }
            gw[k] += s;
          }
          break;
        }
        case OpK::Pick: {
          nodes_[nd.a].grad[nd.idx] += gy[0];
          break;
        }
      }
    }
  }

 private:
  enum class OpK : uint8_t {
    Input,
    Row,
    MatVec,
    Add,
    Mul,
    OneMinus,
    Tanh,
    Sigmoid,
    Scale,
    Concat,
    Dot,
    Stack,
    Softmax,
    MaskedLogSoftmax,
    WeightedSum,
    Pick,
  };

  struct Node {
    OpK op = OpK::Input;
    int a = -1;
    int b = -1;
    int idx = -1;
    double c = 0.0;
    Tensor* t = nullptr;
    std::vector<int> multi;
    std::vector<char> mask;
    std::vector<double> val;
    std::vector<double> grad;
  };

  int alloc(OpK op, int out_size, Ref a = {}, Ref b = {}) {
    if (n_active_ == static_cast<int>(nodes_.size())) nodes_.emplace_back();
    Node& nd = nodes_[n_active_];
    nd.op = op;
    nd.a = a.i;
    nd.b = b.i;
    nd.idx = -1;
    nd.c = 0.0;
    nd.t = nullptr;
    nd.multi.clear();
    nd.mask.clear();
    nd.val.assign(out_size, 0.0);
    return n_active_++;
  }

  std::vector<Node> nodes_;
  int n_active_ = 0;
};

}  // namespace treefix
