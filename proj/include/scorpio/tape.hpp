#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <limits>
#include <unordered_map>
#include <vector>

#include "scorpio/tensor.hpp"

namespace scorpio {

struct Conv2dGeom {
  std::size_t batch = 0, in_c = 0, in_h = 0, in_w = 0;
  std::size_t out_c = 0, kh = 0, kw = 0, pad = 0;
  std::size_t out_h() const { return in_h + 2 * pad - kh + 1; }
  std::size_t out_w() const { return in_w + 2 * pad - kw + 1; }
};

/// Per-evaluation record of primitive operations. Build the forward graph,
/// call backward(root) once, read gradients off the external leaf tensors,
/// then discard the tape.
template <typename Real>
class Tape {
 public:
  using NodeId = std::uint32_t;
  static constexpr NodeId npos = std::numeric_limits<NodeId>::max();

  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapM = Eigen::Map<Mat>;
  using CMapM = Eigen::Map<const Mat>;

  NodeId leaf(Tensor<Real>& t) {
    auto it = leaf_index_.find(&t);
    if (it != leaf_index_.end()) return it->second;
    NodeId id = push(Op::leaf, t.shape, t.data, t.requires_grad);
    nodes_[id].external = &t;
    leaf_index_.emplace(&t, id);
    if (t.requires_grad) targets_.push_back(id);
    return id;
  }

  /// Read-only leaf: participates in forward, never receives a gradient.
  NodeId leaf_const(const Tensor<Real>& t) {
    auto it = leaf_index_.find(&t);
    if (it != leaf_index_.end()) return it->second;
    NodeId id = push(Op::leaf, t.shape, t.data, false);
    leaf_index_.emplace(&t, id);
    return id;
  }

  NodeId constant(Tensor<Real> t) { return push(Op::leaf, t.shape, std::move(t.data), false); }

  NodeId add(NodeId a, NodeId b) {
    check_same(a, b, "add");
    NodeId id = alloc(Op::add, nodes_[a].shape, a, b);
    auto& o = nodes_[id].val;
    const auto& x = nodes_[a].val;
    const auto& y = nodes_[b].val;
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
    return finish(id, "add");
  }

  NodeId sub(NodeId a, NodeId b) {
    check_same(a, b, "sub");
    NodeId id = alloc(Op::sub, nodes_[a].shape, a, b);
    auto& o = nodes_[id].val;
    const auto& x = nodes_[a].val;
    const auto& y = nodes_[b].val;
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
    return finish(id, "sub");
  }

  NodeId mul(NodeId a, NodeId b) {
    check_same(a, b, "mul");
    NodeId id = alloc(Op::mul, nodes_[a].shape, a, b);
    auto& o = nodes_[id].val;
    const auto& x = nodes_[a].val;
    const auto& y = nodes_[b].val;
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
    return finish(id, "mul");
  }

  NodeId scale(NodeId a, Real c) {
    NodeId id = alloc(Op::scale, nodes_[a].shape, a);
    nodes_[id].scalar = c;
    auto& o = nodes_[id].val;
    const auto& x = nodes_[a].val;
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = c * x[i];
    return finish(id, "scale");
  }

  /// [m,k] x [k,n] -> [m,n]
  NodeId matmul(NodeId a, NodeId b) {
    const auto& sa = nodes_[a].shape;
    const auto& sb = nodes_[b].shape;
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
      throw ShapeError("matmul shapes " + shape_str(sa) + " x " + shape_str(sb));
    NodeId id = alloc(Op::matmul, Shape{sa[0], sb[1]}, a, b);
    CMapM A(nodes_[a].val.data(), long(sa[0]), long(sa[1]));
    CMapM B(nodes_[b].val.data(), long(sb[0]), long(sb[1]));
    MapM O(nodes_[id].val.data(), long(sa[0]), long(sb[1]));
    O.noalias() = A * B;
    return finish(id, "matmul");
  }

  /// [m,n] + [n] broadcast over rows.
  NodeId add_bias(NodeId a, NodeId bias) {
    const auto& sa = nodes_[a].shape;
    const auto& sb = nodes_[bias].shape;
    if (sa.size() != 2 || sb.size() != 1 || sa[1] != sb[0])
      throw ShapeError("add_bias shapes " + shape_str(sa) + " + " + shape_str(sb));
    NodeId id = alloc(Op::add_bias, sa, a, bias);
    const auto& x = nodes_[a].val;
    const auto& b = nodes_[bias].val;
    auto& o = nodes_[id].val;
    for (std::size_t r = 0; r < sa[0]; ++r)
      for (std::size_t c = 0; c < sa[1]; ++c) o[r * sa[1] + c] = x[r * sa[1] + c] + b[c];
    return finish(id, "add_bias");
  }

  NodeId relu(NodeId a) {
    NodeId id = alloc(Op::relu, nodes_[a].shape, a);
    const auto& x = nodes_[a].val;
    auto& o = nodes_[id].val;
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > Real(0) ? x[i] : Real(0);
    return finish(id, "relu");
  }

  NodeId tanh_act(NodeId a) {
    NodeId id = alloc(Op::tanh_act, nodes_[a].shape, a);
    const auto& x = nodes_[a].val;
    auto& o = nodes_[id].val;
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(x[i]);
    return finish(id, "tanh");
  }

  NodeId reshape(NodeId a, Shape s) {
    if (numel(s) != nodes_[a].val.size())
      throw ShapeError("reshape " + shape_str(nodes_[a].shape) + " -> " + shape_str(s));
    NodeId id = alloc(Op::reshape, std::move(s), a);
    nodes_[id].val = nodes_[a].val;
    return id;  // finite by induction
  }

  NodeId sum(NodeId a) {
    NodeId id = alloc(Op::sum, Shape{}, a);
    double acc = 0.0;
    for (Real x : nodes_[a].val) acc += double(x);
    nodes_[id].val[0] = Real(acc);
    return finish(id, "sum");
  }

  NodeId mean(NodeId a) {
    NodeId id = alloc(Op::mean, Shape{}, a);
    double acc = 0.0;
    for (Real x : nodes_[a].val) acc += double(x);
    nodes_[id].val[0] = Real(acc / double(nodes_[a].val.size()));
    return finish(id, "mean");
  }

  NodeId dot(NodeId a, NodeId b) {
    check_same(a, b, "dot");
    NodeId id = alloc(Op::dot, Shape{}, a, b);
    double acc = 0.0;
    const auto& x = nodes_[a].val;
    const auto& y = nodes_[b].val;
    for (std::size_t i = 0; i < x.size(); ++i) acc += double(x[i]) * double(y[i]);
    nodes_[id].val[0] = Real(acc);
    return finish(id, "dot");
  }

  /// Row-wise log softmax with max subtraction.
  NodeId log_softmax(NodeId a) {
    const auto& s = nodes_[a].shape;
    if (s.size() != 2) throw ShapeError("log_softmax expects [batch,K], got " + shape_str(s));
    NodeId id = alloc(Op::log_softmax, s, a);
    const auto& x = nodes_[a].val;
    auto& o = nodes_[id].val;
    const std::size_t k = s[1];
    for (std::size_t r = 0; r < s[0]; ++r) {
      const Real* row = x.data() + r * k;
      Real mx = row[0];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, row[c]);
      double lse = 0.0;
      for (std::size_t c = 0; c < k; ++c) lse += std::exp(double(row[c] - mx));
      const Real logz = mx + Real(std::log(lse));
      for (std::size_t c = 0; c < k; ++c) o[r * k + c] = row[c] - logz;
    }
    return finish(id, "log_softmax");
  }

  /// out[i] = a[i, idx[i]] for a [batch,K] input.
  NodeId pick(NodeId a, const std::vector<int>& idx) {
    const auto& s = nodes_[a].shape;
    if (s.size() != 2 || idx.size() != s[0]) throw ShapeError("pick index/batch mismatch");
    NodeId id = alloc(Op::pick, Shape{s[0]}, a);
    nodes_[id].aux = idx;
    const std::size_t k = s[1];
    for (std::size_t r = 0; r < s[0]; ++r) {
      const int c = idx[r];
      if (c < 0 || std::size_t(c) >= k) throw ShapeError("pick index out of range");
      nodes_[id].val[r] = nodes_[a].val[r * k + std::size_t(c)];
    }
    return finish(id, "pick");
  }

  /// Classification margin per row: z[y] - max_{j != y} z[j].
  /// Subgradient routes +1 to the true class and -1 to the runner-up
  /// (lowest index on ties).
  NodeId margin(NodeId logits, const std::vector<int>& y) {
    const auto& s = nodes_[logits].shape;
    if (s.size() != 2 || s[1] < 2 || y.size() != s[0]) throw ShapeError("margin expects [batch,K>=2]");
    NodeId id = alloc(Op::margin, Shape{s[0]}, logits);
    nodes_[id].aux = y;
    nodes_[id].aux2.resize(s[0]);
    const std::size_t k = s[1];
    for (std::size_t r = 0; r < s[0]; ++r) {
      const Real* row = nodes_[logits].val.data() + r * k;
      const std::size_t yy = std::size_t(y[r]);
      std::size_t best = yy == 0 ? 1 : 0;
      for (std::size_t c = 0; c < k; ++c)
        if (c != yy && row[c] > row[best]) best = c;
      nodes_[id].aux2[r] = int(best);
      nodes_[id].val[r] = row[yy] - row[best];
    }
    return finish(id, "margin");
  }

  NodeId conv2d(NodeId x, NodeId w, NodeId b, std::size_t pad) {
    const auto& sx = nodes_[x].shape;  // [N,C,H,W]
    const auto& sw = nodes_[w].shape;  // [F,C,kh,kw]
    const auto& sb = nodes_[b].shape;  // [F]
    if (sx.size() != 4 || sw.size() != 4 || sb.size() != 1 || sx[1] != sw[1] || sb[0] != sw[0])
      throw ShapeError("conv2d shapes " + shape_str(sx) + " * " + shape_str(sw));
    Conv2dGeom g{sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], pad};
    NodeId id = alloc(Op::conv2d, Shape{g.batch, g.out_c, g.out_h(), g.out_w()}, x, w, b);
    nodes_[id].conv = g;
    const std::size_t cols_rows = g.in_c * g.kh * g.kw;
    const std::size_t cols_cols = g.out_h() * g.out_w();
    std::vector<Real> cols(cols_rows * cols_cols);
    CMapM W(nodes_[w].val.data(), long(g.out_c), long(cols_rows));
    for (std::size_t n = 0; n < g.batch; ++n) {
      im2col(nodes_[x].val.data() + n * g.in_c * g.in_h * g.in_w, g, cols.data());
      CMapM C(cols.data(), long(cols_rows), long(cols_cols));
      MapM O(nodes_[id].val.data() + n * g.out_c * cols_cols, long(g.out_c), long(cols_cols));
      O.noalias() = W * C;
      for (std::size_t f = 0; f < g.out_c; ++f) O.row(long(f)).array() += nodes_[b].val[f];
    }
    return finish(id, "conv2d");
  }

  NodeId maxpool2(NodeId x) {
    const auto& s = nodes_[x].shape;  // [N,C,H,W], H,W even
    if (s.size() != 4 || s[2] % 2 || s[3] % 2) throw ShapeError("maxpool2 expects even [N,C,H,W]");
    NodeId id = alloc(Op::maxpool2, Shape{s[0], s[1], s[2] / 2, s[3] / 2}, x);
    auto& memo = nodes_[id].aux;
    memo.resize(nodes_[id].val.size());
    const std::size_t H = s[2], W = s[3], oh = H / 2, ow = W / 2;
    const std::size_t planes = s[0] * s[1];
    for (std::size_t p = 0; p < planes; ++p) {
      const Real* in = nodes_[x].val.data() + p * H * W;
      Real* out = nodes_[id].val.data() + p * oh * ow;
      int* am = memo.data() + p * oh * ow;
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t c = 0; c < ow; ++c) {
          std::size_t base = (2 * r) * W + 2 * c;
          std::size_t idx[4] = {base, base + 1, base + W, base + W + 1};
          std::size_t best = idx[0];
          for (int t = 1; t < 4; ++t)
            if (in[idx[t]] > in[best]) best = idx[t];
          out[r * ow + c] = in[best];
          am[r * ow + c] = int(best);
        }
    }
    return id;
  }

  const Tensor<Real> value(NodeId id) const {
    Tensor<Real> t;
    t.shape = nodes_[id].shape;
    t.data = nodes_[id].val;
    return t;
  }

  const std::vector<Real>& raw_value(NodeId id) const { return nodes_[id].val; }
  const Shape& shape_of(NodeId id) const { return nodes_[id].shape; }

  /// Reverse sweep from a scalar root. Fills the grad slot of every
  /// requires_grad leaf registered on this tape; leaves unreachable from the
  /// root get a zero gradient and are reported by unreached_targets().
  void backward(NodeId root) {
    if (!nodes_[root].shape.empty())
      throw ShapeError("backward root must be a scalar, got " + shape_str(nodes_[root].shape));
    for (auto& n : nodes_) n.grad.clear();
    nodes_[root].grad.assign(1, Real(1));
    for (std::size_t i = root + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || n.op == Op::leaf) continue;
      dispatch_backward(n);
    }
    unreached_.clear();
    for (NodeId id : targets_) {
      Node& n = nodes_[id];
      if (n.grad.empty()) {
        n.external->grad.assign(n.external->data.size(), Real(0));
        unreached_.push_back(n.external);
      } else {
        ensure_finite(std::span<const Real>(n.grad), "gradient");
        n.external->grad = n.grad;
      }
    }
  }

  const std::vector<Tensor<Real>*>& unreached_targets() const { return unreached_; }

 private:
  enum class Op {
    leaf, add, sub, mul, scale, matmul, add_bias, relu, tanh_act, reshape,
    sum, mean, dot, log_softmax, pick, margin, conv2d, maxpool2
  };

  struct Node {
    Op op;
    Shape shape;
    std::vector<Real> val;
    std::vector<Real> grad;
    NodeId a = npos, b = npos, c = npos;
    bool requires = false;
    Real scalar = Real(0);
    std::vector<int> aux;   // labels / pool argmax
    std::vector<int> aux2;  // margin runner-up
    Conv2dGeom conv;
    Tensor<Real>* external = nullptr;
  };

  NodeId push(Op op, Shape shape, std::vector<Real> val, bool req) {
    Node n;
    n.op = op;
    n.shape = std::move(shape);
    n.val = std::move(val);
    n.requires = req;
    nodes_.push_back(std::move(n));
    return NodeId(nodes_.size() - 1);
  }

  NodeId alloc(Op op, Shape shape, NodeId a, NodeId b = npos, NodeId c = npos) {
    Node n;
    n.op = op;
    n.shape = std::move(shape);
    n.val.resize(numel(n.shape));
    n.a = a;
    n.b = b;
    n.c = c;
    n.requires = nodes_[a].requires || (b != npos && nodes_[b].requires) ||
                 (c != npos && nodes_[c].requires);
    nodes_.push_back(std::move(n));
    return NodeId(nodes_.size() - 1);
  }

  NodeId finish(NodeId id, const char* what) {
    ensure_finite(std::span<const Real>(nodes_[id].val), what);
    return id;
  }

  void check_same(NodeId a, NodeId b, const char* what) const {
    if (nodes_[a].shape != nodes_[b].shape)
      throw ShapeError(std::string(what) + " shape mismatch " + shape_str(nodes_[a].shape) +
                       " vs " + shape_str(nodes_[b].shape));
  }

  std::vector<Real>& grad_buf(NodeId id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.val.size(), Real(0));
    return n.grad;
  }

  bool wants(NodeId id) const { return id != npos && nodes_[id].requires; }

  void dispatch_backward(Node& n) {
    const std::vector<Real>& g = n.grad;
    switch (n.op) {
      case Op::leaf:
        break;
      case Op::add: {
        if (wants(n.a)) { auto& ga = grad_buf(n.a); for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i]; }
        if (wants(n.b)) { auto& gb = grad_buf(n.b); for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i]; }
        break;
      }
      case Op::sub: {
        if (wants(n.a)) { auto& ga = grad_buf(n.a); for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i]; }
        if (wants(n.b)) { auto& gb = grad_buf(n.b); for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i]; }
        break;
      }
      case Op::mul: {
        if (wants(n.a)) {
          auto& ga = grad_buf(n.a);
          const auto& vb = nodes_[n.b].val;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
        }
        if (wants(n.b)) {
          auto& gb = grad_buf(n.b);
          const auto& va = nodes_[n.a].val;
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
        }
        break;
      }
      case Op::scale: {
        if (wants(n.a)) { auto& ga = grad_buf(n.a); for (std::size_t i = 0; i < g.size(); ++i) ga[i] += n.scalar * g[i]; }
        break;
      }
      case Op::matmul: {
        const auto& sa = nodes_[n.a].shape;
        const auto& sb = nodes_[n.b].shape;
        CMapM G(g.data(), long(sa[0]), long(sb[1]));
        if (wants(n.a)) {
          CMapM B(nodes_[n.b].val.data(), long(sb[0]), long(sb[1]));
          MapM GA(grad_buf(n.a).data(), long(sa[0]), long(sa[1]));
          GA.noalias() += G * B.transpose();
        }
        if (wants(n.b)) {
          CMapM A(nodes_[n.a].val.data(), long(sa[0]), long(sa[1]));
          MapM GB(grad_buf(n.b).data(), long(sb[0]), long(sb[1]));
          GB.noalias() += A.transpose() * G;
        }
        break;
      }
      case Op::add_bias: {
        const auto& s = n.shape;
        if (wants(n.a)) { auto& ga = grad_buf(n.a); for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i]; }
        if (wants(n.b)) {
          auto& gb = grad_buf(n.b);
          for (std::size_t r = 0; r < s[0]; ++r)
            for (std::size_t c = 0; c < s[1]; ++c) gb[c] += g[r * s[1] + c];
        }
        break;
      }
      case Op::relu: {
        if (wants(n.a)) {
          auto& ga = grad_buf(n.a);
          const auto& x = nodes_[n.a].val;
          for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > Real(0)) ga[i] += g[i];
        }
        break;
      }
      case Op::tanh_act: {
        if (wants(n.a)) {
          auto& ga = grad_buf(n.a);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (Real(1) - n.val[i] * n.val[i]);
        }
        break;
      }
      case Op::reshape: {
        if (wants(n.a)) { auto& ga = grad_buf(n.a); for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i]; }
        break;
      }
      case Op::sum: {
        if (wants(n.a)) { auto& ga = grad_buf(n.a); for (Real& v : ga) v += g[0]; }
        break;
      }
      case Op::mean: {
        if (wants(n.a)) {
          auto& ga = grad_buf(n.a);
          const Real inv = Real(1) / Real(ga.size());
          for (Real& v : ga) v += g[0] * inv;
        }
        break;
      }
      case Op::dot: {
        if (wants(n.a)) { auto& ga = grad_buf(n.a); const auto& vb = nodes_[n.b].val; for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * vb[i]; }
        if (wants(n.b)) { auto& gb = grad_buf(n.b); const auto& va = nodes_[n.a].val; for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[0] * va[i]; }
        break;
      }
      case Op::log_softmax: {
        if (wants(n.a)) {
          auto& ga = grad_buf(n.a);
          const std::size_t k = n.shape[1];
          for (std::size_t r = 0; r < n.shape[0]; ++r) {
            double gsum = 0.0;
            for (std::size_t c = 0; c < k; ++c) gsum += double(g[r * k + c]);
            for (std::size_t c = 0; c < k; ++c) {
              const double p = std::exp(double(n.val[r * k + c]));
              ga[r * k + c] += Real(double(g[r * k + c]) - p * gsum);
            }
          }
        }
        break;
      }
      case Op::pick: {
        if (wants(n.a)) {
          auto& ga = grad_buf(n.a);
          const std::size_t k = nodes_[n.a].shape[1];
          for (std::size_t r = 0; r < n.shape[0]; ++r) ga[r * k + std::size_t(n.aux[r])] += g[r];
        }
        break;
      }
      case Op::margin: {
        if (wants(n.a)) {
          auto& ga = grad_buf(n.a);
          const std::size_t k = nodes_[n.a].shape[1];
          for (std::size_t r = 0; r < n.shape[0]; ++r) {
            ga[r * k + std::size_t(n.aux[r])] += g[r];
            ga[r * k + std::size_t(n.aux2[r])] -= g[r];
          }
        }
        break;
      }
      case Op::conv2d: {
        const Conv2dGeom& cg = n.conv;
        const std::size_t cols_rows = cg.in_c * cg.kh * cg.kw;
        const std::size_t cols_cols = cg.out_h() * cg.out_w();
        std::vector<Real> cols(cols_rows * cols_cols);
        std::vector<Real> dcols(cols_rows * cols_cols);
        CMapM W(nodes_[n.b].val.data(), long(cg.out_c), long(cols_rows));
        for (std::size_t nn = 0; nn < cg.batch; ++nn) {
          CMapM G(g.data() + nn * cg.out_c * cols_cols, long(cg.out_c), long(cols_cols));
          if (wants(n.b) || wants(n.a)) {
            if (wants(n.b)) {
              im2col(nodes_[n.a].val.data() + nn * cg.in_c * cg.in_h * cg.in_w, cg, cols.data());
              CMapM C(cols.data(), long(cols_rows), long(cols_cols));
              MapM GW(grad_buf(n.b).data(), long(cg.out_c), long(cols_rows));
              GW.noalias() += G * C.transpose();
            }
            if (wants(n.a)) {
              MapM DC(dcols.data(), long(cols_rows), long(cols_cols));
              DC.noalias() = W.transpose() * G;
              col2im(dcols.data(), cg, grad_buf(n.a).data() + nn * cg.in_c * cg.in_h * cg.in_w);
            }
          }
          if (wants(n.c)) {
            auto& gb = grad_buf(n.c);
            for (std::size_t f = 0; f < cg.out_c; ++f) gb[f] += G.row(long(f)).sum();
          }
        }
        break;
      }
      case Op::maxpool2: {
        if (wants(n.a)) {
          auto& ga = grad_buf(n.a);
          const auto& s = nodes_[n.a].shape;
          const std::size_t H = s[2], W = s[3], oh = H / 2, ow = W / 2;
          const std::size_t planes = s[0] * s[1];
          for (std::size_t p = 0; p < planes; ++p) {
            Real* gin = ga.data() + p * H * W;
            const Real* gout = g.data() + p * oh * ow;
            const int* am = n.aux.data() + p * oh * ow;
            for (std::size_t i = 0; i < oh * ow; ++i) gin[std::size_t(am[i])] += gout[i];
          }
        }
        break;
      }
    }
  }

  void im2col(const Real* img, const Conv2dGeom& g, Real* cols) const {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    std::size_t row = 0;
    for (std::size_t ch = 0; ch < g.in_c; ++ch)
      for (std::size_t dr = 0; dr < g.kh; ++dr)
        for (std::size_t dc = 0; dc < g.kw; ++dc, ++row) {
          Real* dst = cols + row * oh * ow;
          for (std::size_t r = 0; r < oh; ++r) {
            const long ir = long(r + dr) - long(g.pad);
            for (std::size_t c = 0; c < ow; ++c) {
              const long ic = long(c + dc) - long(g.pad);
              dst[r * ow + c] = (ir < 0 || ir >= long(g.in_h) || ic < 0 || ic >= long(g.in_w))
                                    ? Real(0)
                                    : img[ch * g.in_h * g.in_w + std::size_t(ir) * g.in_w + std::size_t(ic)];
            }
          }
        }
  }

  void col2im(const Real* dcols, const Conv2dGeom& g, Real* dimg) const {
    const std::size_t oh = g.out_h(), ow = g.out_w();
    std::size_t row = 0;
    for (std::size_t ch = 0; ch < g.in_c; ++ch)
      for (std::size_t dr = 0; dr < g.kh; ++dr)
        for (std::size_t dc = 0; dc < g.kw; ++dc, ++row) {
          const Real* src = dcols + row * oh * ow;
          for (std::size_t r = 0; r < oh; ++r) {
            const long ir = long(r + dr) - long(g.pad);
            if (ir < 0 || ir >= long(g.in_h)) continue;
            for (std::size_t c = 0; c < ow; ++c) {
              const long ic = long(c + dc) - long(g.pad);
              if (ic < 0 || ic >= long(g.in_w)) continue;
              dimg[ch * g.in_h * g.in_w + std::size_t(ir) * g.in_w + std::size_t(ic)] += src[r * ow + c];
            }
          }
        }
  }

  std::vector<Node> nodes_;
  std::vector<NodeId> targets_;
  std::unordered_map<const void*, NodeId> leaf_index_;
  std::vector<Tensor<Real>*> unreached_;
};

}  // namespace scorpio
