#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "ajsscc/tensor.hpp"

namespace ajsscc {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Forward-declared so Tape can bind leaf gradients to named parameters.
struct ParamStore;
void param_store_accum_grad(ParamStore& store, int index, const Tensor& grad);

// im2col geometry for a (C, H, W) plane convolved with kh x kw / stride / pad.
struct ConvGeom {
  std::int64_t C, H, W, kh, kw, stride, pad, oh, ow;

  static ConvGeom forward(std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
                          std::int64_t kw, std::int64_t stride, std::int64_t pad) {
    ConvGeom g{C, H, W, kh, kw, stride, pad, 0, 0};
    g.oh = (H + 2 * pad - kh) / stride + 1;
    g.ow = (W + 2 * pad - kw) / stride + 1;
    if (g.oh <= 0 || g.ow <= 0) throw std::invalid_argument("conv: empty output");
    return g;
  }

  std::int64_t col_rows() const { return C * kh * kw; }
  std::int64_t col_cols() const { return oh * ow; }

  // src: C*H*W plane, cols: (C*kh*kw) x (oh*ow) row-major
  void im2col(const double* src, double* cols) const {
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t ki = 0; ki < kh; ++ki) {
        for (std::int64_t kj = 0; kj < kw; ++kj) {
          double* row = cols + ((c * kh + ki) * kw + kj) * col_cols();
          for (std::int64_t oy = 0; oy < oh; ++oy) {
            const std::int64_t iy = oy * stride - pad + ki;
            if (iy < 0 || iy >= H) {
              for (std::int64_t ox = 0; ox < ow; ++ox) row[oy * ow + ox] = 0.0;
              continue;
            }
            const double* srow = src + (c * H + iy) * W;
            for (std::int64_t ox = 0; ox < ow; ++ox) {
              const std::int64_t ix = ox * stride - pad + kj;
              row[oy * ow + ox] = (ix >= 0 && ix < W) ? srow[ix] : 0.0;
            }
          }
        }
      }
    }
  }

  // adjoint of im2col: scatter-add cols back into a C*H*W plane
  void col2im_add(const double* cols, double* dst) const {
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t ki = 0; ki < kh; ++ki) {
        for (std::int64_t kj = 0; kj < kw; ++kj) {
          const double* row = cols + ((c * kh + ki) * kw + kj) * col_cols();
          for (std::int64_t oy = 0; oy < oh; ++oy) {
            const std::int64_t iy = oy * stride - pad + ki;
            if (iy < 0 || iy >= H) continue;
            double* drow = dst + (c * H + iy) * W;
            for (std::int64_t ox = 0; ox < ow; ++ox) {
              const std::int64_t ix = ox * stride - pad + kj;
              if (ix >= 0 && ix < W) drow[ix] += row[oy * ow + ox];
            }
          }
        }
      }
    }
  }
};

// Reverse-mode tape. One tape per forward pass; nodes are created in
// topological order, so backward() is a single reverse sweep.
class Tape {
 public:
  struct Node {
    Tensor val;
    Tensor grad;  // allocated on demand
    bool needs_grad = false;
    std::function<void(Tape&, int)> backward;  // nullptr for leaves
    ParamStore* bound_store = nullptr;
    int bound_index = -1;
  };

  std::vector<Node> nodes;

  const Tensor& val(Var v) const { return nodes[v.id].val; }
  Tensor& val(Var v) { return nodes[v.id].val; }
  const Tensor& grad(Var v) const { return nodes[v.id].grad; }
  bool needs_grad(int id) const { return nodes[id].needs_grad; }

  Var leaf(Tensor t, bool needs = false) {
    Node n;
    n.val = std::move(t);
    n.needs_grad = needs;
    nodes.push_back(std::move(n));
    return Var{static_cast<int>(nodes.size()) - 1};
  }

  Var constant(Tensor t) { return leaf(std::move(t), false); }

  Var param_leaf(ParamStore& store, int index, const Tensor& value) {
    Var v = leaf(value, true);
    nodes[v.id].bound_store = &store;
    nodes[v.id].bound_index = index;
    return v;
  }

  Tensor& ensure_grad(int id) {
    Node& n = nodes[id];
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.val.shape);
    return n.grad;
  }

  void backward(Var loss) {
    if (nodes[loss.id].val.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    ensure_grad(loss.id).data[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes[id];
      if (!n.needs_grad || n.grad.data.empty()) continue;
      if (n.backward) n.backward(*this, id);
      if (n.bound_store) param_store_accum_grad(*n.bound_store, n.bound_index, n.grad);
    }
  }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    check_same_shape(val(a), val(b), "add");
    Tensor out = val(a);
    const Tensor& tb = val(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += tb[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t, int id) {
      const Tensor& g = t.nodes[id].grad;
      t.accum_same(a, g);
      t.accum_same(b, g);
    });
  }

  Var sub(Var a, Var b) {
    check_same_shape(val(a), val(b), "sub");
    Tensor out = val(a);
    const Tensor& tb = val(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= tb[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t, int id) {
      const Tensor& g = t.nodes[id].grad;
      t.accum_same(a, g);
      if (t.needs_grad(b.id)) {
        Tensor& gb = t.ensure_grad(b.id);
        for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    check_same_shape(val(a), val(b), "mul");
    Tensor out = val(a);
    const Tensor& tb = val(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= tb[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t, int id) {
      const Tensor& g = t.nodes[id].grad;
      if (t.needs_grad(a.id)) {
        Tensor& ga = t.ensure_grad(a.id);
        const Tensor& vb = t.val(b);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb[i];
      }
      if (t.needs_grad(b.id)) {
        Tensor& gb = t.ensure_grad(b.id);
        const Tensor& va = t.val(a);
        for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * va[i];
      }
    });
  }

  Var scale(Var x, double c) {
    Tensor out = val(x);
    for (auto& v : out.data) v *= c;
    return make(std::move(out), {x}, [x, c](Tape& t, int id) {
      if (!t.needs_grad(x.id)) return;
      const Tensor& g = t.nodes[id].grad;
      Tensor& gx = t.ensure_grad(x.id);
      for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += c * g[i];
    });
  }

  // y = s * x with s a trainable scalar (shape {1})
  Var scale_by_var(Var x, Var s) {
    if (val(s).numel() != 1) throw std::invalid_argument("scale_by_var: s must be scalar");
    const double sv = val(s)[0];
    Tensor out = val(x);
    for (auto& v : out.data) v *= sv;
    return make(std::move(out), {x, s}, [x, s, sv](Tape& t, int id) {
      const Tensor& g = t.nodes[id].grad;
      if (t.needs_grad(x.id)) {
        Tensor& gx = t.ensure_grad(x.id);
        for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += sv * g[i];
      }
      if (t.needs_grad(s.id)) {
        const Tensor& vx = t.val(x);
        double acc = 0.0;
        for (std::int64_t i = 0; i < g.numel(); ++i) acc += g[i] * vx[i];
        t.ensure_grad(s.id)[0] += acc;
      }
    });
  }

  Var sigmoid(Var x) {
    Tensor out = val(x);
    for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    return make(std::move(out), {x}, [x](Tape& t, int id) {
      if (!t.needs_grad(x.id)) return;
      const Tensor& g = t.nodes[id].grad;
      const Tensor& y = t.nodes[id].val;
      Tensor& gx = t.ensure_grad(x.id);
      for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
    });
  }

  // PReLU with one shared slope (shape {1})
  Var prelu(Var x, Var slope) {
    if (val(slope).numel() != 1) throw std::invalid_argument("prelu: slope must be scalar");
    const double a = val(slope)[0];
    Tensor out = val(x);
    for (auto& v : out.data) v = v > 0.0 ? v : a * v;
    return make(std::move(out), {x, slope}, [x, slope, a](Tape& t, int id) {
      const Tensor& g = t.nodes[id].grad;
      const Tensor& vx = t.val(x);
      if (t.needs_grad(x.id)) {
        Tensor& gx = t.ensure_grad(x.id);
        for (std::int64_t i = 0; i < g.numel(); ++i)
          gx[i] += g[i] * (vx[i] > 0.0 ? 1.0 : a);
      }
      if (t.needs_grad(slope.id)) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < g.numel(); ++i)
          if (vx[i] <= 0.0) acc += g[i] * vx[i];
        t.ensure_grad(slope.id)[0] += acc;
      }
    });
  }

  Var clamp01(Var x) {
    Tensor out = val(x);
    for (auto& v : out.data) v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    return make(std::move(out), {x}, [x](Tape& t, int id) {
      if (!t.needs_grad(x.id)) return;
      const Tensor& g = t.nodes[id].grad;
      const Tensor& vx = t.val(x);
      Tensor& gx = t.ensure_grad(x.id);
      for (std::int64_t i = 0; i < g.numel(); ++i)
        if (vx[i] > 0.0 && vx[i] < 1.0) gx[i] += g[i];
    });
  }

  Var detach(Var x) { return leaf(val(x), false); }

  Var reshape(Var x, std::vector<std::int64_t> shape) {
    Tensor out = val(x).reshaped(std::move(shape));
    return make(std::move(out), {x}, [x](Tape& t, int id) {
      if (!t.needs_grad(x.id)) return;
      const Tensor& g = t.nodes[id].grad;
      Tensor& gx = t.ensure_grad(x.id);
      for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    });
  }

  // ---- dense linear algebra ----

  // C = op(A) * op(B) for 2-D tensors
  Var matmul(Var a, Var b, bool ta = false, bool tb = false) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (va.ndim() != 2 || vb.ndim() != 2) throw std::invalid_argument("matmul: need 2-D");
    const std::int64_t m = ta ? va.shape[1] : va.shape[0];
    const std::int64_t k = ta ? va.shape[0] : va.shape[1];
    const std::int64_t k2 = tb ? vb.shape[1] : vb.shape[0];
    const std::int64_t n = tb ? vb.shape[0] : vb.shape[1];
    if (k != k2) throw std::invalid_argument("matmul: inner dim mismatch");
    Tensor out({m, n});
    {
      CMatMap A(va.data.data(), va.shape[0], va.shape[1]);
      CMatMap B(vb.data.data(), vb.shape[0], vb.shape[1]);
      MatMap C(out.data.data(), m, n);
      if (!ta && !tb) C.noalias() = A * B;
      else if (ta && !tb) C.noalias() = A.transpose() * B;
      else if (!ta && tb) C.noalias() = A * B.transpose();
      else C.noalias() = A.transpose() * B.transpose();
    }
    return make(std::move(out), {a, b}, [a, b, ta, tb](Tape& t, int id) {
      const Tensor& g = t.nodes[id].grad;
      const Tensor& va = t.val(a);
      const Tensor& vb = t.val(b);
      CMatMap G(g.data.data(), g.shape[0], g.shape[1]);
      CMatMap A(va.data.data(), va.shape[0], va.shape[1]);
      CMatMap B(vb.data.data(), vb.shape[0], vb.shape[1]);
      if (t.needs_grad(a.id)) {
        MatMap GA(t.ensure_grad(a.id).data.data(), va.shape[0], va.shape[1]);
        if (!ta && !tb) GA.noalias() += G * B.transpose();
        else if (!ta && tb) GA.noalias() += G * B;
        else if (ta && !tb) GA.noalias() += B * G.transpose();
        else GA.noalias() += B.transpose() * G.transpose();
      }
      if (t.needs_grad(b.id)) {
        MatMap GB(t.ensure_grad(b.id).data.data(), vb.shape[0], vb.shape[1]);
        if (!ta && !tb) GB.noalias() += A.transpose() * G;
        else if (ta && !tb) GB.noalias() += A * G;
        else if (!ta && tb) GB.noalias() += G.transpose() * A;
        else GB.noalias() += G.transpose() * A.transpose();
      }
    });
  }

  // Y = X * A_q^T where A_q is the leading q rows of A (N x N). X: (m x N) -> Y: (m x q).
  Var measure_rows(Var x, Var a, std::int64_t q) {
    const Tensor& vx = val(x);
    const Tensor& va = val(a);
    const std::int64_t N = va.shape[1];
    if (vx.ndim() != 2 || va.ndim() != 2 || vx.shape[1] != N)
      throw std::invalid_argument("measure_rows: shape mismatch");
    if (q < 1 || q > va.shape[0]) throw std::invalid_argument("measure_rows: bad q");
    const std::int64_t m = vx.shape[0];
    Tensor out({m, q});
    {
      CMatMap X(vx.data.data(), m, N);
      CMatMap A(va.data.data(), va.shape[0], N);
      MatMap Y(out.data.data(), m, q);
      Y.noalias() = X * A.topRows(q).transpose();
    }
    return make(std::move(out), {x, a}, [x, a, q](Tape& t, int id) {
      const Tensor& g = t.nodes[id].grad;
      const Tensor& vx = t.val(x);
      const Tensor& va = t.val(a);
      const std::int64_t m = vx.shape[0], N = vx.shape[1];
      CMatMap G(g.data.data(), m, q);
      CMatMap A(va.data.data(), va.shape[0], N);
      CMatMap X(vx.data.data(), m, N);
      if (t.needs_grad(x.id)) {
        MatMap GX(t.ensure_grad(x.id).data.data(), m, N);
        GX.noalias() += G * A.topRows(q);
      }
      if (t.needs_grad(a.id)) {
        MatMap GA(t.ensure_grad(a.id).data.data(), va.shape[0], N);
        GA.topRows(q).noalias() += G.transpose() * X;
      }
    });
  }

  // Z = Y * A_q where Y: (m x q) -> Z: (m x N). The aligning step.
  Var align_rows(Var y, Var a, std::int64_t q) {
    const Tensor& vy = val(y);
    const Tensor& va = val(a);
    const std::int64_t N = va.shape[1];
    if (vy.ndim() != 2 || vy.shape[1] != q) throw std::invalid_argument("align_rows: bad y");
    if (q < 1 || q > va.shape[0]) throw std::invalid_argument("align_rows: bad q");
    const std::int64_t m = vy.shape[0];
    Tensor out({m, N});
    {
      CMatMap Y(vy.data.data(), m, q);
      CMatMap A(va.data.data(), va.shape[0], N);
      MatMap Z(out.data.data(), m, N);
      Z.noalias() = Y * A.topRows(q);
    }
    return make(std::move(out), {y, a}, [y, a, q](Tape& t, int id) {
      const Tensor& g = t.nodes[id].grad;
      const Tensor& vy = t.val(y);
      const Tensor& va = t.val(a);
      const std::int64_t m = vy.shape[0], N = va.shape[1];
      CMatMap G(g.data.data(), m, N);
      CMatMap A(va.data.data(), va.shape[0], N);
      CMatMap Y(vy.data.data(), m, q);
      if (t.needs_grad(y.id)) {
        MatMap GY(t.ensure_grad(y.id).data.data(), m, q);
        GY.noalias() += G * A.topRows(q).transpose();
      }
      if (t.needs_grad(a.id)) {
        MatMap GA(t.ensure_grad(a.id).data.data(), va.shape[0], N);
        GA.topRows(q).noalias() += Y.transpose() * G;
      }
    });
  }

  // y = x + b broadcast over rows; x: (m x n), b: (n)
  Var add_rowvec(Var x, Var b) {
    const Tensor& vx = val(x);
    const Tensor& vb = val(b);
    if (vx.ndim() != 2 || vb.numel() != vx.shape[1])
      throw std::invalid_argument("add_rowvec: shape mismatch");
    Tensor out = vx;
    for (std::int64_t r = 0; r < vx.shape[0]; ++r)
      for (std::int64_t c = 0; c < vx.shape[1]; ++c) out.at2(r, c) += vb[c];
    return make(std::move(out), {x, b}, [x, b](Tape& t, int id) {
      const Tensor& g = t.nodes[id].grad;
      t.accum_same(x, g);
      if (t.needs_grad(b.id)) {
        Tensor& gb = t.ensure_grad(b.id);
        for (std::int64_t r = 0; r < g.shape[0]; ++r)
          for (std::int64_t c = 0; c < g.shape[1]; ++c) gb[c] += g.at2(r, c);
      }
    });
  }

  // ---- convolutions ----

  // x: (n, ci, h, w), w: (co, ci, kh, kw), b: (co)
  Var conv2d(Var x, Var w, Var b, std::int64_t stride, std::int64_t pad) {
    const Tensor& vx = val(x);
    const Tensor& vw = val(w);
    if (vx.ndim() != 4 || vw.ndim() != 4) throw std::invalid_argument("conv2d: need 4-D");
    if (vx.shape[1] != vw.shape[1]) throw std::invalid_argument("conv2d: channel mismatch");
    const std::int64_t n = vx.shape[0], ci = vx.shape[1], h = vx.shape[2], wd = vx.shape[3];
    const std::int64_t co = vw.shape[0], kh = vw.shape[2], kw = vw.shape[3];
    const ConvGeom geom = ConvGeom::forward(ci, h, wd, kh, kw, stride, pad);
    Tensor out({n, co, geom.oh, geom.ow});
    std::vector<double> cols(static_cast<std::size_t>(geom.col_rows() * geom.col_cols()));
    const Tensor& vb = val(b);
    if (vb.numel() != co) throw std::invalid_argument("conv2d: bias mismatch");
    for (std::int64_t s = 0; s < n; ++s) {
      geom.im2col(vx.data.data() + s * ci * h * wd, cols.data());
      CMatMap W(vw.data.data(), co, geom.col_rows());
      CMatMap C(cols.data(), geom.col_rows(), geom.col_cols());
      MatMap Y(out.data.data() + s * co * geom.col_cols(), co, geom.col_cols());
      Y.noalias() = W * C;
      for (std::int64_t oc = 0; oc < co; ++oc) Y.row(oc).array() += vb[oc];
    }
    return make(std::move(out), {x, w, b}, [x, w, b, geom](Tape& t, int id) {
      const Tensor& g = t.nodes[id].grad;
      const Tensor& vx = t.val(x);
      const Tensor& vw = t.val(w);
      const std::int64_t n = vx.shape[0], ci = geom.C, h = geom.H, wd = geom.W;
      const std::int64_t co = vw.shape[0];
      std::vector<double> cols(static_cast<std::size_t>(geom.col_rows() * geom.col_cols()));
      std::vector<double> dcols(cols.size());
      const bool nx = t.needs_grad(x.id), nw = t.needs_grad(w.id), nb = t.needs_grad(b.id);
      for (std::int64_t s = 0; s < n; ++s) {
        CMatMap G(g.data.data() + s * co * geom.col_cols(), co, geom.col_cols());
        if (nw) {
          geom.im2col(vx.data.data() + s * ci * h * wd, cols.data());
          CMatMap C(cols.data(), geom.col_rows(), geom.col_cols());
          MatMap GW(t.ensure_grad(w.id).data.data(), co, geom.col_rows());
          GW.noalias() += G * C.transpose();
        }
        if (nb) {
          Tensor& gb = t.ensure_grad(b.id);
          for (std::int64_t oc = 0; oc < co; ++oc) gb[oc] += G.row(oc).sum();
        }
        if (nx) {
          CMatMap W(vw.data.data(), co, geom.col_rows());
          MatMap DC(dcols.data(), geom.col_rows(), geom.col_cols());
          DC.noalias() = W.transpose() * G;
          geom.col2im_add(dcols.data(), t.ensure_grad(x.id).data.data() + s * ci * h * wd);
        }
      }
    });
  }

  // x: (n, ci, h, w), w: (ci, co, kh, kw), b: (co); output (n, co, H, W)
  // with H = (h-1)*stride - 2*pad + kh
  Var conv_transpose2d(Var x, Var w, Var b, std::int64_t stride, std::int64_t pad) {
    const Tensor& vx = val(x);
    const Tensor& vw = val(w);
    if (vx.ndim() != 4 || vw.ndim() != 4) throw std::invalid_argument("convT: need 4-D");
    if (vx.shape[1] != vw.shape[0]) throw std::invalid_argument("convT: channel mismatch");
    const std::int64_t n = vx.shape[0], ci = vx.shape[1], h = vx.shape[2], wd = vx.shape[3];
    const std::int64_t co = vw.shape[1], kh = vw.shape[2], kw = vw.shape[3];
    const std::int64_t H = (h - 1) * stride - 2 * pad + kh;
    const std::int64_t W = (wd - 1) * stride - 2 * pad + kw;
    if (H <= 0 || W <= 0) throw std::invalid_argument("convT: empty output");
    // geometry of the adjoint conv: (co, H, W) -> (h, w)
    const ConvGeom geom = ConvGeom::forward(co, H, W, kh, kw, stride, pad);
    if (geom.oh != h || geom.ow != wd) throw std::invalid_argument("convT: geometry mismatch");
    const Tensor& vb = val(b);
    if (vb.numel() != co) throw std::invalid_argument("convT: bias mismatch");
    Tensor out({n, co, H, W});
    std::vector<double> cols(static_cast<std::size_t>(geom.col_rows() * geom.col_cols()));
    for (std::int64_t s = 0; s < n; ++s) {
      CMatMap Wm(vw.data.data(), ci, co * kh * kw);
      CMatMap X(vx.data.data() + s * ci * h * wd, ci, h * wd);
      MatMap C(cols.data(), co * kh * kw, h * wd);
      C.noalias() = Wm.transpose() * X;
      double* dst = out.data.data() + s * co * H * W;
      geom.col2im_add(cols.data(), dst);
      for (std::int64_t oc = 0; oc < co; ++oc) {
        double* plane = dst + oc * H * W;
        for (std::int64_t i = 0; i < H * W; ++i) plane[i] += vb[oc];
      }
    }
    return make(std::move(out), {x, w, b}, [x, w, b, geom](Tape& t, int id) {
      const Tensor& g = t.nodes[id].grad;
      const Tensor& vx = t.val(x);
      const Tensor& vw = t.val(w);
      const std::int64_t n = vx.shape[0], ci = vx.shape[1];
      const std::int64_t h = geom.oh, wd = geom.ow;
      const std::int64_t co = geom.C, H = geom.H, W = geom.W;
      const std::int64_t kh = geom.kh, kw = geom.kw;
      std::vector<double> dcols(static_cast<std::size_t>(geom.col_rows() * geom.col_cols()));
      const bool nx = t.needs_grad(x.id), nw = t.needs_grad(w.id), nb = t.needs_grad(b.id);
      for (std::int64_t s = 0; s < n; ++s) {
        const double* gplane = g.data.data() + s * co * H * W;
        geom.im2col(gplane, dcols.data());
        CMatMap DC(dcols.data(), co * kh * kw, h * wd);
        if (nx) {
          CMatMap Wm(vw.data.data(), ci, co * kh * kw);
          MatMap GX(t.ensure_grad(x.id).data.data() + s * ci * h * wd, ci, h * wd);
          GX.noalias() += Wm * DC;
        }
        if (nw) {
          CMatMap X(vx.data.data() + s * ci * h * wd, ci, h * wd);
          MatMap GW(t.ensure_grad(w.id).data.data(), ci, co * kh * kw);
          GW.noalias() += X * DC.transpose();
        }
        if (nb) {
          Tensor& gb = t.ensure_grad(b.id);
          for (std::int64_t oc = 0; oc < co; ++oc) {
            const double* plane = gplane + oc * H * W;
            double acc = 0.0;
            for (std::int64_t i = 0; i < H * W; ++i) acc += plane[i];
            gb[oc] += acc;
          }
        }
      }
    });
  }

  // ---- pooling / channel attention helpers ----

  // (n, c, h, w) -> (n, c) mean over spatial positions
  Var global_avg_pool(Var x) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 4) throw std::invalid_argument("gap: need 4-D");
    const std::int64_t n = vx.shape[0], c = vx.shape[1], hw = vx.shape[2] * vx.shape[3];
    Tensor out({n, c});
    for (std::int64_t i = 0; i < n * c; ++i) {
      const double* p = vx.data.data() + i * hw;
      double acc = 0.0;
      for (std::int64_t j = 0; j < hw; ++j) acc += p[j];
      out[i] = acc / static_cast<double>(hw);
    }
    return make(std::move(out), {x}, [x, hw](Tape& t, int id) {
      if (!t.needs_grad(x.id)) return;
      const Tensor& g = t.nodes[id].grad;
      Tensor& gx = t.ensure_grad(x.id);
      const double inv = 1.0 / static_cast<double>(hw);
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        double* p = gx.data.data() + i * hw;
        const double gv = g[i] * inv;
        for (std::int64_t j = 0; j < hw; ++j) p[j] += gv;
      }
    });
  }

  // y[n,c,:,:] = x[n,c,:,:] * k[n,c]
  Var scale_channels(Var x, Var k) {
    const Tensor& vx = val(x);
    const Tensor& vk = val(k);
    if (vx.ndim() != 4 || vk.ndim() != 2 || vk.shape[0] != vx.shape[0] ||
        vk.shape[1] != vx.shape[1])
      throw std::invalid_argument("scale_channels: shape mismatch");
    const std::int64_t hw = vx.shape[2] * vx.shape[3];
    Tensor out = vx;
    for (std::int64_t i = 0; i < vk.numel(); ++i) {
      double* p = out.data.data() + i * hw;
      for (std::int64_t j = 0; j < hw; ++j) p[j] *= vk[i];
    }
    return make(std::move(out), {x, k}, [x, k, hw](Tape& t, int id) {
      const Tensor& g = t.nodes[id].grad;
      const Tensor& vx = t.val(x);
      const Tensor& vk = t.val(k);
      if (t.needs_grad(x.id)) {
        Tensor& gx = t.ensure_grad(x.id);
        for (std::int64_t i = 0; i < vk.numel(); ++i) {
          const double* gp = g.data.data() + i * hw;
          double* p = gx.data.data() + i * hw;
          for (std::int64_t j = 0; j < hw; ++j) p[j] += gp[j] * vk[i];
        }
      }
      if (t.needs_grad(k.id)) {
        Tensor& gk = t.ensure_grad(k.id);
        for (std::int64_t i = 0; i < vk.numel(); ++i) {
          const double* gp = g.data.data() + i * hw;
          const double* xp = vx.data.data() + i * hw;
          double acc = 0.0;
          for (std::int64_t j = 0; j < hw; ++j) acc += gp[j] * xp[j];
          gk[i] += acc;
        }
      }
    });
  }

  // ---- concatenation ----

  Var concat_cols(Var a, Var b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (va.ndim() != 2 || vb.ndim() != 2 || va.shape[0] != vb.shape[0])
      throw std::invalid_argument("concat_cols: shape mismatch");
    const std::int64_t m = va.shape[0], p = va.shape[1], q = vb.shape[1];
    Tensor out({m, p + q});
    for (std::int64_t r = 0; r < m; ++r) {
      for (std::int64_t c = 0; c < p; ++c) out.at2(r, c) = va.at2(r, c);
      for (std::int64_t c = 0; c < q; ++c) out.at2(r, p + c) = vb.at2(r, c);
    }
    return make(std::move(out), {a, b}, [a, b, m, p, q](Tape& t, int id) {
      const Tensor& g = t.nodes[id].grad;
      if (t.needs_grad(a.id)) {
        Tensor& ga = t.ensure_grad(a.id);
        for (std::int64_t r = 0; r < m; ++r)
          for (std::int64_t c = 0; c < p; ++c) ga.at2(r, c) += g.at2(r, c);
      }
      if (t.needs_grad(b.id)) {
        Tensor& gb = t.ensure_grad(b.id);
        for (std::int64_t r = 0; r < m; ++r)
          for (std::int64_t c = 0; c < q; ++c) gb.at2(r, c) += g.at2(r, p + c);
      }
    });
  }

  Var concat_channels(Var a, Var b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (va.ndim() != 4 || vb.ndim() != 4 || va.shape[0] != vb.shape[0] ||
        va.shape[2] != vb.shape[2] || va.shape[3] != vb.shape[3])
      throw std::invalid_argument("concat_channels: shape mismatch");
    const std::int64_t n = va.shape[0], c1 = va.shape[1], c2 = vb.shape[1];
    const std::int64_t hw = va.shape[2] * va.shape[3];
    Tensor out({n, c1 + c2, va.shape[2], va.shape[3]});
    for (std::int64_t s = 0; s < n; ++s) {
      std::copy_n(va.data.data() + s * c1 * hw, c1 * hw, out.data.data() + s * (c1 + c2) * hw);
      std::copy_n(vb.data.data() + s * c2 * hw, c2 * hw,
                  out.data.data() + s * (c1 + c2) * hw + c1 * hw);
    }
    return make(std::move(out), {a, b}, [a, b, n, c1, c2, hw](Tape& t, int id) {
      const Tensor& g = t.nodes[id].grad;
      if (t.needs_grad(a.id)) {
        Tensor& ga = t.ensure_grad(a.id);
        for (std::int64_t s = 0; s < n; ++s) {
          const double* gp = g.data.data() + s * (c1 + c2) * hw;
          double* p = ga.data.data() + s * c1 * hw;
          for (std::int64_t i = 0; i < c1 * hw; ++i) p[i] += gp[i];
        }
      }
      if (t.needs_grad(b.id)) {
        Tensor& gb = t.ensure_grad(b.id);
        for (std::int64_t s = 0; s < n; ++s) {
          const double* gp = g.data.data() + s * (c1 + c2) * hw + c1 * hw;
          double* p = gb.data.data() + s * c2 * hw;
          for (std::int64_t i = 0; i < c2 * hw; ++i) p[i] += gp[i];
        }
      }
    });
  }

  // ---- block geometry (all bijective index maps, hence bit-exact) ----

  // (n, c, H, W) -> (n, c, l, N); l = (H/B)*(W/B), N = B*B,
  // blocks in row-major block order, pixels row-major within a block.
  Var unfold_blocks(Var x, std::int64_t B) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 4) throw std::invalid_argument("unfold: need 4-D");
    const std::int64_t n = vx.shape[0], c = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
    if (H % B != 0 || W % B != 0)
      throw std::invalid_argument("unfold: image " + std::to_string(H) + "x" +
                                  std::to_string(W) + " not divisible by block size " +
                                  std::to_string(B));
    const std::int64_t gh = H / B, gw = W / B, l = gh * gw, N = B * B;
    Tensor out({n, c, l, N});
    for (std::int64_t s = 0; s < n; ++s)
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t by = 0; by < gh; ++by)
          for (std::int64_t bx = 0; bx < gw; ++bx)
            for (std::int64_t py = 0; py < B; ++py)
              for (std::int64_t px = 0; px < B; ++px)
                out[(((s * c + ch) * l + by * gw + bx) * N + py * B + px)] =
                    vx.at4(s, ch, by * B + py, bx * B + px);
    return make(std::move(out), {x}, [x, B](Tape& t, int id) {
      if (!t.needs_grad(x.id)) return;
      const Tensor& g = t.nodes[id].grad;
      Tensor& gx = t.ensure_grad(x.id);
      const std::int64_t n = gx.shape[0], c = gx.shape[1], H = gx.shape[2], W = gx.shape[3];
      const std::int64_t gh = H / B, gw = W / B, l = gh * gw, N = B * B;
      for (std::int64_t s = 0; s < n; ++s)
        for (std::int64_t ch = 0; ch < c; ++ch)
          for (std::int64_t by = 0; by < gh; ++by)
            for (std::int64_t bx = 0; bx < gw; ++bx)
              for (std::int64_t py = 0; py < B; ++py)
                for (std::int64_t px = 0; px < B; ++px)
                  gx.at4(s, ch, by * B + py, bx * B + px) +=
                      g[(((s * c + ch) * l + by * gw + bx) * N + py * B + px)];
    });
  }

  // exact inverse of unfold_blocks
  Var fold_blocks(Var x, std::int64_t gh, std::int64_t gw, std::int64_t B) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 4) throw std::invalid_argument("fold: need 4-D (n,c,l,N)");
    const std::int64_t n = vx.shape[0], c = vx.shape[1], l = vx.shape[2], N = vx.shape[3];
    if (l != gh * gw || N != B * B)
      throw std::invalid_argument("fold: block count " + std::to_string(l) +
                                  " does not match grid " + std::to_string(gh) + "x" +
                                  std::to_string(gw));
    Tensor out({n, c, gh * B, gw * B});
    for (std::int64_t s = 0; s < n; ++s)
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t by = 0; by < gh; ++by)
          for (std::int64_t bx = 0; bx < gw; ++bx)
            for (std::int64_t py = 0; py < B; ++py)
              for (std::int64_t px = 0; px < B; ++px)
                out.at4(s, ch, by * B + py, bx * B + px) =
                    vx[(((s * c + ch) * l + by * gw + bx) * N + py * B + px)];
    return make(std::move(out), {x}, [x, gh, gw, B](Tape& t, int id) {
      if (!t.needs_grad(x.id)) return;
      const Tensor& g = t.nodes[id].grad;
      Tensor& gx = t.ensure_grad(x.id);
      const std::int64_t n = gx.shape[0], c = gx.shape[1], l = gx.shape[2], N = gx.shape[3];
      (void)N;
      for (std::int64_t s = 0; s < n; ++s)
        for (std::int64_t ch = 0; ch < c; ++ch)
          for (std::int64_t by = 0; by < gh; ++by)
            for (std::int64_t bx = 0; bx < gw; ++bx)
              for (std::int64_t py = 0; py < B; ++py)
                for (std::int64_t px = 0; px < B; ++px)
                  gx[(((s * c + ch) * l + by * gw + bx) * (B * B) + py * B + px)] +=
                      g.at4(s, ch, by * B + py, bx * B + px);
    });
  }

  // (n, c, l, N) -> (c, N) for image s, block i. Per-image selection because
  // every image carries its own allocation {q_i}.
  Var select_block(Var x, std::int64_t s, std::int64_t i) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 4) throw std::invalid_argument("select_block: need (n,c,l,N)");
    const std::int64_t n = vx.shape[0], c = vx.shape[1], l = vx.shape[2], N = vx.shape[3];
    if (s < 0 || s >= n || i < 0 || i >= l)
      throw std::invalid_argument("select_block: bad index");
    Tensor out({c, N});
    for (std::int64_t ch = 0; ch < c; ++ch)
      std::copy_n(vx.data.data() + ((s * c + ch) * l + i) * N, N,
                  out.data.data() + ch * N);
    return make(std::move(out), {x}, [x, s, i](Tape& t, int id) {
      if (!t.needs_grad(x.id)) return;
      const Tensor& g = t.nodes[id].grad;
      Tensor& gx = t.ensure_grad(x.id);
      const std::int64_t c = gx.shape[1], l = gx.shape[2], N = gx.shape[3];
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double* p = gx.data.data() + ((s * c + ch) * l + i) * N;
        const double* gp = g.data.data() + ch * N;
        for (std::int64_t j = 0; j < N; ++j) p[j] += gp[j];
      }
    });
  }

  // inverse of n*l calls to select_block: blocks[s*l + i] is (c, N)
  Var assemble_blocks(const std::vector<Var>& blocks, std::int64_t n, std::int64_t c,
                      std::int64_t l) {
    if (static_cast<std::int64_t>(blocks.size()) != n * l)
      throw std::invalid_argument("assemble_blocks: expected n*l blocks");
    const std::int64_t N = val(blocks[0]).shape[1];
    Tensor out({n, c, l, N});
    bool needs = false;
    for (std::int64_t s = 0; s < n; ++s)
      for (std::int64_t i = 0; i < l; ++i) {
        const Tensor& vb = val(blocks[static_cast<std::size_t>(s * l + i)]);
        if (vb.ndim() != 2 || vb.shape[0] != c || vb.shape[1] != N)
          throw std::invalid_argument("assemble_blocks: shape mismatch");
        for (std::int64_t ch = 0; ch < c; ++ch)
          std::copy_n(vb.data.data() + ch * N, N,
                      out.data.data() + ((s * c + ch) * l + i) * N);
        needs = needs || nodes[blocks[static_cast<std::size_t>(s * l + i)].id].needs_grad;
      }
    auto blocks_copy = blocks;
    Node node;
    node.val = std::move(out);
    node.needs_grad = needs;
    if (needs)
      node.backward = [blocks_copy, n, c, l](Tape& t, int id) {
        const Tensor& g = t.nodes[id].grad;
        const std::int64_t N = g.shape[3];
        for (std::int64_t s = 0; s < n; ++s)
          for (std::int64_t i = 0; i < l; ++i) {
            const Var b = blocks_copy[static_cast<std::size_t>(s * l + i)];
            if (!t.needs_grad(b.id)) continue;
            Tensor& gb = t.ensure_grad(b.id);
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const double* gp = g.data.data() + ((s * c + ch) * l + i) * N;
              double* p = gb.data.data() + ch * N;
              for (std::int64_t j = 0; j < N; ++j) p[j] += gp[j];
            }
          }
      };
    nodes.push_back(std::move(node));
    return Var{static_cast<int>(nodes.size()) - 1};
  }

  // (n, c, l, N) -> (n, l): per-block sum of squares over channels and pixels
  Var block_sumsq(Var x) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 4) throw std::invalid_argument("block_sumsq: need (n,c,l,N)");
    const std::int64_t n = vx.shape[0], c = vx.shape[1], l = vx.shape[2], N = vx.shape[3];
    Tensor out({n, l});
    for (std::int64_t s = 0; s < n; ++s)
      for (std::int64_t i = 0; i < l; ++i) {
        double acc = 0.0;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const double* p = vx.data.data() + ((s * c + ch) * l + i) * N;
          for (std::int64_t j = 0; j < N; ++j) acc += p[j] * p[j];
        }
        out.at2(s, i) = acc;
      }
    return make(std::move(out), {x}, [x](Tape& t, int id) {
      if (!t.needs_grad(x.id)) return;
      const Tensor& g = t.nodes[id].grad;
      const Tensor& vx = t.val(x);
      Tensor& gx = t.ensure_grad(x.id);
      const std::int64_t n = vx.shape[0], c = vx.shape[1], l = vx.shape[2], N = vx.shape[3];
      for (std::int64_t s = 0; s < n; ++s)
        for (std::int64_t i = 0; i < l; ++i) {
          const double gv = 2.0 * g.at2(s, i);
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const double* p = vx.data.data() + ((s * c + ch) * l + i) * N;
            double* q = gx.data.data() + ((s * c + ch) * l + i) * N;
            for (std::int64_t j = 0; j < N; ++j) q[j] += gv * p[j];
          }
        }
    });
  }

  // (n, c, l, N) -> (n*l, c, B, B): regroup blocks as standalone samples so a
  // network can be applied identically to every block region.
  Var blocks_to_samples(Var x, std::int64_t B) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 4) throw std::invalid_argument("blocks_to_samples: need (n,c,l,N)");
    const std::int64_t n = vx.shape[0], c = vx.shape[1], l = vx.shape[2], N = vx.shape[3];
    if (N != B * B) throw std::invalid_argument("blocks_to_samples: N != B*B");
    Tensor out({n * l, c, B, B});
    for (std::int64_t s = 0; s < n; ++s)
      for (std::int64_t i = 0; i < l; ++i)
        for (std::int64_t ch = 0; ch < c; ++ch)
          std::copy_n(vx.data.data() + ((s * c + ch) * l + i) * N, N,
                      out.data.data() + (((s * l + i) * c + ch)) * N);
    return make(std::move(out), {x}, [x](Tape& t, int id) {
      if (!t.needs_grad(x.id)) return;
      const Tensor& g = t.nodes[id].grad;
      Tensor& gx = t.ensure_grad(x.id);
      const std::int64_t n = gx.shape[0], c = gx.shape[1], l = gx.shape[2], N = gx.shape[3];
      for (std::int64_t s = 0; s < n; ++s)
        for (std::int64_t i = 0; i < l; ++i)
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const double* gp = g.data.data() + ((s * l + i) * c + ch) * N;
            double* p = gx.data.data() + ((s * c + ch) * l + i) * N;
            for (std::int64_t j = 0; j < N; ++j) p[j] += gp[j];
          }
    });
  }

  // nearest-neighbour upsample of a block grid to pixel resolution:
  // (n, c, gh, gw) -> (n, c, gh*B, gw*B)
  Var upsample_blocks(Var x, std::int64_t B) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 4) throw std::invalid_argument("upsample: need 4-D");
    const std::int64_t n = vx.shape[0], c = vx.shape[1], gh = vx.shape[2], gw = vx.shape[3];
    Tensor out({n, c, gh * B, gw * B});
    for (std::int64_t s = 0; s < n * c; ++s) {
      const double* src = vx.data.data() + s * gh * gw;
      double* dst = out.data.data() + s * gh * gw * B * B;
      for (std::int64_t y = 0; y < gh * B; ++y)
        for (std::int64_t x2 = 0; x2 < gw * B; ++x2)
          dst[y * gw * B + x2] = src[(y / B) * gw + (x2 / B)];
    }
    return make(std::move(out), {x}, [x, B](Tape& t, int id) {
      if (!t.needs_grad(x.id)) return;
      const Tensor& g = t.nodes[id].grad;
      Tensor& gx = t.ensure_grad(x.id);
      const std::int64_t nc = gx.shape[0] * gx.shape[1];
      const std::int64_t gh = gx.shape[2], gw = gx.shape[3];
      for (std::int64_t s = 0; s < nc; ++s) {
        const double* gp = g.data.data() + s * gh * gw * B * B;
        double* p = gx.data.data() + s * gh * gw;
        for (std::int64_t y = 0; y < gh * B; ++y)
          for (std::int64_t x2 = 0; x2 < gw * B; ++x2)
            p[(y / B) * gw + (x2 / B)] += gp[y * gw * B + x2];
      }
    });
  }

  // ---- reductions / normalizations ----

  Var sum_all(Var x) {
    double acc = 0.0;
    for (double v : val(x).data) acc += v;
    return make(Tensor::scalar(acc), {x}, [x](Tape& t, int id) {
      if (!t.needs_grad(x.id)) return;
      const double g = t.nodes[id].grad[0];
      Tensor& gx = t.ensure_grad(x.id);
      for (auto& v : gx.data) v += g;
    });
  }

  Var mean_all(Var x) { return scale(sum_all(x), 1.0 / static_cast<double>(val(x).numel())); }

  // scalar sum of squared differences
  Var sq_err_sum(Var a, Var b) {
    check_same_shape(val(a), val(b), "sq_err_sum");
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    double acc = 0.0;
    for (std::int64_t i = 0; i < va.numel(); ++i) {
      const double d = va[i] - vb[i];
      acc += d * d;
    }
    return make(Tensor::scalar(acc), {a, b}, [a, b](Tape& t, int id) {
      const double g = t.nodes[id].grad[0];
      const Tensor& va = t.val(a);
      const Tensor& vb = t.val(b);
      if (t.needs_grad(a.id)) {
        Tensor& ga = t.ensure_grad(a.id);
        for (std::int64_t i = 0; i < va.numel(); ++i) ga[i] += 2.0 * g * (va[i] - vb[i]);
      }
      if (t.needs_grad(b.id)) {
        Tensor& gb = t.ensure_grad(b.id);
        for (std::int64_t i = 0; i < va.numel(); ++i) gb[i] -= 2.0 * g * (va[i] - vb[i]);
      }
    });
  }

  // (m, k) -> (m): per-row sum of squares
  Var row_sumsq(Var x) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 2) throw std::invalid_argument("row_sumsq: need 2-D");
    const std::int64_t m = vx.shape[0], k = vx.shape[1];
    Tensor out({m});
    for (std::int64_t r = 0; r < m; ++r) {
      double acc = 0.0;
      for (std::int64_t c = 0; c < k; ++c) acc += vx.at2(r, c) * vx.at2(r, c);
      out[r] = acc;
    }
    return make(std::move(out), {x}, [x](Tape& t, int id) {
      if (!t.needs_grad(x.id)) return;
      const Tensor& g = t.nodes[id].grad;
      const Tensor& vx = t.val(x);
      Tensor& gx = t.ensure_grad(x.id);
      const std::int64_t m = vx.shape[0], k = vx.shape[1];
      for (std::int64_t r = 0; r < m; ++r)
        for (std::int64_t c = 0; c < k; ++c) gx.at2(r, c) += 2.0 * g[r] * vx.at2(r, c);
    });
  }

  // rows rescaled to sum to 1 (inputs must have strictly positive row sums)
  Var row_normalize(Var x) {
    const Tensor& vx = val(x);
    if (vx.ndim() != 2) throw std::invalid_argument("row_normalize: need 2-D");
    const std::int64_t m = vx.shape[0], k = vx.shape[1];
    Tensor out = vx;
    std::vector<double> sums(static_cast<std::size_t>(m));
    for (std::int64_t r = 0; r < m; ++r) {
      double s = 0.0;
      for (std::int64_t c = 0; c < k; ++c) s += vx.at2(r, c);
      if (!(s > 0.0)) throw std::domain_error("row_normalize: nonpositive row sum");
      sums[static_cast<std::size_t>(r)] = s;
      for (std::int64_t c = 0; c < k; ++c) out.at2(r, c) /= s;
    }
    return make(std::move(out), {x}, [x, sums](Tape& t, int id) {
      if (!t.needs_grad(x.id)) return;
      const Tensor& g = t.nodes[id].grad;
      const Tensor& vx = t.val(x);
      Tensor& gx = t.ensure_grad(x.id);
      const std::int64_t m = vx.shape[0], k = vx.shape[1];
      for (std::int64_t r = 0; r < m; ++r) {
        const double s = sums[static_cast<std::size_t>(r)];
        double dot = 0.0;
        for (std::int64_t c = 0; c < k; ++c) dot += g.at2(r, c) * vx.at2(r, c);
        for (std::int64_t c = 0; c < k; ++c)
          gx.at2(r, c) += g.at2(r, c) / s - dot / (s * s);
      }
    });
  }

  // Scale so that the mean squared magnitude per complex symbol is 1.
  // The tensor holds 2*k real components; per_image normalizes each
  // leading-axis slice separately. Zero input passes through unscaled.
  Var power_normalize(Var x, bool per_image, double* measured_power = nullptr) {
    const Tensor& vx = val(x);
    const std::int64_t n = per_image ? vx.shape[0] : 1;
    const std::int64_t chunk = vx.numel() / n;
    if (chunk % 2 != 0) throw std::invalid_argument("power_normalize: odd component count");
    const double kc = static_cast<double>(chunk) / 2.0;
    Tensor out = vx;
    std::vector<double> scales(static_cast<std::size_t>(n), 1.0);
    std::vector<double> sumsqs(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t s = 0; s < n; ++s) {
      const double* p = vx.data.data() + s * chunk;
      double ss = 0.0;
      for (std::int64_t i = 0; i < chunk; ++i) ss += p[i] * p[i];
      sumsqs[static_cast<std::size_t>(s)] = ss;
      const double sc = ss > 0.0 ? std::sqrt(kc / ss) : 1.0;
      scales[static_cast<std::size_t>(s)] = sc;
      double* q = out.data.data() + s * chunk;
      for (std::int64_t i = 0; i < chunk; ++i) q[i] *= sc;
    }
    if (measured_power) {
      double total = 0.0;
      for (double ss : sumsqs) total += ss;
      *measured_power = total / (kc * static_cast<double>(n));
    }
    return make(std::move(out), {x}, [x, n, chunk, scales, sumsqs](Tape& t, int id) {
      if (!t.needs_grad(x.id)) return;
      const Tensor& g = t.nodes[id].grad;
      const Tensor& vx = t.val(x);
      Tensor& gx = t.ensure_grad(x.id);
      for (std::int64_t s = 0; s < n; ++s) {
        const double sc = scales[static_cast<std::size_t>(s)];
        const double ss = sumsqs[static_cast<std::size_t>(s)];
        const double* gp = g.data.data() + s * chunk;
        const double* xp = vx.data.data() + s * chunk;
        double* out = gx.data.data() + s * chunk;
        if (ss <= 0.0) {
          for (std::int64_t i = 0; i < chunk; ++i) out[i] += gp[i];
          continue;
        }
        double dot = 0.0;
        for (std::int64_t i = 0; i < chunk; ++i) dot += gp[i] * xp[i];
        for (std::int64_t i = 0; i < chunk; ++i)
          out[i] += sc * gp[i] - (sc * xp[i] / ss) * dot;
      }
    });
  }

 private:
  Var make(Tensor out, std::initializer_list<Var> parents,
           std::function<void(Tape&, int)> bw) {
    Node n;
    n.val = std::move(out);
    bool needs = false;
    for (Var p : parents) needs = needs || nodes[p.id].needs_grad;
    n.needs_grad = needs;
    if (needs) n.backward = std::move(bw);
    nodes.push_back(std::move(n));
    return Var{static_cast<int>(nodes.size()) - 1};
  }

  void accum_same(Var v, const Tensor& g) {
    if (!needs_grad(v.id)) return;
    Tensor& gv = ensure_grad(v.id);
    for (std::int64_t i = 0; i < g.numel(); ++i) gv[i] += g[i];
  }
};

}  // namespace ajsscc
