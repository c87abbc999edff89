#include "mrvi/diff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mrvi/special.hpp"

namespace mrvi {

// ---- Graph --------------------------------------------------------------------

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, {}});
  return Var{this, nodes_.size() - 1};
}

Var Graph::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, record_, false, {}});
  return Var{this, nodes_.size() - 1};
}

Var Graph::emit(Tensor value, bool requires_grad, Backward backward) {
  const bool keep = record_ && requires_grad;
  nodes_.push_back(Node{std::move(value), {}, keep, false, keep ? std::move(backward) : Backward{}});
  return Var{this, nodes_.size() - 1};
}

const Tensor& Graph::adjoint(Var v) {
  Node& n = nodes_.at(v.id);
  if (!n.has_adjoint) {
    n.adjoint = Tensor(n.value.shape());
    n.has_adjoint = true;
  }
  return n.adjoint;
}

Tensor& Graph::adjoint_for_update(Var v) {
  adjoint(v);
  return nodes_[v.id].adjoint;
}

void Graph::backward(Var root) {
  if (root.graph != this) throw ArgumentError("backward root belongs to another graph");
  if (!record_) throw ArgumentError("backward on a graph that does not record");
  const Node& r = nodes_.at(root.id);
  if (r.value.size() != 1) throw DimensionError("backward root must be scalar, got " + shape_string(r.value.shape()));
  adjoint_for_update(root).data().setOnes();
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && n.has_adjoint) n.backward(*this, Var{this, i});
  }
}

namespace {

using Storage = Tensor::Storage;
using ConstRowMap = Eigen::Map<const RowMajorMatrix<double>>;
using RowMap = Eigen::Map<RowMajorMatrix<double>>;

Graph& graph_of(Var a) { return *a.graph; }

Graph& graph_of(Var a, Var b) {
  if (a.graph != b.graph) throw ArgumentError("operands belong to different graphs");
  return *a.graph;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* name) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": " + name + " must have rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
}

// Elementwise unary op whose local derivative is a function of (x, y).
template <typename Deriv>
Var unary(Var a, Tensor out, Deriv deriv) {
  Graph& g = graph_of(a);
  return g.emit(std::move(out), a.requires_grad(), [a, deriv](Graph& gr, Var self) {
    const Tensor& x = gr.value(a);
    const Tensor& y = gr.value(self);
    const Storage& dy = gr.adjoint(self).data();
    gr.adjoint_for_update(a).data().array() += dy.array() * deriv(x.data().array(), y.data().array());
  });
}

template <typename Fn>
Tensor map_values(const Tensor& x, Fn fn) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fn(x[i]);
  return out;
}

}  // namespace

double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---- affine / convolution -----------------------------------------------------

Var linear(Var x, Var w, Var b) {
  Graph& g = graph_of(x, w);
  graph_of(x, b);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require_rank(xv, 2, "linear", "x");
  require_rank(wv, 2, "linear", "w");
  require_rank(bv, 1, "linear", "b");
  const std::size_t batch = xv.dim(0), in = xv.dim(1), out = wv.dim(1);
  if (wv.dim(0) != in)
    throw DimensionError("linear: axis 1 of x (" + std::to_string(in) + ") does not match axis 0 of w (" +
                         std::to_string(wv.dim(0)) + ")");
  if (bv.dim(0) != out)
    throw DimensionError("linear: axis 0 of b (" + std::to_string(bv.dim(0)) + ") does not match axis 1 of w (" +
                         std::to_string(out) + ")");

  Tensor y({batch, out});
  ConstRowMap X(xv.ptr(), Eigen::Index(batch), Eigen::Index(in));
  ConstRowMap W(wv.ptr(), Eigen::Index(in), Eigen::Index(out));
  RowMap Y(y.ptr(), Eigen::Index(batch), Eigen::Index(out));
  Y.noalias() = X * W;
  Y.rowwise() += bv.data().transpose();

  const bool rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
  return g.emit(std::move(y), rg, [x, w, b, batch, in, out](Graph& gr, Var self) {
    ConstRowMap dY(gr.adjoint(self).ptr(), Eigen::Index(batch), Eigen::Index(out));
    ConstRowMap X(gr.value(x).ptr(), Eigen::Index(batch), Eigen::Index(in));
    ConstRowMap W(gr.value(w).ptr(), Eigen::Index(in), Eigen::Index(out));
    if (x.requires_grad()) {
      RowMap dX(gr.adjoint_for_update(x).ptr(), Eigen::Index(batch), Eigen::Index(in));
      dX.noalias() += dY * W.transpose();
    }
    if (w.requires_grad()) {
      RowMap dW(gr.adjoint_for_update(w).ptr(), Eigen::Index(in), Eigen::Index(out));
      dW.noalias() += X.transpose() * dY;
    }
    if (b.requires_grad()) gr.adjoint_for_update(b).data() += dY.colwise().sum().transpose();
  });
}

namespace {

struct ConvGeometry {
  std::size_t batch, channels, height, width, filters, out_h, out_w;
  int stride;
  std::size_t patch() const { return channels * 9; }
  std::size_t pixels() const { return out_h * out_w; }
};

void im2col(const double* x, const ConvGeometry& geo, RowMajorMatrix<double>& cols) {
  cols.setZero(Eigen::Index(geo.patch()), Eigen::Index(geo.pixels()));
  const auto H = long(geo.height), W = long(geo.width), s = long(geo.stride);
  for (std::size_t c = 0; c < geo.channels; ++c) {
    const double* plane = x + c * geo.height * geo.width;
    for (long ky = 0; ky < 3; ++ky) {
      for (long kx = 0; kx < 3; ++kx) {
        double* row = cols.data() + (c * 9 + std::size_t(ky * 3 + kx)) * geo.pixels();
        for (long oy = 0; oy < long(geo.out_h); ++oy) {
          const long iy = oy * s + ky - 1;
          if (iy < 0 || iy >= H) continue;
          for (long ox = 0; ox < long(geo.out_w); ++ox) {
            const long ix = ox * s + kx - 1;
            if (ix < 0 || ix >= W) continue;
            row[oy * long(geo.out_w) + ox] = plane[iy * W + ix];
          }
        }
      }
    }
  }
}

void col2im_add(const RowMajorMatrix<double>& cols, const ConvGeometry& geo, double* dx) {
  const auto H = long(geo.height), W = long(geo.width), s = long(geo.stride);
  for (std::size_t c = 0; c < geo.channels; ++c) {
    double* plane = dx + c * geo.height * geo.width;
    for (long ky = 0; ky < 3; ++ky) {
      for (long kx = 0; kx < 3; ++kx) {
        const double* row = cols.data() + (c * 9 + std::size_t(ky * 3 + kx)) * geo.pixels();
        for (long oy = 0; oy < long(geo.out_h); ++oy) {
          const long iy = oy * s + ky - 1;
          if (iy < 0 || iy >= H) continue;
          for (long ox = 0; ox < long(geo.out_w); ++ox) {
            const long ix = ox * s + kx - 1;
            if (ix < 0 || ix >= W) continue;
            plane[iy * W + ix] += row[oy * long(geo.out_w) + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var x, Var k, Var b, int stride) {
  Graph& g = graph_of(x, k);
  graph_of(x, b);
  const Tensor& xv = x.value();
  const Tensor& kv = k.value();
  const Tensor& bv = b.value();
  require_rank(xv, 4, "conv2d", "x");
  require_rank(kv, 4, "conv2d", "kernel");
  require_rank(bv, 1, "conv2d", "bias");
  if (stride != 1 && stride != 2) throw ArgumentError("conv2d: stride must be 1 or 2");
  if (kv.dim(2) != 3 || kv.dim(3) != 3)
    throw DimensionError("conv2d: kernel must be 3x3, got " + shape_string(kv.shape()));
  if (kv.dim(1) != xv.dim(1))
    throw DimensionError("conv2d: channel mismatch on axis 1: input has " + std::to_string(xv.dim(1)) +
                         ", kernel expects " + std::to_string(kv.dim(1)));
  if (bv.dim(0) != kv.dim(0))
    throw DimensionError("conv2d: bias length " + std::to_string(bv.dim(0)) + " does not match " +
                         std::to_string(kv.dim(0)) + " filters");

  ConvGeometry geo{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), kv.dim(0), 0, 0, stride};
  geo.out_h = (geo.height - 1) / std::size_t(stride) + 1;
  geo.out_w = (geo.width - 1) / std::size_t(stride) + 1;

  Tensor y({geo.batch, geo.filters, geo.out_h, geo.out_w});
  ConstRowMap K(kv.ptr(), Eigen::Index(geo.filters), Eigen::Index(geo.patch()));
  const bool rg = x.requires_grad() || k.requires_grad() || b.requires_grad();
  std::vector<RowMajorMatrix<double>> saved(geo.batch);
  const std::size_t in_stride = geo.channels * geo.height * geo.width;
  const std::size_t out_stride = geo.filters * geo.pixels();
  for (std::size_t n = 0; n < geo.batch; ++n) {
    im2col(xv.ptr() + n * in_stride, geo, saved[n]);
    RowMap Y(y.ptr() + n * out_stride, Eigen::Index(geo.filters), Eigen::Index(geo.pixels()));
    Y.noalias() = K * saved[n];
    Y.colwise() += bv.data();
  }
  if (!(rg && g.recording())) saved.clear();

  return g.emit(std::move(y), rg, [x, k, b, geo, cols = std::move(saved)](Graph& gr, Var self) {
    const Tensor& dy = gr.adjoint(self);
    ConstRowMap K(gr.value(k).ptr(), Eigen::Index(geo.filters), Eigen::Index(geo.patch()));
    const std::size_t in_stride = geo.channels * geo.height * geo.width;
    const std::size_t out_stride = geo.filters * geo.pixels();
    RowMajorMatrix<double> dcols;
    for (std::size_t n = 0; n < geo.batch; ++n) {
      ConstRowMap dY(dy.ptr() + n * out_stride, Eigen::Index(geo.filters), Eigen::Index(geo.pixels()));
      if (k.requires_grad()) {
        RowMap dK(gr.adjoint_for_update(k).ptr(), Eigen::Index(geo.filters), Eigen::Index(geo.patch()));
        dK.noalias() += dY * cols[n].transpose();
      }
      if (b.requires_grad()) gr.adjoint_for_update(b).data() += dY.rowwise().sum();
      if (x.requires_grad()) {
        dcols.noalias() = K.transpose() * dY;
        col2im_add(dcols, geo, gr.adjoint_for_update(x).ptr() + n * in_stride);
      }
    }
  });
}

Var upsample2(Var x) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  require_rank(xv, 4, "upsample2", "x");
  const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor y({xv.dim(0), xv.dim(1), 2 * h, 2 * w});
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xv.ptr() + p * h * w;
    double* dst = y.ptr() + p * 4 * h * w;
    for (std::size_t iy = 0; iy < 2 * h; ++iy)
      for (std::size_t ix = 0; ix < 2 * w; ++ix) dst[iy * 2 * w + ix] = src[(iy / 2) * w + ix / 2];
  }
  return g.emit(std::move(y), x.requires_grad(), [x, planes, h, w](Graph& gr, Var self) {
    const double* dy = gr.adjoint(self).ptr();
    double* dx = gr.adjoint_for_update(x).ptr();
    for (std::size_t p = 0; p < planes; ++p) {
      const double* src = dy + p * 4 * h * w;
      double* dst = dx + p * h * w;
      for (std::size_t iy = 0; iy < 2 * h; ++iy)
        for (std::size_t ix = 0; ix < 2 * w; ++ix) dst[(iy / 2) * w + ix / 2] += src[iy * 2 * w + ix];
    }
  });
}

// ---- elementwise ----------------------------------------------------------------

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor y(a.shape(), Storage(a.value().data() + b.value().data()));
  return g.emit(std::move(y), a.requires_grad() || b.requires_grad(), [a, b](Graph& gr, Var self) {
    const Storage& dy = gr.adjoint(self).data();
    if (a.requires_grad()) gr.adjoint_for_update(a).data() += dy;
    if (b.requires_grad()) gr.adjoint_for_update(b).data() += dy;
  });
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor y(a.shape(), Storage(a.value().data() - b.value().data()));
  return g.emit(std::move(y), a.requires_grad() || b.requires_grad(), [a, b](Graph& gr, Var self) {
    const Storage& dy = gr.adjoint(self).data();
    if (a.requires_grad()) gr.adjoint_for_update(a).data() += dy;
    if (b.requires_grad()) gr.adjoint_for_update(b).data() -= dy;
  });
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor y(a.shape(), Storage(a.value().data().cwiseProduct(b.value().data())));
  return g.emit(std::move(y), a.requires_grad() || b.requires_grad(), [a, b](Graph& gr, Var self) {
    const Storage& dy = gr.adjoint(self).data();
    if (a.requires_grad()) gr.adjoint_for_update(a).data() += dy.cwiseProduct(gr.value(b).data());
    if (b.requires_grad()) gr.adjoint_for_update(b).data() += dy.cwiseProduct(gr.value(a).data());
  });
}

Var scale(Var a, double c) {
  Tensor y(a.shape(), Storage(a.value().data() * c));
  return unary(a, std::move(y), [c](const auto& x, const auto&) { return Eigen::ArrayXd::Constant(x.size(), c); });
}

Var add_scalar(Var a, double c) {
  Tensor y(a.shape(), Storage(a.value().data().array() + c));
  return unary(a, std::move(y), [](const auto& x, const auto&) { return Eigen::ArrayXd::Ones(x.size()); });
}

Var square(Var a) {
  Tensor y(a.shape(), Storage(a.value().data().array().square()));
  return unary(a, std::move(y), [](const auto& x, const auto&) { return 2.0 * x; });
}

Var reciprocal(Var a) {
  if ((a.value().data().array() == 0.0).any()) throw DomainError("reciprocal of zero");
  Tensor y(a.shape(), Storage(a.value().data().array().inverse()));
  return unary(a, std::move(y), [](const auto&, const auto& y) { return -y.square(); });
}

Var sqrt(Var a) {
  if ((a.value().data().array() <= 0.0).any()) throw DomainError("sqrt requires strictly positive input");
  Tensor y(a.shape(), Storage(a.value().data().array().sqrt()));
  return unary(a, std::move(y), [](const auto&, const auto& y) { return 0.5 / y; });
}

Var relu(Var a) {
  Tensor y(a.shape(), Storage(a.value().data().array().max(0.0)));
  return unary(a, std::move(y), [](const auto& x, const auto&) { return (x > 0.0).template cast<double>(); });
}

Var sigmoid(Var a) {
  Tensor y = map_values(a.value(), sigmoid_value);
  return unary(a, std::move(y), [](const auto&, const auto& y) { return y * (1.0 - y); });
}

Var exp(Var a) {
  Tensor y(a.shape(), Storage(a.value().data().array().exp()));
  return unary(a, std::move(y), [](const auto&, const auto& y) { return y; });
}

Var log(Var a) {
  for (std::size_t i = 0; i < a.value().size(); ++i)
    if (!(a.value()[i] > 0.0)) throw DomainError("log of non-positive value " + std::to_string(a.value()[i]));
  Tensor y(a.shape(), Storage(a.value().data().array().log()));
  return unary(a, std::move(y), [](const auto& x, const auto&) { return x.inverse(); });
}

Var softplus(Var a) {
  Tensor y = map_values(a.value(), softplus_value);
  return unary(a, std::move(y), [](const auto& x, const auto&) { return x.unaryExpr(&sigmoid_value); });
}

Var clamp(Var a, double lo, double hi) {
  Tensor y(a.shape(), Storage(a.value().data().array().max(lo).min(hi)));
  return unary(a, std::move(y),
               [lo, hi](const auto& x, const auto&) { return ((x >= lo) && (x <= hi)).template cast<double>(); });
}

Var lgamma(Var a) {
  Tensor y = map_values(a.value(), [](double v) { return special::lgamma(v); });
  return unary(a, std::move(y), [](const auto& x, const auto&) {
    return x.unaryExpr([](double v) { return special::digamma(v); });
  });
}

Var digamma(Var a) {
  Tensor y = map_values(a.value(), [](double v) { return special::digamma(v); });
  return unary(a, std::move(y), [](const auto& x, const auto&) {
    return x.unaryExpr([](double v) { return special::trigamma(v); });
  });
}

// ---- reductions / structure -----------------------------------------------------

Var sum(Var a) {
  Graph& g = graph_of(a);
  Tensor y = Tensor::scalar(a.value().data().sum());
  return g.emit(std::move(y), a.requires_grad(), [a](Graph& gr, Var self) {
    gr.adjoint_for_update(a).data().array() += gr.adjoint(self).item();
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ArgumentError("mean of empty tensor");
  return scale(sum(a), 1.0 / double(n));
}

Var expand(Var scalar, Shape shape) {
  Graph& g = graph_of(scalar);
  const double v = scalar.value().item();
  Tensor y(std::move(shape), v);
  return g.emit(std::move(y), scalar.requires_grad(), [scalar](Graph& gr, Var self) {
    gr.adjoint_for_update(scalar).data()[0] += gr.adjoint(self).data().sum();
  });
}

Var reshape(Var a, Shape shape) {
  Graph& g = graph_of(a);
  Tensor y = a.value().reshaped(std::move(shape));
  return g.emit(std::move(y), a.requires_grad(), [a](Graph& gr, Var self) {
    gr.adjoint_for_update(a).data() += gr.adjoint(self).data();
  });
}

Var softmax(Var a, int axis) {
  Graph& g = graph_of(a);
  const Tensor& x = a.value();
  const int rank = int(x.rank());
  if (rank == 0) throw DimensionError("softmax of a scalar");
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("softmax: axis out of range for " + shape_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(std::size_t(i));
  for (int i = axis + 1; i < rank; ++i) inner *= x.dim(std::size_t(i));
  const std::size_t n = x.dim(std::size_t(axis));

  Tensor y(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double m = x[base];
      for (std::size_t j = 1; j < n; ++j) m = std::max(m, x[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += (y[base + j * inner] = std::exp(x[base + j * inner] - m));
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] /= total;
    }
  }
  return g.emit(std::move(y), a.requires_grad(), [a, outer, inner, n](Graph& gr, Var self) {
    const Tensor& yv = gr.value(self);
    const Tensor& dy = gr.adjoint(self);
    Tensor& dx = gr.adjoint_for_update(a);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[base + j * inner] * yv[base + j * inner];
        for (std::size_t j = 0; j < n; ++j)
          dx[base + j * inner] += yv[base + j * inner] * (dy[base + j * inner] - dot);
      }
    }
  });
}

Var concat_channels(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 4, "concat_channels", "a");
  require_rank(bv, 4, "concat_channels", "b");
  if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3))
    throw DimensionError("concat_channels: " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  const std::size_t batch = av.dim(0), ca = av.dim(1), cb = bv.dim(1), plane = av.dim(2) * av.dim(3);
  Tensor y({batch, ca + cb, av.dim(2), av.dim(3)});
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(av.ptr() + n * ca * plane, ca * plane, y.ptr() + n * (ca + cb) * plane);
    std::copy_n(bv.ptr() + n * cb * plane, cb * plane, y.ptr() + n * (ca + cb) * plane + ca * plane);
  }
  return g.emit(std::move(y), a.requires_grad() || b.requires_grad(),
                [a, b, batch, ca, cb, plane](Graph& gr, Var self) {
                  const double* dy = gr.adjoint(self).ptr();
                  for (std::size_t n = 0; n < batch; ++n) {
                    const double* src = dy + n * (ca + cb) * plane;
                    if (a.requires_grad()) {
                      double* da = gr.adjoint_for_update(a).ptr() + n * ca * plane;
                      for (std::size_t i = 0; i < ca * plane; ++i) da[i] += src[i];
                    }
                    if (b.requires_grad()) {
                      double* db = gr.adjoint_for_update(b).ptr() + n * cb * plane;
                      for (std::size_t i = 0; i < cb * plane; ++i) db[i] += src[ca * plane + i];
                    }
                  }
                });
}

Var slice_channels(Var x, std::size_t begin, std::size_t count) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  require_rank(xv, 4, "slice_channels", "x");
  if (begin + count > xv.dim(1))
    throw DimensionError("slice_channels: channels [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                         ") exceed axis 1 extent " + std::to_string(xv.dim(1)));
  const std::size_t batch = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor y({batch, count, xv.dim(2), xv.dim(3)});
  for (std::size_t n = 0; n < batch; ++n)
    std::copy_n(xv.ptr() + (n * c + begin) * plane, count * plane, y.ptr() + n * count * plane);
  return g.emit(std::move(y), x.requires_grad(), [x, batch, c, begin, count, plane](Graph& gr, Var self) {
    const double* dy = gr.adjoint(self).ptr();
    double* dx = gr.adjoint_for_update(x).ptr();
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t i = 0; i < count * plane; ++i) dx[(n * c + begin) * plane + i] += dy[n * count * plane + i];
  });
}

Var broadcast_channels(Var v, std::size_t height, std::size_t width) {
  Graph& g = graph_of(v);
  const Tensor& vv = v.value();
  require_rank(vv, 1, "broadcast_channels", "v");
  const std::size_t k = vv.dim(0), plane = height * width;
  Tensor y({1, k, height, width});
  for (std::size_t c = 0; c < k; ++c) std::fill_n(y.ptr() + c * plane, plane, vv[c]);
  return g.emit(std::move(y), v.requires_grad(), [v, k, plane](Graph& gr, Var self) {
    const double* dy = gr.adjoint(self).ptr();
    Tensor& dv = gr.adjoint_for_update(v);
    for (std::size_t c = 0; c < k; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += dy[c * plane + i];
      dv[c] += acc;
    }
  });
}

Var take_row(Var a, std::size_t row) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  require_rank(av, 2, "take_row", "a");
  if (row >= av.dim(0)) throw IndexError("take_row: row " + std::to_string(row) + " out of range");
  const std::size_t cols = av.dim(1);
  Tensor y({cols});
  std::copy_n(av.ptr() + row * cols, cols, y.ptr());
  return g.emit(std::move(y), a.requires_grad(), [a, row, cols](Graph& gr, Var self) {
    const double* dy = gr.adjoint(self).ptr();
    double* da = gr.adjoint_for_update(a).ptr() + row * cols;
    for (std::size_t i = 0; i < cols; ++i) da[i] += dy[i];
  });
}

Var pick(Var a, std::size_t index) {
  Graph& g = graph_of(a);
  if (index >= a.value().size()) throw IndexError("pick: index " + std::to_string(index) + " out of range");
  Tensor y = Tensor::scalar(a.value()[index]);
  return g.emit(std::move(y), a.requires_grad(), [a, index](Graph& gr, Var self) {
    gr.adjoint_for_update(a)[index] += gr.adjoint(self).item();
  });
}

// ---- fused losses ------------------------------------------------------------------

Var cross_entropy_logits(Var logits, std::size_t target) {
  Graph& g = graph_of(logits);
  const Tensor& z = logits.value();
  if (target >= z.size())
    throw IndexError("cross_entropy_logits: target " + std::to_string(target) + " out of range for " +
                     std::to_string(z.size()) + " classes");
  const double m = z.data().maxCoeff();
  const double lse = m + std::log((z.data().array() - m).exp().sum());
  Tensor y = Tensor::scalar(lse - z[target]);
  return g.emit(std::move(y), logits.requires_grad(), [logits, target, lse](Graph& gr, Var self) {
    const double gy = gr.adjoint(self).item();
    const Tensor& zv = gr.value(logits);
    Tensor& dz = gr.adjoint_for_update(logits);
    for (std::size_t i = 0; i < zv.size(); ++i) dz[i] += gy * (std::exp(zv[i] - lse) - (i == target ? 1.0 : 0.0));
  });
}

Var pixel_cross_entropy(Var logits, std::span<const std::uint8_t> labels) {
  Graph& g = graph_of(logits);
  const Tensor& z = logits.value();
  std::size_t k = 0, pixels = 0;
  if (z.rank() == 4 && z.dim(0) == 1) {
    k = z.dim(1);
    pixels = z.dim(2) * z.dim(3);
  } else if (z.rank() == 3) {
    k = z.dim(0);
    pixels = z.dim(1) * z.dim(2);
  } else {
    throw DimensionError("pixel_cross_entropy: logits must be [1,K,H,W] or [K,H,W], got " + shape_string(z.shape()));
  }
  if (labels.size() != pixels)
    throw DimensionError("pixel_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(pixels) + " pixels");
  std::vector<double> lse(pixels);
  double total = 0.0;
  for (std::size_t p = 0; p < pixels; ++p) {
    if (labels[p] >= k) throw IndexError("pixel_cross_entropy: label out of range");
    double m = z[p];
    for (std::size_t c = 1; c < k; ++c) m = std::max(m, z[c * pixels + p]);
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(z[c * pixels + p] - m);
    lse[p] = m + std::log(s);
    total += lse[p] - z[labels[p] * pixels + p];
  }
  Tensor y = Tensor::scalar(total / double(pixels));
  std::vector<std::uint8_t> owned(labels.begin(), labels.end());
  return g.emit(std::move(y), logits.requires_grad(),
                [logits, k, pixels, lse = std::move(lse), owned = std::move(owned)](Graph& gr, Var self) {
                  const double gy = gr.adjoint(self).item() / double(pixels);
                  const Tensor& zv = gr.value(logits);
                  Tensor& dz = gr.adjoint_for_update(logits);
                  for (std::size_t c = 0; c < k; ++c)
                    for (std::size_t p = 0; p < pixels; ++p)
                      dz[c * pixels + p] += gy * (std::exp(zv[c * pixels + p] - lse[p]) - (owned[p] == c ? 1.0 : 0.0));
                });
}

Var mse(Var a, const Tensor& target) {
  Graph& g = graph_of(a);
  require_same_shape(a.value(), target, "mse");
  const double n = double(target.size());
  Storage diff = a.value().data() - target.data();
  Tensor y = Tensor::scalar(diff.squaredNorm() / n);
  return g.emit(std::move(y), a.requires_grad(), [a, n, diff = std::move(diff)](Graph& gr, Var self) {
    gr.adjoint_for_update(a).data() += (2.0 * gr.adjoint(self).item() / n) * diff;
  });
}

}  // namespace mrvi
