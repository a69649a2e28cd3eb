#include "hiermem/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hiermem/error.hpp"

namespace hiermem {

// Var / BackwardContext ------------------------------------------------------

const Tensor& Var::value() const { return graph->nodes_.at(id).value; }

bool Var::requires_grad() const { return graph->nodes_.at(id).requires_grad; }

std::vector<double> Var::grad() const {
  const auto& n = graph->nodes_.at(id);
  if (n.grad.empty()) return std::vector<double>(n.value.numel(), 0.0);
  return n.grad;
}

const Tensor& BackwardContext::output() const { return graph_.nodes_[node_].value; }

std::span<const double> BackwardContext::output_grad() const { return graph_.nodes_[node_].grad; }

std::size_t BackwardContext::num_inputs() const { return graph_.nodes_[node_].inputs.size(); }

const Tensor& BackwardContext::input(std::size_t i) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs[i]].value;
}

bool BackwardContext::needs_grad(std::size_t i) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs[i]].requires_grad;
}

std::span<double> BackwardContext::input_grad(std::size_t i) {
  auto& in = graph_.nodes_[graph_.nodes_[node_].inputs[i]];
  if (in.grad.empty()) in.grad.assign(in.value.numel(), 0.0);
  return in.grad;
}

// Graph ----------------------------------------------------------------------

Var Graph::push(Node node) {
  if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) {
    throw ValueError("graph too large");
  }
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor value) {
  if (!value.all_finite()) throw NumericError("constant holds a non-finite value");
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  n.value.clear_grad();
  return push(std::move(n));
}

Var Graph::leaf(Tensor value) {
  if (!value.all_finite()) throw NumericError("leaf holds a non-finite value");
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.value.clear_grad();
  n.requires_grad = true;
  return push(std::move(n));
}

Var Graph::param(Tensor& param) {
  if (!param.all_finite()) throw NumericError("parameter holds a non-finite value");
  Node n;
  n.op = "param";
  n.value = Tensor(param.shape(), param.storage());
  n.requires_grad = true;
  n.bound = &param;
  return push(std::move(n));
}

Var Graph::record(std::string_view op, std::vector<Var> inputs, Tensor value, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError("op '" + std::string(op) + "' produced a non-finite value");
  }
  Node n;
  n.op = std::string(op);
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const auto& v : inputs) {
    if (v.graph != this) throw ValueError("op '" + n.op + "' mixes graphs");
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  if (!backward) n.requires_grad = false;
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

void Graph::backward(Var loss) {
  if (loss.graph != this) throw ValueError("loss belongs to another graph");
  auto& root = nodes_.at(loss.id);
  if (root.value.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + to_string(root.value.shape()));
  }
  for (auto& n : nodes_) n.grad.clear();
  last_visits_ = 0;
  if (!root.requires_grad) return;
  root.grad.assign(1, 1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    ++last_visits_;
    if (n.backward) {
      BackwardContext ctx(*this, static_cast<std::uint32_t>(i));
      n.backward(ctx);
    }
    if (n.bound) {
      auto g = n.bound->grad();
      if (g.size() != n.grad.size()) throw ShapeError("bound parameter changed shape");
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
    }
  }
}

void backward(Var loss) { loss.graph->backward(loss); }

// Helpers ----------------------------------------------------------------------

namespace {

Graph& graph_of(Var a) {
  if (!a.graph) throw ValueError("null Var");
  return *a.graph;
}

Graph& graph_of(Var a, Var b) {
  if (a.graph != b.graph || !a.graph) throw ValueError("operands belong to different graphs");
  return *a.graph;
}

[[noreturn]] void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

struct Broadcast {
  bool a_scalar = false;
  bool b_scalar = false;
  Shape out;
};

Broadcast broadcast(std::string_view op, const Tensor& a, const Tensor& b) {
  Broadcast bc;
  if (a.shape() == b.shape()) {
    bc.out = a.shape();
  } else if (b.numel() == 1) {
    bc.b_scalar = true;
    bc.out = a.shape();
  } else if (a.numel() == 1) {
    bc.a_scalar = true;
    bc.out = b.shape();
  } else {
    shape_mismatch(op, a.shape(), b.shape());
  }
  return bc;
}

// Splits a shape around `axis` into outer * n * inner.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(std::string_view op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     to_string(s));
  }
  AxisSplit sp;
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape out = s;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out.empty()) out.push_back(1);
  }
  return out;
}

template <class F, class D>
Var unary(std::string_view op, Var a, F f, D dfdx) {
  auto& g = graph_of(a);
  const auto& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  return g.record(op, {a}, std::move(out), [dfdx](BackwardContext& ctx) {
    const auto& x = ctx.input(0);
    const auto& y = ctx.output();
    auto go = ctx.output_grad();
    auto gi = ctx.input_grad(0);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * dfdx(x[i], y[i]);
  });
}

double softplus_value(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// Elementwise binary -----------------------------------------------------------

Var add(Var a, Var b) {
  auto& g = graph_of(a, b);
  const auto& x = a.value();
  const auto& y = b.value();
  const auto bc = broadcast("add", x, y);
  Tensor out(bc.out);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = x[bc.a_scalar ? 0 : i] + y[bc.b_scalar ? 0 : i];
  }
  return g.record("add", {a, b}, std::move(out), [bc](BackwardContext& ctx) {
    auto go = ctx.output_grad();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.needs_grad(k)) continue;
      auto gi = ctx.input_grad(k);
      const bool sc = k == 0 ? bc.a_scalar : bc.b_scalar;
      for (std::size_t i = 0; i < go.size(); ++i) gi[sc ? 0 : i] += go[i];
    }
  });
}

Var sub(Var a, Var b) {
  auto& g = graph_of(a, b);
  const auto& x = a.value();
  const auto& y = b.value();
  const auto bc = broadcast("sub", x, y);
  Tensor out(bc.out);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = x[bc.a_scalar ? 0 : i] - y[bc.b_scalar ? 0 : i];
  }
  return g.record("sub", {a, b}, std::move(out), [bc](BackwardContext& ctx) {
    auto go = ctx.output_grad();
    if (ctx.needs_grad(0)) {
      auto gi = ctx.input_grad(0);
      for (std::size_t i = 0; i < go.size(); ++i) gi[bc.a_scalar ? 0 : i] += go[i];
    }
    if (ctx.needs_grad(1)) {
      auto gi = ctx.input_grad(1);
      for (std::size_t i = 0; i < go.size(); ++i) gi[bc.b_scalar ? 0 : i] -= go[i];
    }
  });
}

Var mul(Var a, Var b) {
  auto& g = graph_of(a, b);
  const auto& x = a.value();
  const auto& y = b.value();
  const auto bc = broadcast("mul", x, y);
  Tensor out(bc.out);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = x[bc.a_scalar ? 0 : i] * y[bc.b_scalar ? 0 : i];
  }
  return g.record("mul", {a, b}, std::move(out), [bc](BackwardContext& ctx) {
    auto go = ctx.output_grad();
    const auto& x = ctx.input(0);
    const auto& y = ctx.input(1);
    if (ctx.needs_grad(0)) {
      auto gi = ctx.input_grad(0);
      for (std::size_t i = 0; i < go.size(); ++i) {
        gi[bc.a_scalar ? 0 : i] += go[i] * y[bc.b_scalar ? 0 : i];
      }
    }
    if (ctx.needs_grad(1)) {
      auto gi = ctx.input_grad(1);
      for (std::size_t i = 0; i < go.size(); ++i) {
        gi[bc.b_scalar ? 0 : i] += go[i] * x[bc.a_scalar ? 0 : i];
      }
    }
  });
}

Var div(Var a, Var b) {
  auto& g = graph_of(a, b);
  const auto& x = a.value();
  const auto& y = b.value();
  const auto bc = broadcast("div", x, y);
  Tensor out(bc.out);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = x[bc.a_scalar ? 0 : i] / y[bc.b_scalar ? 0 : i];
  }
  return g.record("div", {a, b}, std::move(out), [bc](BackwardContext& ctx) {
    auto go = ctx.output_grad();
    const auto& x = ctx.input(0);
    const auto& y = ctx.input(1);
    if (ctx.needs_grad(0)) {
      auto gi = ctx.input_grad(0);
      for (std::size_t i = 0; i < go.size(); ++i) {
        gi[bc.a_scalar ? 0 : i] += go[i] / y[bc.b_scalar ? 0 : i];
      }
    }
    if (ctx.needs_grad(1)) {
      auto gi = ctx.input_grad(1);
      for (std::size_t i = 0; i < go.size(); ++i) {
        const double yv = y[bc.b_scalar ? 0 : i];
        gi[bc.b_scalar ? 0 : i] -= go[i] * x[bc.a_scalar ? 0 : i] / (yv * yv);
      }
    }
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double c) {
  return unary(
      "scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c) {
  return unary(
      "add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var operator+(Var a, Var b) { return add(a, b); }
Var operator-(Var a, Var b) { return sub(a, b); }
Var operator*(Var a, Var b) { return mul(a, b); }
Var operator/(Var a, Var b) { return div(a, b); }
Var operator-(Var a) { return neg(a); }

// Linear algebra and shape ops -------------------------------------------------

Var matmul(Var a, Var b) {
  auto& g = graph_of(a, b);
  const auto& x = a.value();
  const auto& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
    shape_mismatch("matmul", x.shape(), y.shape());
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      if (xv == 0.0) continue;
      const double* yrow = &y[p * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += xv * yrow[j];
    }
  }
  return g.record("matmul", {a, b}, std::move(out), [m, k, n](BackwardContext& ctx) {
    auto go = ctx.output_grad();
    const auto& x = ctx.input(0);
    const auto& y = ctx.input(1);
    if (ctx.needs_grad(0)) {
      auto gx = ctx.input_grad(0);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* yrow = &y[p * n];
          const double* grow = &go[i * n];
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * yrow[j];
          gx[i * k + p] += acc;
        }
      }
    }
    if (ctx.needs_grad(1)) {
      auto gy = ctx.input_grad(1);
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = &go[i * n];
        for (std::size_t p = 0; p < k; ++p) {
          const double xv = x[i * k + p];
          if (xv == 0.0) continue;
          double* gyrow = &gy[p * n];
          for (std::size_t j = 0; j < n; ++j) gyrow[j] += xv * grow[j];
        }
      }
    }
  });
}

Var transpose(Var a) {
  auto& g = graph_of(a);
  const auto& x = a.value();
  if (x.rank() != 2) throw ShapeError("transpose needs rank 2, got " + to_string(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  }
  return g.record("transpose", {a}, std::move(out), [r, c](BackwardContext& ctx) {
    auto go = ctx.output_grad();
    auto gi = ctx.input_grad(0);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) gi[i * c + j] += go[j * r + i];
    }
  });
}

Var reshape(Var a, Shape shape) {
  auto& g = graph_of(a);
  Tensor out = a.value().reshaped(std::move(shape));
  return g.record("reshape", {a}, std::move(out), [](BackwardContext& ctx) {
    auto go = ctx.output_grad();
    auto gi = ctx.input_grad(0);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += go[i];
  });
}

Var flatten(Var a) {
  const auto& s = a.shape();
  if (s.size() < 2) throw ShapeError("flatten needs rank >= 2, got " + to_string(s));
  return reshape(a, {s[0], a.numel() / s[0]});
}

Var slice(Var a, std::size_t axis, std::size_t start, std::size_t length) {
  auto& g = graph_of(a);
  const auto& x = a.value();
  const auto sp = split_axis("slice", x.shape(), axis);
  if (length == 0 || start + length > sp.n) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(axis) + " of " +
                     to_string(x.shape()));
  }
  Shape s = x.shape();
  s[axis] = length;
  Tensor out(s);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    const double* src = &x[(o * sp.n + start) * sp.inner];
    std::copy(src, src + length * sp.inner, &out[o * length * sp.inner]);
  }
  return g.record("slice", {a}, std::move(out), [sp, start, length](BackwardContext& ctx) {
    auto go = ctx.output_grad();
    auto gi = ctx.input_grad(0);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      double* dst = &gi[(o * sp.n + start) * sp.inner];
      const double* src = &go[o * length * sp.inner];
      for (std::size_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ValueError("concat of zero tensors");
  auto& g = graph_of(parts[0]);
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + to_string(first));
  std::vector<std::size_t> widths;
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    graph_of(parts[0], p);
    const Shape& s = p.shape();
    if (s.size() != first.size()) shape_mismatch("concat", first, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) shape_mismatch("concat", first, s);
    }
    widths.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const auto sp = split_axis("concat", out_shape, axis);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& x = parts[k].value();
    const std::size_t w = widths[k] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy(&x[o * w], &x[o * w] + w, &out[o * sp.n * sp.inner + offset]);
    }
    offset += w;
  }
  return g.record("concat", parts, std::move(out), [sp, widths](BackwardContext& ctx) {
    auto go = ctx.output_grad();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const std::size_t w = widths[k] * sp.inner;
      if (ctx.needs_grad(k)) {
        auto gi = ctx.input_grad(k);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const double* src = &go[o * sp.n * sp.inner + offset];
          for (std::size_t i = 0; i < w; ++i) gi[o * w + i] += src[i];
        }
      }
      offset += w;
    }
  });
}

// Convolution and pooling ------------------------------------------------------

namespace {

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, k, stride, pad, oh, ow;
};

// Range of output columns whose input column ox*stride + kx - pad lies in [0, w).
inline void valid_range(std::size_t kx, const ConvGeom& c, std::size_t& lo, std::size_t& hi) {
  const long s = static_cast<long>(c.stride);
  const long off = static_cast<long>(kx) - static_cast<long>(c.pad);
  long l = off >= 0 ? 0 : (-off + s - 1) / s;
  long h = (static_cast<long>(c.w) - 1 - off);
  h = h < 0 ? -1 : h / s;
  h = std::min<long>(h, static_cast<long>(c.ow) - 1);
  lo = static_cast<std::size_t>(std::max<long>(l, 0));
  hi = h < l ? lo : static_cast<std::size_t>(h + 1);
}

}  // namespace

Var conv2d(Var x, Var weight, Var bias, std::size_t stride, std::size_t padding) {
  auto& g = graph_of(x, weight);
  graph_of(x, bias);
  const auto& in = x.value();
  const auto& wt = weight.value();
  const auto& bs = bias.value();
  if (in.rank() != 4 || wt.rank() != 4 || wt.dim(1) != in.dim(1) || wt.dim(2) != wt.dim(3)) {
    shape_mismatch("conv2d", in.shape(), wt.shape());
  }
  if (bs.rank() != 1 || bs.dim(0) != wt.dim(0)) shape_mismatch("conv2d bias", bs.shape(), wt.shape());
  if (stride != 1 && stride != 2) throw ValueError("conv2d supports stride 1 or 2 only");
  ConvGeom c{in.dim(0), in.dim(1), in.dim(2), in.dim(3), wt.dim(0), wt.dim(2), stride, padding, 0, 0};
  if (c.h + 2 * c.pad < c.k || c.w + 2 * c.pad < c.k) {
    throw ShapeError("conv2d: kernel " + to_string(wt.shape()) + " larger than padded input " +
                     to_string(in.shape()));
  }
  c.oh = (c.h + 2 * c.pad - c.k) / c.stride + 1;
  c.ow = (c.w + 2 * c.pad - c.k) / c.stride + 1;
  Tensor out({c.batch, c.cout, c.oh, c.ow});
  const std::size_t plane = c.oh * c.ow;
  for (std::size_t b = 0; b < c.batch; ++b) {
    for (std::size_t co = 0; co < c.cout; ++co) {
      double* o = &out[(b * c.cout + co) * plane];
      std::fill(o, o + plane, bs[co]);
      for (std::size_t ci = 0; ci < c.cin; ++ci) {
        const double* src = &in[(b * c.cin + ci) * c.h * c.w];
        for (std::size_t ky = 0; ky < c.k; ++ky) {
          for (std::size_t kx = 0; kx < c.k; ++kx) {
            const double wv = wt[((co * c.cin + ci) * c.k + ky) * c.k + kx];
            std::size_t lo, hi;
            valid_range(kx, c, lo, hi);
            for (std::size_t oy = 0; oy < c.oh; ++oy) {
              const long iy = static_cast<long>(oy * c.stride + ky) - static_cast<long>(c.pad);
              if (iy < 0 || iy >= static_cast<long>(c.h)) continue;
              if (lo >= hi) continue;
              const double* srow = src + static_cast<std::size_t>(iy) * c.w + (lo * c.stride + kx - c.pad);
              double* orow = o + oy * c.ow;
              for (std::size_t ox = lo; ox < hi; ++ox) orow[ox] += wv * srow[(ox - lo) * c.stride];
            }
          }
        }
      }
    }
  }
  return g.record("conv2d", {x, weight, bias}, std::move(out), [c, plane](BackwardContext& ctx) {
    auto go = ctx.output_grad();
    const auto& in = ctx.input(0);
    const auto& wt = ctx.input(1);
    const bool gx_on = ctx.needs_grad(0), gw_on = ctx.needs_grad(1), gb_on = ctx.needs_grad(2);
    std::span<double> gx, gw, gb;
    if (gx_on) gx = ctx.input_grad(0);
    if (gw_on) gw = ctx.input_grad(1);
    if (gb_on) gb = ctx.input_grad(2);
    for (std::size_t b = 0; b < c.batch; ++b) {
      for (std::size_t co = 0; co < c.cout; ++co) {
        const double* gop = &go[(b * c.cout + co) * plane];
        if (gb_on) {
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += gop[i];
          gb[co] += acc;
        }
        for (std::size_t ci = 0; ci < c.cin; ++ci) {
          const std::size_t in_off = (b * c.cin + ci) * c.h * c.w;
          for (std::size_t ky = 0; ky < c.k; ++ky) {
            for (std::size_t kx = 0; kx < c.k; ++kx) {
              const std::size_t widx = ((co * c.cin + ci) * c.k + ky) * c.k + kx;
              const double wv = wt[widx];
              std::size_t lo, hi;
              valid_range(kx, c, lo, hi);
              double wacc = 0.0;
              for (std::size_t oy = 0; oy < c.oh; ++oy) {
                const long iy = static_cast<long>(oy * c.stride + ky) - static_cast<long>(c.pad);
                if (iy < 0 || iy >= static_cast<long>(c.h)) continue;
                if (lo >= hi) continue;
                const std::size_t row =
                    in_off + static_cast<std::size_t>(iy) * c.w + (lo * c.stride + kx - c.pad);
                const double* grow = gop + oy * c.ow;
                if (gw_on) {
                  const double* srow = &in[row];
                  for (std::size_t ox = lo; ox < hi; ++ox) wacc += grow[ox] * srow[(ox - lo) * c.stride];
                }
                if (gx_on) {
                  double* dst = &gx[row];
                  for (std::size_t ox = lo; ox < hi; ++ox) dst[(ox - lo) * c.stride] += wv * grow[ox];
                }
              }
              if (gw_on) gw[widx] += wacc;
            }
          }
        }
      }
    }
  });
}

Var avgpool2d(Var x, std::size_t k) {
  auto& g = graph_of(x);
  const auto& in = x.value();
  if (in.rank() != 4) throw ShapeError("avgpool2d needs rank 4, got " + to_string(in.shape()));
  if (k == 0 || in.dim(2) % k || in.dim(3) % k) {
    throw ShapeError("avgpool2d: window " + std::to_string(k) + " does not tile " +
                     to_string(in.shape()));
  }
  const std::size_t planes = in.dim(0) * in.dim(1), h = in.dim(2), w = in.dim(3);
  const std::size_t oh = h / k, ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor out({in.dim(0), in.dim(1), oh, ow});
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = &in[p * h * w];
    double* dst = &out[p * oh * ow];
    for (std::size_t y = 0; y < h; ++y) {
      double* drow = dst + (y / k) * ow;
      const double* srow = src + y * w;
      for (std::size_t xx = 0; xx < w; ++xx) drow[xx / k] += srow[xx];
    }
    for (std::size_t i = 0; i < oh * ow; ++i) dst[i] *= inv;
  }
  return g.record("avgpool2d", {x}, std::move(out), [planes, h, w, k, oh, ow, inv](BackwardContext& ctx) {
    auto go = ctx.output_grad();
    auto gi = ctx.input_grad(0);
    for (std::size_t p = 0; p < planes; ++p) {
      const double* src = &go[p * oh * ow];
      double* dst = &gi[p * h * w];
      for (std::size_t y = 0; y < h; ++y) {
        const double* srow = src + (y / k) * ow;
        for (std::size_t xx = 0; xx < w; ++xx) dst[y * w + xx] += srow[xx / k] * inv;
      }
    }
  });
}

// Pointwise nonlinearities -------------------------------------------------------

Var relu(Var a) {
  return unary(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var softplus(Var a) {
  return unary(
      "softplus", a, softplus_value, [](double x, double) { return sigmoid(x); });
}

Var exp(Var a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sqrt(Var a) {
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Var square(Var a) {
  return unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// Reductions ---------------------------------------------------------------------

Var sum(Var a) {
  auto& g = graph_of(a);
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  return g.record("sum", {a}, Tensor::scalar(acc), [](BackwardContext& ctx) {
    const double go = ctx.output_grad()[0];
    for (auto& v : ctx.input_grad(0)) v += go;
  });
}

Var sum(Var a, std::size_t axis, bool keepdim) {
  auto& g = graph_of(a);
  const auto& x = a.value();
  const auto sp = split_axis("sum", x.shape(), axis);
  Tensor out(reduced_shape(x.shape(), axis, keepdim));
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.n; ++j) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        out[o * sp.inner + i] += x[(o * sp.n + j) * sp.inner + i];
      }
    }
  }
  return g.record("sum_axis", {a}, std::move(out), [sp](BackwardContext& ctx) {
    auto go = ctx.output_grad();
    auto gi = ctx.input_grad(0);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t j = 0; j < sp.n; ++j) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          gi[(o * sp.n + j) * sp.inner + i] += go[o * sp.inner + i];
        }
      }
    }
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Var mean(Var a, std::size_t axis, bool keepdim) {
  const auto n = split_axis("mean", a.shape(), axis).n;
  return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(n));
}

Var softmax(Var a, std::size_t axis) {
  auto& g = graph_of(a);
  const auto& x = a.value();
  const auto sp = split_axis("softmax", x.shape(), axis);
  Tensor out(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const auto at = [&](std::size_t j) { return (o * sp.n + j) * sp.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, x[at(j)]);
      double z = 0.0;
      for (std::size_t j = 0; j < sp.n; ++j) z += (out[at(j)] = std::exp(x[at(j)] - mx));
      for (std::size_t j = 0; j < sp.n; ++j) out[at(j)] /= z;
    }
  }
  return g.record("softmax", {a}, std::move(out), [sp](BackwardContext& ctx) {
    auto go = ctx.output_grad();
    const auto& y = ctx.output();
    auto gi = ctx.input_grad(0);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const auto at = [&](std::size_t j) { return (o * sp.n + j) * sp.inner + i; };
        double dot = 0.0;
        for (std::size_t j = 0; j < sp.n; ++j) dot += go[at(j)] * y[at(j)];
        for (std::size_t j = 0; j < sp.n; ++j) gi[at(j)] += y[at(j)] * (go[at(j)] - dot);
      }
    }
  });
}

Var log_softmax(Var a, std::size_t axis) {
  auto& g = graph_of(a);
  const auto& x = a.value();
  const auto sp = split_axis("log_softmax", x.shape(), axis);
  Tensor out(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const auto at = [&](std::size_t j) { return (o * sp.n + j) * sp.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, x[at(j)]);
      double z = 0.0;
      for (std::size_t j = 0; j < sp.n; ++j) z += std::exp(x[at(j)] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t j = 0; j < sp.n; ++j) out[at(j)] = x[at(j)] - lz;
    }
  }
  return g.record("log_softmax", {a}, std::move(out), [sp](BackwardContext& ctx) {
    auto go = ctx.output_grad();
    const auto& y = ctx.output();
    auto gi = ctx.input_grad(0);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const auto at = [&](std::size_t j) { return (o * sp.n + j) * sp.inner + i; };
        double gsum = 0.0;
        for (std::size_t j = 0; j < sp.n; ++j) gsum += go[at(j)];
        for (std::size_t j = 0; j < sp.n; ++j) gi[at(j)] += go[at(j)] - std::exp(y[at(j)]) * gsum;
      }
    }
  });
}

Var logsumexp(Var a, std::size_t axis, bool keepdim) {
  auto& g = graph_of(a);
  const auto& x = a.value();
  const auto sp = split_axis("logsumexp", x.shape(), axis);
  Tensor out(reduced_shape(x.shape(), axis, keepdim));
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const auto at = [&](std::size_t j) { return (o * sp.n + j) * sp.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, x[at(j)]);
      double z = 0.0;
      for (std::size_t j = 0; j < sp.n; ++j) z += std::exp(x[at(j)] - mx);
      out[o * sp.inner + i] = mx + std::log(z);
    }
  }
  return g.record("logsumexp", {a}, std::move(out), [sp](BackwardContext& ctx) {
    auto go = ctx.output_grad();
    const auto& x = ctx.input(0);
    const auto& y = ctx.output();
    auto gi = ctx.input_grad(0);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const double lse = y[o * sp.inner + i];
        const double gv = go[o * sp.inner + i];
        for (std::size_t j = 0; j < sp.n; ++j) {
          const auto idx = (o * sp.n + j) * sp.inner + i;
          gi[idx] += gv * std::exp(x[idx] - lse);
        }
      }
    }
  });
}

Var cross_entropy(Var logits, Var onehot) {
  auto& g = graph_of(logits, onehot);
  const auto& z = logits.value();
  const auto& t = onehot.value();
  if (z.rank() != 2 || z.shape() != t.shape()) shape_mismatch("cross_entropy", z.shape(), t.shape());
  const std::size_t b = z.dim(0), c = z.dim(1);
  Tensor logp(z.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, z[r * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[r * c + j] - mx);
    const double lz = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) {
      logp[r * c + j] = z[r * c + j] - lz;
      loss -= t[r * c + j] * logp[r * c + j];
    }
  }
  loss /= static_cast<double>(b);
  return g.record("cross_entropy", {logits, onehot}, Tensor::scalar(loss),
                  [logp = std::move(logp), b, c](BackwardContext& ctx) {
                    const double go = ctx.output_grad()[0] / static_cast<double>(b);
                    const auto& t = ctx.input(1);
                    if (ctx.needs_grad(0)) {
                      auto gz = ctx.input_grad(0);
                      for (std::size_t r = 0; r < b; ++r) {
                        double tsum = 0.0;
                        for (std::size_t j = 0; j < c; ++j) tsum += t[r * c + j];
                        for (std::size_t j = 0; j < c; ++j) {
                          const auto i = r * c + j;
                          gz[i] += go * (std::exp(logp[i]) * tsum - t[i]);
                        }
                      }
                    }
                    if (ctx.needs_grad(1)) {
                      auto gt = ctx.input_grad(1);
                      for (std::size_t i = 0; i < b * c; ++i) gt[i] -= go * logp[i];
                    }
                  });
}

// Composite helpers ------------------------------------------------------------

Var sq_distances(Var a, Var b) {
  auto& g = graph_of(a, b);
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1]) {
    shape_mismatch("sq_distances", a.shape(), b.shape());
  }
  const std::size_t q = a.shape()[0], n = b.shape()[0];
  Var a2 = sum(square(a), 1, true);                 // (q, 1)
  Var b2 = transpose(sum(square(b), 1, true));      // (1, n)
  Var cross = matmul(a, transpose(b));              // (q, n)
  Var ones_n = g.constant(Tensor({1, n}, 1.0));
  Var ones_q = g.constant(Tensor({q, 1}, 1.0));
  return matmul(a2, ones_n) + matmul(ones_q, b2) - scale(cross, 2.0);
}

Var repeat_rows(Var row, std::size_t r) {
  auto& g = graph_of(row);
  if (row.shape().size() != 2 || row.shape()[0] != 1) {
    throw ShapeError("repeat_rows needs a (1, D) row, got " + to_string(row.shape()));
  }
  return matmul(g.constant(Tensor({r, 1}, 1.0)), row);
}

Var gather_rows(Var a, const std::vector<std::size_t>& index) {
  auto& g = graph_of(a);
  if (a.shape().size() != 2) throw ShapeError("gather_rows needs rank 2, got " + to_string(a.shape()));
  const std::size_t n = a.shape()[0];
  Tensor sel({index.size(), n});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) throw ShapeError("gather_rows: index out of range");
    sel[i * n + index[i]] = 1.0;
  }
  return matmul(g.constant(std::move(sel)), a);
}

}  // namespace hiermem
