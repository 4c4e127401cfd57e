//*****************************************************************************
// Copyright 2026 The attnsteer Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//*****************************************************************************

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "attnsteer/error.hpp"
#include "attnsteer/tensor.hpp"

namespace attnsteer {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

using Grads = std::vector<Tensor>;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& x, std::size_t rank, const char* what) {
  if (x.dim() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must be rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

/// Constant (non-differentiable) mask tensor from a predicate over x.
template <class Pred>
Tensor mask_of(const Tensor& x, Pred pred) {
  auto xd = x.data();
  std::vector<double> m(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) m[i] = pred(xd[i]) ? 1.0 : 0.0;
  return Tensor(x.shape(), std::move(m));
}

template <class Pred>
Tensor mask_of2(const Tensor& a, const Tensor& b, Pred pred) {
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> m(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) m[i] = pred(ad[i], bd[i]) ? 1.0 : 0.0;
  return Tensor(a.shape(), std::move(m));
}

template <class F>
std::vector<double> map_unary(const Tensor& x, F f) {
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
  return out;
}

template <class F>
std::vector<double> map_binary(const Tensor& a, const Tensor& b, F f) {
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = f(ad[i], bd[i]);
  return out;
}

double stable_softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  return make_op_result("add", a.shape(), map_binary(a, b, [](double x, double y) { return x + y; }), {a, b},
                        [](const Tensor& g, const std::vector<bool>&) { return Grads{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  return make_op_result("sub", a.shape(), map_binary(a, b, [](double x, double y) { return x - y; }), {a, b},
                        [](const Tensor& g, const std::vector<bool>& needs) {
                          return Grads{g, needs[1] ? neg(g) : Tensor()};
                        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  return make_op_result("mul", a.shape(), map_binary(a, b, [](double x, double y) { return x * y; }), {a, b},
                        [a, b](const Tensor& g, const std::vector<bool>& needs) {
                          return Grads{needs[0] ? mul(g, b) : Tensor(), needs[1] ? mul(g, a) : Tensor()};
                        });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  return make_op_result("div", a.shape(), map_binary(a, b, [](double x, double y) { return x / y; }), {a, b},
                        [a, b](const Tensor& g, const std::vector<bool>& needs) {
                          Tensor ga, gb;
                          if (needs[0]) ga = div(g, b);
                          if (needs[1]) gb = neg(div(mul(g, a), mul(b, b)));
                          return Grads{ga, gb};
                        });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double factor) {
  return make_op_result("scale", x.shape(), map_unary(x, [factor](double v) { return v * factor; }), {x},
                        [factor](const Tensor& g, const std::vector<bool>&) { return Grads{scale(g, factor)}; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return make_op_result("add_scalar", x.shape(), map_unary(x, [value](double v) { return v + value; }), {x},
                        [](const Tensor& g, const std::vector<bool>&) { return Grads{g}; });
}

Tensor min_elementwise(const Tensor& a, const Tensor& b) {
  require_same_shape("min_elementwise", a, b);
  return make_op_result("min_elementwise", a.shape(),
                        map_binary(a, b, [](double x, double y) { return x <= y ? x : y; }), {a, b},
                        [a, b](const Tensor& g, const std::vector<bool>& needs) {
                          Tensor ga, gb;
                          if (needs[0]) ga = mul(g, mask_of2(a, b, [](double x, double y) { return x <= y; }));
                          if (needs[1]) gb = mul(g, mask_of2(a, b, [](double x, double y) { return x > y; }));
                          return Grads{ga, gb};
                        });
}

Tensor max_elementwise(const Tensor& a, const Tensor& b) {
  require_same_shape("max_elementwise", a, b);
  return make_op_result("max_elementwise", a.shape(),
                        map_binary(a, b, [](double x, double y) { return x >= y ? x : y; }), {a, b},
                        [a, b](const Tensor& g, const std::vector<bool>& needs) {
                          Tensor ga, gb;
                          if (needs[0]) ga = mul(g, mask_of2(a, b, [](double x, double y) { return x >= y; }));
                          if (needs[1]) gb = mul(g, mask_of2(a, b, [](double x, double y) { return x < y; }));
                          return Grads{ga, gb};
                        });
}

Tensor relu(const Tensor& x) {
  return make_op_result("relu", x.shape(), map_unary(x, [](double v) { return v > 0 ? v : 0.0; }), {x},
                        [x](const Tensor& g, const std::vector<bool>&) {
                          return Grads{mul(g, mask_of(x, [](double v) { return v > 0; }))};
                        });
}

Tensor sigmoid(const Tensor& x) {
  return make_op_result("sigmoid", x.shape(), map_unary(x, stable_sigmoid), {x},
                        [x](const Tensor& g, const std::vector<bool>&) {
                          Tensor s = sigmoid(x);
                          return Grads{mul(g, mul(s, add_scalar(neg(s), 1.0)))};
                        });
}

Tensor softplus(const Tensor& x) {
  return make_op_result("softplus", x.shape(), map_unary(x, stable_softplus), {x},
                        [x](const Tensor& g, const std::vector<bool>&) { return Grads{mul(g, sigmoid(x))}; });
}

Tensor log(const Tensor& x) {
  return make_op_result("log", x.shape(), map_unary(x, [](double v) { return std::log(v); }), {x},
                        [x](const Tensor& g, const std::vector<bool>&) { return Grads{div(g, x)}; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw UsageError("clamp: lo must not exceed hi");
  return make_op_result("clamp", x.shape(), map_unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); }), {x},
                        [x, lo, hi](const Tensor& g, const std::vector<bool>&) {
                          return Grads{mul(g, mask_of(x, [lo, hi](double v) { return v > lo && v < hi; }))};
                        });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& labels) {
  require_same_shape("bce_with_logits", logits, labels);
  Tensor y = labels.detach();
  auto data = map_binary(logits, y, [](double z, double t) {
    return (std::max(z, 0.0) - z * t) + std::log1p(std::exp(-std::abs(z)));
  });
  return make_op_result("bce_with_logits", logits.shape(), std::move(data), {logits},
                        [logits, y](const Tensor& g, const std::vector<bool>&) {
                          return Grads{mul(g, sub(sigmoid(logits), y))};
                        });
}

// ---------------------------------------------------------------------------
// Reductions and layout

Tensor sum_trailing(const Tensor& x, std::size_t keep_dims) {
  const Shape& in = x.shape();
  if (keep_dims > in.size()) throw ShapeError("sum_trailing: keep_dims exceeds rank of " + shape_str(in));
  Shape out(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(keep_dims));
  const std::size_t rows = shape_numel(out);
  const std::size_t inner = x.numel() / rows;
  auto xd = x.data();
  std::vector<double> data(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < inner; ++i) acc += xd[r * inner + i];
    data[r] = acc;
  }
  return make_op_result("sum_trailing", out, std::move(data), {x}, [in](const Tensor& g, const std::vector<bool>&) {
    return Grads{expand_trailing(g, in)};
  });
}

Tensor expand_trailing(const Tensor& x, const Shape& shape) {
  const Shape& in = x.shape();
  if (in.size() > shape.size() || !std::equal(in.begin(), in.end(), shape.begin())) {
    throw ShapeError("expand_trailing: " + shape_str(in) + " is not a prefix of " + shape_str(shape));
  }
  const std::size_t rows = x.numel();
  const std::size_t inner = shape_numel(shape) / rows;
  auto xd = x.data();
  std::vector<double> data(rows * inner);
  for (std::size_t r = 0; r < rows; ++r) std::fill_n(data.begin() + static_cast<std::ptrdiff_t>(r * inner), inner, xd[r]);
  const std::size_t keep = in.size();
  return make_op_result("expand_trailing", shape, std::move(data), {x},
                        [keep](const Tensor& g, const std::vector<bool>&) { return Grads{sum_trailing(g, keep)}; });
}

Tensor sum(const Tensor& x) { return sum_trailing(x, 0); }

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor channel_broadcast(const Tensor& b, const Shape& shape) {
  require_rank("channel_broadcast", b, 1, "bias");
  if (shape.size() < 2 || shape[1] != b.size(0)) {
    throw ShapeError("channel_broadcast: bias " + shape_str(b.shape()) + " does not match axis 1 of " +
                     shape_str(shape));
  }
  const std::size_t outer = shape[0];
  const std::size_t channels = shape[1];
  const std::size_t inner = shape_numel(shape) / (outer * channels);
  auto bd = b.data();
  std::vector<double> data(shape_numel(shape));
  for (std::size_t n = 0; n < outer; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      std::fill_n(data.begin() + static_cast<std::ptrdiff_t>((n * channels + c) * inner), inner, bd[c]);
    }
  }
  return make_op_result("channel_broadcast", shape, std::move(data), {b},
                        [](const Tensor& g, const std::vector<bool>&) { return Grads{channel_reduce(g)}; });
}

Tensor channel_reduce(const Tensor& x) {
  if (x.dim() < 2) throw ShapeError("channel_reduce: need rank >= 2, got " + shape_str(x.shape()));
  const Shape in = x.shape();
  const std::size_t outer = in[0];
  const std::size_t channels = in[1];
  const std::size_t inner = x.numel() / (outer * channels);
  auto xd = x.data();
  std::vector<double> data(channels, 0.0);
  for (std::size_t n = 0; n < outer; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double* p = xd.data() + (n * channels + c) * inner;
      double acc = 0.0;
      for (std::size_t i = 0; i < inner; ++i) acc += p[i];
      data[c] += acc;
    }
  }
  return make_op_result("channel_reduce", Shape{channels}, std::move(data), {x},
                        [in](const Tensor& g, const std::vector<bool>&) { return Grads{channel_broadcast(g, in)}; });
}

Tensor bias_add(const Tensor& x, const Tensor& bias) { return add(x, channel_broadcast(bias, x.shape())); }

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const Shape in = x.shape();
  auto xd = x.data();
  return make_op_result("reshape", shape, std::vector<double>(xd.begin(), xd.end()), {x},
                        [in](const Tensor& g, const std::vector<bool>&) { return Grads{reshape(g, in)}; });
}

Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<std::size_t>> index, const Shape& out_shape) {
  if (index->size() != shape_numel(out_shape)) {
    throw ShapeError("gather: " + std::to_string(index->size()) + " indices for output " + shape_str(out_shape));
  }
  auto xd = x.data();
  std::vector<double> data(index->size());
  for (std::size_t j = 0; j < index->size(); ++j) {
    const std::size_t src = (*index)[j];
    if (src >= xd.size()) throw ShapeError("gather: index out of range for " + shape_str(x.shape()));
    data[j] = xd[src];
  }
  const Shape in = x.shape();
  return make_op_result("gather", out_shape, std::move(data), {x},
                        [index, in](const Tensor& g, const std::vector<bool>&) {
                          return Grads{scatter_add(g, index, in)};
                        });
}

Tensor scatter_add(const Tensor& g, std::shared_ptr<const std::vector<std::size_t>> index, const Shape& out_shape) {
  if (index->size() != g.numel()) {
    throw ShapeError("scatter_add: " + std::to_string(index->size()) + " indices for source " + shape_str(g.shape()));
  }
  const std::size_t n = shape_numel(out_shape);
  auto gd = g.data();
  std::vector<double> data(n, 0.0);
  for (std::size_t j = 0; j < index->size(); ++j) {
    const std::size_t dst = (*index)[j];
    if (dst >= n) throw ShapeError("scatter_add: index out of range for " + shape_str(out_shape));
    data[dst] += gd[j];
  }
  const Shape src_shape = g.shape();
  return make_op_result("scatter_add", out_shape, std::move(data), {g},
                        [index, src_shape](const Tensor& gg, const std::vector<bool>&) {
                          return Grads{gather(gg, index, src_shape)};
                        });
}

// ---------------------------------------------------------------------------
// Products

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  require_rank("bmm", a, 3, "lhs");
  require_rank("bmm", b, 3, "rhs");
  const std::size_t batch = a.size(0);
  const std::size_t a_rows = a.size(1), a_cols = a.size(2);
  const std::size_t b_rows = b.size(1), b_cols = b.size(2);
  const std::size_t m = transpose_a ? a_cols : a_rows;
  const std::size_t k = transpose_a ? a_rows : a_cols;
  const std::size_t k2 = transpose_b ? b_cols : b_rows;
  const std::size_t n = transpose_b ? b_rows : b_cols;
  if (b.size(0) != batch || k != k2) {
    throw ShapeError("bmm: incompatible operands " + shape_str(a.shape()) + (transpose_a ? "^T" : "") + " and " +
                     shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> data(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMap am(ad.data() + i * a_rows * a_cols, a_rows, a_cols);
    ConstMap bm(bd.data() + i * b_rows * b_cols, b_rows, b_cols);
    MutMap cm(data.data() + i * m * n, m, n);
    if (!transpose_a && !transpose_b) {
      cm.noalias() = am * bm;
    } else if (transpose_a && !transpose_b) {
      cm.noalias() = am.transpose() * bm;
    } else if (!transpose_a && transpose_b) {
      cm.noalias() = am * bm.transpose();
    } else {
      cm.noalias() = am.transpose() * bm.transpose();
    }
  }
  return make_op_result(
      "bmm", Shape{batch, m, n}, std::move(data), {a, b},
      [a, b, transpose_a, transpose_b](const Tensor& g, const std::vector<bool>& needs) {
        Tensor ga, gb;
        if (!transpose_a && !transpose_b) {
          if (needs[0]) ga = bmm(g, b, false, true);
          if (needs[1]) gb = bmm(a, g, true, false);
        } else if (transpose_a && !transpose_b) {
          if (needs[0]) ga = bmm(b, g, false, true);
          if (needs[1]) gb = bmm(a, g, false, false);
        } else if (!transpose_a && transpose_b) {
          if (needs[0]) ga = bmm(g, b, false, false);
          if (needs[1]) gb = bmm(g, a, true, false);
        } else {
          if (needs[0]) ga = bmm(b, g, true, true);
          if (needs[1]) gb = bmm(g, a, true, true);
        }
        return Grads{ga, gb};
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2, "lhs");
  require_rank("matmul", b, 2, "rhs");
  if (a.size(1) != b.size(0)) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out = bmm(reshape(a, {1, a.size(0), a.size(1)}), reshape(b, {1, b.size(0), b.size(1)}));
  return reshape(out, {a.size(0), b.size(1)});
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", x, 2, "input");
  require_rank("linear", weight, 2, "weight");
  if (x.size(1) != weight.size(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t batch = x.size(0), out_features = weight.size(0);
  Tensor y = bmm(reshape(x, {1, batch, x.size(1)}), reshape(weight, {1, out_features, weight.size(1)}), false, true);
  return bias_add(reshape(y, {batch, out_features}), bias);
}

// ---------------------------------------------------------------------------
// Convolution

std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw ShapeError("conv: stride must be positive");
  if (input + 2 * padding < kernel) return 0;
  return (input + 2 * padding - kernel) / stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kh, kw;
  std::size_t out_h, out_w;
  std::size_t stride, padding;
  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
};

ConvGeometry conv_geometry(const char* op, const Shape& x, const Shape& w, Conv2dOptions opts) {
  if (x.size() != 4 || w.size() != 4) {
    throw ShapeError(std::string(op) + ": expected rank-4 input and weight, got " + shape_str(x) + " and " +
                     shape_str(w));
  }
  if (x[1] != w[1]) {
    throw ShapeError(std::string(op) + ": input " + shape_str(x) + " has " + std::to_string(x[1]) +
                     " channels but weight " + shape_str(w) + " expects " + std::to_string(w[1]));
  }
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], 0, 0, opts.stride, opts.padding};
  g.out_h = conv_output_size(g.height, g.kh, opts.stride, opts.padding);
  g.out_w = conv_output_size(g.width, g.kw, opts.stride, opts.padding);
  if (g.out_h == 0 || g.out_w == 0) {
    throw ShapeError(std::string(op) + ": kernel " + shape_str(w) + " larger than padded input " + shape_str(x));
  }
  return g;
}

// cols[(c*kh + i)*kw + j][oy*out_w + ox] = x[c][oy*s - p + i][ox*s - p + j]
void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * positions;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.padding);
          double* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill_n(dst, g.out_w, 0.0);
            continue;
          }
          const double* src = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.padding);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* x) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * positions;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          double* dst = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const double* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.padding);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, Conv2dOptions opts) {
  const ConvGeometry g = conv_geometry("conv2d", x.shape(), weight.shape(), opts);
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = g.out_channels * g.positions();
  auto xd = x.data();
  auto wd = weight.data();
  std::vector<double> cols(g.patch() * g.positions());
  std::vector<double> data(g.batch * out_stride);
  ConstMap wm(wd.data(), g.out_channels, g.patch());
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(xd.data() + b * in_stride, g, cols.data());
    ConstMap cm(cols.data(), g.patch(), g.positions());
    MutMap om(data.data() + b * out_stride, g.out_channels, g.positions());
    om.noalias() = wm * cm;
  }
  const Shape x_shape = x.shape();
  const Shape w_shape = weight.shape();
  return make_op_result("conv2d", Shape{g.batch, g.out_channels, g.out_h, g.out_w}, std::move(data), {x, weight},
                        [x, weight, x_shape, w_shape, opts](const Tensor& gy, const std::vector<bool>& needs) {
                          Tensor gx, gw;
                          if (needs[0]) gx = conv2d_input_grad(gy, weight, x_shape, opts);
                          if (needs[1]) gw = conv2d_weight_grad(x, gy, w_shape, opts);
                          return Grads{gx, gw};
                        });
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& weight, const Shape& input_shape, Conv2dOptions opts) {
  const ConvGeometry g = conv_geometry("conv2d_input_grad", input_shape, weight.shape(), opts);
  const Shape expected{g.batch, g.out_channels, g.out_h, g.out_w};
  if (grad_out.shape() != expected) {
    throw ShapeError("conv2d_input_grad: grad " + shape_str(grad_out.shape()) + " vs expected " + shape_str(expected));
  }
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = g.out_channels * g.positions();
  auto gd = grad_out.data();
  auto wd = weight.data();
  std::vector<double> cols(g.patch() * g.positions());
  std::vector<double> data(g.batch * in_stride, 0.0);
  ConstMap wm(wd.data(), g.out_channels, g.patch());
  for (std::size_t b = 0; b < g.batch; ++b) {
    ConstMap gm(gd.data() + b * out_stride, g.out_channels, g.positions());
    MutMap cm(cols.data(), g.patch(), g.positions());
    cm.noalias() = wm.transpose() * gm;
    col2im_add(cols.data(), g, data.data() + b * in_stride);
  }
  const Shape w_shape = weight.shape();
  return make_op_result("conv2d_input_grad", input_shape, std::move(data), {grad_out, weight},
                        [grad_out, weight, w_shape, opts](const Tensor& gz, const std::vector<bool>& needs) {
                          Tensor g_gy, g_w;
                          if (needs[0]) g_gy = conv2d(gz, weight, opts);
                          if (needs[1]) g_w = conv2d_weight_grad(gz, grad_out, w_shape, opts);
                          return Grads{g_gy, g_w};
                        });
}

Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad_out, const Shape& weight_shape, Conv2dOptions opts) {
  const ConvGeometry g = conv_geometry("conv2d_weight_grad", input.shape(), weight_shape, opts);
  const Shape expected{g.batch, g.out_channels, g.out_h, g.out_w};
  if (grad_out.shape() != expected) {
    throw ShapeError("conv2d_weight_grad: grad " + shape_str(grad_out.shape()) + " vs expected " + shape_str(expected));
  }
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = g.out_channels * g.positions();
  auto xd = input.data();
  auto gd = grad_out.data();
  std::vector<double> cols(g.patch() * g.positions());
  std::vector<double> data(g.out_channels * g.patch(), 0.0);
  MutMap wm(data.data(), g.out_channels, g.patch());
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(xd.data() + b * in_stride, g, cols.data());
    ConstMap cm(cols.data(), g.patch(), g.positions());
    ConstMap gm(gd.data() + b * out_stride, g.out_channels, g.positions());
    wm.noalias() += gm * cm.transpose();
  }
  const Shape x_shape = input.shape();
  return make_op_result("conv2d_weight_grad", weight_shape, std::move(data), {input, grad_out},
                        [input, grad_out, x_shape, opts](const Tensor& gz, const std::vector<bool>& needs) {
                          Tensor g_x, g_gy;
                          if (needs[0]) g_x = conv2d_input_grad(grad_out, gz, x_shape, opts);
                          if (needs[1]) g_gy = conv2d(input, gz, opts);
                          return Grads{g_x, g_gy};
                        });
}

// ---------------------------------------------------------------------------
// Pooling

Tensor maxpool2d(const Tensor& x, std::size_t window, std::size_t stride) {
  require_rank("maxpool2d", x, 4, "input");
  if (window == 0 || stride == 0) throw ShapeError("maxpool2d: window and stride must be positive");
  const std::size_t batch = x.size(0), channels = x.size(1), height = x.size(2), width = x.size(3);
  const std::size_t out_h = conv_output_size(height, window, stride, 0);
  const std::size_t out_w = conv_output_size(width, window, stride, 0);
  if (out_h == 0 || out_w == 0) {
    throw ShapeError("maxpool2d: window " + std::to_string(window) + " larger than input " + shape_str(x.shape()));
  }
  auto xd = x.data();
  auto index = std::make_shared<std::vector<std::size_t>>(batch * channels * out_h * out_w);
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < batch * channels; ++plane) {
    const std::size_t base = plane * height * width;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        std::size_t best = base + (oy * stride) * width + ox * stride;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = base + (oy * stride + i) * width + ox * stride + j;
            if (xd[idx] > xd[best]) best = idx;
          }
        }
        (*index)[o++] = best;
      }
    }
  }
  return gather(x, std::move(index), Shape{batch, channels, out_h, out_w});
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank("global_avg_pool", x, 4, "input");
  const double area = static_cast<double>(x.size(2) * x.size(3));
  return scale(sum_trailing(x, 2), 1.0 / area);
}

Tensor max_lastdim(const Tensor& x) {
  if (x.dim() < 1) throw ShapeError("max_lastdim: scalar input");
  const Shape& s = x.shape();
  const std::size_t inner = s.back();
  const std::size_t rows = x.numel() / inner;
  auto xd = x.data();
  auto index = std::make_shared<std::vector<std::size_t>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = r * inner;
    for (std::size_t i = 1; i < inner; ++i) {
      if (xd[r * inner + i] > xd[best]) best = r * inner + i;
    }
    (*index)[r] = best;
  }
  return gather(x, std::move(index), Shape(s.begin(), s.end() - 1));
}

}  // namespace attnsteer
