// Random small instances of every differentiable op, for gradient checks.
#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "attnsteer/gradcheck.hpp"
#include "attnsteer/tensor.hpp"

namespace attnsteer::testing {

struct OpCase {
  std::string op;
  ScalarFn fn;
  std::vector<Tensor> inputs;
};

class CaseGen {
 public:
  explicit CaseGen(std::uint64_t seed) : rng_(seed) {}

  std::size_t dim(std::size_t lo = 1, std::size_t hi = 5) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  bool coin() { return std::bernoulli_distribution(0.5)(rng_); }

  Tensor random(const Shape& s, double lo = -1.0, double hi = 1.0) {
    std::vector<double> d(shape_numel(s));
    for (auto& v : d) v = uniform(lo, hi);
    return Tensor(s, std::move(d));
  }
  /// Values bounded away from zero by `gap`.
  Tensor away_from_zero(const Shape& s, double gap) {
    std::vector<double> d(shape_numel(s));
    for (auto& v : d) v = (coin() ? 1.0 : -1.0) * uniform(gap, 1.0);
    return Tensor(s, std::move(d));
  }
  /// Pairwise distinct values (spacing >= 0.05 / n), shuffled.
  Tensor distinct(const Shape& s) {
    std::vector<double> d(shape_numel(s));
    std::iota(d.begin(), d.end(), 0.0);
    std::shuffle(d.begin(), d.end(), rng_);
    for (auto& v : d) v = v / static_cast<double>(d.size()) - 0.5;
    return Tensor(s, std::move(d));
  }

  Shape random_shape(std::size_t rank) {
    Shape s(rank);
    for (auto& d : s) d = dim();
    return s;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

/// f(inputs) = sum(op(inputs) * R) for a fixed random R.
inline ScalarFn weighted(std::function<Tensor(const std::vector<Tensor>&)> op, const Tensor& weights) {
  return [op, weights](const std::vector<Tensor>& in) { return sum(mul(op(in), weights)); };
}

inline OpCase make_case(const std::string& name, CaseGen& gen) {
  auto finish = [&](std::function<Tensor(const std::vector<Tensor>&)> op, std::vector<Tensor> inputs) {
    Tensor probe;
    {
      GraphModeGuard guard(GraphMode::inference);
      probe = op(inputs);
    }
    return OpCase{name, weighted(op, gen.random(probe.shape())), std::move(inputs)};
  };

  if (name == "add" || name == "sub" || name == "mul" || name == "div") {
    Shape s = gen.random_shape(gen.dim(1, 4));
    Tensor a = gen.random(s);
    Tensor b = name == "div" ? gen.away_from_zero(s, 0.5) : gen.random(s);
    auto op = [name](const std::vector<Tensor>& in) {
      if (name == "add") return add(in[0], in[1]);
      if (name == "sub") return sub(in[0], in[1]);
      if (name == "mul") return mul(in[0], in[1]);
      return div(in[0], in[1]);
    };
    return finish(op, {a, b});
  }
  if (name == "min_elementwise" || name == "max_elementwise") {
    Shape s = gen.random_shape(gen.dim(1, 3));
    Tensor a = gen.random(s);
    std::vector<double> bd(a.numel());
    for (std::size_t i = 0; i < bd.size(); ++i) bd[i] = a.at(i) + (gen.coin() ? 1 : -1) * gen.uniform(0.05, 0.5);
    Tensor b(s, bd);
    bool is_min = name == "min_elementwise";
    return finish([is_min](const std::vector<Tensor>& in) {
      return is_min ? min_elementwise(in[0], in[1]) : max_elementwise(in[0], in[1]);
    }, {a, b});
  }
  if (name == "matmul") {
    std::size_t m = gen.dim(), k = gen.dim(), n = gen.dim();
    return finish([](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); },
                  {gen.random({m, k}), gen.random({k, n})});
  }
  if (name == "bmm") {
    std::size_t b = gen.dim(1, 3), m = gen.dim(), k = gen.dim(), n = gen.dim();
    bool ta = gen.coin(), tb = gen.coin();
    Tensor x = gen.random(ta ? Shape{b, k, m} : Shape{b, m, k});
    Tensor y = gen.random(tb ? Shape{b, n, k} : Shape{b, k, n});
    return finish([ta, tb](const std::vector<Tensor>& in) { return bmm(in[0], in[1], ta, tb); }, {x, y});
  }
  if (name == "linear") {
    std::size_t b = gen.dim(), i = gen.dim(), o = gen.dim();
    return finish([](const std::vector<Tensor>& in) { return linear(in[0], in[1], in[2]); },
                  {gen.random({b, i}), gen.random({o, i}), gen.random({o})});
  }
  if (name == "conv2d" || name == "conv2d_input_grad" || name == "conv2d_weight_grad") {
    std::size_t b = gen.dim(1, 2), c = gen.dim(1, 3), o = gen.dim(1, 3);
    std::size_t h = gen.dim(3, 5), w = gen.dim(3, 5), k = gen.dim(1, 3);
    Conv2dOptions opts{gen.dim(1, 2), gen.dim(0, 1)};
    Shape xs{b, c, h, w}, ws{o, c, k, k};
    Shape ys{b, o, conv_output_size(h, k, opts.stride, opts.padding), conv_output_size(w, k, opts.stride, opts.padding)};
    if (name == "conv2d") {
      return finish([opts](const std::vector<Tensor>& in) { return conv2d(in[0], in[1], opts); },
                    {gen.random(xs), gen.random(ws)});
    }
    if (name == "conv2d_input_grad") {
      return finish([opts, xs](const std::vector<Tensor>& in) { return conv2d_input_grad(in[0], in[1], xs, opts); },
                    {gen.random(ys), gen.random(ws)});
    }
    return finish([opts, ws](const std::vector<Tensor>& in) { return conv2d_weight_grad(in[0], in[1], ws, opts); },
                  {gen.random(xs), gen.random(ys)});
  }
  if (name == "relu") {
    return finish([](const std::vector<Tensor>& in) { return relu(in[0]); },
                  {gen.away_from_zero(gen.random_shape(gen.dim(1, 4)), 0.05)});
  }
  if (name == "maxpool2d") {
    std::size_t win = gen.dim(1, 2), stride = gen.dim(1, 2);
    Shape s{gen.dim(1, 2), gen.dim(1, 3), gen.dim(2, 5), gen.dim(2, 5)};
    return finish([win, stride](const std::vector<Tensor>& in) { return maxpool2d(in[0], win, stride); },
                  {gen.distinct(s)});
  }
  if (name == "global_avg_pool") {
    return finish([](const std::vector<Tensor>& in) { return global_avg_pool(in[0]); },
                  {gen.random(gen.random_shape(4))});
  }
  if (name == "max_lastdim") {
    return finish([](const std::vector<Tensor>& in) { return max_lastdim(in[0]); },
                  {gen.distinct(gen.random_shape(gen.dim(1, 3)))});
  }
  if (name == "sigmoid" || name == "softplus") {
    bool sig = name == "sigmoid";
    return finish([sig](const std::vector<Tensor>& in) { return sig ? sigmoid(in[0]) : softplus(in[0]); },
                  {gen.random(gen.random_shape(gen.dim(1, 3)), -4.0, 4.0)});
  }
  if (name == "log") {
    return finish([](const std::vector<Tensor>& in) { return log(in[0]); },
                  {gen.random(gen.random_shape(gen.dim(1, 3)), 0.5, 2.0)});
  }
  if (name == "clamp") {
    Shape s = gen.random_shape(gen.dim(1, 3));
    std::vector<double> d(shape_numel(s));
    // keep every value at least 0.05 from the bounds -0.5 and 0.5
    for (auto& v : d) {
      double u = gen.uniform(0.0, 1.0);
      v = u < 0.33 ? gen.uniform(-1.0, -0.55) : (u < 0.66 ? gen.uniform(-0.45, 0.45) : gen.uniform(0.55, 1.0));
    }
    return finish([](const std::vector<Tensor>& in) { return clamp(in[0], -0.5, 0.5); }, {Tensor(s, d)});
  }
  if (name == "sum" || name == "mean") {
    bool is_sum = name == "sum";
    return finish([is_sum](const std::vector<Tensor>& in) { return is_sum ? sum(in[0]) : mean(in[0]); },
                  {gen.random(gen.random_shape(gen.dim(1, 4)))});
  }
  if (name == "bce_with_logits") {
    Shape s{gen.dim(), gen.dim()};
    std::vector<double> y(shape_numel(s));
    for (auto& v : y) v = gen.coin() ? 1.0 : 0.0;
    Tensor labels(s, y);
    return finish([labels](const std::vector<Tensor>& in) { return bce_with_logits(in[0], labels); },
                  {gen.random(s, -5.0, 5.0)});
  }
  if (name == "sum_trailing" || name == "expand_trailing") {
    Shape s = gen.random_shape(gen.dim(2, 4));
    std::size_t keep = gen.dim(1, s.size() - 1);
    if (name == "sum_trailing") {
      return finish([keep](const std::vector<Tensor>& in) { return sum_trailing(in[0], keep); }, {gen.random(s)});
    }
    Shape prefix(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(keep));
    return finish([s](const std::vector<Tensor>& in) { return expand_trailing(in[0], s); }, {gen.random(prefix)});
  }
  if (name == "bias_add") {
    Shape s = gen.random_shape(gen.dim(2, 4));
    return finish([](const std::vector<Tensor>& in) { return bias_add(in[0], in[1]); },
                  {gen.random(s), gen.random({s[1]})});
  }
  if (name == "reshape") {
    std::size_t a = gen.dim(), b = gen.dim();
    return finish([a, b](const std::vector<Tensor>& in) { return reshape(in[0], {b, a}); }, {gen.random({a, b})});
  }
  throw std::runtime_error("unknown op case " + name);
}

inline const std::vector<std::string>& all_op_names() {
  static const std::vector<std::string> names{
      "add",     "sub",       "mul",          "div",          "min_elementwise", "max_elementwise", "matmul",
      "bmm",     "linear",    "conv2d",       "conv2d_input_grad", "conv2d_weight_grad", "relu", "maxpool2d",
      "global_avg_pool", "max_lastdim", "sigmoid", "softplus", "log", "clamp", "sum", "mean",
      "bce_with_logits", "sum_trailing", "expand_trailing", "bias_add", "reshape"};
  return names;
}

/// Tiny conv -> relu -> maxpool -> linear net used by second-order checks.
/// inputs: x[1,1,5,5], w[2,1,3,3], b[2], fc_w[3,8], fc_b[3]
inline Tensor tiny_conv_net(const std::vector<Tensor>& in) {
  Tensor h = relu(bias_add(conv2d(in[0], in[1], {1, 1}), in[2]));
  Tensor p = maxpool2d(h, 2, 2);  // [1,2,2,2]
  Tensor logits = linear(reshape(p, {1, 8}), in[3], in[4]);
  return sum(mul(logits, logits));
}

inline std::vector<Tensor> tiny_conv_net_inputs(CaseGen& gen) {
  return {gen.random({1, 1, 5, 5}), gen.random({2, 1, 3, 3}), gen.random({2}, 0.1, 0.3), gen.random({3, 8}),
          gen.random({3})};
}

}  // namespace attnsteer::testing
