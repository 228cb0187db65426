#include "kfep/nn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kfep/error.hpp"
#include "kfep/rng.hpp"

namespace kfep::nn {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

using kernels::ConvGeometry;

std::string shape_str(const Shape& s) {
  return std::to_string(s.c) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

bool is_pointwise_flat(const ConvGeometry& g) { return g.k == 1 && g.h == 1 && g.w == 1 && g.padding == 0; }

// One linear stage (conv or dense) applied to a batch.
Matrix stage_forward(const ConvGeometry& g, std::size_t c_out, const Matrix& weight, std::span<const double> bias,
                     const Matrix& in) {
  const std::size_t batch = in.rows();
  if (is_pointwise_flat(g)) {
    Matrix out = matmul(in, weight);
    if (!bias.empty())
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < c_out; ++o) out(b, o) += bias[o];
    return out;
  }
  Matrix out(batch, c_out * g.locations());
  kernels::conv2d_forward(g, batch, c_out, in.data(), weight.data(), bias, out.data());
  return out;
}

// Accumulates the batch-summed weight/bias gradient and optionally the input
// gradient of a linear stage.
void stage_backward(const ConvGeometry& g, std::size_t c_out, const Matrix& weight, const Matrix& in,
                    const Matrix& dout, Vector* dweight, Vector* dbias, Matrix* din) {
  const std::size_t batch = in.rows();
  if (is_pointwise_flat(g)) {
    if (dweight) {
      const Matrix dw = matmul_tn(in, dout);
      for (std::size_t i = 0; i < dw.size(); ++i) (*dweight)[i] += dw.data()[i];
    }
    if (dbias)
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < c_out; ++o) (*dbias)[o] += dout(b, o);
    if (din) *din = matmul_nt(dout, weight);
    return;
  }
  const std::size_t locs = g.locations(), ps = g.patch_size();
  if (din) *din = Matrix(batch, g.input_size());
  Matrix patches(locs, ps), dO(locs, c_out), dw(ps, c_out), dP(locs, ps);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto drow = dout.row(b);
    for (std::size_t o = 0; o < c_out; ++o)
      for (std::size_t l = 0; l < locs; ++l) dO(l, o) = drow[o * locs + l];
    if (dbias)
      for (std::size_t o = 0; o < c_out; ++o)
        for (std::size_t l = 0; l < locs; ++l) (*dbias)[o] += drow[o * locs + l];
    if (dweight || din) kernels::im2col(g, in.row(b), patches.data());
    if (dweight) {
      kernels::gemm_tn(ps, c_out, locs, patches.data(), dO.data(), dw.data());
      for (std::size_t i = 0; i < dw.size(); ++i) (*dweight)[i] += dw.data()[i];
    }
    if (din) {
      kernels::gemm_nt(locs, ps, c_out, dO.data(), weight.data(), dP.data());
      kernels::col2im_add(g, dP.data(), din->row(b));
    }
  }
}

// Depthwise k x k conv over r channels, kernel row i = diag(D_i).
Matrix depthwise_forward(const ConvGeometry& g, const Matrix& d, const Matrix& in) {
  const std::size_t batch = in.rows(), r = g.c_in, ho = g.h_out(), wo = g.w_out();
  Matrix out(batch, r * ho * wo);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto x = in.row(b);
    auto y = out.row(b);
    for (std::size_t c = 0; c < r; ++c)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double s = 0.0;
          for (std::size_t ky = 0; ky < g.k; ++ky) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t kx = 0; kx < g.k; ++kx) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
              if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
              s += d(ky * g.k + kx, c) * x[c * g.h * g.w + static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)];
            }
          }
          y[c * ho * wo + oy * wo + ox] = s;
        }
  }
  return out;
}

void depthwise_backward(const ConvGeometry& g, const Matrix& d, const Matrix& in, const Matrix& dout, Vector* dd,
                        Matrix* din) {
  const std::size_t batch = in.rows(), r = g.c_in, ho = g.h_out(), wo = g.w_out();
  if (din) *din = Matrix(batch, in.cols());
  for (std::size_t b = 0; b < batch; ++b) {
    const auto x = in.row(b);
    const auto dy = dout.row(b);
    for (std::size_t c = 0; c < r; ++c)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const double gy = dy[c * ho * wo + oy * wo + ox];
          for (std::size_t ky = 0; ky < g.k; ++ky) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t kx = 0; kx < g.k; ++kx) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
              if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
              const std::size_t idx = c * g.h * g.w + static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix);
              const std::size_t s = ky * g.k + kx;
              if (dd) (*dd)[s * r + c] += gy * x[idx];
              if (din) (*din)(b, idx) += gy * d(s, c);
            }
          }
        }
  }
}

ConvGeometry dense_geometry(std::size_t n) { return ConvGeometry{n, 1, 1, 1, 1, 0}; }

ConvGeometry conv_geometry(const ConvLayer& c, const Shape& in) {
  return ConvGeometry{c.c_in, in.h, in.w, c.k, c.stride, c.padding};
}

// Core-stage geometry and output width used for capture.
struct CoreInfo {
  bool is_conv;
  ConvGeometry geom;
  std::size_t c_out;
};

Shape apply_shape(const Layer& layer, const Shape& in) {
  return std::visit(
      Overloaded{
          [&](const DenseLayer& d) -> Shape {
            if (in.h != 1 || in.w != 1 || in.c != d.inputs())
              throw DimensionError("dense layer expects " + std::to_string(d.inputs()) + " flat inputs, got " +
                                   shape_str(in));
            if (d.bias.size() != d.outputs()) throw DimensionError("dense bias length mismatch");
            return Shape{d.outputs(), 1, 1};
          },
          [&](const ConvLayer& c) -> Shape {
            const ConvGeometry g = conv_geometry(c, in);
            if (in.c != c.c_in || !g.valid())
              throw DimensionError("conv layer expects " + std::to_string(c.c_in) + " channels, got " + shape_str(in));
            if (c.weight.rows() != g.patch_size() || c.weight.cols() != c.c_out)
              throw DimensionError("conv weight shape mismatch");
            if (c.bias.size() != c.c_out) throw DimensionError("conv bias length mismatch");
            return Shape{c.c_out, g.h_out(), g.w_out()};
          },
          [&](const ReluLayer&) { return in; },
          [&](const FlattenLayer&) { return Shape{in.size(), 1, 1}; },
          [&](const GlobalAvgPoolLayer&) { return Shape{in.c, 1, 1}; },
          [&](const BottleneckLayer& b) -> Shape { return bottleneck_stages(b, in).out; },
      },
      layer);
}

}  // namespace

BottleneckStages bottleneck_stages(const BottleneckLayer& b, const Shape& in) {
  const std::size_t ra = b.rank_in(), rs = b.rank_out();
  if (in.c != b.c_in) throw DimensionError("bottleneck expects " + std::to_string(b.c_in) + " channels, got " + shape_str(in));
  if (b.q_a.rows() != b.basis_rows()) throw DimensionError("bottleneck input basis has wrong row count");
  if (b.q_s.rows() != b.c_out) throw DimensionError("bottleneck output basis has wrong row count");
  if (b.bias.size() != b.c_out) throw DimensionError("bottleneck bias length mismatch");
  const std::size_t kc = b.core_k();
  if (b.is_depthwise()) {
    if (ra != rs || b.depthwise.cols() != ra || b.depthwise.rows() != kc * kc)
      throw DimensionError("depthwise core shape mismatch");
  } else if (b.core.rows() != ra * kc * kc || b.core.cols() != rs) {
    throw DimensionError("bottleneck core shape mismatch");
  }

  BottleneckStages st;
  if (b.kind == BottleneckKind::dense) {
    if (in.h != 1 || in.w != 1) throw DimensionError("dense bottleneck expects flat input, got " + shape_str(in));
    st.stage[0] = dense_geometry(b.c_in);
    st.stage[1] = dense_geometry(ra);
    st.stage[2] = dense_geometry(rs);
    st.out = Shape{b.c_out, 1, 1};
    return st;
  }
  if (b.variant == BasisVariant::patch) {
    st.stage[0] = ConvGeometry{b.c_in, in.h, in.w, b.k, b.stride, b.padding};
    if (!st.stage[0].valid()) throw DimensionError("bottleneck kernel larger than input");
    const std::size_t ho = st.stage[0].h_out(), wo = st.stage[0].w_out();
    st.stage[1] = ConvGeometry{ra, ho, wo, 1, 1, 0};
    st.stage[2] = ConvGeometry{rs, ho, wo, 1, 1, 0};
    st.out = Shape{b.c_out, ho, wo};
  } else {
    st.stage[0] = ConvGeometry{b.c_in, in.h, in.w, 1, 1, 0};
    st.stage[1] = ConvGeometry{ra, in.h, in.w, b.k, b.stride, b.padding};
    if (!st.stage[1].valid()) throw DimensionError("bottleneck kernel larger than input");
    const std::size_t ho = st.stage[1].h_out(), wo = st.stage[1].w_out();
    st.stage[2] = ConvGeometry{rs, ho, wo, 1, 1, 0};
    st.out = Shape{b.c_out, ho, wo};
  }
  return st;
}

bool is_linear(const Layer& l) {
  return std::holds_alternative<DenseLayer>(l) || std::holds_alternative<ConvLayer>(l) ||
         std::holds_alternative<BottleneckLayer>(l);
}

std::string layer_name(const Layer& l) {
  return std::visit(Overloaded{
                        [](const DenseLayer&) { return std::string("dense"); },
                        [](const ConvLayer&) { return std::string("conv"); },
                        [](const ReluLayer&) { return std::string("relu"); },
                        [](const FlattenLayer&) { return std::string("flatten"); },
                        [](const GlobalAvgPoolLayer&) { return std::string("gap"); },
                        [](const BottleneckLayer&) { return std::string("bottleneck"); },
                    },
                    l);
}

std::vector<Shape> layer_shapes(const Network& net) {
  std::vector<Shape> out;
  Shape s = net.input;
  for (const Layer& l : net.layers) {
    s = apply_shape(l, s);
    out.push_back(s);
  }
  return out;
}

std::vector<Shape> layer_input_shapes(const Network& net) {
  std::vector<Shape> out;
  Shape s = net.input;
  for (const Layer& l : net.layers) {
    out.push_back(s);
    s = apply_shape(l, s);
  }
  return out;
}

std::size_t num_classes(const Network& net) {
  const auto shapes = layer_shapes(net);
  return shapes.empty() ? net.input.size() : shapes.back().size();
}

std::vector<std::span<double>> parameters(Layer& l) {
  return std::visit(Overloaded{
                        [](DenseLayer& d) { return std::vector<std::span<double>>{d.weight.data(), d.bias}; },
                        [](ConvLayer& c) { return std::vector<std::span<double>>{c.weight.data(), c.bias}; },
                        [](BottleneckLayer& b) {
                          return std::vector<std::span<double>>{
                              b.q_a.data(), b.is_depthwise() ? b.depthwise.data() : b.core.data(), b.q_s.data(), b.bias};
                        },
                        [](auto&) { return std::vector<std::span<double>>{}; },
                    },
                    l);
}

std::vector<std::span<const double>> parameters(const Layer& l) {
  auto spans = parameters(const_cast<Layer&>(l));
  return {spans.begin(), spans.end()};
}

std::size_t parameter_count(const Network& net) {
  std::size_t n = 0;
  for (const Layer& l : net.layers)
    for (const auto& p : parameters(l)) n += p.size();
  return n;
}

Matrix softmax(const Matrix& logits) {
  Matrix p = logits;
  for (std::size_t b = 0; b < p.rows(); ++b) {
    auto r = p.row(b);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double& x : r) z += (x = std::exp(x - mx));
    for (double& x : r) x /= z;
  }
  return p;
}

Vector per_sample_cross_entropy(const Matrix& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows()) throw DimensionError("cross_entropy: label count mismatch");
  Vector out(labels.size());
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    const auto r = logits.row(b);
    const auto y = static_cast<std::size_t>(labels[b]);
    if (labels[b] < 0 || y >= r.size()) throw ValidationError("cross_entropy: label out of range");
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double x : r) z += std::exp(x - mx);
    out[b] = std::log(z) + mx - r[y];
  }
  return out;
}

double cross_entropy(const Matrix& logits, std::span<const int> labels) {
  const Vector l = per_sample_cross_entropy(logits, labels);
  double s = 0.0;
  for (double x : l) s += x;
  return l.empty() ? 0.0 : s / static_cast<double>(l.size());
}

ForwardPass forward(const Network& net, const Matrix& inputs, bool capture) {
  if (inputs.cols() != net.input.size())
    throw DimensionError("forward: input width " + std::to_string(inputs.cols()) + " != " +
                         std::to_string(net.input.size()));
  ForwardPass pass;
  pass.batch = inputs.rows();
  pass.capture = capture;
  pass.cache.resize(net.layers.size());
  Matrix x = inputs;
  Shape s = net.input;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const Layer& layer = net.layers[li];
    LayerCache& cache = pass.cache[li];
    const Shape out_shape = apply_shape(layer, s);
    Matrix y = std::visit(
        Overloaded{
            [&](const DenseLayer& d) { return stage_forward(dense_geometry(d.inputs()), d.outputs(), d.weight, d.bias, x); },
            [&](const ConvLayer& c) { return stage_forward(conv_geometry(c, s), c.c_out, c.weight, c.bias, x); },
            [&](const ReluLayer&) {
              Matrix r = x;
              for (double& v : r.data()) v = v > 0.0 ? v : 0.0;
              return r;
            },
            [&](const FlattenLayer&) { return x; },
            [&](const GlobalAvgPoolLayer&) {
              const std::size_t plane = s.h * s.w;
              Matrix r(x.rows(), s.c);
              for (std::size_t b = 0; b < x.rows(); ++b)
                for (std::size_t c = 0; c < s.c; ++c) {
                  double acc = 0.0;
                  for (std::size_t p = 0; p < plane; ++p) acc += x(b, c * plane + p);
                  r(b, c) = acc / static_cast<double>(plane);
                }
              return r;
            },
            [&](const BottleneckLayer& b) {
              const BottleneckStages st = bottleneck_stages(b, s);
              Matrix s1 = stage_forward(st.stage[0], b.rank_in(), b.q_a, {}, x);
              Matrix s2 = b.is_depthwise() ? depthwise_forward(st.stage[1], b.depthwise, s1)
                                           : stage_forward(st.stage[1], b.rank_out(), b.core, {}, s1);
              Matrix out = stage_forward(st.stage[2], b.c_out, b.q_s.transpose(), b.bias, s2);
              cache.stage1 = std::move(s1);
              cache.stage2 = std::move(s2);
              return out;
            },
        },
        layer);
    cache.input = std::move(x);
    x = std::move(y);
    s = out_shape;
  }
  pass.logits = std::move(x);
  return pass;
}

Matrix predict(const Network& net, const Matrix& inputs) { return forward(net, inputs, false).logits; }

BackwardResult backward(const Network& net, const ForwardPass& pass, std::span<const int> labels) {
  if (pass.cache.size() != net.layers.size() || labels.size() != pass.batch || pass.logits.rows() != pass.batch)
    throw StateError("backward: forward pass does not match this network and batch");
  const std::size_t batch = pass.batch;
  BackwardResult res;
  res.loss = cross_entropy(pass.logits, labels);
  res.grads.resize(net.layers.size());
  res.captures.resize(net.layers.size());

  // Per-sample, unscaled dl/dlogits.
  Matrix delta = softmax(pass.logits);
  for (std::size_t b = 0; b < batch; ++b) delta(b, static_cast<std::size_t>(labels[b])) -= 1.0;

  const std::vector<Shape> in_shapes = layer_input_shapes(net);
  const double inv_batch = batch ? 1.0 / static_cast<double>(batch) : 0.0;

  for (std::size_t li = net.layers.size(); li-- > 0;) {
    const Layer& layer = net.layers[li];
    const LayerCache& cache = pass.cache[li];
    const Shape& s = in_shapes[li];
    LayerGrads& grads = res.grads[li];
    Matrix din;
    const bool need_din = li > 0;

    std::visit(
        Overloaded{
            [&](const DenseLayer& d) {
              grads = {Vector(d.weight.size(), 0.0), Vector(d.bias.size(), 0.0)};
              const ConvGeometry g = dense_geometry(d.inputs());
              stage_backward(g, d.outputs(), d.weight, cache.input, delta, &grads[0], &grads[1], need_din ? &din : nullptr);
              if (pass.capture) res.captures[li] = LayerCapture{false, g, d.outputs(), cache.input, delta};
            },
            [&](const ConvLayer& c) {
              grads = {Vector(c.weight.size(), 0.0), Vector(c.bias.size(), 0.0)};
              const ConvGeometry g = conv_geometry(c, s);
              stage_backward(g, c.c_out, c.weight, cache.input, delta, &grads[0], &grads[1], need_din ? &din : nullptr);
              if (pass.capture) res.captures[li] = LayerCapture{true, g, c.c_out, cache.input, delta};
            },
            [&](const ReluLayer&) {
              din = delta;
              for (std::size_t i = 0; i < din.size(); ++i)
                if (!(cache.input.data()[i] > 0.0)) din.data()[i] = 0.0;
            },
            [&](const FlattenLayer&) { din = delta; },
            [&](const GlobalAvgPoolLayer&) {
              const std::size_t plane = s.h * s.w;
              din = Matrix(batch, s.size());
              for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t c = 0; c < s.c; ++c)
                  for (std::size_t p = 0; p < plane; ++p) din(b, c * plane + p) = delta(b, c) / static_cast<double>(plane);
            },
            [&](const BottleneckLayer& bl) {
              const BottleneckStages st = bottleneck_stages(bl, s);
              const Matrix& core_w = bl.is_depthwise() ? bl.depthwise : bl.core;
              grads = {Vector(bl.q_a.size(), 0.0), Vector(core_w.size(), 0.0), Vector(bl.q_s.size(), 0.0),
                       Vector(bl.bias.size(), 0.0)};
              const Matrix qs_t = bl.q_s.transpose();
              Vector dqs_t(qs_t.size(), 0.0);
              Matrix d2, d1;
              stage_backward(st.stage[2], bl.c_out, qs_t, cache.stage2, delta, &dqs_t, &grads[3], &d2);
              const Matrix qs_grad_t(qs_t.rows(), qs_t.cols(), dqs_t);
              const Matrix qs_grad = qs_grad_t.transpose();
              std::copy(qs_grad.data().begin(), qs_grad.data().end(), grads[2].begin());
              if (bl.is_depthwise()) {
                depthwise_backward(st.stage[1], bl.depthwise, cache.stage1, d2, &grads[1], &d1);
              } else {
                stage_backward(st.stage[1], bl.rank_out(), bl.core, cache.stage1, d2, &grads[1], nullptr, &d1);
                if (pass.capture)
                  res.captures[li] = LayerCapture{bl.kind == BottleneckKind::conv, st.stage[1], bl.rank_out(), cache.stage1, d2};
              }
              stage_backward(st.stage[0], bl.rank_in(), bl.q_a, cache.input, d1, &grads[0], nullptr,
                             need_din ? &din : nullptr);
            },
        },
        layer);

    for (Vector& g : grads)
      for (double& v : g) v *= inv_batch;
    if (need_din) delta = std::move(din);
  }
  return res;
}

void sgd_step(Network& net, const NetGrads& grads, double lr, double weight_decay) {
  if (!(lr >= 0.0) || !(weight_decay >= 0.0)) throw ValidationError("sgd_step: lr and weight_decay must be >= 0");
  if (grads.size() != net.layers.size()) throw DimensionError("sgd_step: gradient layer count mismatch");
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    auto params = parameters(net.layers[li]);
    if (params.empty()) continue;
    if (grads[li].size() != params.size()) throw DimensionError("sgd_step: gradient tensor count mismatch");
    for (std::size_t t = 0; t < params.size(); ++t) {
      if (grads[li][t].size() != params[t].size()) throw DimensionError("sgd_step: gradient size mismatch");
      for (double g : grads[li][t])
        if (!std::isfinite(g)) throw TrainingDivergence("sgd_step: non-finite gradient in layer " + std::to_string(li));
    }
  }
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    auto params = parameters(net.layers[li]);
    for (std::size_t t = 0; t < params.size(); ++t)
      for (std::size_t i = 0; i < params[t].size(); ++i)
        params[t][i] -= lr * (grads[li][t][i] + weight_decay * params[t][i]);
  }
}

namespace {

Matrix kaiming_uniform(std::size_t fan_in, std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Matrix m(rows, cols);
  for (double& x : m.data()) x = rng.uniform(-bound, bound);
  return m;
}

}  // namespace

Network make_mlp(std::size_t inputs, std::span<const std::size_t> hidden, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  Network net;
  net.input = Shape{inputs, 1, 1};
  std::size_t n = inputs;
  for (std::size_t h : hidden) {
    net.layers.emplace_back(DenseLayer{kaiming_uniform(n, n, h, rng), Vector(h, 0.0)});
    net.layers.emplace_back(ReluLayer{});
    n = h;
  }
  net.layers.emplace_back(DenseLayer{kaiming_uniform(n, n, classes, rng), Vector(classes, 0.0)});
  return net;
}

Network make_cnn(const Shape& input, std::span<const std::size_t> channels, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  Network net;
  net.input = input;
  std::size_t c = input.c;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    ConvLayer conv{c, channels[i], 3, i == 0 ? 1u : 2u, 1, {}, Vector(channels[i], 0.0)};
    conv.weight = kaiming_uniform(c * 9, c * 9, channels[i], rng);
    net.layers.emplace_back(std::move(conv));
    net.layers.emplace_back(ReluLayer{});
    c = channels[i];
  }
  net.layers.emplace_back(GlobalAvgPoolLayer{});
  net.layers.emplace_back(DenseLayer{kaiming_uniform(c, c, classes, rng), Vector(classes, 0.0)});
  layer_shapes(net);
  return net;
}

Network make_network(const std::string& arch, const Shape& input, std::size_t classes, std::uint64_t seed) {
  const auto colon = arch.find(':');
  const std::string kind = arch.substr(0, colon);
  std::vector<std::size_t> widths;
  if (colon != std::string::npos) {
    std::stringstream ss(arch.substr(colon + 1));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (tok.empty()) continue;
      try {
        widths.push_back(static_cast<std::size_t>(std::stoul(tok)));
      } catch (const std::exception&) {
        throw ValidationError("architecture '" + arch + "': bad width '" + tok + "'");
      }
      if (widths.back() == 0) throw ValidationError("architecture '" + arch + "': zero width");
    }
  }
  if (kind == "mlp") return make_mlp(input.size(), widths, classes, seed);
  if (kind == "cnn") {
    if (widths.empty()) throw ValidationError("architecture '" + arch + "': cnn needs at least one conv");
    return make_cnn(input, widths, classes, seed);
  }
  throw ValidationError("unknown architecture '" + arch + "' (expected mlp:... or cnn:...)");
}

}  // namespace kfep::nn
