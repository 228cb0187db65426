#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "kfep/kernels.hpp"
#include "kfep/matrix.hpp"

namespace kfep::nn {

struct Shape {
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t size() const { return c * h * w; }
  bool operator==(const Shape&) const = default;
};

// s = W^T a with W of size n x m (inputs x outputs).
struct DenseLayer {
  Matrix weight;
  Vector bias;

  std::size_t inputs() const { return weight.rows(); }
  std::size_t outputs() const { return weight.cols(); }
};

// Weight is the reshaped kernel, (c_in*k*k) x c_out: column j is filter j with
// row index c*k*k + ky*k + kx.
struct ConvLayer {
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t k = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Matrix weight;
  Vector bias;
};

struct ReluLayer {};
struct FlattenLayer {};
struct GlobalAvgPoolLayer {};

enum class BottleneckKind : std::uint8_t { dense = 0, conv = 1 };

// patch: the input basis acts on c_in*k*k patches (k x k conv, then a 1x1
// core). channel: the input basis acts per pixel on c_in channels (1x1 conv,
// then a k x k core).
enum class BasisVariant : std::uint8_t { patch = 0, channel = 1 };

// Three-stage layer a -> Q_A^T a -> core -> Q_S (.) + bias. The effective
// weight of a matrix core is (Q_A (x) I) W' Q_S^T.
struct BottleneckLayer {
  BottleneckKind kind = BottleneckKind::dense;
  BasisVariant variant = BasisVariant::channel;
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t k = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Matrix q_a;        // basis_rows() x r_a
  Matrix core;       // (r_a * core_k^2) x r_s, empty when depthwise
  Matrix depthwise;  // core_k^2 x r, row i is diag(D_i)
  Matrix q_s;        // c_out x r_s
  Vector bias;
  std::vector<std::uint32_t> kept_rows;
  std::vector<std::uint32_t> kept_cols;

  std::size_t rank_in() const { return q_a.cols(); }
  std::size_t rank_out() const { return q_s.cols(); }
  std::size_t core_k() const {
    return kind == BottleneckKind::conv && variant == BasisVariant::channel ? k : 1;
  }
  std::size_t basis_rows() const {
    return kind == BottleneckKind::conv && variant == BasisVariant::patch ? c_in * k * k : c_in;
  }
  bool is_depthwise() const { return !depthwise.empty(); }
};

using Layer = std::variant<DenseLayer, ConvLayer, ReluLayer, FlattenLayer, GlobalAvgPoolLayer, BottleneckLayer>;

struct Network {
  Shape input;
  std::vector<Layer> layers;
};

// Stage geometry of a bottleneck given its input shape. stage[0..2] are the
// input basis, the core and the output basis.
struct BottleneckStages {
  kernels::ConvGeometry stage[3];
  Shape out;
};
BottleneckStages bottleneck_stages(const BottleneckLayer& b, const Shape& in);

bool is_linear(const Layer& l);
std::string layer_name(const Layer& l);

// Shape after each layer; throws DimensionError when adjacent layers do not
// conform.
std::vector<Shape> layer_shapes(const Network& net);
// Input shape of every layer (layer_shapes shifted by one).
std::vector<Shape> layer_input_shapes(const Network& net);
std::size_t num_classes(const Network& net);

// Parameter tensors of a layer in a fixed order (weight, bias for dense and
// conv; q_a, core or depthwise, q_s, bias for bottlenecks).
std::vector<std::span<double>> parameters(Layer& l);
std::vector<std::span<const double>> parameters(const Layer& l);
std::size_t parameter_count(const Network& net);

using LayerGrads = std::vector<Vector>;
using NetGrads = std::vector<LayerGrads>;

// K-FAC inputs of one linear layer: the input of its (core) linear map and the
// per-sample, unscaled gradient of the loss with respect to its output. Dense
// layers are the 1x1-on-1x1 special case of the conv geometry.
struct LayerCapture {
  bool is_conv = false;
  kernels::ConvGeometry geom;
  std::size_t c_out = 0;
  Matrix inputs;  // batch x geom.input_size()
  Matrix grads;   // batch x c_out * geom.locations()
};

struct LayerCache {
  Matrix input;
  Matrix stage1;  // bottleneck: input-basis output
  Matrix stage2;  // bottleneck: core output
};

struct ForwardPass {
  Matrix logits;
  std::vector<LayerCache> cache;
  std::size_t batch = 0;
  bool capture = false;
};

struct BackwardResult {
  NetGrads grads;  // mean over the batch
  std::vector<std::optional<LayerCapture>> captures;
  double loss = 0.0;
};

ForwardPass forward(const Network& net, const Matrix& inputs, bool capture = false);
Matrix predict(const Network& net, const Matrix& inputs);

// Mean softmax cross-entropy gradient. When `pass.capture` was set, also
// returns per-layer captures for K-FAC.
BackwardResult backward(const Network& net, const ForwardPass& pass, std::span<const int> labels);

double cross_entropy(const Matrix& logits, std::span<const int> labels);
Vector per_sample_cross_entropy(const Matrix& logits, std::span<const int> labels);
Matrix softmax(const Matrix& logits);

// theta <- theta - lr * (grad + weight_decay * theta)
void sgd_step(Network& net, const NetGrads& grads, double lr, double weight_decay);

struct InitOptions {
  std::uint64_t seed = 0;
};

// Kaiming-uniform fan-in init with a seeded generator; biases start at zero.
Network make_mlp(std::size_t inputs, std::span<const std::size_t> hidden, std::size_t classes, std::uint64_t seed);
// 3x3 convs (padding 1; stride 1 for the first, 2 afterwards) with ReLU, then
// global average pooling and a dense classifier.
Network make_cnn(const Shape& input, std::span<const std::size_t> channels, std::size_t classes, std::uint64_t seed);

// Architecture strings: "mlp:32,32" or "cnn:8,16".
Network make_network(const std::string& arch, const Shape& input, std::size_t classes, std::uint64_t seed);

}  // namespace kfep::nn
