#include "kfep/kfac.hpp"

#include <algorithm>
#include <cmath>

#include "kfep/error.hpp"
#include "kfep/kernels.hpp"

namespace kfep::kfac {

namespace {

std::size_t a_dim(FactorVariant v, const nn::LayerCapture& c) {
  switch (v) {
    case FactorVariant::dense: return c.geom.input_size();
    case FactorVariant::conv_full: return c.geom.patch_size();
    case FactorVariant::conv_channel: return c.geom.c_in;
  }
  return 0;
}

void check(const KronFactors& f, const nn::LayerCapture& c, FactorVariant expected) {
  if (f.variant != expected) throw ValidationError("factor variant does not match accumulation routine");
  if (c.inputs.rows() != c.grads.rows()) throw DimensionError("capture batch sizes differ");
  if (c.inputs.cols() != c.geom.input_size() || c.grads.cols() != c.c_out * c.geom.locations())
    throw DimensionError("capture shape does not match its geometry");
  if (f.a.rows() != a_dim(expected, c) || f.s.rows() != c.c_out)
    throw DimensionError("factor dimensions " + std::to_string(f.a.rows()) + "/" + std::to_string(f.s.rows()) +
                         " do not match layer " + std::to_string(a_dim(expected, c)) + "/" + std::to_string(c.c_out));
}

// Running mean update with exact counts: M <- (n M + sum) / (n + b).
void merge_mean(Matrix& mean, const Matrix& batch_sum, std::size_t n, std::size_t b) {
  const double total = static_cast<double>(n + b);
  const double keep = static_cast<double>(n) / total;
  for (std::size_t i = 0; i < mean.size(); ++i) mean.data()[i] = keep * mean.data()[i] + batch_sum.data()[i] / total;
}

// sum_b G_b G_b^T / L with G_b the c_out x L per-sample gradient map.
Matrix gradient_gram(const nn::LayerCapture& c) {
  const std::size_t locs = c.geom.locations();
  Matrix sum(c.c_out, c.c_out);
  Matrix g(c.c_out, locs);
  for (std::size_t b = 0; b < c.grads.rows(); ++b) {
    std::copy(c.grads.row(b).begin(), c.grads.row(b).end(), g.data().begin());
    sum += matmul_nt(g, g);
  }
  sum *= 1.0 / static_cast<double>(locs);
  return sum;
}

}  // namespace

KronFactors empty_factors(FactorVariant variant, const nn::LayerCapture& capture) {
  const std::size_t n = a_dim(variant, capture);
  return KronFactors{Matrix(n, n), Matrix(capture.c_out, capture.c_out), 0, variant};
}

KronFactors accumulate_dense(KronFactors f, const nn::LayerCapture& c) {
  check(f, c, FactorVariant::dense);
  if (c.geom.locations() != 1) throw DimensionError("accumulate_dense: capture is spatial");
  const std::size_t b = c.inputs.rows();
  merge_mean(f.a, matmul_tn(c.inputs, c.inputs), f.sample_count, b);
  merge_mean(f.s, matmul_tn(c.grads, c.grads), f.sample_count, b);
  f.sample_count += b;
  return f;
}

KronFactors accumulate_conv(KronFactors f, const nn::LayerCapture& c) {
  check(f, c, FactorVariant::conv_full);
  const std::size_t b = c.inputs.rows();
  Matrix a_sum(f.a.rows(), f.a.cols());
  kernels::accumulate_patch_gram(c.geom, b, c.inputs.data(), a_sum.data());
  merge_mean(f.a, a_sum, f.sample_count, b);
  merge_mean(f.s, gradient_gram(c), f.sample_count, b);
  f.sample_count += b;
  return f;
}

KronFactors accumulate_conv_channel(KronFactors f, const nn::LayerCapture& c) {
  check(f, c, FactorVariant::conv_channel);
  const std::size_t b = c.inputs.rows();
  const std::size_t pixels = c.geom.h * c.geom.w;
  Matrix a_sum(c.geom.c_in, c.geom.c_in);
  Matrix x(c.geom.c_in, pixels);
  for (std::size_t i = 0; i < b; ++i) {
    std::copy(c.inputs.row(i).begin(), c.inputs.row(i).end(), x.data().begin());
    a_sum += matmul_nt(x, x);
  }
  a_sum *= 1.0 / static_cast<double>(pixels);
  merge_mean(f.a, a_sum, f.sample_count, b);
  merge_mean(f.s, gradient_gram(c), f.sample_count, b);
  f.sample_count += b;
  return f;
}

KronFactors accumulate(KronFactors f, const nn::LayerCapture& c) {
  switch (f.variant) {
    case FactorVariant::dense: return accumulate_dense(std::move(f), c);
    case FactorVariant::conv_full: return accumulate_conv(std::move(f), c);
    case FactorVariant::conv_channel: return accumulate_conv_channel(std::move(f), c);
  }
  throw ValidationError("unknown factor variant");
}

KronFactors damp(KronFactors f, double lambda) {
  if (!(lambda >= 0.0)) throw ValidationError("damping must be >= 0");
  const double root = std::sqrt(lambda);
  for (Matrix* m : {&f.a, &f.s}) {
    if (m->rows() == 0) continue;
    const double shift = root * trace(*m) / static_cast<double>(m->rows());
    for (std::size_t i = 0; i < m->rows(); ++i) (*m)(i, i) += shift;
  }
  return f;
}

EigenFactors eigenbasis(const KronFactors& f) {
  if (f.sample_count == 0) throw StateError("eigenbasis: factors have no samples");
  SymEigen ea = sym_eig(f.a);
  SymEigen es = sym_eig(f.s);
  return EigenFactors{std::move(ea.vectors), std::move(ea.values), std::move(es.vectors), std::move(es.values)};
}

Matrix fisher_vec(const KronFactors& f, const Matrix& x) {
  if (x.rows() != f.a.rows() || x.cols() != f.s.rows())
    throw DimensionError("fisher_vec: X is " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                         ", factors expect " + std::to_string(f.a.rows()) + "x" + std::to_string(f.s.rows()));
  return matmul_nt(matmul(f.a, x), f.s);
}

KronInverse kron_inverse(const KronFactors& f) { return {spd_inverse(f.a), spd_inverse(f.s)}; }

double offdiag_ratio(const Matrix& f) {
  if (!f.square()) throw DimensionError("offdiag_ratio: non-square matrix");
  double off = 0.0, all = 0.0;
  for (std::size_t i = 0; i < f.rows(); ++i)
    for (std::size_t j = 0; j < f.cols(); ++j) {
      const double v = f(i, j) * f(i, j);
      all += v;
      if (i != j) off += v;
    }
  return all > 0.0 ? std::sqrt(off / all) : 0.0;
}

FactorVariant variant_for_layer(const nn::Layer& layer, FactorVariant conv_variant) {
  if (std::holds_alternative<nn::DenseLayer>(layer)) return FactorVariant::dense;
  if (std::holds_alternative<nn::ConvLayer>(layer)) return conv_variant == FactorVariant::dense ? FactorVariant::conv_full : conv_variant;
  if (const auto* b = std::get_if<nn::BottleneckLayer>(&layer)) {
    if (b->kind == nn::BottleneckKind::dense) return FactorVariant::dense;
    return b->variant == nn::BasisVariant::channel ? FactorVariant::conv_channel : FactorVariant::conv_full;
  }
  throw ValidationError("layer '" + nn::layer_name(layer) + "' has no Kronecker factors");
}

FactorSet estimate_factors(const nn::Network& net, const Dataset& data, const EstimateOptions& opts) {
  if (data.size() == 0) throw ValidationError("estimate_factors: dataset is empty");
  if (opts.batch_size == 0) throw ValidationError("estimate_factors: batch size must be positive");
  FactorSet out(net.layers.size());
  std::size_t batches = 0;
  for (std::size_t start = 0; start < data.size(); start += opts.batch_size) {
    if (opts.max_batches && batches == opts.max_batches) break;
    ++batches;
    const Dataset part = data.slice(start, start + opts.batch_size);
    const nn::ForwardPass pass = nn::forward(net, part.inputs, true);
    const nn::BackwardResult br = nn::backward(net, pass, part.labels);
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
      if (!br.captures[li]) continue;
      if (!out[li]) out[li] = empty_factors(variant_for_layer(net.layers[li], opts.conv_variant), *br.captures[li]);
      out[li] = accumulate(std::move(*out[li]), *br.captures[li]);
    }
  }
  return out;
}

}  // namespace kfep::kfac
