#include "kfep/oracle.hpp"

#include <algorithm>
#include <cmath>

#include "kfep/error.hpp"
#include "kfep/linalg.hpp"

namespace kfep::oracle {

void ExactQuadratic::validate() const {
  if (!h.square() || h.rows() != theta.size())
    throw DimensionError("quadratic: H is " + std::to_string(h.rows()) + "x" + std::to_string(h.cols()) +
                         " but theta has " + std::to_string(theta.size()) + " entries");
  if (asymmetry(h) > kSymmetryTolerance) throw ValidationError("quadratic: H is not symmetric");
}

namespace {

const Matrix& weight_of(const nn::Layer& l) {
  if (const auto* d = std::get_if<nn::DenseLayer>(&l)) return d->weight;
  if (const auto* c = std::get_if<nn::ConvLayer>(&l)) return c->weight;
  throw ValidationError("layer '" + nn::layer_name(l) + "' has no plain weight matrix");
}

Matrix& weight_of(nn::Layer& l) { return const_cast<Matrix&>(weight_of(static_cast<const nn::Layer&>(l))); }

void guard(std::size_t n) {
  if (n > kMaxOracleParams)
    throw SizeError("oracle: " + std::to_string(n) + " parameters exceed the budget of " +
                    std::to_string(kMaxOracleParams));
}

}  // namespace

std::vector<std::size_t> weight_layers(const nn::Network& net, std::span<const std::size_t> layers) {
  if (!layers.empty()) {
    for (std::size_t li : layers) {
      if (li >= net.layers.size()) throw DimensionError("oracle: layer index out of range");
      (void)weight_of(net.layers[li]);
    }
    return {layers.begin(), layers.end()};
  }
  std::vector<std::size_t> out;
  for (std::size_t li = 0; li < net.layers.size(); ++li)
    if (std::holds_alternative<nn::DenseLayer>(net.layers[li]) || std::holds_alternative<nn::ConvLayer>(net.layers[li]))
      out.push_back(li);
  return out;
}

std::size_t weight_count(const nn::Network& net, std::span<const std::size_t> layers) {
  std::size_t n = 0;
  for (std::size_t li : weight_layers(net, layers)) n += weight_of(net.layers[li]).size();
  return n;
}

Vector get_weights(const nn::Network& net, std::span<const std::size_t> layers) {
  Vector out;
  for (std::size_t li : weight_layers(net, layers)) {
    const Vector v = vec(weight_of(net.layers[li]));
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

void set_weights(nn::Network& net, std::span<const std::size_t> layers, std::span<const double> theta) {
  if (theta.size() != weight_count(net, layers)) throw DimensionError("set_weights: length mismatch");
  std::size_t off = 0;
  for (std::size_t li : weight_layers(net, layers)) {
    Matrix& w = weight_of(net.layers[li]);
    w = unvec(theta.subspan(off, w.size()), w.rows(), w.cols());
    off += w.size();
  }
}

Vector sample_gradient(const nn::Network& net, std::span<const double> input, int label,
                       std::span<const std::size_t> layers) {
  const Matrix x(1, input.size(), Vector(input.begin(), input.end()));
  const nn::ForwardPass pass = nn::forward(net, x, false);
  const int y[1] = {label};
  const nn::BackwardResult br = nn::backward(net, pass, y);
  Vector out;
  for (std::size_t li : weight_layers(net, layers)) {
    const Matrix& w = weight_of(net.layers[li]);
    const Matrix g(w.rows(), w.cols(), br.grads[li][0]);
    const Vector v = vec(g);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

Matrix exact_fisher(const nn::Network& net, const Dataset& data, FisherFlavor flavor,
                    std::span<const std::size_t> layers) {
  const std::vector<std::size_t> sel = weight_layers(net, layers);
  const std::size_t n = weight_count(net, sel);
  guard(n);
  if (data.size() == 0) throw ValidationError("exact_fisher: dataset is empty");
  Matrix f(n, n);
  auto add = [&](const Vector& g, double w) {
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = w * g[i];
      if (gi == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) f(i, j) += gi * g[j];
    }
  };
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto x = data.inputs.row(s);
    if (flavor == FisherFlavor::empirical) {
      add(sample_gradient(net, x, data.labels[s], sel), 1.0);
    } else {
      const Matrix p = nn::softmax(nn::predict(net, Matrix(1, x.size(), Vector(x.begin(), x.end()))));
      for (std::size_t c = 0; c < p.cols(); ++c) add(sample_gradient(net, x, static_cast<int>(c), sel), p(0, c));
    }
  }
  f *= 1.0 / static_cast<double>(data.size());
  return f;
}

std::function<double(const Vector&)> loss_function(const nn::Network& net, const Dataset& data,
                                                   std::span<const std::size_t> layers) {
  std::vector<std::size_t> sel = weight_layers(net, layers);
  guard(weight_count(net, sel));
  return [base = net, &data, sel = std::move(sel)](const Vector& theta) {
    nn::Network probe = base;
    set_weights(probe, sel, theta);
    return nn::cross_entropy(nn::predict(probe, data.inputs), data.labels);
  };
}

Matrix finite_diff_hessian(const std::function<double(const Vector&)>& loss, const Vector& theta, double step) {
  if (!(step > 0.0)) throw ValidationError("finite_diff_hessian: step must be positive");
  const std::size_t n = theta.size();
  guard(n);
  Matrix h(n, n);
  Vector t = theta;
  auto eval = [&]() {
    const double v = loss(t);
    if (!std::isfinite(v)) throw NumericError("finite_diff_hessian: non-finite loss");
    return v;
  };
  const double f0 = eval();
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = theta[i] + 2 * step;
    const double fpp = eval();
    t[i] = theta[i] - 2 * step;
    const double fmm = eval();
    t[i] = theta[i];
    h(i, i) = (fpp - 2 * f0 + fmm) / (4 * step * step);
    for (std::size_t j = i + 1; j < n; ++j) {
      double v[4];
      int k = 0;
      for (double si : {1.0, -1.0})
        for (double sj : {1.0, -1.0}) {
          t[i] = theta[i] + si * step;
          t[j] = theta[j] + sj * step;
          v[k++] = eval();
        }
      t[i] = theta[i];
      t[j] = theta[j];
      h(i, j) = h(j, i) = (v[0] - v[1] - v[2] + v[3]) / (4 * step * step);
    }
  }
  return h;
}

double quadratic_cost(const ExactQuadratic& quad, std::span<const double> delta) {
  quad.validate();
  if (delta.size() != quad.theta.size()) throw DimensionError("quadratic_cost: length mismatch");
  return 0.5 * dot(delta, matvec(quad.h, delta));
}

PruneResult exact_multi_prune(std::span<const std::size_t> indices, const ExactQuadratic& quad) {
  quad.validate();
  const std::size_t n = quad.theta.size(), m = indices.size();
  if (m == 0) return {Vector(n, 0.0), 0.0};
  if (m > n) throw ValidationError("exact_multi_prune: more constraints than weights");
  std::vector<std::size_t> sorted(indices.begin(), indices.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw ValidationError("exact_multi_prune: duplicate index");
  if (sorted.back() >= n) throw DimensionError("exact_multi_prune: index out of range");

  // [H E; E^T 0] [d; mu] = [0; -theta_Q]
  Matrix kkt(n + m, n + m);
  Matrix rhs(n + m, 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) kkt(i, j) = quad.h(i, j);
  for (std::size_t c = 0; c < m; ++c) {
    kkt(sorted[c], n + c) = 1.0;
    kkt(n + c, sorted[c]) = 1.0;
    rhs(n + c, 0) = -quad.theta[sorted[c]];
  }
  const Matrix sol = solve(kkt, rhs);
  PruneResult r;
  r.delta.assign(sol.data().begin(), sol.data().begin() + static_cast<std::ptrdiff_t>(n));
  r.delta_loss = quadratic_cost(quad, r.delta);
  return r;
}

PruneResult exact_single_prune(std::size_t q, const ExactQuadratic& quad) {
  const std::size_t idx[1] = {q};
  return exact_multi_prune(idx, quad);
}

DiagApprox kl_diag(const Matrix& sigma_star, KlDirection direction) {
  if (!sigma_star.square()) throw DimensionError("kl_diag: covariance must be square");
  Matrix inv;
  try {
    inv = spd_inverse(symmetrized(sigma_star));
  } catch (const SingularityError&) {
    throw ValidationError("kl_diag: covariance is not positive definite");
  }
  DiagApprox out{Vector(sigma_star.rows()), direction};
  for (std::size_t i = 0; i < sigma_star.rows(); ++i)
    out.sigma[i] = direction == KlDirection::forward ? sigma_star(i, i) : 1.0 / inv(i, i);
  return out;
}

}  // namespace kfep::oracle
