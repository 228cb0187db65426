#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "kfep/dataset.hpp"
#include "kfep/matrix.hpp"
#include "kfep/nn.hpp"

// Brute-force reference computations. Everything here is dense and meant for
// small problems; it shares no code paths with the closed-form criteria.
namespace kfep::oracle {

inline constexpr std::size_t kMaxOracleParams = 2000;

enum class FisherFlavor { empirical, expected };

// Second-order model L(theta* + d) - L(theta*) = 1/2 d^T H d.
struct ExactQuadratic {
  Vector theta;
  Matrix h;

  void validate() const;
};

struct PruneResult {
  Vector delta;
  double delta_loss = 0.0;
};

enum class KlDirection { forward, reverse };

struct DiagApprox {
  Vector sigma;
  KlDirection direction = KlDirection::forward;
};

// Weight tensors (biases excluded) of the given layers, each vectorized
// column-major so that a dense block matches kron(S, A). Empty `layers`
// selects every dense and conv layer.
std::vector<std::size_t> weight_layers(const nn::Network& net, std::span<const std::size_t> layers = {});
std::size_t weight_count(const nn::Network& net, std::span<const std::size_t> layers);
Vector get_weights(const nn::Network& net, std::span<const std::size_t> layers);
void set_weights(nn::Network& net, std::span<const std::size_t> layers, std::span<const double> theta);

// Per-sample weight gradient for one sample and label.
Vector sample_gradient(const nn::Network& net, std::span<const double> input, int label,
                       std::span<const std::size_t> layers);

// Empirical: mean of per-sample gradient outer products at the true labels.
// Expected: every class weighted by its predicted probability.
Matrix exact_fisher(const nn::Network& net, const Dataset& data, FisherFlavor flavor,
                    std::span<const std::size_t> layers = {});

// Mean cross-entropy on `data` as a function of the selected weights.
std::function<double(const Vector&)> loss_function(const nn::Network& net, const Dataset& data,
                                                   std::span<const std::size_t> layers);

// Central-difference Hessian, symmetrized.
Matrix finite_diff_hessian(const std::function<double(const Vector&)>& loss, const Vector& theta, double step);

// min 1/2 d^T H d subject to d_q = -theta_q for q in `indices`, solved as a
// dense KKT system.
PruneResult exact_multi_prune(std::span<const std::size_t> indices, const ExactQuadratic& quad);
PruneResult exact_single_prune(std::size_t q, const ExactQuadratic& quad);

// 1/2 d^T H d
double quadratic_cost(const ExactQuadratic& quad, std::span<const double> delta);

// forward: diag(Sigma*); reverse: 1 / diag(Sigma*^-1).
DiagApprox kl_diag(const Matrix& sigma_star, KlDirection direction);

}  // namespace kfep::oracle
