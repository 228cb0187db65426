#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kfep/kfac.hpp"
#include "kfep/nn.hpp"

namespace kfep::reparam {

// Rewrites a dense or conv layer in the eigenbasis: W' = (Q_A (x) I)^T W Q_S.
// The channel variant needs c_in x c_in input factors, the patch variant
// (c_in k^2) x (c_in k^2) ones. Dense layers ignore `variant`.
nn::BottleneckLayer to_kfe(const nn::Layer& layer, const kfac::EigenFactors& eig,
                           nn::BasisVariant variant = nn::BasisVariant::channel);

// Weight of the equivalent single linear map, (Q_A (x) I) core Q_S^T with a
// depthwise core expanded to its block-diagonal form.
Matrix effective_weight(const nn::BottleneckLayer& b);

// Drops input-basis columns (and their core row blocks) listed in
// `rows`, and output-basis columns (and core columns) listed in `cols`.
nn::BottleneckLayer eigenprune(const nn::BottleneckLayer& b, std::span<const std::size_t> rows,
                               std::span<const std::size_t> cols);

// Q_A <- Q_A Q'_A, Q_S <- Q_S Q'_S, core <- (Q'_A (x) I)^T core Q'_S.
nn::BottleneckLayer merge_bases(const nn::BottleneckLayer& outer, const Matrix& qa_inner, const Matrix& qs_inner);

// The same map as merge_bases(outer, qa_inner, qs_inner), expressed as a chain
// of three layers with the re-rotated core as its own bottleneck.
std::vector<nn::Layer> nested_layers(const nn::BottleneckLayer& outer, const Matrix& qa_inner, const Matrix& qs_inner);

struct AlsOptions {
  std::size_t max_iters = 200;
  double tol = 1e-8;
  std::size_t max_restarts = 3;
  std::uint64_t seed = 0;
};

// T(a, b, i) ~= sum_r U(a, r) V(b, r) D(i, r).
struct DepthwiseFactors {
  Matrix u;  // c_in x r
  Matrix v;  // c_out x r
  Matrix d;  // k^2 x r, row i is diag(D_i)
  std::vector<double> objective;  // after init, then after every sweep
  std::size_t restarts = 0;

  std::size_t rank() const { return u.cols(); }
  double final_objective() const { return objective.back(); }
};

// View of a core weight (c_in k^2) x c_out, row c*k^2 + i, as slices
// T_i = W'[:, :, i] of size c_in x c_out.
std::vector<Matrix> core_slices(const Matrix& core, std::size_t slices);

// 1/2 sum_i || U D_i V^T - T_i ||_F^2
double depthwise_objective(std::span<const Matrix> slices, const Matrix& u, const Matrix& v, const Matrix& d);

// Alternating least squares on the mode unfoldings
//   T_(1) = U (D (.) V)^T, T_(2) = V (D (.) U)^T, T_(3) = D (V (.) U)^T.
// U, V start from the truncated SVD of the slice mean and D from least
// squares; singular sweeps restart from a jittered start.
DepthwiseFactors depthwise_decompose(std::span<const Matrix> slices, std::size_t rank, const AlsOptions& opts = {});

// Q_A <- Q_A U, Q_S <- Q_S V, core replaced by the depthwise D.
nn::BottleneckLayer absorb_depthwise(const nn::BottleneckLayer& b, const DepthwiseFactors& f);

}  // namespace kfep::reparam
