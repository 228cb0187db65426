#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "kfep/dataset.hpp"
#include "kfep/linalg.hpp"
#include "kfep/nn.hpp"

namespace kfep::kfac {

enum class FactorVariant : std::uint8_t { dense = 0, conv_full = 1, conv_channel = 2 };

// Layer Fisher approximated as S (x) A, with A over layer inputs and S over
// output gradients. Both are running means over `sample_count` samples.
struct KronFactors {
  Matrix a;
  Matrix s;
  std::size_t sample_count = 0;
  FactorVariant variant = FactorVariant::dense;
};

struct EigenFactors {
  Matrix q_a;
  Vector lambda_a;
  Matrix q_s;
  Vector lambda_s;
};

// Zero factors sized for a capture.
KronFactors empty_factors(FactorVariant variant, const nn::LayerCapture& capture);

// A = E[a a^T], S = E[g g^T].
KronFactors accumulate_dense(KronFactors factors, const nn::LayerCapture& capture);
// A sums patch outer products over output locations, S averages gradient
// outer products over them; both averaged over samples.
KronFactors accumulate_conv(KronFactors factors, const nn::LayerCapture& capture);
// A is the c_in x c_in channel covariance averaged over samples and input
// pixels; S as in accumulate_conv.
KronFactors accumulate_conv_channel(KronFactors factors, const nn::LayerCapture& capture);
KronFactors accumulate(KronFactors factors, const nn::LayerCapture& capture);

// A += sqrt(lambda) tr(A)/dim(A) I, likewise for S.
KronFactors damp(KronFactors factors, double lambda);

EigenFactors eigenbasis(const KronFactors& factors);

// (S (x) A) vec(X) as the matrix A X S^T.
Matrix fisher_vec(const KronFactors& factors, const Matrix& x);

struct KronInverse {
  Matrix a_inv;
  Matrix s_inv;
};
KronInverse kron_inverse(const KronFactors& factors);

// Off-diagonal Frobenius mass ratio ||offdiag(F)||_F / ||F||_F.
double offdiag_ratio(const Matrix& f);

struct EstimateOptions {
  // Variant used for plain conv layers. Bottleneck cores always use the
  // variant matching their basis.
  FactorVariant conv_variant = FactorVariant::conv_full;
  std::size_t batch_size = 128;
  std::size_t max_batches = 0;  // 0 = whole dataset
};

using FactorSet = std::vector<std::optional<KronFactors>>;

// One pass over `data` with training labels (empirical Fisher). Entry i is
// set for every layer with a capturable linear map.
FactorSet estimate_factors(const nn::Network& net, const Dataset& data, const EstimateOptions& opts = {});

FactorVariant variant_for_layer(const nn::Layer& layer, FactorVariant conv_variant);

}  // namespace kfep::kfac
