#pragma once

// Test-side reference implementations. Nothing here calls into the library
// routine it is used to check.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kfep/dataset.hpp"
#include "kfep/matrix.hpp"
#include "kfep/nn.hpp"
#include "kfep/rng.hpp"

namespace testutil {

using kfep::Matrix;
using kfep::Rng;
using kfep::Vector;

inline Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (double& x : m.data()) x = rng.normal(0.0, scale);
  return m;
}

inline Vector random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  Vector v(n);
  for (double& x : v) x = rng.normal(0.0, scale);
  return v;
}

// B Bᵀ + shift·I
inline Matrix random_spd(Rng& rng, std::size_t n, double shift = 0.1) {
  const Matrix b = random_matrix(rng, n, n);
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += b(i, k) * b(j, k);
      m(i, j) = s + (i == j ? shift : 0.0);
    }
  return m;
}

// Modified Gram-Schmidt on a random Gaussian matrix.
inline Matrix random_orthonormal(Rng& rng, std::size_t n) {
  Matrix q = random_matrix(rng, n, n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < j; ++p) {
      double d = 0.0;
      for (std::size_t i = 0; i < n; ++i) d += q(i, j) * q(i, p);
      for (std::size_t i = 0; i < n; ++i) q(i, j) -= d * q(i, p);
    }
    double nrm = 0.0;
    for (std::size_t i = 0; i < n; ++i) nrm += q(i, j) * q(i, j);
    nrm = std::sqrt(nrm);
    for (std::size_t i = 0; i < n; ++i) q(i, j) /= nrm;
  }
  return q;
}

inline Matrix naive_mul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

inline Matrix naive_transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix naive_kron(const Matrix& a, const Matrix& b) {
  Matrix k(a.rows() * b.rows(), a.cols() * b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      for (std::size_t p = 0; p < b.rows(); ++p)
        for (std::size_t q = 0; q < b.cols(); ++q) k(i * b.rows() + p, j * b.cols() + q) = a(i, j) * b(p, q);
  return k;
}

// Column-major stacking.
inline Vector naive_vec(const Matrix& m) {
  Vector v;
  for (std::size_t j = 0; j < m.cols(); ++j)
    for (std::size_t i = 0; i < m.rows(); ++i) v.push_back(m(i, j));
  return v;
}

inline double max_diff(const Matrix& a, const Matrix& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

inline double max_diff(const Vector& a, const Vector& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

inline double frob2(const Matrix& m) {
  double s = 0.0;
  for (double x : m.data()) s += x * x;
  return s;
}

// Direct nested-loop convolution. Weight rows are indexed c*k*k + ky*k + kx,
// columns are output channels. Output is c_out x h_out x w_out per sample.
inline Vector direct_conv(std::size_t c_in, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
                          std::size_t pad, std::size_t c_out, const Vector& image, const Matrix& weight,
                          const Vector& bias) {
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  Vector out(c_out * ho * wo, 0.0);
  for (std::size_t o = 0; o < c_out; ++o)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t x = 0; x < wo; ++x) {
        double s = bias.empty() ? 0.0 : bias[o];
        for (std::size_t c = 0; c < c_in; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(x * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              s += image[c * h * w + static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)] *
                   weight(c * k * k + ky * k + kx, o);
            }
        out[o * ho * wo + y * wo + x] = s;
      }
  return out;
}

// Patch of input at output location (y, x), ordered like weight rows.
inline Vector direct_patch(std::size_t c_in, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
                           std::size_t pad, const double* image, std::size_t y, std::size_t x) {
  Vector p(c_in * k * k, 0.0);
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
        const long ix = static_cast<long>(x * stride + kx) - static_cast<long>(pad);
        if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
        p[c * k * k + ky * k + kx] = image[c * h * w + static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)];
      }
  return p;
}

inline kfep::Dataset random_dataset(Rng& rng, const kfep::nn::Shape& shape, std::size_t n, std::size_t classes) {
  kfep::Dataset d;
  d.shape = shape;
  d.num_classes = classes;
  d.inputs = random_matrix(rng, n, shape.size());
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(rng.below(classes)));
  return d;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("kfep_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Each input is repeated with label counts proportional to the model's own
// predictive distribution, so the model sits at a minimum of the training loss
// and the Hessian's residual term vanishes up to count rounding.
inline kfep::Dataset matched_data(const kfep::nn::Network& model, std::size_t inputs, std::size_t copies, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix x = random_matrix(rng, inputs, model.input.size());
  const Matrix p = kfep::nn::softmax(kfep::nn::predict(model, x));
  kfep::Dataset d;
  d.shape = model.input;
  d.num_classes = p.cols();
  d.inputs = Matrix(inputs * copies, x.cols());
  for (std::size_t i = 0; i < inputs; ++i) {
    std::size_t k = 0;
    double cum = 0.0;
    for (std::size_t c = 0; c < p.cols(); ++c) {
      cum += p(i, c);
      const std::size_t upto = c + 1 == p.cols() ? copies : static_cast<std::size_t>(std::llround(cum * copies));
      for (; k < upto; ++k) {
        for (std::size_t j = 0; j < x.cols(); ++j) d.inputs(i * copies + k, j) = x(i, j);
        d.labels.push_back(static_cast<int>(c));
      }
    }
  }
  return d;
}

}  // namespace testutil
