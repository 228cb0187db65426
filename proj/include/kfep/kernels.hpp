#pragma once

// Data-parallel inner loops. Each kernel in `kfep::kernels` has a serial
// counterpart in `kfep::kernels::serial` with the same accumulation order, so
// results are bitwise identical regardless of thread count. The serial
// versions exist for tests and benchmarks only.

#include <cstddef>
#include <span>

namespace kfep::kernels {

struct ConvGeometry {
  std::size_t c_in = 1;
  std::size_t h = 1;
  std::size_t w = 1;
  std::size_t k = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t h_out() const { return (h + 2 * padding - k) / stride + 1; }
  std::size_t w_out() const { return (w + 2 * padding - k) / stride + 1; }
  std::size_t locations() const { return h_out() * w_out(); }
  std::size_t patch_size() const { return c_in * k * k; }
  std::size_t input_size() const { return c_in * h * w; }
  bool valid() const { return k >= 1 && stride >= 1 && h + 2 * padding >= k && w + 2 * padding >= k; }
};

// c[m x n] = a[m x k] * b[k x n]
void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
          std::span<const double> b, std::span<double> c);
// c[m x n] = a^T * b with a[k x m], b[k x n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c);
// c[m x n] = a * b^T with a[m x k], b[n x k]
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c);

// Patch matrix [locations x c_in*k*k] of one c_in x h x w image. Patch column
// index is c * k*k + ky * k + kx; zero padding.
void im2col(const ConvGeometry& g, std::span<const double> image, std::span<double> patches);
// Scatter-add of a patch-matrix gradient back onto the image gradient.
void col2im_add(const ConvGeometry& g, std::span<const double> patches, std::span<double> image);

// Batched convolution. input is [batch x c_in*h*w], weight is
// [c_in*k*k x c_out], output is [batch x c_out*h_out*w_out] in channel-major
// layout. bias may be empty.
void conv2d_forward(const ConvGeometry& g, std::size_t batch, std::size_t c_out,
                    std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output);

// Accumulates per-sample patch Gram matrices: gram += sum_b P_b^T P_b.
void accumulate_patch_gram(const ConvGeometry& g, std::size_t batch, std::span<const double> input,
                           std::span<double> gram);

namespace serial {

void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
          std::span<const double> b, std::span<double> c);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c);
void conv2d_forward(const ConvGeometry& g, std::size_t batch, std::size_t c_out,
                    std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output);
void accumulate_patch_gram(const ConvGeometry& g, std::size_t batch, std::span<const double> input,
                           std::span<double> gram);

}  // namespace serial
}  // namespace kfep::kernels
