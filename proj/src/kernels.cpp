#include "kfep/kernels.hpp"

#include <algorithm>
#include <vector>

namespace kfep::kernels {

namespace {

// Row kernels shared by the parallel and serial entry points. Keeping the
// per-row loop order identical is what makes both paths bitwise equal.
inline void gemm_row(std::size_t i, std::size_t n, std::size_t k, const double* a, const double* b,
                     double* c) {
  double* ci = c + i * n;
  std::fill(ci, ci + n, 0.0);
  const double* ai = a + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const double aip = ai[p];
    if (aip == 0.0) continue;
    const double* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
  }
}

inline void gemm_tn_row(std::size_t i, std::size_t m, std::size_t n, std::size_t k, const double* a,
                        const double* b, double* c) {
  double* ci = c + i * n;
  std::fill(ci, ci + n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double api = a[p * m + i];
    if (api == 0.0) continue;
    const double* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
  }
}

inline void gemm_nt_row(std::size_t i, std::size_t n, std::size_t k, const double* a, const double* b,
                        double* c) {
  const double* ai = a + i * k;
  for (std::size_t j = 0; j < n; ++j) {
    const double* bj = b + j * k;
    double s = 0.0;
    for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
    c[i * n + j] = s;
  }
}

void conv_sample(const ConvGeometry& g, std::size_t c_out, const double* image, const double* weight,
                 std::span<const double> bias, double* out, std::vector<double>& patches,
                 std::vector<double>& tmp) {
  const std::size_t locs = g.locations();
  const std::size_t ps = g.patch_size();
  patches.resize(locs * ps);
  tmp.resize(locs * c_out);
  im2col(g, {image, g.input_size()}, patches);
  for (std::size_t l = 0; l < locs; ++l) gemm_row(l, c_out, ps, patches.data(), weight, tmp.data());
  for (std::size_t o = 0; o < c_out; ++o) {
    const double b = bias.empty() ? 0.0 : bias[o];
    for (std::size_t l = 0; l < locs; ++l) out[o * locs + l] = tmp[l * c_out + o] + b;
  }
}

// Upper triangle of P^T P accumulated row by row of P, mirrored at the end by
// the caller.
void gram_sample(const ConvGeometry& g, const double* image, double* gram, std::vector<double>& patches) {
  const std::size_t locs = g.locations();
  const std::size_t ps = g.patch_size();
  patches.resize(locs * ps);
  im2col(g, {image, g.input_size()}, patches);
  for (std::size_t l = 0; l < locs; ++l) {
    const double* p = patches.data() + l * ps;
    for (std::size_t i = 0; i < ps; ++i) {
      const double pi = p[i];
      if (pi == 0.0) continue;
      double* gi = gram + i * ps;
      for (std::size_t j = i; j < ps; ++j) gi[j] += pi * p[j];
    }
  }
}

void mirror_upper(std::size_t n, double* m) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) m[i * n + j] = m[j * n + i];
}

}  // namespace

void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
          std::span<const double> b, std::span<double> c) {
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
  for (long i = 0; i < rows; ++i) gemm_row(static_cast<std::size_t>(i), n, k, a.data(), b.data(), c.data());
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c) {
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
  for (long i = 0; i < rows; ++i)
    gemm_tn_row(static_cast<std::size_t>(i), m, n, k, a.data(), b.data(), c.data());
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c) {
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
  for (long i = 0; i < rows; ++i) gemm_nt_row(static_cast<std::size_t>(i), n, k, a.data(), b.data(), c.data());
}

void im2col(const ConvGeometry& g, std::span<const double> image, std::span<double> patches) {
  const std::size_t ho = g.h_out(), wo = g.w_out(), ps = g.patch_size(), kk = g.k * g.k;
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      double* p = patches.data() + (oy * wo + ox) * ps;
      for (std::size_t c = 0; c < g.c_in; ++c) {
        const double* plane = image.data() + c * g.h * g.w;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w);
            p[c * kk + ky * g.k + kx] = inside ? plane[iy * static_cast<long>(g.w) + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, std::span<const double> patches, std::span<double> image) {
  const std::size_t ho = g.h_out(), wo = g.w_out(), ps = g.patch_size(), kk = g.k * g.k;
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      const double* p = patches.data() + (oy * wo + ox) * ps;
      for (std::size_t c = 0; c < g.c_in; ++c) {
        double* plane = image.data() + c * g.h * g.w;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            plane[iy * static_cast<long>(g.w) + ix] += p[c * kk + ky * g.k + kx];
          }
        }
      }
    }
  }
}

void conv2d_forward(const ConvGeometry& g, std::size_t batch, std::size_t c_out,
                    std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  const std::size_t in_sz = g.input_size(), out_sz = c_out * g.locations();
  const long nb = static_cast<long>(batch);
#pragma omp parallel
  {
    std::vector<double> patches, tmp;
#pragma omp for schedule(static)
    for (long b = 0; b < nb; ++b)
      conv_sample(g, c_out, input.data() + b * in_sz, weight.data(), bias, output.data() + b * out_sz, patches,
                  tmp);
  }
}

void accumulate_patch_gram(const ConvGeometry& g, std::size_t batch, std::span<const double> input,
                           std::span<double> gram) {
  const std::size_t ps = g.patch_size(), in_sz = g.input_size();
  const long nb = static_cast<long>(batch);
  // Per-thread partial sums would make the reduction order depend on the
  // thread count; instead each thread owns a band of Gram rows.
  std::vector<double> all_patches(batch * g.locations() * ps);
#pragma omp parallel for schedule(static)
  for (long b = 0; b < nb; ++b)
    im2col(g, {input.data() + b * in_sz, in_sz}, {all_patches.data() + b * g.locations() * ps, g.locations() * ps});
  const std::size_t rows_total = batch * g.locations();
  const long n = static_cast<long>(ps);
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < n; ++i) {
    double* gi = gram.data() + i * ps;
    for (std::size_t r = 0; r < rows_total; ++r) {
      const double* p = all_patches.data() + r * ps;
      const double pi = p[i];
      if (pi == 0.0) continue;
      for (std::size_t j = static_cast<std::size_t>(i); j < ps; ++j) gi[j] += pi * p[j];
    }
  }
  mirror_upper(ps, gram.data());
}

namespace serial {

void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
          std::span<const double> b, std::span<double> c) {
  for (std::size_t i = 0; i < m; ++i) gemm_row(i, n, k, a.data(), b.data(), c.data());
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c) {
  for (std::size_t i = 0; i < m; ++i) gemm_tn_row(i, m, n, k, a.data(), b.data(), c.data());
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c) {
  for (std::size_t i = 0; i < m; ++i) gemm_nt_row(i, n, k, a.data(), b.data(), c.data());
}

void conv2d_forward(const ConvGeometry& g, std::size_t batch, std::size_t c_out,
                    std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  std::vector<double> patches, tmp;
  const std::size_t in_sz = g.input_size(), out_sz = c_out * g.locations();
  for (std::size_t b = 0; b < batch; ++b)
    conv_sample(g, c_out, input.data() + b * in_sz, weight.data(), bias, output.data() + b * out_sz, patches, tmp);
}

void accumulate_patch_gram(const ConvGeometry& g, std::size_t batch, std::span<const double> input,
                           std::span<double> gram) {
  const std::size_t ps = g.patch_size(), in_sz = g.input_size();
  std::vector<double> patches;
  for (std::size_t b = 0; b < batch; ++b) gram_sample(g, input.data() + b * in_sz, gram.data(), patches);
  mirror_upper(ps, gram.data());
}

}  // namespace serial
}  // namespace kfep::kernels
