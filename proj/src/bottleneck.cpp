#include "kfep/bottleneck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kfep/error.hpp"
#include "kfep/linalg.hpp"
#include "kfep/rng.hpp"

namespace kfep::reparam {

namespace {

// (Q (x) I_k2)^T X for Q of size n x r and X with n*k2 rows.
Matrix rotate_rows(const Matrix& q, const Matrix& x, std::size_t k2) {
  if (x.rows() != q.rows() * k2) throw DimensionError("basis rows do not match weight rows");
  Matrix out(q.cols() * k2, x.cols());
  for (std::size_t c = 0; c < q.rows(); ++c)
    for (std::size_t c2 = 0; c2 < q.cols(); ++c2) {
      const double w = q(c, c2);
      if (w == 0.0) continue;
      for (std::size_t p = 0; p < k2; ++p) {
        const auto src = x.row(c * k2 + p);
        auto dst = out.row(c2 * k2 + p);
        for (std::size_t j = 0; j < x.cols(); ++j) dst[j] += w * src[j];
      }
    }
  return out;
}

// (Q (x) I_k2) X for X with r*k2 rows.
Matrix expand_rows(const Matrix& q, const Matrix& x, std::size_t k2) {
  if (x.rows() != q.cols() * k2) throw DimensionError("core rows do not match basis columns");
  Matrix out(q.rows() * k2, x.cols());
  for (std::size_t c = 0; c < q.rows(); ++c)
    for (std::size_t c2 = 0; c2 < q.cols(); ++c2) {
      const double w = q(c, c2);
      if (w == 0.0) continue;
      for (std::size_t p = 0; p < k2; ++p) {
        const auto src = x.row(c2 * k2 + p);
        auto dst = out.row(c * k2 + p);
        for (std::size_t j = 0; j < x.cols(); ++j) dst[j] += w * src[j];
      }
    }
  return out;
}

std::vector<std::uint32_t> iota_u32(std::size_t n) {
  std::vector<std::uint32_t> v(n);
  std::iota(v.begin(), v.end(), 0u);
  return v;
}

void require_square(const Matrix& q, std::size_t n, const char* what) {
  if (!q.square() || q.rows() != n)
    throw DimensionError(std::string(what) + ": basis is " + std::to_string(q.rows()) + "x" + std::to_string(q.cols()) +
                         ", layer needs " + std::to_string(n) + "x" + std::to_string(n));
}

std::vector<std::size_t> complement(std::span<const std::size_t> removed, std::size_t n, const char* what) {
  std::vector<bool> drop(n, false);
  for (std::size_t i : removed) {
    if (i >= n) throw DimensionError(std::string("eigenprune: ") + what + " index " + std::to_string(i) + " out of range");
    if (drop[i]) throw ValidationError(std::string("eigenprune: duplicate ") + what + " index");
    drop[i] = true;
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i)
    if (!drop[i]) keep.push_back(i);
  if (keep.empty()) throw ValidationError(std::string("eigenprune: cannot remove every ") + what);
  return keep;
}

Matrix depthwise_as_core(const Matrix& d) {
  const std::size_t k2 = d.rows(), r = d.cols();
  Matrix core(r * k2, r);
  for (std::size_t c = 0; c < r; ++c)
    for (std::size_t p = 0; p < k2; ++p) core(c * k2 + p, c) = d(p, c);
  return core;
}

}  // namespace

nn::BottleneckLayer to_kfe(const nn::Layer& layer, const kfac::EigenFactors& eig, nn::BasisVariant variant) {
  nn::BottleneckLayer b;
  if (const auto* d = std::get_if<nn::DenseLayer>(&layer)) {
    require_square(eig.q_a, d->inputs(), "to_kfe input basis");
    require_square(eig.q_s, d->outputs(), "to_kfe output basis");
    b.kind = nn::BottleneckKind::dense;
    b.variant = nn::BasisVariant::channel;
    b.c_in = d->inputs();
    b.c_out = d->outputs();
    b.core = matmul(matmul_tn(eig.q_a, d->weight), eig.q_s);
    b.bias = d->bias;
  } else if (const auto* c = std::get_if<nn::ConvLayer>(&layer)) {
    const std::size_t k2 = c->k * c->k;
    b.kind = nn::BottleneckKind::conv;
    b.variant = variant;
    b.c_in = c->c_in;
    b.c_out = c->c_out;
    b.k = c->k;
    b.stride = c->stride;
    b.padding = c->padding;
    require_square(eig.q_a, b.basis_rows(), "to_kfe input basis");
    require_square(eig.q_s, c->c_out, "to_kfe output basis");
    const Matrix rotated = variant == nn::BasisVariant::patch ? matmul_tn(eig.q_a, c->weight)
                                                              : rotate_rows(eig.q_a, c->weight, k2);
    b.core = matmul(rotated, eig.q_s);
    b.bias = c->bias;
  } else {
    throw ValidationError("to_kfe: layer '" + nn::layer_name(layer) + "' is not dense or conv");
  }
  b.q_a = eig.q_a;
  b.q_s = eig.q_s;
  b.kept_rows = iota_u32(b.q_a.cols());
  b.kept_cols = iota_u32(b.q_s.cols());
  return b;
}

Matrix effective_weight(const nn::BottleneckLayer& b) {
  const std::size_t k2 = b.core_k() * b.core_k();
  const Matrix core = b.is_depthwise() ? depthwise_as_core(b.depthwise) : b.core;
  return matmul_nt(expand_rows(b.q_a, core, k2), b.q_s);
}

nn::BottleneckLayer eigenprune(const nn::BottleneckLayer& b, std::span<const std::size_t> rows,
                               std::span<const std::size_t> cols) {
  if (b.is_depthwise()) throw StateError("eigenprune: depthwise cores are not prunable");
  const std::size_t k2 = b.core_k() * b.core_k();
  const std::vector<std::size_t> keep_r = complement(rows, b.rank_in(), "row");
  const std::vector<std::size_t> keep_c = complement(cols, b.rank_out(), "column");

  std::vector<std::size_t> core_rows;
  core_rows.reserve(keep_r.size() * k2);
  for (std::size_t r : keep_r)
    for (std::size_t p = 0; p < k2; ++p) core_rows.push_back(r * k2 + p);

  nn::BottleneckLayer out = b;
  out.q_a = select_cols(b.q_a, keep_r);
  out.q_s = select_cols(b.q_s, keep_c);
  out.core = select_cols(select_rows(b.core, core_rows), keep_c);
  out.kept_rows.clear();
  out.kept_cols.clear();
  for (std::size_t r : keep_r) out.kept_rows.push_back(b.kept_rows.at(r));
  for (std::size_t c : keep_c) out.kept_cols.push_back(b.kept_cols.at(c));
  return out;
}

nn::BottleneckLayer merge_bases(const nn::BottleneckLayer& outer, const Matrix& qa_inner, const Matrix& qs_inner) {
  if (outer.is_depthwise()) throw StateError("merge_bases: depthwise cores cannot be re-rotated");
  if (qa_inner.rows() != outer.rank_in() || qs_inner.rows() != outer.rank_out())
    throw DimensionError("merge_bases: inner bases do not match the core");
  const std::size_t k2 = outer.core_k() * outer.core_k();
  nn::BottleneckLayer out = outer;
  out.q_a = matmul(outer.q_a, qa_inner);
  out.q_s = matmul(outer.q_s, qs_inner);
  out.core = matmul(rotate_rows(qa_inner, outer.core, k2), qs_inner);
  out.kept_rows = iota_u32(out.q_a.cols());
  out.kept_cols = iota_u32(out.q_s.cols());
  return out;
}

std::vector<nn::Layer> nested_layers(const nn::BottleneckLayer& outer, const Matrix& qa_inner, const Matrix& qs_inner) {
  if (outer.is_depthwise()) throw StateError("nested_layers: depthwise cores cannot be re-rotated");
  if (qa_inner.rows() != outer.rank_in() || qs_inner.rows() != outer.rank_out())
    throw DimensionError("nested_layers: inner bases do not match the core");
  const std::size_t k2 = outer.core_k() * outer.core_k();
  const std::size_t ra = outer.rank_in(), rs = outer.rank_out();

  nn::BottleneckLayer inner;
  inner.kind = outer.kind;
  inner.variant = nn::BasisVariant::channel;
  inner.c_in = ra;
  inner.c_out = rs;
  inner.q_a = qa_inner;
  inner.q_s = qs_inner;
  inner.core = matmul(rotate_rows(qa_inner, outer.core, k2), qs_inner);
  inner.bias = Vector(rs, 0.0);
  inner.kept_rows = iota_u32(qa_inner.cols());
  inner.kept_cols = iota_u32(qs_inner.cols());

  if (outer.kind == nn::BottleneckKind::dense) {
    nn::DenseLayer first{outer.q_a, Vector(ra, 0.0)};
    nn::DenseLayer last{outer.q_s.transpose(), outer.bias};
    return {first, inner, last};
  }
  const bool patch = outer.variant == nn::BasisVariant::patch;
  nn::ConvLayer first{outer.c_in, ra, patch ? outer.k : 1, patch ? outer.stride : 1, patch ? outer.padding : 0,
                      outer.q_a, Vector(ra, 0.0)};
  inner.k = patch ? 1 : outer.k;
  inner.stride = patch ? 1 : outer.stride;
  inner.padding = patch ? 0 : outer.padding;
  nn::ConvLayer last{rs, outer.c_out, 1, 1, 0, outer.q_s.transpose(), outer.bias};
  return {first, inner, last};
}

std::vector<Matrix> core_slices(const Matrix& core, std::size_t slices) {
  if (slices == 0 || core.rows() % slices != 0) throw DimensionError("core_slices: rows not divisible by slice count");
  const std::size_t n = core.rows() / slices;
  std::vector<Matrix> out(slices, Matrix(n, core.cols()));
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t i = 0; i < slices; ++i)
      for (std::size_t b = 0; b < core.cols(); ++b) out[i](a, b) = core(a * slices + i, b);
  return out;
}

double depthwise_objective(std::span<const Matrix> slices, const Matrix& u, const Matrix& v, const Matrix& d) {
  if (slices.size() != d.rows()) throw DimensionError("depthwise_objective: slice count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < slices.size(); ++i) {
    const Matrix& t = slices[i];
    for (std::size_t a = 0; a < t.rows(); ++a)
      for (std::size_t b = 0; b < t.cols(); ++b) {
        double s = 0.0;
        for (std::size_t r = 0; r < u.cols(); ++r) s += u(a, r) * d(i, r) * v(b, r);
        const double e = s - t(a, b);
        total += e * e;
      }
  }
  return 0.5 * total;
}

namespace {

struct Unfoldings {
  Matrix t1t;  // (K n_b) x n_a
  Matrix t2t;  // (K n_a) x n_b
  Matrix t3t;  // (n_b n_a) x K
};

Unfoldings unfold(std::span<const Matrix> t) {
  const std::size_t k = t.size(), na = t[0].rows(), nb = t[0].cols();
  Unfoldings u{Matrix(k * nb, na), Matrix(k * na, nb), Matrix(nb * na, k)};
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t a = 0; a < na; ++a)
      for (std::size_t b = 0; b < nb; ++b) {
        const double x = t[i](a, b);
        u.t1t(i * nb + b, a) = x;
        u.t2t(i * na + a, b) = x;
        u.t3t(b * na + a, i) = x;
      }
  return u;
}

void scale_columns(Matrix& m, std::span<const double> s) {
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) *= s[j];
}

}  // namespace

DepthwiseFactors depthwise_decompose(std::span<const Matrix> slices, std::size_t rank, const AlsOptions& opts) {
  if (slices.empty()) throw ValidationError("depthwise_decompose: no slices");
  const std::size_t na = slices[0].rows(), nb = slices[0].cols();
  for (const Matrix& s : slices)
    if (s.rows() != na || s.cols() != nb) throw DimensionError("depthwise_decompose: slices differ in shape");
  if (rank == 0 || rank > std::min(na, nb))
    throw ValidationError("depthwise_decompose: rank must be in [1, " + std::to_string(std::min(na, nb)) + "]");
  if (opts.max_iters == 0) throw ValidationError("depthwise_decompose: max_iters must be >= 1");

  const Unfoldings uf = unfold(slices);
  Matrix mean(na, nb);
  for (const Matrix& s : slices) mean += s;
  mean *= 1.0 / static_cast<double>(slices.size());
  const Svd svd = truncated_svd(mean, rank);
  Vector root(rank);
  for (std::size_t r = 0; r < rank; ++r) root[r] = std::sqrt(std::max(svd.sigma[r], 0.0));
  double rms = 0.0;
  for (const Matrix& s : slices) rms += frobenius_norm(s) * frobenius_norm(s);
  rms = std::sqrt(rms / static_cast<double>(slices.size() * na * nb));

  Rng rng(opts.seed);
  for (std::size_t attempt = 0; attempt <= opts.max_restarts; ++attempt) {
    DepthwiseFactors f;
    f.restarts = attempt;
    f.u = svd.u;
    f.v = svd.v;
    scale_columns(f.u, root);
    scale_columns(f.v, root);
    if (attempt > 0) {
      const double jitter = 0.1 * std::sqrt(rms) * static_cast<double>(attempt);
      for (double& x : f.u.data()) x += jitter * rng.normal();
      for (double& x : f.v.data()) x += jitter * rng.normal();
    }
    try {
      f.d = lstsq(khatri_rao(f.v, f.u), uf.t3t);
      f.d = f.d.transpose();
      f.objective.push_back(depthwise_objective(slices, f.u, f.v, f.d));
      for (std::size_t it = 0; it < opts.max_iters; ++it) {
        f.u = lstsq(khatri_rao(f.d, f.v), uf.t1t).transpose();
        f.v = lstsq(khatri_rao(f.d, f.u), uf.t2t).transpose();
        f.d = lstsq(khatri_rao(f.v, f.u), uf.t3t).transpose();
        const double prev = f.objective.back();
        const double cur = depthwise_objective(slices, f.u, f.v, f.d);
        f.objective.push_back(cur);
        if (prev - cur <= opts.tol * prev) break;
      }
      return f;
    } catch (const SingularityError&) {
      // fall through to a jittered restart
    }
  }
  throw SingularityError("depthwise_decompose: factors collapsed after " + std::to_string(opts.max_restarts) +
                         " restarts");
}

nn::BottleneckLayer absorb_depthwise(const nn::BottleneckLayer& b, const DepthwiseFactors& f) {
  if (b.is_depthwise()) throw StateError("absorb_depthwise: layer already has a depthwise core");
  const std::size_t k2 = b.core_k() * b.core_k();
  if (f.u.rows() != b.rank_in() || f.v.rows() != b.rank_out() || f.d.rows() != k2 || f.v.cols() != f.rank() ||
      f.d.cols() != f.rank())
    throw DimensionError("absorb_depthwise: factors do not match the core");
  nn::BottleneckLayer out = b;
  out.q_a = matmul(b.q_a, f.u);
  out.q_s = matmul(b.q_s, f.v);
  out.core = Matrix();
  out.depthwise = f.d;
  out.kept_rows = iota_u32(f.rank());
  out.kept_cols = iota_u32(f.rank());
  return out;
}

}  // namespace kfep::reparam
