#include <doctest.h>

#include "helpers.hpp"
#include "kfep/error.hpp"
#include "kfep/kfac.hpp"
#include "kfep/linalg.hpp"

using namespace kfep;
using namespace testutil;
using kfac::FactorVariant;
using kfac::KronFactors;

namespace {

nn::LayerCapture dense_capture(const Matrix& a, const Matrix& g) {
  nn::LayerCapture c;
  c.is_conv = false;
  c.geom = kernels::ConvGeometry{a.cols(), 1, 1, 1, 1, 0};
  c.c_out = g.cols();
  c.inputs = a;
  c.grads = g;
  return c;
}

nn::LayerCapture conv_capture(const kernels::ConvGeometry& g, std::size_t c_out, const Matrix& in, const Matrix& gr) {
  nn::LayerCapture c;
  c.is_conv = true;
  c.geom = g;
  c.c_out = c_out;
  c.inputs = in;
  c.grads = gr;
  return c;
}

KronFactors fresh(FactorVariant v, const nn::LayerCapture& c) { return kfac::empty_factors(v, c); }

double min_eig_ratio(const Matrix& m) {
  const SymEigen e = sym_eig(m);
  return e.values.back() / std::max(e.values.front(), 1e-300);
}

}  // namespace

TEST_SUITE("accumulate_dense") {
  TEST_CASE("single sample factors reproduce the gradient outer product") {
    Rng rng(1);
    const Matrix a = random_matrix(rng, 1, 4), g = random_matrix(rng, 1, 3);
    const auto cap = dense_capture(a, g);
    const KronFactors f = kfac::accumulate_dense(fresh(FactorVariant::dense, cap), cap);
    CHECK(f.sample_count == 1);
    // ∇W = a gᵀ, vec is column-major.
    Matrix grad(4, 3);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 3; ++j) grad(i, j) = a(0, i) * g(0, j);
    const Vector v = naive_vec(grad);
    Matrix exact(12, 12);
    for (std::size_t p = 0; p < 12; ++p)
      for (std::size_t q = 0; q < 12; ++q) exact(p, q) = v[p] * v[q];
    CHECK(max_diff(naive_kron(f.s, f.a), exact) <= 1e-12);
  }

  TEST_CASE("constant activation") {
    Matrix a(5, 3);
    for (std::size_t b = 0; b < 5; ++b) a(b, 0) = 1.0;
    Rng rng(2);
    const auto cap = dense_capture(a, random_matrix(rng, 5, 2));
    const KronFactors f = kfac::accumulate_dense(fresh(FactorVariant::dense, cap), cap);
    Matrix e(3, 3);
    e(0, 0) = 1.0;
    CHECK(max_diff(f.a, e) < 1e-15);
  }

  TEST_CASE("batch means and streaming accumulation") {
    Rng rng(3);
    const Matrix a = random_matrix(rng, 3, 4), g = random_matrix(rng, 3, 2);
    const auto cap = dense_capture(a, g);
    const KronFactors f = kfac::accumulate_dense(fresh(FactorVariant::dense, cap), cap);
    Matrix ea(4, 4), es(2, 2);
    for (std::size_t b = 0; b < 3; ++b) {
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) ea(i, j) += a(b, i) * a(b, j) / 3.0;
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) es(i, j) += g(b, i) * g(b, j) / 3.0;
    }
    CHECK(max_diff(f.a, ea) < 1e-14);
    CHECK(max_diff(f.s, es) < 1e-14);

    // Two uneven batches equal one pass over the union.
    const Matrix a2 = random_matrix(rng, 5, 4), g2 = random_matrix(rng, 5, 2);
    const KronFactors two = kfac::accumulate_dense(f, dense_capture(a2, g2));
    Matrix au(8, 4), gu(8, 2);
    for (std::size_t b = 0; b < 8; ++b) {
      for (std::size_t i = 0; i < 4; ++i) au(b, i) = b < 3 ? a(b, i) : a2(b - 3, i);
      for (std::size_t i = 0; i < 2; ++i) gu(b, i) = b < 3 ? g(b, i) : g2(b - 3, i);
    }
    const auto capu = dense_capture(au, gu);
    const KronFactors one = kfac::accumulate_dense(fresh(FactorVariant::dense, capu), capu);
    CHECK(two.sample_count == 8);
    CHECK(max_diff(two.a, one.a) < 1e-14);
    CHECK(max_diff(two.s, one.s) < 1e-14);
  }

  TEST_CASE("mismatches are rejected") {
    Rng rng(4);
    const auto cap = dense_capture(random_matrix(rng, 2, 3), random_matrix(rng, 2, 2));
    KronFactors f = fresh(FactorVariant::dense, cap);
    CHECK_THROWS_AS(kfac::accumulate_dense(f, dense_capture(random_matrix(rng, 2, 4), random_matrix(rng, 2, 2))),
                    DimensionError);
    CHECK_THROWS_AS(kfac::accumulate_conv(f, cap), ValidationError);
    CHECK_THROWS_AS(kfac::eigenbasis(f), StateError);
  }
}

TEST_SUITE("accumulate_conv") {
  TEST_CASE("1x1 conv on a single pixel reduces to the dense case") {
    Rng rng(5);
    const Matrix a = random_matrix(rng, 4, 3), g = random_matrix(rng, 4, 2);
    const auto cc = conv_capture(kernels::ConvGeometry{3, 1, 1, 1, 1, 0}, 2, a, g);
    const auto dc = dense_capture(a, g);
    const KronFactors fc = kfac::accumulate_conv(fresh(FactorVariant::conv_full, cc), cc);
    const KronFactors fd = kfac::accumulate_dense(fresh(FactorVariant::dense, dc), dc);
    CHECK(max_diff(fc.a, fd.a) < 1e-15);
    CHECK(max_diff(fc.s, fd.s) < 1e-15);
  }

  TEST_CASE("zero gradients give zero S") {
    Rng rng(6);
    const kernels::ConvGeometry geo{2, 4, 4, 3, 1, 1};
    const auto cap = conv_capture(geo, 3, random_matrix(rng, 2, geo.input_size()), Matrix(2, 3 * geo.locations()));
    const KronFactors f = kfac::accumulate_conv(fresh(FactorVariant::conv_full, cap), cap);
    CHECK(max_abs(f.s) == 0.0);
  }

  TEST_CASE("full factors match per-location loops") {
    Rng rng(7);
    const kernels::ConvGeometry geo{2, 4, 4, 3, 1, 1};
    const std::size_t c_out = 3, n = 2, locs = geo.locations();
    const Matrix in = random_matrix(rng, n, geo.input_size()), gr = random_matrix(rng, n, c_out * locs);
    const auto cap = conv_capture(geo, c_out, in, gr);
    const KronFactors f = kfac::accumulate_conv(fresh(FactorVariant::conv_full, cap), cap);
    Matrix ea(18, 18), es(c_out, c_out);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) {
          const Vector p = direct_patch(2, 4, 4, 3, 1, 1, in.row(b).data(), y, x);
          for (std::size_t i = 0; i < 18; ++i)
            for (std::size_t j = 0; j < 18; ++j) ea(i, j) += p[i] * p[j] / n;
          const std::size_t loc = y * 4 + x;
          for (std::size_t i = 0; i < c_out; ++i)
            for (std::size_t j = 0; j < c_out; ++j)
              es(i, j) += gr(b, i * locs + loc) * gr(b, j * locs + loc) / (double(n) * locs);
        }
    CHECK(max_diff(f.a, ea) < 1e-12);
    CHECK(max_diff(f.s, es) < 1e-12);
  }
}

TEST_SUITE("accumulate_conv_channel") {
  TEST_CASE("single channel gives the mean square") {
    Rng rng(8);
    const kernels::ConvGeometry geo{1, 3, 3, 3, 1, 1};
    const Matrix in = random_matrix(rng, 2, 9);
    const auto cap = conv_capture(geo, 2, in, random_matrix(rng, 2, 18));
    const KronFactors f = kfac::accumulate_conv_channel(fresh(FactorVariant::conv_channel, cap), cap);
    REQUIRE(f.a.rows() == 1);
    double ms = 0.0;
    for (double x : in.data()) ms += x * x / 18.0;
    CHECK(f.a(0, 0) == doctest::Approx(ms).epsilon(1e-14));
  }

  TEST_CASE("identical channels give a rank-1 factor") {
    Rng rng(9);
    const kernels::ConvGeometry geo{3, 4, 4, 3, 1, 1};
    Matrix in(2, 48);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t p = 0; p < 16; ++p) {
        const double v = rng.normal();
        for (std::size_t c = 0; c < 3; ++c) in(b, c * 16 + p) = v;
      }
    const auto cap = conv_capture(geo, 2, in, random_matrix(rng, 2, 32));
    const KronFactors f = kfac::accumulate_conv_channel(fresh(FactorVariant::conv_channel, cap), cap);
    const SymEigen e = sym_eig(f.a);
    CHECK(std::abs(e.values[1]) <= 1e-10 * e.values[0]);
    CHECK(std::abs(e.values[2]) <= 1e-10 * e.values[0]);
  }

  TEST_CASE("random input matches the pixel double loop") {
    Rng rng(10);
    const kernels::ConvGeometry geo{3, 5, 4, 3, 2, 1};
    const std::size_t n = 3, c_out = 2, locs = geo.locations();
    const Matrix in = random_matrix(rng, n, geo.input_size()), gr = random_matrix(rng, n, c_out * locs);
    const auto cap = conv_capture(geo, c_out, in, gr);
    const KronFactors f = kfac::accumulate_conv_channel(fresh(FactorVariant::conv_channel, cap), cap);
    Matrix ea(3, 3), es(c_out, c_out);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t p = 0; p < 20; ++p)
        for (std::size_t i = 0; i < 3; ++i)
          for (std::size_t j = 0; j < 3; ++j) ea(i, j) += in(b, i * 20 + p) * in(b, j * 20 + p) / (n * 20.0);
      for (std::size_t l = 0; l < locs; ++l)
        for (std::size_t i = 0; i < c_out; ++i)
          for (std::size_t j = 0; j < c_out; ++j)
            es(i, j) += gr(b, i * locs + l) * gr(b, j * locs + l) / (double(n) * locs);
    }
    CHECK(max_diff(f.a, ea) < 1e-13);
    CHECK(max_diff(f.s, es) < 1e-13);
  }
}

TEST_SUITE("damp") {
  TEST_CASE("zero damping is the identity map") {
    Rng rng(11);
    KronFactors f{random_spd(rng, 3), random_spd(rng, 2), 5, FactorVariant::dense};
    const KronFactors d = kfac::damp(f, 0.0);
    CHECK(d.a == f.a);
    CHECK(d.s == f.s);
    CHECK_THROWS_AS(kfac::damp(f, -1.0), ValidationError);
  }

  TEST_CASE("zero factor stays singular") {
    KronFactors f{Matrix(3, 3), Matrix(2, 2), 1, FactorVariant::dense};
    const KronFactors d = kfac::damp(f, 1.0);
    CHECK_THROWS_AS(spd_inverse(d.a), SingularityError);
  }

  TEST_CASE("eigenvalue shift is trace normalised") {
    Rng rng(12);
    const Matrix b = random_matrix(rng, 4, 2);
    const Matrix a = naive_mul(b, naive_transpose(b));  // rank 2, min eig 0
    const double lambda = 1e-2;
    KronFactors f{a, Matrix::identity(2), 1, FactorVariant::dense};
    const KronFactors d = kfac::damp(f, lambda);
    const double shift = std::sqrt(lambda) * trace(a) / 4.0;
    CHECK(sym_eig(d.a).values.back() >= shift - 1e-10);
    CHECK(sym_eig(d.a).values.back() == doctest::Approx(shift).epsilon(1e-9));
  }
}

TEST_SUITE("eigenbasis") {
  TEST_CASE("identity factors") {
    KronFactors f{Matrix::identity(3), Matrix::identity(2), 1, FactorVariant::dense};
    const auto e = kfac::eigenbasis(f);
    for (double x : e.lambda_a) CHECK(x == doctest::Approx(1.0));
    for (double x : e.lambda_s) CHECK(x == doctest::Approx(1.0));
  }

  TEST_CASE("diagonal factors give permutation bases and sorted values") {
    const Vector da{1, 5, 3};
    KronFactors f{Matrix::diag(da), Matrix::identity(1), 1, FactorVariant::dense};
    const auto e = kfac::eigenbasis(f);
    CHECK(e.lambda_a == Vector{5, 3, 1});
    for (std::size_t j = 0; j < 3; ++j) {
      double nnz = 0;
      for (std::size_t i = 0; i < 3; ++i) nnz += std::abs(e.q_a(i, j)) > 0.5 ? 1 : 0;
      CHECK(nnz == 1);
    }
  }

  TEST_CASE("rotation into the eigenbasis diagonalises the Kronecker product") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(seed);
      const std::size_t n = 3 + seed, m = 8 - seed;
      KronFactors f{random_spd(rng, n), random_spd(rng, m), 1, FactorVariant::dense};
      const auto e = kfac::eigenbasis(f);
      const Matrix q = naive_kron(e.q_s, e.q_a);
      const Matrix rot = naive_mul(naive_mul(naive_transpose(q), naive_kron(f.s, f.a)), q);
      double off = 0.0;
      for (std::size_t i = 0; i < rot.rows(); ++i)
        for (std::size_t j = 0; j < rot.cols(); ++j)
          if (i != j) off = std::max(off, std::abs(rot(i, j)));
      CHECK(off <= 1e-10);
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < n; ++i)
          CHECK(std::abs(rot(j * n + i, j * n + i) - e.lambda_s[j] * e.lambda_a[i]) <= 1e-10);
    }
  }
}

TEST_SUITE("fisher_vec") {
  TEST_CASE("identity factors") {
    Rng rng(13);
    const Matrix x = random_matrix(rng, 3, 2);
    KronFactors f{Matrix::identity(3), Matrix::identity(2), 1, FactorVariant::dense};
    CHECK(max_diff(kfac::fisher_vec(f, x), x) < 1e-15);
  }

  TEST_CASE("rank-one factors") {
    Rng rng(14);
    const Vector a = random_vector(rng, 4), g = random_vector(rng, 3);
    const Matrix x = random_matrix(rng, 4, 3);
    KronFactors f{outer(a, a), outer(g, g), 1, FactorVariant::dense};
    double s = 0.0;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 3; ++j) s += a[i] * x(i, j) * g[j];
    Matrix expected(4, 3);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 3; ++j) expected(i, j) = a[i] * s * g[j];
    CHECK(max_diff(kfac::fisher_vec(f, x), expected) < 1e-12);
  }

  TEST_CASE("agrees with the explicit Kronecker product") {
    Rng rng(15);
    KronFactors f{random_spd(rng, 4), random_spd(rng, 3), 1, FactorVariant::dense};
    const Matrix x = random_matrix(rng, 4, 3);
    const Vector ref = matvec(naive_kron(f.s, f.a), naive_vec(x));
    CHECK(max_diff(naive_vec(kfac::fisher_vec(f, x)), ref) < 1e-12);
    CHECK_THROWS_AS(kfac::fisher_vec(f, Matrix(3, 4)), DimensionError);
  }
}

TEST_SUITE("estimate_factors") {
  TEST_CASE("network estimate equals accumulation over the whole dataset") {
    Rng rng(16);
    const std::vector<std::size_t> hidden{5};
    const nn::Network net = nn::make_mlp(3, hidden, 2, 4);
    const Dataset d = random_dataset(rng, net.input, 37, 2);
    kfac::EstimateOptions o;
    o.batch_size = 10;
    const auto fs = kfac::estimate_factors(net, d, o);
    REQUIRE(fs.size() == net.layers.size());
    CHECK_FALSE(fs[1].has_value());
    const auto r = nn::backward(net, nn::forward(net, d.inputs, true), d.labels);
    for (std::size_t li : {0u, 2u}) {
      REQUIRE(fs[li].has_value());
      const KronFactors ref = kfac::accumulate(fresh(FactorVariant::dense, *r.captures[li]), *r.captures[li]);
      CHECK(fs[li]->sample_count == 37);
      CHECK(max_diff(fs[li]->a, ref.a) < 1e-12);
      CHECK(max_diff(fs[li]->s, ref.s) < 1e-12);
    }
    o.max_batches = 2;
    CHECK(kfac::estimate_factors(net, d, o)[0]->sample_count == 20);
  }

  TEST_CASE("conv variant selection, symmetry and PSD") {
    const Dataset d = synth_dataset(SynthKind::bars, 2, 40, 4);
    const nn::Network net = nn::make_network("cnn:4,6", d.shape, 4, 2);
    for (auto v : {FactorVariant::conv_full, FactorVariant::conv_channel}) {
      kfac::EstimateOptions o;
      o.conv_variant = v;
      const auto fs = kfac::estimate_factors(net, d, o);
      for (std::size_t li = 0; li < fs.size(); ++li) {
        if (!fs[li]) continue;
        const auto* conv = std::get_if<nn::ConvLayer>(&net.layers[li]);
        if (conv) {
          CHECK(fs[li]->variant == v);
          CHECK(fs[li]->a.rows() == (v == FactorVariant::conv_full ? conv->c_in * 9 : conv->c_in));
        }
        CHECK(asymmetry(fs[li]->a) <= 1e-10);
        CHECK(asymmetry(fs[li]->s) <= 1e-10);
        CHECK(min_eig_ratio(fs[li]->a) >= -1e-8);
        CHECK(min_eig_ratio(fs[li]->s) >= -1e-8);
      }
    }
    CHECK(kfac::variant_for_layer(net.layers[0], FactorVariant::conv_channel) == FactorVariant::conv_channel);
    CHECK_THROWS_AS(kfac::variant_for_layer(nn::ReluLayer{}, FactorVariant::conv_full), ValidationError);
  }

  TEST_CASE("off-diagonal ratio") {
    CHECK(kfac::offdiag_ratio(Matrix::identity(3)) == 0.0);
    CHECK(kfac::offdiag_ratio(Matrix{{0, 1}, {1, 0}}) == doctest::Approx(1.0));
  }
}
