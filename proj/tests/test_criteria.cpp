#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "helpers.hpp"
#include "kfep/criteria.hpp"
#include "kfep/error.hpp"
#include "kfep/kfac.hpp"
#include "kfep/linalg.hpp"
#include "kfep/oracle.hpp"

using namespace kfep;
using namespace testutil;
using criteria::ImportanceTable;
using criteria::Strategy;
using criteria::UnitKind;
using kfac::KronFactors;

namespace {

const Matrix kExampleH{{1, 0.99, 0}, {0.99, 1, 0.01}, {0, 0.01, 0.5}};

KronFactors factors(const Matrix& a, const Matrix& s) { return KronFactors{a, s, 1, kfac::FactorVariant::dense}; }

std::vector<std::size_t> ranking(const Vector& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  return idx;
}

std::vector<std::size_t> column_indices(std::size_t n, std::size_t col) {
  std::vector<std::size_t> q(n);
  std::iota(q.begin(), q.end(), col * n);
  return q;
}

ImportanceTable table_of(std::size_t layer, const Vector& scores) {
  ImportanceTable t;
  t.strategy = Strategy::kron_obd;
  t.append(layer, UnitKind::filter, scores);
  return t;
}

}  // namespace

TEST_SUITE("weight-level OBD/OBS") {
  TEST_CASE("worked example scores") {
    const Vector theta{1, 1, 1};
    Vector diag{1, 1, 0.5};
    const Vector obd = criteria::obd_scores(theta, diag);
    CHECK(obd == Vector{0.5, 0.5, 0.25});
    CHECK(std::min_element(obd.begin(), obd.end()) - obd.begin() == 2);

    const Vector obs = criteria::obs_scores(theta, spd_inverse(kExampleH));
    CHECK(std::abs(obs[0] - 0.01) <= 5e-3);
    CHECK(std::abs(obs[1] - 0.01) <= 5e-3);
    CHECK(obs[2] > 0.2);
    const Vector upd = criteria::obs_update(theta, spd_inverse(kExampleH), 1);
    CHECK(max_diff(upd, Vector{0.99, -1, 0.02}) <= 1e-12);
  }

  TEST_CASE("zero weights score zero and diagonal H collapses OBS to OBD") {
    CHECK(criteria::obd_scores(Vector{0, 0}, Vector{3, 4}) == Vector{0, 0});
    Rng rng(1);
    const Vector theta = random_vector(rng, 6), d{1, 2, 3, 4, 5, 6};
    const Vector obd = criteria::obd_scores(theta, d);
    Vector inv(6);
    for (std::size_t i = 0; i < 6; ++i) {
      inv[i] = 1.0 / d[i];
      CHECK(obd[i] == doctest::Approx(0.5 * theta[i] * theta[i] * d[i]));
    }
    CHECK(max_diff(criteria::obs_scores(theta, Matrix::diag(inv)), obd) <= 1e-14);
  }

  TEST_CASE("OBS agrees with the KKT oracle on random 6-D problems") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(seed + 10);
      const oracle::ExactQuadratic q{random_vector(rng, 6), random_spd(rng, 6)};
      const Matrix hinv = spd_inverse(q.h);
      const Vector s = criteria::obs_scores(q.theta, hinv);
      for (std::size_t i = 0; i < 6; ++i) {
        const auto r = oracle::exact_single_prune(i, q);
        CHECK(std::abs(s[i] - r.delta_loss) <= 1e-10 * std::max(1.0, r.delta_loss));
        CHECK(max_diff(criteria::obs_update(q.theta, hinv, i), r.delta) <= 1e-10);
      }
    }
  }

  TEST_CASE("K-FAC weight-level OBS matches the oracle on F = S⊗A") {
    Rng rng(2);
    const Matrix w = random_matrix(rng, 3, 4);
    const KronFactors f = factors(random_spd(rng, 3), random_spd(rng, 4));
    const auto inv = kfac::kron_inverse(f);
    const oracle::ExactQuadratic q{naive_vec(w), naive_kron(f.s, f.a)};
    const Matrix scores = criteria::kfac_obs_weight_scores(w, inv);
    const Matrix obd = criteria::kfac_obd_weight_scores(w, f);
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t i = 0; i < 3; ++i) {
        const auto r = oracle::exact_single_prune(j * 3 + i, q);
        CHECK(std::abs(scores(i, j) - r.delta_loss) <= 1e-10);
        CHECK(max_diff(naive_vec(criteria::kfac_obs_update(w, inv, i, j)), r.delta) <= 1e-10);
        CHECK(obd(i, j) == doctest::Approx(0.5 * w(i, j) * w(i, j) * f.a(i, i) * f.s(j, j)));
      }
  }

  TEST_CASE("singular inverse diagonal is rejected") {
    CHECK_THROWS_AS(criteria::obs_scores(Vector{1, 1}, Matrix{{1, 0}, {0, 0}}), SingularityError);
  }
}

TEST_SUITE("channel-level") {
  TEST_CASE("single-weight filters reduce to weight-level scores") {
    Rng rng(3);
    const Matrix w = random_matrix(rng, 1, 5);
    const KronFactors f = factors(random_spd(rng, 1), random_spd(rng, 5));
    const Matrix obd = criteria::kfac_obd_weight_scores(w, f);
    const Vector c = criteria::c_obd_scores(w, f);
    for (std::size_t j = 0; j < 5; ++j) CHECK(c[j] == doctest::Approx(obd(0, j)));
    const auto inv = kfac::kron_inverse(f);
    const Matrix obs = criteria::kfac_obs_weight_scores(w, inv);
    const Vector co = criteria::c_obs_scores(w, inv);
    for (std::size_t j = 0; j < 5; ++j) CHECK(co[j] == doctest::Approx(obs(0, j)));
  }

  TEST_CASE("identity factors give half squared filter norms") {
    Rng rng(4);
    const Matrix w = random_matrix(rng, 6, 3);
    const KronFactors f = factors(Matrix::identity(6), Matrix::identity(3));
    const Vector a = criteria::c_obd_scores(w, f), b = criteria::c_obs_scores(w, kfac::kron_inverse(f)),
                 k = criteria::kron_obd_scores(w, f);
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < 6; ++i) s += 0.5 * w(i, j) * w(i, j);
      CHECK(a[j] == doctest::Approx(s));
      CHECK(b[j] == doctest::Approx(s));
      CHECK(k[j] == doctest::Approx(s));
    }
  }

  TEST_CASE("C-OBS sums match the dense Kronecker inverse diagonal") {
    Rng rng(5);
    const std::size_t n = 2 * 9, m = 8;  // 144-weight conv layer
    const Matrix w = random_matrix(rng, n, m);
    const KronFactors f = kfac::damp(factors(random_spd(rng, n, 0.0), random_spd(rng, m, 0.0)), 1e-3);
    const Matrix finv = spd_inverse(naive_kron(f.s, f.a));
    const Vector c = criteria::c_obs_scores(w, kfac::kron_inverse(f));
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += 0.5 * w(i, j) * w(i, j) / finv(j * n + i, j * n + i);
      CHECK(std::abs(c[j] - s) <= 1e-9 * std::max(1.0, s));
    }
  }
}

TEST_SUITE("Kron-OBD / Kron-OBS") {
  TEST_CASE("Kron-OBD equals the explicit filter block quadratic and the trace identity") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed + 20);
      const std::size_t n = 4, m = 3;
      const Matrix w = random_matrix(rng, n, m);
      const KronFactors f = factors(random_spd(rng, n), random_spd(rng, m));
      const Vector k = criteria::kron_obd_scores(w, f);
      for (std::size_t i = 0; i < m; ++i) {
        Matrix dw(n, m);
        for (std::size_t r = 0; r < n; ++r) dw(r, i) = -w(r, i);
        const Vector v = naive_vec(dw);
        const double quad = 0.5 * dot(v, matvec(naive_kron(f.s, f.a), v));
        double block = 0.0;
        for (std::size_t p = 0; p < n; ++p)
          for (std::size_t q = 0; q < n; ++q) block += 0.5 * w(p, i) * f.s(i, i) * f.a(p, q) * w(q, i);
        const double tr = 0.5 * trace(naive_mul(naive_mul(naive_mul(naive_transpose(dw), f.a), dw), f.s));
        CHECK(std::abs(k[i] - block) <= 1e-10);
        CHECK(std::abs(quad - tr) <= 1e-10);
        CHECK(std::abs(k[i] - quad) <= 1e-10);
      }
    }
  }

  TEST_CASE("diagonal factors: Kron-OBD equals C-OBD") {
    Rng rng(6);
    const Matrix w = random_matrix(rng, 5, 4);
    const KronFactors f = factors(Matrix::diag(Vector{1, 2, 3, 4, 5}), Matrix::diag(Vector{0.5, 1, 2, 3}));
    CHECK(max_diff(criteria::kron_obd_scores(w, f), criteria::c_obd_scores(w, f)) <= 1e-14);
  }

  TEST_CASE("identity S: Kron-OBS reduces to Kron-OBD with a pure zeroing update") {
    Rng rng(7);
    const Matrix w = random_matrix(rng, 4, 3);
    const KronFactors f = factors(random_spd(rng, 4), Matrix::identity(3));
    CHECK(max_diff(criteria::kron_obs_scores(w, f.a, Matrix::identity(3)), criteria::kron_obd_scores(w, f)) <= 1e-14);
    const Matrix dw = criteria::kron_obs_update(w, Matrix::identity(3), 1);
    for (std::size_t r = 0; r < 4; ++r) {
      CHECK(dw(r, 1) == -w(r, 1));
      CHECK(dw(r, 0) == 0.0);
      CHECK(dw(r, 2) == 0.0);
    }
  }

  TEST_CASE("Kron-OBS matches the KKT oracle on F = S⊗A and zeroes the filter") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed + 30);
      const std::size_t n = 1 + seed % 4, m = 2 + seed % 3;
      const Matrix w = random_matrix(rng, n, m);
      const KronFactors f = factors(random_spd(rng, n), random_spd(rng, m));
      const Matrix s_inv = spd_inverse(f.s);
      const oracle::ExactQuadratic q{naive_vec(w), naive_kron(f.s, f.a)};
      const Vector scores = criteria::kron_obs_scores(w, f.a, s_inv);
      for (std::size_t i = 0; i < m; ++i) {
        const auto r = oracle::exact_multi_prune(column_indices(n, i), q);
        const Matrix dw = criteria::kron_obs_update(w, s_inv, i);
        CHECK(std::abs(scores[i] - r.delta_loss) <= 1e-10 * std::max(1.0, r.delta_loss));
        CHECK(max_diff(naive_vec(dw), r.delta) <= 1e-10);
        const Matrix after = w + dw;
        for (std::size_t p = 0; p < n; ++p) CHECK(std::abs(after(p, i)) <= 1e-12);
        CHECK(std::abs(oracle::quadratic_cost(q, naive_vec(dw)) - scores[i]) <= 1e-10 * std::max(1.0, scores[i]));
      }
    }
  }

  TEST_CASE("diagonal factors give identical rankings across the four structured criteria") {
    Rng rng(8);
    const Matrix w = random_matrix(rng, 6, 7);
    Vector da(6), ds(7);
    for (double& x : da) x = rng.uniform(0.1, 2.0);
    for (double& x : ds) x = rng.uniform(0.1, 2.0);
    const KronFactors f = factors(Matrix::diag(da), Matrix::diag(ds));
    const auto inv = kfac::kron_inverse(f);
    const auto r0 = ranking(criteria::c_obd_scores(w, f));
    CHECK(ranking(criteria::c_obs_scores(w, inv)) == r0);
    CHECK(ranking(criteria::kron_obd_scores(w, f)) == r0);
    CHECK(ranking(criteria::kron_obs_scores(w, f.a, inv.s_inv)) == r0);
  }
}

TEST_SUITE("eigendamage") {
  TEST_CASE("unit eigenvalues give row and column sums of squares") {
    const Matrix wp{{1, 2, 0}, {3, -1, 1}};
    const auto s = criteria::eigendamage_scores(wp, Vector{1, 1}, Vector{1, 1, 1});
    CHECK(s.rows == Vector{5, 11});
    CHECK(s.cols == Vector{10, 5, 1});
    const auto z = criteria::eigendamage_scores(Matrix(2, 3), Vector{1, 2}, Vector{3, 4, 5});
    CHECK(z.rows == Vector{0, 0});
  }

  TEST_CASE("per-entry loop and equivalence with C-OBD under the diagonal KFE Fisher") {
    Rng rng(9);
    const Matrix wp = random_matrix(rng, 4, 3);
    const Vector la{3, 2, 1, 0.5}, ls{2, 1, 0.25};
    const auto s = criteria::eigendamage_scores(wp, la, ls);
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 3; ++c) sum += wp(r, c) * wp(r, c) * la[r] * ls[c];
      CHECK(s.rows[r] == doctest::Approx(sum).epsilon(1e-14));
    }
    const Vector cols = criteria::c_obd_scores(wp, factors(Matrix::diag(la), Matrix::diag(ls)));
    const Vector rows = criteria::c_obd_scores(wp.transpose(), factors(Matrix::diag(ls), Matrix::diag(la)));
    for (std::size_t c = 0; c < 3; ++c) CHECK(s.cols[c] == doctest::Approx(2.0 * cols[c]).epsilon(1e-14));
    for (std::size_t r = 0; r < 4; ++r) CHECK(s.rows[r] == doctest::Approx(2.0 * rows[r]).epsilon(1e-14));
  }

  TEST_CASE("row groups sum spatial slices") {
    Rng rng(10);
    const Matrix wp = random_matrix(rng, 2 * 4, 3);  // 2 channels, 4 offsets
    const Vector la{2, 0.5}, ls{1, 1, 1};
    const auto s = criteria::eigendamage_scores(wp, la, ls, 4);
    REQUIRE(s.rows.size() == 2);
    for (std::size_t a = 0; a < 2; ++a) {
      double sum = 0.0;
      for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t c = 0; c < 3; ++c) sum += wp(a * 4 + k, c) * wp(a * 4 + k, c) * la[a];
      CHECK(s.rows[a] == doctest::Approx(sum));
    }
    CHECK_THROWS_AS(criteria::eigendamage_scores(wp, Vector{1}, ls, 4), DimensionError);
  }
}

TEST_SUITE("select_mask") {
  TEST_CASE("nearest-rank percentile") {
    CHECK(criteria::nearest_rank_percentile({4, 1, 3, 2}, 0.5) == 2);
    CHECK(criteria::nearest_rank_percentile({4, 1, 3, 2}, 0.51) == 3);
    CHECK(criteria::nearest_rank_percentile({5}, 0.01) == 5);
    CHECK(criteria::nearest_rank_percentile({2, 9, 4}, 0.99) == 9);
  }

  TEST_CASE("tiny p removes only the minimum") {
    const auto t = table_of(0, Vector{5, 1, 7, 3});
    const auto m = criteria::select_mask(std::span(&t, 1), 1e-6, 0.95);
    CHECK(m.tau == 1);
    CHECK(m.removed_in(0, UnitKind::filter) == std::vector<std::size_t>{1});
  }

  TEST_CASE("singleton groups are never emptied") {
    ImportanceTable t;
    t.append(0, UnitKind::filter, Vector{1});
    t.append(1, UnitKind::filter, Vector{2});
    const auto m = criteria::select_mask(std::span(&t, 1), 0.9, 1.0);
    CHECK(m.total_removed() == 0);
  }

  TEST_CASE("uniform scores with a cap: exactly half removed, lowest ids first") {
    const auto t = table_of(3, Vector(10, 1.0));
    const auto m = criteria::select_mask(std::span(&t, 1), 0.9, 0.5);
    CHECK(m.removed_in(3, UnitKind::filter) == std::vector<std::size_t>{0, 1, 2, 3, 4});
  }

  TEST_CASE("pooled percentile across two layers") {
    ImportanceTable t;
    t.append(0, UnitKind::filter, Vector{1, 2, 3, 4});
    t.append(1, UnitKind::filter, Vector{10, 20, 30, 40});
    const auto m = criteria::select_mask(std::span(&t, 1), 0.5, 1.0);
    CHECK(m.tau == 4);
    CHECK(m.removed_in(1, UnitKind::filter).empty());
    // Every below-threshold unit, minus the one kept so the layer survives.
    CHECK(m.removed_in(0, UnitKind::filter) == std::vector<std::size_t>{0, 1, 2});
  }

  TEST_CASE("cap is a hard bound, monotone in p, permutation invariant") {
    Rng rng(11);
    ImportanceTable t;
    for (std::size_t l = 0; l < 4; ++l) {
      Vector s(5 + 3 * l);
      for (double& x : s) x = std::floor(rng.uniform(0, 20));  // with ties
      t.append(l, UnitKind::filter, s);
    }
    std::size_t prev = 0;
    std::map<criteria::GroupKey, std::vector<std::size_t>> prev_sets;
    for (double p = 0.05; p < 1.0; p += 0.05) {
      const auto m = criteria::select_mask(std::span(&t, 1), p, 0.6);
      for (const auto& [key, ids] : m.removed) {
        CHECK(ids.size() <= static_cast<std::size_t>(std::floor(0.6 * m.group_size.at(key) + 1e-9)));
        const auto& before = prev_sets[key];
        CHECK(std::includes(ids.begin(), ids.end(), before.begin(), before.end()));
      }
      CHECK(m.total_removed() >= prev);
      prev = m.total_removed();
      prev_sets = m.removed;
    }
    std::vector<double> all;
    for (const auto& e : t.entries) all.push_back(e.delta_loss);
    const double tau = criteria::nearest_rank_percentile(all, 0.37);
    std::shuffle(all.begin(), all.end(), rng.engine());
    CHECK(criteria::nearest_rank_percentile(all, 0.37) == tau);
  }

  TEST_CASE("argument validation") {
    const auto t = table_of(0, Vector{1, 2});
    CHECK_THROWS_AS(criteria::select_mask(std::span(&t, 1), 0.0, 0.5), ValidationError);
    CHECK_THROWS_AS(criteria::select_mask(std::span(&t, 1), 1.0, 0.5), ValidationError);
    CHECK_THROWS_AS(criteria::select_mask(std::span(&t, 1), 0.5, 0.0), ValidationError);
    const ImportanceTable empty;
    CHECK_THROWS_AS(criteria::select_mask(std::span(&empty, 1), 0.5, 0.5), ValidationError);
  }
}

TEST_SUITE("importance table") {
  TEST_CASE("validation and CSV dump") {
    ImportanceTable t;
    t.strategy = Strategy::c_obs;
    t.append(2, UnitKind::filter, Vector{0.5, 1e-9});
    t.validate();
    std::ostringstream out;
    criteria::write_importance_csv(out, std::span(&t, 1));
    const std::string csv = out.str();
    CHECK(csv.rfind("layer_id,unit_kind,unit_id,delta_L,strategy\n", 0) == 0);
    CHECK(csv.find("2,filter,0,0.5,c-obs") != std::string::npos);
    t.append(3, UnitKind::weight, Vector{-1.0});
    CHECK_THROWS_AS(t.validate(), NumericError);
  }

  TEST_CASE("strategy names roundtrip") {
    for (auto s : {Strategy::obd, Strategy::obs, Strategy::c_obd, Strategy::c_obs, Strategy::kron_obd,
                   Strategy::kron_obs, Strategy::eigendamage})
      CHECK(criteria::parse_strategy(criteria::to_string(s)) == s);
    CHECK_THROWS_AS(criteria::parse_strategy("magnitude"), ValidationError);
    CHECK(criteria::is_structured(Strategy::kron_obs));
    CHECK_FALSE(criteria::is_structured(Strategy::obd));
  }
}
