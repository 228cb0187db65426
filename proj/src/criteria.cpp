#include "kfep/criteria.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "kfep/error.hpp"

namespace kfep::criteria {

std::string to_string(UnitKind k) {
  switch (k) {
    case UnitKind::weight: return "weight";
    case UnitKind::filter: return "filter";
    case UnitKind::kfe_row: return "kfe_row";
    case UnitKind::kfe_col: return "kfe_col";
  }
  return "unknown";
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::obd: return "obd";
    case Strategy::obs: return "obs";
    case Strategy::c_obd: return "c-obd";
    case Strategy::c_obs: return "c-obs";
    case Strategy::kron_obd: return "kron-obd";
    case Strategy::kron_obs: return "kron-obs";
    case Strategy::eigendamage: return "eigendamage";
  }
  return "unknown";
}

Strategy parse_strategy(const std::string& name) {
  for (Strategy s : {Strategy::obd, Strategy::obs, Strategy::c_obd, Strategy::c_obs, Strategy::kron_obd,
                     Strategy::kron_obs, Strategy::eigendamage})
    if (to_string(s) == name) return s;
  throw ValidationError("unknown strategy '" + name + "' (obd|obs|c-obd|c-obs|kron-obd|kron-obs|eigendamage)");
}

bool is_structured(Strategy s) {
  return s == Strategy::c_obd || s == Strategy::c_obs || s == Strategy::kron_obd || s == Strategy::kron_obs;
}

void ImportanceTable::append(std::size_t layer_id, UnitKind kind, std::span<const double> scores) {
  for (std::size_t u = 0; u < scores.size(); ++u) entries.push_back({layer_id, kind, u, scores[u]});
}

void ImportanceTable::validate() const {
  for (const auto& e : entries)
    if (!std::isfinite(e.delta_loss) || e.delta_loss < -1e-8)
      throw NumericError("importance of layer " + std::to_string(e.layer_id) + " " + to_string(e.kind) + " " +
                         std::to_string(e.unit_id) + " is " + std::to_string(e.delta_loss));
}

Vector obd_scores(std::span<const double> theta, std::span<const double> diag_h) {
  if (theta.size() != diag_h.size()) throw DimensionError("obd_scores: theta and diag(H) lengths differ");
  Vector out(theta.size());
  for (std::size_t q = 0; q < theta.size(); ++q) {
    if (diag_h[q] < 0.0) throw ValidationError("obd_scores: negative curvature on the diagonal");
    out[q] = 0.5 * theta[q] * theta[q] * diag_h[q];
  }
  return out;
}

namespace {

void require_inverse(const Matrix& h_inv, std::size_t n) {
  if (!h_inv.square() || h_inv.rows() != n) throw DimensionError("OBS: H^-1 does not match theta");
}

double positive_pivot(double v, const char* what) {
  if (!(v > 0.0) || !std::isfinite(v)) throw SingularityError(std::string(what) + ": non-positive inverse diagonal");
  return v;
}

void require_factors(const Matrix& w, std::size_t a, std::size_t s, const char* what) {
  if (w.rows() != a || w.cols() != s)
    throw DimensionError(std::string(what) + ": weight is " + std::to_string(w.rows()) + "x" + std::to_string(w.cols()) +
                         ", factors are " + std::to_string(a) + "/" + std::to_string(s));
}

}  // namespace

Vector obs_scores(std::span<const double> theta, const Matrix& h_inv) {
  require_inverse(h_inv, theta.size());
  Vector out(theta.size());
  for (std::size_t q = 0; q < theta.size(); ++q)
    out[q] = 0.5 * theta[q] * theta[q] / positive_pivot(h_inv(q, q), "obs_scores");
  return out;
}

Vector obs_update(std::span<const double> theta, const Matrix& h_inv, std::size_t q) {
  require_inverse(h_inv, theta.size());
  if (q >= theta.size()) throw DimensionError("obs_update: index out of range");
  const double scale = -theta[q] / positive_pivot(h_inv(q, q), "obs_update");
  Vector d(theta.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = scale * h_inv(i, q);
  return d;
}

Matrix kfac_obd_weight_scores(const Matrix& w, const kfac::KronFactors& f) {
  require_factors(w, f.a.rows(), f.s.rows(), "kfac_obd_weight_scores");
  Matrix out(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) out(i, j) = 0.5 * w(i, j) * w(i, j) * f.a(i, i) * f.s(j, j);
  return out;
}

Matrix kfac_obs_weight_scores(const Matrix& w, const kfac::KronInverse& inv) {
  require_factors(w, inv.a_inv.rows(), inv.s_inv.rows(), "kfac_obs_weight_scores");
  Matrix out(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j)
      out(i, j) = 0.5 * w(i, j) * w(i, j) / positive_pivot(inv.a_inv(i, i) * inv.s_inv(j, j), "kfac_obs_weight_scores");
  return out;
}

Matrix kfac_obs_update(const Matrix& w, const kfac::KronInverse& inv, std::size_t i, std::size_t j) {
  require_factors(w, inv.a_inv.rows(), inv.s_inv.rows(), "kfac_obs_update");
  if (i >= w.rows() || j >= w.cols()) throw DimensionError("kfac_obs_update: index out of range");
  const double scale = -w(i, j) / positive_pivot(inv.a_inv(i, i) * inv.s_inv(j, j), "kfac_obs_update");
  Matrix d(w.rows(), w.cols());
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) d(r, c) = scale * inv.a_inv(r, i) * inv.s_inv(j, c);
  return d;
}

namespace {

Vector column_sums(const Matrix& m) {
  Vector out(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += m(i, j);
  return out;
}

// theta_i^T A theta_i for every column i.
Vector column_quadratic(const Matrix& w, const Matrix& a) {
  const Matrix aw = matmul(a, w);
  Vector out(w.cols(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t j = 0; j < w.cols(); ++j) out[j] += w(r, j) * aw(r, j);
  return out;
}

}  // namespace

Vector c_obd_scores(const Matrix& w, const kfac::KronFactors& f) { return column_sums(kfac_obd_weight_scores(w, f)); }

Vector c_obs_scores(const Matrix& w, const kfac::KronInverse& inv) {
  return column_sums(kfac_obs_weight_scores(w, inv));
}

Vector kron_obd_scores(const Matrix& w, const kfac::KronFactors& f) {
  require_factors(w, f.a.rows(), f.s.rows(), "kron_obd_scores");
  Vector q = column_quadratic(w, f.a);
  for (std::size_t i = 0; i < q.size(); ++i) q[i] *= 0.5 * f.s(i, i);
  return q;
}

Vector kron_obs_scores(const Matrix& w, const Matrix& a, const Matrix& s_inv) {
  require_factors(w, a.rows(), s_inv.rows(), "kron_obs_scores");
  Vector q = column_quadratic(w, a);
  for (std::size_t i = 0; i < q.size(); ++i) q[i] *= 0.5 / positive_pivot(s_inv(i, i), "kron_obs_scores");
  return q;
}

Matrix kron_obs_update(const Matrix& w, const Matrix& s_inv, std::size_t i) {
  if (!s_inv.square() || s_inv.rows() != w.cols()) throw DimensionError("kron_obs_update: S^-1 does not match W");
  if (i >= w.cols()) throw DimensionError("kron_obs_update: filter index out of range");
  const double pivot = positive_pivot(s_inv(i, i), "kron_obs_update");
  Matrix d(w.rows(), w.cols());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double t = -w(r, i) / pivot;
    for (std::size_t c = 0; c < w.cols(); ++c) d(r, c) = t * s_inv(i, c);
  }
  return d;
}

EigenScores eigendamage_scores(const Matrix& w_prime, std::span<const double> lambda_a,
                               std::span<const double> lambda_s, std::size_t row_group) {
  if (row_group == 0) throw ValidationError("eigendamage_scores: row group must be positive");
  if (w_prime.rows() != lambda_a.size() * row_group || w_prime.cols() != lambda_s.size())
    throw DimensionError("eigendamage_scores: W' is " + std::to_string(w_prime.rows()) + "x" +
                         std::to_string(w_prime.cols()) + " but eigenvalues give " +
                         std::to_string(lambda_a.size() * row_group) + "x" + std::to_string(lambda_s.size()));
  EigenScores out{Matrix(w_prime.rows(), w_prime.cols()), Vector(lambda_a.size(), 0.0), Vector(lambda_s.size(), 0.0)};
  for (std::size_t r = 0; r < w_prime.rows(); ++r)
    for (std::size_t j = 0; j < w_prime.cols(); ++j) {
      const double t = w_prime(r, j) * w_prime(r, j) * lambda_a[r / row_group] * lambda_s[j];
      out.theta(r, j) = t;
      out.rows[r / row_group] += t;
      out.cols[j] += t;
    }
  return out;
}

const std::vector<std::size_t>& PruneMask::removed_in(std::size_t layer_id, UnitKind kind) const {
  static const std::vector<std::size_t> none;
  const auto it = removed.find({layer_id, kind});
  return it == removed.end() ? none : it->second;
}

std::size_t PruneMask::total_removed() const {
  std::size_t n = 0;
  for (const auto& [k, v] : removed) n += v.size();
  return n;
}

double nearest_rank_percentile(std::vector<double> values, double p) {
  if (values.empty()) throw ValidationError("percentile of an empty set");
  if (!(p > 0.0 && p <= 1.0)) throw ValidationError("percentile rank must be in (0, 1]");
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(values.size()) - 1e-9));
  return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

PruneMask select_mask(std::span<const ImportanceTable> tables, double p, double cap) {
  if (!(p > 0.0 && p < 1.0)) throw ValidationError("pruning ratio must be in (0, 1)");
  if (!(cap > 0.0 && cap <= 1.0)) throw ValidationError("per-layer cap must be in (0, 1]");
  std::map<GroupKey, std::vector<std::pair<double, std::size_t>>> groups;
  std::vector<double> pooled;
  for (const auto& t : tables)
    for (const auto& e : t.entries) {
      groups[{e.layer_id, e.kind}].emplace_back(e.delta_loss, e.unit_id);
      pooled.push_back(e.delta_loss);
    }
  if (pooled.empty()) throw ValidationError("select_mask: no importance scores");

  PruneMask mask;
  mask.ratio = p;
  mask.cap = cap;
  mask.tau = nearest_rank_percentile(pooled, p);
  for (auto& [key, units] : groups) {
    const std::size_t n = units.size();
    mask.group_size[key] = n;
    std::sort(units.begin(), units.end());
    const auto limit = std::min(static_cast<std::size_t>(std::floor(cap * static_cast<double>(n) + 1e-9)), n - 1);
    std::vector<std::size_t> removed;
    for (const auto& [score, id] : units) {
      if (score > mask.tau || removed.size() == limit) break;
      removed.push_back(id);
    }
    std::sort(removed.begin(), removed.end());
    if (!removed.empty()) mask.removed[key] = std::move(removed);
  }
  return mask;
}

void write_importance_csv(std::ostream& out, std::span<const ImportanceTable> tables) {
  out << "layer_id,unit_kind,unit_id,delta_L,strategy\n";
  std::ostringstream line;
  line << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& t : tables)
    for (const auto& e : t.entries) {
      line.str("");
      line << e.layer_id << ',' << to_string(e.kind) << ',' << e.unit_id << ',' << e.delta_loss << ','
           << to_string(t.strategy) << '\n';
      out << line.str();
    }
}

}  // namespace kfep::criteria
