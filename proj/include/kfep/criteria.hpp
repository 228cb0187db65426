#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kfep/kfac.hpp"
#include "kfep/matrix.hpp"

namespace kfep::criteria {

enum class UnitKind : std::uint8_t { weight = 0, filter = 1, kfe_row = 2, kfe_col = 3 };
enum class Strategy : std::uint8_t { obd, obs, c_obd, c_obs, kron_obd, kron_obs, eigendamage };

std::string to_string(UnitKind k);
std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& name);
// True for strategies that remove whole output units (filters / neurons).
bool is_structured(Strategy s);

struct ImportanceEntry {
  std::size_t layer_id = 0;
  UnitKind kind = UnitKind::weight;
  std::size_t unit_id = 0;
  double delta_loss = 0.0;
};

struct ImportanceTable {
  Strategy strategy = Strategy::obd;
  std::vector<ImportanceEntry> entries;

  void append(std::size_t layer_id, UnitKind kind, std::span<const double> scores);
  // Scores are quadratic forms with PSD factors, so they may not be
  // meaningfully negative.
  void validate() const;
};

// ---- Weight level, explicit H ----

// 1/2 theta_q^2 H_qq
Vector obd_scores(std::span<const double> theta, std::span<const double> diag_h);
// 1/2 theta_q^2 / [H^-1]_qq
Vector obs_scores(std::span<const double> theta, const Matrix& h_inv);
// -(theta_q / [H^-1]_qq) H^-1 e_q
Vector obs_update(std::span<const double> theta, const Matrix& h_inv, std::size_t q);

// ---- Weight level under F = S (x) A for a weight W (n x m), entry (i, j)
// at column-major index j*n + i ----

// 1/2 W_ij^2 A_ii S_jj
Matrix kfac_obd_weight_scores(const Matrix& w, const kfac::KronFactors& f);
// 1/2 W_ij^2 / ([A^-1]_ii [S^-1]_jj)
Matrix kfac_obs_weight_scores(const Matrix& w, const kfac::KronInverse& inv);
// OBS move for entry (i, j): -(W_ij / ([A^-1]_ii [S^-1]_jj)) A^-1 e_i e_j^T S^-1
Matrix kfac_obs_update(const Matrix& w, const kfac::KronInverse& inv, std::size_t i, std::size_t j);

// ---- Filter level; filter i is column i of W ----

Vector c_obd_scores(const Matrix& w, const kfac::KronFactors& f);
Vector c_obs_scores(const Matrix& w, const kfac::KronInverse& inv);
// 1/2 S_ii theta_i^T A theta_i
Vector kron_obd_scores(const Matrix& w, const kfac::KronFactors& f);
// 1/2 theta_i^T A theta_i / [S^-1]_ii
Vector kron_obs_scores(const Matrix& w, const Matrix& a, const Matrix& s_inv);
// -(theta_i / [S^-1]_ii) e_i^T S^-1; column i of W + dW is zero.
Matrix kron_obs_update(const Matrix& w, const Matrix& s_inv, std::size_t i);

// ---- Eigenbasis ----

struct EigenScores {
  Matrix theta;  // W'^2 scaled by eigenvalue products
  Vector rows;   // one per row group
  Vector cols;
};

// Theta_rj = W'_rj^2 lambda_a(r / row_group) lambda_s(j). Row units are blocks
// of `row_group` consecutive rows.
EigenScores eigendamage_scores(const Matrix& w_prime, std::span<const double> lambda_a,
                               std::span<const double> lambda_s, std::size_t row_group = 1);

// ---- Mask selection ----

using GroupKey = std::pair<std::size_t, UnitKind>;

struct PruneMask {
  double tau = 0.0;
  double ratio = 0.0;
  double cap = 1.0;
  std::map<GroupKey, std::vector<std::size_t>> removed;  // sorted unit ids
  std::map<GroupKey, std::size_t> group_size;

  const std::vector<std::size_t>& removed_in(std::size_t layer_id, UnitKind kind) const;
  std::size_t total_removed() const;
};

// Nearest-rank percentile: sorted[ceil(p N) - 1].
double nearest_rank_percentile(std::vector<double> values, double p);

// tau is the p-th percentile over all pooled scores. Within each
// (layer, kind) group the units with score <= tau are removed, lowest score
// (then lowest id) first, up to min(floor(cap n), n - 1) units.
PruneMask select_mask(std::span<const ImportanceTable> tables, double p, double cap);

// CSV with header layer_id,unit_kind,unit_id,delta_L,strategy.
void write_importance_csv(std::ostream& out, std::span<const ImportanceTable> tables);

}  // namespace kfep::criteria
