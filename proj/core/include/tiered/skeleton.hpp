#pragma once

#include "tiered/balance.hpp"

#include <optional>
#include <string>
#include <vector>

namespace tiered {

// One term of an expected mean square. Spectral terms (xi, eta, zeta, ...) carry the
// replication as multiplier, canonical terms (phi, psi, chi, ...) carry r k_F, and quadratic
// terms q(F) carry 1. The coefficient is efficiency * multiplier.
struct EmsTerm {
  std::string id;      // ascii: "xi_S", "eta_BM", "psi_BPF", "q(R)", "q_0"
  std::string symbol;  // display: "ξ_S", "η_BM", "ψ_BPF", "q(R)", "q_0"
  int level = 0;       // tier of the component; the treatment tier for quadratic terms
  int index = 0;       // generalized factor of that tier, or treatment source for q terms
  double efficiency = 1.0;
  double multiplier = 1.0;

  double coefficient() const { return efficiency * multiplier; }
  std::string render(int snap_den = 64) const;  // "(1/3)12η_QC", "(1/27)q(T)", "15φ_O"
};

struct EmsExpression {
  std::vector<EmsTerm> spectral;
  std::vector<EmsTerm> canonical;
  std::vector<EmsTerm> quadratic;

  std::string spectral_text(int snap_den = 64) const;   // spectral then quadratic terms
  std::string canonical_text(int snap_den = 64) const;  // canonical then quadratic terms
  // Coefficient of a component or quadratic form by id, 0 when absent.
  double coefficient(const std::string& id) const;
};

struct AnovaRow {
  int part = -1;
  std::vector<std::string> sources;                // per tier; "" where the part carries no source
  std::vector<int> entry_df;                       // df of each tier entry (rank of all parts sharing it)
  std::vector<bool> starts;                        // the tier entry first appears on this row
  std::vector<std::optional<double>> efficiency;   // per tier; empty for tier 0 and blanks
  int df = 0;
  bool in_pstar_q = false;
  EmsExpression ems;
};

struct ComponentInfo {
  std::string id;         // "xi_S"
  std::string symbol;     // "ξ_S"
  std::string canonical_id;
  std::string canonical_symbol;
  int level = 0;
  int gf = 0;
};

struct AnovaTable {
  std::vector<std::string> tiers;
  std::vector<AnovaRow> rows;
  std::vector<ComponentInfo> components;  // every variance component of the unit tiers
  bool has_canonical = false;
  int snap_den = 64;

  int total_df() const;
  // Tiers whose efficiency column has an entry other than 1.
  std::vector<bool> efficiency_columns() const;
};

// Greek letters used per tier: spectral xi, eta, zeta, ... and canonical phi, psi, chi, ...
std::string spectral_symbol(int level, bool ascii = false);
std::string canonical_symbol(int level, bool ascii = false);

AnovaTable skeleton_table(const Decomposition& d, const ExperimentChain& chain);

// Fills the canonical terms of every row: r eta_H = sum over F >= H of r k_F psi_F.
AnovaTable canonical_ems(AnovaTable table, const ExperimentChain& chain);

struct LinearCombination {
  std::vector<std::pair<std::string, double>> terms;  // (symbol, coefficient)
  std::string text(int snap_den = 64) const;
};

struct EstimabilityReport {
  bool canonical = false;
  std::vector<std::string> estimable;
  std::vector<LinearCombination> confounded_sums;
  std::vector<std::string> never_estimable;
  bool ldcvs = false;
  std::vector<int> rows;                         // table rows used (P*Q, no quadratic terms, distinct EMS)
  std::vector<std::vector<double>> dependencies; // left null vectors over `rows` when ldcvs
  std::vector<std::string> negative_risk;        // estimable components whose estimator differences mean squares
};

// Rank analysis of the EMS rows of P*Q that carry no quadratic term.
EstimabilityReport estimability_report(const AnovaTable& table, bool canonical = false, double thr = 1e-9);

// The system used by estimability_report and the equate-EMS solver: one row per table row in
// `rows`, one column per component.
Mat ems_matrix(const AnovaTable& table, const std::vector<int>& rows, bool canonical = false);

// Rendering.
std::string render_table_text(const AnovaTable& table, bool canonical = false);
std::vector<std::string> render_table_records(const AnovaTable& table);  // one JSON object per row
std::string render_estimability_text(const AnovaTable& table, const EstimabilityReport& rep);
std::string render_estimability_json(const AnovaTable& table, const EstimabilityReport& rep);

}  // namespace tiered
