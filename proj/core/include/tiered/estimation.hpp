#pragma once

#include "tiered/skeleton.hpp"

#include <limits>
#include <map>
#include <string>
#include <vector>

namespace tiered {

// Component values indexed like AnovaTable::components.
struct ComponentEstimates {
  std::vector<std::string> ids;   // spectral ids
  Vec spectral;
  Vec canonical;
  std::vector<bool> estimable;
  std::vector<std::string> constrained_zero;
  std::map<std::string, double> effective_df;  // per stratum group of P*Q
  std::vector<double> defects;                 // inconsistency of linearly dependent EMS rows
  bool converged = true;
  int iterations = 0;

  double value(const std::string& id) const;
};

struct MeanSquare {
  int part = -1;
  int df = 0;
  double ss = 0.0;
  double ms = 0.0;
};

// SS = y' M y for each part M, MS = SS / rank.
std::vector<MeanSquare> project_mean_squares(const Vec& y, const Decomposition& d);

struct EffectEstimate {
  int source = -1;            // treatment source
  std::string label;
  Vec effect;                 // estimate of R X tau on the observational units
  Vec treatment_values;       // per treatment: mean of `effect` over its units
  double variance = std::numeric_limits<double>::quiet_NaN();  // variance matrix is variance * R
  double efficiency = 1.0;    // information fraction used (stratum estimates)
  int part = -1;              // stratum estimates: the part used
};

struct FitResult {
  std::string method;  // "single-stratum", "anova", "combined", "combined-reml", "gls-known-V", "gls-egls"
  std::vector<MeanSquare> mean_squares;
  std::vector<EffectEstimate> effects;
  ComponentEstimates components;
  std::vector<double> trajectory;  // largest relative change per iteration
  double vinv_defect = std::numeric_limits<double>::quiet_NaN();  // max |V V^-1 - I| for the closed form
};

// Linear system of observed mean squares against EMS coefficients.
struct EmsSystem {
  Mat a;                    // rows x components
  Vec ms;
  Vec df;                   // weights
  std::vector<int> rows;    // table rows
  std::vector<std::string> ids;
};

// Rows of P*Q without quadratic terms, as used for equating expected and observed mean squares.
EmsSystem residual_system(const AnovaTable& table, const std::vector<MeanSquare>& ms);

// Weighted least squares with df weights; rows with identical EMS are pooled first. Components
// outside the row space are flagged non-estimable; linearly dependent distinct rows give defects.
ComponentEstimates ems_solver(const EmsSystem& sys);

// Sets negative estimable components to zero one at a time and refits, which pools the mean
// squares whose EMS then coincide.
ComponentEstimates enforce_nonnegativity(const ComponentEstimates& est, const EmsSystem& sys);

// Estimate of R X tau from one part (P>Q)>R, divided by its efficiency. The variance uses
// `components` when given, otherwise the mean square of a residual part with the same EMS.
EffectEstimate stratum_estimate(const Vec& y, const ExperimentChain& chain, const Decomposition& d,
                                const AnovaTable& table, int part, const Vec* components = nullptr);

// Stratum-wise anova: equate EMS on residual rows, enforce nonnegativity, estimate each treatment
// source from its single part. Throws ApplicabilityError unless every treatment source sits in
// one part of P*Q.
FitResult anova_fit(const Vec& y, const ExperimentChain& chain, const Decomposition& d, const AnovaTable& table);

// Combined estimation. Anova-applicable chains iterate GLS combination and the effective-df
// update over the stratum groups of P*Q; other chains use restricted likelihood scoring on the
// components.
FitResult combine_information(const Vec& y, const ExperimentChain& chain, const Decomposition& d,
                              const AnovaTable& table, const ComponentEstimates* init = nullptr);

// GLS with known spectral components (indexed like AnovaTable::components).
FitResult gls_fit(const Vec& y, const ExperimentChain& chain, const Decomposition& d, const AnovaTable& table,
                  const Vec& spectral);

// V = sum over tiers and strata of eta_H X Q_H X'.
Mat variance_matrix(const ExperimentChain& chain, const AnovaTable& table, const Vec& spectral);

// Closed-form inverse for three-tier chains: sum 1/xi_P P - sum (r eta_Q / (1 + r eta_Q alpha_Q)) P Q P* / (xi_P xi_P*).
Mat closed_form_inverse(const ExperimentChain& chain, const AnovaTable& table, const Vec& spectral);

// Canonical components from spectral ones, tier by tier.
Vec canonical_components(const ExperimentChain& chain, const AnovaTable& table, const Vec& spectral);

// EMS value of a row without its quadratic terms.
double ems_value(const AnovaRow& row, const AnovaTable& table, const Vec& spectral);

}  // namespace tiered
