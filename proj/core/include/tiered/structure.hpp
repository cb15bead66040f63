#pragma once

#include "tiered/numeric.hpp"
#include "tiered/options.hpp"

#include <string>
#include <vector>

namespace tiered {

struct Factor {
  std::string name;
  std::string abbrev;
  std::string title;           // long name for prose reports; empty when `name` serves
  int nlevels = 0;
  std::vector<int> levels;     // per unit, 0-based; nested factors are coded within their nest
  std::vector<int> nested_in;  // indices of factors this one is written as nested in
  bool pseudo = false;         // pseudofactors refine sources but define no stratum
  bool automatic = false;      // the full factor added by the structure itself
};

struct GeneralizedFactor {
  std::vector<int> factors;  // factor indices, ascending
  std::string label;         // "Mean", "Blocks", "P#T[S]", "Fibres[P∧B]"
  std::string subscript;     // "0" for the mean, abbreviations in declaration order otherwise
  bool is_mean = false;
  bool is_full = false;
  std::vector<int> classes;  // per-unit class index
  int nclasses = 0;
  int replication = 0;       // k_H, the common class size
};

// Label for an arbitrary set of factors, nesting rendered as "A[B∧C]" and crossing as "#".
// `order` lists the factors in the order they should be written (declaration order if empty).
std::string factor_set_label(const std::vector<Factor>& factors, const std::vector<int>& set,
                             const std::vector<int>& order = {});

// Every factor reachable through nested_in, in first-written order.
std::vector<int> ancestors(const std::vector<Factor>& factors, int f);

class PosetBlockStructure {
 public:
  PosetBlockStructure() = default;
  // Generalized factors are the subsets of the non-pseudo factors closed under nesting, in
  // colexicographic order of declaration index (mean first). A full factor "Units" is added
  // when no subset separates every unit.
  PosetBlockStructure(int unit_count, std::vector<Factor> factors);

  int unit_count() const { return n_; }
  const std::vector<Factor>& factors() const { return factors_; }
  const std::vector<GeneralizedFactor>& generalized_factors() const { return gfs_; }
  int size() const { return static_cast<int>(gfs_.size()); }
  // below(h, f): H < F, H strictly coarser than F.
  bool below(int h, int f) const { return below_[h][f]; }
  int find_factor(const std::string& name_or_abbrev) const;
  int find_gf(const std::vector<int>& factor_set) const;

 private:
  int n_ = 0;
  std::vector<Factor> factors_;
  std::vector<GeneralizedFactor> gfs_;
  std::vector<std::vector<bool>> below_;
};

struct Projector {
  Mat matrix;
  std::string label;
  int rank = 0;
};

struct RelationshipMatrix {
  Mat matrix;
  GeneralizedFactor factor;
};

// H < F on a common unit set.
bool marginal(const GeneralizedFactor& h, const GeneralizedFactor& f);

RelationshipMatrix relationship_matrix(const GeneralizedFactor& h);

// Q_H = S_H / k_H - sum over F < H of Q_F, in the structure's order.
std::vector<Projector> strata_projectors(const PosetBlockStructure& s, const Options& opt = {});

// eta_H = sum over F >= H of k_F psi_F (indices follow the structure's order).
std::vector<double> spectral_from_canonical(const PosetBlockStructure& s, const std::vector<double>& psi);
std::vector<double> canonical_from_spectral(const PosetBlockStructure& s, const std::vector<double>& eta);

// Max-norm of Q^2 - Q, exact below `full_limit` units, randomized probes above it.
double idempotency_defect(const Mat& q, int full_limit = 200);

}  // namespace tiered
