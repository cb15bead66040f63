#pragma once

#include "tiered/structure.hpp"

#include <string>
#include <vector>

namespace tiered {

struct DesignMap {
  std::string name;
  int source_units = 0;
  int target_units = 0;
  std::vector<int> assignment;  // target index for each source unit

  Mat design_matrix() const { return tiered::design_matrix(assignment, target_units); }
  std::vector<int> counts() const;
};

struct Replication {
  bool equal = true;
  int r = 0;                // common replication when equal
  std::vector<int> counts;  // per target unit (the diagonal of D)
};

// Intermediate maps must be equireplicate; the treatment map may not be.
Replication check_equireplicate(const DesignMap& m, bool treatment_map = false);

// r^-1 X Q X'.
Projector push_idempotent(const Projector& q, const DesignMap& m, int r);

// X R (R D R)^- R X' for each R, checked to be mutually orthogonal idempotents.
std::vector<Projector> treatment_idempotents(const std::vector<Projector>& family, const DesignMap& h,
                                             const Options& opt = {});

// A pseudo term: one or more factor products whose effects are summed. Each product lists
// factors in written order.
struct TermSpec {
  std::string name;    // empty when the label is derived from a single product
  std::string abbrev;  // treatment quadratic-form label override
  std::vector<std::vector<int>> products;
};

// Projector on the effect of a factor product: the span of its classes minus the spans of
// the products formed by its proper subsets that respect nesting.
Mat product_effect(const PosetBlockStructure& s, const std::vector<int>& product);
Mat product_effect_basis(const PosetBlockStructure& s, const std::vector<int>& product);

enum class SourceKind { Stratum, Pseudo, PseudoResidual };

struct Source {
  std::string label;
  Mat matrix;  // on the tier's own units
  int rank = 0;
  int stratum = 0;       // generalized factor whose component the source carries
  SourceKind kind = SourceKind::Stratum;
  std::string qlabel;    // label inside q(.) for treatment sources
  std::string ascii;     // plain identifier used in structured output
  std::string title;     // label with factor titles, for prose reports
};

struct PseudofactorSplit {
  std::string parent_source;
  int parent_stratum = 0;
  std::vector<Projector> sub_idempotents;  // declared terms, then the residual when nonzero
  bool shared_component = true;
};

struct Tier {
  std::string name;
  PosetBlockStructure structure;
  std::vector<TermSpec> terms;

  // Filled by the chain.
  std::vector<Projector> strata;
  std::vector<Source> sources;
  std::vector<PseudofactorSplit> splits;
  int units() const { return structure.unit_count(); }
};

class ExperimentChain {
 public:
  ExperimentChain() = default;
  // tiers[0] is the observational tier, tiers.back() the treatments; maps[i] goes from tier i
  // to tier i+1.
  ExperimentChain(std::vector<Tier> tiers, std::vector<DesignMap> maps, const Options& opt = {});

  int levels() const { return static_cast<int>(tiers_.size()); }
  int treatment_level() const { return levels() - 1; }
  const std::vector<Tier>& tiers() const { return tiers_; }
  const Tier& tier(int l) const { return tiers_[l]; }
  const std::vector<DesignMap>& maps() const { return maps_; }
  int observational_units() const { return tiers_[0].units(); }

  // Replication of tier l's units on the observational tier (1 for tier 0).
  int replication(int l) const { return replication_[l]; }
  // Composed assignment from observational units to tier l.
  const std::vector<int>& assignment(int l) const { return assign_[l]; }
  // Observational units per unit of tier l.
  const std::vector<int>& counts(int l) const { return counts_[l]; }
  // Kernel B with X B X' the source pushed to the observational tier.
  const Mat& kernel(int l, int source) const { return kernels_[l][source]; }
  Mat pushed(int l, int source) const;
  // E with X E an orthonormal basis of the pushed source (columns = its rank).
  const Mat& tier_basis(int l, int source) const { return bases_[l][source]; }
  Mat pushed_basis(int l, int source) const { return expand_rows(bases_[l][source], assign_[l]); }
  const Options& options() const { return opt_; }

 private:
  std::vector<Tier> tiers_;
  std::vector<DesignMap> maps_;
  std::vector<int> replication_;
  std::vector<std::vector<int>> assign_;
  std::vector<std::vector<int>> counts_;
  std::vector<std::vector<Mat>> kernels_;
  std::vector<std::vector<Mat>> bases_;
  Options opt_;
};

// Builds strata, pseudo splits and sources for one tier.
void build_sources(Tier& t, bool treatment_tier, const Options& opt);

}  // namespace tiered
