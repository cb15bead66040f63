#pragma once

#include "tiered/chain.hpp"

#include <optional>
#include <string>
#include <vector>

namespace tiered {

struct EfficiencyTable {
  std::vector<std::string> upper;
  std::vector<std::string> lower;
  Mat lambda;  // upper x lower
  std::vector<std::vector<std::optional<Rational>>> rational;
  bool balanced = true;
  std::string offending_upper;
  std::string offending_lower;
  std::vector<double> spectrum;  // eigenvalues of R Q R for the offending pair

  double at(const std::string& up, const std::string& low) const;
};

// For each pair, R Q R = lambda R with lambda = tr(RQR)/tr(R); also requires R1 Q R2 = 0.
EfficiencyTable efficiency_factors(const std::vector<Projector>& upper, const std::vector<Projector>& lower,
                                   const Options& opt = {});

constexpr int kNone = -1;      // no information from this tier: the part passes through unchanged
constexpr int kResidual = -2;  // residual after removing every source of this tier

struct Part {
  Mat basis;  // orthonormal columns spanning the part on the observational units
  int rank = 0;
  std::vector<int> path;    // source index per level, or kNone / kResidual
  std::vector<double> eff;  // efficiency factor per level; eff[0] = 1, 0 where path is not a source
  std::string provenance;   // "P", "(P▷Q)▷R", "(P▷Q)⊢𝓡", ...
  bool in_pstar_q = false;

  Mat matrix() const { return basis * basis.transpose(); }
  // Number of levels the part has been refined through (the index of its last source + 1).
  int depth() const;
};

struct ApplicabilityReport {
  enum class Kind { Full, Partial, NotApplicable };
  Kind kind = Kind::Full;
  std::vector<std::string> offending;        // treatment-bearing sources outside Q1
  std::vector<std::string> split_treatments; // e.g. "Trellis in 3 parts"
  std::string describe() const;
};

struct LevelInfo {
  std::vector<std::string> labels;
  std::vector<int> component;  // stratum index carried by each source
  std::vector<int> ranks;
  std::vector<std::string> qlabels;
  std::vector<std::string> titles;
  int replication = 1;
};

struct Decomposition {
  int levels = 0;
  int units = 0;
  std::vector<LevelInfo> info;
  std::vector<Part> parts;                 // final parts, in table order
  std::vector<std::vector<int>> q1;        // per level: sources in Q1
  std::vector<std::vector<int>> c_map;     // per level: source -> part index at the previous level (-1 if none)
  std::vector<int> pstar_q;                // indices of final parts lying in P*Q
  ApplicabilityReport applicability;

  // Groups of final parts sharing a path up to the last unit tier, in order.
  struct Group {
    std::vector<int> path;   // prefix up to the last unit tier
    std::vector<int> parts;  // final parts in this group
    bool in_pstar_q = false;
  };
  std::vector<Group> groups;

  std::string label(int part, int level) const;
};

// Refines each upper projector by the lower family; requires a balanced table.
Decomposition refine(const std::vector<Projector>& upper, const std::vector<Projector>& lower,
                     const EfficiencyTable& eff, const Options& opt = {});

Decomposition chain_decompose(const ExperimentChain& chain);

ApplicabilityReport anova_applicability(const Decomposition& d);

}  // namespace tiered
