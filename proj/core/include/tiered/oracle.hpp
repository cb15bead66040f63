#pragma once

#include "tiered/estimation.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace tiered {

// Permute the levels of each factor independently within every combination of the original
// levels of the factors it is nested in. The automatic Units factor is nested in all others.
class RandomizationScheme {
 public:
  RandomizationScheme() = default;
  explicit RandomizationScheme(const PosetBlockStructure& s);

  int units() const { return n_; }
  // perm[u] is the unit that u is sent to.
  std::vector<int> draw(std::mt19937_64& rng) const;

 private:
  struct Step {
    std::vector<int> level;                      // per unit
    std::vector<std::vector<int>> group_levels;  // distinct levels per ancestor combination
    std::vector<int> group;                      // per unit
  };
  int n_ = 0;
  std::vector<Step> steps_;
  std::vector<std::int64_t> radix_;
  std::vector<std::pair<std::int64_t, int>> lookup_;  // sorted tuple code -> unit
};

std::vector<int> random_permutation(const RandomizationScheme& scheme, std::uint64_t seed);

// Response generator for a chain: tier effects with covariance sum eta_H Q_H, permuted
// within each tier, composed through the design maps, plus treatment effects.
class ResponseModel {
 public:
  // `spectral` is indexed like AnovaTable::components; `tau` has one value per treatment.
  ResponseModel(const ExperimentChain& chain, const AnovaTable& table, const Vec& spectral, const Vec& tau);

  Vec draw(std::mt19937_64& rng) const;
  const Vec& mean() const { return mu_; }  // X tau on the observational units

 private:
  const ExperimentChain* chain_;
  std::vector<Mat> root_;  // per unit tier, sum sqrt(eta_H) Q_H
  std::vector<RandomizationScheme> schemes_;
  Vec mu_;
};

struct PartCheck {
  int part = -1;
  std::string label;
  int df = 0;
  double expected = 0.0;  // EMS at the true components plus the treatment term
  double mean = 0.0;
  double se = 0.0;
  bool pass = false;
};

struct ContrastCheck {
  int part = -1;
  std::string label;
  int first = 0, second = 0;  // treatments compared
  double expected_mean = 0.0;
  double mean = 0.0;
  double mean_se = 0.0;
  double expected_variance = 0.0;
  double variance = 0.0;
  bool pass = false;
};

struct SimulationReport {
  long draws = 0;
  std::uint64_t seed = 0;
  double ms_sigmas = 3.0;
  double variance_rel_tol = 0.02;
  std::vector<PartCheck> parts;
  std::vector<ContrastCheck> contrasts;

  bool pass() const;
  std::string text() const;
  std::vector<std::string> records() const;  // JSON lines
};

struct SimulationOptions {
  long draws = 100000;
  std::uint64_t seed = 1;
  int threads = 0;          // 0: hardware concurrency
  long chunk = 4096;        // draws per independently seeded stream
  double ms_sigmas = 3.0;
  double variance_rel_tol = 0.02;
};

// Mean squares of every part and, for each stratum estimate, the difference between two
// treatment means, accumulated over draws. Chunks are seeded from (seed, chunk index) and
// combined in chunk order, so results do not depend on the thread count.
SimulationReport simulate(const ExperimentChain& chain, const Decomposition& d, const AnovaTable& table,
                          const Vec& spectral, const Vec& tau, const SimulationOptions& opt = {});

}  // namespace tiered
