#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

using namespace tiered;
using tiered::test::component;
using tiered::test::find_row;
using tiered::test::load;

namespace {

Factor factor(const std::string& name, int nlevels, std::vector<int> levels, std::vector<int> nested_in = {}) {
  Factor f;
  f.name = name;
  f.abbrev = name.substr(0, 1);
  f.nlevels = nlevels;
  f.levels = std::move(levels);
  f.nested_in = std::move(nested_in);
  return f;
}

bool preserves(const PosetBlockStructure& s, const std::vector<int>& perm) {
  for (const auto& g : s.generalized_factors()) {
    const Mat rm = relationship_matrix(g).matrix;
    for (int u = 0; u < s.unit_count(); ++u)
      for (int v = 0; v < s.unit_count(); ++v)
        if (rm(u, v) != rm(perm[u], perm[v])) return false;
  }
  return true;
}

}  // namespace

TEST(Randomization, SymmetricGroupOnFourUnits) {
  const PosetBlockStructure s(4, {factor("Units", 4, {0, 1, 2, 3})});
  const RandomizationScheme scheme(s);
  std::mt19937_64 rng(9);
  const int n = 100000;
  Mat count = Mat::Zero(4, 4);
  std::map<std::vector<int>, int> seen;
  for (int i = 0; i < n; ++i) {
    const auto p = scheme.draw(rng);
    for (int u = 0; u < 4; ++u) count(u, p[u]) += 1;
    ++seen[p];
  }
  EXPECT_EQ(seen.size(), 24u);
  const double se = std::sqrt(n * 0.25 * 0.75);
  for (int u = 0; u < 4; ++u)
    for (int v = 0; v < 4; ++v) EXPECT_LT(std::abs(count(u, v) - n / 4.0), 4 * se);
}

// Permuting 4 blocks and 3 plots within each block gives 4! (3!)^4 = 31104 permutations, all
// of which preserve the blocks; the draws are uniform over them.
TEST(Randomization, BlocksAndPlotsGroupOfSmallExample) {
  const auto x = load("small");
  const auto& s = x.chain.tier(0).structure;
  const RandomizationScheme scheme(s);
  std::mt19937_64 rng(21);
  const int n = 100000;
  std::map<std::vector<int>, int> seen;
  const int b = s.find_factor("Blocks");
  const auto& block = s.factors()[b].levels;
  for (int i = 0; i < n; ++i) {
    const auto p = scheme.draw(rng);
    for (int u = 0; u < 12; ++u)
      for (int v = u + 1; v < 12; ++v) ASSERT_EQ(block[u] == block[v], block[p[u]] == block[p[v]]);
    ++seen[p];
  }
  const double cells = 24.0 * 6 * 6 * 6 * 6;
  ASSERT_LE(static_cast<double>(seen.size()), cells);
  // Distinct permutations seen and a chi-square statistic against uniformity.
  const double expected_distinct = cells * (1.0 - std::exp(-n / cells));
  EXPECT_NEAR(static_cast<double>(seen.size()), expected_distinct, 5 * std::sqrt(expected_distinct * std::exp(-n / cells)) + 50);
  const double mean = n / cells;
  double chi2 = 0.0;
  for (const auto& [p, c] : seen) chi2 += (c - mean) * (c - mean) / mean;
  chi2 += (cells - static_cast<double>(seen.size())) * mean;
  EXPECT_LT(std::abs(chi2 - (cells - 1)) / std::sqrt(2 * (cells - 1)), 5.0);
}

TEST(Randomization, DrawsPreserveEveryGeneralizedFactor) {
  for (const auto& name : {"meatloaves", "cotton", "small"}) {
    const auto x = load(name);
    for (const auto& t : x.chain.tiers()) {
      if (t.units() > 216 || t.units() < 2) continue;
      const RandomizationScheme scheme(t.structure);
      for (std::uint64_t seed = 0; seed < 5; ++seed)
        EXPECT_TRUE(preserves(t.structure, random_permutation(scheme, seed))) << name << " " << t.name;
    }
  }
}

TEST(Randomization, SeedsAreReproducible) {
  const auto x = load("meatloaves");
  const RandomizationScheme scheme(x.chain.tier(0).structure);
  EXPECT_EQ(random_permutation(scheme, 77), random_permutation(scheme, 77));
  EXPECT_NE(random_permutation(scheme, 77), random_permutation(scheme, 78));
}

class ResponseMoments : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    x_ = new test::Design(load("small"));
    c_ = Vec(static_cast<Eigen::Index>(x_->table.components.size()));
    c_ << 0.7, 1.6, 0.9, 0.4, 1.2;
    const ResponseModel model(x_->chain, x_->table, c_, Vec::Zero(2));
    std::mt19937_64 rng(1234);
    draws_ = Mat(x_->d.units, kDraws);
    for (int i = 0; i < kDraws; ++i) draws_.col(i) = model.draw(rng);
  }
  static void TearDownTestSuite() { delete x_; }

  // Empirical covariance of a'y and b'y with its standard error.
  static std::pair<double, double> cov(const Vec& a, const Vec& b) {
    const Vec u = draws_.transpose() * a;
    const Vec v = draws_.transpose() * b;
    const Vec uv = (u.array() - u.mean()) * (v.array() - v.mean());
    const double m = uv.mean();
    const double sd = std::sqrt((uv.array() - m).square().sum() / (kDraws - 1));
    return {m, sd / std::sqrt(static_cast<double>(kDraws))};
  }

  static constexpr int kDraws = 100000;
  static test::Design* x_;
  static Vec c_;
  static Mat draws_;
};

test::Design* ResponseMoments::x_ = nullptr;
Vec ResponseMoments::c_;
Mat ResponseMoments::draws_;

TEST_F(ResponseMoments, ComponentOrderMatchesTable) {
  std::vector<std::string> ids;
  for (const auto& c : x_->table.components) ids.push_back(c.id);
  EXPECT_EQ(ids, (std::vector<std::string>{"xi_0", "xi_B", "xi_BP", "eta_0", "eta_U"}));
}

TEST_F(ResponseMoments, CovarianceMatchesVarianceMatrix) {
  const Mat v = variance_matrix(x_->chain, x_->table, c_);
  const int n = x_->d.units;
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) {
      const auto [m, se] = cov(Vec::Unit(n, i), Vec::Unit(n, j));
      EXPECT_LT(std::abs(m - v(i, j)), 5 * se) << i << "," << j;
    }
}

// Parts of one stratum are uncorrelated unless they share a unit-tier source, in which case the
// covariance is r eta_Q P1 Q P2.
TEST_F(ResponseMoments, CovarianceBetweenParts) {
  const Mat v = variance_matrix(x_->chain, x_->table, c_);
  const auto& parts = x_->d.parts;
  int correlated = 0;
  for (std::size_t a = 0; a < parts.size(); ++a)
    for (std::size_t b = a + 1; b < parts.size(); ++b) {
      const Vec u = parts[a].basis.col(0);
      const Vec w = parts[b].basis.col(0);
      const double theory = u.dot(v * w);
      const auto [m, se] = cov(u, w);
      EXPECT_LT(std::abs(m - theory), 5 * se) << a << " " << b;
      if (std::abs(theory) < 1e-12) {
        const double corr = m / std::sqrt(cov(u, u).first * cov(w, w).first);
        EXPECT_LT(std::abs(corr), 4.0 / std::sqrt(static_cast<double>(kDraws)));
      } else {
        ++correlated;
      }
    }
  // The U1 source lies partly in Blocks and partly in Plots[B].
  EXPECT_GT(correlated, 0);
}

TEST(Simulate, SmallExampleRowsAndContrast) {
  const auto x = load("small");
  Vec c = Vec::Constant(static_cast<Eigen::Index>(x.table.components.size()), 1.0);
  c(component(x.table, "eta_U")) = 0.5;
  Vec tau(2);
  tau << 0.0, 1.0;
  SimulationOptions opt;
  opt.draws = 20000;
  opt.seed = 5;
  opt.variance_rel_tol = 0.05;
  const auto rep = simulate(x.chain, x.d, x.table, c, tau, opt);
  EXPECT_TRUE(rep.pass()) << rep.text();
  const int part = find_row(x.table, "Blocks / U1 / Treatments")->part;
  bool found = false;
  for (const auto& p : rep.parts)
    if (p.part == part) {
      found = true;
      // xi_B + (1/9) 3 eta_U + (1/9) q(T), with q(T) = 12 (1/2)^2 for tau = (0, 1).
      EXPECT_NEAR(p.expected, 1.0 + 3 * 0.5 / 9 + 3.0 / 9, 1e-12);
    }
  EXPECT_TRUE(found);
  const int within = find_row(x.table, "Plots[B] / U1 / Treatments")->part;
  for (const auto& k : rep.contrasts)
    if (k.part == within) EXPECT_NEAR(k.expected_variance, 2.0 / 6 * (1.0 + 8.0 / 3 * 0.5) / (8.0 / 9), 1e-12);
}

TEST(Simulate, ThreadCountDoesNotChangeResults) {
  const auto x = load("small");
  const Vec c = Vec::Constant(static_cast<Eigen::Index>(x.table.components.size()), 1.0);
  SimulationOptions opt;
  opt.draws = 6000;
  opt.chunk = 1000;
  opt.threads = 1;
  const auto one = simulate(x.chain, x.d, x.table, c, Vec::Zero(2), opt);
  opt.threads = 3;
  const auto three = simulate(x.chain, x.d, x.table, c, Vec::Zero(2), opt);
  ASSERT_EQ(one.parts.size(), three.parts.size());
  for (std::size_t i = 0; i < one.parts.size(); ++i) {
    EXPECT_EQ(one.parts[i].mean, three.parts[i].mean);
    EXPECT_EQ(one.parts[i].se, three.parts[i].se);
  }
}

TEST(Simulate, MeatloavesTreatmentRowsCarryTwelveEtaBM) {
  const auto x = load("meatloaves");
  Vec c = Vec::Constant(static_cast<Eigen::Index>(x.table.components.size()), 1.0);
  c(component(x.table, "eta_BM")) = 0.25;
  SimulationOptions opt;
  opt.draws = 3000;
  opt.seed = 3;
  opt.variance_rel_tol = 0.1;
  const auto rep = simulate(x.chain, x.d, x.table, c, Vec::Zero(6), opt);
  EXPECT_TRUE(rep.pass()) << rep.text();
  const int part = find_row(x.table, "P#T[S] / Meatloaves[B] / Rosemary")->part;
  for (const auto& p : rep.parts)
    if (p.part == part) EXPECT_NEAR(p.expected, 1.0 + 12 * 0.25, 1e-12);
}

TEST(Simulate, NegativeComponentsAreRejected) {
  const auto x = load("small");
  Vec c = Vec::Constant(static_cast<Eigen::Index>(x.table.components.size()), 1.0);
  c(component(x.table, "eta_U")) = -0.5;
  EXPECT_THROW(simulate(x.chain, x.d, x.table, c, Vec::Zero(2), {}), Error);
}
