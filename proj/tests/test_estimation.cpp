#include "support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

using namespace tiered;
using tiered::test::component;
using tiered::test::find_row;
using tiered::test::load;

namespace {

Vec normal_vector(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  Vec y(n);
  for (auto& v : y) v = z(rng);
  return y;
}

Mat part_projector(const Decomposition& d, int part) { return d.parts[part].basis * d.parts[part].basis.transpose(); }

int part_of(const AnovaTable& t, const std::string& label) {
  const auto* r = find_row(t, label);
  EXPECT_NE(r, nullptr) << label;
  return r ? r->part : -1;
}

// Columns of the observational-unit design matrix for treatments, built from the response model mean.
Mat treatment_design(const test::Design& x) {
  const int nt = x.chain.tier(x.chain.levels() - 1).units();
  const Vec zero = Vec::Zero(static_cast<Eigen::Index>(x.table.components.size()));
  Mat out(x.d.units, nt);
  for (int t = 0; t < nt; ++t) {
    Vec tau = Vec::Zero(nt);
    tau(t) = 1.0;
    out.col(t) = ResponseModel(x.chain, x.table, zero, tau).mean();
  }
  return out;
}

Vec positive_components(const AnovaTable& t, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.2, 3.0);
  Vec c(static_cast<Eigen::Index>(t.components.size()));
  for (auto& v : c) v = u(rng);
  return c;
}

const EffectEstimate& effect(const FitResult& f, const std::string& label) {
  for (const auto& e : f.effects)
    if (e.label == label) return e;
  throw std::runtime_error("no effect " + label);
}

}  // namespace

TEST(MeanSquares, SumOverPartsIsTotal) {
  for (const auto& name : {"small", "meatloaves", "sensory"}) {
    const auto x = load(name);
    const Vec y = normal_vector(x.d.units, 3);
    double total = 0.0;
    for (const auto& m : project_mean_squares(y, x.d)) {
      total += m.ss;
      EXPECT_NEAR(m.ms * m.df, m.ss, 1e-12 * std::max(1.0, m.ss));
    }
    EXPECT_NEAR(total, y.squaredNorm(), 1e-9 * y.squaredNorm()) << name;
  }
}

TEST(MeanSquares, ConstantResponseLivesInTheMean) {
  const auto x = load("small");
  const Vec y = Vec::Constant(x.d.units, 2.5);
  for (const auto& m : project_mean_squares(y, x.d)) {
    const bool mean = x.d.parts[m.part].path[0] == 0;
    EXPECT_NEAR(m.ss, mean ? 12 * 6.25 : 0.0, 1e-10);
  }
}

TEST(EmsSolver, SquareSystemIsExact) {
  EmsSystem sys;
  sys.a = Mat(2, 2);
  sys.a << 1, 12, 1, 0;
  sys.ms = Vec(2);
  sys.ms << 5, 2;
  sys.df = Vec(2);
  sys.df << 10, 150;
  sys.rows = {0, 1};
  sys.ids = {"xi", "eta"};
  const auto est = ems_solver(sys);
  EXPECT_NEAR(est.spectral(0), 2.0, 1e-12);
  EXPECT_NEAR(est.spectral(1), 0.25, 1e-12);
  EXPECT_TRUE(est.defects.empty());
  const auto same = enforce_nonnegativity(est, sys);
  EXPECT_TRUE(same.constrained_zero.empty());
  EXPECT_NEAR(same.spectral(1), 0.25, 1e-12);
}

// Rows xi1 + eta1, xi1 + eta2, xi2 + eta1, xi2 + eta2.
TEST(EmsSolver, FourRowDependencyGivesDefect) {
  EmsSystem sys;
  sys.a = Mat(4, 4);
  sys.a << 1, 0, 1, 0, 1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 0, 1;
  sys.ms = Vec(4);
  sys.ms << 1.0, 2.0, 4.0, 3.5;
  sys.df = Vec::Constant(4, 2.0);
  sys.rows = {0, 1, 2, 3};
  sys.ids = {"xi1", "xi2", "eta1", "eta2"};
  const auto est = ems_solver(sys);
  ASSERT_EQ(est.defects.size(), 1u);
  EXPECT_NEAR(est.defects[0], 1.0 + 3.5 - 2.0 - 4.0, 1e-12);
  // The least-squares fit spreads the defect equally over the four rows.
  const Vec fitted = sys.a * est.spectral;
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(std::abs(fitted(i) - sys.ms(i)), 1.5 / 4, 1e-12);
}

TEST(EmsSolver, LdcvsDesignReportsDefect) {
  const auto x = load("ldcvs");
  const Vec y = normal_vector(x.d.units, 17);
  const auto ms = project_mean_squares(y, x.d);
  const auto msof = [&](const std::string& label) {
    const int p = part_of(x.table, label);
    for (const auto& m : ms)
      if (m.part == p) return m.ms;
    return std::nan("");
  };
  const double expected = msof("Blocks / A") + msof("Plots[B] / Columns[R]⊢Bp[A]") - msof("Blocks / Bp[A]") -
                          msof("Plots[B] / Rows⊢A");
  const auto est = ems_solver(residual_system(x.table, ms));
  ASSERT_EQ(est.defects.size(), 1u);
  EXPECT_NEAR(est.defects[0], expected, 1e-10);
  EXPECT_TRUE(estimability_report(x.table).ldcvs);
}

class NegativeComponent : public ::testing::Test {
 protected:
  // Random data with the 10-df residual rescaled so its mean square is `ratio` times the 150-df one.
  static Vec engineered(const test::Design& x, double ratio) {
    Vec y = normal_vector(x.d.units, 29);
    const int p10 = part_of(x.table, "P#T[S] / Meatloaves[B] / Residual");
    const int p150 = part_of(x.table, "P#T[S] / Residual");
    const Mat m10 = part_projector(x.d, p10);
    const Vec y10 = m10 * y;
    const double ms10 = y10.squaredNorm() / 10.0;
    const double ms150 = (part_projector(x.d, p150) * y).squaredNorm() / 150.0;
    return y - y10 + std::sqrt(ratio * ms150 / ms10) * y10;
  }
};

TEST_F(NegativeComponent, ResidualsPooledWhenEtaWouldBeNegative) {
  const auto x = load("meatloaves");
  const Vec y = engineered(x, 0.5);
  const double ss10 = (part_projector(x.d, part_of(x.table, "P#T[S] / Meatloaves[B] / Residual")) * y).squaredNorm();
  const double ss150 = (part_projector(x.d, part_of(x.table, "P#T[S] / Residual")) * y).squaredNorm();
  ASSERT_LT(ss10 / 10, ss150 / 150);
  const auto fit = anova_fit(y, x.chain, x.d, x.table);
  const auto& c = fit.components;
  EXPECT_EQ(c.value("eta_BM"), 0.0);
  EXPECT_NE(std::find(c.constrained_zero.begin(), c.constrained_zero.end(), "eta_BM"), c.constrained_zero.end());
  EXPECT_NEAR(c.value("xi_SPT"), (ss10 + ss150) / 160.0, 1e-14 * ss150);
}

TEST_F(NegativeComponent, NoConstraintWhenOrdered) {
  const auto x = load("meatloaves");
  const Vec y = engineered(x, 3.0);
  const auto fit = anova_fit(y, x.chain, x.d, x.table);
  const auto& c = fit.components;
  EXPECT_TRUE(c.constrained_zero.empty());
  EXPECT_NEAR(c.value("eta_BM"), 2.0 * c.value("xi_SPT") / 12.0, 1e-12);
}

TEST(Anova, OrthogonalDesignGivesProjectedData) {
  const auto x = load("rcbd");
  const Vec y = normal_vector(x.d.units, 8);
  const auto fit = anova_fit(y, x.chain, x.d, x.table);
  const int L = x.chain.levels() - 1;
  for (std::size_t j = 0; j < x.chain.tier(L).sources.size(); ++j) {
    const auto& label = x.chain.tier(L).sources[j].label;
    const Vec ry = x.chain.pushed(L, static_cast<int>(j)) * y;
    EXPECT_LT(max_abs(effect(fit, label).effect - ry), 1e-10) << label;
  }
}

TEST(Anova, NotApplicableChainIsRejected) {
  const auto x = load("small");
  EXPECT_THROW(anova_fit(normal_vector(x.d.units, 1), x.chain, x.d, x.table), ApplicabilityError);
}

// Variance of the within-blocks estimate: (xi_BP + (8/3) eta_U) / (8/9) per unit of R.
TEST(StratumEstimate, WithinBlocksVarianceOfSmallExample) {
  const auto x = load("small");
  Vec c = Vec::Constant(static_cast<Eigen::Index>(x.table.components.size()), 1.0);
  c(component(x.table, "xi_BP")) = 1.3;
  c(component(x.table, "eta_U")) = 0.4;
  const int part = part_of(x.table, "Plots[B] / U1 / Treatments");
  const auto e = stratum_estimate(normal_vector(x.d.units, 2), x.chain, x.d, x.table, part, &c);
  EXPECT_NEAR(e.efficiency, 8.0 / 9, 1e-12);
  EXPECT_NEAR(e.variance, (1.3 + 8.0 / 3 * 0.4) / (8.0 / 9), 1e-12);
  EXPECT_NEAR(e.variance * 2.0 / 6, 2.0 / 6 * (1.3 + 8.0 / 3 * 0.4) / (8.0 / 9), 1e-12);
}

TEST(StratumEstimate, UnbiasedUnderNullTreatments) {
  const auto x = load("small");
  const Vec c = Vec::Constant(static_cast<Eigen::Index>(x.table.components.size()), 1.0);
  const ResponseModel model(x.chain, x.table, c, Vec::Zero(2));
  const int part = part_of(x.table, "Plots[B] / U1 / Treatments");
  std::mt19937_64 rng(44);
  const int n = 4000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto e = stratum_estimate(model.draw(rng), x.chain, x.d, x.table, part, &c);
    const double diff = e.treatment_values(1) - e.treatment_values(0);
    sum += diff;
    sum2 += diff * diff;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sum2 / n - mean * mean) / n);
  EXPECT_LT(std::abs(mean), 3 * se);
}

// Dense GLS oracle: effect of R is R X (X' V^-1 X)^- X' V^-1 y.
TEST(Gls, KnownComponentsMatchDenseGls) {
  for (const auto& name : {"small", "meatloaves", "rcbd"}) {
    const auto x = load(name);
    std::mt19937_64 rng(12);
    const Vec c = positive_components(x.table, rng);
    const Vec y = normal_vector(x.d.units, 5);
    const Mat v = variance_matrix(x.chain, x.table, c);
    const Mat vinv = v.inverse();
    const Mat xm = treatment_design(x);
    const Mat info = xm.transpose() * vinv * xm;
    const Vec mu = xm * info.completeOrthogonalDecomposition().solve(xm.transpose() * vinv * y);
    const auto fit = gls_fit(y, x.chain, x.d, x.table, c);
    const int L = x.chain.levels() - 1;
    for (std::size_t j = 0; j < x.chain.tier(L).sources.size(); ++j) {
      const auto& src = x.chain.tier(L).sources[j];
      EXPECT_LT(max_abs(effect(fit, src.label).effect - x.chain.pushed(L, static_cast<int>(j)) * mu), 1e-9)
          << name << " " << src.label;
    }
  }
}

TEST(Gls, ClosedFormInverseOnSmallExample) {
  const auto x = load("small");
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const Vec c = positive_components(x.table, rng);
    const Mat v = variance_matrix(x.chain, x.table, c);
    worst = std::max(worst, max_abs(closed_form_inverse(x.chain, x.table, c) * v - Mat::Identity(v.rows(), v.cols())));
  }
  EXPECT_LT(worst, 1e-8);
}

TEST(Combine, GlsAtConvergedComponentsReproducesEstimates) {
  for (const auto& name : {"small", "meatloaves", "wheat"}) {
    const auto x = load(name);
    std::mt19937_64 rng(31);
    const Vec truth = positive_components(x.table, rng);
    const int nt = x.chain.tier(x.chain.levels() - 1).units();
    Vec tau(nt);
    for (int t = 0; t < nt; ++t) tau(t) = 0.3 * t;
    const Vec y = ResponseModel(x.chain, x.table, truth, tau).draw(rng);
    const auto comb = combine_information(y, x.chain, x.d, x.table);
    EXPECT_TRUE(comb.components.converged) << name;
    const auto gls = gls_fit(y, x.chain, x.d, x.table, comb.components.spectral);
    for (const auto& e : comb.effects) EXPECT_LT(max_abs(effect(gls, e.label).effect - e.effect), 1e-8) << name << " " << e.label;
  }
}

TEST(Combine, ConvergedComponentsAreAFixedPoint) {
  for (const auto& name : {"small", "meatloaves"}) {
    const auto x = load(name);
    std::mt19937_64 rng(7);
    const Vec truth = positive_components(x.table, rng);
    const int nt = x.chain.tier(x.chain.levels() - 1).units();
    const Vec y = ResponseModel(x.chain, x.table, truth, Vec::Zero(nt)).draw(rng);
    const auto first = combine_information(y, x.chain, x.d, x.table);
    const auto again = combine_information(y, x.chain, x.d, x.table, &first.components);
    for (Eigen::Index i = 0; i < first.components.spectral.size(); ++i) {
      const double a = first.components.spectral(i);
      EXPECT_NEAR(again.components.spectral(i), a, 1e-8 * std::max(1.0, std::abs(a))) << name;
    }
  }
}

TEST(Combine, OrthogonalDesignMatchesStratumEstimates) {
  const auto x = load("rcbd");
  const Vec y = normal_vector(x.d.units, 40);
  const auto anova = anova_fit(y, x.chain, x.d, x.table);
  const auto comb = combine_information(y, x.chain, x.d, x.table);
  for (const auto& e : anova.effects) EXPECT_LT(max_abs(effect(comb, e.label).effect - e.effect), 1e-10);
}
