#include "golden.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

using namespace tiered;
using tiered::test::load;

TEST(GoldenTable, PublishedTablesReproduced) {
  for (const auto& g : test::golden_tables()) {
    const auto x = load(g.spec);
    for (const auto& m : test::golden_mismatches(g, x.table)) ADD_FAILURE() << m;
  }
}

TEST(GoldenTable, ComparisonDetectsAlteredRows) {
  auto g = test::golden_tables()[2];
  const auto x = load(g.spec);
  g.rows[3].eff2 = "1/9";
  g.rows[9].src[1] = "R#C";
  EXPECT_EQ(test::golden_mismatches(g, x.table).size(), 2u);
}

namespace {

std::set<std::string> as_set(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

std::set<std::string> sums(const AnovaTable& t, const EstimabilityReport& r) {
  std::set<std::string> out;
  for (const auto& lc : r.confounded_sums) out.insert(lc.text(t.snap_den));
  return out;
}

}  // namespace

TEST(GoldenTable, TwoTierBlockDesign) {
  const auto x = load("rcbd");
  ASSERT_EQ(x.table.rows.size(), 4u);
  EXPECT_EQ(x.table.rows[1].ems.spectral_text(), "ξ_B");
  EXPECT_EQ(x.table.rows[2].ems.spectral_text(), "ξ_BP + q(T)");
  EXPECT_EQ(x.table.rows[3].ems.spectral_text(), "ξ_BP");
  EXPECT_EQ(x.table.rows[3].df, 6);
}

TEST(Rendering, TextTableHasTierColumnsAndTotal) {
  const auto x = load("sensory");
  const auto text = render_table_text(x.table);
  EXPECT_NE(text.find("evaluations sources"), std::string::npos);
  EXPECT_NE(text.find("eff."), std::string::npos);
  EXPECT_NE(text.find("(1/27)q(T)"), std::string::npos);
  EXPECT_NE(text.find("total df 576"), std::string::npos);
}

TEST(Rendering, TermRendering) {
  EmsTerm t{"eta_QC", "η_QC", 1, 0, 1.0 / 3, 12.0};
  EXPECT_EQ(t.render(), "(1/3)12η_QC");
  EmsTerm q{"q(T)", "q(T)", 2, 0, 1.0 / 27, 1.0};
  EXPECT_EQ(q.render(), "(1/27)q(T)");
  EmsTerm c{"phi_O", "φ_O", 0, 0, 1.0, 15.0};
  EXPECT_EQ(c.render(), "15φ_O");
}

TEST(Estimability, MeatloavesSessionsAndBlocksOnlyJointly) {
  const auto x = load("meatloaves");
  const auto r = estimability_report(x.table);
  EXPECT_EQ(sums(x.table, r), (std::set<std::string>{"ξ_S + 12η_B"}));
  const auto est = as_set(r.estimable);
  EXPECT_FALSE(est.count("ξ_S"));
  EXPECT_FALSE(est.count("η_B"));
  EXPECT_EQ(as_set(r.never_estimable), (std::set<std::string>{"ξ_0", "η_0"}));
  EXPECT_FALSE(r.ldcvs);
}

TEST(Estimability, CottonSpectralAndCanonical) {
  const auto x = load("cotton");
  const auto spectral = estimability_report(x.table, false);
  EXPECT_TRUE(spectral.estimable.empty());
  const auto canonical = estimability_report(x.table, true);
  EXPECT_EQ(as_set(canonical.estimable), (std::set<std::string>{"φ_O", "ψ_B", "ψ_BP"}));
  EXPECT_EQ(sums(x.table, canonical), (std::set<std::string>{"φ_OT + ψ_BPF"}));
  EXPECT_EQ(as_set(canonical.never_estimable), (std::set<std::string>{"φ_0", "ψ_0"}));
  EXPECT_FALSE(spectral.ldcvs);
  EXPECT_FALSE(canonical.ldcvs);
}

TEST(Estimability, LdcvsFlag) {
  for (const auto& name : {"meatloaves", "cotton", "sensory"}) EXPECT_FALSE(estimability_report(load(name).table).ldcvs) << name;
  const auto x = load("ldcvs");
  const auto r = estimability_report(x.table);
  ASSERT_TRUE(r.ldcvs);
  ASSERT_EQ(r.dependencies.size(), 1u);
  std::vector<double> dep = r.dependencies[0];
  const double s = dep[0];
  for (auto& v : dep) v /= s;
  EXPECT_EQ(dep.size(), 4u);
  EXPECT_NEAR(dep[0], 1.0, 1e-12);
  EXPECT_NEAR(dep[1], -1.0, 1e-12);
  EXPECT_NEAR(dep[2], -1.0, 1e-12);
  EXPECT_NEAR(dep[3], 1.0, 1e-12);
}

// Without anova applicability only the rows of P*Q enter, which leaves the split units rows out.
TEST(Estimability, SmallExampleRestrictedToPStarQ) {
  const auto x = load("small");
  const auto r = estimability_report(x.table);
  EXPECT_EQ(as_set(r.estimable), (std::set<std::string>{"ξ_BP"}));
  EXPECT_TRUE(as_set(r.never_estimable).count("η_U"));
}

TEST(Canonical, ComponentsPerTier) {
  const auto x = load("cotton");
  std::vector<std::string> ids;
  for (const auto& c : x.table.components) ids.push_back(c.canonical_id);
  EXPECT_EQ(ids, (std::vector<std::string>{"phi_0", "phi_O", "phi_OT", "psi_0", "psi_B", "psi_BP", "psi_BPF"}));
  EXPECT_EQ(spectral_symbol(2), "ζ");
  EXPECT_EQ(canonical_symbol(1, true), "psi");
}
