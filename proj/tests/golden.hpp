#pragma once

#include "support.hpp"

#include <array>
#include <map>
#include <string>
#include <vector>

namespace tiered::test {

// One row of a published skeleton table: sources per tier ("" where the row has none),
// the df of each entry, efficiencies of tiers 1 and 2 ("" when blank), the EMS and, where
// the table has one, the canonical EMS.
struct Golden {
  std::array<std::string, 3> src;
  std::array<int, 3> df;
  std::string eff1, eff2, ems, canonical = "";
};

struct GoldenTable {
  std::string spec;
  bool canonical = false;
  std::vector<Golden> rows;
};

// Labels here follow the published tables; the library writes subscripts and crossed products
// in declaration order, which differs in two places.
inline std::string house_style(std::string s) {
  const std::map<std::string, std::string> swaps = {{"ξ_STP", "ξ_SPT"}, {"R#Q", "Q#R"}};
  for (const auto& [from, to] : swaps)
    for (auto at = s.find(from); at != std::string::npos; at = s.find(from, at + to.size())) s.replace(at, from.size(), to);
  return s;
}

inline const std::vector<GoldenTable>& golden_tables() {
  static const std::vector<GoldenTable> tables = {
      {"meatloaves", false, {
        {{"Mean", "Mean", "Mean"}, {1, 1, 1}, "1", "1", "ξ_0 + 12η_0 + q_0"},
        {{"Sessions", "Blocks", ""}, {2, 2, 0}, "1", "", "ξ_S + 12η_B"},
        {{"Panellists[S]", "", ""}, {33, 0, 0}, "", "", "ξ_SP"},
        {{"Time-orders[S]", "", ""}, {15, 0, 0}, "", "", "ξ_ST"},
        {{"P#T[S]", "Meatloaves[B]", "Rosemary"}, {165, 15, 1}, "1", "1", "ξ_STP + 12η_BM + q(R)"},
        {{"P#T[S]", "Meatloaves[B]", "Irradiation"}, {165, 15, 2}, "1", "1", "ξ_STP + 12η_BM + q(I)"},
        {{"P#T[S]", "Meatloaves[B]", "R#I"}, {165, 15, 2}, "1", "1", "ξ_STP + 12η_BM + q(RI)"},
        {{"P#T[S]", "Meatloaves[B]", "Residual"}, {165, 15, 10}, "1", "", "ξ_STP + 12η_BM"},
        {{"P#T[S]", "Residual", ""}, {165, 150, 0}, "", "", "ξ_STP"},
      }},
      {"cotton", true, {
        {{"Mean", "Mean", "Mean"}, {1, 1, 1}, "1", "1", "ξ_0 + η_0 + q_0",
         "φ_OT + 15φ_O + 30φ_0 + ψ_BPF + 2ψ_BP + 10ψ_B + 30ψ_0 + q_0"},
        {{"Operatives", "F1", ""}, {1, 1, 0}, "1", "", "ξ_O + η_BPF", "φ_OT + 15φ_O + ψ_BPF"},
        {{"Tests[O]", "Blocks", ""}, {28, 2, 0}, "1", "", "ξ_OT + η_B", "φ_OT + ψ_BPF + 2ψ_BP + 10ψ_B"},
        {{"Tests[O]", "Plots[B]", "K"}, {28, 12, 4}, "1", "1", "ξ_OT + η_BP + q(K)",
         "φ_OT + ψ_BPF + 2ψ_BP + q(K)"},
        {{"Tests[O]", "Plots[B]", "Residual"}, {28, 12, 8}, "1", "", "ξ_OT + η_BP", "φ_OT + ψ_BPF + 2ψ_BP"},
        {{"Tests[O]", "Fibres[P∧B]⊢F1", ""}, {28, 14, 0}, "1", "", "ξ_OT + η_BPF", "φ_OT + ψ_BPF"},
      }},
      {"sensory", false, {
        {{"Mean", "Mean", "Mean"}, {1, 1, 1}, "1", "1", "ξ_0 + 12η_0 + q_0"},
        {{"O", "Q", ""}, {1, 1, 0}, "1", "", "ξ_O + 12η_Q"},
        {{"I[O]", "", ""}, {4, 0, 0}, "", "", "ξ_OI"},
        {{"S[O∧I]", "C[Q]", "T"}, {18, 6, 3}, "1/3", "1/27", "ξ_OIS + (1/3)12η_QC + (1/27)q(T)"},
        {{"S[O∧I]", "C[Q]", "Residual"}, {18, 6, 3}, "1/3", "", "ξ_OIS + (1/3)12η_QC"},
        {{"S[O∧I]", "Residual", ""}, {18, 12, 0}, "", "", "ξ_OIS"},
        {{"J", "", ""}, {5, 0, 0}, "", "", "ξ_J"},
        {{"O#J", "", ""}, {5, 0, 0}, "", "", "ξ_OJ"},
        {{"I#J[O]", "R", ""}, {20, 2, 0}, "1", "", "ξ_OIJ + 12η_R"},
        {{"I#J[O]", "R#Q", ""}, {20, 2, 0}, "1", "", "ξ_OIJ + 12η_QR"},
        {{"I#J[O]", "Residual", ""}, {20, 16, 0}, "", "", "ξ_OIJ"},
        {{"S#J[O∧I]", "C[Q]", "T"}, {90, 6, 3}, "2/3", "2/27", "ξ_OISJ + (2/3)12η_QC + (2/27)q(T)"},
        {{"S#J[O∧I]", "C[Q]", "Residual"}, {90, 6, 3}, "2/3", "", "ξ_OISJ + (2/3)12η_QC"},
        {{"S#J[O∧I]", "R#C[Q]", "T"}, {90, 12, 3}, "1", "8/9", "ξ_OISJ + 12η_QRC + (8/9)q(T)"},
        {{"S#J[O∧I]", "R#C[Q]", "Residual"}, {90, 12, 9}, "1", "", "ξ_OISJ + 12η_QRC"},
        {{"S#J[O∧I]", "Residual", ""}, {90, 72, 0}, "", "", "ξ_OISJ"},
        {{"P[O∧I∧S∧J]", "H[Q∧R∧C]", "M"}, {432, 24, 1}, "1", "1", "ξ_OISJP + 12η_QRCH + q(M)"},
        {{"P[O∧I∧S∧J]", "H[Q∧R∧C]", "T#M"}, {432, 24, 3}, "1", "1", "ξ_OISJP + 12η_QRCH + q(TM)"},
        {{"P[O∧I∧S∧J]", "H[Q∧R∧C]", "Residual"}, {432, 24, 20}, "1", "", "ξ_OISJP + 12η_QRCH"},
        {{"P[O∧I∧S∧J]", "Residual", ""}, {432, 408, 0}, "", "", "ξ_OISJP"},
      }},
      {"wheat", false, {
        {{"Mean", "Mean", "Mean"}, {1, 1, 1}, "1", "1", "ξ_0 + η_0 + q_0"},
        {{"Occasions", "S1", ""}, {1, 1, 0}, "1", "", "ξ_O + η_BPS"},
        {{"Intervals[O]", "Blocks", ""}, {6, 3, 0}, "1", "", "ξ_OI + η_B"},
        {{"Intervals[O]", "S1#B", ""}, {6, 3, 0}, "1", "", "ξ_OI + η_BPS"},
        {{"Runs[O∧I]", "P1[B]", "Lines_R"}, {48, 24, 24}, "1", "1/4", "ξ_OIR + η_BP + (1/4)q(L_R)"},
        {{"Runs[O∧I]", "S1#P1[B]", ""}, {48, 24, 0}, "1", "", "ξ_OIR + η_BPS"},
        {{"Times[O∧I]", "P2[B]", "Lines_T"}, {48, 24, 24}, "1", "1/4", "ξ_OIT + η_BP + (1/4)q(L_T)"},
        {{"Times[O∧I]", "S1#P2[B]", ""}, {48, 24, 0}, "1", "", "ξ_OIT + η_BPS"},
        {{"R#T[O∧I]", "Plots[B]⊢", "Lines_R"}, {288, 144, 24}, "1", "3/4", "ξ_OIRT + η_BP + (3/4)q(L_R)"},
        {{"R#T[O∧I]", "Plots[B]⊢", "Lines_T"}, {288, 144, 24}, "1", "3/4", "ξ_OIRT + η_BP + (3/4)q(L_T)"},
        {{"R#T[O∧I]", "Plots[B]⊢", "Residual"}, {288, 144, 96}, "1", "", "ξ_OIRT + η_BP"},
        {{"R#T[O∧I]", "Samples[B∧P]⊢", ""}, {288, 144, 0}, "1", "", "ξ_OIRT + η_BPS"},
      }},
      {"small", false, {
        {{"Mean", "Mean", "Mean"}, {1, 1, 1}, "1", "1", "ξ_0 + 3η_0 + q_0"},
        {{"Blocks", "U1", "Treatments"}, {3, 1, 1}, "1/9", "1/9", "ξ_B + (1/9)3η_U + (1/9)q(T)"},
        {{"Blocks", "U⊢U1", ""}, {3, 2, 0}, "5/9", "", "ξ_B + (5/9)3η_U"},
        {{"Plots[B]", "U1", "Treatments"}, {8, 1, 1}, "8/9", "8/9", "ξ_BP + (8/9)3η_U + (8/9)q(T)"},
        {{"Plots[B]", "U⊢U1", ""}, {8, 2, 0}, "4/9", "", "ξ_BP + (4/9)3η_U"},
        {{"Plots[B]", "Residual", ""}, {8, 5, 0}, "", "", "ξ_BP"},
      }},
  };
  return tables;
}

// Differences between a generated table and its golden rows, one line each.
inline std::vector<std::string> golden_mismatches(const GoldenTable& g, const AnovaTable& t) {
  std::vector<std::string> out;
  const auto eff = [](const std::optional<double>& e) { return e ? format_number(*e) : std::string(); };
  if (t.rows.size() != g.rows.size()) {
    out.push_back(g.spec + ": " + std::to_string(t.rows.size()) + " rows, expected " + std::to_string(g.rows.size()));
    return out;
  }
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    const auto& w = g.rows[i];
    const std::string at = g.spec + " row " + std::to_string(i + 1) + ": ";
    for (int l = 0; l < 3; ++l) {
      if (r.sources[l] != house_style(w.src[l])) out.push_back(at + "source '" + r.sources[l] + "'");
      if (!w.src[l].empty() && r.entry_df[l] != w.df[l]) out.push_back(at + "df " + std::to_string(r.entry_df[l]));
    }
    if (eff(r.efficiency[1]) != w.eff1 || eff(r.efficiency[2]) != w.eff2) out.push_back(at + "efficiency");
    if (r.ems.spectral_text() != house_style(w.ems)) out.push_back(at + "EMS " + r.ems.spectral_text());
    if (g.canonical && r.ems.canonical_text() != w.canonical) out.push_back(at + "canonical EMS " + r.ems.canonical_text());
  }
  return out;
}

}  // namespace tiered::test
