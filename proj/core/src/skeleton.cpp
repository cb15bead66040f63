#include "tiered/skeleton.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace tiered {

namespace {

using Index = Eigen::Index;

const char* kSpectral[] = {"ξ", "η", "ζ", "κ", "μ"};
const char* kSpectralAscii[] = {"xi", "eta", "zeta", "kappa", "mu"};
const char* kCanonical[] = {"φ", "ψ", "χ", "ω", "ν"};
const char* kCanonicalAscii[] = {"phi", "psi", "chi", "omega", "nu"};

std::string subscript(const ExperimentChain& chain, int level, int gf) {
  const auto& g = chain.tier(level).structure.generalized_factors()[gf];
  return g.is_mean ? "0" : g.subscript;
}

EmsTerm component_term(const ExperimentChain& chain, int level, int gf, bool canonical, double eff, double mult) {
  EmsTerm t;
  const std::string sub = subscript(chain, level, gf);
  t.id = (canonical ? canonical_symbol(level, true) : spectral_symbol(level, true)) + "_" + sub;
  t.symbol = (canonical ? canonical_symbol(level) : spectral_symbol(level)) + "_" + sub;
  t.level = level;
  t.index = gf;
  t.efficiency = eff;
  t.multiplier = mult;
  return t;
}

bool near(double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(b)); }

std::string join_terms(const std::vector<EmsTerm>& a, const std::vector<EmsTerm>& b, int den) {
  std::string s;
  for (const auto* v : {&a, &b})
    for (const auto& t : *v) s += (s.empty() ? "" : " + ") + t.render(den);
  return s;
}

// Reduced row echelon form in place; returns pivot columns.
std::vector<int> rref(Mat& a, double thr) {
  std::vector<int> pivots;
  Eigen::Index row = 0;
  for (Eigen::Index c = 0; c < a.cols() && row < a.rows(); ++c) {
    Eigen::Index best;
    const double mag = a.col(c).segment(row, a.rows() - row).cwiseAbs().maxCoeff(&best);
    if (mag <= thr) continue;
    a.row(row).swap(a.row(row + best));
    a.row(row) /= a(row, c);
    for (Eigen::Index r = 0; r < a.rows(); ++r)
      if (r != row && std::abs(a(r, c)) > 0.0) a.row(r) -= a(r, c) * a.row(row);
    pivots.push_back(static_cast<int>(c));
    ++row;
  }
  a.conservativeResize(row, a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r)
    for (Eigen::Index c = 0; c < a.cols(); ++c)
      if (std::abs(a(r, c)) <= thr) a(r, c) = 0.0;
  return pivots;
}

}  // namespace

std::string spectral_symbol(int level, bool ascii) {
  const int k = std::min(level, 4);
  return ascii ? kSpectralAscii[k] : kSpectral[k];
}

std::string canonical_symbol(int level, bool ascii) {
  const int k = std::min(level, 4);
  return ascii ? kCanonicalAscii[k] : kCanonical[k];
}

std::string EmsTerm::render(int snap_den) const {
  std::string s;
  if (!near(efficiency, 1.0)) s += "(" + format_number(efficiency, snap_den) + ")";
  if (!near(multiplier, 1.0)) s += format_number(multiplier, snap_den);
  return s + symbol;
}

std::string EmsExpression::spectral_text(int snap_den) const { return join_terms(spectral, quadratic, snap_den); }

std::string EmsExpression::canonical_text(int snap_den) const { return join_terms(canonical, quadratic, snap_den); }

double EmsExpression::coefficient(const std::string& id) const {
  double c = 0.0;
  for (const auto* v : {&spectral, &canonical, &quadratic})
    for (const auto& t : *v)
      if (t.id == id) c += t.coefficient();
  return c;
}

int AnovaTable::total_df() const {
  int s = 0;
  for (const auto& r : rows) s += r.df;
  return s;
}

std::vector<bool> AnovaTable::efficiency_columns() const {
  std::vector<bool> show(tiers.size(), false);
  for (const auto& r : rows)
    for (std::size_t l = 0; l < r.efficiency.size(); ++l)
      if (r.efficiency[l] && !near(*r.efficiency[l], 1.0)) show[l] = true;
  return show;
}

AnovaTable skeleton_table(const Decomposition& d, const ExperimentChain& chain) {
  const int L = d.levels - 1;
  AnovaTable t;
  t.snap_den = chain.options().snap_den;
  for (int l = 0; l <= L; ++l) t.tiers.push_back(chain.tier(l).name);
  for (int l = 0; l < L; ++l) {
    const auto& gfs = chain.tier(l).structure.generalized_factors();
    for (std::size_t h = 0; h < gfs.size(); ++h) {
      const EmsTerm s = component_term(chain, l, static_cast<int>(h), false, 1.0, 1.0);
      const EmsTerm c = component_term(chain, l, static_cast<int>(h), true, 1.0, 1.0);
      t.components.push_back({s.id, s.symbol, c.id, c.symbol, l, static_cast<int>(h)});
    }
  }

  for (std::size_t k = 0; k < d.parts.size(); ++k) {
    const Part& p = d.parts[k];
    AnovaRow row;
    row.part = static_cast<int>(k);
    row.df = p.rank;
    row.in_pstar_q = p.in_pstar_q;
    row.sources.resize(L + 1);
    row.entry_df.assign(L + 1, 0);
    row.starts.assign(L + 1, false);
    row.efficiency.resize(L + 1);
    for (int l = 0; l <= L; ++l) {
      row.sources[l] = d.label(static_cast<int>(k), l);
      const auto same_prefix = [&](const Part& q) {
        return std::equal(p.path.begin(), p.path.begin() + l + 1, q.path.begin());
      };
      row.starts[l] = k == 0 || !same_prefix(d.parts[k - 1]);
      for (const auto& q : d.parts)
        if (same_prefix(q)) row.entry_df[l] += q.rank;
      if (l > 0 && p.path[l] >= 0) row.efficiency[l] = p.eff[l];
    }
    for (int l = 0; l < L; ++l) {
      if (p.path[l] < 0) continue;
      const int gf = chain.tier(l).sources[p.path[l]].stratum;
      row.ems.spectral.push_back(
          component_term(chain, l, gf, false, l == 0 ? 1.0 : p.eff[l], static_cast<double>(chain.replication(l))));
    }
    if (p.path[L] >= 0) {
      const auto& qlabel = d.info[L].qlabels[p.path[L]];
      EmsTerm q;
      q.id = qlabel == "0" ? "q_0" : "q(" + qlabel + ")";
      q.symbol = q.id;
      q.level = L;
      q.index = p.path[L];
      q.efficiency = p.eff[L];
      row.ems.quadratic.push_back(q);
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

AnovaTable canonical_ems(AnovaTable table, const ExperimentChain& chain) {
  for (auto& row : table.rows) {
    row.ems.canonical.clear();
    for (const auto& s : row.ems.spectral) {
      const auto& st = chain.tier(s.level).structure;
      const auto& gfs = st.generalized_factors();
      // Finest first within the tier.
      for (int f = st.size() - 1; f >= 0; --f) {
        if (f != s.index && !st.below(s.index, f)) continue;
        row.ems.canonical.push_back(
            component_term(chain, s.level, f, true, s.efficiency, s.multiplier * gfs[f].replication));
      }
    }
  }
  table.has_canonical = true;
  return table;
}

std::string LinearCombination::text(int snap_den) const {
  std::string s;
  for (const auto& [sym, c] : terms) {
    const double a = std::abs(c);
    std::string coef = near(a, 1.0) ? "" : format_number(a, snap_den);
    if (coef.find('/') != std::string::npos) coef = "(" + coef + ")";
    if (s.empty()) s = (c < 0 ? "-" : "") + coef + sym;
    else s += (c < 0 ? " - " : " + ") + coef + sym;
  }
  return s;
}

Mat ems_matrix(const AnovaTable& table, const std::vector<int>& rows, bool canonical) {
  Mat a = Mat::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(table.components.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& ems = table.rows[rows[i]].ems;
    for (std::size_t c = 0; c < table.components.size(); ++c)
      a(i, c) = ems.coefficient(canonical ? table.components[c].canonical_id : table.components[c].id);
  }
  return a;
}

EstimabilityReport estimability_report(const AnovaTable& table, bool canonical, double thr) {
  if (canonical && !table.has_canonical) throw Error("canonical estimability needs a table with canonical EMS");
  EstimabilityReport rep;
  rep.canonical = canonical;
  const auto sym = [&](std::size_t c) {
    return canonical ? table.components[c].canonical_symbol : table.components[c].symbol;
  };

  // Distinct EMS vectors of the residual-type rows in P*Q.
  std::vector<int> candidates;
  for (std::size_t r = 0; r < table.rows.size(); ++r)
    if (table.rows[r].in_pstar_q && table.rows[r].ems.quadratic.empty()) candidates.push_back(static_cast<int>(r));
  const Mat all = ems_matrix(table, candidates, canonical);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < all.rows(); ++i) {
    bool dup = all.row(i).cwiseAbs().maxCoeff() <= thr;
    for (auto j : keep) dup = dup || (all.row(i) - all.row(j)).cwiseAbs().maxCoeff() <= thr;
    if (!dup) {
      keep.push_back(i);
      rep.rows.push_back(candidates[i]);
    }
  }
  const Index ncomp = static_cast<Index>(table.components.size());
  Mat a(static_cast<Eigen::Index>(keep.size()), ncomp);
  for (std::size_t i = 0; i < keep.size(); ++i) a.row(i) = all.row(keep[i]);

  std::vector<bool> estimable(ncomp, false);
  Mat row_basis(ncomp, 0);
  if (a.rows() > 0) {
    Eigen::JacobiSVD<Mat> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    const double cut = thr * std::max(1.0, sv.size() ? sv(0) : 0.0);
    Eigen::Index rank = 0;
    while (rank < sv.size() && sv(rank) > cut) ++rank;
    row_basis = svd.matrixV().leftCols(rank);
    const Mat left_null = svd.matrixU().rightCols(a.rows() - rank);
    if (left_null.cols() > 0) {
      rep.ldcvs = true;
      Mat ln = left_null.transpose();
      rref(ln, 1e-9);
      for (Eigen::Index i = 0; i < ln.rows(); ++i) {
        std::vector<double> v(ln.cols());
        for (Eigen::Index j = 0; j < ln.cols(); ++j) v[j] = ln(i, j);
        rep.dependencies.push_back(std::move(v));
      }
    }
    const Mat pinv_t = a.transpose().completeOrthogonalDecomposition().pseudoInverse();
    for (Index c = 0; c < ncomp; ++c) {
      Vec e = Vec::Zero(ncomp);
      e(c) = 1.0;
      const Vec resid = e - row_basis * (row_basis.transpose() * e);
      if (resid.norm() > 1e-8) continue;
      estimable[c] = true;
      rep.estimable.push_back(sym(c));
      const Vec w = pinv_t * e;
      if (w.minCoeff() < -1e-9) rep.negative_risk.push_back(sym(c));
    }
    Mat rest = a;
    for (Index c = 0; c < ncomp; ++c)
      if (estimable[c]) rest.col(c).setZero();
    rref(rest, 1e-9);
    for (Eigen::Index i = 0; i < rest.rows(); ++i) {
      LinearCombination lc;
      for (Index c = 0; c < ncomp; ++c)
        if (rest(i, c) != 0.0) lc.terms.emplace_back(sym(c), rest(i, c));
      if (lc.terms.size() > 1) rep.confounded_sums.push_back(std::move(lc));
    }
  }
  for (Index c = 0; c < ncomp; ++c) {
    if (estimable[c]) continue;
    bool in_sum = false;
    for (const auto& lc : rep.confounded_sums)
      for (const auto& t : lc.terms) in_sum = in_sum || t.first == sym(c);
    if (!in_sum) rep.never_estimable.push_back(sym(c));
  }
  return rep;
}

}  // namespace tiered
