#include "tiered/balance.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace tiered {

namespace {

std::string tier_letter(int level, int top, bool script) {
  // Treatments are R, the tier below Q, then P, O, ...
  static const char* plain[] = {"R", "Q", "P", "O", "N", "M"};
  static const char* fancy[] = {"𝓡", "𝓠", "𝓟", "𝓞", "𝓝", "𝓜"};
  const int k = std::min(top - level, 5);
  return script ? fancy[k] : plain[k];
}

std::string provenance(const std::vector<int>& path, int top) {
  std::string s = tier_letter(0, top, false);
  for (int l = 1; l <= top; ++l) {
    const bool compound = s.find("▷") != std::string::npos || s.find("⊢") != std::string::npos;
    const std::string base = compound ? "(" + s + ")" : s;
    if (path[l] >= 0) {
      s = base + "▷" + tier_letter(l, top, false);
    } else {
      s = base + "⊢" + tier_letter(l, top, true);
      break;
    }
  }
  return s;
}

double snap_unit(double x, double tol) {
  if (std::abs(x) <= tol) return 0.0;
  if (std::abs(x - 1.0) <= tol) return 1.0;
  return x;
}

bool is_one(double x) { return std::abs(x - 1.0) <= 1e-9; }

}  // namespace

int Part::depth() const {
  int d = 0;
  for (std::size_t l = 0; l < path.size(); ++l)
    if (path[l] != kNone) d = static_cast<int>(l) + 1;
  return d;
}

double EfficiencyTable::at(const std::string& up, const std::string& low) const {
  auto iu = std::find(upper.begin(), upper.end(), up);
  auto il = std::find(lower.begin(), lower.end(), low);
  if (iu == upper.end() || il == lower.end()) throw Error("no efficiency factor for " + up + " / " + low);
  return lambda(iu - upper.begin(), il - lower.begin());
}

EfficiencyTable efficiency_factors(const std::vector<Projector>& upper, const std::vector<Projector>& lower,
                                   const Options& opt) {
  EfficiencyTable t;
  t.lambda = Mat::Zero(static_cast<Eigen::Index>(upper.size()), static_cast<Eigen::Index>(lower.size()));
  t.rational.assign(upper.size(), std::vector<std::optional<Rational>>(lower.size()));
  for (const auto& p : upper) t.upper.push_back(p.label);
  for (const auto& p : lower) t.lower.push_back(p.label);
  for (std::size_t i = 0; i < upper.size(); ++i) {
    const Mat& q = upper[i].matrix;
    for (std::size_t j = 0; j < lower.size(); ++j) {
      const Mat& r = lower[j].matrix;
      const Mat rq = r * q;
      const double lam = snap_unit(rq.trace() / r.trace(), opt.tol);
      t.lambda(i, j) = std::clamp(lam, 0.0, 1.0);
      t.rational[i][j] = snap_rational(t.lambda(i, j), opt.snap_den, opt.snap_tol);
      const Mat rqr = rq * r;
      if (t.balanced && max_abs(rqr - lam * r) > opt.tol) {
        t.balanced = false;
        t.offending_upper = upper[i].label;
        t.offending_lower = lower[j].label;
        Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (rqr + rqr.transpose()));
        for (Eigen::Index k = 0; k < es.eigenvalues().size(); ++k)
          if (std::abs(es.eigenvalues()(k)) > 1e-9) t.spectrum.push_back(es.eigenvalues()(k));
      }
      for (std::size_t k = 0; k < j && t.balanced; ++k) {
        if (max_abs(lower[k].matrix * rq) > opt.tol) {
          t.balanced = false;
          t.offending_upper = upper[i].label;
          t.offending_lower = lower[k].label + " / " + lower[j].label;
        }
      }
    }
  }
  return t;
}

std::string Decomposition::label(int part, int level) const {
  const int p = parts[part].path[level];
  if (p >= 0) return info[level].labels[p];
  if (p == kResidual) return "Residual";
  return "";
}

Decomposition refine(const std::vector<Projector>& upper, const std::vector<Projector>& lower,
                     const EfficiencyTable& eff, const Options& opt) {
  if (!eff.balanced)
    throw BalanceError("efficiency table is not balanced", "refine", eff.offending_upper, eff.offending_lower);
  Decomposition d;
  d.levels = 2;
  d.units = upper.empty() ? 0 : static_cast<int>(upper[0].matrix.rows());
  d.info.resize(2);
  for (int l = 0; l < 2; ++l) {
    const auto& fam = l == 0 ? upper : lower;
    for (std::size_t i = 0; i < fam.size(); ++i) {
      d.info[l].labels.push_back(fam[i].label);
      d.info[l].component.push_back(static_cast<int>(i));
      d.info[l].ranks.push_back(fam[i].rank);
      d.info[l].qlabels.push_back(fam[i].label);
      d.info[l].titles.push_back(fam[i].label);
    }
  }
  for (std::size_t i = 0; i < upper.size(); ++i) {
    const Mat& q = upper[i].matrix;
    Mat rest = q;
    bool any = false;
    for (std::size_t j = 0; j < lower.size(); ++j) {
      const double lam = eff.lambda(i, j);
      if (lam <= opt.tol) continue;
      any = true;
      const Mat sub = q * lower[j].matrix * q / lam;
      Part p;
      p.rank = static_cast<int>(std::lround(sub.trace()));
      p.basis = projector_basis(sub, p.rank);
      p.path = {static_cast<int>(i), static_cast<int>(j)};
      p.eff = {1.0, lam};
      rest -= sub;
      d.parts.push_back(std::move(p));
    }
    if (!any || rest.trace() >= opt.residual_trace) {
      Part p;
      p.rank = static_cast<int>(std::lround(rest.trace()));
      p.basis = projector_basis(rest, p.rank);
      p.path = {static_cast<int>(i), any ? kResidual : kNone};
      p.eff = {1.0, 0.0};
      d.parts.push_back(std::move(p));
    }
  }
  for (std::size_t k = 0; k < d.parts.size(); ++k) {
    d.parts[k].provenance = provenance(d.parts[k].path, 1);
    d.parts[k].in_pstar_q = true;
    d.pstar_q.push_back(static_cast<int>(k));
  }
  d.q1.resize(2);
  d.c_map.resize(2);
  for (std::size_t k = 0; k < d.parts.size(); ++k) {
    if (d.groups.empty() || d.groups.back().path[0] != d.parts[k].path[0])
      d.groups.push_back({{d.parts[k].path[0]}, {}, true});
    d.groups.back().parts.push_back(static_cast<int>(k));
  }
  d.applicability = anova_applicability(d);
  return d;
}

Decomposition chain_decompose(const ExperimentChain& chain) {
  const Options& opt = chain.options();
  const int L = chain.treatment_level();

  Decomposition d;
  d.levels = L + 1;
  d.units = chain.observational_units();
  d.info.resize(L + 1);
  for (int l = 0; l <= L; ++l) {
    for (const auto& s : chain.tier(l).sources) {
      d.info[l].labels.push_back(s.label);
      d.info[l].component.push_back(s.stratum);
      d.info[l].ranks.push_back(s.rank);
      d.info[l].qlabels.push_back(s.qlabel);
      d.info[l].titles.push_back(s.title);
    }
    d.info[l].replication = chain.replication(l);
  }

  struct Work {
    Part part;
    bool active = true;
  };
  std::vector<Work> work;
  for (std::size_t j = 0; j < chain.tier(0).sources.size(); ++j) {
    Work w;
    w.part.basis = chain.pushed_basis(0, static_cast<int>(j));
    w.part.rank = static_cast<int>(w.part.basis.cols());
    w.part.path.assign(L + 1, kNone);
    w.part.path[0] = static_cast<int>(j);
    w.part.eff.assign(L + 1, 0.0);
    w.part.eff[0] = 1.0;
    work.push_back(std::move(w));
  }

  for (int l = 1; l <= L; ++l) {
    const auto& assign = chain.assignment(l);
    const int m = chain.tier(l).units();
    const int nsrc = static_cast<int>(chain.tier(l).sources.size());

    std::vector<Work> next;
    for (auto& w : work) {
      if (!w.active) {
        next.push_back(std::move(w));
        continue;
      }
      const Mat& v = w.part.basis;
      const int r = static_cast<int>(v.cols());
      const Mat a = aggregate_rows(v, assign, m);
      // Rows of M_j are the coordinates of source j's basis against the part: S_j U S_k = W_j M_j M_k' W_k'.
      std::vector<Mat> mj(nsrc);
      std::vector<double> lam(nsrc, 0.0);
      for (int j = 0; j < nsrc; ++j) {
        mj[j] = chain.tier_basis(l, j).transpose() * a;
        const auto rank = mj[j].rows();
        lam[j] = rank > 0 ? std::clamp(snap_unit(mj[j].squaredNorm() / static_cast<double>(rank), opt.tol), 0.0, 1.0) : 0.0;
      }

      auto fail = [&](const std::string& lower, const Mat& gram) {
        Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (gram + gram.transpose()));
        std::string spec;
        for (Eigen::Index k = 0; k < es.eigenvalues().size(); ++k)
          if (std::abs(es.eigenvalues()(k)) > 1e-9) spec += (spec.empty() ? "" : ", ") + format_number(es.eigenvalues()(k));
        std::string upper;
        for (int k = 0; k < l; ++k)
          if (w.part.path[k] >= 0) upper += (upper.empty() ? "" : " / ") + d.info[k].labels[w.part.path[k]];
        throw BalanceError(fmt::format("structure balance fails at tier {} ({}): part {} against {}; eigenvalues {}; "
                                       "declare pseudofactors to split the source",
                                       l, chain.tier(l).name, upper, lower, spec.empty() ? "none" : spec),
                           chain.tier(l).name, upper, lower);
      };
      for (int j = 0; j < nsrc; ++j) {
        const Mat gram = mj[j] * mj[j].transpose();
        if (max_abs(gram - lam[j] * Mat::Identity(gram.rows(), gram.cols())) > opt.tol) fail(d.info[l].labels[j], gram);
        if (lam[j] == 0.0) continue;
        for (int k = 0; k < j; ++k)
          if (lam[k] > 0.0 && max_abs(mj[j] * mj[k].transpose()) > opt.tol)
            fail(d.info[l].labels[k] + " / " + d.info[l].labels[j], mj[j] * mj[k].transpose());
      }

      int used = 0;
      for (int j = 0; j < nsrc; ++j) used += lam[j] > 0.0 ? static_cast<int>(mj[j].rows()) : 0;
      if (used == 0) {
        w.active = false;
        next.push_back(std::move(w));
        continue;
      }
      Mat k(r, used);
      int col = 0;
      for (int j = 0; j < nsrc; ++j) {
        if (lam[j] == 0.0) continue;
        const Mat coords = mj[j].transpose() / std::sqrt(lam[j]);
        k.middleCols(col, coords.cols()) = coords;
        col += static_cast<int>(coords.cols());
        Work s;
        s.part.basis = v * coords;
        s.part.rank = static_cast<int>(coords.cols());
        s.part.path = w.part.path;
        s.part.path[l] = j;
        s.part.eff = w.part.eff;
        s.part.eff[l] = lam[j];
        next.push_back(std::move(s));
      }
      if (r - used >= opt.residual_trace) {
        Work res;
        res.part.basis = v * orthogonal_complement(k, r);
        res.part.rank = r - used;
        res.part.path = w.part.path;
        res.part.path[l] = kResidual;
        res.part.eff = w.part.eff;
        res.active = false;
        next.push_back(std::move(res));
      }
    }
    work = std::move(next);
  }

  for (auto& w : work) {
    w.part.provenance = provenance(w.part.path, L);
    bool pq = true;
    for (int l = 1; l < L; ++l)
      if (w.part.path[l] >= 0 && !is_one(w.part.eff[l])) pq = false;
    w.part.in_pstar_q = pq;
    d.parts.push_back(std::move(w.part));
  }
  for (std::size_t k = 0; k < d.parts.size(); ++k)
    if (d.parts[k].in_pstar_q) d.pstar_q.push_back(static_cast<int>(k));

  d.q1.resize(L + 1);
  d.c_map.resize(L + 1);
  for (int l = 1; l < L; ++l) {
    d.c_map[l].assign(d.info[l].labels.size(), -1);
    for (const auto& p : d.parts) {
      const int j = p.path[l];
      if (j < 0) continue;
      bool ones = true;
      for (int k = 1; k <= l; ++k) ones = ones && is_one(p.eff[k]);
      if (ones && d.c_map[l][j] < 0) {
        d.c_map[l][j] = p.path[l - 1];
        d.q1[l].push_back(j);
      }
    }
    std::sort(d.q1[l].begin(), d.q1[l].end());
  }

  for (std::size_t k = 0; k < d.parts.size(); ++k) {
    std::vector<int> prefix(d.parts[k].path.begin(), d.parts[k].path.begin() + L);
    if (d.groups.empty() || d.groups.back().path != prefix) d.groups.push_back({prefix, {}, d.parts[k].in_pstar_q});
    d.groups.back().parts.push_back(static_cast<int>(k));
  }

  d.applicability = anova_applicability(d);
  return d;
}

std::string ApplicabilityReport::describe() const {
  std::string s;
  switch (kind) {
    case Kind::Full: s = "full anova"; break;
    case Kind::Partial: s = "partial anova"; break;
    case Kind::NotApplicable: s = "not anova-applicable"; break;
  }
  if (!offending.empty()) {
    s += "; treatment information outside Q1 in";
    for (std::size_t i = 0; i < offending.size(); ++i) s += (i ? ", " : " ") + offending[i];
  }
  if (!split_treatments.empty()) {
    s += "; partial information:";
    for (std::size_t i = 0; i < split_treatments.size(); ++i) s += (i ? ", " : " ") + split_treatments[i];
  }
  return s;
}

ApplicabilityReport anova_applicability(const Decomposition& d) {
  ApplicabilityReport rep;
  const int L = d.levels - 1;
  if (L >= 2) {
    const int top = L - 1;
    const auto& q1 = d.q1[top];
    std::vector<int> seen;
    for (const auto& p : d.parts) {
      const int j = p.path[top];
      if (j < 0 || p.path[L] < 0) continue;
      if (std::find(q1.begin(), q1.end(), j) == q1.end() && std::find(seen.begin(), seen.end(), j) == seen.end()) {
        seen.push_back(j);
        rep.offending.push_back(d.info[top].labels[j]);
      }
    }
    bool full = true;
    for (const auto& p : d.parts)
      for (int l = 1; l < L; ++l)
        if (p.path[l] >= 0 && !is_one(p.eff[l])) full = false;
    rep.kind = !rep.offending.empty() ? ApplicabilityReport::Kind::NotApplicable
               : full                ? ApplicabilityReport::Kind::Full
                                     : ApplicabilityReport::Kind::Partial;
  }
  for (std::size_t j = 0; j < d.info[L].labels.size(); ++j) {
    int count = 0;
    for (const auto& p : d.parts)
      if (p.path[L] == static_cast<int>(j)) ++count;
    if (count > 1) rep.split_treatments.push_back(fmt::format("{} in {} parts", d.info[L].titles[j], count));
  }
  return rep;
}

}  // namespace tiered
