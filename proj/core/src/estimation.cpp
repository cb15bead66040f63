#include "tiered/estimation.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace tiered {

namespace {

int component_index(const AnovaTable& table, int level, int gf) {
  for (std::size_t c = 0; c < table.components.size(); ++c)
    if (table.components[c].level == level && table.components[c].gf == gf) return static_cast<int>(c);
  throw Error(fmt::format("no component for tier {} stratum {}", level, gf));
}

// Rows of the EMS for a row, over table.components.
Vec ems_vector(const AnovaRow& row, const AnovaTable& table) {
  Vec a = Vec::Zero(static_cast<Eigen::Index>(table.components.size()));
  for (const auto& t : row.ems.spectral) a(component_index(table, t.level, t.index)) += t.coefficient();
  return a;
}

// B with B B' = X_l Q_H X_l' for every component.
std::vector<Mat> component_bases(const ExperimentChain& chain, const AnovaTable& table) {
  std::vector<Mat> out;
  for (const auto& c : table.components) {
    const auto& q = chain.tier(c.level).strata[c.gf];
    out.push_back(expand_rows(projector_basis(q.matrix, q.rank), chain.assignment(c.level)));
  }
  return out;
}

Vec treatment_values(const Vec& effect, const ExperimentChain& chain) {
  const int L = chain.treatment_level();
  const auto& assign = chain.assignment(L);
  const int t = chain.tier(L).units();
  Vec sum = Vec::Zero(t);
  Vec cnt = Vec::Zero(t);
  for (std::size_t u = 0; u < assign.size(); ++u) {
    sum(assign[u]) += effect(static_cast<Eigen::Index>(u));
    cnt(assign[u]) += 1.0;
  }
  for (int i = 0; i < t; ++i) sum(i) = cnt(i) > 0 ? sum(i) / cnt(i) : std::numeric_limits<double>::quiet_NaN();
  return sum;
}

Vec project(const Mat& basis, const Vec& v) { return basis * (basis.transpose() * v); }

struct RowSpace {
  Mat basis;     // orthonormal basis of the row space of a
  Mat left_null; // orthonormal basis of the left null space
};

RowSpace row_space(const Mat& a, double thr = 1e-9) {
  RowSpace rs;
  if (a.rows() == 0) {
    rs.basis = Mat(a.cols(), 0);
    rs.left_null = Mat(0, 0);
    return rs;
  }
  Eigen::JacobiSVD<Mat> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  const double cut = thr * std::max(1.0, sv.size() ? sv(0) : 0.0);
  Eigen::Index rank = 0;
  while (rank < sv.size() && sv(rank) > cut) ++rank;
  rs.basis = svd.matrixV().leftCols(rank);
  rs.left_null = svd.matrixU().rightCols(a.rows() - rank);
  return rs;
}

// Left null vectors scaled so that the first nonzero entry is 1.
std::vector<Vec> dependencies(const Mat& left_null) {
  std::vector<Vec> out;
  if (left_null.cols() == 0) return out;
  Mat n = left_null.transpose();
  Eigen::Index row = 0;
  for (Eigen::Index c = 0; c < n.cols() && row < n.rows(); ++c) {
    Eigen::Index best;
    if (n.col(c).segment(row, n.rows() - row).cwiseAbs().maxCoeff(&best) <= 1e-9) continue;
    n.row(row).swap(n.row(row + best));
    n.row(row) /= n(row, c);
    for (Eigen::Index r = 0; r < n.rows(); ++r)
      if (r != row) n.row(r) -= n(r, c) * n.row(row);
    ++row;
  }
  for (Eigen::Index r = 0; r < row; ++r) out.push_back(n.row(r).transpose());
  return out;
}

ComponentEstimates solve_masked(const EmsSystem& sys, const std::vector<bool>& zeroed) {
  ComponentEstimates est;
  est.ids = sys.ids;
  const Eigen::Index nc = static_cast<Eigen::Index>(sys.ids.size());
  Mat a = sys.a;
  for (Eigen::Index c = 0; c < nc; ++c)
    if (zeroed[c]) a.col(c).setZero();

  // Pool rows whose EMS coincide.
  std::vector<Eigen::Index> reps;
  std::vector<double> ss, df;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    std::size_t k = 0;
    while (k < reps.size() && (a.row(i) - a.row(reps[k])).cwiseAbs().maxCoeff() > 1e-9) ++k;
    if (k == reps.size()) {
      reps.push_back(i);
      ss.push_back(0.0);
      df.push_back(0.0);
    }
    ss[k] += sys.ms(i) * sys.df(i);
    df[k] += sys.df(i);
  }
  Mat ap(static_cast<Eigen::Index>(reps.size()), nc);
  Vec mp(static_cast<Eigen::Index>(reps.size()));
  Vec w(static_cast<Eigen::Index>(reps.size()));
  for (std::size_t k = 0; k < reps.size(); ++k) {
    ap.row(k) = a.row(reps[k]);
    mp(k) = df[k] > 0 ? ss[k] / df[k] : 0.0;
    w(k) = std::sqrt(std::max(df[k], 0.0));
  }

  est.spectral = Vec::Zero(nc);
  est.estimable.assign(nc, false);
  if (ap.rows() > 0) {
    const Mat aw = w.asDiagonal() * ap;
    const Vec bw = w.asDiagonal() * mp;
    est.spectral = aw.completeOrthogonalDecomposition().solve(bw);
    const RowSpace rs = row_space(ap);
    for (Eigen::Index c = 0; c < nc; ++c) {
      Vec e = Vec::Zero(nc);
      e(c) = 1.0;
      est.estimable[c] = (e - rs.basis * (rs.basis.transpose() * e)).norm() <= 1e-8;
    }
    for (const auto& v : dependencies(rs.left_null)) est.defects.push_back(v.dot(mp));
  }
  for (Eigen::Index c = 0; c < nc; ++c)
    if (zeroed[c]) {
      est.spectral(c) = 0.0;
      est.constrained_zero.push_back(sys.ids[c]);
    }
  return est;
}

// Moves c within the null space of a until every component is nonnegative and the
// observational-tier ones positive, by alternating projections. Fitted values a c are unchanged.
Vec nonnegative_representative(const Mat& a, Vec c, const AnovaTable& table) {
  const RowSpace rs = row_space(a);
  const Eigen::Index nc = c.size();
  const Mat null = Mat::Identity(nc, nc) - rs.basis * rs.basis.transpose();
  const double floor = 1e-6 * std::max(1.0, c.cwiseAbs().maxCoeff());
  const auto low = [&](Eigen::Index i) { return table.components[i].level == 0 ? floor : 0.0; };
  const auto feasible = [&](const Vec& x) {
    for (Eigen::Index i = 0; i < nc; ++i)
      if (x(i) < low(i) - 1e-12) return false;
    return true;
  };
  if (feasible(c)) return c;
  const Vec base = c;
  Vec x = c;
  for (int it = 0; it < 5000 && !feasible(x); ++it) {
    for (Eigen::Index i = 0; i < nc; ++i) x(i) = std::max(x(i), low(i));
    x = base + null * (x - base);
  }
  return feasible(x) ? x : c;
}

int part_row(const AnovaTable& table, int part) {
  for (std::size_t r = 0; r < table.rows.size(); ++r)
    if (table.rows[r].part == part) return static_cast<int>(r);
  throw Error(fmt::format("part {} has no table row", part));
}

// Chains whose treatment sources are spread over parts outside P*Q cannot be combined stratum-wise.
bool applicable(const Decomposition& d) { return d.applicability.kind != ApplicabilityReport::Kind::NotApplicable; }

void finish_components(ComponentEstimates& est, const ExperimentChain& chain, const AnovaTable& table) {
  est.canonical = canonical_components(chain, table, est.spectral);
}

EffectEstimate dense_gls_effect(const Vec& y, const Mat& vinv, const Mat& br) {
  EffectEstimate e;
  const Mat m = br.transpose() * vinv * br;
  const double theta = m.trace() / static_cast<double>(br.cols());
  e.effect = br * m.ldlt().solve(br.transpose() * (vinv * y));
  e.variance = 1.0 / theta;
  return e;
}

}  // namespace

double ComponentEstimates::value(const std::string& id) const {
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == id) return spectral(static_cast<Eigen::Index>(i));
  throw Error("unknown component " + id);
}

std::vector<MeanSquare> project_mean_squares(const Vec& y, const Decomposition& d) {
  if (y.size() != d.units)
    throw DataError(fmt::format("response has {} values for {} observational units", y.size(), d.units));
  std::vector<MeanSquare> out;
  for (std::size_t k = 0; k < d.parts.size(); ++k) {
    MeanSquare m;
    m.part = static_cast<int>(k);
    m.df = d.parts[k].rank;
    m.ss = (d.parts[k].basis.transpose() * y).squaredNorm();
    m.ms = m.df > 0 ? m.ss / m.df : 0.0;
    out.push_back(m);
  }
  return out;
}

double ems_value(const AnovaRow& row, const AnovaTable& table, const Vec& spectral) {
  return ems_vector(row, table).dot(spectral);
}

Vec canonical_components(const ExperimentChain& chain, const AnovaTable& table, const Vec& spectral) {
  Vec out = Vec::Zero(spectral.size());
  for (int l = 0; l < chain.treatment_level(); ++l) {
    const auto& s = chain.tier(l).structure;
    std::vector<double> eta(s.size());
    for (int h = 0; h < s.size(); ++h) eta[h] = spectral(component_index(table, l, h));
    const auto psi = canonical_from_spectral(s, eta);
    for (int h = 0; h < s.size(); ++h) out(component_index(table, l, h)) = psi[h];
  }
  return out;
}

EmsSystem residual_system(const AnovaTable& table, const std::vector<MeanSquare>& ms) {
  EmsSystem sys;
  for (const auto& c : table.components) sys.ids.push_back(c.id);
  for (std::size_t r = 0; r < table.rows.size(); ++r)
    if (table.rows[r].in_pstar_q && table.rows[r].ems.quadratic.empty()) sys.rows.push_back(static_cast<int>(r));
  sys.a = ems_matrix(table, sys.rows);
  sys.ms.resize(static_cast<Eigen::Index>(sys.rows.size()));
  sys.df.resize(static_cast<Eigen::Index>(sys.rows.size()));
  for (std::size_t i = 0; i < sys.rows.size(); ++i) {
    const auto& m = ms[table.rows[sys.rows[i]].part];
    sys.ms(i) = m.ms;
    sys.df(i) = m.df;
  }
  return sys;
}

ComponentEstimates ems_solver(const EmsSystem& sys) {
  return solve_masked(sys, std::vector<bool>(sys.ids.size(), false));
}

ComponentEstimates enforce_nonnegativity(const ComponentEstimates& est, const EmsSystem& sys) {
  std::vector<bool> zeroed(sys.ids.size(), false);
  for (const auto& id : est.constrained_zero)
    for (std::size_t i = 0; i < sys.ids.size(); ++i)
      if (sys.ids[i] == id) zeroed[i] = true;
  ComponentEstimates cur = est;
  const double scale = sys.ms.size() ? std::max(1.0, sys.ms.cwiseAbs().maxCoeff()) : 1.0;
  for (std::size_t guard = 0; guard <= sys.ids.size(); ++guard) {
    Eigen::Index worst = -1;
    double low = -1e-12 * scale;
    for (Eigen::Index c = 0; c < cur.spectral.size(); ++c)
      if (cur.estimable[c] && cur.spectral(c) < low) {
        low = cur.spectral(c);
        worst = c;
      }
    if (worst < 0) break;
    zeroed[worst] = true;
    cur = solve_masked(sys, zeroed);
  }
  cur.effective_df = est.effective_df;
  cur.converged = est.converged;
  cur.iterations = est.iterations;
  if (cur.canonical.size() == 0) cur.canonical = est.canonical;
  return cur;
}

EffectEstimate stratum_estimate(const Vec& y, const ExperimentChain& chain, const Decomposition& d,
                                const AnovaTable& table, int part, const Vec* components) {
  const int L = d.levels - 1;
  const Part& p = d.parts.at(part);
  const int j = p.path[L];
  if (j < 0 || p.eff[L] <= chain.options().tol)
    throw Error(fmt::format("part {} carries no treatment information", part));
  EffectEstimate e;
  e.source = j;
  e.label = d.info[L].labels[j];
  e.part = part;
  e.efficiency = p.eff[L];
  const Mat br = chain.pushed_basis(L, j);
  e.effect = project(br, project(p.basis, y)) / p.eff[L];
  e.treatment_values = treatment_values(e.effect, chain);
  const AnovaRow& row = table.rows[part_row(table, part)];
  if (components) {
    e.variance = ems_value(row, table, *components) / p.eff[L];
  } else {
    const Vec target = ems_vector(row, table);
    double ss = 0.0, df = 0.0;
    for (const auto& r : table.rows) {
      if (!r.ems.quadratic.empty() || (ems_vector(r, table) - target).cwiseAbs().maxCoeff() > 1e-9) continue;
      ss += (d.parts[r.part].basis.transpose() * y).squaredNorm();
      df += r.df;
    }
    if (df > 0) e.variance = ss / df / p.eff[L];
  }
  return e;
}

FitResult anova_fit(const Vec& y, const ExperimentChain& chain, const Decomposition& d, const AnovaTable& table) {
  if (!applicable(d))
    throw ApplicabilityError("stratum-wise anova needs an anova-applicable chain: " + d.applicability.describe());
  FitResult fit;
  fit.method = "anova";
  fit.mean_squares = project_mean_squares(y, d);
  const EmsSystem sys = residual_system(table, fit.mean_squares);
  fit.components = enforce_nonnegativity(ems_solver(sys), sys);
  finish_components(fit.components, chain, table);
  const int L = d.levels - 1;
  for (std::size_t k = 0; k < d.parts.size(); ++k)
    if (d.parts[k].path[L] >= 0 && d.parts[k].in_pstar_q)
    {
      EffectEstimate e = stratum_estimate(y, chain, d, table, static_cast<int>(k), &fit.components.spectral);
      const Vec a = ems_vector(table.rows[part_row(table, static_cast<int>(k))], table);
      for (Eigen::Index c = 0; c < a.size(); ++c)
        if (a(c) != 0.0 && !fit.components.estimable[c] &&
            std::find(fit.components.constrained_zero.begin(), fit.components.constrained_zero.end(),
                      fit.components.ids[c]) == fit.components.constrained_zero.end())
          e.variance = std::numeric_limits<double>::quiet_NaN();
      fit.effects.push_back(std::move(e));
    }
  return fit;
}

Mat variance_matrix(const ExperimentChain& chain, const AnovaTable& table, const Vec& spectral) {
  const int n = chain.observational_units();
  Mat v = Mat::Zero(n, n);
  const auto bases = component_bases(chain, table);
  for (std::size_t c = 0; c < bases.size(); ++c)
    if (spectral(c) != 0.0) v.noalias() += spectral(c) * bases[c] * bases[c].transpose();
  return v;
}

Mat closed_form_inverse(const ExperimentChain& chain, const AnovaTable& table, const Vec& spectral) {
  if (chain.levels() != 3) throw Error("the closed-form inverse covers three-tier chains");
  const int n = chain.observational_units();
  const double r = chain.replication(1);
  Mat s = Mat::Zero(n, n);
  std::vector<Mat> pb;
  std::vector<double> xi;
  for (std::size_t j = 0; j < chain.tier(0).sources.size(); ++j) {
    pb.push_back(chain.pushed_basis(0, static_cast<int>(j)));
    xi.push_back(spectral(component_index(table, 0, chain.tier(0).sources[j].stratum)));
    if (xi.back() <= 0.0) throw Error("the closed-form inverse needs every xi_P > 0");
    s.noalias() += pb.back() * pb.back().transpose() / xi.back();
  }
  Mat vinv = s;
  for (std::size_t k = 0; k < chain.tier(1).sources.size(); ++k) {
    const Mat qb = chain.pushed_basis(1, static_cast<int>(k));
    const double eta = spectral(component_index(table, 1, chain.tier(1).sources[k].stratum));
    double alpha = 0.0;
    for (std::size_t j = 0; j < pb.size(); ++j)
      alpha += (pb[j].transpose() * qb).squaredNorm() / static_cast<double>(qb.cols()) / xi[j];
    const Mat sq = s * qb;
    vinv.noalias() -= (r * eta / (1.0 + r * eta * alpha)) * sq * sq.transpose();
  }
  return vinv;
}

FitResult gls_fit(const Vec& y, const ExperimentChain& chain, const Decomposition& d, const AnovaTable& table,
                  const Vec& spectral) {
  const int L = chain.treatment_level();
  FitResult fit;
  fit.method = "gls-known-V";
  fit.mean_squares = project_mean_squares(y, d);
  fit.components.ids.clear();
  for (const auto& c : table.components) fit.components.ids.push_back(c.id);
  fit.components.spectral = spectral;
  fit.components.estimable.assign(table.components.size(), true);
  finish_components(fit.components, chain, table);
  for (std::size_t j = 0; j < chain.tier(0).sources.size(); ++j)
    if (spectral(component_index(table, 0, chain.tier(0).sources[j].stratum)) <= 0.0)
      throw Error("gls needs every observational-tier component xi_P > 0");
  for (Eigen::Index c = 0; c < spectral.size(); ++c)
    if (spectral(c) < 0.0) throw Error("gls needs nonnegative spectral components");

  const auto p_count = chain.tier(0).sources.size();
  std::vector<Mat> pb(p_count);
  std::vector<double> xi(p_count);
  std::vector<Vec> py(p_count);
  for (std::size_t j = 0; j < p_count; ++j) {
    pb[j] = chain.pushed_basis(0, static_cast<int>(j));
    xi[j] = spectral(component_index(table, 0, chain.tier(0).sources[j].stratum));
    py[j] = project(pb[j], y);
  }

  if (L == 1) {
    for (std::size_t i = 0; i < chain.tier(L).sources.size(); ++i) {
      const Mat br = chain.pushed_basis(L, static_cast<int>(i));
      double theta = 0.0;
      Vec est = Vec::Zero(y.size());
      for (std::size_t j = 0; j < p_count; ++j) {
        const double lam = (pb[j].transpose() * br).squaredNorm() / static_cast<double>(br.cols());
        if (lam <= chain.options().tol) continue;
        theta += lam / xi[j];
        est += project(br, py[j]) / xi[j];
      }
      EffectEstimate e;
      e.source = static_cast<int>(i);
      e.label = chain.tier(L).sources[i].label;
      e.effect = est / theta;
      e.variance = 1.0 / theta;
      e.treatment_values = treatment_values(e.effect, chain);
      fit.effects.push_back(std::move(e));
    }
    return fit;
  }

  if (L == 2) {
    const double r = chain.replication(1);
    const auto q_count = chain.tier(1).sources.size();
    std::vector<Mat> qb(q_count);
    std::vector<double> eta(q_count), alpha(q_count, 0.0);
    std::vector<std::vector<double>> lam_pq(p_count, std::vector<double>(q_count));
    for (std::size_t k = 0; k < q_count; ++k) {
      qb[k] = chain.pushed_basis(1, static_cast<int>(k));
      eta[k] = spectral(component_index(table, 1, chain.tier(1).sources[k].stratum));
      for (std::size_t j = 0; j < p_count; ++j) {
        lam_pq[j][k] = (pb[j].transpose() * qb[k]).squaredNorm() / static_cast<double>(qb[k].cols());
        alpha[k] += lam_pq[j][k] / xi[j];
      }
    }
    for (std::size_t i = 0; i < chain.tier(L).sources.size(); ++i) {
      const Mat br = chain.pushed_basis(L, static_cast<int>(i));
      double theta = 0.0;
      Vec est = Vec::Zero(y.size());
      for (std::size_t k = 0; k < q_count; ++k) {
        const double lam_qr = (qb[k].transpose() * br).squaredNorm() / static_cast<double>(br.cols());
        if (lam_qr <= chain.options().tol) continue;
        const double shrink = 1.0 / (1.0 + r * eta[k] * alpha[k]);
        theta += alpha[k] * lam_qr * shrink;
        for (std::size_t j = 0; j < p_count; ++j) {
          if (lam_pq[j][k] <= chain.options().tol) continue;
          est += project(br, project(qb[k], py[j])) * (shrink / xi[j]);
        }
      }
      EffectEstimate e;
      e.source = static_cast<int>(i);
      e.label = chain.tier(L).sources[i].label;
      e.effect = est / theta;
      e.variance = 1.0 / theta;
      e.treatment_values = treatment_values(e.effect, chain);
      fit.effects.push_back(std::move(e));
    }
    if (chain.observational_units() <= chain.options().full_check_units) {
      const Mat v = variance_matrix(chain, table, spectral);
      const Mat vinv = closed_form_inverse(chain, table, spectral);
      fit.vinv_defect = max_abs(v * vinv - Mat::Identity(v.rows(), v.cols()));
    }
    return fit;
  }

  const Mat v = variance_matrix(chain, table, spectral);
  const Mat vinv = v.ldlt().solve(Mat::Identity(v.rows(), v.cols()));
  for (std::size_t i = 0; i < chain.tier(L).sources.size(); ++i) {
    EffectEstimate e = dense_gls_effect(y, vinv, chain.pushed_basis(L, static_cast<int>(i)));
    e.source = static_cast<int>(i);
    e.label = chain.tier(L).sources[i].label;
    e.treatment_values = treatment_values(e.effect, chain);
    fit.effects.push_back(std::move(e));
  }
  return fit;
}

namespace {

std::string group_label(const Decomposition& d, const Decomposition::Group& g) {
  std::string s;
  for (std::size_t l = 0; l < g.path.size(); ++l)
    if (g.path[l] >= 0) s += (s.empty() ? "" : " / ") + d.info[l].labels[g.path[l]];
  return s;
}

FitResult combine_groups(const Vec& y, const ExperimentChain& chain, const Decomposition& d, const AnovaTable& table,
                         const ComponentEstimates& init) {
  const Options& opt = chain.options();
  const int L = d.levels - 1;
  FitResult fit;
  fit.method = "combined";
  fit.mean_squares = project_mean_squares(y, d);

  struct TreatPart {
    int part;
    int source;
    double lambda;
    double ss;
    Vec proj;  // R M y
  };
  struct Group {
    std::string label;
    Vec ems;
    double resid_ss = 0.0;
    int resid_df = 0;
    std::vector<TreatPart> treat;
    double v = 1.0;
    double dprime = 0.0;
    bool identified = false;
  };
  std::vector<Group> groups;
  const RowSpace init_rows = row_space(residual_system(table, fit.mean_squares).a);
  for (const auto& g : d.groups) {
    if (!g.in_pstar_q) continue;
    Group gr;
    gr.label = group_label(d, g);
    gr.ems = ems_vector(table.rows[part_row(table, g.parts.front())], table);
    for (int k : g.parts) {
      const Part& p = d.parts[k];
      if (p.path[L] >= 0) {
        const Mat br = chain.pushed_basis(L, p.path[L]);
        gr.treat.push_back({k, p.path[L], p.eff[L], fit.mean_squares[k].ss, project(br, project(p.basis, y))});
      } else {
        gr.resid_ss += fit.mean_squares[k].ss;
        gr.resid_df += p.rank;
      }
    }
    const bool in_rows = (gr.ems - init_rows.basis * (init_rows.basis.transpose() * gr.ems)).norm() <= 1e-8;
    const double v0 = gr.ems.dot(init.spectral);
    gr.v = in_rows && v0 > 0.0 ? v0 : 1.0;
    gr.identified = in_rows;
    groups.push_back(std::move(gr));
  }

  const auto n_sources = chain.tier(L).sources.size();
  std::vector<double> theta(n_sources);
  std::vector<Vec> tau(n_sources);
  auto gls_step = [&] {
    for (std::size_t i = 0; i < n_sources; ++i) {
      theta[i] = 0.0;
      tau[i] = Vec::Zero(y.size());
    }
    for (const auto& g : groups)
      for (const auto& t : g.treat) {
        theta[t.source] += t.lambda / g.v;
        tau[t.source] += t.proj / g.v;
      }
    for (std::size_t i = 0; i < n_sources; ++i)
      if (theta[i] > 0.0) tau[i] /= theta[i];
  };
  std::vector<std::string> ids;
  for (const auto& c : table.components) ids.push_back(c.id);
  // Fits components to group variances with weights d'/v^2, the scoring weights of the
  // restricted likelihood, so groups whose EMS are linearly dependent stay consistent.
  auto fit_components = [&](const std::vector<double>& target, EmsSystem& sys) {
    std::vector<int> used;
    for (std::size_t k = 0; k < groups.size(); ++k)
      if (groups[k].dprime > 1e-9) used.push_back(static_cast<int>(k));
    sys.ids = ids;
    sys.rows.clear();
    sys.a.resize(static_cast<Eigen::Index>(used.size()), static_cast<Eigen::Index>(ids.size()));
    sys.ms.resize(static_cast<Eigen::Index>(used.size()));
    sys.df.resize(static_cast<Eigen::Index>(used.size()));
    for (std::size_t i = 0; i < used.size(); ++i) {
      const Group& g = groups[used[i]];
      sys.a.row(i) = g.ems.transpose();
      sys.ms(i) = target[used[i]];
      sys.df(i) = g.dprime / (g.v * g.v);
    }
    return enforce_nonnegativity(ems_solver(sys), sys);
  };
  auto update = [&](bool apply) {
    std::vector<double> target(groups.size());
    for (std::size_t k = 0; k < groups.size(); ++k) {
      Group& g = groups[k];
      double num = g.resid_ss;
      double dp = g.resid_df;
      for (const auto& t : g.treat) {
        num += t.ss - t.lambda * tau[t.source].squaredNorm();
        dp += (1.0 - t.lambda / (theta[t.source] * g.v)) * chain.tier(L).sources[t.source].rank;
      }
      g.dprime = dp;
      target[k] = g.v;
      if (dp <= 1e-9) continue;
      double nv = num / dp;
      if (nv <= 0.0) nv = opt.damping * g.v;
      target[k] = nv;
    }
    EmsSystem sys;
    const ComponentEstimates c = fit_components(target, sys);
    double change = 0.0;
    for (auto& g : groups) {
      if (g.dprime <= 1e-9) continue;
      double nv = g.ems.dot(c.spectral);
      if (nv <= 0.0) nv = opt.damping * g.v;
      change = std::max(change, std::abs(nv - g.v) / std::max(std::abs(g.v), 1e-300));
      if (apply) g.v = nv;
    }
    return change;
  };

  fit.components.converged = false;
  for (int it = 1; it <= opt.max_iter; ++it) {
    gls_step();
    const double change = update(true);
    fit.trajectory.push_back(change);
    fit.components.iterations = it;
    if (change < opt.iter_tol) {
      fit.components.converged = true;
      break;
    }
  }
  gls_step();
  update(false);
  std::vector<bool> identified(n_sources, true);
  for (const auto& g : groups)
    if (!g.identified && g.dprime <= 1e-9)
      for (const auto& t : g.treat) identified[t.source] = false;

  for (std::size_t i = 0; i < n_sources; ++i) {
    if (theta[i] <= 0.0) continue;
    EffectEstimate e;
    e.source = static_cast<int>(i);
    e.label = d.info[L].labels[i];
    e.effect = tau[i];
    e.variance = identified[i] ? 1.0 / theta[i] : std::numeric_limits<double>::quiet_NaN();
    e.treatment_values = treatment_values(e.effect, chain);
    fit.effects.push_back(std::move(e));
  }

  EmsSystem sys;
  sys.ids.clear();
  for (const auto& c : table.components) sys.ids.push_back(c.id);
  std::vector<const Group*> used;
  for (const auto& g : groups)
    if (g.dprime > 1e-9) used.push_back(&g);
  sys.a.resize(static_cast<Eigen::Index>(used.size()), static_cast<Eigen::Index>(sys.ids.size()));
  sys.ms.resize(static_cast<Eigen::Index>(used.size()));
  sys.df.resize(static_cast<Eigen::Index>(used.size()));
  for (std::size_t i = 0; i < used.size(); ++i) {
    sys.a.row(i) = used[i]->ems.transpose();
    sys.ms(i) = used[i]->v;
    sys.df(i) = used[i]->dprime;
  }
  ComponentEstimates comps = ems_solver(sys);
  comps.converged = fit.components.converged;
  comps.iterations = fit.components.iterations;
  for (const auto& g : groups) comps.effective_df[g.label] = g.dprime;
  fit.components = enforce_nonnegativity(comps, sys);
  // Components no informative group carries (the Mean strata) keep the default of the scoring path.
  for (Eigen::Index c = 0; c < sys.a.cols(); ++c)
    if (sys.a.rows() == 0 || sys.a.col(c).cwiseAbs().maxCoeff() <= 1e-12) fit.components.spectral(c) = 1.0;
  fit.components.spectral = nonnegative_representative(sys.a, fit.components.spectral, table);
  finish_components(fit.components, chain, table);
  return fit;
}

// Restricted likelihood scoring over the components that act on error contrasts.
FitResult combine_reml(const Vec& y, const ExperimentChain& chain, const Decomposition& d, const AnovaTable& table,
                       const ComponentEstimates& init) {
  const Options& opt = chain.options();
  const int L = chain.treatment_level();
  const int n = chain.observational_units();
  FitResult fit;
  fit.method = "combined-reml";
  fit.mean_squares = project_mean_squares(y, d);

  const auto bases = component_bases(chain, table);
  const Eigen::Index nc = static_cast<Eigen::Index>(bases.size());
  const Mat x = design_matrix(chain.assignment(L), chain.tier(L).units());
  const Mat xpinv = x.completeOrthogonalDecomposition().pseudoInverse();
  const Mat resid_proj = Mat::Identity(n, n) - x * xpinv;

  std::vector<bool> free(nc, false);
  Vec c(nc);
  for (Eigen::Index i = 0; i < nc; ++i) {
    free[i] = (resid_proj * bases[i]).squaredNorm() > 1e-8;
    const bool have = i < init.spectral.size() && i < static_cast<Eigen::Index>(init.estimable.size()) &&
                      init.estimable[i] && init.spectral(i) > 0.0;
    c(i) = have ? init.spectral(i) : 1.0;
  }

  Mat vinv;
  fit.components.converged = false;
  for (int it = 1; it <= opt.max_iter; ++it) {
    Mat v = Mat::Zero(n, n);
    for (Eigen::Index i = 0; i < nc; ++i)
      if (c(i) != 0.0) v.noalias() += c(i) * bases[i] * bases[i].transpose();
    vinv = v.ldlt().solve(Mat::Identity(n, n));
    const Mat vx = vinv * x;
    const Mat xvx_pinv = (x.transpose() * vx).completeOrthogonalDecomposition().pseudoInverse();
    const Mat p = vinv - vx * xvx_pinv * vx.transpose();
    const Vec py = p * y;

    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < nc; ++i)
      if (free[i]) idx.push_back(i);
    const Eigen::Index m = static_cast<Eigen::Index>(idx.size());
    std::vector<Mat> pb(idx.size());
    Vec score(m);
    Mat info(m, m);
    for (Eigen::Index a = 0; a < m; ++a) {
      pb[a] = p * bases[idx[a]];
      score(a) = -0.5 * (bases[idx[a]].transpose() * pb[a]).trace() + 0.5 * (bases[idx[a]].transpose() * py).squaredNorm();
    }
    for (Eigen::Index a = 0; a < m; ++a)
      for (Eigen::Index b = 0; b <= a; ++b) info(a, b) = info(b, a) = 0.5 * (bases[idx[a]].transpose() * pb[b]).squaredNorm();
    Vec step = info.completeOrthogonalDecomposition().solve(score);
    // Components held at zero stay there while their score points downward.
    for (Eigen::Index a = 0; a < m; ++a)
      if (c(idx[a]) <= 0.0 && step(a) < 0.0) step(a) = 0.0;
    double scale = 1.0;
    for (int h = 0; h < 30; ++h) {
      bool ok = true;
      for (Eigen::Index a = 0; a < m; ++a)
        if (c(idx[a]) + scale * step(a) < 0.0 && c(idx[a]) > 0.0 && idx[a] >= 0) ok = false;
      if (ok) break;
      scale *= opt.damping;
    }
    double change = 0.0;
    for (Eigen::Index a = 0; a < m; ++a) {
      double nv = c(idx[a]) + scale * step(a);
      const bool tier0 = table.components[idx[a]].level == 0;
      if (nv < 0.0) nv = 0.0;
      if (tier0) nv = std::max(nv, 1e-12);
      change = std::max(change, std::abs(nv - c(idx[a])) / std::max(std::abs(c(idx[a])), 1e-12));
      c(idx[a]) = nv;
    }
    fit.trajectory.push_back(change);
    fit.components.iterations = it;
    if (change < opt.iter_tol) {
      fit.components.converged = true;
      break;
    }
  }

  fit.components.ids.clear();
  for (const auto& comp : table.components) fit.components.ids.push_back(comp.id);
  fit.components.spectral = c;
  fit.components.estimable = free;
  for (Eigen::Index i = 0; i < nc; ++i)
    if (free[i] && c(i) <= 1e-12 && table.components[i].level > 0) fit.components.constrained_zero.push_back(table.components[i].id);
  finish_components(fit.components, chain, table);

  const FitResult g = gls_fit(y, chain, d, table, c);
  fit.effects = g.effects;
  fit.vinv_defect = g.vinv_defect;
  return fit;
}

}  // namespace

FitResult combine_information(const Vec& y, const ExperimentChain& chain, const Decomposition& d,
                              const AnovaTable& table, const ComponentEstimates* init) {
  ComponentEstimates start;
  if (init) {
    start = *init;
  } else {
    const EmsSystem sys = residual_system(table, project_mean_squares(y, d));
    start = enforce_nonnegativity(ems_solver(sys), sys);
  }
  return applicable(d) ? combine_groups(y, chain, d, table, start) : combine_reml(y, chain, d, table, start);
}

}  // namespace tiered
