#include "tiered/chain.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <map>

namespace tiered {

namespace {

std::string ascii_label(std::string s) {
  const std::pair<std::string, std::string> subs[] = {{"∧", "^"}, {"⊢", "|-"}, {"▷", ">"}};
  for (const auto& [from, to] : subs) {
    for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
      s.replace(pos, from.size(), to);
  }
  return s;
}

// Orthonormal basis for the span of the given class indicators.
Mat span_basis(const std::vector<std::vector<int>>& class_lists, const std::vector<int>& nclasses, int n) {
  int cols = 0;
  for (int c : nclasses) cols += c;
  Mat x = Mat::Zero(n, std::max(cols, 1));
  int off = 0;
  for (std::size_t k = 0; k < class_lists.size(); ++k) {
    for (int u = 0; u < n; ++u) x(u, off + class_lists[k][u]) = 1.0;
    off += nclasses[k];
  }
  if (cols == 0) return Mat::Zero(n, 0);
  Eigen::ColPivHouseholderQR<Mat> qr(x);
  qr.setThreshold(1e-10);
  const auto rank = qr.rank();
  Mat q = qr.householderQ() * Mat::Identity(n, rank);
  return q;
}

}  // namespace

std::vector<int> DesignMap::counts() const {
  std::vector<int> c(target_units, 0);
  for (int a : assignment) ++c[a];
  return c;
}

Replication check_equireplicate(const DesignMap& m, bool treatment_map) {
  if (static_cast<int>(m.assignment.size()) != m.source_units)
    throw ChainError(fmt::format("map {} has {} assignments for {} units", m.name, m.assignment.size(), m.source_units));
  for (int a : m.assignment)
    if (a < 0 || a >= m.target_units) throw ChainError(fmt::format("map {} assigns an index outside 0..{}", m.name, m.target_units - 1));
  Replication rep;
  rep.counts = m.counts();
  rep.r = rep.counts.empty() ? 0 : rep.counts[0];
  for (int c : rep.counts) rep.equal = rep.equal && c == rep.r;
  if (!treatment_map) {
    if (!rep.equal) throw ChainError(fmt::format("map {} is not equireplicate", m.name));
    if (rep.r == 0) throw ChainError(fmt::format("map {} leaves target units unused", m.name));
  }
  return rep;
}

Projector push_idempotent(const Projector& q, const DesignMap& m, int r) {
  const auto rep = check_equireplicate(m);
  if (rep.r != r) throw ChainError(fmt::format("map {} has replication {}, not {}", m.name, rep.r, r));
  Projector out;
  out.matrix = expand(q.matrix, m.assignment) / static_cast<double>(r);
  out.label = q.label;
  out.rank = q.rank;
  return out;
}

std::vector<Projector> treatment_idempotents(const std::vector<Projector>& family, const DesignMap& h,
                                             const Options& opt) {
  const auto rep = check_equireplicate(h, true);
  Vec d(h.target_units);
  for (int t = 0; t < h.target_units; ++t) d(t) = rep.counts[t];
  std::vector<Projector> out;
  for (const auto& r : family) {
    const Mat b = r.matrix * sym_pinv(r.matrix * d.asDiagonal() * r.matrix, opt.pinv_rel) * r.matrix;
    Projector p;
    p.matrix = expand(b, h.assignment);
    p.label = r.label;
    p.rank = static_cast<int>(std::lround(p.matrix.trace()));
    out.push_back(std::move(p));
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (max_abs(out[i].matrix * out[i].matrix - out[i].matrix) > opt.tol)
      throw ChainError("treatment decomposition not orthogonal on units");
    for (std::size_t j = 0; j < i; ++j)
      if (max_abs(out[i].matrix * out[j].matrix) > opt.tol)
        throw ChainError("treatment decomposition not orthogonal on units");
  }
  return out;
}

Mat product_effect(const PosetBlockStructure& s, const std::vector<int>& product) {
  const Mat w = product_effect_basis(s, product);
  return w * w.transpose();
}

Mat product_effect_basis(const PosetBlockStructure& s, const std::vector<int>& product) {
  const auto& fs = s.factors();
  const int n = s.unit_count();
  std::vector<int> set = product;
  std::sort(set.begin(), set.end());
  set.erase(std::unique(set.begin(), set.end()), set.end());

  auto classes_of = [&](const std::vector<int>& sub, int& nc) {
    std::map<std::vector<int>, int> ids;
    std::vector<int> cls(n);
    for (int u = 0; u < n; ++u) {
      std::vector<int> key;
      for (int f : sub) key.push_back(fs[f].levels[u]);
      cls[u] = ids.emplace(std::move(key), static_cast<int>(ids.size())).first->second;
    }
    nc = static_cast<int>(ids.size());
    return cls;
  };

  int nc = 0;
  const auto full = classes_of(set, nc);
  const Mat vg = span_basis({full}, {nc}, n);

  // Maximal proper subsets closed under nesting inside the product.
  std::vector<std::vector<int>> lists;
  std::vector<int> counts;
  const unsigned limit = 1u << set.size();
  for (unsigned mask = 0; mask + 1 < limit; ++mask) {
    std::vector<int> sub;
    for (std::size_t b = 0; b < set.size(); ++b)
      if (mask & (1u << b)) sub.push_back(set[b]);
    bool closed = true;
    for (int f : sub)
      for (int a : ancestors(fs, f))
        if (std::find(set.begin(), set.end(), a) != set.end() && std::find(sub.begin(), sub.end(), a) == sub.end())
          closed = false;
    if (!closed) continue;
    int c = 0;
    lists.push_back(classes_of(sub, c));
    counts.push_back(c);
  }
  const Mat vh = span_basis(lists, counts, n);
  // V_H lies inside V_G, so the effect is V_G minus the part of it spanned by V_H.
  const Mat inner = vg.transpose() * vh;
  const Mat k = projector_basis(inner * inner.transpose(), static_cast<int>(vh.cols()));
  return vg * orthogonal_complement(k, static_cast<int>(vg.cols()));
}

void build_sources(Tier& t, bool treatment_tier, const Options& opt) {
  const auto& s = t.structure;
  const auto& gfs = s.generalized_factors();
  t.strata = strata_projectors(s, opt);
  t.sources.clear();
  t.splits.clear();

  struct Sub {
    Projector proj;
    std::string qlabel;
    Mat basis;
  };
  std::vector<std::vector<Sub>> subs(t.strata.size());
  for (const auto& term : t.terms) {
    if (term.products.empty()) throw StructureError("empty term in tier " + t.name);
    Mat w(s.unit_count(), 0);
    for (const auto& p : term.products) {
      const Mat wp = product_effect_basis(s, p);
      if (w.cols() > 0 && max_abs(w.transpose() * wp) > std::max(opt.tol, 1e-8))
        throw StructureError(fmt::format("products of a term in tier {} overlap", t.name));
      Mat joined(w.rows(), w.cols() + wp.cols());
      joined << w, wp;
      w = std::move(joined);
    }
    Mat e = w * w.transpose();
    std::string label = term.name;
    if (label.empty()) {
      std::vector<int> set = term.products[0];
      std::sort(set.begin(), set.end());
      label = factor_set_label(s.factors(), set, term.products[0]);
    }
    const double tr = static_cast<double>(w.cols());
    if (tr < opt.residual_trace) throw StructureError(fmt::format("term {} in tier {} has no effect", label, t.name));
    int parent = -1;
    for (std::size_t h = 0; h < t.strata.size(); ++h)
      if (max_abs(t.strata[h].matrix * w - w) <= std::max(opt.tol, 1e-8)) parent = static_cast<int>(h);
    if (parent < 0)
      throw StructureError(fmt::format("term {} in tier {} does not lie within a single stratum", label, t.name));
    std::string q = term.abbrev.empty() ? ascii_label(label) : term.abbrev;
    if (term.name.empty() && term.abbrev.empty()) {
      q.clear();
      for (int f : term.products[0]) q += s.factors()[f].abbrev;
    }
    subs[parent].push_back({Projector{std::move(e), label, static_cast<int>(std::lround(tr))}, q, std::move(w)});
  }

  for (std::size_t h = 0; h < t.strata.size(); ++h) {
    const auto& g = gfs[h];
    const std::string qbase = g.is_mean ? "0" : g.subscript;
    if (subs[h].empty()) {
      t.sources.push_back({t.strata[h].label, t.strata[h].matrix, t.strata[h].rank, static_cast<int>(h),
                           SourceKind::Stratum, qbase, ascii_label(t.strata[h].label)});
      continue;
    }
    PseudofactorSplit split;
    split.parent_source = t.strata[h].label;
    split.parent_stratum = static_cast<int>(h);
    Mat rest = t.strata[h].matrix;
    for (std::size_t i = 0; i < subs[h].size(); ++i) {
      for (std::size_t j = 0; j < i; ++j)
        if (max_abs(subs[h][i].basis.transpose() * subs[h][j].basis) > std::max(opt.tol, 1e-8))
          throw StructureError(fmt::format("terms {} and {} in tier {} are not orthogonal", subs[h][i].proj.label,
                                           subs[h][j].proj.label, t.name));
      rest -= subs[h][i].proj.matrix;
      split.sub_idempotents.push_back(subs[h][i].proj);
      t.sources.push_back({subs[h][i].proj.label, subs[h][i].proj.matrix, subs[h][i].proj.rank, static_cast<int>(h),
                           SourceKind::Pseudo, subs[h][i].qlabel, ascii_label(subs[h][i].proj.label)});
    }
    const double tr = rest.trace();
    if (tr >= opt.residual_trace) {
      std::string label = t.strata[h].label + "⊢" + (subs[h].size() == 1 ? subs[h][0].proj.label : "");
      Projector p{rest, label, static_cast<int>(std::lround(tr))};
      split.sub_idempotents.push_back(p);
      t.sources.push_back({label, std::move(rest), p.rank, static_cast<int>(h), SourceKind::PseudoResidual,
                           ascii_label(label), ascii_label(label)});
    }
    t.splits.push_back(std::move(split));
  }
  for (auto& src : t.sources) {
    src.title = src.label;
    const auto& g = gfs[src.stratum];
    if (src.kind == SourceKind::Stratum && g.factors.size() == 1 && !s.factors()[g.factors[0]].title.empty())
      src.title = s.factors()[g.factors[0]].title;
  }
  (void)treatment_tier;
}

ExperimentChain::ExperimentChain(std::vector<Tier> tiers, std::vector<DesignMap> maps, const Options& opt)
    : tiers_(std::move(tiers)), maps_(std::move(maps)), opt_(opt) {
  if (tiers_.size() < 2) throw ChainError("a chain needs at least an observational tier and a treatment tier");
  if (maps_.size() + 1 != tiers_.size())
    throw ChainError(fmt::format("{} tiers need {} maps, got {}", tiers_.size(), tiers_.size() - 1, maps_.size()));
  const int levels = static_cast<int>(tiers_.size());
  for (int l = 0; l < levels; ++l) build_sources(tiers_[l], l == levels - 1, opt_);

  const int n = tiers_[0].units();
  replication_.assign(levels, 1);
  assign_.resize(levels);
  counts_.resize(levels);
  assign_[0].resize(n);
  for (int u = 0; u < n; ++u) assign_[0][u] = u;
  counts_[0].assign(n, 1);
  for (int l = 1; l < levels; ++l) {
    auto& m = maps_[l - 1];
    if (m.source_units != tiers_[l - 1].units() || m.target_units != tiers_[l].units())
      throw ChainError(fmt::format("map {} should go from {} to {} units", m.name, tiers_[l - 1].units(), tiers_[l].units()));
    const auto rep = check_equireplicate(m, l == levels - 1);
    (void)rep;
    assign_[l] = compose(assign_[l - 1], m.assignment);
    DesignMap composed{m.name, n, m.target_units, assign_[l]};
    const auto crep = check_equireplicate(composed, l == levels - 1);
    counts_[l] = crep.counts;
    replication_[l] = crep.equal ? crep.r : 0;
  }

  kernels_.resize(levels);
  for (int l = 0; l < levels; ++l) {
    const auto& t = tiers_[l];
    for (const auto& s : t.sources) {
      if (l < levels - 1) {
        kernels_[l].push_back(s.matrix / static_cast<double>(replication_[l]));
      } else {
        Vec d(t.units());
        for (int i = 0; i < t.units(); ++i) d(i) = counts_[l][i];
        kernels_[l].push_back(s.matrix * sym_pinv(s.matrix * d.asDiagonal() * s.matrix, opt_.pinv_rel) * s.matrix);
      }
    }
  }

  bases_.resize(levels);
  for (int l = 0; l < levels; ++l) {
    const int m = tiers_[l].units();
    Vec sq(m), inv(m);
    for (int i = 0; i < m; ++i) {
      sq(i) = std::sqrt(static_cast<double>(counts_[l][i]));
      inv(i) = counts_[l][i] > 0 ? 1.0 / sq(i) : 0.0;
    }
    for (std::size_t j = 0; j < kernels_[l].size(); ++j) {
      const Mat p = sq.asDiagonal() * kernels_[l][j] * sq.asDiagonal();
      const int rank = static_cast<int>(std::lround(p.trace()));
      bases_[l].push_back(inv.asDiagonal() * projector_basis(p, rank));
    }
  }

  // Pushed treatment sources must be mutually orthogonal idempotents.
  const int L = levels - 1;
  Vec d(tiers_[L].units());
  for (int i = 0; i < tiers_[L].units(); ++i) d(i) = counts_[L][i];
  const auto& ks = kernels_[L];
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const Mat bdb = ks[i] * d.asDiagonal() * ks[i];
    if (max_abs(bdb - ks[i]) > std::max(opt_.tol, 1e-8) * std::max(1.0, max_abs(ks[i])))
      throw ChainError("treatment decomposition not orthogonal on units");
    for (std::size_t j = 0; j < i; ++j)
      if (max_abs(ks[i] * d.asDiagonal() * ks[j]) > std::max(opt_.tol, 1e-8))
        throw ChainError("treatment decomposition not orthogonal on units");
  }
}

Mat ExperimentChain::pushed(int l, int source) const { return expand(kernels_[l][source], assign_[l]); }

}  // namespace tiered
