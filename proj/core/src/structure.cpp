#include "tiered/structure.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <map>
#include <random>
#include <set>

namespace tiered {

std::vector<int> ancestors(const std::vector<Factor>& factors, int f) {
  std::vector<int> out;
  std::vector<int> stack(factors[f].nested_in.rbegin(), factors[f].nested_in.rend());
  while (!stack.empty()) {
    const int a = stack.back();
    stack.pop_back();
    if (std::find(out.begin(), out.end(), a) != out.end()) continue;
    out.push_back(a);
    for (auto it = factors[a].nested_in.rbegin(); it != factors[a].nested_in.rend(); ++it) stack.push_back(*it);
  }
  return out;
}

std::string factor_set_label(const std::vector<Factor>& factors, const std::vector<int>& set,
                             const std::vector<int>& order) {
  if (set.empty()) return "Mean";
  std::vector<int> written = order.empty() ? set : order;
  if (order.empty()) std::sort(written.begin(), written.end());

  std::set<int> nesting;
  for (int f : set)
    for (int a : ancestors(factors, f))
      if (std::find(set.begin(), set.end(), a) != set.end()) nesting.insert(a);

  std::vector<int> maximal;
  for (int f : written)
    if (!nesting.count(f)) maximal.push_back(f);

  std::string head;
  if (maximal.size() == 1) {
    head = factors[maximal[0]].name;
  } else {
    for (std::size_t i = 0; i < maximal.size(); ++i) head += (i ? "#" : "") + factors[maximal[i]].abbrev;
  }
  if (nesting.empty()) return head;

  // Nesting factors follow the written "in" lists of the maximal factors, then declaration order.
  std::vector<int> tail;
  for (int m : maximal)
    for (int a : ancestors(factors, m))
      if (nesting.count(a) && std::find(tail.begin(), tail.end(), a) == tail.end()) tail.push_back(a);
  for (int a : nesting)
    if (std::find(tail.begin(), tail.end(), a) == tail.end()) tail.push_back(a);

  std::string inner;
  for (std::size_t i = 0; i < tail.size(); ++i) inner += (i ? "∧" : "") + factors[tail[i]].abbrev;
  return head + "[" + inner + "]";
}

namespace {

std::vector<int> partition_classes(const std::vector<Factor>& factors, const std::vector<int>& set, int n,
                                   int& nclasses) {
  std::map<std::vector<int>, int> ids;
  std::vector<int> classes(n);
  for (int u = 0; u < n; ++u) {
    std::vector<int> key;
    key.reserve(set.size());
    for (int f : set) key.push_back(factors[f].levels[u]);
    auto [it, fresh] = ids.emplace(std::move(key), static_cast<int>(ids.size()));
    classes[u] = it->second;
  }
  nclasses = static_cast<int>(ids.size());
  return classes;
}

bool refines(const std::vector<int>& fine, const std::vector<int>& coarse) {
  std::map<int, int> seen;
  for (std::size_t u = 0; u < fine.size(); ++u) {
    auto [it, fresh] = seen.emplace(fine[u], coarse[u]);
    if (!fresh && it->second != coarse[u]) return false;
  }
  return true;
}

}  // namespace

PosetBlockStructure::PosetBlockStructure(int unit_count, std::vector<Factor> factors)
    : n_(unit_count), factors_(std::move(factors)) {
  if (n_ <= 0) throw StructureError("structure needs at least one unit");
  std::set<std::string> abbrevs;
  for (std::size_t i = 0; i < factors_.size(); ++i) {
    auto& f = factors_[i];
    if (static_cast<int>(f.levels.size()) != n_)
      throw StructureError(fmt::format("factor {} has {} level codes for {} units", f.name, f.levels.size(), n_));
    for (int l : f.levels)
      if (l < 0 || l >= f.nlevels)
        throw StructureError(fmt::format("factor {} has level code {} outside 0..{}", f.name, l, f.nlevels - 1));
    if (!abbrevs.insert(f.abbrev).second)
      throw StructureError(fmt::format("abbreviation {} is used twice", f.abbrev));
    for (int a : f.nested_in)
      if (a < 0 || a >= static_cast<int>(factors_.size()) || a == static_cast<int>(i))
        throw StructureError(fmt::format("factor {} has an invalid nesting factor", f.name));
  }

  // A one-level factor induces the same partition as the mean and adds no stratum.
  std::vector<int> real;
  for (std::size_t i = 0; i < factors_.size(); ++i)
    if (!factors_[i].pseudo && factors_[i].nlevels > 1) real.push_back(static_cast<int>(i));
  if (real.size() > 20) throw StructureError("too many factors in one tier");

  for (int f : real)
    for (int a : ancestors(factors_, f))
      if (factors_[a].pseudo)
        throw StructureError(fmt::format("factor {} is nested in pseudofactor {}", factors_[f].name, factors_[a].name));

  const unsigned limit = 1u << real.size();
  for (unsigned mask = 0; mask < limit; ++mask) {
    std::vector<int> set;
    for (std::size_t b = 0; b < real.size(); ++b)
      if (mask & (1u << b)) set.push_back(real[b]);
    bool closed = true;
    for (int f : set)
      for (int a : ancestors(factors_, f))
        if (std::find(set.begin(), set.end(), a) == set.end()) closed = false;
    if (!closed) continue;

    GeneralizedFactor g;
    g.factors = set;
    g.is_mean = set.empty();
    g.label = factor_set_label(factors_, set);
    if (g.is_mean) {
      g.subscript = "0";
    } else {
      for (int f : set) g.subscript += factors_[f].abbrev;
    }
    g.classes = partition_classes(factors_, set, n_, g.nclasses);
    gfs_.push_back(std::move(g));
  }

  bool has_full = false;
  for (const auto& g : gfs_) has_full = has_full || g.nclasses == n_;
  if (!has_full) {
    Factor units{"Units", "U", "", n_, {}, {}, false, true};
    if (abbrevs.count("U")) units.abbrev = "Units";
    units.levels.resize(n_);
    for (int u = 0; u < n_; ++u) units.levels[u] = u;
    for (int f : real) units.nested_in.push_back(f);
    factors_.push_back(units);
    const int idx = static_cast<int>(factors_.size()) - 1;
    GeneralizedFactor g;
    g.factors = real;
    g.factors.push_back(idx);
    g.label = "Units";
    g.subscript = factors_[idx].abbrev;
    g.classes = units.levels;
    g.nclasses = n_;
    gfs_.push_back(std::move(g));
  }

  for (auto& g : gfs_) {
    if (n_ % g.nclasses != 0)
      throw StructureError(fmt::format("generalized factor {} is not equireplicate", g.label));
    g.replication = n_ / g.nclasses;
    std::vector<int> counts(g.nclasses, 0);
    for (int c : g.classes) ++counts[c];
    for (int c : counts)
      if (c != g.replication) throw StructureError(fmt::format("generalized factor {} is not equireplicate", g.label));
    g.is_full = g.nclasses == n_;
  }

  const int m = static_cast<int>(gfs_.size());
  below_.assign(m, std::vector<bool>(m, false));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      if (i == j) continue;
      const bool fine = refines(gfs_[j].classes, gfs_[i].classes);
      if (fine && gfs_[i].nclasses == gfs_[j].nclasses)
        throw StructureError(fmt::format("{} and {} induce the same partition", gfs_[i].label, gfs_[j].label));
      below_[i][j] = fine;
    }
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < i; ++j)
      if (below_[i][j]) throw StructureError("generalized factors are not in a linear extension of marginality");
}

int PosetBlockStructure::find_factor(const std::string& key) const {
  for (std::size_t i = 0; i < factors_.size(); ++i)
    if (factors_[i].name == key || factors_[i].abbrev == key) return static_cast<int>(i);
  return -1;
}

int PosetBlockStructure::find_gf(const std::vector<int>& set) const {
  std::vector<int> s = set;
  std::sort(s.begin(), s.end());
  for (std::size_t i = 0; i < gfs_.size(); ++i)
    if (gfs_[i].factors == s) return static_cast<int>(i);
  return -1;
}

bool marginal(const GeneralizedFactor& h, const GeneralizedFactor& f) {
  if (h.classes.size() != f.classes.size()) throw StructureError("generalized factors live on different unit sets");
  return h.nclasses != f.nclasses && refines(f.classes, h.classes);
}

RelationshipMatrix relationship_matrix(const GeneralizedFactor& h) {
  const auto n = static_cast<Eigen::Index>(h.classes.size());
  std::vector<int> counts(h.nclasses, 0);
  for (int c : h.classes) ++counts[c];
  for (int c : counts)
    if (c != counts[0]) throw StructureError(fmt::format("generalized factor {} is not equireplicate", h.label));
  Mat s(n, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) s(i, j) = h.classes[i] == h.classes[j] ? 1.0 : 0.0;
  return {std::move(s), h};
}

double idempotency_defect(const Mat& q, int full_limit) {
  if (q.rows() <= full_limit) return max_abs(q * q - q);
  std::mt19937_64 rng(0x5eedULL);
  std::normal_distribution<double> nd;
  Mat v(q.rows(), 4);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = nd(rng);
  const Mat qv = q * v;
  return max_abs(q * qv - qv) / std::max(1.0, max_abs(v));
}

std::vector<Projector> strata_projectors(const PosetBlockStructure& s, const Options& opt) {
  const auto& gfs = s.generalized_factors();
  const int m = s.size();
  std::vector<Projector> out;
  out.reserve(m);
  for (int h = 0; h < m; ++h) {
    Mat q = relationship_matrix(gfs[h]).matrix / static_cast<double>(gfs[h].replication);
    for (int f = 0; f < h; ++f)
      if (s.below(f, h)) q -= out[f].matrix;
    const int rank = static_cast<int>(std::lround(q.trace()));
    if (idempotency_defect(q, opt.full_check_units) > opt.tol || rank < 1)
      throw StructureError(fmt::format("stratum {} is not an idempotent; not a poset block structure", gfs[h].label));
    out.push_back({std::move(q), gfs[h].label, rank});
  }
  return out;
}

std::vector<double> spectral_from_canonical(const PosetBlockStructure& s, const std::vector<double>& psi) {
  const auto& gfs = s.generalized_factors();
  std::vector<double> eta(s.size(), 0.0);
  for (int h = 0; h < s.size(); ++h)
    for (int f = 0; f < s.size(); ++f)
      if (f == h || s.below(h, f)) eta[h] += gfs[f].replication * psi[f];
  return eta;
}

std::vector<double> canonical_from_spectral(const PosetBlockStructure& s, const std::vector<double>& eta) {
  const auto& gfs = s.generalized_factors();
  std::vector<double> psi(s.size(), 0.0);
  for (int h = s.size() - 1; h >= 0; --h) {
    double acc = eta[h];
    for (int f = h + 1; f < s.size(); ++f)
      if (s.below(h, f)) acc -= gfs[f].replication * psi[f];
    psi[h] = acc / gfs[h].replication;
  }
  return psi;
}

}  // namespace tiered
