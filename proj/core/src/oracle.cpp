#include "tiered/oracle.hpp"

#include <fmt/format.h>

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <thread>

namespace tiered {

namespace {

struct Moments {
  double n = 0.0, mean = 0.0, m2 = 0.0;

  void add(double x) {
    n += 1.0;
    const double delta = x - mean;
    mean += delta / n;
    m2 += delta * (x - mean);
  }
  void merge(const Moments& o) {
    if (o.n == 0.0) return;
    const double total = n + o.n;
    const double delta = o.mean - mean;
    mean += delta * o.n / total;
    m2 += o.m2 + delta * delta * n * o.n / total;
    n = total;
  }
  double variance() const { return n > 1.0 ? m2 / (n - 1.0) : 0.0; }
  double se() const { return n > 0.0 ? std::sqrt(variance() / n) : 0.0; }
};

std::string row_label(const AnovaRow& row) {
  std::string s;
  for (const auto& x : row.sources)
    if (!x.empty()) s += (s.empty() ? "" : " / ") + x;
  return s;
}

}  // namespace

RandomizationScheme::RandomizationScheme(const PosetBlockStructure& s) : n_(s.unit_count()) {
  const auto& fs = s.factors();
  std::vector<int> structural;
  for (std::size_t f = 0; f < fs.size(); ++f)
    if (!fs[f].pseudo) structural.push_back(static_cast<int>(f));

  for (int f : structural) {
    std::vector<int> anc;
    if (fs[f].automatic) {
      for (int g : structural)
        if (g != f) anc.push_back(g);
    } else {
      for (int g : ancestors(fs, f))
        if (!fs[g].pseudo) anc.push_back(g);
    }
    Step st;
    st.level = fs[f].levels;
    st.group.resize(n_);
    std::map<std::vector<int>, int> ids;
    for (int u = 0; u < n_; ++u) {
      std::vector<int> key;
      for (int g : anc) key.push_back(fs[g].levels[u]);
      auto it = ids.emplace(key, static_cast<int>(ids.size())).first;
      st.group[u] = it->second;
    }
    st.group_levels.resize(ids.size());
    for (int u = 0; u < n_; ++u) st.group_levels[st.group[u]].push_back(st.level[u]);
    for (auto& g : st.group_levels) {
      std::sort(g.begin(), g.end());
      g.erase(std::unique(g.begin(), g.end()), g.end());
    }
    steps_.push_back(std::move(st));
  }

  radix_.assign(steps_.size(), 1);
  std::int64_t r = 1;
  for (std::size_t i = steps_.size(); i-- > 0;) {
    radix_[i] = r;
    const int top = *std::max_element(steps_[i].level.begin(), steps_[i].level.end()) + 1;
    r *= top;
  }
  for (int u = 0; u < n_; ++u) {
    std::int64_t code = 0;
    for (std::size_t i = 0; i < steps_.size(); ++i) code += steps_[i].level[u] * radix_[i];
    lookup_.emplace_back(code, u);
  }
  std::sort(lookup_.begin(), lookup_.end());
  for (std::size_t i = 1; i < lookup_.size(); ++i)
    if (lookup_[i].first == lookup_[i - 1].first)
      throw StructureError("units are not identified by their factor levels; randomization recipe unsupported");
}

std::vector<int> RandomizationScheme::draw(std::mt19937_64& rng) const {
  std::vector<std::int64_t> code(n_, 0);
  std::vector<int> shuffled;
  for (std::size_t i = 0; i < steps_.size(); ++i) {
    const Step& st = steps_[i];
    std::vector<std::map<int, int>> maps(st.group_levels.size());
    for (std::size_t g = 0; g < st.group_levels.size(); ++g) {
      shuffled = st.group_levels[g];
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      for (std::size_t k = 0; k < shuffled.size(); ++k) maps[g][st.group_levels[g][k]] = shuffled[k];
    }
    for (int u = 0; u < n_; ++u) code[u] += maps[st.group[u]].at(st.level[u]) * radix_[i];
  }
  std::vector<int> perm(n_);
  for (int u = 0; u < n_; ++u) {
    auto it = std::lower_bound(lookup_.begin(), lookup_.end(), std::make_pair(code[u], -1));
    if (it == lookup_.end() || it->first != code[u])
      throw StructureError("permuted levels name no unit; the structure is not a nesting and crossing tree");
    perm[u] = it->second;
  }
  return perm;
}

std::vector<int> random_permutation(const RandomizationScheme& scheme, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return scheme.draw(rng);
}

ResponseModel::ResponseModel(const ExperimentChain& chain, const AnovaTable& table, const Vec& spectral,
                             const Vec& tau)
    : chain_(&chain) {
  const int L = chain.treatment_level();
  if (spectral.size() != static_cast<Eigen::Index>(table.components.size()))
    throw Error(fmt::format("{} component values given for {} components", spectral.size(), table.components.size()));
  if (tau.size() != chain.tier(L).units())
    throw Error(fmt::format("{} treatment effects given for {} treatments", tau.size(), chain.tier(L).units()));
  for (int l = 0; l < L; ++l) {
    const Tier& t = chain.tier(l);
    Mat root = Mat::Zero(t.units(), t.units());
    for (std::size_t c = 0; c < table.components.size(); ++c) {
      if (table.components[c].level != l) continue;
      if (!(spectral(c) >= 0.0)) throw Error("spectral component " + table.components[c].id + " must be nonnegative");
      root += std::sqrt(spectral(c)) * t.strata[table.components[c].gf].matrix;
    }
    root_.push_back(std::move(root));
    schemes_.emplace_back(t.structure);
  }
  const auto& assign = chain.assignment(L);
  mu_.resize(static_cast<Eigen::Index>(assign.size()));
  for (std::size_t u = 0; u < assign.size(); ++u) mu_(u) = tau(assign[u]);
}

Vec ResponseModel::draw(std::mt19937_64& rng) const {
  std::normal_distribution<double> normal;
  Vec y = mu_;
  for (std::size_t l = 0; l < root_.size(); ++l) {
    Vec z(root_[l].cols());
    for (auto& v : z) v = normal(rng);
    const Vec w = root_[l] * z;
    const auto perm = schemes_[l].draw(rng);
    Vec wp(w.size());
    for (Eigen::Index u = 0; u < w.size(); ++u) wp(perm[u]) = w(u);
    const auto& assign = chain_->assignment(static_cast<int>(l));
    for (Eigen::Index u = 0; u < y.size(); ++u) y(u) += wp(assign[u]);
  }
  return y;
}

bool SimulationReport::pass() const {
  return std::all_of(parts.begin(), parts.end(), [](const PartCheck& p) { return p.pass; }) &&
         std::all_of(contrasts.begin(), contrasts.end(), [](const ContrastCheck& c) { return c.pass; });
}

std::string SimulationReport::text() const {
  std::string out = fmt::format("{} draws, seed {}\n", draws, seed);
  out += "mean squares (expected, simulated mean, standard error):\n";
  for (const auto& p : parts)
    out += fmt::format("  {:<40} df {:>4}  {:>12.6g}  {:>12.6g}  {:>10.3g}  {}\n", p.label, p.df, p.expected, p.mean,
                       p.se, p.pass ? "ok" : "FAIL");
  if (!contrasts.empty()) out += "treatment differences (variance expected, simulated):\n";
  for (const auto& c : contrasts)
    out += fmt::format("  {:<40} t{}-t{}  {:>12.6g}  {:>12.6g}  mean {:.4g} (expected {:.4g})  {}\n", c.label, c.first,
                       c.second, c.expected_variance, c.variance, c.mean, c.expected_mean, c.pass ? "ok" : "FAIL");
  out += pass() ? "simulation agrees with the expected mean squares\n" : "simulation disagrees\n";
  return out;
}

std::vector<std::string> SimulationReport::records() const {
  using json = nlohmann::json;
  std::vector<std::string> out;
  for (const auto& p : parts)
    out.push_back(json{{"record", "simulated_mean_square"},
                       {"part", p.part},
                       {"label", p.label},
                       {"df", p.df},
                       {"expected", p.expected},
                       {"mean", p.mean},
                       {"se", p.se},
                       {"pass", p.pass}}
                      .dump());
  for (const auto& c : contrasts)
    out.push_back(json{{"record", "simulated_contrast"},
                       {"part", c.part},
                       {"label", c.label},
                       {"treatments", {c.first, c.second}},
                       {"expected_mean", c.expected_mean},
                       {"mean", c.mean},
                       {"mean_se", c.mean_se},
                       {"expected_variance", c.expected_variance},
                       {"variance", c.variance},
                       {"pass", c.pass}}
                      .dump());
  out.push_back(json{{"record", "simulation"}, {"draws", draws}, {"seed", seed}, {"pass", pass()}}.dump());
  return out;
}

SimulationReport simulate(const ExperimentChain& chain, const Decomposition& d, const AnovaTable& table,
                          const Vec& spectral, const Vec& tau, const SimulationOptions& opt) {
  if (opt.draws < 2) throw Error("simulation needs at least two draws");
  const ResponseModel model(chain, table, spectral, tau);
  const int L = chain.treatment_level();
  const int n = chain.observational_units();
  const double tol = chain.options().tol;

  SimulationReport rep;
  rep.draws = opt.draws;
  rep.seed = opt.seed;
  rep.ms_sigmas = opt.ms_sigmas;
  rep.variance_rel_tol = opt.variance_rel_tol;

  // All part bases side by side; each part's SS is a segment of the coordinates.
  Mat coords(n, n);
  std::vector<Eigen::Index> start;
  Eigen::Index col = 0;
  for (const auto& row : table.rows) {
    const Part& p = d.parts[row.part];
    coords.middleCols(col, p.rank) = p.basis;
    start.push_back(col);
    col += p.rank;
    PartCheck pc;
    pc.part = row.part;
    pc.label = row_label(row);
    pc.df = p.rank;
    pc.expected = ems_value(row, table, spectral) + (p.basis.transpose() * model.mean()).squaredNorm() / p.rank;
    rep.parts.push_back(pc);
  }
  coords.conservativeResize(Eigen::NoChange, col);
  const Mat coords_t = coords.transpose();

  // Linear statistics w'y for treatment differences estimated within one part; Var = w'Vw.
  const Mat v = variance_matrix(chain, table, spectral);
  const auto& assign = chain.assignment(L);
  const int t = chain.tier(L).units();
  std::vector<double> count(t, 0.0);
  for (int a : assign) count[a] += 1.0;
  std::vector<Vec> weights;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const Part& p = d.parts[table.rows[r].part];
    const int j = p.path[L];
    if (j < 0 || p.eff[L] <= tol) continue;
    const Mat br = chain.pushed_basis(L, j);
    int best = -1;
    double best_norm = tol;
    Vec best_diff;
    for (int b = 1; b < t; ++b) {
      Vec diff = Vec::Zero(n);
      for (int u = 0; u < n; ++u) {
        if (assign[u] == 0) diff(u) += 1.0 / count[0];
        if (assign[u] == b) diff(u) -= 1.0 / count[b];
      }
      const double norm = (br.transpose() * diff).norm();
      if (norm > best_norm + 1e-12) {
        best_norm = norm;
        best = b;
        best_diff = diff;
      }
    }
    if (best < 0) continue;
    ContrastCheck cc;
    cc.part = table.rows[r].part;
    cc.label = rep.parts[r].label;
    cc.first = 0;
    cc.second = best;
    const Vec rd = br * (br.transpose() * best_diff);
    cc.expected_mean = rd.dot(model.mean());
    weights.push_back(p.basis * (p.basis.transpose() * rd) / p.eff[L]);
    cc.expected_variance = weights.back().dot(v * weights.back());
    rep.contrasts.push_back(cc);
  }

  const long nchunks = (opt.draws + opt.chunk - 1) / opt.chunk;
  struct Acc {
    std::vector<Moments> ms, contrast;
  };
  std::vector<Acc> acc(static_cast<std::size_t>(nchunks));
  std::atomic<long> next{0};
  auto worker = [&] {
    for (long c = next++; c < nchunks; c = next++) {
      std::seed_seq seq{static_cast<std::uint32_t>(opt.seed), static_cast<std::uint32_t>(opt.seed >> 32),
                        static_cast<std::uint32_t>(c)};
      std::mt19937_64 rng(seq);
      Acc a{std::vector<Moments>(rep.parts.size()), std::vector<Moments>(weights.size())};
      const long lo = c * opt.chunk;
      const long hi = std::min(opt.draws, lo + opt.chunk);
      for (long i = lo; i < hi; ++i) {
        const Vec y = model.draw(rng);
        const Vec z = coords_t * y;
        for (std::size_t k = 0; k < rep.parts.size(); ++k)
          a.ms[k].add(z.segment(start[k], rep.parts[k].df).squaredNorm() / rep.parts[k].df);
        for (std::size_t k = 0; k < weights.size(); ++k) a.contrast[k].add(weights[k].dot(y));
      }
      acc[static_cast<std::size_t>(c)] = std::move(a);
    }
  };
  int threads = opt.threads > 0 ? opt.threads : static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min<int>(threads, static_cast<int>(nchunks)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  std::vector<Moments> ms(rep.parts.size()), con(weights.size());
  for (const auto& a : acc) {
    for (std::size_t k = 0; k < ms.size(); ++k) ms[k].merge(a.ms[k]);
    for (std::size_t k = 0; k < con.size(); ++k) con[k].merge(a.contrast[k]);
  }
  for (std::size_t k = 0; k < ms.size(); ++k) {
    auto& p = rep.parts[k];
    p.mean = ms[k].mean;
    p.se = ms[k].se();
    const double slack = std::max(opt.ms_sigmas * p.se, 1e-9 * std::max(1.0, std::abs(p.expected)));
    p.pass = std::abs(p.mean - p.expected) <= slack;
  }
  for (std::size_t k = 0; k < con.size(); ++k) {
    auto& c = rep.contrasts[k];
    c.mean = con[k].mean;
    c.mean_se = con[k].se();
    c.variance = con[k].variance();
    const bool mean_ok = std::abs(c.mean - c.expected_mean) <= std::max(opt.ms_sigmas * c.mean_se, 1e-9);
    const bool var_ok = std::abs(c.variance - c.expected_variance) <= opt.variance_rel_tol * c.expected_variance;
    c.pass = mean_ok && var_ok;
  }
  return rep;
}

}  // namespace tiered
