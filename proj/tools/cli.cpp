#include "cli.hpp"

#include "tiered/oracle.hpp"
#include "tiered/specio.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

namespace tiered::cli {

namespace {

using json = nlohmann::json;

struct Loaded {
  ExperimentChain chain;
  Decomposition d;
  AnovaTable table;
};

Loaded load(const std::string& path) {
  Loaded l{parse_design_spec(path), {}, {}};
  l.d = chain_decompose(l.chain);
  l.table = canonical_ems(skeleton_table(l.d, l.chain), l.chain);
  return l;
}

// Reads a file when it exists, otherwise treats the argument as inline text.
std::string file_or_inline(const std::string& arg) {
  if (std::filesystem::is_regular_file(arg)) {
    std::ifstream in(arg);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
  return arg;
}

std::vector<std::string> entries(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    const auto b = cur.find_first_not_of(" \t\r");
    if (b != std::string::npos) out.push_back(cur.substr(b, cur.find_last_not_of(" \t\r") - b + 1));
    cur.clear();
  };
  bool comment = false;
  for (char c : text) {
    if (c == '\n' || c == ',' || c == ';') {
      flush();
      comment = false;
    } else if (c == '#') {
      comment = true;
    } else if (!comment) {
      cur += c;
    }
  }
  flush();
  return out;
}

double parse_number(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(fmt::format("{}: '{}' is not a number", what, s));
  }
}

// Entries "id = value" or "id value"; ids may be spectral or canonical, ascii or symbols, and
// "*" sets every component not named otherwise.
Vec parse_components(const std::string& arg, const Loaded& l) {
  const auto& comps = l.table.components;
  const std::size_t nc = comps.size();
  std::vector<std::optional<double>> spec(nc), canon(nc);
  std::optional<double> fallback;
  for (const auto& e : entries(file_or_inline(arg))) {
    auto sep = e.find('=');
    if (sep == std::string::npos) sep = e.find_first_of(" \t");
    if (sep == std::string::npos) throw DataError(fmt::format("component entry '{}' has no value", e));
    std::string key = e.substr(0, sep);
    std::string val = e.substr(sep + 1);
    key.erase(key.find_last_not_of(" \t") + 1);
    val.erase(0, val.find_first_not_of(" \t"));
    const double v = parse_number(val, "component " + key);
    if (key == "*" || key == "all") {
      fallback = v;
      continue;
    }
    bool found = false;
    for (std::size_t c = 0; c < nc; ++c) {
      if (key == comps[c].id || key == comps[c].symbol) spec[c] = v, found = true;
      if (key == comps[c].canonical_id || key == comps[c].canonical_symbol) canon[c] = v, found = true;
    }
    if (!found) throw DataError(fmt::format("unknown component '{}'", key));
  }
  Vec out(static_cast<Eigen::Index>(nc));
  for (int lvl = 0; lvl < l.chain.treatment_level(); ++lvl) {
    const auto& s = l.chain.tier(lvl).structure;
    bool any_canon = false;
    for (std::size_t c = 0; c < nc; ++c)
      if (comps[c].level == lvl && canon[c]) any_canon = true;
    if (any_canon) {
      std::vector<double> psi(s.size());
      for (std::size_t c = 0; c < nc; ++c) {
        if (comps[c].level != lvl) continue;
        if (spec[c]) throw DataError("tier " + l.chain.tier(lvl).name + " mixes spectral and canonical components");
        if (!canon[c] && !fallback) throw DataError("missing value for component " + comps[c].canonical_id);
        psi[comps[c].gf] = canon[c] ? *canon[c] : *fallback;
      }
      const auto eta = spectral_from_canonical(s, psi);
      for (std::size_t c = 0; c < nc; ++c)
        if (comps[c].level == lvl) out(c) = eta[comps[c].gf];
    } else {
      for (std::size_t c = 0; c < nc; ++c) {
        if (comps[c].level != lvl) continue;
        if (!spec[c] && !fallback) throw DataError("missing value for component " + comps[c].id);
        out(c) = spec[c] ? *spec[c] : *fallback;
      }
    }
  }
  return out;
}

Vec parse_tau(const std::string& arg, const Loaded& l) {
  const int t = l.chain.tier(l.chain.treatment_level()).units();
  std::vector<double> vals;
  for (const auto& e : entries(file_or_inline(arg))) {
    std::istringstream in(e);
    std::string tok;
    while (in >> tok) vals.push_back(parse_number(tok, "treatment effect"));
  }
  if (static_cast<int>(vals.size()) != t)
    throw DataError(fmt::format("{} treatment effects given for {} treatments", vals.size(), t));
  return Eigen::Map<Vec>(vals.data(), t);
}

std::string row_label(const AnovaRow& row) {
  std::string s;
  for (const auto& x : row.sources)
    if (!x.empty()) s += (s.empty() ? "" : " / ") + x;
  return s;
}

const AnovaRow& row_of(const AnovaTable& t, int part) {
  for (const auto& r : t.rows)
    if (r.part == part) return r;
  throw Error("part without a table row");
}

json number(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

std::vector<std::string> efficiency_values(const AnovaTable& t) {
  std::vector<std::string> out;
  for (const auto& r : t.rows)
    for (const auto& e : r.efficiency)
      if (e && std::abs(*e - 1.0) > 1e-9) {
        const auto s = format_number(*e, t.snap_den);
        if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
      }
  return out;
}

std::string kind_name(ApplicabilityReport::Kind k) {
  switch (k) {
    case ApplicabilityReport::Kind::Full: return "full";
    case ApplicabilityReport::Kind::Partial: return "partial";
    case ApplicabilityReport::Kind::NotApplicable: return "not-applicable";
  }
  return "";
}

void emit_skeleton(const Loaded& l, bool as_json, bool canonical, std::ostream& out) {
  if (as_json) {
    for (const auto& rec : render_table_records(l.table)) out << rec << "\n";
    return;
  }
  out << render_table_text(l.table, false);
  if (canonical) out << "\n" << render_table_text(l.table, true);
}

void emit_check(const Loaded& l, bool as_json, std::ostream& out) {
  const auto effs = efficiency_values(l.table);
  const auto& app = l.d.applicability;
  const auto spectral = estimability_report(l.table, false);
  const auto canonical = estimability_report(l.table, true);
  if (as_json) {
    out << json{{"record", "check"},
                {"balanced", true},
                {"units", l.d.units},
                {"tiers", l.table.tiers},
                {"efficiency_factors", effs},
                {"applicability",
                 {{"kind", kind_name(app.kind)},
                  {"offending", app.offending},
                  {"split_treatments", app.split_treatments},
                  {"text", app.describe()}}}}
               .dump()
        << "\n";
    out << render_estimability_json(l.table, spectral) << "\n";
    out << render_estimability_json(l.table, canonical) << "\n";
    return;
  }
  std::string tiers;
  for (const auto& t : l.table.tiers) tiers += (tiers.empty() ? "" : " -> ") + t;
  out << fmt::format("chain: {} ({} observational units)\n", tiers, l.d.units);
  out << "balance: structure balanced at every tier\n";
  std::string list;
  for (const auto& e : effs) list += (list.empty() ? "" : ", ") + e;
  out << "efficiency factors: " << (list.empty() ? "all 1 (orthogonal)" : list) << "\n";
  out << "applicability: " << app.describe() << "\n";
  out << render_estimability_text(l.table, spectral);
  out << render_estimability_text(l.table, canonical);
}

void emit_fit(const Loaded& l, const FitResult& fit, bool as_json, std::ostream& out) {
  const auto& c = fit.components;
  const auto& comps = l.table.components;
  auto zeroed = [&](const std::string& id) {
    return std::find(c.constrained_zero.begin(), c.constrained_zero.end(), id) != c.constrained_zero.end();
  };
  if (as_json) {
    out << json{{"record", "fit"},
                {"method", fit.method},
                {"converged", c.converged},
                {"iterations", c.iterations},
                {"trajectory", fit.trajectory},
                {"vinv_defect", number(fit.vinv_defect)}}
               .dump()
        << "\n";
    for (const auto& m : fit.mean_squares)
      out << json{{"record", "mean_square"},
                  {"part", m.part},
                  {"label", row_label(row_of(l.table, m.part))},
                  {"df", m.df},
                  {"ss", m.ss},
                  {"ms", m.ms}}
                 .dump()
          << "\n";
    for (std::size_t i = 0; i < comps.size(); ++i)
      out << json{{"record", "component"},
                  {"id", comps[i].id},
                  {"symbol", comps[i].symbol},
                  {"spectral", c.spectral(i)},
                  {"canonical_id", comps[i].canonical_id},
                  {"canonical", c.canonical.size() ? number(c.canonical(i)) : json(nullptr)},
                  {"estimable", c.estimable[i]},
                  {"constrained_zero", zeroed(comps[i].id)}}
                 .dump()
          << "\n";
    for (const auto& [g, df] : c.effective_df)
      out << json{{"record", "effective_df"}, {"group", g}, {"df", df}}.dump() << "\n";
    for (double v : c.defects) out << json{{"record", "defect"}, {"value", v}}.dump() << "\n";
    for (const auto& e : fit.effects)
      out << json{{"record", "effect"},
                  {"source", e.source},
                  {"label", e.label},
                  {"part", e.part},
                  {"efficiency", e.efficiency},
                  {"variance", number(e.variance)},
                  {"treatment_values", std::vector<double>(e.treatment_values.begin(), e.treatment_values.end())}}
                 .dump()
          << "\n";
    return;
  }
  out << "method: " << fit.method;
  if (c.iterations > 0) out << fmt::format(" ({} after {} iterations)", c.converged ? "converged" : "not converged", c.iterations);
  out << "\n";
  if (std::isfinite(fit.vinv_defect)) out << fmt::format("closed-form inverse check: max |V V^-1 - I| = {:.3g}\n", fit.vinv_defect);
  out << "mean squares:\n";
  for (const auto& r : l.table.rows) {
    const auto& m = fit.mean_squares[r.part];
    out << fmt::format("  {:<44} {:>5} {:>14.6g} {:>14.6g}\n", row_label(r), m.df, m.ss, m.ms);
  }
  out << "components:\n";
  for (std::size_t i = 0; i < comps.size(); ++i) {
    std::string note;
    if (zeroed(comps[i].id)) note = "  set to zero";
    else if (!c.estimable[i]) note = "  not estimable";
    out << fmt::format("  {:<12} {:>14.6g}", comps[i].symbol, c.spectral(i));
    if (c.canonical.size()) out << fmt::format("   {:<12} {:>14.6g}", comps[i].canonical_symbol, c.canonical(i));
    out << note << "\n";
  }
  for (const auto& [g, df] : c.effective_df) out << fmt::format("  effective df {:<36} {:.4g}\n", g, df);
  for (double v : c.defects) out << fmt::format("  consistency defect of dependent mean squares: {:.6g}\n", v);
  out << "effects:\n";
  for (const auto& e : fit.effects) {
    std::string where = e.part >= 0 ? " from " + row_label(row_of(l.table, e.part)) : "";
    out << fmt::format("  {}{}  variance factor {}\n", e.label, where,
                       std::isfinite(e.variance) ? fmt::format("{:.6g}", e.variance) : std::string("unknown"));
    std::string vals;
    for (Eigen::Index i = 0; i < e.treatment_values.size(); ++i) vals += fmt::format(" {:.6g}", e.treatment_values(i));
    out << "    treatment values:" << vals << "\n";
  }
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Skeleton anova, estimation and simulation for chains of randomizations"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "tiered 0.1.0");

  std::string spec_path, data_path, response, components_arg, tau_arg;
  bool as_json = false, canonical = false, anova = false, combine = false, gls = false, strict = false;
  long draws = 100000;
  std::uint64_t seed = 1;
  int threads = 0;

  auto* skel = app.add_subcommand("skeleton", "print the skeleton anova table");
  skel->add_option("spec", spec_path, "design spec file")->required();
  skel->add_flag("--json", as_json, "line-delimited JSON records");
  skel->add_flag("--canonical", canonical, "also print canonical-component EMS");

  auto* check = app.add_subcommand("check", "balance, efficiency, applicability and estimability report");
  check->add_option("spec", spec_path, "design spec file")->required();
  check->add_flag("--json", as_json, "line-delimited JSON records");

  auto* fit = app.add_subcommand("fit", "estimate treatment effects and variance components");
  fit->add_option("spec", spec_path, "design spec file")->required();
  fit->add_option("--data", data_path, "CSV file, one row per observational unit")->required();
  fit->add_option("--response", response, "response column (default: last numeric column)");
  auto* m1 = fit->add_flag("--anova", anova, "stratum-wise anova estimates");
  auto* m2 = fit->add_flag("--combine", combine, "combine information across strata");
  auto* m3 = fit->add_flag("--gls", gls, "GLS at given components, or at combined estimates");
  m1->excludes(m2)->excludes(m3);
  m2->excludes(m3);
  fit->add_option("--components", components_arg, "component values: file or inline 'id=value,...'");
  fit->add_flag("--json", as_json, "line-delimited JSON records");

  auto* sim = app.add_subcommand("simulate", "Monte Carlo check of expected mean squares");
  sim->add_option("spec", spec_path, "design spec file")->required();
  sim->add_option("--components", components_arg, "true components: file or inline 'id=value,...'")->required();
  sim->add_option("--tau", tau_arg, "treatment effects: file or inline list (default zero)");
  sim->add_option("--draws", draws, "number of draws")->check(CLI::Range(2L, 1000000000L));
  sim->add_option("--seed", seed, "random seed");
  sim->add_option("--threads", threads, "worker threads (0: all cores)")->check(CLI::NonNegativeNumber);
  sim->add_flag("--strict", strict, "exit 1 when a check fails");
  sim->add_flag("--json", as_json, "line-delimited JSON records");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    const Loaded l = load(spec_path);
    if (*skel) {
      emit_skeleton(l, as_json, canonical, out);
    } else if (*check) {
      emit_check(l, as_json, out);
    } else if (*fit) {
      const Vec y = read_data_csv(data_path, l.chain, response);
      FitResult result;
      if (gls) {
        if (!components_arg.empty()) {
          result = gls_fit(y, l.chain, l.d, l.table, parse_components(components_arg, l));
        } else {
          const FitResult comb = combine_information(y, l.chain, l.d, l.table);
          Vec at = comb.components.spectral;
          result = gls_fit(y, l.chain, l.d, l.table, at);
          result.method = "gls-egls";
          result.components = comb.components;
        }
      } else if (combine) {
        std::optional<ComponentEstimates> init;
        if (!components_arg.empty()) {
          ComponentEstimates c;
          for (const auto& comp : l.table.components) c.ids.push_back(comp.id);
          c.spectral = parse_components(components_arg, l);
          c.estimable.assign(c.ids.size(), true);
          init = c;
        }
        result = combine_information(y, l.chain, l.d, l.table, init ? &*init : nullptr);
      } else {
        result = anova_fit(y, l.chain, l.d, l.table);
      }
      emit_fit(l, result, as_json, out);
    } else if (*sim) {
      const Vec comps = parse_components(components_arg, l);
      const int t = l.chain.tier(l.chain.treatment_level()).units();
      const Vec tau = tau_arg.empty() ? Vec::Zero(t) : parse_tau(tau_arg, l);
      SimulationOptions so;
      so.draws = draws;
      so.seed = seed;
      so.threads = threads;
      const auto rep = simulate(l.chain, l.d, l.table, comps, tau, so);
      if (as_json) {
        for (const auto& r : rep.records()) out << r << "\n";
      } else {
        out << rep.text();
      }
      if (strict && !rep.pass()) return kRuntime;
    }
  } catch (const SpecError& e) {
    err << "spec error: " << e.what() << "\n";
    return kSpec;
  } catch (const ApplicabilityError& e) {
    err << "method not applicable: " << e.what() << "\n";
    return kApplicability;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const BalanceError& e) {
    err << "balance error: " << e.what() << "\n";
    return kDesign;
  } catch (const ChainError& e) {
    err << "chain error: " << e.what() << "\n";
    return kDesign;
  } catch (const StructureError& e) {
    err << "structure error: " << e.what() << "\n";
    return kDesign;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}

}  // namespace tiered::cli
