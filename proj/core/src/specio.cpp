#include "tiered/specio.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

namespace tiered {

namespace {

struct FactorDecl {
  std::string name, abbrev, title;
  int nlevels = 0;
  std::vector<std::string> in;
  std::vector<int> codes;
  bool has_codes = false;
  bool pseudo = false;
  int line = 0;
};

struct TermDecl {
  std::string name, abbrev;
  std::vector<std::vector<std::string>> products;
  int line = 0;
};

struct TierDecl {
  std::string name;
  bool treatments = false;
  int line = 0;
  std::vector<FactorDecl> factors;
  std::vector<TermDecl> terms;
};

struct MapDecl {
  std::string from, to;
  std::optional<int> replication;
  std::vector<int> assign;
  bool has_assign = false;
  int line = 0;
};

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string t; is >> t;) out.push_back(t);
  return out;
}

int parse_int(const std::string& tok, int line, const char* what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw SpecError(fmt::format("line {}: expected an integer {} but found '{}'", line, what, tok), line);
  }
}

double parse_double(const std::string& tok, int line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw SpecError(fmt::format("line {}: expected a number but found '{}'", line, tok), line);
  }
}

void set_option(Options& o, const std::string& key, const std::string& value, int line) {
  if (key == "tol") o.tol = parse_double(value, line);
  else if (key == "rank_tol") o.rank_tol = parse_double(value, line);
  else if (key == "pinv_rel") o.pinv_rel = parse_double(value, line);
  else if (key == "snap_den") o.snap_den = parse_int(value, line, "snap_den");
  else if (key == "snap_tol") o.snap_tol = parse_double(value, line);
  else if (key == "residual_trace") o.residual_trace = parse_double(value, line);
  else if (key == "damping") o.damping = parse_double(value, line);
  else if (key == "iter_tol") o.iter_tol = parse_double(value, line);
  else if (key == "max_iter") o.max_iter = parse_int(value, line, "max_iter");
  else if (key == "full_check_units") o.full_check_units = parse_int(value, line, "full_check_units");
  else throw SpecError(fmt::format("line {}: unknown option '{}'", line, key), line);
}

FactorDecl parse_factor(const std::vector<std::string>& tok, int line, std::vector<int>*& codes_target) {
  FactorDecl f;
  f.line = line;
  f.pseudo = tok[0] == "pseudo";
  if (tok.size() < 3) throw SpecError(fmt::format("line {}: expected '{} NAME LEVELS'", line, tok[0]), line);
  f.name = tok[1];
  f.nlevels = parse_int(tok[2], line, "level count");
  if (f.nlevels < 1) throw SpecError(fmt::format("line {}: factor {} needs at least one level", line, f.name), line);
  f.abbrev = f.name.substr(0, 1);
  std::size_t i = 3;
  while (i < tok.size()) {
    if (tok[i] == "abbrev" || tok[i] == "title") {
      if (i + 1 >= tok.size()) throw SpecError(fmt::format("line {}: '{}' needs a value", line, tok[i]), line);
      (tok[i] == "abbrev" ? f.abbrev : f.title) = tok[i + 1];
      i += 2;
    } else if (tok[i] == "in") {
      ++i;
      while (i < tok.size() && tok[i] != "abbrev" && tok[i] != "title" && tok[i] != "=") f.in.push_back(tok[i++]);
      if (f.in.empty()) throw SpecError(fmt::format("line {}: 'in' needs at least one factor", line), line);
    } else if (tok[i] == "=") {
      f.has_codes = true;
      for (++i; i < tok.size(); ++i) f.codes.push_back(parse_int(tok[i], line, "level code"));
    } else {
      throw SpecError(fmt::format("line {}: unexpected '{}'", line, tok[i]), line);
    }
  }
  if (f.pseudo && !f.has_codes) throw SpecError(fmt::format("line {}: pseudofactor {} needs '= codes'", line, f.name), line);
  codes_target = f.has_codes ? &f.codes : nullptr;
  return f;
}

TermDecl parse_term(const std::string& rest, int line) {
  TermDecl t;
  t.line = line;
  std::string body = rest;
  const auto eq = rest.find('=');
  if (eq != std::string::npos) {
    const auto head = split_ws(rest.substr(0, eq));
    if (head.empty()) throw SpecError(fmt::format("line {}: named term needs a name", line), line);
    t.name = head[0];
    if (head.size() == 3 && head[1] == "abbrev") t.abbrev = head[2];
    else if (head.size() != 1) throw SpecError(fmt::format("line {}: expected 'term NAME [abbrev X] = ...'", line), line);
    body = rest.substr(eq + 1);
  }
  std::string cleaned;
  for (char c : body) cleaned += c == '+' ? ' ' : c;
  for (const auto& prod : split_ws(cleaned)) {
    std::vector<std::string> fs;
    std::stringstream ss(prod);
    for (std::string f; std::getline(ss, f, '*');)
      if (!f.empty()) fs.push_back(f);
    if (fs.empty()) throw SpecError(fmt::format("line {}: empty product in term", line), line);
    t.products.push_back(fs);
  }
  if (t.products.empty()) throw SpecError(fmt::format("line {}: term lists no factors", line), line);
  if (t.name.empty() && t.products.size() > 1)
    throw SpecError(fmt::format("line {}: a term summing several products needs a name", line), line);
  return t;
}

Tier build_tier(const TierDecl& td) {
  long long n = 1;
  for (const auto& f : td.factors)
    if (!f.pseudo) n *= f.nlevels;
  if (n > 20000) throw SpecError(fmt::format("tier {} has too many units ({})", td.name, n), td.line);

  std::vector<Factor> factors;
  auto find = [&](const std::string& key) {
    for (std::size_t i = 0; i < td.factors.size(); ++i)
      if (td.factors[i].name == key || td.factors[i].abbrev == key) return static_cast<int>(i);
    return -1;
  };
  std::vector<int> radix;
  for (const auto& f : td.factors)
    if (!f.pseudo) radix.push_back(f.nlevels);

  int real_index = 0;
  for (const auto& fd : td.factors) {
    Factor f;
    f.name = fd.name;
    f.abbrev = fd.abbrev;
    f.title = fd.title;
    f.nlevels = fd.nlevels;
    f.pseudo = fd.pseudo;
    for (const auto& a : fd.in) {
      const int idx = find(a);
      if (idx < 0) throw SpecError(fmt::format("line {}: factor {} is nested in unknown factor '{}'", fd.line, fd.name, a), fd.line);
      f.nested_in.push_back(idx);
    }
    if (fd.has_codes) {
      if (static_cast<long long>(fd.codes.size()) != n)
        throw SpecError(fmt::format("line {}: factor {} has {} codes for {} units of tier {}", fd.line, fd.name,
                                    fd.codes.size(), n, td.name), fd.line);
      f.levels = fd.codes;
    } else {
      f.levels.resize(n);
      long long stride = 1;
      for (std::size_t k = real_index + 1; k < radix.size(); ++k) stride *= radix[k];
      for (long long u = 0; u < n; ++u) f.levels[u] = static_cast<int>((u / stride) % fd.nlevels);
    }
    if (!fd.pseudo) ++real_index;
    factors.push_back(std::move(f));
  }

  Tier t;
  t.name = td.name;
  try {
    t.structure = PosetBlockStructure(static_cast<int>(n), std::move(factors));
  } catch (const StructureError& e) {
    throw StructureError(fmt::format("tier {}: {}", td.name, e.what()));
  }
  for (const auto& tdcl : td.terms) {
    TermSpec ts;
    ts.name = tdcl.name;
    ts.abbrev = tdcl.abbrev;
    for (const auto& prod : tdcl.products) {
      std::vector<int> idx;
      for (const auto& f : prod) {
        const int i = find(f);
        if (i < 0) throw SpecError(fmt::format("line {}: term uses unknown factor '{}'", tdcl.line, f), tdcl.line);
        idx.push_back(i);
      }
      ts.products.push_back(idx);
    }
    t.terms.push_back(std::move(ts));
  }
  return t;
}

}  // namespace

ExperimentChain parse_design_spec_text(const std::string& text, const Options& base) {
  Options opt = base;
  std::vector<TierDecl> tiers;
  std::vector<MapDecl> maps;
  enum class Section { None, Options, Tier, Map } section = Section::None;
  std::vector<int>* codes_target = nullptr;

  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (s.empty()) continue;

    if (std::isdigit(static_cast<unsigned char>(s[0])) || (s[0] == '-' && s.size() > 1)) {
      if (!codes_target) throw SpecError(fmt::format("line {}: continuation line without a code list", line), line);
      for (const auto& t : split_ws(s)) codes_target->push_back(parse_int(t, line, "code"));
      continue;
    }
    codes_target = nullptr;

    if (s.front() == '[') {
      if (s.back() != ']') throw SpecError(fmt::format("line {}: unterminated section header", line), line);
      const auto tok = split_ws(s.substr(1, s.size() - 2));
      if (tok.empty()) throw SpecError(fmt::format("line {}: empty section header", line), line);
      if (tok[0] == "options" && tok.size() == 1) {
        section = Section::Options;
      } else if ((tok[0] == "tier" || tok[0] == "treatments") && tok.size() == 2) {
        if (!tiers.empty() && tiers.back().treatments)
          throw SpecError(fmt::format("line {}: no tier may follow the treatments", line), line);
        tiers.push_back({tok[1], tok[0] == "treatments", line, {}, {}});
        section = Section::Tier;
      } else if (tok[0] == "map" && tok.size() == 4 && tok[2] == "->") {
        maps.push_back({tok[1], tok[3], std::nullopt, {}, false, line});
        section = Section::Map;
      } else {
        throw SpecError(fmt::format("line {}: unknown section '{}'", line, s), line);
      }
      continue;
    }

    const auto tok = split_ws(s);
    switch (section) {
      case Section::None:
        throw SpecError(fmt::format("line {}: content outside a section", line), line);
      case Section::Options: {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw SpecError(fmt::format("line {}: expected 'key = value'", line), line);
        set_option(opt, trim(s.substr(0, eq)), trim(s.substr(eq + 1)), line);
        break;
      }
      case Section::Tier: {
        auto& t = tiers.back();
        if (tok[0] == "factor" || tok[0] == "pseudo") {
          t.factors.push_back(parse_factor(tok, line, codes_target));
          codes_target = t.factors.back().has_codes ? &t.factors.back().codes : nullptr;
        } else if (tok[0] == "term") {
          t.terms.push_back(parse_term(trim(s.substr(4)), line));
        } else {
          throw SpecError(fmt::format("line {}: expected 'factor', 'pseudo' or 'term'", line), line);
        }
        break;
      }
      case Section::Map: {
        auto& m = maps.back();
        if (tok[0] == "replication" && tok.size() == 2) {
          m.replication = parse_int(tok[1], line, "replication");
        } else if (tok[0] == "assign" && tok.size() >= 2 && tok[1] == "=") {
          m.has_assign = true;
          for (std::size_t i = 2; i < tok.size(); ++i) m.assign.push_back(parse_int(tok[i], line, "index"));
          codes_target = &m.assign;
        } else {
          throw SpecError(fmt::format("line {}: expected 'replication N' or 'assign = ...'", line), line);
        }
        break;
      }
    }
  }

  if (tiers.size() < 2) throw SpecError("a design needs at least one unit tier and a treatments section", line);
  if (!tiers.back().treatments) throw SpecError("the last tier must be a [treatments NAME] section", tiers.back().line);
  for (std::size_t i = 0; i + 1 < tiers.size(); ++i)
    if (tiers[i].treatments) throw SpecError("only the last tier may be treatments", tiers[i].line);
  for (const auto& t : tiers)
    if (t.factors.empty()) throw SpecError(fmt::format("tier {} declares no factors", t.name), t.line);

  std::vector<Tier> built;
  for (const auto& td : tiers) built.push_back(build_tier(td));

  if (maps.size() != tiers.size() - 1)
    throw SpecError(fmt::format("{} tiers need {} maps, found {}", tiers.size(), tiers.size() - 1, maps.size()), line);
  std::vector<DesignMap> dm;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto& m = maps[i];
    if (m.from != tiers[i].name || m.to != tiers[i + 1].name)
      throw SpecError(fmt::format("line {}: map {} -> {} should be {} -> {}", m.line, m.from, m.to, tiers[i].name,
                                  tiers[i + 1].name), m.line);
    if (!m.has_assign) throw SpecError(fmt::format("line {}: map {} -> {} has no assignment", m.line, m.from, m.to), m.line);
    DesignMap d{m.from + " -> " + m.to, built[i].units(), built[i + 1].units(), m.assign};
    if (static_cast<int>(d.assignment.size()) != d.source_units)
      throw SpecError(fmt::format("line {}: map {} assigns {} units but tier {} has {}", m.line, d.name,
                                  d.assignment.size(), m.from, d.source_units), m.line);
    for (int a : d.assignment)
      if (a < 0 || a >= d.target_units)
        throw SpecError(fmt::format("line {}: map {} uses index {} outside 0..{}", m.line, d.name, a, d.target_units - 1), m.line);
    if (m.replication) {
      const auto counts = d.counts();
      std::vector<int> distinct(counts.begin(), counts.end());
      std::sort(distinct.begin(), distinct.end());
      distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
      if (distinct.size() != 1 || distinct[0] != *m.replication) {
        std::string got;
        for (std::size_t k = 0; k < distinct.size(); ++k) got += (k ? "," : "") + std::to_string(distinct[k]);
        throw ChainError(fmt::format("map {} declares replication {} but its assignment gives replication {{{}}}",
                                     d.name, *m.replication, got));
      }
    }
    dm.push_back(std::move(d));
  }
  return ExperimentChain(std::move(built), std::move(dm), opt);
}

ExperimentChain parse_design_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw SpecError("cannot open design file " + path, 0);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_design_spec_text(ss.str());
}

std::string render_spec(const ExperimentChain& chain) {
  std::string out;
  const Options& o = chain.options();
  out += "[options]\n";
  out += fmt::format("tol = {}\nrank_tol = {}\npinv_rel = {}\nsnap_den = {}\nsnap_tol = {}\n", o.tol, o.rank_tol,
                     o.pinv_rel, o.snap_den, o.snap_tol);
  out += fmt::format("residual_trace = {}\ndamping = {}\niter_tol = {}\nmax_iter = {}\nfull_check_units = {}\n",
                     o.residual_trace, o.damping, o.iter_tol, o.max_iter, o.full_check_units);

  auto codes_line = [](const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i && i % 32 == 0) s += "\n ";
      s += " " + std::to_string(v[i]);
    }
    return s;
  };

  for (int l = 0; l < chain.levels(); ++l) {
    const auto& t = chain.tier(l);
    out += fmt::format("\n[{} {}]\n", l == chain.treatment_level() ? "treatments" : "tier", t.name);
    const auto& fs = t.structure.factors();
    std::vector<int> radix;
    for (const auto& f : fs)
      if (!f.pseudo && !f.automatic) radix.push_back(f.nlevels);
    int real_index = 0;
    for (const auto& f : fs) {
      if (f.automatic) continue;
      out += fmt::format("{} {} {}", f.pseudo ? "pseudo" : "factor", f.name, f.nlevels);
      if (f.abbrev != f.name.substr(0, 1)) out += " abbrev " + f.abbrev;
      if (!f.title.empty()) out += " title " + f.title;
      if (!f.nested_in.empty()) {
        out += " in";
        for (int a : f.nested_in) out += " " + fs[a].name;
      }
      bool generated = !f.pseudo;
      if (generated) {
        long long stride = 1;
        for (std::size_t k = real_index + 1; k < radix.size(); ++k) stride *= radix[k];
        for (std::size_t u = 0; u < f.levels.size() && generated; ++u)
          generated = f.levels[u] == static_cast<int>((static_cast<long long>(u) / stride) % f.nlevels);
        ++real_index;
      }
      if (!generated) out += " =" + codes_line(f.levels);
      out += "\n";
    }
    for (const auto& term : t.terms) {
      out += "term ";
      if (!term.name.empty()) {
        out += term.name;
        if (!term.abbrev.empty()) out += " abbrev " + term.abbrev;
        out += " = ";
      }
      for (std::size_t p = 0; p < term.products.size(); ++p) {
        if (p) out += " + ";
        for (std::size_t k = 0; k < term.products[p].size(); ++k) out += (k ? "*" : "") + fs[term.products[p][k]].name;
      }
      out += "\n";
    }
  }
  for (int l = 0; l + 1 < chain.levels(); ++l) {
    const auto& m = chain.maps()[l];
    out += fmt::format("\n[map {} -> {}]\n", chain.tier(l).name, chain.tier(l + 1).name);
    const auto rep = check_equireplicate(m, true);
    if (rep.equal) out += fmt::format("replication {}\n", rep.r);
    out += "assign =" + codes_line(m.assignment) + "\n";
  }
  return out;
}

DataFile read_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open data file " + path);
  DataFile d;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::stringstream ss(s);
    for (std::string c; std::getline(ss, c, ',');) {
      c = trim(c);
      if (c.size() >= 2 && c.front() == '"' && c.back() == '"') c = c.substr(1, c.size() - 2);
      cells.push_back(c);
    }
    if (!s.empty() && s.back() == ',') cells.emplace_back();
    return cells;
  };
  while (std::getline(f, line)) {
    if (trim(line).empty()) continue;
    if (d.columns.empty()) {
      d.columns = split(trim(line));
      continue;
    }
    auto cells = split(trim(line));
    if (cells.size() != d.columns.size())
      throw DataError(fmt::format("data row {} has {} fields, header has {}", d.rows.size() + 1, cells.size(), d.columns.size()));
    d.rows.push_back(std::move(cells));
  }
  if (d.columns.empty()) throw DataError("data file " + path + " is empty");
  return d;
}

Vec response_vector(const DataFile& data, const ExperimentChain& chain, const std::string& response) {
  const auto& s = chain.tier(0).structure;
  const int n = s.unit_count();
  if (static_cast<int>(data.rows.size()) != n)
    throw DataError(fmt::format("data has {} rows, the observational tier has {} units", data.rows.size(), n));

  std::vector<int> factor_cols, factor_idx;
  for (std::size_t i = 0; i < s.factors().size(); ++i) {
    const auto& f = s.factors()[i];
    if (f.automatic || f.pseudo) continue;
    auto it = std::find(data.columns.begin(), data.columns.end(), f.name);
    if (it == data.columns.end()) continue;
    factor_cols.push_back(static_cast<int>(it - data.columns.begin()));
    factor_idx.push_back(static_cast<int>(i));
  }

  int rcol = -1;
  if (!response.empty()) {
    auto it = std::find(data.columns.begin(), data.columns.end(), response);
    if (it == data.columns.end()) throw DataError("no response column named " + response);
    rcol = static_cast<int>(it - data.columns.begin());
  } else {
    for (std::size_t c = 0; c < data.columns.size(); ++c)
      if (std::find(factor_cols.begin(), factor_cols.end(), static_cast<int>(c)) == factor_cols.end()) {
        rcol = static_cast<int>(c);
        break;
      }
    if (rcol < 0) throw DataError("data has no response column");
  }

  std::map<std::vector<int>, int> unit_of;
  if (!factor_cols.empty()) {
    for (int u = 0; u < n; ++u) {
      std::vector<int> key;
      for (int fi : factor_idx) key.push_back(s.factors()[fi].levels[u]);
      if (!unit_of.emplace(key, u).second)
        throw DataError("the data's factor columns do not identify observational units uniquely");
    }
  }

  // Level codes are 0-based; a column whose smallest code is 1 is read as 1-based.
  std::vector<std::vector<int>> codes(factor_cols.size(), std::vector<int>(n));
  for (std::size_t k = 0; k < factor_cols.size(); ++k) {
    for (int r = 0; r < n; ++r) {
      const auto& cell = data.rows[r][factor_cols[k]];
      try {
        std::size_t used = 0;
        codes[k][r] = std::stoi(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw DataError(fmt::format("data row {}: '{}' is not a level code", r + 1, cell));
      }
    }
    if (n > 0 && *std::min_element(codes[k].begin(), codes[k].end()) == 1)
      for (auto& c : codes[k]) --c;
  }

  Vec y(n);
  std::vector<bool> seen(n, false);
  for (int r = 0; r < n; ++r) {
    const auto& row = data.rows[r];
    int u = r;
    if (!factor_cols.empty()) {
      std::vector<int> key;
      for (const auto& col : codes) key.push_back(col[r]);
      auto it = unit_of.find(key);
      if (it == unit_of.end()) throw DataError(fmt::format("data row {} matches no observational unit", r + 1));
      u = it->second;
    }
    if (seen[u]) throw DataError(fmt::format("data row {} repeats an observational unit", r + 1));
    seen[u] = true;
    try {
      std::size_t used = 0;
      y(u) = std::stod(row[rcol], &used);
      if (used != row[rcol].size()) throw std::invalid_argument(row[rcol]);
    } catch (const std::exception&) {
      throw DataError(fmt::format("data row {}: response '{}' is not a number", r + 1, row[rcol]));
    }
  }
  return y;
}

Vec read_data_csv(const std::string& path, const ExperimentChain& chain, const std::string& response) {
  return response_vector(read_csv(path), chain, response);
}

}  // namespace tiered
