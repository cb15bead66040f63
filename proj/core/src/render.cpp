#include "tiered/skeleton.hpp"

#include <fmt/format.h>

#include <json.hpp>

#include <algorithm>

namespace tiered {

namespace {

using json = nlohmann::json;

std::size_t display_width(const std::string& s) {
  std::size_t w = 0;
  for (unsigned char c : s)
    if ((c & 0xC0) != 0x80) ++w;
  return w;
}

std::string pad(const std::string& s, std::size_t width, bool right = false) {
  const std::size_t w = display_width(s);
  const std::string fill(width > w ? width - w : 0, ' ');
  return right ? fill + s : s + fill;
}

json terms_json(const std::vector<EmsTerm>& terms) {
  json a = json::array();
  for (const auto& t : terms)
    a.push_back({{"id", t.id},
                 {"symbol", t.symbol},
                 {"efficiency", t.efficiency},
                 {"multiplier", t.multiplier},
                 {"coefficient", t.coefficient()}});
  return a;
}

}  // namespace

std::string render_table_text(const AnovaTable& table, bool canonical) {
  const std::size_t ntiers = table.tiers.size();
  const auto effcols = table.efficiency_columns();
  std::vector<std::vector<std::string>> cells;

  std::vector<std::string> header;
  for (std::size_t l = 0; l < ntiers; ++l) {
    header.push_back(table.tiers[l] + " sources");
    header.push_back("df");
    if (effcols[l]) header.push_back("eff.");
  }
  header.push_back(canonical ? "expected mean squares (canonical)" : "expected mean squares");
  cells.push_back(header);

  for (const auto& r : table.rows) {
    std::vector<std::string> line;
    for (std::size_t l = 0; l < ntiers; ++l) {
      const bool show = r.starts[l] && !r.sources[l].empty();
      line.push_back(show ? r.sources[l] : "");
      line.push_back(show ? std::to_string(r.entry_df[l]) : "");
      if (effcols[l])
        line.push_back(show && r.efficiency[l] ? format_number(*r.efficiency[l], table.snap_den) : "");
    }
    line.push_back(canonical ? r.ems.canonical_text(table.snap_den) : r.ems.spectral_text(table.snap_den));
    cells.push_back(line);
  }

  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], display_width(line[c]));

  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    std::string text;
    std::size_t c = 0;
    for (std::size_t l = 0; l < ntiers; ++l) {
      text += pad(cells[i][c], width[c]) + " " + pad(cells[i][c + 1], width[c + 1], true) + "  ";
      c += 2;
      if (effcols[l]) {
        text += pad(cells[i][c], width[c]) + "  ";
        ++c;
      }
    }
    text += cells[i][c];
    while (!text.empty() && text.back() == ' ') text.pop_back();
    out += text + "\n";
    if (i == 0) out += std::string(display_width(text), '-') + "\n";
  }
  out += fmt::format("total df {}\n", table.total_df());
  return out;
}

std::vector<std::string> render_table_records(const AnovaTable& table) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& r = table.rows[i];
    json eff = json::array();
    for (const auto& e : r.efficiency) eff.push_back(e ? json(*e) : json(nullptr));
    json rec = {{"record", "anova_row"},
                {"row", i},
                {"tiers", table.tiers},
                {"sources", r.sources},
                {"df", r.df},
                {"entry_df", r.entry_df},
                {"efficiency", eff},
                {"in_pstar_q", r.in_pstar_q},
                {"ems",
                 {{"spectral", terms_json(r.ems.spectral)},
                  {"canonical", terms_json(r.ems.canonical)},
                  {"quadratic", terms_json(r.ems.quadratic)}}},
                {"ems_text", r.ems.spectral_text(table.snap_den)}};
    if (table.has_canonical) rec["canonical_text"] = r.ems.canonical_text(table.snap_den);
    out.push_back(rec.dump());
  }
  return out;
}

std::string render_estimability_text(const AnovaTable& table, const EstimabilityReport& rep) {
  const auto list = [](const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
    return s.empty() ? std::string("none") : s;
  };
  std::string out = fmt::format("{} components\n", rep.canonical ? "canonical" : "spectral");
  out += "  estimable: " + list(rep.estimable) + "\n";
  std::vector<std::string> sums;
  for (const auto& lc : rep.confounded_sums) sums.push_back(lc.text(table.snap_den));
  out += "  estimable only as sums: " + list(sums) + "\n";
  out += "  never estimable: " + list(rep.never_estimable) + "\n";
  if (!rep.negative_risk.empty()) out += "  estimated by differences of mean squares: " + list(rep.negative_risk) + "\n";
  if (rep.ldcvs) {
    out += "  linearly dependent expected mean squares:\n";
    for (const auto& dep : rep.dependencies) {
      LinearCombination lc;
      for (std::size_t i = 0; i < dep.size(); ++i) {
        if (dep[i] == 0.0) continue;
        const auto& row = table.rows[rep.rows[i]];
        std::string name;
        for (const auto& s : row.sources)
          if (!s.empty()) name += (name.empty() ? "" : " / ") + s;
        lc.terms.emplace_back("MS(" + name + ")", dep[i]);
      }
      out += "    " + lc.text(table.snap_den) + " = 0\n";
    }
  }
  return out;
}

std::string render_estimability_json(const AnovaTable& table, const EstimabilityReport& rep) {
  json sums = json::array();
  for (const auto& lc : rep.confounded_sums) {
    json terms = json::array();
    for (const auto& [sym, c] : lc.terms) terms.push_back({{"component", sym}, {"coefficient", c}});
    sums.push_back({{"text", lc.text(table.snap_den)}, {"terms", terms}});
  }
  json rec = {{"record", "estimability"},
              {"form", rep.canonical ? "canonical" : "spectral"},
              {"estimable", rep.estimable},
              {"confounded_sums", sums},
              {"never_estimable", rep.never_estimable},
              {"ldcvs", rep.ldcvs},
              {"rows", rep.rows},
              {"dependencies", rep.dependencies},
              {"negative_risk", rep.negative_risk}};
  return rec.dump();
}

}  // namespace tiered
