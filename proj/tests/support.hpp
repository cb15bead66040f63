#pragma once

#include "tiered/estimation.hpp"
#include "tiered/oracle.hpp"
#include "tiered/specio.hpp"

#include <string>

namespace tiered::test {

inline std::string spec_path(const std::string& name) { return std::string(TIERED_SPEC_DIR) + "/" + name + ".spec"; }

struct Design {
  ExperimentChain chain;
  Decomposition d;
  AnovaTable table;
};

inline Design load(const std::string& name) {
  Design x{parse_design_spec(spec_path(name)), {}, {}};
  x.d = chain_decompose(x.chain);
  x.table = canonical_ems(skeleton_table(x.d, x.chain), x.chain);
  return x;
}

inline int component(const AnovaTable& t, const std::string& id) {
  for (std::size_t c = 0; c < t.components.size(); ++c)
    if (t.components[c].id == id) return static_cast<int>(c);
  return -1;
}

inline std::string row_label(const AnovaRow& row) {
  std::string s;
  for (const auto& x : row.sources)
    if (!x.empty()) s += (s.empty() ? "" : " / ") + x;
  return s;
}

inline const AnovaRow* find_row(const AnovaTable& t, const std::string& label) {
  for (const auto& r : t.rows)
    if (row_label(r) == label) return &r;
  return nullptr;
}

}  // namespace tiered::test
