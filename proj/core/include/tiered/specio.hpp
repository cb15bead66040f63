#pragma once

#include "tiered/chain.hpp"

#include <string>
#include <vector>

namespace tiered {

// Line-oriented design description:
//
//   [options]                      tol = 1e-9, snap_den = 64, ...
//   [tier NAME]                    first tier is the observational one
//   factor NAME LEVELS [abbrev X] [in A B ...] [= codes ...]
//   pseudo NAME LEVELS [abbrev X] [in A ...] = codes ...
//   term A*B*C                     pseudo term labelled from its factors
//   term NAME [abbrev X] = A + B*C pseudo term summing several products
//   [treatments NAME]              last tier
//   [map A -> B]
//   replication N                  optional check
//   assign = i j k ...             target index per source unit
//
// Units of a tier are the full product of its (non-pseudo) factors' levels, in lexicographic
// order of the factor tuple in declaration order. Lines starting with a digit continue the
// previous code list. '#' starts a comment.
ExperimentChain parse_design_spec(const std::string& path);
ExperimentChain parse_design_spec_text(const std::string& text, const Options& base = Options::from_env());

// Canonical text for a chain; parsing the result gives back the same chain.
std::string render_spec(const ExperimentChain& chain);

struct DataFile {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
};

DataFile read_csv(const std::string& path);

// Response vector in observational-unit order. Rows are matched to units through the
// observational tier's factor columns when present, otherwise taken in unit order.
Vec response_vector(const DataFile& data, const ExperimentChain& chain, const std::string& response = "");
Vec read_data_csv(const std::string& path, const ExperimentChain& chain, const std::string& response = "");

}  // namespace tiered
