#include "tiered/options.hpp"

#include <cstdlib>
#include <string>

namespace tiered {

Options Options::from_env() {
  Options o;
  if (const char* v = std::getenv("TIERED_TOL")) {
    try {
      const double t = std::stod(v);
      if (t > 0) o.tol = t;
    } catch (const std::exception&) {
      throw Error(std::string("TIERED_TOL is not a number: ") + v);
    }
  }
  return o;
}

}  // namespace tiered
