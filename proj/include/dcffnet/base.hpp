#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcff {

// All precondition violations surface as this exception; the CLI maps it
// to a nonzero exit code.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace dcff

#define DCFF_CHECK(cond, msg)                                  \
  do {                                                         \
    if (!(cond)) ::dcff::fail(std::string("dcff: ") + (msg));  \
  } while (0)
