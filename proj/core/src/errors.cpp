#include "xflow/errors.hpp"

namespace xflow {

ParseError::ParseError(const std::string& what, std::size_t line)
    : ValidationError(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
      line_(line) {}

}  // namespace xflow
