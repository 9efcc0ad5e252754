#pragma once

#include <sstream>
#include <string>

namespace xflow::log {

enum class Level { Error = 0, Info = 1, Debug = 2 };

/// Current threshold. Initialized once from XFLOW_LOG (error|info|debug),
/// defaulting to info.
Level level();
void set_level(Level lvl);

void write(Level lvl, const std::string& msg);

namespace detail {
template <typename... Args>
std::string concat(const Args&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}
}  // namespace detail

template <typename... Args>
void error(const Args&... args) {
  write(Level::Error, detail::concat(args...));
}

template <typename... Args>
void info(const Args&... args) {
  if (level() >= Level::Info) write(Level::Info, detail::concat(args...));
}

template <typename... Args>
void debug(const Args&... args) {
  if (level() >= Level::Debug) write(Level::Debug, detail::concat(args...));
}

}  // namespace xflow::log
