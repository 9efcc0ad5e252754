#include "xflow/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string_view>

namespace xflow::log {
namespace {

Level level_from_env() {
  const char* env = std::getenv("XFLOW_LOG");
  if (env == nullptr) return Level::Info;
  std::string_view v(env);
  if (v == "error") return Level::Error;
  if (v == "debug") return Level::Debug;
  return Level::Info;
}

std::atomic<Level>& current() {
  static std::atomic<Level> lvl{level_from_env()};
  return lvl;
}

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

Level level() { return current().load(std::memory_order_relaxed); }

void set_level(Level lvl) { current().store(lvl, std::memory_order_relaxed); }

void write(Level lvl, const std::string& msg) {
  static constexpr const char* kTags[] = {"E", "I", "D"};
  std::lock_guard<std::mutex> lock(sink_mutex());
  std::cerr << "[xflow " << kTags[static_cast<int>(lvl)] << "] " << msg << '\n';
}

}  // namespace xflow::log
