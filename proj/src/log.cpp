#include "dproxy/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <string>

namespace dproxy::log {

namespace {

Level parse_env() {
  const char* env = std::getenv("DPROXY_LOG");
  if (env == nullptr) return Level::Info;
  const std::string v(env);
  if (v == "error") return Level::Error;
  if (v == "debug") return Level::Debug;
  return Level::Info;
}

std::atomic<int>& level_ref() {
  static std::atomic<int> level{static_cast<int>(parse_env())};
  return level;
}

void emit(Level at, std::string_view tag, std::string_view msg) {
  if (static_cast<int>(at) > level_ref().load()) return;
  std::cerr << "[dproxy " << tag << "] " << msg << '\n';
}

}  // namespace

Level threshold() { return static_cast<Level>(level_ref().load()); }
void set_threshold(Level level) { level_ref().store(static_cast<int>(level)); }

void error(std::string_view msg) { emit(Level::Error, "error", msg); }
void warn(std::string_view msg) { emit(Level::Info, "warn", msg); }
void info(std::string_view msg) { emit(Level::Info, "info", msg); }
void debug(std::string_view msg) { emit(Level::Debug, "debug", msg); }

}  // namespace dproxy::log
