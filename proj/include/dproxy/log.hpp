#pragma once

#include <string_view>

namespace dproxy::log {

enum class Level { Error = 0, Info = 1, Debug = 2 };

/// Threshold read once from DPROXY_LOG (error|info|debug); defaults to info.
Level threshold();
void set_threshold(Level level);

void error(std::string_view msg);
void warn(std::string_view msg);  // emitted at info level
void info(std::string_view msg);
void debug(std::string_view msg);

}  // namespace dproxy::log
