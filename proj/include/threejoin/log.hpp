#pragma once

#include <string_view>

namespace threejoin::log {

enum class Level { debug, info, warn, error, off };

void set_level(Level level);
Level level();

void info(std::string_view message);
void warn(std::string_view message);
void error(std::string_view message);

}  // namespace threejoin::log
