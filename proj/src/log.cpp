#include "threejoin/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace threejoin::log {
namespace {

std::atomic<Level> g_level{Level::info};
std::mutex g_mutex;

void emit(Level lvl, std::string_view tag, std::string_view message) {
  if (lvl < g_level.load()) return;
  std::lock_guard lock(g_mutex);
  std::cerr << '[' << tag << "] " << message << '\n';
}

}  // namespace

void set_level(Level lvl) { g_level = lvl; }
Level level() { return g_level.load(); }

void info(std::string_view message) { emit(Level::info, "info", message); }
void warn(std::string_view message) { emit(Level::warn, "warn", message); }
void error(std::string_view message) { emit(Level::error, "error", message); }

}  // namespace threejoin::log
