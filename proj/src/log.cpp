// SPDX-License-Identifier: Apache-2.0
#include "sdnia/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace sdnia::log {
namespace {

std::atomic<Level> g_level{Level::info};
std::mutex g_mutex;
Sink g_sink;

const char* tag(Level lvl) {
  switch (lvl) {
    case Level::debug: return "debug";
    case Level::info: return "info";
    case Level::warn: return "warning";
    case Level::error: return "error";
  }
  return "?";
}

}  // namespace

void set_level(Level lvl) { g_level = lvl; }
Level level() { return g_level; }

Sink set_sink(Sink sink) {
  std::lock_guard lock(g_mutex);
  std::swap(g_sink, sink);
  return sink;
}

void write(Level lvl, const std::string& message) {
  std::lock_guard lock(g_mutex);
  if (g_sink) {
    g_sink(lvl, message);
    return;
  }
  std::cerr << "[sdnia " << tag(lvl) << "] " << message << '\n';
}

}  // namespace sdnia::log
