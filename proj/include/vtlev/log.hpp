#pragma once

#include <cstdlib>
#include <string>

#include <spdlog/spdlog.h>

namespace vtlev {

/// Reads SIM_LOG (trace|debug|info|warn|error|off) into the default logger.
/// Unset means warn.
inline void init_logging_from_env() {
  const char* env = std::getenv("SIM_LOG");
  const std::string level = env ? env : "warn";
  spdlog::set_level(spdlog::level::from_str(level));
}

}  // namespace vtlev
